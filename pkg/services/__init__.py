"""
services package
Numerical services for right-multiplicative subspace-rotation adapters:
linear algebra kernels, transforms, supports, recoveries and the experiment harness.
"""
