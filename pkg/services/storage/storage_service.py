"""
storage_service.py
Artifact storage: matrix CSV files, fixed-schema table CSVs, JSON reports, SVG plots
and the adapter envelope. Every writer returns the path it wrote so callers can list
it in the run manifest.
"""
import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from services.exceptions import ConfigError, MatrixFormatError
from services.linalg.linalg_service import Matrix, as_matrix
from services.loft.loft_service import LoftAdapter, LoftFactor, SupportBasis
from services.orthogonal.orthogonal_service import SkewParam, TransformSpec

logger = logging.getLogger(__name__)

ADAPTER_FILE = "adapter.json"


def _format_cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def read_matrix_csv(path) -> Matrix:
    """
    Read a header-less row-major matrix CSV.

    Raises:
        MatrixFormatError: On empty files, ragged rows or non-numeric cells (with path:line)
        OSError: If the file cannot be opened
    """
    path = Path(path)
    rows: list[list[float]] = []
    width: Optional[int] = None
    with path.open(newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise MatrixFormatError(str(path), line_no, f"ragged row: {len(row)} cells, expected {width}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as e:
                raise MatrixFormatError(str(path), line_no, f"non-numeric cell ({e})") from e
    if not rows:
        raise MatrixFormatError(str(path), 1, "empty matrix file")
    try:
        return as_matrix(rows, path.name)
    except ValueError as e:
        raise MatrixFormatError(str(path), 1, str(e)) from e


def write_matrix_csv(path, m) -> Path:
    """Write a matrix as header-less CSV using shortest round-trip float text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = as_matrix(m, path.name)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in m:
            writer.writerow([repr(float(x)) for x in row])
    return path


def write_table_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a table with a fixed header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            if len(row) != len(header):
                raise ConfigError(f"row {list(row)} does not match header {list(header)}")
            writer.writerow([_format_cell(v) for v in row])
    return path


def write_json(path, payload: Any) -> Path:
    """Write JSON with sorted keys and a trailing newline, so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json", by_alias=True)
    elif isinstance(payload, list):
        payload = [p.model_dump(mode="json", by_alias=True) if isinstance(p, BaseModel) else p for p in payload]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_line_plot_svg(path, x: Sequence[float], series: dict[str, Sequence[float]],
                        xlabel: str = "step", ylabel: str = "loss", title: Optional[str] = None) -> Path:
    """Render one line per series as a standalone SVG file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in series.items():
        ax.plot(list(x)[: len(values)], list(values), label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


class FactorEnvelope(BaseModel):
    """One factor entry in adapter.json; support/transform name sibling CSV files."""
    model_config = ConfigDict(extra="forbid")

    provenance: str
    kind: str
    r: int
    support: str
    transform: str


class AdapterEnvelope(BaseModel):
    """adapter.json: dimensions, base weight file and the ordered factor list."""
    model_config = ConfigDict(extra="forbid")

    d_in: int
    d_out: int
    base_weight: str
    factors: list[FactorEnvelope]


def save_adapter(adapter: LoftAdapter, directory) -> list[Path]:
    """
    Write adapter.json plus W0.csv, P_<i>.csv and E_<i>.csv or T_<i>.csv.

    Returns:
        Every path written, envelope last
    """
    directory = Path(directory)
    written = [write_matrix_csv(directory / "W0.csv", adapter.base_weight)]
    entries = []
    for i, f in enumerate(adapter.factors):
        support_name = f"P_{i}.csv"
        written.append(write_matrix_csv(directory / support_name, f.support.p))
        if f.transform.kind == "orthogonal":
            transform_name = f"E_{i}.csv"
            written.append(write_matrix_csv(directory / transform_name, f.transform.skew.matrix))
        else:
            transform_name = f"T_{i}.csv"
            written.append(write_matrix_csv(directory / transform_name, f.transform.dense))
        entries.append(FactorEnvelope(
            provenance=f.support.provenance,
            kind=f.transform.kind,
            r=f.support.r,
            support=support_name,
            transform=transform_name,
        ))
    envelope = AdapterEnvelope(d_in=adapter.d_in, d_out=adapter.d_out, base_weight="W0.csv", factors=entries)
    written.append(write_json(directory / ADAPTER_FILE, envelope))
    logger.info(f"✓ Adapter saved to {directory} ({len(entries)} factor(s)).")
    return written


def load_adapter(directory) -> LoftAdapter:
    """
    Read an adapter written by save_adapter.

    Raises:
        ConfigError: If the envelope disagrees with the matrix files
    """
    directory = Path(directory)
    envelope = AdapterEnvelope.model_validate_json((directory / ADAPTER_FILE).read_text())
    w0 = read_matrix_csv(directory / envelope.base_weight)
    if w0.shape != (envelope.d_out, envelope.d_in):
        raise ConfigError(f"W0 has shape {w0.shape}, envelope says ({envelope.d_out}, {envelope.d_in})")

    factors = []
    for i, entry in enumerate(envelope.factors):
        support = SupportBasis(p=read_matrix_csv(directory / entry.support), provenance=entry.provenance)
        if support.r != entry.r:
            raise ConfigError(f"factor {i}: support has width {support.r}, envelope says {entry.r}")
        m = read_matrix_csv(directory / entry.transform)
        if entry.kind == "orthogonal":
            transform = TransformSpec.orthogonal(entry.r, SkewParam.from_matrix(m))
        elif entry.kind == "free":
            transform = TransformSpec(kind="free", dense=m)
        elif entry.kind == "fixed":
            transform = TransformSpec.fixed(m)
        else:
            raise ConfigError(f"factor {i}: unknown transform kind '{entry.kind}'")
        factors.append(LoftFactor(support=support, transform=transform))
    return LoftAdapter(base_weight=w0, factors=tuple(factors))
