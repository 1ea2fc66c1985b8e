"""
models.py
Run configuration and manifest models for the command-line surface
"""
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from services.recoveries.recoveries_service import RecoveryConfig
from services.support.support_service import SupportRequest
from services.sweeps.sweeps_service import SweepConfig
from services.tasks.tasks_service import CalibrationConfig, TaskConfig
from services.training.training_service import TrainConfig


class ProbeSection(BaseModel):
    """Extra outputs of the probe command"""
    model_config = ConfigDict(extra="forbid")

    early_validation: bool = False


class RecoverSection(BaseModel):
    """Methods to recover and the base weight they are checked on"""
    model_config = ConfigDict(extra="forbid")

    d_out: int = Field(default=6, ge=1)
    d_in: int = Field(default=8, ge=1)
    seed: int = 0
    methods: list[RecoveryConfig] = Field(min_length=1)


class RunConfig(BaseModel):
    """JSON config file shared by probe, train, sweep and recover"""
    model_config = ConfigDict(extra="forbid")

    task: Optional[TaskConfig] = None
    supports: list[SupportRequest] = Field(default_factory=list)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    transform: Literal["orthogonal", "free"] = "orthogonal"
    probe: ProbeSection = Field(default_factory=ProbeSection)
    sweep: Optional[SweepConfig] = None
    recover: Optional[RecoverSection] = None


class RunManifest(BaseModel):
    """manifest.json written next to every command's outputs"""
    command: str
    config_hash: str
    seeds: list[int]
    started_at: str
    finished_at: str
    version: str
    files: list[str]
