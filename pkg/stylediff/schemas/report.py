import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel, Field, field_validator

from stylediff.errors import NumericalError
from stylediff.schemas.config import DataConfig, DiffusionConfig, ModelConfig, TrainConfig


class TrainLogEntry(BaseModel):
    """One optimizer step."""
    step: int = Field(..., ge=0)
    loss: float
    style_loss: Optional[float] = None   # lora phase only
    prior_loss: Optional[float] = None   # lora phase, None when lambda = 0
    grad_norm: float = 0.0
    wall_time: float = 0.0               # seconds since the run started
    checkpoint: bool = False


class TrainLog(BaseModel):
    """Per-step telemetry of one training run, written as JSON lines."""
    phase: str
    entries: List[TrainLogEntry] = Field(default_factory=list)

    def append(self, entry: TrainLogEntry):
        if self.entries and entry.step <= self.entries[-1].step:
            raise ValueError(f"Train log steps must increase: {entry.step} after {self.entries[-1].step}")
        if not math.isfinite(entry.loss):
            raise NumericalError(f"Non-finite loss at step {entry.step}")
        self.entries.append(entry)

    def losses(self) -> List[float]:
        return [e.loss for e in self.entries]

    @property
    def checkpoint_steps(self) -> List[int]:
        return [e.step for e in self.entries if e.checkpoint]

    def write_jsonl(self, path: Union[str, Path]):
        with open(path, "w") as f:
            for entry in self.entries:
                f.write(entry.model_dump_json() + "\n")

    @classmethod
    def read_jsonl(cls, path: Union[str, Path], phase: str = "base") -> "TrainLog":
        log = cls(phase=phase)
        with open(path) as f:
            for line in f:
                if line.strip():
                    log.append(TrainLogEntry.model_validate_json(line))
        return log


class ModelCard(BaseModel):
    """model.json: everything needed to rebuild a Denoiser around model.mdlc."""
    model: ModelConfig
    diffusion: DiffusionConfig
    n_features: int
    base_steps: int = Field(..., ge=2, description="T the base model was trained with")
    vocabulary: dict


class AdapterCard(BaseModel):
    """adapter.json sidecar; adapter.mdlc holds only A, B and style-token rows."""
    rank: int
    scale: float
    targets: List[str]
    style_tokens: Dict[str, int]
    adapter_names: List[str] = Field(default_factory=list)
    training: Optional[TrainConfig] = Field(default=None, description="Fine-tuning phase that produced the adapter")


class EvaluatorCard(BaseModel):
    """JSON sidecar of a saved evaluator (classifier.json or dual_encoder.json)."""
    kind: str
    n_features: int
    channels: int
    n_styles: int = 0
    style_names: List[str] = Field(default_factory=list)
    embed_dim: int = 0
    vocabulary: Optional[dict] = None
    val_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)


class EvalReport(BaseModel):
    """
    Metrics for one set of clips.

    SRA fields are None for sets without intended style labels (e.g. neutral
    generations); R-precision / MM-Dist are None when prompts are unavailable.
    """
    label: str
    n_clips: int = Field(..., ge=0)
    n_real: int = Field(default=0, ge=0)

    # Style fidelity
    sra_top1: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    sra_top3: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    sra_top5: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    sra_top5_no_action: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    sra_top5_character: Optional[float] = Field(default=None, ge=0.0, le=1.0)

    # Motion quality
    fid: Optional[float] = Field(default=None, ge=0.0)
    foot_skating: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    diversity: Optional[float] = Field(default=None, ge=0.0)
    diversity_real: Optional[float] = Field(default=None, ge=0.0)
    diversity_gap: Optional[float] = Field(default=None, ge=0.0)

    # Text fidelity
    r_precision_top1: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    r_precision_top2: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    r_precision_top3: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    mm_dist: Optional[float] = Field(default=None, ge=0.0)

    @field_validator("*")
    @classmethod
    def _finite(cls, value):
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError("metrics must be finite")
        return value


TABLE_COLUMNS = [
    ("label", "Set"),
    ("r_precision_top3", "R-prec@3"),
    ("fid", "FID"),
    ("foot_skating", "Skate"),
    ("mm_dist", "MM-Dist"),
    ("diversity", "Div"),
    ("diversity_gap", "|Div-Real|"),
    ("sra_top1", "SRA@1"),
    ("sra_top5", "SRA@5"),
    ("sra_top5_no_action", "SRA@5 -act"),
    ("sra_top5_character", "SRA@5 char"),
    ("n_clips", "N"),
]


def reports_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    frame = pd.DataFrame([r.model_dump() for r in reports])
    keys = [k for k, _ in TABLE_COLUMNS]
    return frame[keys].rename(columns=dict(TABLE_COLUMNS))


def format_reports(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table, one row per evaluated set."""
    frame = reports_frame(reports)
    return frame.to_string(index=False, na_rep="-", float_format=lambda v: f"{v:.4f}")


SWEEP_COLUMNS = ["rank", "lambda", "sra_top5", "r_precision_top3", "fid", "mm_dist", "foot_skating", "diversity"]


class SweepRow(BaseModel):
    """One cell of the ablation grid."""
    rank: int
    prior_weight: float = Field(..., serialization_alias="lambda")
    prior_source: str = "dataset"
    targets: str = "q,k,v"
    seed: int = 0
    report: EvalReport

    def flat(self) -> dict:
        r = self.report
        return {
            "rank": self.rank,
            "lambda": self.prior_weight,
            "sra_top5": r.sra_top5,
            "r_precision_top3": r.r_precision_top3,
            "fid": r.fid,
            "mm_dist": r.mm_dist,
            "foot_skating": r.foot_skating,
            "diversity": r.diversity,
            "prior_source": self.prior_source,
            "targets": self.targets,
            "seed": self.seed,
        }


class DatasetCard(BaseModel):
    """dataset.json written by gen-data next to neutral/ and styles/."""
    data: DataConfig
    action_names: List[str]
    style_names: List[str]
    n_neutral: int
    n_styled: int


class GenerationSummary(BaseModel):
    """summary.json written by generate / mix."""
    prompt: List[str]
    styles: List[str] = Field(default_factory=list)
    n: int
    n_frames: int
    seed: int
    guidance: float
    sample_steps: int
    files: List[str] = Field(default_factory=list)
