import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from stylediff.errors import ConfigError, MissingArtifactError


TargetName = Literal["q", "k", "v", "o", "ffn"]
PriorSource = Literal["dataset", "generated", "mixed"]


class DataConfig(BaseModel):
    """
    Procedural toy dataset parameters.

    Every (action, style) cell receives ``clips_per_cell`` clips; neutral cells
    (one per action) are always generated, style cells only when n_styles > 0.
    """
    n_joints: int = Field(
        default=5, ge=3, le=64,
        description="Skeleton joints J (root, upper-body points, two feet); F = 12J - 1"
    )
    n_actions: int = Field(default=3, ge=1, le=5, description="walk, run, idle, sidestep, backwards")
    n_styles: int = Field(default=4, ge=0, le=8, description="Number of registry styles to synthesize")
    clips_per_cell: int = Field(default=8, ge=1, le=10000)
    style_clips_per_cell: Optional[int] = Field(
        default=None, ge=1, le=10000,
        description="Clips per stylized cell. None = clips_per_cell"
    )
    frames: int = Field(default=60, ge=16, le=4096)
    noise: float = Field(default=0.003, ge=0.0, le=0.1, description="Gaussian jitter on joint positions")
    seed: int = Field(default=0, ge=0)


class ModelConfig(BaseModel):
    """Denoiser dimensions. Desk scale by default; full scale is L=8, d=512."""
    d_model: int = Field(default=64, ge=4, le=4096)
    n_layers: int = Field(default=4, ge=1, le=64)
    n_heads: int = Field(default=4, ge=1, le=64)
    ffn_dim: int = Field(default=256, ge=4, le=16384)
    max_frames: int = Field(default=512, ge=16, le=8192)
    max_prompt_len: int = Field(default=24, ge=2, le=512)
    style_slots: int = Field(default=8, ge=1, le=256, description="Reserved style-token rows K_style")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self


class DiffusionConfig(BaseModel):
    """Schedule shape and sampling controls shared by both training phases."""
    schedule: Literal["cosine", "linear"] = "cosine"
    sample_steps: int = Field(
        default=100, ge=2, le=10000,
        description="T used when sampling; the denoiser sees t/T so any T is accepted"
    )
    guidance: float = Field(default=2.5, ge=0.0, le=50.0, description="Classifier-free guidance scale g")


class TrainConfig(BaseModel):
    """
    One training phase.

    ``base`` minimizes L_simple on neutral clips; ``lora`` minimizes
    L_style + prior_weight * L_prior with only adapters and style tokens trainable.
    """
    phase: Literal["base", "lora"] = "base"
    steps: int = Field(default=3000, ge=1, le=10_000_000)
    batch_size: Optional[int] = Field(
        default=32, ge=1, le=4096,
        description="Base: clips per step. LoRA: None = the full style set every step"
    )
    lr: float = Field(default=5e-4, gt=0.0, le=1.0)
    prior_weight: float = Field(default=1.0, ge=0.0, description="lambda, ignored in the base phase")
    diffusion_steps: int = Field(default=100, ge=2, le=10000, description="T for this phase")
    cond_dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)
    prior_source: PriorSource = "dataset"
    prior_pool: int = Field(default=64, ge=1, description="Generated prior clips drawn before fine-tuning")
    style_names: List[str] = Field(default_factory=list)
    grad_clip: Optional[float] = Field(default=None, gt=0.0)
    checkpoint_every: int = Field(default=500, ge=1)
    log_every: int = Field(default=50, ge=1)

    @classmethod
    def base_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**{"phase": "base", **overrides})

    @classmethod
    def lora_defaults(cls, **overrides) -> "TrainConfig":
        values = {
            "phase": "lora",
            "steps": 4000,
            "batch_size": None,
            "lr": 1e-5,
            "prior_weight": 1.0,
            "diffusion_steps": 1000,
            "cond_dropout": 0.0,
            "grad_clip": 1.0,
        }
        values.update(overrides)
        return cls(**values)


class LoraConfig(BaseModel):
    """Adapter rank, targets and scale."""
    rank: int = Field(default=5, ge=1, le=1024)
    scale: float = Field(default=1.0, gt=0.0)
    targets: List[TargetName] = Field(default_factory=lambda: ["q", "k", "v"], min_length=1)
    seed: int = Field(default=0, ge=0)


class EvalConfig(BaseModel):
    """Evaluator training and metric sampling parameters."""
    classifier_channels: int = Field(default=64, ge=4)
    classifier_epochs: int = Field(default=150, ge=1)
    classifier_lr: float = Field(default=5e-4, gt=0.0)
    classifier_batch: int = Field(default=64, ge=1)
    encoder_dim: int = Field(default=32, ge=2)
    encoder_channels: int = Field(default=64, ge=4)
    encoder_epochs: int = Field(default=150, ge=1)
    encoder_lr: float = Field(default=1e-3, gt=0.0)
    encoder_batch: int = Field(default=32, ge=2)
    temperature: float = Field(default=0.1, gt=0.0)
    n_pairs: int = Field(default=300, ge=1)
    r_precision_batch: int = Field(default=32, ge=2)
    n_samples: int = Field(default=32, ge=1, description="Generated clips per evaluated condition")
    seed: int = Field(default=0, ge=0)


class RunConfig(BaseModel):
    """Full resolved configuration of one invocation, echoed as config.json."""
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    base: TrainConfig = Field(default_factory=TrainConfig.base_defaults)
    lora: TrainConfig = Field(default_factory=TrainConfig.lora_defaults)
    adapter: LoraConfig = Field(default_factory=LoraConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    preset: str = "desk"

    @model_validator(mode="after")
    def _phases_match(self):
        if self.base.phase != "base" or self.lora.phase != "lora":
            raise ValueError("base/lora sections must declare phase 'base' and 'lora'")
        return self


# Named presets, expressed as dotted overrides on top of the defaults.
# desk raises the LoRA learning rate so a d=64 model moves within 4K steps.
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "lora.lr": 1e-3,
    },
    "main": {
        "adapter.rank": 5,
        "lora.prior_weight": 1.0,
        "lora.steps": 4000,
        "lora.lr": 1e-5,
    },
    "ablation-best": {
        "adapter.rank": 5,
        "lora.prior_weight": 0.25,
        "lora.steps": 4000,
        "lora.lr": 1e-5,
    },
    "full-scale": {
        "model.n_layers": 8,
        "model.d_model": 512,
        "model.n_heads": 8,
        "model.ffn_dim": 2048,
        "base.diffusion_steps": 100,
        "base.batch_size": 64,
        "base.steps": 500_000,
        "data.n_joints": 22,
    },
}


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Return a re-validated copy with dotted keys (``lora.prior_weight``) replaced."""
    payload = config.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = payload
        *parents, leaf = dotted.split(".")
        for key in parents:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"Unknown config section '{dotted}'")
            node = node[key]
        if leaf not in node:
            raise ConfigError(f"Unknown config key '{dotted}'")
        node[leaf] = value
    return validate_run_config(payload)


def validate_run_config(payload: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def preset_config(name: str = "desk") -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'. Available: {', '.join(PRESETS)}")
    return apply_overrides(RunConfig(preset=name), PRESETS[name])


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Resolve a RunConfig: preset defaults, then the TOML/JSON file, then overrides.
    """
    file_values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError(f"Config file not found: {path}")
        try:
            if path.suffix == ".toml":
                file_values = tomllib.loads(path.read_text())
            else:
                file_values = json.loads(path.read_text())
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e

    name = preset or file_values.pop("preset", None) or "desk"
    config = preset_config(name)
    flat = _flatten(file_values)
    config = apply_overrides(config, flat)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _flatten(values: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(_flatten(value, prefix=f"{dotted}."))
        else:
            out[dotted] = value
    return out
