"""
Low-rank adapters on frozen denoiser matrices.

An adapter wraps one weight W0 of shape (d, k) (out, in) with factors
A (d x r) and B (r x k): the wrapped layer computes x W0^T + scale (x B^T) A^T
without materializing the d x k update. A is Gaussian with variance 1/r and B
starts at zero, so a freshly attached adapter changes nothing.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from stylediff.engine.denoiser import Denoiser
from stylediff.engine.tensor import (
    Tensor,
    add,
    checksum,
    get_default_dtype,
    linear,
    load_tensors,
    make_rng,
    matmul,
    mul,
    save_tensors,
    transpose,
)
from stylediff.errors import (
    ConfigError,
    ContractViolation,
    LayoutError,
    MissingArtifactError,
    ShapeError,
    VocabularyError,
)
from stylediff.schemas.config import TrainConfig
from stylediff.schemas.report import AdapterCard

logger = logging.getLogger(__name__)

STYLE_INIT_NOISE = 0.01
ADAPTER_WEIGHTS = "adapter.mdlc"


class TargetFlag(str, Enum):
    WQ = "q"
    WK = "k"
    WV = "v"
    WO = "o"
    FFN = "ffn"


DEFAULT_TARGETS = (TargetFlag.WQ, TargetFlag.WK, TargetFlag.WV)


def parse_targets(values: Union[str, Iterable[Union[str, TargetFlag]]]) -> List[TargetFlag]:
    """``"q,k,v"`` or ``["q", "k"]`` -> flags, in canonical order."""
    if isinstance(values, str):
        values = [v for v in values.replace("+", ",").split(",") if v.strip()]
    flags = set()
    for value in values:
        try:
            flags.add(TargetFlag(value.strip().lower() if isinstance(value, str) else value))
        except ValueError:
            raise ConfigError(f"Unknown adapter target '{value}' (expected q, k, v, o or ffn)")
    if not flags:
        raise ConfigError("At least one adapter target is required")
    return [flag for flag in TargetFlag if flag in flags]


def targets_label(flags: Sequence[TargetFlag]) -> str:
    return ",".join(flag.value for flag in flags)


class LoraAdapter:
    """Factor pair (A, B) of rank r for one target matrix."""

    def __init__(
        self,
        target_id: str,
        out_features: int,
        in_features: int,
        rank: int,
        scale: float = 1.0,
        rng: Optional[np.random.Generator] = None
    ):
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        if rank > min(out_features, in_features) / 4:
            logger.warning(
                f"Rank {rank} on {target_id} ({out_features}x{in_features}) is above min(d, k)/4; "
                f"the update is no longer low-rank in any useful sense"
            )
        rng = rng or make_rng(0)
        self.target_id = target_id
        self.rank = rank
        self.scale = scale
        self.merged = False
        self.A = Tensor(rng.normal(0.0, np.sqrt(1.0 / rank), size=(out_features, rank)),
                        requires_grad=True, name=f"{target_id}.A")
        self.B = Tensor(np.zeros((rank, in_features)), requires_grad=True, name=f"{target_id}.B")

    @property
    def shape(self):
        return (self.A.shape[0], self.B.shape[1])

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def parameters(self) -> List[Tensor]:
        return [self.A, self.B]

    def delta(self, x: Tensor) -> Tensor:
        """scale * A (B x) for row-vector inputs x (..., k)."""
        return mul(matmul(matmul(x, transpose(self.B)), transpose(self.A)), self.scale)

    def delta_weight(self) -> np.ndarray:
        """Materialized scale * A B, shape (d, k)."""
        return self.scale * (self.A.data.astype(np.float64) @ self.B.data.astype(np.float64))


def apply(W0: Union[Tensor, np.ndarray], adapter: LoraAdapter, x: Union[Tensor, np.ndarray]) -> Tensor:
    """y = W0 x + scale A (B x), row-vector convention."""
    W0 = W0 if isinstance(W0, Tensor) else Tensor(W0)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(W0.shape) != adapter.shape:
        raise ShapeError(f"Adapter {adapter.target_id} is {adapter.shape}, base matrix is {W0.shape}")
    if x.shape[-1] != W0.shape[1]:
        raise ShapeError(f"Input {x.shape} does not match base matrix {W0.shape}")
    return add(linear(x, W0), adapter.delta(x))


def numerical_rank(matrix: np.ndarray, rtol: float = 1e-6) -> int:
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0 or singular[0] == 0:
        return 0
    return int((singular > rtol * singular[0]).sum())


def base_checksum(model: Denoiser) -> str:
    """Digest of every base weight (style-token rows excluded)."""
    return checksum(model.base_state())


def _target_names(model: Denoiser, flags: Sequence[TargetFlag]) -> List[str]:
    names = []
    for layer in range(model.config.n_layers):
        for kind in ("self", "cross"):
            for flag in (TargetFlag.WQ, TargetFlag.WK, TargetFlag.WV, TargetFlag.WO):
                if flag in flags:
                    names.append(f"layers.{layer}.{kind}.{flag.value}")
        if TargetFlag.FFN in flags:
            names.extend([f"layers.{layer}.ffn.1", f"layers.{layer}.ffn.2"])
    return names


class AdapterSet:
    """
    All adapters attached to one denoiser plus the style tokens they were
    trained with. Several styles may share one set (joint training).
    """

    def __init__(
        self,
        model: Denoiser,
        adapters: Dict[str, LoraAdapter],
        targets: Sequence[TargetFlag],
        rank: int,
        scale: float = 1.0,
        seed: int = 0
    ):
        self.model = model
        self.adapters = adapters
        self.targets = list(targets)
        self.rank = rank
        self.scale = scale
        self.seed = seed
        self.style_tokens: Dict[str, int] = {}
        self.merged = False

    def __len__(self):
        return len(self.adapters)

    def parameters(self, include_styles: bool = True) -> List[Tensor]:
        """The trainable set: every A and B, plus the style-token table."""
        params = [p for adapter in self.adapters.values() for p in adapter.parameters()]
        if include_styles:
            params.append(self.model.style_table)
        return params

    def num_parameters(self) -> int:
        return sum(adapter.num_params for adapter in self.adapters.values())

    def new_style_token(self, name: str, rng: Optional[np.random.Generator] = None) -> int:
        """Reserve ``<name>`` and initialize it at the mean word embedding plus N(0, 0.01^2) noise."""
        token_id = self.model.vocab.add_style(name)
        slot = token_id - self.model.vocab.n_base
        rng = rng or make_rng(self.seed, 1000 + slot)
        mean = self.model.token_table.data.mean(axis=0)
        self.model.style_table.data[slot] = mean + rng.normal(0.0, STYLE_INIT_NOISE, size=mean.shape)
        self.style_tokens[name] = token_id
        logger.info(f"New style token <{name}> -> id {token_id}")
        return token_id

    def style_embedding(self, name: str) -> np.ndarray:
        return self.model.style_table.data[self.style_tokens[name] - self.model.vocab.n_base]

    def merge(self):
        """Bake scale * A B into every target weight."""
        if self.merged:
            raise ContractViolation("Adapters are already merged")
        for name, adapter in self.adapters.items():
            weight = self.model.weight(name)
            weight.data = (weight.data + adapter.delta_weight()).astype(weight.data.dtype)
            adapter.merged = True
        self.merged = True

    def unmerge(self):
        if not self.merged:
            raise ContractViolation("Adapters are not merged")
        for name, adapter in self.adapters.items():
            weight = self.model.weight(name)
            weight.data = (weight.data - adapter.delta_weight()).astype(weight.data.dtype)
            adapter.merged = False
        self.merged = False

    def detach(self):
        """Remove the adapters from the model (merged weights stay merged)."""
        for name in self.adapters:
            self.model.adapters.pop(name, None)


def attach(
    model: Denoiser,
    targets: Union[str, Sequence[Union[str, TargetFlag]]] = DEFAULT_TARGETS,
    r: int = 5,
    seed: int = 0,
    scale: float = 1.0
) -> AdapterSet:
    """
    Wrap every selected matrix in every layer and freeze the base weights.

    With targets {q, k, v} on an L-layer model this creates 2 * 3 * L adapters
    (self- and cross-attention).

    Args:
        model: Denoiser to adapt; it must not carry adapters yet
        targets: Comma list or flags naming the adapted matrices (q, k, v, o, ffn)
        r: Adapter rank
        seed: Seed for the A initialization
        scale: Multiplier on every low-rank update

    Returns:
        The new AdapterSet, already hooked into ``model``
    """
    flags = parse_targets(targets)
    if r < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {r}")
    if model.adapters:
        raise ConfigError("Model already carries adapters; detach them first")

    rng = make_rng(seed, 7)
    adapters: Dict[str, LoraAdapter] = {}
    for name in _target_names(model, flags):
        out_features, in_features = model.weight(name).shape
        adapter = LoraAdapter(name, out_features, in_features, r, scale, rng)
        adapters[name] = adapter
        model.adapters[name] = adapter
    model.freeze_base()

    adapter_set = AdapterSet(model, adapters, flags, r, scale, seed)
    logger.info(
        f"Attached {len(adapters)} rank-{r} adapters on {targets_label(flags)} "
        f"({adapter_set.num_parameters()} trainable parameters, "
        f"{100.0 * adapter_set.num_parameters() / model.num_parameters():.2f}% of the base)"
    )
    return adapter_set


def save_adapter(adapter_set: AdapterSet, path: Union[str, Path], training: Optional[TrainConfig] = None):
    """Write A, B and style-token rows to ``path`` and the card next to it (.json)."""
    path = Path(path)
    if path.is_dir() or not path.suffix:
        path = path / ADAPTER_WEIGHTS
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: Dict[str, np.ndarray] = {}
    for name, adapter in adapter_set.adapters.items():
        tensors[f"{name}.A"] = adapter.A.data
        tensors[f"{name}.B"] = adapter.B.data
    for style in adapter_set.style_tokens:
        tensors[f"style.{style}"] = adapter_set.style_embedding(style)
    save_tensors(path, tensors)

    card = AdapterCard(
        rank=adapter_set.rank,
        scale=adapter_set.scale,
        targets=[flag.value for flag in adapter_set.targets],
        style_tokens=dict(adapter_set.style_tokens),
        adapter_names=list(adapter_set.adapters),
        training=training,
    )
    path.with_suffix(".json").write_text(card.model_dump_json(indent=2))
    logger.info(f"Saved {len(adapter_set)} adapters and {len(adapter_set.style_tokens)} style tokens to {path}")


def _tensor(tensors: Dict[str, np.ndarray], key: str, path: Path) -> np.ndarray:
    if key not in tensors:
        raise LayoutError(f"{path} has no tensor '{key}'")
    return tensors[key]


def load_adapter(path: Union[str, Path], model: Denoiser) -> AdapterSet:
    """
    Attach the stored adapters to ``model``; shapes must match its weights.

    Every check runs before the model or its vocabulary is touched, so a
    rejected adapter leaves the model as it was.
    """
    path = Path(path)
    if path.is_dir() or not path.suffix:
        path = path / ADAPTER_WEIGHTS
    card_path = path.with_suffix(".json")
    if not path.is_file() or not card_path.is_file():
        raise MissingArtifactError(f"No adapter at {path} (need {path.name} and {card_path.name})")
    card = AdapterCard.model_validate_json(card_path.read_text())
    tensors = load_tensors(path)

    for name in card.adapter_names:
        if f"{name}.weight" not in model.named_parameters():
            raise ShapeError(f"Adapter target {name} does not exist in the base model")
        expected_out, expected_in = model.weight(name).shape
        a_shape = _tensor(tensors, f"{name}.A", path).shape
        b_shape = _tensor(tensors, f"{name}.B", path).shape
        if a_shape != (expected_out, card.rank) or b_shape != (card.rank, expected_in):
            raise ShapeError(
                f"Adapter {name}: A {a_shape} / B {b_shape} do not fit base weight "
                f"({expected_out}, {expected_in}) at rank {card.rank}"
            )

    vocab = model.vocab
    styles = sorted(card.style_tokens.items(), key=lambda kv: kv[1])
    n_registered = len(vocab.style_names)
    for style, token_id in styles:
        if vocab.has_style(style):
            assigned = vocab.style_id(style)
        else:
            assigned = vocab.n_base + n_registered
            n_registered += 1
        if assigned != token_id:
            raise ShapeError(f"Style <{style}> was saved as id {token_id} but maps to {assigned} here")
        row = _tensor(tensors, f"style.{style}", path)
        if row.shape != (model.config.d_model,):
            raise ShapeError(f"Style <{style}> embedding {row.shape} vs d_model={model.config.d_model}")
    if n_registered > vocab.style_slots:
        raise VocabularyError(f"Adapter needs {n_registered} style slots, the model has {vocab.style_slots}")

    adapter_set = attach(model, card.targets, card.rank, scale=card.scale)
    dtype = get_default_dtype()
    for name, adapter in adapter_set.adapters.items():
        adapter.A.data = tensors[f"{name}.A"].astype(dtype)
        adapter.B.data = tensors[f"{name}.B"].astype(dtype)

    for style, token_id in styles:
        if not vocab.has_style(style):
            vocab.add_style(style)
        model.style_table.data[token_id - vocab.n_base] = tensors[f"style.{style}"]
        adapter_set.style_tokens[style] = token_id
    return adapter_set
