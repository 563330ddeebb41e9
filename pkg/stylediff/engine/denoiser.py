"""
Transformer-decoder denoiser G(x_t, t, prompt) -> x0_hat.

Frames attend to each other (bidirectional self-attention) and to a memory
sequence made of one timestep token followed by the embedded prompt tokens
(cross-attention). Layers are post-norm: h = LN(h + sublayer(h)).

Every linear projection goes through ``_linear`` so LoRA adapters can hook in
by projection name, e.g. ``layers.2.cross.v`` or ``layers.0.ffn.1``.
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from stylediff.engine.diffusion import make_schedule, sample
from stylediff.engine.motion import FeatureStats
from stylediff.engine.tensor import (
    Module,
    Tensor,
    add,
    concat,
    embedding,
    gelu,
    get_default_dtype,
    layer_norm,
    linear,
    load_tensors,
    make_rng,
    matmul,
    mul,
    no_grad,
    reshape,
    save_tensors,
    softmax,
    transpose,
)
from stylediff.errors import MissingArtifactError, ShapeError, VocabularyError
from stylediff.schemas.config import DiffusionConfig, ModelConfig
from stylediff.schemas.report import ModelCard
from stylediff.utils.vocab import Vocabulary

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9
TIME_SCALE = 1000.0
ATTENTION_KINDS = ("self", "cross")
PROJECTIONS = ("q", "k", "v", "o")


class PromptBatch(NamedTuple):
    """Right-padded token ids (B, M) and a mask that is True on real tokens."""
    ids: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def take(self, index) -> "PromptBatch":
        return PromptBatch(self.ids[index], self.mask[index])


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table of shape (length, dim)."""
    return sinusoidal_embedding(np.arange(length, dtype=np.float64), dim)


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        table = np.concatenate([table, np.zeros((len(table), 1))], axis=-1)
    return table


def expected_parameter_count(
    d: int,
    n_layers: int,
    ffn_dim: int,
    n_features: int,
    n_words: int,
    style_slots: int
) -> int:
    """
    Exact trainable-parameter count.

    Per layer: two attention blocks of four d x d matrices with biases
    (8d^2 + 8d), the FFN (2 d ffn + ffn + d) and three layer norms (6d).
    With ffn = 4d a layer holds 16d^2 + 19d parameters.
    """
    per_layer = 8 * d * d + 8 * d + 2 * d * ffn_dim + ffn_dim + d + 6 * d
    io = (n_features * d + d) + (d * n_features + n_features)
    time_mlp = 2 * (d * d + d)
    tables = (n_words + style_slots) * d
    return n_layers * per_layer + io + time_mlp + tables


class Denoiser(Module):
    """x0-predicting transformer decoder with a closed-vocabulary text pathway."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        n_features: int,
        stats: Optional[FeatureStats] = None,
        base_steps: int = 100,
        diffusion: Optional[DiffusionConfig] = None
    ):
        super().__init__()
        if vocab.style_slots != config.style_slots:
            raise ShapeError(f"Vocabulary has {vocab.style_slots} style slots, model config {config.style_slots}")
        self.config = config
        self.vocab = vocab
        self.n_features = n_features
        self.stats = stats or FeatureStats.identity(n_features)
        self.base_steps = base_steps
        self.diffusion = diffusion or DiffusionConfig()
        self.adapters: Dict[str, Any] = {}
        self.adapters_enabled = True
        self.zero_attention = False

        d = config.d_model
        self.head_dim = d // config.n_heads
        dtype = get_default_dtype()
        self.frame_pe = sinusoidal_table(config.max_frames, d).astype(dtype)
        self.text_pe = sinusoidal_table(config.max_prompt_len, d).astype(dtype)

        rng = make_rng(config.seed, 0)
        self._add_linear(rng, "input", n_features, d)
        self._add_linear(rng, "time.fc1", d, d)
        self._add_linear(rng, "time.fc2", d, d)
        self.add_param("tokens.weight", rng.standard_normal((vocab.n_base, d)))
        self.add_param("styles.weight", rng.standard_normal((config.style_slots, d)))
        for layer in range(config.n_layers):
            prefix = f"layers.{layer}"
            for kind in ATTENTION_KINDS:
                for proj in PROJECTIONS:
                    self._add_linear(rng, f"{prefix}.{kind}.{proj}", d, d)
            self._add_linear(rng, f"{prefix}.ffn.1", d, config.ffn_dim)
            self._add_linear(rng, f"{prefix}.ffn.2", config.ffn_dim, d)
            for norm in ("norm1", "norm2", "norm3"):
                self.add_param(f"{prefix}.{norm}.gamma", np.ones(d))
                self.add_param(f"{prefix}.{norm}.beta", np.zeros(d))
        self._add_linear(rng, "output", d, n_features)

    def _add_linear(self, rng: np.random.Generator, name: str, fan_in: int, fan_out: int):
        bound = 1.0 / np.sqrt(fan_in)
        self.add_param(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        self.add_param(f"{name}.bias", rng.uniform(-bound, bound, size=(fan_out,)))

    # ------------------------------------------------------------------
    # Naming helpers
    # ------------------------------------------------------------------

    def projection_names(self) -> List[str]:
        """Every adaptable matrix, in layer order."""
        names = []
        for layer in range(self.config.n_layers):
            for kind in ATTENTION_KINDS:
                names.extend(f"layers.{layer}.{kind}.{proj}" for proj in PROJECTIONS)
            names.extend([f"layers.{layer}.ffn.1", f"layers.{layer}.ffn.2"])
        return names

    def weight(self, name: str) -> Tensor:
        return self._params[f"{name}.weight"]

    @property
    def style_table(self) -> Tensor:
        return self._params["styles.weight"]

    @property
    def token_table(self) -> Tensor:
        return self._params["tokens.weight"]

    def base_parameter_names(self) -> List[str]:
        return [name for name in self._params if name != "styles.weight"]

    def base_state(self) -> Dict[str, np.ndarray]:
        return {name: self._params[name].data for name in self.base_parameter_names()}

    def freeze_base(self):
        """Freeze every base weight; only style-token rows stay trainable."""
        self.set_trainable(False, self.base_parameter_names())
        self.set_trainable(True, ["styles.weight"])

    @contextmanager
    def adapters_disabled(self):
        previous = self.adapters_enabled
        self.adapters_enabled = False
        try:
            yield self
        finally:
            self.adapters_enabled = previous

    # ------------------------------------------------------------------
    # Forward pass
    # ------------------------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        y = linear(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"])
        adapter = self.adapters.get(name)
        if adapter is not None and self.adapters_enabled and not adapter.merged:
            y = add(y, adapter.delta(x))
        return y

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self._params[f"{name}.gamma"], self._params[f"{name}.beta"])

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return transpose(reshape(x, (b, n, self.config.n_heads, self.head_dim)), (0, 2, 1, 3))

    def _attention(self, h: Tensor, memory: Tensor, prefix: str, bias: Optional[np.ndarray]) -> Tensor:
        b, n, d = h.shape
        if self.zero_attention:
            return Tensor(np.zeros((b, n, d), dtype=h.data.dtype))
        q = self._split_heads(self._linear(h, f"{prefix}.q"))
        k = self._split_heads(self._linear(memory, f"{prefix}.k"))
        v = self._split_heads(self._linear(memory, f"{prefix}.v"))
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        if bias is not None:
            scores = add(scores, bias)
        context = matmul(softmax(scores, axis=-1), v)
        merged = reshape(transpose(context, (0, 2, 1, 3)), (b, n, d))
        return self._linear(merged, f"{prefix}.o")

    def embed_prompt(self, ids: np.ndarray) -> Tensor:
        """Table lookup plus text positions; (M,) -> (M, d) or (B, M) -> (B, M, d)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.size):
            raise VocabularyError(f"Token id out of range [0, {self.vocab.size}): {ids.min()}..{ids.max()}")
        m = ids.shape[-1]
        if m > self.config.max_prompt_len:
            raise VocabularyError(f"Prompt of {m} tokens exceeds max_prompt_len={self.config.max_prompt_len}")
        table = concat([self.token_table, self.style_table], axis=0)
        return add(embedding(table, ids), self.text_pe[:m])

    def embed_timestep(self, t: np.ndarray, num_steps: int) -> Tensor:
        """Sinusoid of t rescaled onto [0, 1000] through a two-layer GELU MLP; (B, d)."""
        scaled = np.asarray(t, dtype=np.float64) * (TIME_SCALE / num_steps)
        base = Tensor(sinusoidal_embedding(scaled, self.config.d_model))
        return self._linear(gelu(self._linear(base, "time.fc1")), "time.fc2")

    def forward(
        self,
        x_t: Union[Tensor, np.ndarray],
        t: np.ndarray,
        prompt: PromptBatch,
        num_steps: Optional[int] = None
    ) -> Tensor:
        """
        Predict x0 for a batch.

        x_t is (B, N, F) normalized features, t is (B,) integer steps of a
        ``num_steps``-step chain (defaults to the base training T).
        """
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if x.ndim != 3 or x.shape[-1] != self.n_features:
            raise ShapeError(f"Denoiser expects (B, N, {self.n_features}), got {x.shape}")
        b, n, _ = x.shape
        if n > self.config.max_frames:
            raise ShapeError(f"{n} frames exceed max_frames={self.config.max_frames}")
        if prompt.ids.shape[0] != b:
            raise ShapeError(f"{prompt.ids.shape[0]} prompts for a batch of {b}")
        t = np.broadcast_to(np.asarray(t), (b,))
        steps = num_steps or self.base_steps

        h = add(self._linear(x, "input"), self.frame_pe[:n])
        time_token = reshape(self.embed_timestep(t, steps), (b, 1, self.config.d_model))
        memory = concat([time_token, self.embed_prompt(prompt.ids)], axis=1)
        key_mask = np.concatenate([np.ones((b, 1), dtype=bool), prompt.mask.astype(bool)], axis=1)
        bias = np.where(key_mask, 0.0, MASK_VALUE).astype(x.data.dtype)[:, None, None, :]

        for layer in range(self.config.n_layers):
            prefix = f"layers.{layer}"
            h = self._norm(add(h, self._attention(h, h, f"{prefix}.self", None)), f"{prefix}.norm1")
            h = self._norm(add(h, self._attention(h, memory, f"{prefix}.cross", bias)), f"{prefix}.norm2")
            ffn = self._linear(gelu(self._linear(h, f"{prefix}.ffn.1")), f"{prefix}.ffn.2")
            h = self._norm(add(h, ffn), f"{prefix}.norm3")
        return self._linear(h, "output")

    def __call__(self, x_t, t, prompt: PromptBatch) -> Tensor:
        return self.forward(x_t, t, prompt)

    def bind(self, num_steps: int):
        """A G(x_t, t, cond) callable for a ``num_steps``-step schedule."""
        def denoise_fn(x_t, t, prompt):
            return self.forward(x_t, t, prompt, num_steps=num_steps)
        return denoise_fn

    # ------------------------------------------------------------------
    # Prompts
    # ------------------------------------------------------------------

    def encode_prompts(self, prompts: Sequence[Sequence[str]]) -> PromptBatch:
        ids, mask = self.vocab.batch(prompts)
        if ids.shape[1] > self.config.max_prompt_len:
            raise VocabularyError(f"Prompt exceeds max_prompt_len={self.config.max_prompt_len}")
        return PromptBatch(ids, mask)

    def null_prompts(self, n: int) -> PromptBatch:
        return PromptBatch(*self.vocab.null_batch(n))

    def denoise(self, x_t: np.ndarray, t: int, prompt: Sequence[str], num_steps: Optional[int] = None) -> np.ndarray:
        """Single-sequence convenience: (N, F) in, (N, F) out."""
        with no_grad():
            out = self.forward(np.asarray(x_t)[None], np.array([t]), self.encode_prompts([prompt]), num_steps)
        return out.data[0]


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------

MODEL_WEIGHTS = "model.mdlc"
MODEL_CARD = "model.json"


def save_model(model: Denoiser, directory: Union[str, Path], weights_name: str = MODEL_WEIGHTS):
    """Write weights (+ normalization stats) and the model card."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.state_dict())
    tensors["stats.mean"] = model.stats.mean
    tensors["stats.std"] = model.stats.std
    save_tensors(directory / weights_name, tensors)
    card = ModelCard(
        model=model.config,
        diffusion=model.diffusion,
        n_features=model.n_features,
        base_steps=model.base_steps,
        vocabulary=model.vocab.to_dict(),
    )
    (directory / MODEL_CARD).write_text(card.model_dump_json(indent=2))
    logger.info(f"Saved denoiser ({model.num_parameters()} parameters) to {directory / weights_name}")


def load_model(directory: Union[str, Path], weights_name: str = MODEL_WEIGHTS) -> Denoiser:
    directory = Path(directory)
    weights, card_path = directory / weights_name, directory / MODEL_CARD
    if not weights.is_file() or not card_path.is_file():
        raise MissingArtifactError(f"No trained denoiser in {directory} (need {weights_name} and {MODEL_CARD})")
    card = ModelCard.model_validate_json(card_path.read_text())
    tensors = load_tensors(weights)
    stats = FeatureStats(tensors.pop("stats.mean"), tensors.pop("stats.std"))
    model = Denoiser(
        card.model,
        Vocabulary.from_dict(card.vocabulary),
        card.n_features,
        stats=stats,
        base_steps=card.base_steps,
        diffusion=card.diffusion,
    )
    model.load_state_dict(tensors)
    return model


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------

def generate(
    model: Denoiser,
    prompts: Sequence[Sequence[str]],
    n_frames: int,
    seed: int,
    guidance: Optional[float] = None,
    num_steps: Optional[int] = None,
    batch_size: int = 32
) -> np.ndarray:
    """
    Sample one motion per prompt; returns denormalized (B, N, F) features.

    Prompts are processed in chunks of ``batch_size``; chunk i draws from
    Philox stream (seed, i), so outputs depend only on the seed and the prompt order.
    """
    steps = num_steps or model.diffusion.sample_steps
    guidance = model.diffusion.guidance if guidance is None else guidance
    sched = make_schedule(steps, model.diffusion.schedule)
    G = model.bind(steps)
    chunks = []
    for i, start in enumerate(range(0, len(prompts), batch_size)):
        chunk = prompts[start:start + batch_size]
        cond = model.encode_prompts(chunk)
        uncond = model.null_prompts(len(chunk)) if guidance != 1.0 else None
        chunks.append(sample(
            G, cond, (len(chunk), n_frames, model.n_features), sched, seed,
            guidance=guidance, uncond=uncond, stats=model.stats, stream=i
        ))
    logger.info(f"Generated {len(prompts)} motions of {n_frames} frames (T={steps}, g={guidance})")
    return np.concatenate(chunks, axis=0)
