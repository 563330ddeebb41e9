"""
Learned evaluators: the style classifier behind SRA and the motion/text
embedding space, and the contrastive dual encoder behind R-precision and
MM-Dist.

Both are small 1D ConvNets over time-major features (B, N, F). They are
trained here, from the real data, and never take part in generation.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from stylediff.engine.motion import FeatureStats, LabeledClip, MotionSequence, normalize, stack_features
from stylediff.engine.tensor import (
    Adam,
    Module,
    Tensor,
    add,
    backward,
    conv1d,
    cross_entropy,
    div,
    embedding,
    get_default_dtype,
    l2_normalize,
    linear,
    load_tensors,
    make_rng,
    matmul,
    mul,
    no_grad,
    relu,
    save_tensors,
    soft_cross_entropy,
    tmean,
    tsum,
    transpose,
)
from stylediff.errors import ConfigError, MissingArtifactError
from stylediff.schemas.config import EvalConfig
from stylediff.schemas.report import EvaluatorCard
from stylediff.utils.vocab import Vocabulary, strip_style

logger = logging.getLogger(__name__)

ClipsLike = Union[np.ndarray, Sequence[Union[LabeledClip, MotionSequence, np.ndarray]]]
KERNEL = 3


def as_batch(clips: ClipsLike) -> np.ndarray:
    """Stack clips (or pass through a (B, N, F) array) as float features."""
    if isinstance(clips, np.ndarray):
        if clips.ndim == 2:
            return clips[None].astype(np.float32)
        return clips.astype(np.float32)
    return stack_features(clips)


class ConvBackbone:
    """Two same-padded kernel-3 convolutions with ReLU, then temporal mean pooling."""

    def __init__(self, module: Module, prefix: str, n_features: int, channels: int, rng: np.random.Generator):
        self.prefix = prefix
        for name, c_in in (("conv1", n_features), ("conv2", channels)):
            bound = 1.0 / np.sqrt(c_in * KERNEL)
            module.add_param(f"{prefix}.{name}.weight", rng.uniform(-bound, bound, size=(channels, c_in, KERNEL)))
            module.add_param(f"{prefix}.{name}.bias", rng.uniform(-bound, bound, size=(channels,)))
        self.module = module

    def __call__(self, x: np.ndarray) -> Tensor:
        p = self.module.named_parameters()
        h = relu(conv1d(Tensor(x), p[f"{self.prefix}.conv1.weight"], p[f"{self.prefix}.conv1.bias"]))
        h = relu(conv1d(h, p[f"{self.prefix}.conv2.weight"], p[f"{self.prefix}.conv2.bias"]))
        return tmean(h, axis=1)


def _add_linear(module: Module, rng: np.random.Generator, name: str, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    module.add_param(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    module.add_param(f"{name}.bias", rng.uniform(-bound, bound, size=(fan_out,)))


# ----------------------------------------------------------------------
# Style classifier
# ----------------------------------------------------------------------

class StyleClassifier(Module):
    """conv(F->C) -> conv(C->C) -> temporal mean -> linear(C->n_styles)."""

    def __init__(
        self,
        n_features: int,
        n_styles: int,
        channels: int = 64,
        seed: int = 0,
        stats: Optional[FeatureStats] = None,
        style_names: Optional[Sequence[str]] = None
    ):
        super().__init__()
        if n_styles < 2:
            raise ConfigError(f"A style classifier needs at least 2 styles, got {n_styles}")
        self.n_features = n_features
        self.n_styles = n_styles
        self.channels = channels
        self.stats = stats or FeatureStats.identity(n_features)
        self.style_names = list(style_names) if style_names else [str(i) for i in range(n_styles)]
        self.val_accuracy: Optional[float] = None
        rng = make_rng(seed, 21)
        self.backbone = ConvBackbone(self, "backbone", n_features, channels, rng)
        _add_linear(self, rng, "head", channels, n_styles)

    @property
    def embed_dim(self) -> int:
        return self.channels

    def _prepare(self, clips: ClipsLike) -> np.ndarray:
        return normalize(as_batch(clips), self.stats).astype(get_default_dtype())

    def features(self, x: np.ndarray) -> Tensor:
        """Penultimate (B, C) activations of an already normalized batch."""
        return self.backbone(x)

    def forward(self, x: np.ndarray) -> Tensor:
        p = self._params
        return linear(self.features(x), p["head.weight"], p["head.bias"])

    def logits(self, clips: ClipsLike) -> np.ndarray:
        with no_grad():
            return self.forward(self._prepare(clips)).data.astype(np.float64)

    def embed(self, clips: ClipsLike) -> np.ndarray:
        """Penultimate features; the embedding space of FID and diversity."""
        with no_grad():
            return self.features(self._prepare(clips)).data.astype(np.float64)

    def __call__(self, clips: ClipsLike) -> np.ndarray:
        return self.embed(clips)

    def predict_proba(self, clips: ClipsLike) -> np.ndarray:
        logits = self.logits(clips)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def _holdout_split(labels: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One clip per class goes to validation (when the class has more than one)."""
    val = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        if len(members) > 1:
            val.append(int(rng.choice(members)))
    val_idx = np.array(sorted(val), dtype=np.int64)
    train_idx = np.setdiff1d(np.arange(len(labels)), val_idx)
    return train_idx, val_idx


def train_classifier(
    clips: Sequence[LabeledClip],
    cfg: Optional[EvalConfig] = None,
    n_styles: Optional[int] = None,
    style_names: Optional[Sequence[str]] = None,
    labels: Optional[Sequence[int]] = None
) -> StyleClassifier:
    """
    Train a style classifier with cross-entropy, holding out one clip per style.

    ``labels`` overrides the clips' style ids (used for label-shuffling checks).
    The held-out accuracy is stored on ``classifier.val_accuracy``.
    """
    cfg = cfg or EvalConfig()
    clips = list(clips)
    if labels is None:
        if any(c.style_id is None for c in clips):
            raise ConfigError("Classifier training needs stylized clips (style_id set on every clip)")
        labels = [c.style_id for c in clips]
    labels = np.asarray(labels, dtype=np.int64)
    distinct = np.unique(labels)
    if len(distinct) < 2:
        raise ConfigError(f"Classifier training needs at least 2 styles, got {len(distinct)}")
    n_styles = n_styles or int(labels.max()) + 1

    stats = FeatureStats.fit(clips)
    model = StyleClassifier(
        clips[0].motion.n_features, n_styles, cfg.classifier_channels, cfg.seed, stats, style_names
    )
    rng = make_rng(cfg.seed, 22)
    train_idx, val_idx = _holdout_split(labels, rng)
    x = model._prepare(clips)
    optimizer = Adam(model.parameters(), lr=cfg.classifier_lr)

    logger.info(
        f"Training style classifier: {len(train_idx)} train / {len(val_idx)} held-out clips, "
        f"{len(distinct)} styles, {cfg.classifier_epochs} epochs"
    )
    for epoch in range(cfg.classifier_epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), cfg.classifier_batch):
            batch = order[start:start + cfg.classifier_batch]
            loss = cross_entropy(model.forward(x[batch]), labels[batch])
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
        if (epoch + 1) % 50 == 0:
            logger.debug(f"classifier epoch {epoch + 1}: loss={float(loss.data):.4f}")

    if len(val_idx):
        predicted = model.logits([clips[i] for i in val_idx]).argmax(axis=1)
        model.val_accuracy = float((predicted == labels[val_idx]).mean())
        logger.info(f"Style classifier held-out accuracy: {model.val_accuracy:.3f}")
    return model


# ----------------------------------------------------------------------
# Contrastive dual encoder
# ----------------------------------------------------------------------

class DualEncoder(Module):
    """
    Motion encoder (conv backbone + linear) and text encoder (masked mean of
    word embeddings + linear) into a shared unit-normalized space.
    """

    def __init__(
        self,
        n_features: int,
        vocab: Vocabulary,
        embed_dim: int = 32,
        channels: int = 64,
        seed: int = 0,
        stats: Optional[FeatureStats] = None
    ):
        super().__init__()
        self.n_features = n_features
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.channels = channels
        self.stats = stats or FeatureStats.identity(n_features)
        rng = make_rng(seed, 31)
        self.backbone = ConvBackbone(self, "motion", n_features, channels, rng)
        _add_linear(self, rng, "motion.proj", channels, embed_dim)
        self.add_param("text.tokens", rng.normal(0.0, 0.1, size=(vocab.n_base, channels)))
        _add_linear(self, rng, "text.proj", channels, embed_dim)

    def _prepare(self, clips: ClipsLike) -> np.ndarray:
        return normalize(as_batch(clips), self.stats).astype(get_default_dtype())

    def motion_forward(self, x: np.ndarray) -> Tensor:
        p = self._params
        return l2_normalize(linear(self.backbone(x), p["motion.proj.weight"], p["motion.proj.bias"]))

    def text_forward(self, prompts: Sequence[Sequence[str]]) -> Tensor:
        ids, mask = self.vocab.batch([strip_style(p) for p in prompts])
        p = self._params
        weights = mask.astype(get_default_dtype())[..., None]
        pooled = div(tsum(mul(embedding(p["text.tokens"], ids), weights), axis=1), weights.sum(axis=1))
        return l2_normalize(linear(pooled, p["text.proj.weight"], p["text.proj.bias"]))

    def encode_motion(self, clips: ClipsLike) -> np.ndarray:
        with no_grad():
            return self.motion_forward(self._prepare(clips)).data.astype(np.float64)

    def encode_text(self, prompts: Sequence[Sequence[str]]) -> np.ndarray:
        with no_grad():
            return self.text_forward(prompts).data.astype(np.float64)


def _positive_targets(prompts: Sequence[Tuple[str, ...]]) -> np.ndarray:
    """Row-normalized match matrix: every identical prompt in the batch is a positive."""
    keys = [tuple(p) for p in prompts]
    same = np.array([[a == b for b in keys] for a in keys], dtype=np.float64)
    return same / same.sum(axis=1, keepdims=True)


def contrastive_loss(motion: Tensor, text: Tensor, prompts: Sequence[Tuple[str, ...]], temperature: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities divided by ``temperature``."""
    logits = mul(matmul(motion, transpose(text)), 1.0 / temperature)
    targets = _positive_targets(prompts)
    return mul(add(soft_cross_entropy(logits, targets), soft_cross_entropy(transpose(logits), targets.T)), 0.5)


def train_dual_encoder(
    clips: Sequence[LabeledClip],
    cfg: Optional[EvalConfig] = None,
    vocab: Optional[Vocabulary] = None
) -> DualEncoder:
    """Fit the dual encoder on (prompt, motion) pairs; style suffixes are ignored."""
    cfg = cfg or EvalConfig()
    clips = list(clips)
    if len(clips) < 2:
        raise ConfigError("Dual encoder training needs at least 2 clips")
    prompts = [strip_style(c.prompt) for c in clips]
    if vocab is None:
        vocab = Vocabulary.build([w for p in prompts for w in p], style_slots=1)

    stats = FeatureStats.fit(clips)
    model = DualEncoder(
        clips[0].motion.n_features, vocab, cfg.encoder_dim, cfg.encoder_channels, cfg.seed, stats
    )
    x = model._prepare(clips)
    rng = make_rng(cfg.seed, 32)
    optimizer = Adam(model.parameters(), lr=cfg.encoder_lr)
    logger.info(f"Training dual encoder: {len(clips)} pairs, dim {cfg.encoder_dim}, {cfg.encoder_epochs} epochs")
    for epoch in range(cfg.encoder_epochs):
        order = rng.permutation(len(clips))
        for start in range(0, len(order), cfg.encoder_batch):
            batch = order[start:start + cfg.encoder_batch]
            if len(batch) < 2:
                continue
            batch_prompts = [prompts[i] for i in batch]
            loss = contrastive_loss(
                model.motion_forward(x[batch]), model.text_forward(batch_prompts),
                batch_prompts, cfg.temperature
            )
            optimizer.zero_grad()
            backward(loss)
            optimizer.step()
        if (epoch + 1) % 50 == 0:
            logger.debug(f"dual encoder epoch {epoch + 1}: loss={float(loss.data):.4f}")
    return model


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------

def save_evaluator(model: Union[StyleClassifier, DualEncoder], directory: Union[str, Path], name: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.state_dict())
    tensors["stats.mean"] = model.stats.mean
    tensors["stats.std"] = model.stats.std
    save_tensors(directory / f"{name}.mdlc", tensors)
    if isinstance(model, StyleClassifier):
        card = EvaluatorCard(
            kind="classifier", n_features=model.n_features, channels=model.channels,
            n_styles=model.n_styles, style_names=model.style_names, val_accuracy=model.val_accuracy,
        )
    else:
        card = EvaluatorCard(
            kind="dual_encoder", n_features=model.n_features, channels=model.channels,
            embed_dim=model.embed_dim, vocabulary=model.vocab.to_dict(),
        )
    (directory / f"{name}.json").write_text(card.model_dump_json(indent=2))
    return directory / f"{name}.mdlc"


def load_evaluator(directory: Union[str, Path], name: str) -> Union[StyleClassifier, DualEncoder]:
    directory = Path(directory)
    weights, card_path = directory / f"{name}.mdlc", directory / f"{name}.json"
    if not weights.is_file() or not card_path.is_file():
        raise MissingArtifactError(f"No evaluator '{name}' in {directory}")
    card = EvaluatorCard.model_validate_json(card_path.read_text())
    tensors = load_tensors(weights)
    stats = FeatureStats(tensors.pop("stats.mean"), tensors.pop("stats.std"))
    if card.kind == "classifier":
        model = StyleClassifier(card.n_features, card.n_styles, card.channels, stats=stats,
                                style_names=card.style_names)
        model.val_accuracy = card.val_accuracy
    else:
        model = DualEncoder(card.n_features, Vocabulary.from_dict(card.vocabulary), card.embed_dim,
                            card.channels, stats=stats)
    model.load_state_dict(tensors)
    return model
