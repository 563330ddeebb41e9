"""
Evaluation metrics for generated motion sets.

Style fidelity (SRA) comes from an independent style classifier; FID and
diversity are measured in that classifier's penultimate feature space;
R-precision and MM-Dist use the contrastive dual encoder. Foot skating is
computed on world positions and needs no learned model.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from stylediff.engine.evaluators import ClipsLike, DualEncoder, StyleClassifier, as_batch
from stylediff.engine.motion import LabeledClip, PoseLayout, to_global
from stylediff.engine.tensor import make_rng
from stylediff.engine.toy import StyleCategory, style_by_name
from stylediff.errors import ConfigError, LayoutError, NumericalError
from stylediff.schemas.config import EvalConfig
from stylediff.schemas.report import EvalReport

logger = logging.getLogger(__name__)

Embedder = Callable[[ClipsLike], np.ndarray]

FOOT_HEIGHT_THRESHOLD = 0.05
FOOT_VELOCITY_THRESHOLD = 0.5
SHRINKAGE = 1e-6


# =============================================================================
# Style Recognition Accuracy
# =============================================================================

def sra_from_logits(
    logits: np.ndarray,
    intended: Sequence[int],
    k: int = 5
) -> float:
    """
    Top-k style recognition accuracy with every style weighted equally.

    Hit rates are computed per intended style and then averaged, so a set
    dominated by one style does not dominate the score.

    Args:
        logits: (B, n_styles) classifier scores
        intended: Intended style id per clip
        k: Number of top-ranked styles that count as a hit

    Returns:
        Balanced top-k accuracy in [0, 1]
    """
    logits = np.asarray(logits, dtype=np.float64)
    intended = np.asarray(intended, dtype=np.int64)
    n_styles = logits.shape[1]
    if len(intended) != logits.shape[0] or len(intended) == 0:
        raise ConfigError(f"SRA needs one intended style per clip: {len(intended)} ids for {logits.shape[0]} clips")
    if not 1 <= k <= n_styles:
        raise ConfigError(f"SRA@{k} is undefined for {n_styles} styles")
    if intended.min() < 0 or intended.max() >= n_styles:
        raise ConfigError(f"Unknown style id in {sorted(set(intended.tolist()))} (classifier knows {n_styles})")

    # rank = number of styles scored strictly higher than the intended one
    intended_score = logits[np.arange(len(intended)), intended]
    rank = (logits > intended_score[:, None]).sum(axis=1)
    hits = rank < k
    per_style = [hits[intended == s].mean() for s in np.unique(intended)]
    return float(np.mean(per_style))


def sra(
    clips: ClipsLike,
    intended_style_ids: Sequence[int],
    classifier: StyleClassifier,
    k: int = 5
) -> float:
    """Top-k SRA of ``clips`` under ``classifier``."""
    return sra_from_logits(classifier.logits(clips), intended_style_ids, k)


def sra_by_group(
    clips: ClipsLike,
    intended_style_ids: Sequence[int],
    classifier: StyleClassifier,
    style_names: Sequence[str],
    k: int = 5
) -> Dict[str, Optional[float]]:
    """
    SRA@k over all styles, over styles outside the action category, and over
    character styles only. Groups with no clips report None.
    """
    logits = classifier.logits(clips)
    intended = np.asarray(intended_style_ids, dtype=np.int64)
    k = min(k, logits.shape[1])
    categories = np.array([style_by_name(style_names[s]).category for s in intended], dtype=object)

    groups = {
        "all": np.ones(len(intended), dtype=bool),
        "no_action": categories != StyleCategory.ACTION,
        "character": categories == StyleCategory.CHARACTER,
    }
    return {
        name: sra_from_logits(logits[mask], intended[mask], k) if mask.any() else None
        for name, mask in groups.items()
    }


# =============================================================================
# Frechet distance
# =============================================================================

def _sqrt_psd(matrix: np.ndarray, label: str) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    tolerance = 1e-8 * max(float(np.abs(eigvals).max()), 1.0)
    if eigvals.min() < -tolerance:
        raise NumericalError(f"{label} covariance is not positive semi-definite (min eigenvalue {eigvals.min():.3e})")
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def _covariance(embeddings: np.ndarray) -> np.ndarray:
    n, d = embeddings.shape
    cov = np.cov(embeddings, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    if n < d + 1:
        shrink = SHRINKAGE * max(float(np.trace(cov)) / d, 1.0)
        logger.warning(f"FID on {n} samples in {d} dimensions: adding {shrink:.2e} to the covariance diagonal")
        cov = cov + shrink * np.eye(d)
    return cov


def frechet_distance(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """
    Frechet distance between Gaussians fitted to two embedding sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), with
    every square root taken by symmetric eigendecomposition.
    """
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    if emb_a.ndim != 2 or emb_b.ndim != 2 or emb_a.shape[1] != emb_b.shape[1]:
        raise ConfigError(f"FID needs two (n, d) embedding sets of equal d, got {emb_a.shape} and {emb_b.shape}")

    mu_a, mu_b = emb_a.mean(axis=0), emb_b.mean(axis=0)
    cov_a, cov_b = _covariance(emb_a), _covariance(emb_b)
    root_a = _sqrt_psd(cov_a, "First")
    _sqrt_psd(cov_b, "Second")
    middle = root_a @ cov_b @ root_a
    eigvals = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    trace_sqrt = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())

    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    if not np.isfinite(value):
        raise NumericalError("FID is not finite")
    return max(value, 0.0)


def fid(set_a, set_b, encoder: Optional[Embedder] = None) -> float:
    """FID between two clip sets (embedded by ``encoder``) or two embedding arrays."""
    if encoder is not None:
        set_a, set_b = encoder(set_a), encoder(set_b)
    return frechet_distance(set_a, set_b)


# =============================================================================
# Foot skating
# =============================================================================

def foot_skating_world(
    world: np.ndarray,
    foot_joints: Tuple[int, int],
    height_threshold: float = FOOT_HEIGHT_THRESHOLD,
    velocity_threshold: float = FOOT_VELOCITY_THRESHOLD
) -> float:
    """
    Fraction of adjacent frame pairs where both feet are below the height
    threshold in both frames while a foot moves faster than the velocity
    threshold (horizontal world units per frame).

    Args:
        world: (N, J, 3) world positions, y up
        foot_joints: Indices of the two foot joints in ``world``

    Returns:
        Skating ratio in [0, 1]
    """
    if world.shape[0] < 2:
        raise LayoutError(f"Foot skating needs at least 2 frames, got {world.shape[0]}")
    feet = world[:, list(foot_joints), :]
    low = (feet[..., 1] < height_threshold).all(axis=1)
    grounded = low[:-1] & low[1:]
    step = feet[1:, :, [0, 2]] - feet[:-1, :, [0, 2]]
    speed = np.linalg.norm(step, axis=-1).max(axis=1)
    return float((grounded & (speed > velocity_threshold)).mean())


def foot_skating_clip(clip: Union[LabeledClip, np.ndarray]) -> float:
    features = clip.features if isinstance(clip, LabeledClip) else np.asarray(clip)
    layout = PoseLayout.from_features(features.shape[-1])
    # world index = joint index, with the root at 0
    return foot_skating_world(to_global(features), layout.foot_joints)


def foot_skating(clips: ClipsLike) -> float:
    """Mean per-motion skating ratio over a set."""
    batch = as_batch(clips)
    return float(np.mean([foot_skating_clip(features) for features in batch]))


# =============================================================================
# Diversity
# =============================================================================

def diversity_from_embeddings(embeddings: np.ndarray, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean L2 distance over ``n_pairs`` random pairs of distinct items."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n < 2:
        raise ConfigError(f"Diversity needs at least 2 clips, got {n}")
    rng = make_rng(seed, 41)
    first = rng.integers(0, n, size=n_pairs)
    second = (first + rng.integers(1, n, size=n_pairs)) % n
    return float(np.linalg.norm(embeddings[first] - embeddings[second], axis=1).mean())


def diversity(clips: ClipsLike, encoder: Embedder, n_pairs: int = 300, seed: int = 0) -> float:
    return diversity_from_embeddings(encoder(clips), n_pairs, seed)


# =============================================================================
# Text fidelity
# =============================================================================

def r_precision_from_embeddings(
    motion_emb: np.ndarray,
    text_emb: np.ndarray,
    top_k: int = 3,
    batch_size: int = 32
) -> List[float]:
    """
    R-precision@1..top_k: within each batch of ``batch_size`` pairs, a hit at k
    means fewer than k texts lie strictly closer to the motion than its own.

    Trailing pairs that do not fill a batch are dropped; a set smaller than one
    batch is scored as a single smaller batch.
    """
    motion_emb = np.asarray(motion_emb, dtype=np.float64)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    n = len(motion_emb)
    if n != len(text_emb) or n == 0:
        raise ConfigError(f"R-precision needs paired embeddings, got {n} motions and {len(text_emb)} texts")
    if n < batch_size:
        logger.warning(f"R-precision on {n} pairs, fewer than the batch size {batch_size}")
        batch_size = n

    hits = np.zeros(top_k)
    counted = 0
    for start in range(0, n - batch_size + 1, batch_size):
        m = motion_emb[start:start + batch_size]
        t = text_emb[start:start + batch_size]
        dist = np.linalg.norm(m[:, None, :] - t[None, :, :], axis=-1)
        rank = (dist < np.diag(dist)[:, None]).sum(axis=1)
        for k in range(top_k):
            hits[k] += (rank <= k).sum()
        counted += batch_size
    return (hits / counted).tolist()


def r_precision(
    clips: ClipsLike,
    prompts: Sequence[Sequence[str]],
    encoder: DualEncoder,
    k: int = 3,
    batch_size: int = 32
) -> List[float]:
    return r_precision_from_embeddings(
        encoder.encode_motion(clips), encoder.encode_text(prompts), k, batch_size
    )


def mm_dist_from_embeddings(motion_emb: np.ndarray, text_emb: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(motion_emb) - np.asarray(text_emb), axis=1).mean())


def mm_dist(clips: ClipsLike, prompts: Sequence[Sequence[str]], encoder: DualEncoder) -> float:
    """Mean distance between each motion embedding and its own text embedding."""
    return mm_dist_from_embeddings(encoder.encode_motion(clips), encoder.encode_text(prompts))


# =============================================================================
# Full report
# =============================================================================

def calculate_all_metrics(
    label: str,
    clips: ClipsLike,
    real_clips: ClipsLike,
    classifier: StyleClassifier,
    encoder: Optional[DualEncoder] = None,
    intended_style_ids: Optional[Sequence[int]] = None,
    prompts: Optional[Sequence[Sequence[str]]] = None,
    style_names: Optional[Sequence[str]] = None,
    cfg: Optional[EvalConfig] = None
) -> EvalReport:
    """
    Evaluate one clip set against the real set.

    Args:
        label: Row label of the report ("Real", "Ours", ...)
        clips: Evaluated motions
        real_clips: Reference motions for FID and the diversity gap
        classifier: Style classifier (SRA and the FID/diversity embedding)
        encoder: Dual encoder; R-precision and MM-Dist are skipped without it
        intended_style_ids: Style each clip was meant to show; SRA is skipped without it
        prompts: Text of each clip for R-precision and MM-Dist
        style_names: Registry names indexed by style id, for the grouped SRA

    Returns:
        EvalReport with every computable field set
    """
    cfg = cfg or EvalConfig()
    batch = as_batch(clips)
    real = as_batch(real_clips)
    emb, emb_real = classifier.embed(batch), classifier.embed(real)

    report = {
        "label": label,
        "n_clips": len(batch),
        "n_real": len(real),
        "fid": frechet_distance(emb, emb_real),
        "foot_skating": foot_skating(batch),
    }
    if len(batch) >= 2 and len(real) >= 2:
        report["diversity"] = diversity_from_embeddings(emb, cfg.n_pairs, cfg.seed)
        report["diversity_real"] = diversity_from_embeddings(emb_real, cfg.n_pairs, cfg.seed)
        report["diversity_gap"] = abs(report["diversity"] - report["diversity_real"])

    if intended_style_ids is not None:
        logits = classifier.logits(batch)
        for k in (1, 3, 5):
            report[f"sra_top{k}"] = sra_from_logits(logits, intended_style_ids, min(k, classifier.n_styles))
        if style_names is not None:
            groups = sra_by_group(batch, intended_style_ids, classifier, style_names, k=5)
            report["sra_top5_no_action"] = groups["no_action"]
            report["sra_top5_character"] = groups["character"]

    if encoder is not None and prompts is not None:
        motion_emb = encoder.encode_motion(batch)
        text_emb = encoder.encode_text(prompts)
        top = r_precision_from_embeddings(motion_emb, text_emb, 3, cfg.r_precision_batch)
        report.update(r_precision_top1=top[0], r_precision_top2=top[1], r_precision_top3=top[2])
        report["mm_dist"] = mm_dist_from_embeddings(motion_emb, text_emb)

    result = EvalReport(**report)
    logger.info(
        f"[{label}] n={result.n_clips} FID={result.fid:.4f} skate={result.foot_skating:.4f} "
        f"SRA@5={result.sra_top5} R@3={result.r_precision_top3}"
    )
    return result
