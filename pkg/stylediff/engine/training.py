"""
Base diffusion training and LoRA style fine-tuning.

Both phases minimize the x0 reconstruction loss ||x0 - G(x_t, t, c)||^2 on
normalized features. Fine-tuning adds a prior term on neutral clips:
L = L_style + lambda * L_prior, with the style and prior batches drawn from
independent random streams so lambda = 0 reproduces style-only training.
"""

import logging
import math
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from stylediff.engine.denoiser import Denoiser, PromptBatch, generate
from stylediff.engine.diffusion import DiffusionSchedule, draw_noisy, make_schedule
from stylediff.engine.lora import AdapterSet, base_checksum
from stylediff.engine.motion import (
    FeatureStats,
    LabeledClip,
    MotionSequence,
    normalize,
    stack_features,
)
from stylediff.engine.tensor import (
    Adam,
    Tensor,
    add,
    backward,
    clip_grad_norm,
    grad_norm,
    make_rng,
    mse,
    mul,
    save_tensors,
)
from stylediff.engine.toy import prompt_words, style_names as registry_style_names
from stylediff.errors import ConfigError, ContractViolation, NumericalError, VocabularyError
from stylediff.schemas.config import DiffusionConfig, ModelConfig, TrainConfig
from stylediff.schemas.report import TrainLog, TrainLogEntry
from stylediff.utils.vocab import Vocabulary, is_style_word, strip_style, stylize

logger = logging.getLogger(__name__)

DenoiseFn = Callable[[np.ndarray, np.ndarray, Any], Union[Tensor, np.ndarray]]
Encoder = Callable[[Sequence[Sequence[str]]], Any]


def _identity_encoder(prompts: Sequence[Sequence[str]]) -> List[Tuple[str, ...]]:
    return [tuple(p) for p in prompts]


def _as_list(clips: Union[LabeledClip, Sequence[LabeledClip]]) -> List[LabeledClip]:
    return [clips] if isinstance(clips, LabeledClip) else list(clips)


def _normalized(clips: Sequence[LabeledClip], stats: Optional[FeatureStats]) -> np.ndarray:
    x0 = stack_features(clips)
    return normalize(x0, stats) if stats is not None else x0


def simple_loss(
    G: DenoiseFn,
    x0: np.ndarray,
    cond: Any,
    sched: DiffusionSchedule,
    rng: np.random.Generator
) -> Tensor:
    """Draw t and eps, noise ``x0`` and score the x0 prediction by MSE."""
    noisy = draw_noisy(x0, sched, rng)
    return mse(G(noisy.x_t, noisy.t, cond), x0)


def style_prompt(clip: LabeledClip, style_name: str) -> Tuple[str, ...]:
    """The clip's own text with ``in <style> style`` appended."""
    return stylize(strip_style(clip.prompt), [style_name])


def style_loss(
    G: DenoiseFn,
    clips: Union[LabeledClip, Sequence[LabeledClip]],
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    style_names: Union[Sequence[str], Mapping[int, str], None] = None,
    encode: Optional[Encoder] = None,
    stats: Optional[FeatureStats] = None,
    vocab: Optional[Vocabulary] = None
) -> Tensor:
    """
    Reconstruction loss on stylized clips, each prompted with its own style token.
    """
    clips = _as_list(clips)
    names = style_names if style_names is not None else registry_style_names()
    prompts = []
    for clip in clips:
        if clip.style_id is None:
            raise ContractViolation("style_loss needs stylized clips; got a clip without style_id")
        name = names[clip.style_id]
        if vocab is not None and not vocab.has_style(name):
            raise VocabularyError(f"No style token for '{name}'")
        prompts.append(style_prompt(clip, name))
    cond = (encode or _identity_encoder)(prompts)
    return simple_loss(G, _normalized(clips, stats), cond, sched, rng)


def prior_loss(
    G: DenoiseFn,
    clips: Union[LabeledClip, Sequence[LabeledClip]],
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    encode: Optional[Encoder] = None,
    stats: Optional[FeatureStats] = None
) -> Tensor:
    """Reconstruction loss on neutral clips with their original prompts."""
    clips = _as_list(clips)
    for clip in clips:
        if clip.style_id is not None or any(is_style_word(w) for w in clip.prompt):
            raise ContractViolation(
                f"prior_loss takes neutral clips only; got style_id={clip.style_id} prompt='{clip.text}'"
            )
    cond = (encode or _identity_encoder)([c.prompt for c in clips])
    return simple_loss(G, _normalized(clips, stats), cond, sched, rng)


def build_vocabulary(clips: Sequence[LabeledClip], style_slots: int) -> Vocabulary:
    """Template words, plain style names and every word the dataset prompts use."""
    words = list(prompt_words())
    for clip in clips:
        words.extend(w for w in strip_style(clip.prompt) if not is_style_word(w))
    return Vocabulary.build(words, style_slots=style_slots)


def _write_checkpoint(tensors: Dict[str, np.ndarray], run_dir: Optional[Path], step: int) -> Optional[Path]:
    if run_dir is None:
        return None
    directory = Path(run_dir) / "checkpoints"
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"step_{step:07d}.mdlc"
    save_tensors(path, tensors)
    logger.info(f"Checkpoint written: {path}")
    return path


def _model_tensors(model: Denoiser) -> Dict[str, np.ndarray]:
    tensors = {name: value.copy() for name, value in model.state_dict().items()}
    tensors["stats.mean"] = model.stats.mean
    tensors["stats.std"] = model.stats.std
    return tensors


def _adapter_tensors(adapter_set: AdapterSet) -> Dict[str, np.ndarray]:
    tensors = {}
    for name, adapter in adapter_set.adapters.items():
        tensors[f"{name}.A"] = adapter.A.data.copy()
        tensors[f"{name}.B"] = adapter.B.data.copy()
    for style in adapter_set.style_tokens:
        tensors[f"style.{style}"] = adapter_set.style_embedding(style).copy()
    return tensors


def _check_finite(loss: Tensor, step: int, snapshot: Callable[[], Dict[str, np.ndarray]], run_dir: Optional[Path]):
    """Weights are not yet updated for ``step``, so the current state is the last good one."""
    value = float(loss.data)
    if math.isfinite(value):
        return
    path = _write_checkpoint(snapshot(), run_dir, step - 1)
    logger.error(f"Non-finite loss at step {step}; last good weights: {path or 'not written (no run dir)'}")
    raise NumericalError(f"Loss became {value} at step {step}")


def _drop_conditions(prompts: PromptBatch, drop: np.ndarray, null_id: int, pad_id: int) -> PromptBatch:
    """Replace dropped rows with the single null token."""
    if not drop.any():
        return prompts
    ids, mask = prompts.ids.copy(), prompts.mask.copy()
    ids[drop] = pad_id
    ids[drop, 0] = null_id
    mask[drop] = False
    mask[drop, 0] = True
    return PromptBatch(ids, mask)


def train_base(
    dataset: Sequence[LabeledClip],
    cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    diffusion_cfg: Optional[DiffusionConfig] = None,
    vocab: Optional[Vocabulary] = None,
    run_dir: Optional[Union[str, Path]] = None
) -> Tuple[Denoiser, TrainLog]:
    """
    Train a fresh denoiser on neutral clips with condition dropout.

    ``cfg.prior_weight`` plays no role here.

    Args:
        dataset: Neutral clips (style_id None)
        cfg: Base-phase training config
        model_cfg: Architecture; defaults to ModelConfig()
        diffusion_cfg: Schedule kind and sampling settings stored with the model
        vocab: Prompt vocabulary; built from the dataset prompts when omitted
        run_dir: Where checkpoints/ is written; None keeps everything in memory

    Returns:
        (trained model, log of every ``cfg.log_every``-th step)
    """
    if cfg.phase != "base":
        raise ConfigError(f"train_base needs phase 'base', got '{cfg.phase}'")
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("train_base needs at least one clip")
    if any(c.style_id is not None for c in dataset):
        raise ContractViolation("The base model trains on neutral clips only")

    model_cfg = model_cfg or ModelConfig()
    diffusion_cfg = diffusion_cfg or DiffusionConfig()
    vocab = vocab or build_vocabulary(dataset, model_cfg.style_slots)
    stats = FeatureStats.fit(dataset)
    n_features = dataset[0].motion.n_features
    model = Denoiser(model_cfg, vocab, n_features, stats=stats,
                     base_steps=cfg.diffusion_steps, diffusion=diffusion_cfg)

    x_all = normalize(stack_features(dataset), stats)
    prompts_all = model.encode_prompts([c.prompt for c in dataset])
    sched = make_schedule(cfg.diffusion_steps, diffusion_cfg.schedule)
    G = model.bind(cfg.diffusion_steps)
    optimizer = Adam(model.parameters(trainable_only=True), lr=cfg.lr)
    batch_rng = make_rng(cfg.seed, 1)
    noise_rng = make_rng(cfg.seed, 2)
    batch_size = cfg.batch_size or len(dataset)
    run_dir = Path(run_dir) if run_dir is not None else None

    log = TrainLog(phase="base")
    logger.info(
        f"Base training: {len(dataset)} clips, {model.num_parameters()} parameters, "
        f"{cfg.steps} steps, batch {batch_size}, T={cfg.diffusion_steps}"
    )
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = batch_rng.choice(len(dataset), size=batch_size, replace=batch_size > len(dataset))
        drop = batch_rng.random(batch_size) < cfg.cond_dropout
        cond = _drop_conditions(prompts_all.take(idx), drop, vocab.null_id, vocab.pad_id)

        loss = simple_loss(G, x_all[idx], cond, sched, noise_rng)
        _check_finite(loss, step, lambda: _model_tensors(model), run_dir)

        optimizer.zero_grad()
        backward(loss)
        norm = clip_grad_norm(optimizer.params, cfg.grad_clip) if cfg.grad_clip else grad_norm(optimizer.params)
        optimizer.step()

        is_checkpoint = step % cfg.checkpoint_every == 0 or step == cfg.steps
        if is_checkpoint:
            _write_checkpoint(_model_tensors(model), run_dir, step)
        log.append(TrainLogEntry(
            step=step,
            loss=float(loss.data),
            grad_norm=norm,
            wall_time=time.perf_counter() - start,
            checkpoint=is_checkpoint and run_dir is not None,
        ))
        if step % cfg.log_every == 0:
            logger.debug(f"base step {step}/{cfg.steps} loss={float(loss.data):.5f} |g|={norm:.3f}")

    logger.info(f"Base training finished: loss {log.entries[0].loss:.4f} -> {log.entries[-1].loss:.4f}")
    return model, log


def generate_prior_pool(
    model: Denoiser,
    prompts: Sequence[Sequence[str]],
    n_clips: int,
    n_frames: int,
    seed: int
) -> List[LabeledClip]:
    """Neutral clips sampled from the frozen base model (adapters bypassed)."""
    if not prompts:
        raise ConfigError("Generated prior needs at least one action prompt")
    chosen = [tuple(prompts[i % len(prompts)]) for i in range(n_clips)]
    with model.adapters_disabled():
        features = generate(model, chosen, n_frames, seed, num_steps=model.base_steps)
    return [
        LabeledClip(motion=MotionSequence(f), action_id=None, style_id=None, prompt=p)
        for f, p in zip(features, chosen)
    ]


class _PriorSampler:
    """Draws each step's prior batch from one or two pools."""

    def __init__(self, pools: List[List[LabeledClip]], rng: np.random.Generator):
        self.pools = [p for p in pools if p]
        if not self.pools:
            raise ConfigError("Prior pool is empty")
        self.rng = rng

    def draw(self, size: int) -> List[LabeledClip]:
        shares = [size // len(self.pools)] * len(self.pools)
        shares[0] += size - sum(shares)
        batch: List[LabeledClip] = []
        for pool, share in zip(self.pools, shares):
            idx = self.rng.choice(len(pool), size=share, replace=share > len(pool))
            batch.extend(pool[i] for i in idx)
        return batch


def train_lora(
    model: Denoiser,
    adapter_set: AdapterSet,
    style_set: Sequence[LabeledClip],
    prior_set: Sequence[LabeledClip],
    cfg: TrainConfig,
    style_names: Union[Sequence[str], Mapping[int, str], None] = None,
    run_dir: Optional[Union[str, Path]] = None
) -> Tuple[AdapterSet, TrainLog]:
    """
    Fine-tune adapters and style tokens on a style set.

    Each step uses the full style set (or ``cfg.batch_size`` clips of it) and,
    when lambda > 0, an equally sized batch of neutral clips.

    Args:
        model: Base denoiser; its weights must stay frozen
        adapter_set: Adapters attached to ``model``
        style_set: Stylized clips of the styles being learned
        prior_set: Neutral clips for the prior term (dataset or mixed source)
        cfg: LoRA-phase training config
        style_names: Style name per style id, for the style tokens
        run_dir: Where checkpoints/ is written

    Returns:
        (adapter set with its style tokens, training log)

    Raises:
        ContractViolation: if a base weight changed during training
        NumericalError: on a non-finite loss, after checkpointing the last good weights
    """
    if cfg.phase != "lora":
        raise ConfigError(f"train_lora needs phase 'lora', got '{cfg.phase}'")
    if adapter_set.model is not model or not model.adapters:
        raise ContractViolation("Attach adapters to the model before fine-tuning")
    if any(model.named_parameters()[n].requires_grad for n in model.base_parameter_names()):
        raise ContractViolation("Base weights must be frozen before fine-tuning")
    style_set = list(style_set)
    if not style_set or any(c.style_id is None for c in style_set):
        raise ContractViolation("The style set must be non-empty and fully stylized")

    names = style_names if style_names is not None else registry_style_names()
    for style_id in sorted({c.style_id for c in style_set}):
        name = names[style_id]
        if name not in adapter_set.style_tokens:
            adapter_set.new_style_token(name)

    run_dir = Path(run_dir) if run_dir is not None else None
    n_frames = style_set[0].motion.n_frames
    batch_size = min(cfg.batch_size or len(style_set), len(style_set))
    lam = cfg.prior_weight

    style_rng = make_rng(cfg.seed, 11)
    prior_rng = make_rng(cfg.seed, 12)
    sampler = None
    if lam > 0:
        pools: List[List[LabeledClip]] = []
        if cfg.prior_source in ("dataset", "mixed"):
            pools.append([c for c in prior_set if c.style_id is None])
        if cfg.prior_source in ("generated", "mixed"):
            action_prompts = sorted({strip_style(c.prompt) for c in style_set})
            pools.append(generate_prior_pool(model, action_prompts, cfg.prior_pool, n_frames, cfg.seed))
        sampler = _PriorSampler(pools, prior_rng)

    sched = make_schedule(cfg.diffusion_steps, model.diffusion.schedule)
    G = model.bind(cfg.diffusion_steps)
    params = adapter_set.parameters()
    optimizer = Adam(params, lr=cfg.lr)
    before = base_checksum(model)

    log = TrainLog(phase="lora")
    logger.info(
        f"LoRA fine-tuning: {len(style_set)} style clips, styles {sorted(adapter_set.style_tokens)}, "
        f"rank {adapter_set.rank}, lambda={lam}, prior={cfg.prior_source if lam > 0 else 'off'}, "
        f"{cfg.steps} steps, T={cfg.diffusion_steps}"
    )
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        if batch_size < len(style_set):
            idx = style_rng.choice(len(style_set), size=batch_size, replace=False)
            batch = [style_set[i] for i in idx]
        else:
            batch = style_set
        l_style = style_loss(G, batch, sched, style_rng, names, model.encode_prompts, model.stats, model.vocab)
        total, l_prior = l_style, None
        if sampler is not None:
            l_prior = prior_loss(G, sampler.draw(len(batch)), sched, prior_rng, model.encode_prompts, model.stats)
            total = add(l_style, mul(l_prior, lam))
        _check_finite(total, step, lambda: _adapter_tensors(adapter_set), run_dir)

        optimizer.zero_grad()
        backward(total)
        norm = clip_grad_norm(params, cfg.grad_clip) if cfg.grad_clip else grad_norm(params)
        optimizer.step()

        is_checkpoint = step % cfg.checkpoint_every == 0 or step == cfg.steps
        if is_checkpoint:
            _write_checkpoint(_adapter_tensors(adapter_set), run_dir, step)
        log.append(TrainLogEntry(
            step=step,
            loss=float(total.data),
            style_loss=float(l_style.data),
            prior_loss=float(l_prior.data) if l_prior is not None else None,
            grad_norm=norm,
            wall_time=time.perf_counter() - start,
            checkpoint=is_checkpoint and run_dir is not None,
        ))
        if step % cfg.log_every == 0:
            logger.debug(f"lora step {step}/{cfg.steps} loss={float(total.data):.5f} |g|={norm:.3f}")

    if base_checksum(model) != before:
        raise ContractViolation("Base weights changed during fine-tuning")
    logger.info(f"LoRA fine-tuning finished: loss {log.entries[0].loss:.4f} -> {log.entries[-1].loss:.4f}")
    return adapter_set, log
