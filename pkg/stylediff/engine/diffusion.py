"""
Noise schedules, forward noising and the ancestral sampler.

The denoiser predicts the clean sample x0 directly. Schedule arrays are
indexed by timestep 0..T with alpha_bar[0] = 1, so ``alpha_bar[t - 1]`` is
always defined for t in [1, T].
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Optional, Tuple, Union

import numpy as np

from stylediff.engine.motion import FeatureStats, clamp_contacts, denormalize
from stylediff.engine.tensor import Tensor, get_default_dtype, make_rng, no_grad
from stylediff.errors import ConfigError, NumericalError, ShapeError, TimestepError

logger = logging.getLogger(__name__)

# G(x_t, t, cond) -> x0_hat, with x_t (B, N, F) and t (B,) integer timesteps
DenoiseFn = Callable[[np.ndarray, np.ndarray, Any], Union[Tensor, np.ndarray]]

MAX_BETA = 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step constants for t = 0..T (entry 0 is the clean endpoint)."""
    T: int
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        prev = self.alpha_bar_prev
        var = np.zeros_like(self.betas)
        var[1:] = self.betas[1:] * (1.0 - prev[1:]) / (1.0 - self.alpha_bar[1:])
        return var

    def check_timestep(self, t: Union[int, np.ndarray]):
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise TimestepError(f"Timesteps must lie in [1, {self.T}], got [{t.min()}, {t.max()}]")


def _cosine_alpha_bar(T: int) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
    return f / f[0]


def make_schedule(
    T: int,
    kind: str = "cosine",
    beta_start: float = 1e-4,
    beta_end: float = 0.02
) -> DiffusionSchedule:
    """
    Build a cosine or linear schedule with T steps.

    Linear betas are rescaled by 1000/T so shorter chains still end near pure
    noise; both kinds clip betas at 0.999 and recompute alpha_bar as the
    cumulative product of the clipped alphas.
    """
    if T < 2:
        raise ConfigError(f"A schedule needs T >= 2 steps, got {T}")

    if kind == "cosine":
        target = _cosine_alpha_bar(T)
        betas = 1.0 - target[1:] / target[:-1]
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(beta_start * scale, beta_end * scale, T, dtype=np.float64)
    else:
        raise ConfigError(f"Unknown schedule kind '{kind}' (expected cosine or linear)")

    betas = np.clip(betas, 1e-8, MAX_BETA)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return DiffusionSchedule(
        T=T,
        kind=kind,
        betas=np.concatenate([[0.0], betas]),
        alphas=np.concatenate([[1.0], alphas]),
        alpha_bar=np.concatenate([[1.0], alpha_bar]),
    )


@dataclass
class NoisySample:
    """A noised batch together with the exact timesteps and noise that built it."""
    x_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def mix_noise(x0: np.ndarray, eps: np.ndarray, alpha_bar: Union[float, np.ndarray]) -> np.ndarray:
    """sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    out = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
    return out.astype(np.result_type(np.asarray(x0).dtype, np.float32))


def q_sample(
    x0: np.ndarray,
    t: Union[int, np.ndarray],
    eps: np.ndarray,
    sched: DiffusionSchedule
) -> np.ndarray:
    """Forward-noise ``x0`` to step ``t`` (scalar or one timestep per batch row)."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"q_sample: x0 shape {x0.shape} != eps shape {eps.shape}")
    sched.check_timestep(t)
    t = np.asarray(t)
    alpha_bar = sched.alpha_bar[t]
    if t.ndim == 1:
        alpha_bar = alpha_bar.reshape((-1,) + (1,) * (x0.ndim - 1))
    return mix_noise(x0, eps, alpha_bar)


def draw_noisy(x0: np.ndarray, sched: DiffusionSchedule, rng: np.random.Generator) -> NoisySample:
    """Draw t ~ U{1..T} per row and eps ~ N(0, I), then noise the batch."""
    t = rng.integers(1, sched.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape, dtype=np.float64).astype(x0.dtype)
    return NoisySample(x_t=q_sample(x0, t, eps, sched), t=t, eps=eps)


def posterior_mean(
    x0_hat: np.ndarray,
    x_t: np.ndarray,
    alpha_bar_t: float,
    alpha_bar_prev: float
) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x0_hat)."""
    alpha_t = alpha_bar_t / alpha_bar_prev
    beta_t = 1.0 - alpha_t
    coef_x0 = np.sqrt(alpha_bar_prev) * beta_t / (1.0 - alpha_bar_t)
    coef_xt = np.sqrt(alpha_t) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)
    return coef_x0 * x0_hat + coef_xt * x_t


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def predict_x0(
    G: DenoiseFn,
    x_t: np.ndarray,
    t: int,
    cond: Any,
    guidance: float = 1.0,
    uncond: Any = None
) -> np.ndarray:
    """x0 estimate, blended as u + g (c - u) when guidance != 1."""
    timesteps = np.full(x_t.shape[0], t, dtype=np.int64)
    cond_pred = _as_array(G(x_t, timesteps, cond))
    if guidance == 1.0 or uncond is None:
        return cond_pred
    uncond_pred = _as_array(G(x_t, timesteps, uncond))
    return uncond_pred + guidance * (cond_pred - uncond_pred)


def p_sample_step(
    G: DenoiseFn,
    x_t: np.ndarray,
    t: int,
    cond: Any,
    sched: DiffusionSchedule,
    rng: Optional[np.random.Generator] = None,
    guidance: float = 1.0,
    uncond: Any = None
) -> np.ndarray:
    """
    One reverse step x_t -> x_{t-1}.

    With ``rng=None`` no posterior noise is injected; t = 1 always returns the
    posterior mean.

    Args:
        G: Denoiser callable (x_t, timesteps, cond) -> x0 estimate
        x_t: Current noisy batch (B, N, F)
        t: Timestep in [1, T]
        cond: Conditioning passed through to G
        sched: Schedule the chain runs on
        rng: Source of posterior noise, or None for the deterministic mean
        guidance: Classifier-free guidance scale g
        uncond: Null conditioning for the guided blend

    Returns:
        x_{t-1} with the dtype of ``x_t``
    """
    sched.check_timestep(t)
    x0_hat = predict_x0(G, x_t, t, cond, guidance, uncond)
    if x0_hat.shape != x_t.shape:
        raise ShapeError(f"Denoiser returned {x0_hat.shape} for input {x_t.shape}")
    if not np.all(np.isfinite(x0_hat)):
        bad = int((~np.isfinite(x0_hat)).sum())
        raise NumericalError(
            f"Denoiser output is non-finite at t={t}: {bad} of {x0_hat.size} values; "
            f"max |x_t| = {float(np.abs(x_t).max()):.3g}"
        )

    mean = posterior_mean(x0_hat, x_t, sched.alpha_bar[t], sched.alpha_bar[t - 1])
    if t == 1 or rng is None:
        return mean.astype(x_t.dtype)
    noise = rng.standard_normal(x_t.shape, dtype=np.float64)
    return (mean + np.sqrt(sched.posterior_variance[t]) * noise).astype(x_t.dtype)


def sample(
    G: DenoiseFn,
    cond: Any,
    shape: Tuple[int, ...],
    sched: DiffusionSchedule,
    seed: int,
    guidance: float = 1.0,
    uncond: Any = None,
    stats: Optional[FeatureStats] = None,
    stream: int = 0
) -> np.ndarray:
    """
    Run the full T -> 1 chain from Gaussian noise.

    Args:
        G: Denoiser callable
        cond: Conditioning for every row of the batch
        shape: (B, N, F) of the result
        sched: Schedule to sample with
        seed: Seed of the Philox stream that draws x_T and every posterior noise
        guidance: Classifier-free guidance scale g
        uncond: Null conditioning, required when guidance != 1
        stats: Feature statistics; when given the result is denormalized
        stream: Sub-stream of ``seed``

    Returns:
        (B, N, F) array, with contact channels clipped into [0, 1] when
        ``stats`` is given
    """
    rng = make_rng(seed, stream)
    dtype = get_default_dtype()
    x = rng.standard_normal(shape, dtype=np.float64).astype(dtype)
    with no_grad():
        for t in range(sched.T, 0, -1):
            x = p_sample_step(G, x, t, cond, sched, rng=rng, guidance=guidance, uncond=uncond)
    if stats is not None:
        x = clamp_contacts(denormalize(x, stats))
    logger.debug(f"Sampled {shape} with T={sched.T}, guidance={guidance}, seed={seed}")
    return x
