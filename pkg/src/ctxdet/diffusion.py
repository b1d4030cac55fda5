"""Cosine noise schedule, box-signal scaling, DDIM stepping, box renewal.

The diffusion state is a scaled box signal: normalized cxcywh boxes in
[0,1] mapped affinely to [-scale, +scale] (scale defaults to 2.0).
Forward corruption and the reverse DDIM update act on that signal.

Per-step clamping to the signal range keeps inputs inside the range the
denoiser was trained on; pass clip=False to the corruption/step
functions to get the unclamped algebra (the round-trip identities hold
exactly only there).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

SIGNAL_SCALE = 2.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time noise schedule over t = 0..T.

    `alpha_bar` has T+1 entries (alpha_bar[0] = 1); `beta` has T entries,
    beta[i] being the step t=i -> t=i+1.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.alpha_bar.shape != (self.T + 1,) or self.beta.shape != (self.T,):
            raise ContractError("schedule arrays inconsistent with T")


def build_cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine alpha_bar curve with offset `s`; betas derived from it.

    alpha_bar[t] = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2).
    beta[t] = 1 - alpha_bar[t+1]/alpha_bar[t], clipped to <= 0.999. The
    alpha_bar table stays authoritative; the clip only affects `beta`.
    """
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    beta = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], None, 0.999)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def normalize_boxes(boxes_norm, scale: float = SIGNAL_SCALE):
    """Map cxcywh boxes in [0,1] to the signal range [-scale, scale]."""
    b = np.asarray(boxes_norm, dtype=np.float64)
    return np.clip((b * 2.0 - 1.0) * scale, -scale, scale)


def denormalize_boxes(signal, scale: float = SIGNAL_SCALE):
    """Inverse of normalize_boxes; clamps to the signal range first."""
    s = np.clip(np.asarray(signal, dtype=np.float64), -scale, scale)
    return (s / scale + 1.0) / 2.0


def _gather_alpha_bar(sched: NoiseSchedule, t):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T}]: {t}")
    return sched.alpha_bar[t]


def q_sample(signal, t, noise, sched: NoiseSchedule,
             scale: float = SIGNAL_SCALE, clip: bool = True):
    """Corrupt a clean signal to time t: sqrt(ab)*x0 + sqrt(1-ab)*noise.

    `t` may be a scalar or a per-batch-row array broadcastable against the
    leading axis of `signal`.
    """
    x0 = np.asarray(signal, dtype=np.float64)
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ContractError(f"noise shape {eps.shape} != signal shape {x0.shape}")
    ab = _gather_alpha_bar(sched, t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    if clip:
        x_t = np.clip(x_t, -scale, scale)
    return x_t


def epsilon_from_x0(x_t, x0_hat, alpha_bar_t):
    """Invert the corruption identity: eps = (x_t - sqrt(ab)*x0) / sqrt(1-ab)."""
    ab = np.asarray(alpha_bar_t, dtype=np.float64)
    if np.any(ab >= 1.0):
        raise ContractError(f"epsilon undefined at alpha_bar >= 1 (got {ab})")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x_t.ndim - np.ndim(ab)))
    return (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def ddim_step(x_t, x0_hat, eps_hat, t, t_prev, sched: NoiseSchedule,
              scale: float = SIGNAL_SCALE, clip: bool = True):
    """Deterministic (eta=0) reverse update from t to t_prev < t."""
    if not t_prev < t:
        raise ContractError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    ab_prev = _gather_alpha_bar(sched, t_prev)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    if clip:
        out = np.clip(out, -scale, scale)
    return out


def ddim_timestep_pairs(T: int, steps: int):
    """(t, t_prev) pairs for a strided reverse pass; steps=1 gives [(T, 0)]."""
    if steps < 1 or steps > T:
        raise ConfigError(f"ddim steps must be in [1, {T}], got {steps}")
    ts = np.linspace(0, T, steps + 1).round().astype(np.int64)
    ts = np.unique(ts)[::-1]  # descending, e.g. [T, ..., 0]
    return [(int(a), int(b)) for a, b in zip(ts[:-1], ts[1:])]


def box_renewal(x, scores, rng, threshold: float = 0.5,
                scale: float = SIGNAL_SCALE):
    """Keep confident proposal rows bit-exactly, resample the rest.

    A row survives iff its max class score exceeds `threshold`. Replaced
    rows draw fresh standard Gaussian signal, clamped to the signal range.
    Returns (renewed, kept_mask).
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"renewal threshold must be in (0,1), got {threshold}")
    x = np.asarray(x, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    keep = scores.max(axis=-1) > threshold  # [B,N]
    fresh = np.clip(rng.standard_normal(x.shape), -scale, scale)
    out = np.where(keep[..., None], x, fresh)
    return out, keep
