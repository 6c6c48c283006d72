"""Reverse-process generation with classifier-free guidance and Gumbel-max sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion as D
from .denoiser import model_reverse


class TerminalMaskError(RuntimeError):
    """Mask tokens survived to the end of the reverse chain."""


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scale ``s``, number of inference steps, and the base seed.

    ``s=2`` favours text consistency, ``s=1`` favours diversity.
    """

    s: float = 2.0
    steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.s) or self.s < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.s}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")


def apply_guidance(p_cond, p_uncond, s):
    """``(1 + s) p_cond - s p_uncond`` with negatives clamped to zero, rows renormalized."""
    p_cond = np.asarray(p_cond, dtype=np.float64)
    p_uncond = np.asarray(p_uncond, dtype=np.float64)
    if p_cond.shape != p_uncond.shape:
        raise ValueError(f"shape mismatch: {p_cond.shape} vs {p_uncond.shape}")
    if s < 0:
        raise ValueError("guidance scale must be >= 0")
    if s == 0:
        return p_cond.copy()
    mixed = np.maximum((1.0 + s) * p_cond - s * p_uncond, 0.0)
    z = mixed.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        bad = np.argwhere(z[..., 0] <= 0)[0]
        raise ValueError(f"guidance left no probability mass at row {tuple(int(i) for i in bad)}")
    return mixed / z


def gumbel_sample(probs, rng=None):
    """Draw one category per row as ``argmax(log p + G)`` with standard Gumbel ``G``."""
    rng = np.random.default_rng(rng)
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), -np.inf)
    return np.argmax(logp + rng.gumbel(size=probs.shape), axis=-1)


def _schedule_for(schedule, steps):
    if schedule.T == steps:
        return schedule
    leak = 0.1
    if schedule.profile == "mask-and-replace" and schedule.T >= 2:
        # recover the replace mass from the first cumulative keep probability
        f = 1.0 / schedule.T
        leak = float(np.clip((1.0 - f - schedule.alpha_bar[1]) / (f * (1.0 - f)), 0.0, 0.999))
    return D.build_schedule(steps, schedule.K, profile=schedule.profile, leak=leak)


def generate(model, cond, cfg, n, schedule, n_samples=None, call_index=0, callback=None):
    """Sample clean token sequences of length ``n``.

    ``cond`` is a condition vector, a ``(n_samples, cond_dim)`` array, or
    ``None`` for unconditional generation. The chain runs for ``cfg.steps``
    steps (the schedule is rebuilt with the same profile if its length
    differs). Randomness is drawn from ``default_rng([cfg.seed, call_index])``.
    ``callback(t, probs, tokens)`` observes every reverse step.
    """
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    s = _schedule_for(schedule, cfg.steps)
    rng = np.random.default_rng([cfg.seed, call_index])
    B = 1 if n_samples is None else n_samples
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (B, cond.shape[0]))
        elif cond.shape[0] != B:
            raise ValueError(f"{cond.shape[0]} conditions for {B} samples")
    if s.terminal_masked:
        u = np.full((B, n), s.mask_id, dtype=np.int64)
    else:
        u = rng.integers(0, s.K, size=(B, n))
    for t in range(s.T, 0, -1):
        if cond is None:
            probs = model_reverse(model, u, t, s)
        else:
            probs = model_reverse(model, u, t, s, cond)
            if cfg.s > 0:
                probs = apply_guidance(probs, model_reverse(model, u, t, s), cfg.s)
        u = gumbel_sample(probs, rng)
        if callback is not None:
            callback(t, probs, u)
    if np.any(u == s.mask_id):
        raise TerminalMaskError("mask tokens remain after the final reverse step")
    return u[0] if n_samples is None else u


@dataclass
class PipelineBundle:
    """Everything needed to go from text to motion."""

    vq: object
    denoiser: object
    schedule: D.NoiseSchedule
    aggregator: object = None
    provider: object = None


def generate_motion(text, bundle, cfg, n, call_index=0):
    """Text (or ``None`` for unconditional) to a decoded motion clip of ``n / eta`` frames."""
    from .hsa import aggregate
    from .vq import decode_from_tokens

    cond = None
    if text is not None:
        if bundle.provider is None or bundle.aggregator is None:
            raise ValueError("conditional generation needs a text provider and an aggregator")
        cond = aggregate(bundle.aggregator, bundle.provider.embed(text))
    tokens = generate(bundle.denoiser, cond, cfg, n, bundle.schedule, call_index=call_index)
    return decode_from_tokens(tokens, bundle.vq)
