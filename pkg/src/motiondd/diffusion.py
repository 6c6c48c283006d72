"""Categorical corruption chain with optional absorbing mask state.

Tokens are 0-based: real codes are ``0..K-1`` and the mask token is ``K``.
Step ``t`` runs over ``1..T``; ``t = 0`` denotes clean data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

PROFILES = ("uniform", "mask-and-replace")
KL_FLOOR = 1e-30


class ImpossiblePosteriorError(ValueError):
    """Raised when a (u_t, u_0) pair has zero probability under the schedule."""

    def __init__(self, position, message):
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step keep/replace/mask probabilities.

    ``alpha[t - 1]``, ``beta[t - 1]``, ``gamma[t - 1]`` hold the values for
    step ``t``. The cumulative arrays have length ``T + 1`` and are indexed
    by ``t`` directly, with ``t = 0`` the identity.
    """

    T: int
    K: int
    profile: str
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    alpha_bar: np.ndarray = field(init=False, repr=False)
    beta_bar: np.ndarray = field(init=False, repr=False)
    gamma_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if not (alpha.shape == beta.shape == gamma.shape == (self.T,)):
            raise ValueError(f"schedule arrays must have shape ({self.T},)")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        for name, arr in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
            if np.any(arr < -1e-15) or np.any(arr > 1 + 1e-15):
                raise ValueError(f"{name} outside [0, 1]")
        if np.any(np.abs(alpha + beta + gamma - 1.0) > 1e-12):
            raise ValueError("alpha + beta + gamma must equal 1 at every step")
        alpha, beta, gamma = (np.clip(a, 0.0, 1.0) for a in (alpha, beta, gamma))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

        alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
        survive = np.concatenate([[1.0], np.cumprod(1.0 - gamma)])
        gamma_bar = 1.0 - survive
        beta_bar = np.clip(survive - alpha_bar, 0.0, 1.0)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "beta_bar", beta_bar)
        object.__setattr__(self, "gamma_bar", gamma_bar)

    @property
    def mask_id(self):
        return self.K

    @property
    def n_states(self):
        return self.K + 1

    @property
    def terminal_masked(self):
        return self.gamma_bar[self.T] >= 1.0 - 1e-6

    @cached_property
    def transition_stack(self):
        """``(T+1, K+1, K+1)`` one-step kernels; index 0 is the identity."""
        return np.stack([np.eye(self.K + 1)] + [transition_matrix(self, t) for t in range(1, self.T + 1)])

    @cached_property
    def cumulative_stack(self):
        """``(T+1, K+1, K+1)`` closed-form marginal kernels."""
        return np.stack([cumulative_matrix(self, t) for t in range(self.T + 1)])

    def to_dict(self):
        return {
            "T": self.T,
            "K": self.K,
            "profile": self.profile,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            T=int(d["T"]),
            K=int(d["K"]),
            profile=str(d["profile"]),
            alpha=np.asarray(d["alpha"], dtype=np.float64),
            beta=np.asarray(d["beta"], dtype=np.float64),
            gamma=np.asarray(d["gamma"], dtype=np.float64),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def schedule_from_cumulative(T, K, profile, alpha_bar, gamma_bar):
    """Recover per-step probabilities from cumulative keep and mask masses.

    ``alpha_bar`` and ``gamma_bar`` have length ``T + 1`` with
    ``alpha_bar[0] == 1`` and ``gamma_bar[0] == 0``.
    """
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    survive = 1.0 - np.asarray(gamma_bar, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(alpha_bar[:-1] > 0, alpha_bar[1:] / alpha_bar[:-1], 0.0)
        keep = np.where(survive[:-1] > 0, survive[1:] / survive[:-1], 0.0)
    gamma = 1.0 - keep
    beta = keep - alpha
    # round-off only; a genuinely negative beta means the cumulative masses are inconsistent
    if np.any(beta < -1e-12):
        raise ValueError("cumulative masses imply a negative replace probability")
    beta = np.maximum(beta, 0.0)
    return NoiseSchedule(T=T, K=K, profile=profile, alpha=alpha, beta=beta, gamma=gamma)


def build_schedule(T, K, profile="mask-and-replace", leak=0.1):
    """Build a schedule ending fully masked (or fully uniform for ``"uniform"``).

    ``mask-and-replace``: cumulative mask mass ``t/T`` plus a uniform-replace
    mass ``leak * (t/T) * (1 - t/T)`` that vanishes at both ends.
    ``uniform``: no mask, cumulative keep mass ``1 - t/T``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if profile not in PROFILES:
        raise ValueError(f"unknown schedule profile {profile!r}; expected one of {PROFILES}")
    frac = np.arange(T + 1, dtype=np.float64) / T
    if profile == "uniform":
        alpha_bar = 1.0 - frac
        gamma_bar = np.zeros(T + 1)
    else:
        if not 0.0 <= leak < 1.0:
            raise ValueError("leak must lie in [0, 1)")
        gamma_bar = frac
        alpha_bar = 1.0 - frac - leak * frac * (1.0 - frac)
    return schedule_from_cumulative(T, K, profile, alpha_bar, gamma_bar)


def _check_step(s, t, lo=1):
    t = np.asarray(t)
    if t.size and (t.min() < lo or t.max() > s.T):
        raise ValueError(f"step t={t} outside [{lo}, {s.T}]")


def transition_matrix(s, t):
    """One-step kernel ``Q[i, j] = q(u_t = j | u_{t-1} = i)``."""
    _check_step(s, t)
    K = s.K
    a, b, g = s.alpha[t - 1], s.beta[t - 1], s.gamma[t - 1]
    Q = np.zeros((K + 1, K + 1))
    Q[:K, :K] = b / K
    Q[np.arange(K), np.arange(K)] += a
    Q[:K, K] = g
    Q[K, K] = 1.0
    return Q


def cumulative_matrix(s, t):
    """Closed-form ``Qbar[i, j] = q(u_t = j | u_0 = i)`` for ``0 <= t <= T``."""
    _check_step(s, t, lo=0)
    K = s.K
    Q = np.zeros((K + 1, K + 1))
    Q[:K, :K] = s.beta_bar[t] / K
    Q[np.arange(K), np.arange(K)] += s.alpha_bar[t]
    Q[:K, K] = s.gamma_bar[t]
    Q[K, K] = 1.0
    return Q


def _as_tokens(u, s, allow_mask=True):
    u = np.asarray(u)
    if not np.issubdtype(u.dtype, np.integer):
        raise TypeError("token arrays must be integer typed")
    hi = s.K if allow_mask else s.K - 1
    if u.size and (u.min() < 0 or u.max() > hi):
        what = "mask-free tokens in" if not allow_mask else "tokens in"
        raise ValueError(f"expected {what} [0, {hi}]")
    return u


def marginal(u0, s, t):
    """Distribution ``q(u_t | u_0)`` per position, shape ``u0.shape + (K+1,)``."""
    u0 = _as_tokens(u0, s, allow_mask=False)
    return cumulative_matrix(s, t)[u0]


def posterior(u_t, u0, s, t):
    """Bayes posterior ``q(u_{t-1} | u_t, u_0)`` per position."""
    _check_step(s, t)
    u_t = _as_tokens(u_t, s)
    u0 = _as_tokens(u0, s, allow_mask=False)
    prior = cumulative_matrix(s, t - 1)[u0]
    like = transition_matrix(s, t)[:, u_t]
    unnorm = prior * np.moveaxis(like, 0, -1)
    z = unnorm.sum(axis=-1, keepdims=True)
    bad = np.argwhere(z[..., 0] <= 0)
    if len(bad):
        pos = tuple(int(i) for i in bad[0])
        raise ImpossiblePosteriorError(
            pos, f"u_t={int(u_t[pos])} unreachable from u_0={int(u0[pos])} at t={t} (position {pos})"
        )
    return unnorm / z


def reverse_from_x0(p_x0, u_t, s, t, return_parts=False):
    """Compose ``p(u_{t-1} | u_t) = sum_k q(u_{t-1} | u_t, u_0=k) p(u_0=k)``.

    ``p_x0`` has shape ``u_t.shape + (K,)``. Clean tokens that cannot reach
    ``u_t`` under the schedule are dropped and the mixture renormalized.
    With ``return_parts`` the per-source posteriors ``M`` (``... x K x K+1``),
    validity mask and mixture normalizer are also returned for backprop.
    """
    _check_step(s, t)
    u_t = _as_tokens(u_t, s)
    K = s.K
    like = np.moveaxis(transition_matrix(s, t)[:, u_t], 0, -1)  # (..., K+1)
    prior = cumulative_matrix(s, t - 1)[:K]  # (K, K+1)
    num = prior * like[..., None, :]  # (..., K, K+1)
    z = num.sum(axis=-1)  # (..., K)
    valid = z > 0
    M = np.divide(num, z[..., None], out=np.zeros_like(num), where=valid[..., None])
    w = p_x0 * valid
    norm = w.sum(axis=-1, keepdims=True)
    bad = np.argwhere(norm[..., 0] <= 0)
    if len(bad):
        pos = tuple(int(i) for i in bad[0])
        raise ImpossiblePosteriorError(pos, f"u_t={int(u_t[pos])} unreachable at t={t} (position {pos})")
    probs = np.einsum("...k,...kj->...j", w, M) / norm
    if return_parts:
        return probs, M, valid, norm
    return probs


def reverse_parts_batched(p_x0, u_t, s, t):
    """Batched ``reverse_from_x0`` with a per-row step ``t`` of shape ``(B,)``.

    ``u_t`` is ``(B, n)`` and ``p_x0`` is ``(B, n, K)``. Returns
    ``(probs, M, valid, norm, like)`` where ``like[b, i, j] = q(u_t | u_{t-1}=j)``.
    """
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 1 or t.max() > s.T:
        raise ValueError(f"steps must lie in [1, {s.T}]")
    u_t = _as_tokens(u_t, s)
    K = s.K
    like = s.transition_stack[t[:, None], :, u_t]  # (B, n, K+1)
    prior = s.cumulative_stack[t - 1][:, :K, :]  # (B, K, K+1)
    num = prior[:, None, :, :] * like[:, :, None, :]
    z = num.sum(axis=-1)
    valid = z > 0
    M = np.divide(num, z[..., None], out=np.zeros_like(num), where=valid[..., None])
    w = p_x0 * valid
    norm = w.sum(axis=-1, keepdims=True)
    if np.any(norm <= 0):
        b, i = (int(v) for v in np.argwhere(norm[..., 0] <= 0)[0])
        raise ImpossiblePosteriorError((b, i), f"u_t={int(u_t[b, i])} unreachable at t={int(t[b])} (position {(b, i)})")
    probs = np.einsum("bnk,bnkj->bnj", w, M) / norm
    return probs, M, valid, norm, like


def kl_categorical(q, p):
    """``sum q log(q / p)`` over the last axis with ``p`` floored at 1e-30."""
    q = np.asarray(q, dtype=np.float64)
    p = np.maximum(np.asarray(p, dtype=np.float64), KL_FLOOR)
    pos = q > 0
    terms = np.where(pos, q * (np.log(np.where(pos, q, 1.0)) - np.log(p)), 0.0)
    return terms.sum(axis=-1)


def vlb_loss(model_probs, u_t, u0, s, t):
    """Variational bound term at step ``t``, summed over positions.

    ``t == 1`` is the reconstruction term ``-log p(u_0 | u_1)``; larger ``t``
    gives the KL between the true and model posteriors.
    """
    _check_step(s, t)
    u0 = _as_tokens(u0, s, allow_mask=False)
    model_probs = np.asarray(model_probs, dtype=np.float64)
    if t == 1:
        picked = np.take_along_axis(model_probs, u0[..., None], axis=-1)[..., 0]
        return float(-np.log(np.maximum(picked, KL_FLOOR)).sum())
    q = posterior(u_t, u0, s, t)
    return float(kl_categorical(q, model_probs).sum())


def prior_loss(u0, s):
    """``KL(q(u_T | u_0) || p(u_T))`` with the schedule's terminal prior.

    The terminal prior is the mask point mass for absorbing schedules and the
    uniform distribution over real codes otherwise. Parameter free.
    """
    q = marginal(u0, s, s.T)
    p = terminal_distribution(s)
    return float(kl_categorical(q, p).sum())


def terminal_distribution(s):
    p = np.zeros(s.K + 1)
    if s.gamma_bar[s.T] > 0:
        p[s.K] = 1.0
    else:
        p[: s.K] = 1.0 / s.K
    return p


def forward_sample(u_prev, s, t, rng):
    """Sample ``u_t ~ q(u_t | u_{t-1})`` position-wise."""
    _check_step(s, t)
    u_prev = _as_tokens(u_prev, s)
    return _keep_replace_mask(u_prev, s.alpha[t - 1], s.beta[t - 1], s.K, rng)


def sample_marginal(u0, s, t, rng):
    """Sample ``u_t ~ q(u_t | u_0)`` directly from the closed-form marginal.

    ``t`` may be an array broadcastable against ``u0`` (e.g. ``(B, 1)``).
    """
    _check_step(s, t, lo=0)
    u0 = _as_tokens(u0, s, allow_mask=False)
    t = np.asarray(t)
    return _keep_replace_mask(u0, s.alpha_bar[t], s.beta_bar[t], s.K, rng)


def _keep_replace_mask(u, keep, replace, K, rng):
    r = rng.random(u.shape)
    fresh = rng.integers(0, K, size=u.shape)
    out = np.where(r < keep, u, np.where(r < keep + replace, fresh, K))
    return np.where(u == K, K, out).astype(np.int64)
