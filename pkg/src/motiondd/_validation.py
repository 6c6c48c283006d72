"""Input checks shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np


def as_generator(seed):
    """Accept ``None``, an int, a ``SeedSequence`` or an existing ``Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_matrix(X, name="X", min_rows=1, ncols=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if ncols is not None and X.shape[1] != ncols:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {ncols}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_row_stochastic(P, name="probs", atol=1e-9):
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 0):
        raise ValueError(f"{name} has negative entries")
    if np.any(np.abs(P.sum(axis=-1) - 1.0) > atol):
        raise ValueError(f"{name} rows do not sum to 1")
    return P


def check_tokens(u, K, allow_mask=False, name="tokens"):
    u = np.asarray(u)
    if u.dtype.kind not in "iu":
        raise TypeError(f"{name} must be integer typed")
    hi = K if allow_mask else K - 1
    if u.size and (u.min() < 0 or u.max() > hi):
        raise ValueError(f"{name} must lie in [0, {hi}]")
    return u.astype(np.int64)
