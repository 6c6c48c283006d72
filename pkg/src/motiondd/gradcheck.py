"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

import numpy as np


def numeric_grad(loss_fn, params, names=None, eps=1e-4, max_entries=None, rng=None):
    """Central differences of ``loss_fn()`` w.r.t. entries of ``params[name]``.

    ``params`` is mutated in place and restored. With ``max_entries`` only a
    random subset of each tensor is probed; the result then holds
    ``(flat_indices, values)`` per name instead of a full array.
    """
    rng = np.random.default_rng(rng)
    out = {}
    for name in names or list(params):
        arr = params[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        vals = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss_fn()
            flat[k] = orig - eps
            down = loss_fn()
            flat[k] = orig
            vals[j] = (up - down) / (2 * eps)
        out[name] = (idx, vals)
    return out


def max_relative_error(analytic, numeric, floor=1e-10):
    """Largest per-tensor ``||a - n|| / (||a|| + ||n||)`` over the probed entries.

    Tensors whose probed gradients are both below ``floor`` in norm count as exact.
    """
    worst = 0.0
    for name, (idx, vals) in numeric.items():
        a = np.asarray(analytic[name]).reshape(-1)[idx]
        denom = np.linalg.norm(a) + np.linalg.norm(vals)
        if denom < floor:
            continue
        worst = max(worst, float(np.linalg.norm(a - vals) / denom))
    return worst
