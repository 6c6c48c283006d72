"""Evaluation metrics on extracted motion/text features.

All metrics take plain ``(M, F)`` feature matrices. A deterministic
random-projection extractor is provided for desk-scale runs; real
evaluations should feed externally computed features instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_generator, check_matrix

EIG_REJECT = 1e-8


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats):
        feats = check_matrix(feats, "features", min_rows=2)
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1]))


def _psd_sqrt(S, name):
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -EIG_REJECT * scale:
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def trace_sqrt_product(A, B):
    """``Tr((A B)^{1/2})`` for symmetric PSD ``A`` and ``B``.

    ``A B`` is similar to ``A^{1/2} B A^{1/2}``, which is symmetric PSD, so the
    trace of the square root is the sum of square roots of its eigenvalues.
    """
    rootA = _psd_sqrt(A, "first covariance")
    inner = rootA @ B @ rootA
    inner = 0.5 * (inner + inner.T)
    w = np.linalg.eigvalsh(inner)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -EIG_REJECT * scale:
        raise ValueError(f"covariance product is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(mu1, sigma1, mu2, sigma2):
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ValueError("mismatched Gaussian summaries")
    diff = mu1 - mu2
    value = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * trace_sqrt_product(sigma1, sigma2)
    return float(max(value, 0.0))


def fid(real, gen):
    real = check_matrix(real, "real", min_rows=2)
    gen = check_matrix(gen, "gen", min_rows=2, ncols=real.shape[1])
    a, b = GaussianSummary.from_features(real), GaussianSummary.from_features(gen)
    return frechet_distance(a.mean, a.cov, b.mean, b.cov)


def mm_dist(motion_feats, text_feats):
    m = check_matrix(motion_feats, "motion_feats")
    t = check_matrix(text_feats, "text_feats", ncols=m.shape[1])
    if len(m) != len(t):
        raise ValueError(f"paired features differ in count: {len(m)} motions vs {len(t)} texts")
    return float(np.linalg.norm(m - t, axis=1).mean())


def r_precision(motion_feats, text_feats, pool_size=32, top_k=(1, 2, 3), rng=None):
    """Top-k retrieval accuracy of the paired motion among ``pool_size`` candidates.

    Each text is ranked against its own motion plus ``pool_size - 1``
    distractors drawn without replacement from the other motions. Candidates
    are ordered by dataset index before ranking, so ties go to the lower index.
    """
    m = check_matrix(motion_feats, "motion_feats")
    t = check_matrix(text_feats, "text_feats", ncols=m.shape[1])
    n = len(m)
    if len(t) != n:
        raise ValueError("paired features differ in count")
    if n < pool_size:
        raise ValueError(f"need at least {pool_size} pairs, got {n}")
    rng = as_generator(rng)
    hits = np.zeros(len(top_k))
    ks = np.asarray(top_k)
    for i in range(n):
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = others + (others >= i)
        pool = np.sort(np.append(others, i))
        d = np.linalg.norm(m[pool] - t[i], axis=1)
        order = np.argsort(d, kind="stable")
        rank = int(np.flatnonzero(pool[order] == i)[0])
        hits += rank < ks
    return tuple(float(h) for h in hits / n)


def diversity(feats, subset=300, rng=None):
    feats = check_matrix(feats, "feats")
    if len(feats) < 2 * subset:
        raise ValueError(f"diversity needs at least {2 * subset} rows, got {len(feats)}")
    rng = as_generator(rng)
    idx = rng.choice(len(feats), size=2 * subset, replace=False)
    a, b = feats[idx[:subset]], feats[idx[subset:]]
    return float(np.linalg.norm(a - b, axis=1).mean())


def mmodality(per_text_feats, subset=10, rng=None):
    """Mean distance between two disjoint ``subset``-sized draws per text.

    Texts are visited in sorted key order so the value does not depend on the
    mapping's insertion order.
    """
    rng = as_generator(rng)
    if not per_text_feats:
        raise ValueError("no texts given")
    total = 0.0
    for key in sorted(per_text_feats):
        f = check_matrix(per_text_feats[key], f"features for {key!r}")
        if len(f) < 2 * subset:
            raise ValueError(f"text {key!r} has {len(f)} generations; need at least {2 * subset}")
        idx = rng.choice(len(f), size=2 * subset, replace=False)
        total += np.linalg.norm(f[idx[:subset]] - f[idx[subset:]], axis=1).sum()
    return float(total / (subset * len(per_text_feats)))


def expected_gaussian_distance(F, var=1.0):
    """``E||X - Y||`` for independent ``N(0, var I_F)`` vectors."""
    return math.sqrt(2 * var) * math.sqrt(2) * math.exp(math.lgamma((F + 1) / 2) - math.lgamma(F / 2))


def summarize_runs(runs):
    """Mean and 95% confidence half-width (normal approximation)."""
    runs = np.asarray(runs, dtype=np.float64)
    mean = float(runs.mean())
    if len(runs) < 2:
        return {"mean": mean, "ci95": 0.0, "runs": runs.tolist()}
    ci = 1.96 * runs.std(ddof=1) / math.sqrt(len(runs))
    return {"mean": mean, "ci95": float(ci), "runs": runs.tolist()}


def evaluation_protocol(real, draw, repeats=20, draw_multimodal=None, mmodality_repeats=5, seed=0,
                        pool_size=32, diversity_subset=300, mmodality_subset=10):
    """Repeat every metric with independent RNG streams and report mean +- ci95.

    ``draw(rng)`` returns row-paired ``(gen_feats, text_feats)`` for one
    repetition (typically a fresh batch of generations). ``draw_multimodal(rng)``
    returns ``{text: gen_feats}`` for MModality. Repetition ``r`` uses the
    stream ``default_rng([seed, r])``; results are reduced in repetition order.
    """
    real = check_matrix(real, "real", min_rows=2)
    runs = {k: [] for k in ("fid", "mm_dist", "top1", "top2", "top3", "diversity")}
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        gen, text = draw(rng)
        gen = check_matrix(gen, "gen", min_rows=2, ncols=real.shape[1])
        runs["fid"].append(fid(real, gen))
        runs["mm_dist"].append(mm_dist(gen, text))
        if len(gen) >= pool_size:
            for name, v in zip(("top1", "top2", "top3"), r_precision(gen, text, pool_size=pool_size, rng=rng)):
                runs[name].append(v)
        runs["diversity"].append(diversity(gen, subset=min(diversity_subset, len(gen) // 2), rng=rng))
    report = {k: summarize_runs(v) for k, v in runs.items() if v}
    if draw_multimodal is not None:
        mm_runs = []
        for r in range(mmodality_repeats):
            rng = np.random.default_rng([seed, 10_000 + r])
            mm_runs.append(mmodality(draw_multimodal(rng), subset=mmodality_subset, rng=rng))
        report["mmodality"] = summarize_runs(mm_runs)
    return report


class RandomProjectionExtractor:
    """Seeded random-projection features for motion clips and texts.

    Motion clips are summarized by per-channel mean and standard deviation over
    time; texts use the layered n-gram provider's pooled features. Both are
    projected into a shared ``width``-dimensional space with fixed Gaussian
    matrices, so MM-Dist style comparisons are well-defined (if not semantic).
    """

    def __init__(self, width=32, seed=0, provider=None):
        self.width = width
        self.seed = seed
        self.provider = provider
        self._motion_proj = {}
        self._text_proj = None

    def _projection(self, dim, tag):
        rng = np.random.default_rng([self.seed, tag, dim])
        return rng.standard_normal((dim, self.width)) / math.sqrt(dim)

    def motion_features(self, clips):
        rows = []
        for clip in clips:
            x = np.asarray(getattr(clip, "features", clip), dtype=np.float64)
            stats = np.concatenate([x.mean(axis=0), x.std(axis=0)])
            if stats.size not in self._motion_proj:
                self._motion_proj[stats.size] = self._projection(stats.size, 1)
            rows.append(stats @ self._motion_proj[stats.size])
        return np.vstack(rows)

    def text_features(self, texts):
        if self.provider is None:
            from .hsa import NgramProvider

            self.provider = NgramProvider(seed=self.seed)
        rows = []
        for text in texts:
            layers = self.provider.embed(text)
            v = np.concatenate([layers[i] for i in sorted(layers)])
            if self._text_proj is None or self._text_proj.shape[0] != v.size:
                self._text_proj = self._projection(v.size, 2)
            rows.append(v @ self._text_proj)
        return np.vstack(rows)
