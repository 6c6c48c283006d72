"""Hierarchical aggregation of multi-layer text features into one condition vector.

The condition is ``c = sum_i a_i * F_i(x_i)`` over a fixed set of encoder
layers, where ``a_i`` is a learnable scalar and ``F_i`` a two-layer MLP.
Text features come from a provider: anything with
``embed(text) -> {layer: vector}``.
"""

from __future__ import annotations

import hashlib
import math
import re
import struct
from collections import Counter
from pathlib import Path

import numpy as np

DEFAULT_LAYERS = (7, 9, 11, 12)
EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9']+")


def tokenize(text):
    if isinstance(text, str):
        return _TOKEN_RE.findall(text.lower())
    return [str(t).lower() for t in text]


class NgramProvider:
    """Deterministic stand-in for a layered text encoder.

    Layer ``S[r]`` (``r`` counted from 1 in sorted order) mean-pools seeded
    Gaussian codes of the text's ``r``-grams, so shallow layers see a bag of
    words and deeper ones see word order. Texts shorter than ``r`` words are
    treated as a single gram.
    """

    def __init__(self, layers=DEFAULT_LAYERS, width=64, seed=0):
        self.layers = tuple(sorted(layers))
        if isinstance(width, dict):
            self.widths = {i: int(width[i]) for i in self.layers}
        else:
            self.widths = {i: int(width) for i in self.layers}
        self.seed = seed
        self._cache = {}

    def order(self, layer):
        return self.layers.index(layer) + 1

    def gram_vector(self, layer, gram):
        key = (layer, gram)
        if key not in self._cache:
            digest = hashlib.blake2b(" ".join(gram).encode(), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            rng = np.random.default_rng([self.seed, layer, h])
            self._cache[key] = rng.standard_normal(self.widths[layer]) / math.sqrt(self.widths[layer])
        return self._cache[key]

    def grams(self, tokens, n):
        if len(tokens) < n:
            return [tuple(tokens)]
        return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]

    def embed(self, text):
        tokens = tokenize(text)
        if not tokens:
            raise ValueError("cannot embed empty text")
        out = {}
        for layer in self.layers:
            counts = Counter(self.grams(tokens, self.order(layer)))
            total = sum(counts.values())
            vec = np.zeros(self.widths[layer])
            for gram, c in sorted(counts.items()):
                vec += c * self.gram_vector(layer, gram)
            out[layer] = vec / total
        return out

    def embed_batch(self, texts):
        per = [self.embed(t) for t in texts]
        return {i: np.vstack([p[i] for p in per]) for i in self.layers}


def write_emb1(path, features):
    """Write ``{layer: array}`` as an EMB1 file.

    Layout (little endian): ``b"EMB1"``, u32 version, u32 entry count, then
    per entry u32 layer id, u32 rows, u32 width; then the f32 blobs in entry
    order, each row-major. 1-D arrays are stored as one row.
    """
    items = sorted(features.items())
    header = [EMB1_MAGIC, struct.pack("<II", EMB1_VERSION, len(items))]
    blobs = []
    for layer, arr in items:
        a = np.atleast_2d(np.asarray(arr, dtype="<f4"))
        header.append(struct.pack("<III", int(layer), a.shape[0], a.shape[1]))
        blobs.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(header + blobs))


def read_emb1(path, squeeze=True):
    data = Path(path).read_bytes()
    if data[:4] != EMB1_MAGIC:
        raise ValueError(f"{path}: not an EMB1 file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != EMB1_VERSION:
        raise ValueError(f"{path}: unsupported EMB1 version {version}")
    off = 12
    entries = []
    for _ in range(count):
        entries.append(struct.unpack_from("<III", data, off))
        off += 12
    out = {}
    for layer, rows, width in entries:
        n = rows * width
        a = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(rows, width).astype(np.float64)
        off += 4 * n
        out[layer] = a[0] if squeeze and rows == 1 else a
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after declared blobs")
    return out


def text_key(text):
    return hashlib.sha1(" ".join(tokenize(text)).encode()).hexdigest()[:16]


class PrecomputedProvider:
    """Provider backed by a directory of EMB1 files named ``<text_key>.emb1``."""

    def __init__(self, directory, layers=DEFAULT_LAYERS):
        self.directory = Path(directory)
        self.layers = tuple(sorted(layers))

    def embed(self, text):
        path = self.directory / f"{text_key(text)}.emb1"
        if not path.exists():
            raise FileNotFoundError(f"no precomputed features for {text!r} at {path}")
        feats = read_emb1(path)
        missing = [i for i in self.layers if i not in feats]
        if missing:
            raise KeyError(f"{path} lacks layers {missing}")
        return {i: feats[i] for i in self.layers}


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre, post: 1.0 - post**2),
    "identity": (lambda x: x, lambda pre, post: np.ones_like(pre)),
}


class HierarchicalAggregator:
    """Learnable weighted sum of per-layer MLP projections.

    Parameters live in ``self.params`` under the names ``a`` (one weight per
    layer, in sorted layer order) and ``W1.<layer>``, ``b1.<layer>``,
    ``W2.<layer>``, ``b2.<layer>``.
    """

    def __init__(self, layer_widths, cond_dim=256, hidden=None, activation="tanh", seed=0):
        self.layers = tuple(sorted(layer_widths))
        self.layer_widths = {i: int(layer_widths[i]) for i in self.layers}
        self.cond_dim = cond_dim
        self.hidden = hidden or 2 * cond_dim
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        rng = np.random.default_rng(seed)
        L = len(self.layers)
        self.params = {"a": np.full(L, 1.0 / L)}
        for i in self.layers:
            w = self.layer_widths[i]
            self.params[f"W1.{i}"] = rng.standard_normal((w, self.hidden)) / math.sqrt(w)
            self.params[f"b1.{i}"] = np.zeros(self.hidden)
            self.params[f"W2.{i}"] = rng.standard_normal((self.hidden, cond_dim)) / math.sqrt(self.hidden)
            self.params[f"b2.{i}"] = np.zeros(cond_dim)

    @classmethod
    def identity(cls, layers, dim):
        """Blocks that pass features through unchanged (``F_i(x) = x``)."""
        agg = cls({i: dim for i in layers}, cond_dim=dim, hidden=dim, activation="identity")
        for i in agg.layers:
            agg.params[f"W1.{i}"] = np.eye(dim)
            agg.params[f"W2.{i}"] = np.eye(dim)
        return agg

    def _check(self, feats):
        missing = [i for i in self.layers if i not in feats]
        if missing:
            raise KeyError(f"missing text features for layer(s) {missing}")

    def project(self, layer, x):
        act = _ACTIVATIONS[self.activation][0]
        p = self.params
        return act(x @ p[f"W1.{layer}"] + p[f"b1.{layer}"]) @ p[f"W2.{layer}"] + p[f"b2.{layer}"]

    def forward(self, feats):
        """Return ``(c, cache)``; ``c`` is ``(B, cond_dim)`` or ``(cond_dim,)`` for unbatched input."""
        self._check(feats)
        act = _ACTIVATIONS[self.activation][0]
        p = self.params
        single = np.ndim(feats[self.layers[0]]) == 1
        c = 0.0
        cache = {"single": single}
        for r, i in enumerate(self.layers):
            x = np.atleast_2d(np.asarray(feats[i], dtype=np.float64))
            if x.shape[1] != self.layer_widths[i]:
                raise ValueError(f"layer {i} features have width {x.shape[1]}, expected {self.layer_widths[i]}")
            pre = x @ p[f"W1.{i}"] + p[f"b1.{i}"]
            hid = act(pre)
            proj = hid @ p[f"W2.{i}"] + p[f"b2.{i}"]
            c = c + p["a"][r] * proj
            cache[i] = (x, pre, hid, proj)
        return (c[0] if single else c), cache

    def __call__(self, feats):
        return self.forward(feats)[0]

    def backward(self, cache, grad_c):
        dact = _ACTIVATIONS[self.activation][1]
        p = self.params
        grad_c = np.atleast_2d(grad_c)
        grads = {"a": np.zeros_like(p["a"])}
        for r, i in enumerate(self.layers):
            x, pre, hid, proj = cache[i]
            grads["a"][r] = np.sum(grad_c * proj)
            gproj = p["a"][r] * grad_c
            grads[f"W2.{i}"] = hid.T @ gproj
            grads[f"b2.{i}"] = gproj.sum(axis=0)
            gpre = (gproj @ p[f"W2.{i}"].T) * dact(pre, hid)
            grads[f"W1.{i}"] = x.T @ gpre
            grads[f"b1.{i}"] = gpre.sum(axis=0)
        return grads

    def config(self):
        return {
            "layers": list(self.layers),
            "layer_widths": {str(i): w for i, w in self.layer_widths.items()},
            "cond_dim": self.cond_dim,
            "hidden": self.hidden,
            "activation": self.activation,
        }

    @classmethod
    def from_config(cls, cfg, params):
        agg = cls({int(k): v for k, v in cfg["layer_widths"].items()}, cond_dim=cfg["cond_dim"],
                  hidden=cfg["hidden"], activation=cfg["activation"])
        for k in agg.params:
            agg.params[k] = np.asarray(params[k], dtype=np.float64).reshape(agg.params[k].shape)
        return agg


def aggregate(aggregator, feats):
    """Condition vector for one text's (or a batch's) layer features."""
    return aggregator(feats)
