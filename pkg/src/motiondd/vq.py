"""Vector-quantized motion tokenizer: codebook, EMA learning, dead-code reset, toy encoder/decoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._container import read_container, write_container
from .motion_repr import MotionClip
from .optim import AdamW

log = logging.getLogger(__name__)

MVQ_MAGIC = b"MVQ1"


@dataclass
class Codebook:
    """``K`` code vectors of width ``d`` with their EMA statistics."""

    entries: np.ndarray
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None

    def __post_init__(self):
        self.entries = np.array(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise ValueError("codebook entries must be a (K, d) matrix")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        K = self.entries.shape[0]
        self.ema_counts = np.ones(K) if self.ema_counts is None else np.array(self.ema_counts, dtype=np.float64)
        self.ema_sums = self.entries.copy() if self.ema_sums is None else np.array(self.ema_sums, dtype=np.float64)
        if np.any(self.ema_counts < 0):
            raise ValueError("EMA counts must be non-negative")

    @property
    def K(self):
        return self.entries.shape[0]

    @property
    def d(self):
        return self.entries.shape[1]

    @classmethod
    def random(cls, K, d, seed=0, scale=1.0):
        if K < 2:
            raise ValueError("a codebook needs K >= 2")
        return cls(np.random.default_rng(seed).standard_normal((K, d)) * scale)

    def copy(self):
        return Codebook(self.entries.copy(), self.ema_counts.copy(), self.ema_sums.copy())


@dataclass
class QuantizationResult:
    tokens: np.ndarray
    z_q: np.ndarray
    distances: np.ndarray


def quantize(z, book):
    """Nearest code by Euclidean distance; exact ties go to the lowest index."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != book.d:
        raise ValueError(f"z has width {z.shape[1]}, codebook has {book.d}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    sq = np.sum((z[:, None, :] - book.entries[None]) ** 2, axis=-1)
    tokens = np.argmin(sq, axis=1)
    return QuantizationResult(tokens, book.entries[tokens], np.sqrt(sq))


def vq_loss(m, m_rec, z, z_q, beta=0.25):
    """``(total, recon, embed, commit)``: mean L1 reconstruction plus mean-squared embed/commit.

    ``commit`` already includes the ``beta`` factor. Under stop-gradient the
    embed term moves ``z`` and the commit term moves ``z_q``.
    """
    m, m_rec = np.asarray(m, dtype=np.float64), np.asarray(m_rec, dtype=np.float64)
    z, z_q = np.asarray(z, dtype=np.float64), np.asarray(z_q, dtype=np.float64)
    if m.shape != m_rec.shape or z.shape != z_q.shape:
        raise ValueError("shape mismatch")
    recon = float(np.mean(np.abs(m - m_rec)))
    sq = float(np.mean((z - z_q) ** 2))
    embed, commit = sq, beta * sq
    return recon + embed + commit, recon, embed, commit


def vq_loss_grads(m, m_rec, z, z_q, beta=0.25):
    """Gradients w.r.t. ``(m_rec, z, z_q)`` honouring the stop-gradients."""
    g_rec = np.sign(m_rec - m) / m.size
    diff = z - z_q
    return g_rec, 2.0 * diff / z.size, -2.0 * beta * diff / z.size


def ema_update(book, z, tokens, decay=0.99, eps=1e-5):
    """Return a new codebook with decayed counts/sums moved toward the batch assignments."""
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    tokens = np.asarray(tokens)
    counts = np.bincount(tokens, minlength=book.K).astype(np.float64)
    sums = np.zeros_like(book.ema_sums)
    np.add.at(sums, tokens, z)
    new_counts = decay * book.ema_counts + (1 - decay) * counts
    new_sums = decay * book.ema_sums + (1 - decay) * sums
    entries = new_sums / np.maximum(new_counts, eps)[:, None]
    return Codebook(entries, new_counts, new_sums)


def reset_dead_codes(book, z, usage_threshold=1.0, rng=None):
    """Re-seed codes whose EMA usage is below ``usage_threshold`` from random rows of ``z``.

    Returns ``(book, reset_count)``; reset codes restart with count 1.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[0] < 1:
        raise ValueError("need at least one row to re-seed from")
    rng = np.random.default_rng(rng)
    dead = np.flatnonzero(book.ema_counts < usage_threshold)
    if len(dead) == 0:
        return book, 0
    out = book.copy()
    rows = z[rng.integers(0, z.shape[0], size=len(dead))]
    out.entries[dead] = rows
    out.ema_counts[dead] = 1.0
    out.ema_sums[dead] = rows
    return out, int(len(dead))


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class VqEncoderDecoder:
    """Two stride-2 patch blocks down to width ``d`` and a mirrored decoder (``eta = 1/4``).

    Features are standardized with ``mean``/``std`` before encoding and
    restored after decoding.
    """

    dim: int
    d: int
    hidden: int = 64
    seed: int = 0
    mean: np.ndarray = None
    std: np.ndarray = None
    params: dict = field(default=None, repr=False)

    stride = 2
    n_blocks = 2

    def __post_init__(self):
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            D, h, d, s = self.dim, self.hidden, self.d, self.stride

            def w(i, o):
                return rng.standard_normal((i, o)) * math.sqrt(2.0 / i)

            self.params = {
                "enc0.W": w(s * D, h), "enc0.b": np.zeros(h),
                "enc1.W": w(s * h, h), "enc1.b": np.zeros(h),
                "enc_out.W": w(h, d) * 0.5, "enc_out.b": np.zeros(d),
                "dec_in.W": w(d, h), "dec_in.b": np.zeros(h),
                "dec0.W": w(h, s * h), "dec0.b": np.zeros(s * h),
                "dec1.W": w(h, s * D) * 0.5, "dec1.b": np.zeros(s * D),
            }
        self.mean = np.zeros(self.dim) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(self.dim) if self.std is None else np.asarray(self.std, dtype=np.float64)

    @property
    def window(self):
        return self.stride ** self.n_blocks

    @property
    def eta(self):
        return 1.0 / self.window

    def _pad(self, x):
        N = x.shape[-2]
        if N < self.window:
            raise ValueError(f"clip of {N} frames is shorter than one {self.window}-frame window")
        extra = (-N) % self.window
        if extra:
            x = np.concatenate([x, np.repeat(x[..., -1:, :], extra, axis=-2)], axis=-2)
        return x

    def encode(self, x, cache=False):
        """Raw features ``(B, N, D)`` to latents ``(B, N/4, d)``."""
        p, s = self.params, self.stride
        x = (self._pad(np.asarray(x, dtype=np.float64)) - self.mean) / self.std
        B, N, D = x.shape
        a0_in = x.reshape(B, N // s, s * D)
        a0 = _relu(a0_in @ p["enc0.W"] + p["enc0.b"])
        a1_in = a0.reshape(B, N // s ** 2, s * self.hidden)
        a1 = _relu(a1_in @ p["enc1.W"] + p["enc1.b"])
        z = a1 @ p["enc_out.W"] + p["enc_out.b"]
        if cache:
            return z, (a0_in, a0, a1_in, a1)
        return z

    def decode(self, z_q, cache=False):
        """Latents ``(B, n, d)`` to raw features ``(B, 4n, D)``."""
        p, s = self.params, self.stride
        B, n, _ = z_q.shape
        h0 = _relu(z_q @ p["dec_in.W"] + p["dec_in.b"])
        h1 = _relu(h0 @ p["dec0.W"] + p["dec0.b"]).reshape(B, n * s, self.hidden)
        y = (h1 @ p["dec1.W"] + p["dec1.b"]).reshape(B, n * s * s, self.dim)
        out = y * self.std + self.mean
        if cache:
            return out, (z_q, h0, h1)
        return out

    def backward_decoder(self, cache, g_out):
        p, s = self.params, self.stride
        z_q, h0, h1 = cache
        B, n, _ = z_q.shape
        g = {}
        gy = (g_out * self.std).reshape(B, n * s, s * self.dim)
        g["dec1.W"] = np.einsum("bnh,bno->ho", h1, gy)
        g["dec1.b"] = gy.sum(axis=(0, 1))
        gh1 = (gy @ p["dec1.W"].T) * (h1 > 0)
        gh1 = gh1.reshape(B, n, s * self.hidden)
        g["dec0.W"] = np.einsum("bnh,bno->ho", h0, gh1)
        g["dec0.b"] = gh1.sum(axis=(0, 1))
        gh0 = (gh1 @ p["dec0.W"].T) * (h0 > 0)
        g["dec_in.W"] = np.einsum("bnd,bnh->dh", z_q, gh0)
        g["dec_in.b"] = gh0.sum(axis=(0, 1))
        return g, gh0 @ p["dec_in.W"].T

    def backward_encoder(self, cache, g_z):
        p, s = self.params, self.stride
        a0_in, a0, a1_in, a1 = cache
        g = {}
        g["enc_out.W"] = np.einsum("bnh,bnd->hd", a1, g_z)
        g["enc_out.b"] = g_z.sum(axis=(0, 1))
        ga1 = (g_z @ p["enc_out.W"].T) * (a1 > 0)
        g["enc1.W"] = np.einsum("bni,bno->io", a1_in, ga1)
        g["enc1.b"] = ga1.sum(axis=(0, 1))
        ga1_in = ga1 @ p["enc1.W"].T
        B = a0.shape[0]
        ga0 = ga1_in.reshape(B, -1, self.hidden) * (a0 > 0)
        g["enc0.W"] = np.einsum("bni,bno->io", a0_in, ga0)
        g["enc0.b"] = ga0.sum(axis=(0, 1))
        return g

    def config(self):
        return {"dim": self.dim, "d": self.d, "hidden": self.hidden, "eta": self.eta,
                "stride": self.stride, "blocks": self.n_blocks}


def _clip_array(clip):
    x = clip.features if isinstance(clip, MotionClip) else np.asarray(clip, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("a clip is an (N, D) feature matrix")
    return x


def encode_to_tokens(clip, model, book):
    """Token sequence of length ``ceil(N / 4)`` (short tails are padded with the last frame)."""
    z = model.encode(_clip_array(clip)[None])[0]
    return quantize(z, book).tokens


def decode_from_tokens(tokens, model, book=None):
    """Decode codes back to a :class:`MotionClip`; ``model`` may be a ``(model, book)`` pair."""
    if book is None:
        model, book = model
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("expected a 1-D token sequence")
    if np.any(tokens < 0) or np.any(tokens >= book.K):
        raise ValueError(f"tokens must be codes in [0, {book.K}); mask tokens cannot be decoded")
    return MotionClip(model.decode(book.entries[tokens][None])[0])


@dataclass
class VqTrainConfig:
    K: int = 32
    d: int = 16
    hidden: int = 64
    beta: float = 0.25
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 16
    decay: float = 0.99
    reset_every: int = 20
    usage_threshold: float = 1.0
    seed: int = 0


def train_toy_vq(clips, config=None, log_every=0):
    """Train encoder/decoder by gradient descent and the codebook by EMA.

    Clips within a batch must share a length. Returns ``(model, book, curve)``
    where ``curve`` holds ``(step, total, recon, embed, commit)`` rows.
    """
    cfg = config or VqTrainConfig()
    data = [_clip_array(c) for c in clips]
    if not data:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(cfg.seed)
    stacked = np.concatenate(data, axis=0)
    model = VqEncoderDecoder(stacked.shape[1], cfg.d, cfg.hidden, seed=cfg.seed,
                             mean=stacked.mean(axis=0), std=stacked.std(axis=0) + 1e-8)
    lengths = sorted({len(x) for x in data})
    by_len = {n: [x for x in data if len(x) == n] for n in lengths}
    z0 = model.encode(np.stack(by_len[lengths[0]][:cfg.batch_size])).reshape(-1, cfg.d)
    book = Codebook(z0[rng.integers(0, len(z0), size=cfg.K)])
    opt = AdamW(lr=cfg.lr)
    curve = []
    for step in range(cfg.steps):
        n = lengths[rng.integers(len(lengths))]
        pool = by_len[n]
        x = np.stack([pool[i] for i in rng.integers(0, len(pool), size=cfg.batch_size)])
        z, enc_cache = model.encode(x, cache=True)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"VQ training diverged at step {step}: non-finite encoder output")
        q = quantize(z.reshape(-1, cfg.d), book)
        z_q = q.z_q.reshape(z.shape)
        rec, dec_cache = model.decode(z_q, cache=True)
        rec = rec[:, :n]
        total, recon, embed, commit = vq_loss(x, rec, z, z_q, cfg.beta)
        if not np.isfinite(total):
            raise FloatingPointError(
                f"VQ loss diverged at step {step}: recon={recon} embed={embed} commit={commit}")
        g_rec, g_z, _ = vq_loss_grads(x, rec, z, z_q, cfg.beta)
        g_full = np.zeros((x.shape[0], z.shape[1] * model.window, x.shape[2]))
        g_full[:, :n] = g_rec
        g_dec, g_zq = model.backward_decoder(dec_cache, g_full)
        grads = model.backward_encoder(enc_cache, g_z + g_zq)   # straight-through copy
        grads.update(g_dec)
        opt.step(model.params, grads)
        book = ema_update(book, z.reshape(-1, cfg.d), q.tokens, cfg.decay)
        if cfg.reset_every and (step + 1) % cfg.reset_every == 0:
            book, _ = reset_dead_codes(book, z.reshape(-1, cfg.d), cfg.usage_threshold, rng)
        curve.append((step, total, recon, embed, commit))
        if log_every and step % log_every == 0:
            log.info("vq step %d total %.4f recon %.4f", step, total, recon)
    return model, book, curve


def reconstruction_l1(clips, model, book):
    """Mean absolute reconstruction error over clips (raw feature units)."""
    errs = []
    for c in clips:
        x = _clip_array(c)
        rec = decode_from_tokens(encode_to_tokens(x, model, book), model, book).features[:len(x)]
        errs.append(np.abs(rec - x).mean())
    return float(np.mean(errs))


def save_vq(path, model, book, extra=None):
    header = dict(model.config())
    header["K"] = book.K
    header["layers"] = {k: list(v.shape) for k, v in sorted(model.params.items())}
    if extra:
        header["extra"] = extra
    tensors = dict(model.params)
    tensors.update({"codebook": book.entries, "ema_counts": book.ema_counts, "ema_sums": book.ema_sums,
                    "norm_mean": model.mean, "norm_std": model.std})
    write_container(path, MVQ_MAGIC, header, tensors)


def load_vq(path):
    """Return ``(model, book, extra)`` from an MVQ1 file."""
    header, t = read_container(path, MVQ_MAGIC)
    params = {k: t[k] for k in header["layers"]}
    model = VqEncoderDecoder(header["dim"], header["d"], header["hidden"],
                             mean=t["norm_mean"], std=t["norm_std"], params=params)
    book = Codebook(t["codebook"], t["ema_counts"], t["ema_sums"])
    return model, book, header.get("extra", {})
