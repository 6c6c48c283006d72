"""Conditional denoising network and its training loop.

The network predicts the clean-token distribution ``p(u_0 | u_t, c)``; the
reverse step ``p(u_{t-1} | u_t, c)`` is obtained by mixing the analytic
posteriors ``q(u_{t-1} | u_t, u_0 = k)`` with those probabilities. Any object
with a ``predict_x0(u_t, t, cond, null, T)`` method can stand in for
:class:`ToyDenoiser` during sampling.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from itertools import groupby

import numpy as np

from . import diffusion as D
from ._container import read_container, write_container
from .gradcheck import max_relative_error, numeric_grad
from .optim import make_optimizer

log = logging.getLogger(__name__)

DEFAULT_SIGMA = {"curated": 0.1, "wild": 0.3}
MDN_MAGIC = b"MDN1"


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def time_embedding(t, T, width):
    """Sinusoidal code of the diffusion progress ``t / T`` (scaled to 0..1000)."""
    half = width // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    ang = (1000.0 * np.asarray(t, dtype=np.float64) / T)[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


def _shift_concat(x):
    """Concatenate left neighbour, self, right neighbour along features (zero padded)."""
    left = np.zeros_like(x)
    left[:, 1:] = x[:, :-1]
    right = np.zeros_like(x)
    right[:, :-1] = x[:, 1:]
    return np.concatenate([left, x, right], axis=-1)


class ToyDenoiser:
    """Token embedding + time/condition codes, residual width-3 temporal blocks, softmax head.

    The head has ``K`` outputs, so the mask token never receives clean-token mass.
    """

    def __init__(self, K, T, hidden=64, cond_dim=256, n_blocks=2, seed=0):
        self.K, self.T = K, T
        self.hidden, self.cond_dim, self.n_blocks = hidden, cond_dim, n_blocks
        rng = np.random.default_rng(seed)
        h = hidden
        p = {
            "tok_emb": rng.standard_normal((K + 1, h)) * 0.5,
            "cond_W": rng.standard_normal((cond_dim, h)) / math.sqrt(cond_dim),
            "cond_b": np.zeros(h),
            "null_emb": np.zeros(h),
            "out_W": rng.standard_normal((h, K)) / math.sqrt(h),
            "out_b": np.zeros(K),
        }
        for b in range(n_blocks):
            p[f"blk{b}.W1"] = rng.standard_normal((3 * h, h)) / math.sqrt(3 * h)
            p[f"blk{b}.b1"] = np.zeros(h)
            p[f"blk{b}.W2"] = rng.standard_normal((h, h)) / math.sqrt(h) * 0.5
            p[f"blk{b}.b2"] = np.zeros(h)
        self.params = p

    def zero_head(self):
        self.params["out_W"][:] = 0.0
        self.params["out_b"][:] = 0.0
        return self

    def _prepare(self, u_t, t, cond, null):
        u = np.asarray(u_t)
        single = u.ndim == 1
        u = np.atleast_2d(u).astype(np.int64)
        B = u.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        if cond is None:
            cond = np.zeros((B, self.cond_dim))
            null = np.ones(B, dtype=bool)
        else:
            cond = np.asarray(cond, dtype=np.float64)
            cond = np.broadcast_to(cond, (B, self.cond_dim)) if cond.ndim == 1 else cond
            null = np.zeros(B, dtype=bool) if null is None else np.broadcast_to(np.asarray(null, dtype=bool), (B,))
        return u, t, cond, null, single

    def forward(self, u_t, t, cond=None, null=None, T=None):
        """Logits ``(B, n, K)`` and a cache for :meth:`backward`."""
        T = self.T if T is None else T
        u, t, cond, null, single = self._prepare(u_t, t, cond, null)
        if t.min() < 1 or t.max() > T:
            raise ValueError(f"step outside [1, {T}]")
        if u.min() < 0 or u.max() > self.K:
            raise ValueError(f"tokens must lie in [0, {self.K}]")
        p = self.params
        cvec = np.where(null[:, None], p["null_emb"], cond @ p["cond_W"] + p["cond_b"])
        x = p["tok_emb"][u] + time_embedding(t, T, self.hidden)[:, None, :] + cvec[:, None, :]
        blocks = []
        for b in range(self.n_blocks):
            xc = _shift_concat(x)
            a = np.tanh(xc @ p[f"blk{b}.W1"] + p[f"blk{b}.b1"])
            x = x + a @ p[f"blk{b}.W2"] + p[f"blk{b}.b2"]
            blocks.append((xc, a))
        logits = x @ p["out_W"] + p["out_b"]
        cache = {"u": u, "cond": cond, "null": null, "blocks": blocks, "x": x}
        return logits, cache

    def backward(self, cache, g_logits):
        """Parameter gradients and the gradient w.r.t. the condition vectors."""
        p = self.params
        h = self.hidden
        g = {}
        g["out_W"] = np.einsum("bnh,bnk->hk", cache["x"], g_logits)
        g["out_b"] = g_logits.sum(axis=(0, 1))
        gx = g_logits @ p["out_W"].T
        for b in reversed(range(self.n_blocks)):
            xc, a = cache["blocks"][b]
            g[f"blk{b}.W2"] = np.einsum("bnh,bnk->hk", a, gx)
            g[f"blk{b}.b2"] = gx.sum(axis=(0, 1))
            gpre = (gx @ p[f"blk{b}.W2"].T) * (1.0 - a * a)
            g[f"blk{b}.W1"] = np.einsum("bnc,bnh->ch", xc, gpre)
            g[f"blk{b}.b1"] = gpre.sum(axis=(0, 1))
            gxc = gpre @ p[f"blk{b}.W1"].T
            gl, gm, gr = gxc[..., :h], gxc[..., h:2 * h], gxc[..., 2 * h:]
            gx = gx + gm
            gx[:, :-1] += gl[:, 1:]
            gx[:, 1:] += gr[:, :-1]
        u = cache["u"]
        g["tok_emb"] = np.zeros_like(p["tok_emb"])
        np.add.at(g["tok_emb"], u.reshape(-1), gx.reshape(-1, h))
        gc = gx.sum(axis=1)
        null = cache["null"]
        live = ~null
        g["null_emb"] = gc[null].sum(axis=0)
        g["cond_W"] = cache["cond"][live].T @ gc[live]
        g["cond_b"] = gc[live].sum(axis=0)
        g_cond = np.where(live[:, None], gc @ p["cond_W"].T, 0.0)
        return g, g_cond

    def predict_x0(self, u_t, t, cond=None, null=None, T=None):
        """``p(u_0 | u_t, c)`` with shape ``u_t.shape + (K,)``."""
        single = np.ndim(u_t) == 1
        logits, _ = self.forward(u_t, t, cond, null, T)
        probs = softmax(logits)
        return probs[0] if single else probs

    def model_reverse(self, u_t, t, schedule, cond=None, null=None):
        """``p(u_{t-1} | u_t, c)`` over ``K + 1`` states."""
        return model_reverse(self, u_t, t, schedule, cond, null)

    def config(self):
        return {"K": self.K, "T": self.T, "h": self.hidden, "cond_dim": self.cond_dim, "blocks": self.n_blocks}


def model_reverse(model, u_t, t, schedule, cond=None, null=None):
    """Compose any ``predict_x0`` model with the analytic posterior of ``schedule``."""
    single = np.ndim(u_t) == 1
    u = np.atleast_2d(np.asarray(u_t, dtype=np.int64))
    tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (u.shape[0],))
    px0 = model.predict_x0(u, tt, cond, null, T=schedule.T)
    probs = D.reverse_parts_batched(px0, u, schedule, tt)[0]
    return probs[0] if single else probs


def batch_loss_and_grads(model, u0, u_t, t, schedule, cond=None, null=None, aux_weight=0.01,
                         objective="vlb", probe=None):
    """Mean per-position loss over a same-length batch and its gradients.

    ``objective``: ``"vlb"`` (bound term + ``aux_weight`` x clean-token
    cross-entropy), ``"aux"`` (cross-entropy only) or ``"linear"`` (the
    fixed linear functional ``sum(probe * logits)``, used by gradient checks).
    Returns ``(loss, kl, aux, grads, g_cond)``.
    """
    u0 = np.atleast_2d(u0)
    u_t = np.atleast_2d(u_t)
    B, n = u0.shape
    scale = 1.0 / (B * n)
    logits, cache = model.forward(u_t, t, cond, null, T=schedule.T)
    if objective == "linear":
        grads, g_cond = model.backward(cache, probe)
        return float(np.sum(probe * logits)), 0.0, 0.0, grads, g_cond

    pi = softmax(logits)
    onehot = np.eye(model.K)[u0]
    picked = np.sum(pi * onehot, axis=-1)
    aux = float(-np.log(np.maximum(picked, D.KL_FLOOR)).sum() * scale)
    g_logits = (pi - onehot) * (scale * (aux_weight if objective == "vlb" else 1.0))
    if objective == "aux":
        grads, g_cond = model.backward(cache, g_logits)
        return aux, 0.0, aux, grads, g_cond

    tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    probs, M, valid, norm, _ = D.reverse_parts_batched(pi, u_t, schedule, tt)
    q = np.take_along_axis(M, u0[:, :, None, None], axis=2)[:, :, 0, :]
    safe_p = np.maximum(probs, D.KL_FLOOR)
    pos = q > 0
    kl = float(np.sum(np.where(pos, q * (np.log(np.where(pos, q, 1.0)) - np.log(safe_p)), 0.0)) * scale)
    g_p = np.where(pos & (probs > D.KL_FLOOR), -q / safe_p, 0.0)
    Mg = np.einsum("bnkj,bnj->bnk", M, g_p)
    gp_dot = np.sum(g_p * probs, axis=-1, keepdims=True)
    g_pi = valid * (Mg - gp_dot) / norm
    g_logits += scale * pi * (g_pi - np.sum(pi * g_pi, axis=-1, keepdims=True))
    grads, g_cond = model.backward(cache, g_logits)
    return kl + aux_weight * aux, kl, aux, grads, g_cond


@dataclass
class TrainingExample:
    """One clean token sequence with its caption features.

    ``text_features`` (layer -> vector) feeds the aggregator; ``condition``
    is a ready-made condition vector used when training without an
    aggregator. With neither, the example always trains unconditionally.
    """

    u0: np.ndarray
    source: str = "curated"
    text_features: dict | None = None
    condition: np.ndarray | None = None


@dataclass
class StepStats:
    step: int
    loss: float
    kl_term: float
    aux_term: float


class DenoiserTrainer:
    """Owns a denoiser, an optional aggregator, and their optimizer state.

    With ``decay_steps`` set, the learning rate follows a cosine from ``lr``
    down to zero over that many steps.
    """

    def __init__(self, model, schedule, aggregator=None, sigma_map=None, aux_weight=0.01,
                 optimizer="sgd", lr=1e-3, momentum=0.9, weight_decay=4.5e-2, seed=0, decay_steps=None):
        if schedule.K != model.K:
            raise ValueError("schedule and model disagree on K")
        self.model = model
        self.schedule = schedule
        self.aggregator = aggregator
        self.sigma_map = dict(DEFAULT_SIGMA if sigma_map is None else sigma_map)
        for src, v in self.sigma_map.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"dropout probability for {src!r} outside [0, 1]")
        self.aux_weight = aux_weight
        self.optimizer = make_optimizer(optimizer, lr, weight_decay=weight_decay, momentum=momentum)
        self.base_lr = lr
        if decay_steps is not None and decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")
        self.decay_steps = decay_steps
        self.rng = np.random.default_rng(seed)
        self.history = []

    def _all_params(self):
        params = dict(self.model.params)
        if self.aggregator is not None:
            params.update({f"hsa.{k}": v for k, v in self.aggregator.params.items()})
        return params

    def draw_dropout(self, batch):
        """Per-example flag: train this example with the null condition."""
        drop = np.ones(len(batch), dtype=bool)
        for i, ex in enumerate(batch):
            if ex.text_features is not None or ex.condition is not None:
                drop[i] = self.rng.random() < self.sigma_map.get(ex.source, 0.0)
        return drop

    def train_step(self, batch):
        if not batch:
            raise ValueError("empty batch")
        s = self.schedule
        total = len(batch)
        drop = self.draw_dropout(batch)
        order = sorted(range(total), key=lambda i: len(batch[i].u0))
        grads_all = {}
        loss = kl = aux = 0.0
        for n, idx in groupby(order, key=lambda i: len(batch[i].u0)):
            idx = list(idx)
            u0 = np.stack([np.asarray(batch[i].u0, dtype=np.int64) for i in idx])
            t = self.rng.integers(1, s.T + 1, size=len(idx))
            u_t = D.sample_marginal(u0, s, t[:, None], self.rng)
            null = drop[idx]
            cond, agg_cache = self._conditions([batch[i] for i in idx], null)
            weight = len(idx) / total
            l, k, a, grads, g_cond = batch_loss_and_grads(
                self.model, u0, u_t, t, s, cond, null, aux_weight=self.aux_weight)
            loss, kl, aux = loss + weight * l, kl + weight * k, aux + weight * a
            if agg_cache is not None:
                live = ~null
                hsa_grads = self.aggregator.backward(agg_cache, g_cond[live])
                grads.update({f"hsa.{k}": v for k, v in hsa_grads.items()})
            for name, g in grads.items():
                grads_all[name] = grads_all.get(name, 0.0) + weight * g
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite denoiser loss at step {len(self.history)}")
        if self.decay_steps is not None:
            # cosine decay from the base rate to zero over decay_steps updates
            frac = min(len(self.history), self.decay_steps) / self.decay_steps
            self.optimizer.lr = self.base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
        self.optimizer.step(self._all_params(), grads_all)
        stats = StepStats(len(self.history), loss, kl, aux)
        self.history.append(stats)
        return stats

    def _conditions(self, examples, null):
        B = len(examples)
        cond = np.zeros((B, self.model.cond_dim))
        live = np.flatnonzero(~null)
        if len(live) == 0:
            return cond, None
        if self.aggregator is None:
            for i in live:
                cond[i] = examples[i].condition
            return cond, None
        feats = {layer: np.stack([examples[i].text_features[layer] for i in live])
                 for layer in self.aggregator.layers}
        c, agg_cache = self.aggregator.forward(feats)
        cond[live] = c
        return cond, agg_cache

    def fit(self, batches, steps=None, log_every=0):
        for i, batch in enumerate(batches):
            if steps is not None and i >= steps:
                break
            stats = self.train_step(batch)
            if log_every and stats.step % log_every == 0:
                log.info("step %d loss %.4f kl %.4f aux %.4f", stats.step, stats.loss, stats.kl_term, stats.aux_term)
        return self

    def write_loss_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "kl_term", "aux_term"])
            for s in self.history:
                w.writerow([s.step, repr(s.loss), repr(s.kl_term), repr(s.aux_term)])


def evaluate_loss(model, examples, schedule, aggregator=None, draws=4, seed=0, aux_weight=0.01):
    """Average training objective over fixed corruption draws (no condition dropout).

    The same ``seed`` gives the same ``(t, u_t)`` draws, so the value is
    comparable across parameter states (e.g. before and after training).
    """
    rng = np.random.default_rng(seed)
    u0 = np.stack([np.asarray(ex.u0, dtype=np.int64) for ex in examples])
    null = np.array([ex.text_features is None and ex.condition is None for ex in examples])
    cond = np.zeros((len(examples), model.cond_dim))
    live = np.flatnonzero(~null)
    if len(live):
        if aggregator is not None:
            feats = {k: np.stack([examples[i].text_features[k] for i in live]) for k in aggregator.layers}
            cond[live] = aggregator(feats)
        else:
            cond[live] = np.stack([examples[i].condition for i in live])
    total = 0.0
    for _ in range(draws):
        t = rng.integers(1, schedule.T + 1, size=len(examples))
        u_t = D.sample_marginal(u0, schedule, t[:, None], rng)
        total += batch_loss_and_grads(model, u0, u_t, t, schedule, cond, null, aux_weight)[0]
    return total / draws


def train_step(trainer, batch):
    """Functional alias for :meth:`DenoiserTrainer.train_step`; returns the batch loss."""
    return trainer.train_step(batch).loss


def gradient_check(model, example, schedule, aggregator=None, t=None, objective="vlb", eps=1e-4,
                   max_entries=30, seed=0, aux_weight=0.01):
    """Max per-tensor relative error between analytic and central-difference gradients.

    The corruption draw and step are frozen so the loss is a deterministic
    function of the parameters. Covers aggregator parameters when given.
    """
    rng = np.random.default_rng(seed)
    u0 = np.atleast_2d(np.asarray(example.u0, dtype=np.int64))
    t = int(rng.integers(1, schedule.T + 1)) if t is None else t
    tt = np.array([t])
    u_t = D.sample_marginal(u0, schedule, t, rng)
    if aggregator is None and example.condition is None and example.text_features is not None:
        raise ValueError("text features need an aggregator; pass one or set example.condition")
    conditioned = example.text_features is not None or example.condition is not None
    null = np.array([not conditioned])
    probe = rng.standard_normal(u0.shape + (model.K,))

    def cond_vec():
        if not conditioned:
            return None, None
        if aggregator is not None:
            return aggregator.forward({k: np.atleast_2d(v) for k, v in example.text_features.items()})
        return np.atleast_2d(example.condition), None

    def loss():
        c, _ = cond_vec()
        return batch_loss_and_grads(model, u0, u_t, tt, schedule, c, null, aux_weight, objective, probe)[0]

    c, agg_cache = cond_vec()
    _, _, _, grads, g_cond = batch_loss_and_grads(model, u0, u_t, tt, schedule, c, null, aux_weight, objective, probe)
    params = dict(model.params)
    if aggregator is not None and agg_cache is not None:
        for k, v in aggregator.backward(agg_cache, g_cond).items():
            grads[f"hsa.{k}"] = v
        params.update({f"hsa.{k}": v for k, v in aggregator.params.items()})
    numeric = numeric_grad(loss, params, eps=eps, max_entries=max_entries, rng=seed)
    return max_relative_error(grads, numeric)


def save_denoiser(path, model, schedule, aggregator=None, extra=None):
    """Write an MDN1 checkpoint (denoiser, schedule and optional aggregator)."""
    header = dict(model.config())
    header["schedule"] = schedule.to_dict()
    tensors = dict(model.params)
    if aggregator is not None:
        header["hsa"] = aggregator.config()
        tensors.update({f"hsa.{k}": v for k, v in aggregator.params.items()})
    if extra:
        header["extra"] = extra
    write_container(path, MDN_MAGIC, header, tensors)


def load_denoiser(path):
    """Return ``(model, schedule, aggregator_or_None, extra)`` from an MDN1 file."""
    from .hsa import HierarchicalAggregator

    header, tensors = read_container(path, MDN_MAGIC)
    model = ToyDenoiser(header["K"], header["T"], hidden=header["h"], cond_dim=header["cond_dim"],
                        n_blocks=header["blocks"])
    for k in model.params:
        model.params[k] = tensors[k].reshape(model.params[k].shape)
    schedule = D.NoiseSchedule.from_dict(header["schedule"])
    agg = None
    if "hsa" in header:
        agg = HierarchicalAggregator.from_config(
            header["hsa"], {k[4:]: v for k, v in tensors.items() if k.startswith("hsa.")})
    return model, schedule, agg, header.get("extra", {})
