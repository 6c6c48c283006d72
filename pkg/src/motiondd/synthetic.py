"""Synthetic corpora with known generating processes, used for toy training and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Successor offsets and their probabilities for the two bigram classes. Both
# classes share the same support, so no single transition identifies a class.
OFFSETS = (1, 2, 3)
CLASS_WEIGHTS = ((0.5, 0.3, 0.2), (0.3, 0.3, 0.4))

CLASS_TEXTS = (
    (
        "a person walks forward slowly",
        "someone walks ahead at a calm pace",
        "a man strolls forward",
        "a person takes slow steps forward",
    ),
    (
        "a person jumps up and down quickly",
        "someone hops in place with energy",
        "a man leaps repeatedly",
        "a person bounces on both feet",
    ),
)


def bigram_matrix(K, weights, offsets=OFFSETS):
    """Circulant transition matrix: from ``a`` go to ``(a + offsets[j]) % K`` w.p. ``weights[j]``."""
    P = np.zeros((K, K))
    for off, w in zip(offsets, weights):
        P[np.arange(K), (np.arange(K) + off) % K] += w
    return P


def sample_chain(P, n, size, rng):
    """``size`` sequences of length ``n`` from chain ``P`` with a uniform start."""
    K = P.shape[0]
    out = np.empty((size, n), dtype=np.int64)
    out[:, 0] = rng.integers(0, K, size=size)
    cdf = np.cumsum(P, axis=1)
    for j in range(1, n):
        r = rng.random(size)
        nxt = (r[:, None] > cdf[out[:, j - 1]]).sum(axis=1)
        out[:, j] = np.minimum(nxt, K - 1)
    return out


@dataclass
class BigramCorpus:
    tokens: np.ndarray
    labels: np.ndarray
    texts: list
    matrices: np.ndarray


def bigram_corpus(n_sequences=2000, K=16, n=16, seed=0, weights=CLASS_WEIGHTS):
    """Two-class token corpus; each sequence gets a caption drawn from its class templates."""
    rng = np.random.default_rng(seed)
    mats = np.stack([bigram_matrix(K, w) for w in weights])
    labels = rng.integers(0, len(weights), size=n_sequences)
    tokens = np.empty((n_sequences, n), dtype=np.int64)
    for c in range(len(weights)):
        idx = np.flatnonzero(labels == c)
        tokens[idx] = sample_chain(mats[c], n, len(idx), rng)
    pick = rng.integers(0, len(CLASS_TEXTS[0]), size=n_sequences)
    texts = [CLASS_TEXTS[c % len(CLASS_TEXTS)][j] for c, j in zip(labels, pick)]
    return BigramCorpus(tokens, labels, texts, mats)


def bigram_counts(tokens, K):
    C = np.zeros((K, K))
    tokens = np.atleast_2d(tokens)
    np.add.at(C, (tokens[:, :-1].ravel(), tokens[:, 1:].ravel()), 1.0)
    return C


def bigram_tv(tokens, P):
    """Visit-weighted mean total variation between empirical and true transition rows."""
    C = bigram_counts(tokens, P.shape[0])
    rows = C.sum(axis=1)
    seen = rows > 0
    emp = C[seen] / rows[seen, None]
    tv = 0.5 * np.abs(emp - P[seen]).sum(axis=1)
    return float(np.sum(tv * rows[seen]) / rows.sum())


def chain_loglik(tokens, P, floor=1e-300):
    """Per-sequence log-likelihood of the transitions under ``P`` (start term omitted)."""
    tokens = np.atleast_2d(tokens)
    return np.log(np.maximum(P[tokens[:, :-1], tokens[:, 1:]], floor)).sum(axis=1)


def classify_bigram(tokens, matrices):
    """Likelihood-ratio classifier under the true class chains; ties go to the lower class."""
    ll = np.stack([chain_loglik(tokens, P) for P in matrices], axis=1)
    return np.argmax(ll, axis=1)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def walk_motion(n_frames=64, fps=20, speed=0.05, turn=0.0, heading0=0.0, origin=(0.0, 0.0),
                cadence=0.15, swing=0.5, phase=0.0):
    """Forward-kinematics walking cycle on the 22-joint template.

    ``speed`` is meters per frame, ``turn`` radians per frame, ``cadence``
    radians of gait phase per frame and ``swing`` the hip swing amplitude.
    """
    from .motion_repr import PARENTS, REST_OFFSETS, JointMotion, rot_y

    f = np.arange(n_frames)
    ph = phase + cadence * f
    yaw = heading0 + turn * f
    step = np.stack([np.sin(yaw), np.zeros(n_frames), np.cos(yaw)], -1) * speed
    root = np.concatenate([np.zeros((1, 3)), np.cumsum(step[:-1], axis=0)])
    root[:, 0] += origin[0]
    root[:, 2] += origin[1]
    root[:, 1] = REST_OFFSETS[0, 1] + 0.02 * np.sin(2 * ph)
    angles = np.zeros((n_frames, len(PARENTS)))
    angles[:, 1] = -swing * np.sin(ph)
    angles[:, 2] = swing * np.sin(ph)
    angles[:, 4] = swing * np.maximum(0.0, np.sin(ph + 1.0))
    angles[:, 5] = swing * np.maximum(0.0, -np.sin(ph + 1.0))
    angles[:, 16] = 0.6 * swing * np.sin(ph)
    angles[:, 17] = -0.6 * swing * np.sin(ph)
    out = np.zeros((n_frames, len(PARENTS), 3))
    for i in range(n_frames):
        G = [None] * len(PARENTS)
        G[0] = rot_y(yaw[i])
        out[i, 0] = root[i]
        for jnt in range(1, len(PARENTS)):
            par = PARENTS[jnt]
            out[i, jnt] = out[i, par] + G[par] @ REST_OFFSETS[jnt]
            G[jnt] = G[par] @ _rot_x(angles[i, jnt])
    return JointMotion(out, fps)


def skeleton_corpus(n_clips=8, n_frames=64, fps=20, seed=0):
    """Walking clips with varied speed, turning rate, start pose and placement."""
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n_clips):
        clips.append(walk_motion(
            n_frames=n_frames, fps=fps,
            speed=rng.uniform(0.0, 0.08), turn=rng.uniform(-0.03, 0.03),
            heading0=rng.uniform(-np.pi, np.pi), origin=tuple(rng.uniform(-2, 2, size=2)),
            cadence=rng.uniform(0.1, 0.3), swing=rng.uniform(0.2, 0.7), phase=rng.uniform(0, 2 * np.pi)))
    return clips


def sinusoid_clips(n_clips=200, n_frames=64, dim=12, period=16, seed=0, mix_seed=0):
    """Feature clips tracing one fixed-period oscillation, with a random phase per clip.

    Every channel is a fixed mix (drawn from ``mix_seed``) of the same sine
    and cosine, so each short window lies on a closed curve that a small
    codebook can cover. ``seed`` only drives the phases, so clips from
    different seeds share one distribution.
    """
    rng = np.random.default_rng(seed)
    mix = np.random.default_rng(mix_seed).standard_normal((2, dim)) / 2.0
    t = np.arange(n_frames)
    clips = []
    for _ in range(n_clips):
        ang = 2 * np.pi * (t + rng.uniform(0, period)) / period
        clips.append(np.stack([np.sin(ang), np.cos(ang)], -1) @ mix)
    return clips


MOTION_CLASSES = (
    {
        "texts": ("a person walks forward slowly", "someone strolls straight ahead",
                  "a man walks slowly in a straight line"),
        "speed": (0.01, 0.03), "turn": (-0.005, 0.005), "cadence": (0.1, 0.15),
    },
    {
        "texts": ("a person walks quickly while turning left", "someone hurries along a curve to the left",
                  "a man walks fast and veers left"),
        "speed": (0.05, 0.08), "turn": (0.02, 0.04), "cadence": (0.2, 0.3),
    },
)


def captioned_motion_corpus(n_clips=32, n_frames=65, fps=20, wild_fraction=0.5, seed=0):
    """Two motion classes with class-specific captions.

    Returns ``[(JointMotion, [(text, source), ...], label), ...]``. Roughly
    ``wild_fraction`` of the captions are tagged ``"wild"``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_clips):
        label = i % len(MOTION_CLASSES)
        spec = MOTION_CLASSES[label]
        motion = walk_motion(
            n_frames=n_frames, fps=fps,
            speed=rng.uniform(*spec["speed"]), turn=rng.uniform(*spec["turn"]),
            heading0=rng.uniform(-np.pi, np.pi), origin=tuple(rng.uniform(-2, 2, size=2)),
            cadence=rng.uniform(*spec["cadence"]), swing=rng.uniform(0.3, 0.6),
            phase=rng.uniform(0, 2 * np.pi))
        picks = rng.choice(len(spec["texts"]), size=2, replace=False)
        caps = [(spec["texts"][j], "wild" if rng.random() < wild_fraction else "curated") for j in picks]
        out.append((motion, caps, label))
    return out
