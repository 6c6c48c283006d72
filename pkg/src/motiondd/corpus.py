"""Dataset manifests, caption-quality filtering, caption likelihood scoring, splitting and batching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

SOURCES = ("curated", "wild")
DEFAULT_TAU = 5.0


@dataclass(frozen=True)
class CaptionRecord:
    text: str
    source: str = "curated"
    mm_dist: float | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown caption source {self.source!r}")
        if self.mm_dist is not None and not self.mm_dist >= 0:
            raise ValueError("caption score must be >= 0")

    def to_dict(self):
        return {"mm_dist": self.mm_dist, "source": self.source, "text": self.text}


@dataclass(frozen=True)
class MotionRecord:
    """One motion file and its captions. ``flagged`` marks motions whose captions were all filtered."""

    motion_path: str
    captions: tuple = ()
    split: str = "train"
    flagged: bool = False

    def to_dict(self):
        return {
            "captions": [c.to_dict() for c in self.captions],
            "flagged": self.flagged,
            "motion_path": self.motion_path,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d):
        caps = tuple(CaptionRecord(c["text"], c.get("source", "curated"), c.get("mm_dist")) for c in d.get("captions", []))
        return cls(d["motion_path"], caps, d.get("split", "train"), bool(d.get("flagged", False)))

    @property
    def source(self):
        """Dominant source for interleaving: curated if any caption is curated."""
        if any(c.source == "curated" for c in self.captions):
            return "curated"
        return "wild"


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    def __post_init__(self):
        paths = [r.motion_path for r in self.records]
        if len(set(paths)) != len(paths):
            dup = sorted({p for p in paths if paths.count(p) > 1})
            raise ValueError(f"duplicate motion paths: {dup}")

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return DatasetManifest([r for r in self.records if r.split == name])


def manifest_lines(manifest):
    return [json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
            for r in manifest.records]


def write_manifest(path, manifest):
    text = "".join(line + "\n" for line in manifest_lines(manifest))
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(MotionRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return DatasetManifest(records)


def filter_captions(manifest, extractor, tau=DEFAULT_TAU, load_motion=None):
    """Score every caption by motion/text feature distance and drop those above ``tau``.

    ``extractor`` needs ``motion_features(clips)`` and ``text_features(texts)``;
    ``load_motion(path)`` returns the clip for a record. With ``extractor=None``
    stored scores are used. Returns ``(manifest, removed_count)``.
    """
    removed = 0
    out = []
    for rec in manifest.records:
        if not rec.captions:
            out.append(rec)
            continue
        if extractor is None:
            scores = [c.mm_dist for c in rec.captions]
            if any(s is None for s in scores):
                raise ValueError(f"{rec.motion_path}: unscored caption and no extractor")
        else:
            fm = extractor.motion_features([load_motion(rec.motion_path)])[0]
            ft = extractor.text_features([c.text for c in rec.captions])
            scores = np.linalg.norm(ft - fm, axis=1).tolist()
        kept = tuple(replace(c, mm_dist=float(s)) for c, s in zip(rec.captions, scores) if s <= tau)
        removed += len(rec.captions) - len(kept)
        out.append(replace(rec, captions=kept, flagged=rec.flagged or not kept))
    return DatasetManifest(out), removed


class CaptionScore(NamedTuple):
    nll: float
    zero_probability: bool


def caption_nll(tokens, probs):
    """Mean negative log-likelihood of ``tokens`` under ``probs(prefix) -> next-token distribution``.

    A zero-probability token yields ``nll = inf`` with ``zero_probability`` set.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("need at least one token")
    total = 0.0
    for i, tok in enumerate(tokens):
        p = float(np.asarray(probs(tuple(tokens[:i])))[tok])
        if p <= 0.0:
            return CaptionScore(math.inf, True)
        total -= math.log(p)
    return CaptionScore(total / len(tokens), False)


def assign_splits(manifest, ratios=(0.8, 0.2), names=("train", "test"), seed=0):
    """Shuffle deterministically and relabel splits by the given ratios."""
    if len(ratios) != len(names):
        raise ValueError("one ratio per split name")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or min(ratios) < 0:
        raise ValueError("split ratios must be non-negative and sum to 1")
    if not manifest.records:
        raise ValueError("empty manifest")
    n = len(manifest.records)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum(ratios) * n).astype(int)
    labels = np.searchsorted(bounds, np.arange(n), side="right")
    out = list(manifest.records)
    for rank, idx in enumerate(order):
        out[idx] = replace(out[idx], split=names[labels[rank]])
    return DatasetManifest(out)


def _interleave(records, rng):
    """Shuffle, then spread each source evenly through the sequence."""
    order = [records[i] for i in rng.permutation(len(records))]
    groups = {}
    for r in order:
        groups.setdefault(r.source, []).append(r)
    keyed = []
    for src in sorted(groups):
        g = groups[src]
        keyed.extend(((i + 0.5) / len(g), src, i, r) for i, r in enumerate(g))
    keyed.sort(key=lambda k: k[:3])
    return [k[3] for k in keyed]


def split_and_batch(manifest, ratios=(1.0, 0.0), batch_size=16, seed=0, to_example=None,
                    split="train", names=("train", "test")):
    """Yield batches of training examples from one split.

    Each record contributes one example per pass, with one of its captions
    chosen at random (``None`` when it has none). ``to_example(record,
    caption)`` builds the example; by default the pair itself is yielded.
    """
    if not manifest.records:
        raise ValueError("empty manifest")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    labelled = assign_splits(manifest, ratios, names, seed)
    rng = np.random.default_rng([seed, 1])
    records = _interleave(labelled.split(split).records, rng)
    make = to_example or (lambda rec, cap: (rec, cap))
    batch = []
    for rec in records:
        cap = rec.captions[rng.integers(len(rec.captions))] if rec.captions else None
        batch.append(make(rec, cap))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch
