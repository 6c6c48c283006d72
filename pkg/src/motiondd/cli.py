"""Command-line driver for every pipeline stage.

Each subcommand reads a JSON config (``--config``), applies flag overrides
(dedicated flags or ``--set section.key=JSON``), and writes its artifacts plus
a ``<artifact>.run.json`` reproducibility record (resolved config, seed,
package version). Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import diffusion as D
from .corpus import (
    CaptionRecord,
    DatasetManifest,
    MotionRecord,
    filter_captions,
    read_manifest,
    split_and_batch,
    write_manifest,
)
from .denoiser import DenoiserTrainer, ToyDenoiser, TrainingExample, load_denoiser, save_denoiser
from .hsa import HierarchicalAggregator, NgramProvider, aggregate
from .metrics import RandomProjectionExtractor, evaluation_protocol
from .motion_repr import canonicalize, encode_features, read_jntm, read_mclp, write_jntm, write_mclp
from .sampler import GuidanceConfig, TerminalMaskError, generate
from .synthetic import captioned_motion_corpus
from .vq import VqTrainConfig, decode_from_tokens, encode_to_tokens, load_vq, save_vq, train_toy_vq

log = logging.getLogger("motiondd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "synth": {"n_clips": 48, "n_frames": 65, "fps": 20, "wild_fraction": 0.5},
    "preprocess": {"target_fps": 20, "max_frames": 196},
    "vq": {"K": 32, "d": 16, "hidden": 64, "beta": 0.25, "lr": 2e-3, "steps": 400, "batch_size": 8,
           "decay": 0.99, "reset_every": 20, "usage_threshold": 1.0},
    "denoiser": {"T": 16, "profile": "mask-and-replace", "leak": 0.1, "hidden": 32, "blocks": 2,
                 "cond_dim": 32, "text_width": 32, "steps": 300, "batch_size": 16, "optimizer": "adamw",
                 "lr": 2e-3, "momentum": 0.9, "weight_decay": 4.5e-2, "aux_weight": 0.01,
                 "cosine_decay": False, "sigma": {"curated": 0.1, "wild": 0.3}},
    "generate": {"scale": 2.0, "steps": 16, "length": 16},
    "evaluate": {"repeats": 20, "mmodality_repeats": 5, "mmodality_texts": 2, "mmodality_subset": 3,
                 "scale": 2.0, "steps": 16, "width": 32},
    "filter": {"tau": 5.0, "width": 32},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the JSON file, then ``section.key=value`` overrides (values parsed as JSON)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_record(artifact, command, cfg, extra=None):
    record = {"command": command, "config": cfg, "seed": cfg["seed"], "version": __version__}
    if extra:
        record.update(extra)
    _dump_json(f"{artifact}.run.json", record)


def _resolve(manifest_path, motion_path):
    return Path(manifest_path).parent / motion_path


def _load_clips(manifest_path, manifest):
    try:
        return [read_mclp(_resolve(manifest_path, r.motion_path)) for r in manifest.records]
    except FileNotFoundError as exc:
        raise DataError(f"missing motion file: {exc.filename}") from exc


def _read_manifest(path):
    if not Path(path).is_file():
        raise DataError(f"manifest not found: {path}")
    m = read_manifest(path)
    if not m.records:
        raise DataError(f"manifest {path} has no records")
    return m


def cmd_synth(args, cfg):
    c = cfg["synth"]
    out = Path(args.out)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (motion, caps, _) in enumerate(captioned_motion_corpus(
            c["n_clips"], c["n_frames"], c["fps"], c["wild_fraction"], seed=cfg["seed"])):
        rel = f"motions/clip_{i:04d}.jntm"
        write_jntm(out / rel, motion)
        records.append(MotionRecord(rel, tuple(CaptionRecord(t, s) for t, s in caps)))
    write_manifest(out / "manifest.jsonl", DatasetManifest(records))
    write_run_record(out / "manifest.jsonl", "synth", cfg)
    return EXIT_OK


def cmd_preprocess(args, cfg):
    c = cfg["preprocess"]
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    if args.manifest:
        src = _read_manifest(args.manifest)
        items = [(_resolve(args.manifest, r.motion_path), r) for r in src.records]
    else:
        files = sorted(Path(args.input).glob("*.jntm"))
        if not files:
            raise DataError(f"no .jntm files in {args.input}")
        items = [(f, MotionRecord(f.name)) for f in files]
    records = []
    for path, rec in items:
        try:
            motion = read_jntm(path)
        except FileNotFoundError as exc:
            raise DataError(f"missing motion file: {path}") from exc
        clip = encode_features(canonicalize(motion, c["target_fps"], c["max_frames"]))
        rel = f"features/{Path(path).stem}.mclp"
        write_mclp(out / rel, clip)
        records.append(MotionRecord(rel, rec.captions, rec.split, rec.flagged))
    write_manifest(out / "manifest.jsonl", DatasetManifest(records))
    write_run_record(out / "manifest.jsonl", "preprocess", cfg)
    return EXIT_OK


def cmd_train_vq(args, cfg):
    c = cfg["vq"]
    manifest = _read_manifest(args.manifest)
    clips = _load_clips(args.manifest, manifest)
    vcfg = VqTrainConfig(K=c["K"], d=c["d"], hidden=c["hidden"], beta=c["beta"], lr=c["lr"], steps=c["steps"],
                         batch_size=c["batch_size"], decay=c["decay"], reset_every=c["reset_every"],
                         usage_threshold=c["usage_threshold"], seed=cfg["seed"])
    model, book, curve = train_toy_vq(clips, vcfg)
    save_vq(args.out, model, book)
    with open(Path(args.out).with_suffix(".loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "recon", "embed", "commit"])
        for row in curve:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    write_run_record(args.out, "train-vq", cfg)
    return EXIT_OK


def _provider(c, seed):
    return NgramProvider(width=c["text_width"], seed=seed)


def cmd_train_denoiser(args, cfg):
    c = cfg["denoiser"]
    seed = cfg["seed"]
    manifest = _read_manifest(args.manifest)
    clips = _load_clips(args.manifest, manifest)
    vq_model, book, _ = load_vq(args.vq)
    tokens = {r.motion_path: encode_to_tokens(clip, vq_model, book) for r, clip in zip(manifest.records, clips)}
    provider = _provider(c, seed)
    feats = {}

    def to_example(rec, cap):
        if cap is None:
            return TrainingExample(tokens[rec.motion_path], "wild")
        if cap.text not in feats:
            feats[cap.text] = provider.embed(cap.text)
        return TrainingExample(tokens[rec.motion_path], cap.source, feats[cap.text])

    schedule = D.build_schedule(c["T"], book.K, profile=c["profile"], leak=c["leak"])
    model = ToyDenoiser(book.K, c["T"], hidden=c["hidden"], cond_dim=c["cond_dim"], n_blocks=c["blocks"], seed=seed)
    agg = HierarchicalAggregator(dict(provider.widths), cond_dim=c["cond_dim"], seed=seed)
    trainer = DenoiserTrainer(model, schedule, agg, sigma_map=c["sigma"], aux_weight=c["aux_weight"],
                              optimizer=c["optimizer"], lr=c["lr"], momentum=c["momentum"],
                              weight_decay=c["weight_decay"], seed=seed,
                              decay_steps=c["steps"] if c["cosine_decay"] else None)
    epoch = 0
    while len(trainer.history) < c["steps"]:
        for batch in split_and_batch(manifest, batch_size=c["batch_size"], seed=seed + epoch, to_example=to_example):
            if len(trainer.history) >= c["steps"]:
                break
            trainer.train_step(batch)
        epoch += 1
    extra = {"provider": {"layers": list(provider.layers), "width": c["text_width"], "seed": provider.seed}}
    save_denoiser(args.out, model, schedule, agg, extra=extra)
    trainer.write_loss_csv(Path(args.out).with_suffix(".loss.csv"))
    write_run_record(args.out, "train-denoiser", cfg)
    return EXIT_OK


def _load_bundle(model_path, vq_path):
    model, schedule, agg, extra = load_denoiser(model_path)
    vq_model, book, _ = load_vq(vq_path)
    p = extra.get("provider", {})
    provider = NgramProvider(layers=tuple(p.get("layers", (7, 9, 11, 12))), width=p.get("width", 64),
                             seed=p.get("seed", 0))
    return model, schedule, agg, provider, vq_model, book


def cmd_generate(args, cfg):
    c = cfg["generate"]
    model, schedule, agg, provider, vq_model, book = _load_bundle(args.model, args.vq)
    gcfg = GuidanceConfig(s=float(c["scale"]), steps=int(c["steps"]), seed=int(cfg["seed"]))
    text = args.text
    cond = aggregate(agg, provider.embed(text)) if text else None
    tokens = generate(model, cond, gcfg, int(c["length"]), schedule)
    clip = decode_from_tokens(tokens, vq_model, book)
    write_mclp(args.out, clip)
    Path(f"{args.out}.tokens.json").write_text(json.dumps([int(t) for t in tokens]) + "\n")
    write_run_record(args.out, "generate", cfg, {"text": text})
    return EXIT_OK


def cmd_evaluate(args, cfg):
    c = cfg["evaluate"]
    manifest = _read_manifest(args.manifest)
    clips = _load_clips(args.manifest, manifest)
    model, schedule, agg, provider, vq_model, book = _load_bundle(args.model, args.vq)
    extractor = RandomProjectionExtractor(width=c["width"], seed=cfg["seed"])
    real = extractor.motion_features(clips)
    records = [r for r in manifest.records if r.captions]
    if not records:
        raise DataError("evaluation needs captioned records")
    n_tokens = len(encode_to_tokens(clips[0], vq_model, book))
    embeds = {}

    def cond_for(texts):
        for t in texts:
            if t not in embeds:
                embeds[t] = aggregate(agg, provider.embed(t))
        return np.stack([embeds[t] for t in texts])

    def sample(texts, rng):
        gcfg = GuidanceConfig(s=float(c["scale"]), steps=int(c["steps"]), seed=int(rng.integers(2**31)))
        toks = generate(model, cond_for(texts), gcfg, n_tokens, schedule, n_samples=len(texts))
        return extractor.motion_features([decode_from_tokens(u, vq_model, book) for u in toks])

    def draw(rng):
        texts = [r.captions[rng.integers(len(r.captions))].text for r in records]
        return sample(texts, rng), extractor.text_features(texts)

    distinct = sorted({cap.text for r in records for cap in r.captions})[: c["mmodality_texts"]]

    def draw_multimodal(rng):
        per = 2 * c["mmodality_subset"]
        return {t: sample([t] * per, rng) for t in distinct}

    report = evaluation_protocol(real, draw, repeats=c["repeats"], draw_multimodal=draw_multimodal,
                                 mmodality_repeats=c["mmodality_repeats"], seed=cfg["seed"],
                                 mmodality_subset=c["mmodality_subset"])
    _dump_json(args.out, report)
    write_run_record(args.out, "evaluate", cfg)
    return EXIT_OK


def cmd_filter(args, cfg):
    c = cfg["filter"]
    manifest = _read_manifest(args.manifest)
    extractor = RandomProjectionExtractor(width=c["width"], seed=cfg["seed"])

    def load(rel):
        try:
            return read_mclp(_resolve(args.manifest, rel))
        except FileNotFoundError as exc:
            raise DataError(f"missing motion file: {exc.filename}") from exc

    out, removed = filter_captions(manifest, extractor, float(c["tau"]), load_motion=load)
    write_manifest(args.out, out)
    write_run_record(args.out, "filter-captions", cfg, {"removed": removed})
    print(f"removed {removed} captions")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="motiondd", description="Discrete-diffusion text-to-motion toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write the bundled synthetic captioned skeleton corpus")
    p.add_argument("--out", required=True)

    p = add("preprocess", cmd_preprocess, "canonicalize and encode joint motions")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--input", help="directory of .jntm files")
    p.add_argument("--out", required=True)

    p = add("train-vq", cmd_train_vq, "train the motion tokenizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, dest="vq_steps")

    p = add("train-denoiser", cmd_train_denoiser, "train the conditional denoiser and aggregator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, dest="dn_steps")

    p = add("generate", cmd_generate, "sample a motion clip")
    p.add_argument("--model", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--text")
    p.add_argument("--length", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--steps", type=int, dest="gen_steps")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "compute the metric report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--out", required=True)

    p = add("filter-captions", cmd_filter, "drop captions whose motion/text distance exceeds tau")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", required=True)
    return parser


_FLAG_KEYS = {
    "vq_steps": ("vq", "steps"),
    "dn_steps": ("denoiser", "steps"),
    "length": ("generate", "length"),
    "scale": ("generate", "scale"),
    "gen_steps": ("generate", "steps"),
    "tau": ("filter", "tau"),
}


def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        for flag, (section, key) in _FLAG_KEYS.items():
            value = getattr(args, flag, None)
            if value is not None:
                cfg[section][key] = value
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TerminalMaskError, D.ImpossiblePosteriorError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
