"""``memsg`` command line: synth, train, infer, eval, ablate, attn-dump.

Exit codes: 0 success, 1 usage error, 2 invalid data or configuration.
Every artifact is accompanied by ``<artifact>.manifest.json`` recording the
resolved configuration, seeds, input hashes, tool version and timings.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from typing import Sequence

import numpy as np

from . import __version__
from .ablation import TECHNIQUES, run_ablation_grid
from .evaluation import AlignmentError, evaluate
from .io_utils import atomic_write_text, file_sha256
from .memory import MODES, MemoryMode
from .model import VARIANTS, TrainConfig, infer_recordings, infer_sequence, model_from_checkpoint, save_model, train
from .numerics import CheckpointError, ShapeError
from .sgcore import (
    Recording,
    ValidationError,
    default_vocabulary,
    load_vocabulary,
    read_recordings,
    write_recordings,
)
from .synthdata import ScenarioError, default_scenario, generate_splits, load_scenario, make_benchmark

log = logging.getLogger("memsg")

DATA_ERRORS = (ValidationError, ScenarioError, CheckpointError, AlignmentError, ShapeError,
               FileNotFoundError, IsADirectoryError, json.JSONDecodeError, ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- manifests


class RunManifest:
    """Accumulates what one invocation read and wrote."""

    def __init__(self, command: str, argv: Sequence[str]):
        self.command = command
        self.argv = list(argv)
        self.config: dict = {}
        self.seeds: dict = {}
        self.inputs: dict[str, str] = {}
        self.started = time.time()
        self.timings: dict[str, float] = {}

    def add_input(self, path: str) -> None:
        if os.path.isdir(path):
            for p in sorted(glob.glob(os.path.join(path, "*"))):
                if os.path.isfile(p):
                    self.inputs[os.path.abspath(p)] = file_sha256(p)
        elif os.path.isfile(path):
            self.inputs[os.path.abspath(path)] = file_sha256(path)

    def write_for(self, artifact: str, extra: dict | None = None) -> str:
        path = f"{artifact}.manifest.json"
        out = {
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "artifact": {"path": os.path.abspath(artifact),
                         "sha256": file_sha256(artifact) if os.path.isfile(artifact) else None},
            "timings": {**self.timings, "wall_seconds": time.time() - self.started},
        }
        if extra:
            out.update(extra)
        atomic_write_text(path, json.dumps(out, indent=2, sort_keys=True, default=str) + "\n")
        return path


# ---------------------------------------------------------------- data helpers


def _vocab(path: str | None, data_dir: str | None = None):
    if path:
        return load_vocabulary(path)
    if data_dir and os.path.isfile(os.path.join(data_dir, "vocab.json")):
        return load_vocabulary(os.path.join(data_dir, "vocab.json"))
    return default_vocabulary()


def split_files(data: str, split: str) -> list[str]:
    """Recording files of one split inside a benchmark directory."""
    manifest = os.path.join(data, "manifest.json")
    if os.path.isfile(manifest):
        with open(manifest, encoding="utf-8") as fh:
            names = json.load(fh)["splits"].get(split, [])
        files = [os.path.join(data, n) for n in names]
    else:
        files = sorted(glob.glob(os.path.join(data, f"{split}_*.jsonl")))
    if not files:
        raise FileNotFoundError(f"no {split!r} recordings found in {data}")
    return files


def load_recordings(data: str, split: str, vocab) -> list[Recording]:
    paths = [data] if os.path.isfile(data) else split_files(data, split)
    out: list[Recording] = []
    for p in paths:
        out.extend(read_recordings(p, vocab))
    return out


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


# flag dest -> TrainConfig field
_TRAIN_FLAGS = {
    "variant": "variant", "memory_mode": "memory_mode", "stride": "stride", "long_anchor": "long_anchor",
    "lam": "multitask_weight", "lr": "lr", "epochs": "epochs", "patience": "patience",
    "batch_size": "batch_size", "hidden": "hidden", "heads": "heads", "aug_p": "aug_p",
    "aug_boundary": "aug_boundary", "init_from": "init_from", "seed": "seed",
    "use_toi": "use_toi", "use_augmentation": "use_augmentation", "use_multitask": "use_multitask",
    "end_to_end": "end_to_end", "aug_contiguous": "aug_contiguous",
}


def resolve_train_config(args: argparse.Namespace, file_cfg: dict) -> TrainConfig:
    """Defaults, then the config file, then explicitly given flags."""
    merged = dict(file_cfg.get("train", file_cfg))
    for dest, fld in _TRAIN_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            merged[fld] = val
    frac = getattr(args, "aug_frac", None)
    if frac is not None:
        merged["aug_short_fraction"] = merged["aug_long_fraction"] = frac
    return TrainConfig.from_dict(merged)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (explicit flags override --config)")
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--memory-mode", choices=MODES)
    g.add_argument("--stride", type=int)
    g.add_argument("--long-anchor", choices=("toi", "start"))
    g.add_argument("--lambda", dest="lam", type=float, help="multitask weight")
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--aug-p", type=float)
    g.add_argument("--aug-frac", type=float)
    g.add_argument("--aug-boundary", type=int)
    g.add_argument("--init-from", metavar="CKPT")
    for name, dest in (("toi", "use_toi"), ("augmentation", "use_augmentation"),
                       ("multitask", "use_multitask"), ("end-to-end", "end_to_end")):
        g.add_argument(f"--{name}", dest=dest, action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--aug-contiguous", action=argparse.BooleanOptionalAction, default=None)


# ---------------------------------------------------------------- commands


def cmd_synth(args, man: RunManifest) -> int:
    scenario = load_scenario(args.scenario) if args.scenario else default_scenario()
    vocab = _vocab(args.vocab)
    if args.scenario:
        man.add_input(args.scenario)
    man.config = {"scenario": scenario.to_dict(), "train": args.train, "val": args.val, "test": args.test}
    man.seeds = {"master": args.seed}
    t0 = time.perf_counter()
    manifest = make_benchmark(scenario, vocab, args.out, args.train, args.val, args.test, args.seed)
    man.timings["generate_seconds"] = time.perf_counter() - t0
    man.write_for(os.path.normpath(args.out), {"files": manifest["files"]})
    n = sum(len(v) for v in manifest["splits"].values())
    print(f"wrote {n} recordings to {args.out}")
    return 0


def cmd_train(args, man: RunManifest) -> int:
    file_cfg = _load_config(args.config)
    cfg = resolve_train_config(args, file_cfg)
    vocab = _vocab(args.vocab, args.data)
    train_recs = load_recordings(args.data, "train", vocab)
    try:
        val_recs = load_recordings(args.data, "val", vocab) if os.path.isdir(args.data) else []
    except FileNotFoundError:
        val_recs = []
    for path in (args.data, args.vocab, args.config, cfg.init_from):
        if path:
            man.add_input(path)
    man.config = cfg.to_dict()
    man.seeds = {"train": cfg.seed}
    t0 = time.perf_counter()
    res = train(train_recs, cfg, vocab, val=val_recs)
    man.timings["train_seconds"] = time.perf_counter() - t0
    save_model(res.model, args.out)
    man.write_for(args.out, {"epochs": res.log, "best_epoch": res.best_epoch, "best_val_macro_f1": res.best_val})
    print(f"best epoch {res.best_epoch}" + (f", val macro F1 {res.best_val:.4f}" if res.best_val is not None else ""))
    return 0


def _mode_override(args, model) -> MemoryMode | None:
    if args.memory_mode is None and args.stride is None:
        return None
    return MemoryMode(args.memory_mode or model.cfg.memory_mode, args.stride or model.cfg.stride,
                      model.cfg.long_anchor)


def cmd_infer(args, man: RunManifest) -> int:
    model = model_from_checkpoint(args.ckpt)
    recs = load_recordings(args.data, args.split, model.vocab)
    man.add_input(args.ckpt)
    man.add_input(args.data)
    mode = _mode_override(args, model)
    man.config = {"train": model.cfg.to_dict(), "memory_mode": (mode or model.cfg.mode).mode,
                  "stride": (mode or model.cfg.mode).stride, "split": args.split}
    t0 = time.perf_counter()
    preds = infer_recordings(recs, model, mode)
    man.timings["infer_seconds"] = time.perf_counter() - t0
    write_recordings(args.out, preds, model.vocab)
    man.write_for(args.out)
    print(f"predicted {sum(len(r) for r in preds)} timepoints in {len(preds)} takes")
    return 0


def cmd_eval(args, man: RunManifest) -> int:
    vocab = _vocab(args.vocab)
    preds = read_recordings(args.pred, vocab)
    gts = load_recordings(args.gt, args.split, vocab)
    for p in (args.pred, args.gt, args.vocab):
        if p:
            man.add_input(p)
    exclude = [s for s in (args.consistency_exclude or "").split(",") if s]
    report = evaluate(preds, gts, vocab, include_none=args.include_none, consistency_exclude=exclude)
    man.config = {"include_none": args.include_none, "consistency_exclude": exclude}
    text = report.to_json() + "\n"
    if args.out:
        atomic_write_text(args.out, text)
        man.write_for(args.out)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args, man: RunManifest) -> int:
    cfg = _load_config(args.config)
    man.add_input(args.config)
    vocab = load_vocabulary(cfg["vocab"]) if cfg.get("vocab") else default_vocabulary()
    scenario = load_scenario(cfg["scenario"]) if cfg.get("scenario") else default_scenario()
    seeds = [int(s) for s in cfg.get("seeds", [args.seed if args.seed is not None else 0])]
    if args.seed is not None and "seeds" not in cfg:
        seeds = [args.seed]
    counts = cfg.get("counts", {"train": 8, "val": 1, "test": 1})
    base = TrainConfig.from_dict(cfg.get("train", {}))
    techniques = cfg.get("techniques", list(TECHNIQUES))
    modes = cfg.get("modes", list(MODES))
    models = cfg.get("models", list(VARIANTS))
    man.config = {"train": base.to_dict(), "counts": counts, "techniques": techniques, "modes": modes,
                  "models": models, "scenario": scenario.to_dict()}
    man.seeds = {"benchmark_and_training": seeds}
    splits = {s: generate_splits(scenario, vocab, counts["train"], counts["val"], counts["test"], s)
              for s in seeds}
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    table = run_ablation_grid(splits, base, vocab, techniques, modes, models)
    man.timings["grid_seconds"] = time.perf_counter() - t0
    outputs = {"results.json": table.to_json() + "\n", "results.csv": table.to_csv(),
               "results.txt": table.to_text()}
    for name, text in outputs.items():
        path = os.path.join(args.out, name)
        atomic_write_text(path, text)
        man.write_for(path)
    if not args.no_plot:
        from .plotting import plot_ablation

        fig = os.path.join(args.out, "ablation.png")
        plot_ablation(table.summary(), fig)
        man.write_for(fig)
    sys.stdout.write(table.to_text())
    return 0


def attention_records(trace: list[dict]) -> list[dict]:
    """Per timepoint of interest, the head-averaged summary attention of each layer."""
    out = []
    for rec in trace:
        layers = []
        for a in rec["attention"]:
            a = np.asarray(a)
            mean = a.mean(axis=0) if a.size else np.zeros(0)
            layers.append([{"t": int(t), "toi_id": int(k), "weight": float(w)}
                           for t, k, w in zip(rec["window"], rec["toi_ids"], mean)])
        out.append({"t": int(rec["t"]), "layers": layers})
    return out


def cmd_attn_dump(args, man: RunManifest) -> int:
    model = model_from_checkpoint(args.ckpt)
    if model.cfg.visual_only:
        raise ValueError("a visual-only checkpoint has no memory attention to dump")
    recs = load_recordings(args.data, args.split, model.vocab)
    if args.take:
        recs = [r for r in recs if r.take_id == args.take]
        if not recs:
            raise KeyError(f"take {args.take!r} not found")
    rec = recs[0]
    man.add_input(args.ckpt)
    man.add_input(args.data)
    mode = _mode_override(args, model) or model.cfg.mode
    trace: list[dict] = []
    infer_sequence(rec, model, mode, trace=trace)
    dump = {"take_id": rec.take_id, "memory_mode": mode.mode, "stride": mode.stride,
            "records": attention_records(trace)}
    man.config = {"memory_mode": mode.mode, "stride": mode.stride, "take_id": rec.take_id}
    atomic_write_text(args.out, json.dumps(dump, indent=1) + "\n")
    man.write_for(args.out)
    if args.plot:
        from .plotting import plot_attention

        plot_attention(dump["records"], args.plot)
        man.write_for(args.plot)
    print(f"dumped attention for {len(dump['records'])} timepoints of {rec.take_id}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memsg", description="Scene graphs as temporal memory: data, training, evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default=None, help="overrides MEMSG_LOG_LEVEL (default WARNING)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic benchmark")
    s.add_argument("--scenario", help="scenario JSON (default: built-in)")
    s.add_argument("--vocab", help="vocabulary JSON (default: built-in)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train", type=int, default=8)
    s.add_argument("--val", type=int, default=1)
    s.add_argument("--test", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a benchmark directory")
    t.add_argument("--data", required=True, help="benchmark directory or a single recording file")
    t.add_argument("--vocab")
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="autoregressive prediction with a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split", default="test")
    i.add_argument("--out", required=True)
    i.add_argument("--memory-mode", choices=MODES)
    i.add_argument("--stride", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="macro F1 and consistency of predictions")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="ground-truth file or benchmark directory")
    e.add_argument("--split", default="test")
    e.add_argument("--vocab")
    e.add_argument("--include-none", action="store_true")
    e.add_argument("--consistency-exclude", metavar="PRED,PRED")
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, help="single seed when the config lists none")
    a.add_argument("--no-plot", action="store_true")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("attn-dump", help="memory attention of one take as JSON")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--take")
    d.add_argument("--out", required=True)
    d.add_argument("--memory-mode", choices=MODES)
    d.add_argument("--stride", type=int)
    d.add_argument("--plot", metavar="PNG", help="also render a heatmap")
    d.set_defaults(func=cmd_attn_dump)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = (args.log_level or os.environ.get("MEMSG_LOG_LEVEL") or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, RunManifest(args.command, argv))
    except DATA_ERRORS as exc:
        print(f"memsg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
