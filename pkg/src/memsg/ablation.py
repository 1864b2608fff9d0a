"""Ablation grid: techniques x memory modes x model variants, repeated over seeds.

Memory and LBT models start from the visual-only weights trained on the same
seed, so each seed trains its visual-only model once and reuses it.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .evaluation import evaluate
from .memory import MODES
from .model import VARIANTS, TrainConfig, infer_recordings, save_model, train
from .sgcore import Recording, Vocabulary

log = logging.getLogger(__name__)

TECHNIQUES: dict[str, dict] = {
    "full": {},
    "-augmentation": {"use_augmentation": False},
    "-toi": {"use_toi": False},
    "-end-to-end": {"end_to_end": False},
    "-multitask": {"use_multitask": False},
}

# fields a visual-only model never reads; cells differing only here share one run
_VISUAL_IGNORES = ("memory_mode", "long_anchor", "use_toi", "use_multitask", "use_augmentation",
                   "end_to_end", "init_from")


@dataclass(frozen=True)
class Cell:
    technique: str
    mode: str
    model: str


@dataclass
class CellResult:
    cell: Cell
    seed: int
    macro_f1: float
    consistency: float
    gt_consistency: float
    best_epoch: int
    epochs_run: int
    seconds: float

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(d.pop("cell"))
        return d


@dataclass
class AblationTable:
    rows: list[CellResult] = field(default_factory=list)

    def summary(self) -> list[dict]:
        """Mean and sample standard deviation over seeds for every cell."""
        groups: dict[Cell, list[CellResult]] = {}
        for r in self.rows:
            groups.setdefault(r.cell, []).append(r)
        out = []
        for cell, rs in groups.items():
            f1 = np.array([r.macro_f1 for r in rs])
            cons = np.array([r.consistency for r in rs])
            out.append({
                **dataclasses.asdict(cell),
                "n_seeds": len(rs),
                "macro_f1_mean": float(f1.mean()),
                "macro_f1_sd": float(f1.std(ddof=1)) if len(rs) > 1 else 0.0,
                "consistency_mean": float(cons.mean()),
                "consistency_sd": float(cons.std(ddof=1)) if len(rs) > 1 else 0.0,
                "gt_consistency_mean": float(np.mean([r.gt_consistency for r in rs])),
            })
        return out

    def lookup(self, technique: str, mode: str, model: str) -> dict:
        for s in self.summary():
            if (s["technique"], s["mode"], s["model"]) == (technique, mode, model):
                return s
        raise KeyError(f"no cell ({technique}, {mode}, {model})")

    def to_json(self) -> str:
        return json.dumps({"rows": [r.to_dict() for r in self.rows], "summary": self.summary()},
                          indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        summary = self.summary()
        if summary:
            writer = csv.DictWriter(buf, fieldnames=list(summary[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(summary)
        return buf.getvalue()

    def to_text(self) -> str:
        header = f"{'model':<12} {'mode':<10} {'technique':<14} {'macro F1':>15} {'consistency':>15}  n"
        lines = [header, "-" * len(header)]
        for s in sorted(self.summary(), key=lambda s: (s["model"], s["mode"], s["technique"])):
            lines.append(f"{s['model']:<12} {s['mode']:<10} {s['technique']:<14} "
                         f"{s['macro_f1_mean']:>7.3f} ± {s['macro_f1_sd']:<5.3f} "
                         f"{s['consistency_mean']:>7.3f} ± {s['consistency_sd']:<5.3f}  {s['n_seeds']}")
        return "\n".join(lines) + "\n"


def cell_config(base: TrainConfig, cell: Cell, seed: int) -> TrainConfig:
    if cell.technique not in TECHNIQUES:
        raise ValueError(f"unknown technique {cell.technique!r}; choose from {sorted(TECHNIQUES)}")
    if cell.model not in VARIANTS:
        raise ValueError(f"unknown model {cell.model!r}; choose from {VARIANTS}")
    if cell.mode not in MODES:
        raise ValueError(f"unknown memory mode {cell.mode!r}; choose from {MODES}")
    return dataclasses.replace(base, variant=cell.model, memory_mode=cell.mode, seed=seed,
                               **TECHNIQUES[cell.technique])


def _run_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    if cfg.visual_only:
        for k in _VISUAL_IGNORES:
            d.pop(k, None)
    return json.dumps(d, sort_keys=True)


def run_ablation_grid(splits: Mapping[int, Mapping[str, Sequence[Recording]]], base_cfg: TrainConfig,
                      vocab: Vocabulary, techniques: Sequence[str] = tuple(TECHNIQUES),
                      modes: Sequence[str] = MODES, models: Sequence[str] = VARIANTS,
                      on_cell: Callable[[CellResult], None] | None = None,
                      cache: dict | None = None) -> AblationTable:
    """Train and evaluate every cell of the grid for every seed.

    ``splits`` maps a seed to its ``train``/``val``/``test`` recordings. The
    seed also seeds training. Pass the same ``cache`` dict to several calls
    to share trained runs (notably the visual-only initialisation).
    """
    cache = {} if cache is None else cache
    table = AblationTable()
    cells = [Cell(t, m, v) for v in models for m in modes for t in techniques]
    with tempfile.TemporaryDirectory(prefix="memsg-ablate-") as tmp:
        for seed, data in splits.items():
            init_path = None
            needs_init = any(c.model != "visual_only" for c in cells) and base_cfg.init_from is None
            if needs_init:
                vis_cfg = cell_config(base_cfg, Cell("full", base_cfg.memory_mode, "visual_only"), seed)
                vis = _train_eval(vis_cfg, data, vocab, cache)
                init_path = os.path.join(tmp, f"visual_{seed}.ckpt")
                save_model(vis["model"], init_path)
            for cell in cells:
                cfg = cell_config(base_cfg, cell, seed)
                if cfg.variant != "visual_only" and init_path is not None:
                    cfg = dataclasses.replace(cfg, init_from=init_path)
                res = _train_eval(cfg, data, vocab, cache)
                row = CellResult(cell, seed, res["macro_f1"], res["consistency"], res["gt_consistency"],
                                 res["best_epoch"], res["epochs_run"], res["seconds"])
                log.info("seed %d %s/%s/%s: F1 %.4f consistency %.4f", seed, cell.model, cell.mode,
                         cell.technique, row.macro_f1, row.consistency)
                table.rows.append(row)
                if on_cell:
                    on_cell(row)
    return table


def _train_eval(cfg: TrainConfig, data: Mapping[str, Sequence[Recording]], vocab: Vocabulary,
                cache: dict) -> dict:
    # the init checkpoint lives in a temp dir; the visual weights it holds are
    # determined by the seed, which is already part of the key
    key = (_run_key(dataclasses.replace(cfg, init_from="init" if cfg.init_from else None)),
           tuple(r.take_id for r in data["train"]), tuple(r.take_id for r in data["test"]))
    if key in cache:
        return cache[key]
    t0 = time.perf_counter()
    res = train(data["train"], cfg, vocab, val=data.get("val", ()))
    preds = infer_recordings(data["test"], res.model)
    report = evaluate(preds, data["test"], vocab)
    out = {"model": res.model, "macro_f1": report.macro_f1, "consistency": report.consistency,
           "gt_consistency": report.gt_consistency, "best_epoch": res.best_epoch,
           "epochs_run": len(res.log), "seconds": time.perf_counter() - t0}
    cache[key] = out
    return out
