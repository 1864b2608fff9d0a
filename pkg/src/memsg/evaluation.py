"""Scene-graph metrics: per-pair macro F1 and the adjacent-timepoint consistency score."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .sgcore import Recording, SceneGraph, Vocabulary, predicate_set


class AlignmentError(ValueError):
    pass


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


@dataclass
class EvalReport:
    per_class: dict[str, ClassScore]
    macro_f1: float
    included: list[str]
    consistency: float | None = None
    gt_consistency: float | None = None
    config_fingerprint: str = ""
    n_timepoints: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {k: asdict(v) for k, v in self.per_class.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def confusion_matrix(preds: Sequence[SceneGraph], gts: Sequence[SceneGraph], vocab: Vocabulary) -> np.ndarray:
    """Counts ``C[gt, pred]`` over every ordered entity pair of every timepoint."""
    if len(preds) != len(gts):
        raise AlignmentError(f"misaligned sequences: {len(preds)} predictions vs {len(gts)} ground-truth graphs")
    P = vocab.n_predicates
    none = vocab.none_index
    C = np.zeros((P, P), dtype=np.int64)
    for i, (pg, gg) in enumerate(zip(preds, gts)):
        if set(pg.entity_ids) != set(gg.entity_ids):
            raise AlignmentError(f"timepoint {i}: entity sets differ between prediction and ground truth")
        pm, gm = pg.relation_map(), gg.relation_map()
        for pair in gg.ordered_pairs():
            C[gm.get(pair, none), pm.get(pair, none)] += 1
    return C


def scores_from_confusion(C: np.ndarray, vocab: Vocabulary, include_none: bool = False,
                          average_over: str = "present") -> EvalReport:
    tp = np.diag(C).astype(np.float64)
    support = C.sum(axis=1)
    predicted = C.sum(axis=0)
    per_class = {}
    for c, name in enumerate(vocab.predicate_classes):
        prec = tp[c] / predicted[c] if predicted[c] else 0.0
        rec = tp[c] / support[c] if support[c] else 0.0
        denom = 2 * tp[c] + (predicted[c] - tp[c]) + (support[c] - tp[c])
        f1 = 2 * tp[c] / denom if denom else 0.0
        per_class[name] = ClassScore(float(prec), float(rec), float(f1), int(support[c]), int(predicted[c]))
    included = []
    for c, name in enumerate(vocab.predicate_classes):
        if c == vocab.none_index and not include_none:
            continue
        if average_over == "all" or support[c] or predicted[c]:
            included.append(name)
    # nothing to score means nothing was got wrong
    macro = float(np.mean([per_class[n].f1 for n in included])) if included else 1.0
    return EvalReport(per_class=per_class, macro_f1=macro, included=included)


def macro_f1(preds: Sequence[SceneGraph], gts: Sequence[SceneGraph], vocab: Vocabulary,
             include_none: bool = False, average_over: str = "present") -> EvalReport:
    """Macro F1 over predicate classes.

    Every ordered entity pair is one sample; pairs without a relation count
    as the none class. By default the average runs over the classes that
    occur in the ground truth or the predictions, none excluded.
    """
    report = scores_from_confusion(confusion_matrix(preds, gts, vocab), vocab, include_none, average_over)
    report.n_timepoints = len(gts)
    return report


def _iou(a: frozenset, b: frozenset) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def adjacent_ious(graphs: Sequence[SceneGraph], vocab: Vocabulary | None = None,
                  exclude: Iterable[int] = ()) -> list[float]:
    exclude = tuple(exclude)
    sets = [predicate_set(g, vocab, exclude) for g in graphs]
    return [_iou(a, b) for a, b in zip(sets[:-1], sets[1:])]


def consistency(graphs: Sequence[SceneGraph], vocab: Vocabulary | None = None,
                exclude: Iterable[int] = ()) -> float:
    """Mean IoU of predicate sets between adjacent timepoints."""
    if len(graphs) < 2:
        raise ValueError("consistency needs at least two timepoints")
    return float(np.mean(adjacent_ious(graphs, vocab, exclude)))


def multi_consistency(sequences: Sequence[Sequence[SceneGraph]], vocab: Vocabulary | None = None,
                      exclude: Iterable[int] = ()) -> float:
    """Consistency pooled over the adjacent pairs of several recordings."""
    exclude = tuple(exclude)
    vals = [v for seq in sequences if len(seq) >= 2 for v in adjacent_ious(seq, vocab, exclude)]
    if not vals:
        raise ValueError("consistency needs at least one sequence with two timepoints")
    return float(np.mean(vals))


def evaluate(pred_recs: Sequence[Recording], gt_recs: Sequence[Recording], vocab: Vocabulary,
             include_none: bool = False, consistency_exclude: Iterable[str] = (),
             config: dict | None = None) -> EvalReport:
    """Full report for prediction takes matched to ground-truth takes by ``take_id``."""
    gt_by_id = {r.take_id: r for r in gt_recs}
    preds: list[SceneGraph] = []
    gts: list[SceneGraph] = []
    pred_seqs, gt_seqs = [], []
    for pr in pred_recs:
        if pr.take_id not in gt_by_id:
            raise AlignmentError(f"take {pr.take_id!r} has no ground truth")
        gr = gt_by_id[pr.take_id]
        if len(pr) != len(gr):
            raise AlignmentError(f"take {pr.take_id!r}: {len(pr)} predicted vs {len(gr)} ground-truth timepoints")
        preds.extend(pr.graphs)
        gts.extend(gr.graphs)
        pred_seqs.append(pr.graphs)
        gt_seqs.append(gr.graphs)
    if not preds:
        raise AlignmentError("no prediction timepoints to evaluate")
    excl = [vocab.predicate_index(n) for n in consistency_exclude]
    report = macro_f1(preds, gts, vocab, include_none)
    if any(len(s) >= 2 for s in pred_seqs):
        report.consistency = multi_consistency(pred_seqs, vocab, excl)
        report.gt_consistency = multi_consistency(gt_seqs, vocab, excl)
    report.config_fingerprint = fingerprint({"include_none": include_none,
                                             "consistency_exclude": sorted(consistency_exclude),
                                             **(config or {})})
    return report
