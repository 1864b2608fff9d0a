import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import f1_score

from memsg.evaluation import (
    AlignmentError,
    confusion_matrix,
    consistency,
    evaluate,
    macro_f1,
    multi_consistency,
)
from memsg.sgcore import Recording, SceneGraph, Timepoint

from helpers import consistency_cases, macro_cases, random_graph, scene


@pytest.mark.parametrize("idx", range(9))
def test_macro_fixture(vocab, idx):
    name, preds, gts, include_none, expected = macro_cases(vocab)[idx]
    assert abs(macro_f1(preds, gts, vocab, include_none).macro_f1 - float(expected)) <= 1e-12, name


@pytest.mark.parametrize("idx", range(8))
def test_consistency_fixture(vocab, idx):
    name, graphs, exclude, expected = consistency_cases(vocab)[idx]
    excl = [vocab.predicate_index(n) for n in exclude]
    assert abs(consistency(graphs, vocab, excl) - float(expected)) <= 1e-12, name


def _flat_labels(preds, gts, vocab):
    y_true, y_pred = [], []
    for p, g in zip(preds, gts):
        pm, gm = p.relation_map(), g.relation_map()
        for pair in g.ordered_pairs():
            y_true.append(gm.get(pair, vocab.none_index))
            y_pred.append(pm.get(pair, vocab.none_index))
    return y_true, y_pred


def _same_entities(rng, vocab, g):
    rels = []
    for a in g.entity_ids:
        for b in g.entity_ids:
            if a != b and rng.random() < 0.4:
                rels.append((a, int(rng.integers(1, vocab.n_predicates)), b))
    return SceneGraph(g.entities, tuple(rels))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_macro_matches_sklearn(vocab, seed, include_none):
    rng = np.random.default_rng(seed)
    gts = [random_graph(rng, vocab, 2, 5, 0.4) for _ in range(int(rng.integers(1, 6)))]
    preds = [_same_entities(rng, vocab, g) for g in gts]
    y_true, y_pred = _flat_labels(preds, gts, vocab)
    labels = sorted(set(y_true) | set(y_pred))
    if not include_none:
        labels = [c for c in labels if c != vocab.none_index]
    got = macro_f1(preds, gts, vocab, include_none).macro_f1
    if not labels:
        assert got == 1.0
        return
    want = f1_score(y_true, y_pred, labels=labels, average="macro", zero_division=0)
    assert got == pytest.approx(want, abs=1e-12)


def test_perfect_and_empty_prediction(vocab):
    rng = np.random.default_rng(0)
    gts = [random_graph(rng, vocab, 3, 5, 0.5) for _ in range(5)]
    assert macro_f1(gts, gts, vocab).macro_f1 == 1.0
    blank = [SceneGraph(g.entities, ()) for g in gts]
    assert macro_f1(blank, gts, vocab).macro_f1 == 0.0


def test_confusion_counts_every_pair(vocab):
    g = scene(vocab, [(0, "drilling", 1)])
    C = confusion_matrix([g, g], [g, g], vocab)
    assert C.sum() == 2 * 6
    assert C[vocab.predicate_index("drilling"), vocab.predicate_index("drilling")] == 2


def test_misaligned(vocab):
    g = scene(vocab)
    with pytest.raises(AlignmentError, match="misaligned"):
        macro_f1([g], [g, g], vocab)
    with pytest.raises(AlignmentError, match="entity sets differ"):
        macro_f1([scene(vocab, assistant=False)], [g], vocab)


def test_consistency_needs_two(vocab):
    with pytest.raises(ValueError):
        consistency([scene(vocab)], vocab)


def test_scores_are_bounded(vocab):
    rng = np.random.default_rng(3)
    gts = [random_graph(rng, vocab, 2, 5, 0.4) for _ in range(6)]
    preds = [_same_entities(rng, vocab, g) for g in gts]
    rep = macro_f1(preds, gts, vocab)
    assert 0.0 <= rep.macro_f1 <= 1.0
    assert rep.macro_f1 == pytest.approx(np.mean([rep.per_class[n].f1 for n in rep.included]), abs=1e-15)
    for s in rep.per_class.values():
        assert 0 <= s.precision <= 1 and 0 <= s.recall <= 1 and 0 <= s.f1 <= 1


def _relabel(g: SceneGraph, perm: dict) -> SceneGraph:
    return SceneGraph(tuple((perm[e], c) for e, c in g.entities),
                      tuple((perm[s], p, perm[o]) for s, p, o in g.relations))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_consistency_relabel_invariant(vocab, seed):
    rng = np.random.default_rng(seed)
    base = random_graph(rng, vocab, 3, 6, 0.3)
    seq = [base] + [_same_entities(rng, vocab, base) for _ in range(4)]
    ids = list(base.entity_ids)
    perm = dict(zip(ids, (int(x) + 100 for x in rng.permutation(len(ids)))))
    assert consistency([_relabel(g, perm) for g in seq], vocab) == consistency(seq, vocab)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_smoothing_never_lowers_consistency(vocab, seed):
    # Copying timepoint t-1 over t sets one IoU to 1 and the next to J(t-1, t+1);
    # Jaccard distance obeys the triangle inequality, so the sum cannot drop.
    rng = np.random.default_rng(seed)
    base = random_graph(rng, vocab, 3, 6, 0.3)
    seq = [base] + [_same_entities(rng, vocab, base) for _ in range(int(rng.integers(2, 9)))]
    score = consistency(seq, vocab)
    for _ in range(5):
        t = int(rng.integers(1, len(seq)))
        seq = seq[:t] + [seq[t - 1]] + seq[t + 1:]
        new = consistency(seq, vocab)
        assert new >= score - 1e-12
        score = new


def test_pooled_consistency(vocab):
    a = scene(vocab, [(0, "sawing", 1)])
    b = scene(vocab, [(2, "holding", 0)])
    # take one: IoUs 1, 0; take two: IoU 1 -> pooled 2/3
    assert multi_consistency([[a, a, b], [b, b]], vocab) == pytest.approx(2 / 3, abs=1e-15)


def test_evaluate_report(vocab):
    gt = [scene(vocab, [(0, "drilling", 1)]), scene(vocab, [(0, "sawing", 1)])]
    pred = [scene(vocab, [(0, "drilling", 1)]), scene(vocab, [(0, "drilling", 1)])]

    def rec(graphs):
        return Recording("x", tuple(Timepoint(t, g, {}) for t, g in enumerate(graphs)))

    rep = evaluate([rec(pred)], [rec(gt)], vocab, config={"a": 1})
    assert rep.macro_f1 == pytest.approx(1 / 3, abs=1e-12)
    assert rep.consistency == 1.0 and rep.gt_consistency == 0.0
    assert rep.config_fingerprint == evaluate([rec(pred)], [rec(gt)], vocab, config={"a": 1}).config_fingerprint
    assert rep.to_json()
    with pytest.raises(AlignmentError):
        evaluate([Recording("y", rec(pred).timepoints)], [rec(gt)], vocab)
