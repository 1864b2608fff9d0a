"""Shared builders and hand-computed metric fixtures for the test suite."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from memsg.sgcore import SceneGraph, Vocabulary


def random_graph(rng: np.random.Generator, vocab: Vocabulary, n_min=1, n_max=6, p_edge=0.3) -> SceneGraph:
    n = int(rng.integers(n_min, n_max + 1))
    ids = [int(x) for x in rng.choice(50, size=n, replace=False)]
    ents = [(i, int(rng.integers(vocab.n_entities))) for i in ids]
    rels = []
    for a in ids:
        for b in ids:
            if a != b and rng.random() < p_edge:
                p = int(rng.integers(vocab.n_predicates))
                if p != vocab.none_index:
                    rels.append((a, p, b))
    return SceneGraph(tuple(ents), tuple(rels))


HS, PAT, ASST = 0, 1, 2


def scene(vocab: Vocabulary, rels=(), assistant=True) -> SceneGraph:
    """Head surgeon, patient and optionally an assistant with named relations."""
    ents = [(HS, vocab.entity_index("head_surgeon")), (PAT, vocab.entity_index("patient"))]
    if assistant:
        ents.append((ASST, vocab.entity_index("assistant")))
    return SceneGraph(tuple(ents), tuple((s, vocab.predicate_index(p), o) for s, p, o in rels))


def macro_cases(vocab: Vocabulary):
    """(name, preds, gts, include_none, expected macro F1), expectations worked out by hand."""
    two = dict(assistant=False)
    drill = [(HS, "drilling", PAT)]
    saw = [(HS, "sawing", PAT)]
    return [
        ("identical", [scene(vocab, drill)] * 3, [scene(vocab, drill)] * 3, False, Fraction(1)),
        ("all_none_predicted", [scene(vocab)] * 2, [scene(vocab, drill)] * 2, False, Fraction(0)),
        # drilling: tp 1, fp 1, fn 0 -> 2/3; sawing: tp 0, fn 1 -> 0
        ("one_hit_one_miss", [scene(vocab, drill, **two)] * 2,
         [scene(vocab, drill, **two), scene(vocab, saw, **two)], False, Fraction(1, 3)),
        # same, with none scored: the two reverse pairs are none/none hits -> F1 1
        ("one_hit_one_miss_with_none", [scene(vocab, drill, **two)] * 2,
         [scene(vocab, drill, **two), scene(vocab, saw, **two)], True, Fraction(5, 9)),
        # a predicted class absent from the ground truth scores 0
        ("spurious_class", [scene(vocab, drill + [(ASST, "holding", HS)])],
         [scene(vocab, drill)], False, Fraction(1, 2)),
        ("missed_class", [scene(vocab, drill)],
         [scene(vocab, drill + [(ASST, "assisting", HS)])], False, Fraction(1, 2)),
        # drilling: tp 2, fn 1 -> 4/5; hammering: fp 1 -> 0
        ("three_steps", [scene(vocab, drill), scene(vocab, [(HS, "hammering", PAT)]), scene(vocab, drill)],
         [scene(vocab, drill)] * 3, False, Fraction(2, 5)),
        ("nothing_to_score", [scene(vocab)] * 2, [scene(vocab)] * 2, False, Fraction(1)),
        # right predicate on the wrong pair: assisting has tp 0, fp 1, fn 1
        ("wrong_pair", [scene(vocab, drill + [(ASST, "assisting", PAT)])],
         [scene(vocab, drill + [(ASST, "assisting", HS)])], False, Fraction(1, 2)),
    ]


def consistency_cases(vocab: Vocabulary):
    """(name, graphs, exclude names, expected consistency)."""
    ad = scene(vocab, [(ASST, "assisting", HS), (HS, "drilling", PAT)])
    adc = scene(vocab, [(ASST, "assisting", HS), (HS, "drilling", PAT), (PAT, "cleaning", ASST)])
    return [
        ("two_thirds", [ad, adc], (), Fraction(2, 3)),
        ("repeated", [ad] * 4, (), Fraction(1)),
        ("disjoint", [scene(vocab, [(HS, "sawing", PAT)]), scene(vocab, [(ASST, "holding", HS)])], (), Fraction(0)),
        ("both_empty", [scene(vocab), scene(vocab)], (), Fraction(1)),
        ("half_then_half", [scene(vocab, [(HS, "sawing", PAT)]),
                            scene(vocab, [(HS, "sawing", PAT), (ASST, "holding", HS)]),
                            scene(vocab, [(ASST, "holding", HS)])], (), Fraction(1, 2)),
        ("none_relation_ignored", [scene(vocab, [(HS, "drilling", PAT), (ASST, "none", HS)]),
                                   scene(vocab, [(HS, "drilling", PAT)])], (), Fraction(1)),
        ("excluded_family", [ad, scene(vocab, [(HS, "drilling", PAT)])], ("assisting",), Fraction(1)),
        ("empty_then_full", [scene(vocab), ad, ad], (), Fraction(1, 2)),
    ]
