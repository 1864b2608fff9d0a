"""Scene-graph value types, vocabularies and the line-delimited recording format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping

import numpy as np


class ValidationError(ValueError):
    """Raised for malformed input files or invariant violations."""


NO_MAIN_ACTION = -1


@dataclass(frozen=True)
class Vocabulary:
    entity_classes: tuple[str, ...]
    predicate_classes: tuple[str, ...]
    none_predicate: str = "none"
    head_surgeon_class: str = "head_surgeon"
    patient_class: str = "patient"

    def __post_init__(self):
        object.__setattr__(self, "entity_classes", tuple(self.entity_classes))
        object.__setattr__(self, "predicate_classes", tuple(self.predicate_classes))
        for label, names in (("entity_classes", self.entity_classes),
                             ("predicate_classes", self.predicate_classes)):
            if len(set(names)) != len(names):
                raise ValidationError(f"duplicate names in {label}")
        if self.none_predicate not in self.predicate_classes:
            raise ValidationError(f"none predicate {self.none_predicate!r} not in predicate_classes")
        for role in (self.head_surgeon_class, self.patient_class):
            if role not in self.entity_classes:
                raise ValidationError(f"entity class {role!r} not in entity_classes")

    @property
    def n_entities(self) -> int:
        return len(self.entity_classes)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_classes)

    @property
    def none_index(self) -> int:
        return self.predicate_classes.index(self.none_predicate)

    def entity_index(self, name: str) -> int:
        try:
            return self.entity_classes.index(name)
        except ValueError:
            raise ValidationError(f"unknown entity class {name!r}") from None

    def predicate_index(self, name: str) -> int:
        try:
            return self.predicate_classes.index(name)
        except ValueError:
            raise ValidationError(f"unknown predicate class {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "entity_classes": list(self.entity_classes),
            "predicate_classes": list(self.predicate_classes),
            "none": self.none_predicate,
            "head_surgeon": self.head_surgeon_class,
            "patient": self.patient_class,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        try:
            return cls(
                entity_classes=tuple(d["entity_classes"]),
                predicate_classes=tuple(d["predicate_classes"]),
                none_predicate=d.get("none", "none"),
                head_surgeon_class=d.get("head_surgeon", "head_surgeon"),
                patient_class=d.get("patient", "patient"),
            )
        except KeyError as exc:
            raise ValidationError(f"vocabulary missing key {exc.args[0]!r}") from None


def load_vocabulary(path: str | os.PathLike) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        try:
            return Vocabulary.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid vocabulary file: {exc}") from None


def default_vocabulary() -> Vocabulary:
    text = resources.files("memsg.data").joinpath("default_vocab.json").read_text("utf-8")
    return Vocabulary.from_dict(json.loads(text))


@dataclass(frozen=True)
class SceneGraph:
    """Entities as ``(entity_id, class_index)`` and relations as ``(sub, pred, obj)``."""

    entities: tuple[tuple[int, int], ...]
    relations: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        ents = tuple((int(i), int(c)) for i, c in self.entities)
        rels = tuple((int(s), int(p), int(o)) for s, p, o in self.relations)
        object.__setattr__(self, "entities", ents)
        object.__setattr__(self, "relations", rels)
        ids = [i for i, _ in ents]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate entity id")
        known = set(ids)
        pairs = set()
        for s, p, o in rels:
            if s not in known or o not in known:
                raise ValidationError(f"relation ({s},{p},{o}) references an unknown entity")
            if s == o:
                raise ValidationError(f"self-loop on entity {s}")
            if (s, o) in pairs:
                raise ValidationError(f"more than one predicate on pair ({s},{o})")
            pairs.add((s, o))

    @property
    def entity_ids(self) -> list[int]:
        return sorted(i for i, _ in self.entities)

    def entity_class(self, entity_id: int) -> int:
        for i, c in self.entities:
            if i == entity_id:
                return c
        raise KeyError(entity_id)

    def ordered_pairs(self) -> list[tuple[int, int]]:
        """All ordered (subject, object) id pairs, lexicographic by id."""
        ids = self.entity_ids
        return [(a, b) for a in ids for b in ids if a != b]

    def relation_map(self) -> dict[tuple[int, int], int]:
        return {(s, o): p for s, p, o in self.relations}

    def check(self, vocab: Vocabulary) -> None:
        for _, c in self.entities:
            if not 0 <= c < vocab.n_entities:
                raise ValidationError(f"entity class index {c} outside vocabulary")
        for _, p, _ in self.relations:
            if not 0 <= p < vocab.n_predicates:
                raise ValidationError(f"predicate index {p} outside vocabulary")

    def with_relations(self, relations: Iterable[tuple[int, int, int]]) -> "SceneGraph":
        return SceneGraph(self.entities, tuple(relations))


def predicate_set(graph: SceneGraph, vocab: Vocabulary | None = None,
                  exclude: Iterable[int] = ()) -> frozenset[int]:
    """Distinct predicate indices used by ``graph``, without the none predicate."""
    drop = set(exclude)
    if vocab is not None:
        drop.add(vocab.none_index)
    return frozenset(p for _, p, _ in graph.relations if p not in drop)


def main_action(graph: SceneGraph, vocab: Vocabulary) -> int:
    """Predicate on the head-surgeon -> patient pair, or ``NO_MAIN_ACTION``."""
    hs_cls = vocab.entity_index(vocab.head_surgeon_class)
    pat_cls = vocab.entity_index(vocab.patient_class)
    hs = [i for i, c in graph.entities if c == hs_cls]
    pat = [i for i, c in graph.entities if c == pat_cls]
    if len(hs) > 1:
        raise ValidationError("ambiguous head surgeon")
    if not hs or len(pat) != 1:
        return NO_MAIN_ACTION
    pred = graph.relation_map().get((hs[0], pat[0]))
    if pred is None or pred == vocab.none_index:
        return NO_MAIN_ACTION
    return pred


@dataclass(frozen=True)
class Timepoint:
    t: int
    graph: SceneGraph
    pair_features: Mapping[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def feature_matrix(self) -> np.ndarray:
        """Pair features stacked in ``graph.ordered_pairs()`` order."""
        pairs = self.graph.ordered_pairs()
        if not pairs:
            return np.zeros((0, 0))
        return np.stack([self.pair_features[p] for p in pairs])

    def __eq__(self, other):
        if not isinstance(other, Timepoint):
            return NotImplemented
        if self.t != other.t or self.graph != other.graph:
            return False
        if set(self.pair_features) != set(other.pair_features):
            return False
        return all(np.array_equal(self.pair_features[k], other.pair_features[k]) for k in self.pair_features)

    __hash__ = None


@dataclass(frozen=True)
class Recording:
    take_id: str
    timepoints: tuple[Timepoint, ...]

    def __post_init__(self):
        tps = tuple(self.timepoints)
        object.__setattr__(self, "timepoints", tps)
        for expect, tp in enumerate(tps):
            if tp.t != expect:
                raise ValidationError(f"non-consecutive timepoints: expected t={expect}, got t={tp.t}")
        dims = set()
        for tp in tps:
            if not tp.pair_features:
                continue
            if set(tp.pair_features) != set(tp.graph.ordered_pairs()):
                raise ValidationError(f"t={tp.t}: pair_features keys must cover exactly all ordered entity pairs")
            dims.update(len(v) for v in tp.pair_features.values())
        if len(dims) > 1:
            raise ValidationError(f"pair feature vectors have mixed dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.timepoints)

    @property
    def graphs(self) -> list[SceneGraph]:
        return [tp.graph for tp in self.timepoints]

    @property
    def feature_dim(self) -> int:
        for tp in self.timepoints:
            for v in tp.pair_features.values():
                return len(v)
        return 0

    def with_graphs(self, graphs: Iterable[SceneGraph], keep_features: bool = True) -> "Recording":
        tps = []
        for tp, g in zip(self.timepoints, graphs, strict=True):
            tps.append(Timepoint(tp.t, g, tp.pair_features if keep_features else {}))
        return Recording(self.take_id, tuple(tps))


# ---------------------------------------------------------------- serialization


def _graph_to_obj(graph: SceneGraph, vocab: Vocabulary) -> tuple[list, list]:
    ents = [{"id": i, "class": vocab.entity_classes[c]} for i, c in graph.entities]
    rels = [{"sub": s, "pred": vocab.predicate_classes[p], "obj": o} for s, p, o in graph.relations]
    return ents, rels


def serialize_timepoint(take_id: str, tp: Timepoint, vocab: Vocabulary, with_features: bool = True) -> str:
    ents, rels = _graph_to_obj(tp.graph, vocab)
    obj = {"take_id": take_id, "t": tp.t, "entities": ents, "relations": rels}
    if with_features and tp.pair_features:
        obj["pair_features"] = {
            f"{s}-{o}": [float(x) for x in tp.pair_features[(s, o)]] for s, o in tp.graph.ordered_pairs()
        }
    return json.dumps(obj, separators=(",", ":"))


def serialize_recording(rec: Recording, vocab: Vocabulary, with_features: bool = True) -> str:
    return "".join(serialize_timepoint(rec.take_id, tp, vocab, with_features) + "\n" for tp in rec.timepoints)


def _parse_line(obj, lineno: int, vocab: Vocabulary) -> tuple[str, Timepoint]:
    if not isinstance(obj, dict):
        raise ValidationError(f"line {lineno}: expected an object")
    try:
        take_id = obj["take_id"]
        t = obj["t"]
        raw_ents = obj["entities"]
        raw_rels = obj.get("relations", [])
    except KeyError as exc:
        raise ValidationError(f"line {lineno}: missing key {exc.args[0]!r}") from None
    if not isinstance(take_id, str) or not isinstance(t, int) or isinstance(t, bool) or t < 0:
        raise ValidationError(f"line {lineno}: bad take_id/t")
    try:
        ents = tuple((int(e["id"]), vocab.entity_index(e["class"])) for e in raw_ents)
        rels = tuple((int(r["sub"]), vocab.predicate_index(r["pred"]), int(r["obj"])) for r in raw_rels)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"line {lineno}: malformed entity/relation record ({exc})") from None
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    try:
        graph = SceneGraph(ents, rels)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    feats: dict[tuple[int, int], np.ndarray] = {}
    for key, vec in (obj.get("pair_features") or {}).items():
        try:
            s, o = (int(x) for x in key.split("-"))
            feats[(s, o)] = np.asarray(vec, dtype=np.float64)
        except (ValueError, TypeError):
            raise ValidationError(f"line {lineno}: bad pair_features entry {key!r}") from None
        if feats[(s, o)].ndim != 1:
            raise ValidationError(f"line {lineno}: pair feature {key!r} is not a flat vector")
    return take_id, Timepoint(t, graph, feats)


def parse_recordings(text: str, vocab: Vocabulary) -> list[Recording]:
    """Parse one or more takes; lines of a take must be contiguous."""
    groups: list[tuple[str, list[Timepoint]]] = []
    last_line: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: malformed line ({exc.msg})") from None
        take_id, tp = _parse_line(obj, lineno, vocab)
        if not groups or groups[-1][0] != take_id:
            if take_id in last_line:
                raise ValidationError(f"line {lineno}: take {take_id!r} is not contiguous")
            groups.append((take_id, []))
        groups[-1][1].append(tp)
        last_line[take_id] = lineno
    recs = []
    for take_id, tps in groups:
        try:
            recs.append(Recording(take_id, tuple(tps)))
        except ValidationError as exc:
            raise ValidationError(f"take {take_id!r}: {exc}") from None
    return recs


def parse_recording(text: str, vocab: Vocabulary) -> Recording:
    recs = parse_recordings(text, vocab)
    if len(recs) != 1:
        raise ValidationError(f"expected exactly one take, found {len(recs)}")
    return recs[0]


def read_recordings(path: str | os.PathLike, vocab: Vocabulary) -> list[Recording]:
    with open(path, encoding="utf-8") as fh:
        try:
            return parse_recordings(fh.read(), vocab)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


def write_recordings(path: str | os.PathLike, recs: Iterable[Recording], vocab: Vocabulary,
                     with_features: bool = True) -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, "".join(serialize_recording(r, vocab, with_features) for r in recs))
