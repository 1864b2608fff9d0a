"""Phase-structured synthetic recordings.

A recording is a walk through a Markov chain of surgical phases. Each phase
fixes the head-surgeon -> patient predicate; side relations switch on and
off at a configurable churn rate. Every ordered entity pair gets a visual
feature vector drawn around the prototype of its ground-truth predicate.
Predicates listed in ``confusable_pairs`` share one prototype, so only the
phase history can tell them apart. Optional pauses interrupt a phase's main
action for a few timepoints; after a pause longer than the short memory the
phase has to be recovered from older history.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .io_utils import atomic_write_text
from .sgcore import Recording, SceneGraph, Timepoint, Vocabulary, serialize_recording


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Phase:
    name: str
    main_action: str
    duration: tuple[int, int]
    successors: Mapping[str, float] = field(default_factory=dict)
    side_rates: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SideRelation:
    subject: str
    predicate: str
    object: str
    rate: float


@dataclass(frozen=True)
class PhaseModel:
    phases: tuple[Phase, ...]
    start: str
    side_relations: tuple[SideRelation, ...]
    required_entities: tuple[str, ...]
    optional_entities: tuple[str, ...]
    entity_count: tuple[int, int] = (3, 8)
    confusable_pairs: tuple[tuple[str, str], ...] = ()
    feature_noise_sigma: float = 1.0
    feature_dim: int = 16
    prototype_scale: float = 1.0
    prototype_seed: int = 0
    side_churn: float = 0.05
    length_range: tuple[int, int] = (60, 120)
    max_attempts: int = 1000
    pause_rate: float = 0.0
    pause_duration: tuple[int, int] = (1, 1)
    pause_action: str | None = None

    def phase(self, name: str) -> Phase:
        for p in self.phases:
            if p.name == name:
                return p
        raise ScenarioError(f"unknown phase {name!r}")

    def validate(self, vocab: Vocabulary) -> None:
        names = [p.name for p in self.phases]
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate phase names")
        if self.start not in names:
            raise ScenarioError(f"start phase {self.start!r} not defined")
        for p in self.phases:
            lo, hi = p.duration
            if lo < 1 or hi < lo:
                raise ScenarioError(f"phase {p.name!r}: bad duration range {p.duration}")
            vocab.predicate_index(p.main_action)
            if p.successors:
                if abs(sum(p.successors.values()) - 1.0) > 1e-9:
                    raise ScenarioError(f"phase {p.name!r}: transition probabilities must sum to 1")
                for s in p.successors:
                    if s not in names:
                        raise ScenarioError(f"phase {p.name!r}: unknown successor {s!r}")
        if not 0.0 <= self.pause_rate <= 1.0:
            raise ScenarioError("pause_rate must lie in [0, 1]")
        if self.pause_rate > 0:
            if self.pause_action is None:
                raise ScenarioError("pause_rate > 0 needs a pause_action")
            vocab.predicate_index(self.pause_action)
            if self.pause_duration[0] < 1 or self.pause_duration[1] < self.pause_duration[0]:
                raise ScenarioError(f"bad pause duration range {self.pause_duration}")
        for a, b in self.confusable_pairs:
            if a == b:
                raise ScenarioError(f"confusable pair ({a}, {b}) must name distinct predicates")
            vocab.predicate_index(a)
            vocab.predicate_index(b)
        for r in self.side_relations:
            vocab.entity_index(r.subject)
            vocab.entity_index(r.object)
            vocab.predicate_index(r.predicate)
        for e in self.required_entities + self.optional_entities:
            vocab.entity_index(e)
        for role in (vocab.head_surgeon_class, vocab.patient_class):
            if role not in self.required_entities:
                raise ScenarioError(f"{role!r} must be a required entity")
        if len(self.required_entities) > self.entity_count[1]:
            raise ScenarioError("more required entities than the maximum entity count")

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "phases": [{"name": p.name, "main_action": p.main_action, "duration": list(p.duration),
                        "successors": dict(p.successors), "side_rates": dict(p.side_rates)}
                       for p in self.phases],
            "side_relations": [{"subject": r.subject, "predicate": r.predicate, "object": r.object,
                                "rate": r.rate} for r in self.side_relations],
            "required_entities": list(self.required_entities),
            "optional_entities": list(self.optional_entities),
            "entity_count": list(self.entity_count),
            "confusable_pairs": [list(p) for p in self.confusable_pairs],
            "feature_noise_sigma": self.feature_noise_sigma,
            "feature_dim": self.feature_dim,
            "prototype_scale": self.prototype_scale,
            "prototype_seed": self.prototype_seed,
            "side_churn": self.side_churn,
            "length_range": list(self.length_range),
            "max_attempts": self.max_attempts,
            "pause_rate": self.pause_rate,
            "pause_duration": list(self.pause_duration),
            "pause_action": self.pause_action,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhaseModel":
        try:
            phases = tuple(Phase(p["name"], p["main_action"], tuple(p["duration"]),
                                 dict(p.get("successors", {})), dict(p.get("side_rates", {})))
                           for p in d["phases"])
            sides = tuple(SideRelation(r["subject"], r["predicate"], r["object"], float(r["rate"]))
                          for r in d.get("side_relations", []))
            return cls(
                phases=phases,
                start=d["start"],
                side_relations=sides,
                required_entities=tuple(d["required_entities"]),
                optional_entities=tuple(d.get("optional_entities", [])),
                entity_count=tuple(d.get("entity_count", (3, 8))),
                confusable_pairs=tuple(tuple(p) for p in d.get("confusable_pairs", [])),
                feature_noise_sigma=float(d.get("feature_noise_sigma", 1.0)),
                feature_dim=int(d.get("feature_dim", 16)),
                prototype_scale=float(d.get("prototype_scale", 1.0)),
                prototype_seed=int(d.get("prototype_seed", 0)),
                side_churn=float(d.get("side_churn", 0.05)),
                length_range=tuple(d.get("length_range", (60, 120))),
                max_attempts=int(d.get("max_attempts", 1000)),
                pause_rate=float(d.get("pause_rate", 0.0)),
                pause_duration=tuple(d.get("pause_duration", (1, 1))),
                pause_action=d.get("pause_action"),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario missing key {exc.args[0]!r}") from None


def load_scenario(path: str | os.PathLike) -> PhaseModel:
    with open(path, encoding="utf-8") as fh:
        return PhaseModel.from_dict(json.load(fh))


def default_scenario() -> PhaseModel:
    text = resources.files("memsg.data").joinpath("default_scenario.json").read_text("utf-8")
    return PhaseModel.from_dict(json.loads(text))


class _Generator:
    def __init__(self, model: PhaseModel, vocab: Vocabulary):
        model.validate(vocab)
        self.model = model
        self.vocab = vocab
        group = {p: p for p in vocab.predicate_classes}
        for a, b in model.confusable_pairs:
            group[b] = group[a]
        prng = np.random.default_rng(model.prototype_seed)
        protos = {}
        for p in vocab.predicate_classes:
            g = group[p]
            if g not in protos:
                protos[g] = model.prototype_scale * prng.normal(size=model.feature_dim)
        self.prototypes = {p: protos[group[p]] for p in vocab.predicate_classes}

    def sample_feature(self, predicate: int, rng: np.random.Generator) -> np.ndarray:
        proto = self.prototypes[self.vocab.predicate_classes[predicate]]
        return proto + self.model.feature_noise_sigma * rng.normal(size=proto.shape)

    def phase_path(self, rng: np.random.Generator) -> list[tuple[Phase, int]]:
        m = self.model
        lo, hi = m.length_range
        for _ in range(m.max_attempts):
            path, total = [], 0
            cur = m.phase(m.start)
            while True:
                dur = int(rng.integers(cur.duration[0], cur.duration[1] + 1))
                path.append((cur, dur))
                total += dur
                if not cur.successors or total > hi:
                    break
                names = list(cur.successors)
                probs = np.array([cur.successors[n] for n in names])
                cur = m.phase(names[int(rng.choice(len(names), p=probs))])
            if lo <= total <= hi and not path[-1][0].successors:
                return path
        raise ScenarioError(f"could not sample a phase path with length in {m.length_range}")

    def main_actions(self, phase: Phase, dur: int, rng: np.random.Generator) -> list[int]:
        """Per-timepoint head-surgeon predicate for one phase, pauses included.

        A pause never touches the first or last timepoint of a phase, so the
        phase is always visible on both sides of it.
        """
        m = self.model
        main = self.vocab.predicate_index(phase.main_action)
        out = [main] * dur
        if m.pause_rate <= 0:
            return out
        pause = self.vocab.predicate_index(m.pause_action)
        i = 1
        while i < dur - 1:
            if rng.random() < m.pause_rate:
                n = int(rng.integers(m.pause_duration[0], m.pause_duration[1] + 1))
                n = min(n, dur - 1 - i)
                out[i:i + n] = [pause] * n
                i += n + 1
            else:
                i += 1
        return out

    def entities(self, rng: np.random.Generator) -> list[tuple[int, int]]:
        m = self.model
        lo, hi = m.entity_count
        lo = max(lo, len(m.required_entities))
        hi = min(hi, len(m.required_entities) + len(m.optional_entities))
        n = int(rng.integers(lo, hi + 1))
        extra = list(rng.permutation(len(m.optional_entities))[: n - len(m.required_entities)])
        names = list(m.required_entities) + [m.optional_entities[i] for i in sorted(extra)]
        return [(i, self.vocab.entity_index(c)) for i, c in enumerate(names)]

    def recording(self, seed: int, take_id: str | None = None) -> Recording:
        m, v = self.model, self.vocab
        rng = np.random.default_rng(seed)
        ents = self.entities(rng)
        path = self.phase_path(rng)
        by_class: dict[str, int] = {}
        for eid, cls in ents:
            by_class.setdefault(v.entity_classes[cls], eid)
        hs, pat = by_class[v.head_surgeon_class], by_class[v.patient_class]
        sides = [(r, by_class[r.subject], by_class[r.object]) for r in m.side_relations
                 if r.subject in by_class and r.object in by_class and (by_class[r.subject], by_class[r.object]) != (hs, pat)]
        first = path[0][0]
        state = [bool(rng.random() < first.side_rates.get(r.predicate, r.rate)) for r, _, _ in sides]
        tps = []
        t = 0
        pairs = [(a, b) for a, _ in ents for b, _ in ents if a != b]
        for phase, dur in path:
            for main in self.main_actions(phase, dur, rng):
                if t > 0:
                    for k, (r, _, _) in enumerate(sides):
                        if rng.random() < m.side_churn:
                            state[k] = bool(rng.random() < phase.side_rates.get(r.predicate, r.rate))
                rels = [(hs, main, pat)]
                seen = {(hs, pat)}
                for on, (r, s, o) in zip(state, sides):
                    if on and (s, o) not in seen:
                        rels.append((s, v.predicate_index(r.predicate), o))
                        seen.add((s, o))
                graph = SceneGraph(tuple(ents), tuple(rels))
                rmap = graph.relation_map()
                feats = {pr: self.sample_feature(rmap.get(pr, v.none_index), rng) for pr in pairs}
                tps.append(Timepoint(t, graph, feats))
                t += 1
        return Recording(take_id or f"take_{seed}", tuple(tps))


def generate_recording(model: PhaseModel, vocab: Vocabulary, seed: int, take_id: str | None = None) -> Recording:
    return _Generator(model, vocab).recording(seed, take_id)


def phase_sequence(model: PhaseModel, vocab: Vocabulary, seed: int) -> list[tuple[str, int]]:
    """The (phase name, duration) path a given seed produces."""
    gen = _Generator(model, vocab)
    rng = np.random.default_rng(seed)
    gen.entities(rng)
    return [(p.name, d) for p, d in gen.phase_path(rng)]


def prototypes(model: PhaseModel, vocab: Vocabulary) -> dict[str, np.ndarray]:
    return dict(_Generator(model, vocab).prototypes)


def sample_features(model: PhaseModel, vocab: Vocabulary, predicate: str, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    gen = _Generator(model, vocab)
    idx = vocab.predicate_index(predicate)
    return np.stack([gen.sample_feature(idx, rng) for _ in range(n)])


SPLITS = ("train", "val", "test")


def split_seeds(seed: int, counts: Mapping[str, int]) -> dict[str, list[int]]:
    """Disjoint per-recording seeds for each split, derived from one master seed."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(SPLITS))
    out = {}
    for split, child in zip(SPLITS, children):
        n = counts.get(split, 0)
        out[split] = [int(x) for x in child.generate_state(n, dtype=np.uint32)] if n else []
    return out


def make_benchmark(model: PhaseModel, vocab: Vocabulary, out_dir: str | os.PathLike,
                   n_train: int, n_val: int, n_test: int, seed: int) -> dict:
    """Write one recording file per take plus ``manifest.json`` and ``vocab.json``."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for k, n in counts.items():
        if n < 1:
            raise ValueError(f"{k} count must be >= 1")
    seeds = split_seeds(seed, counts)
    gen = _Generator(model, vocab)
    os.makedirs(out_dir, exist_ok=True)
    manifest: dict = {"seed": seed, "splits": {}, "files": {}}
    for split in SPLITS:
        manifest["splits"][split] = []
        for i, s in enumerate(seeds[split]):
            take_id = f"{split}_{i:03d}"
            rec = gen.recording(s, take_id)
            fname = f"{take_id}.jsonl"
            text = serialize_recording(rec, vocab)
            atomic_write_text(os.path.join(out_dir, fname), text)
            manifest["splits"][split].append(fname)
            manifest["files"][fname] = {"take_id": take_id, "seed": s, "length": len(rec),
                                        "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest()}
    atomic_write_text(os.path.join(out_dir, "vocab.json"), json.dumps(vocab.to_dict(), indent=2) + "\n")
    atomic_write_text(os.path.join(out_dir, "scenario.json"), json.dumps(model.to_dict(), indent=2) + "\n")
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def generate_splits(model: PhaseModel, vocab: Vocabulary, n_train: int, n_val: int, n_test: int,
                    seed: int) -> dict[str, list[Recording]]:
    """In-memory equivalent of :func:`make_benchmark`."""
    seeds = split_seeds(seed, {"train": n_train, "val": n_val, "test": n_test})
    gen = _Generator(model, vocab)
    return {split: [gen.recording(s, f"{split}_{i:03d}") for i, s in enumerate(seeds[split])]
            for split in SPLITS}
