"""Bimodal relation prediction, teacher-forced training and autoregressive inference.

Training builds every memory window from ground-truth graphs. Inference
walks a recording in order and builds each window from the model's own
earlier predictions; the ground-truth relations are never read.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .encoders import (
    EncoderConfig,
    GraphBatch,
    encode_graph_batch,
    feature_table,
    fuse_batch,
    init_fusion,
    init_graph_encoder,
    init_lbt,
    lbt_project,
    lbt_timepoint_feature,
    make_fusion_batch,
    make_graph_batch,
)
from .evaluation import macro_f1
from .memory import UNKNOWN, AugmentationConfig, MemoryMode, augment_window, build_window
from .numerics import ParamStore, Tensor
from .sgcore import NO_MAIN_ACTION, Recording, SceneGraph, Vocabulary, main_action

log = logging.getLogger(__name__)

VARIANTS = ("memory", "visual_only", "lbt")
VISUAL_PREFIXES = ("visual.", "relation.")


@dataclass
class TrainConfig:
    variant: str = "memory"
    memory_mode: str = "longshort"
    stride: int = 5
    long_anchor: str = "toi"
    use_toi: bool = True
    use_multitask: bool = True
    use_augmentation: bool = True
    end_to_end: bool = True
    aug_p: float = 0.5
    aug_short_fraction: float = 0.5
    aug_long_fraction: float = 0.5
    aug_boundary: int | None = None
    aug_contiguous: bool = False
    multitask_weight: float = 0.5
    lr: float = 1e-3
    epochs: int = 60
    patience: int = 10
    batch_size: int = 32
    clip_norm: float = 5.0
    seed: int = 0
    hidden: int = 80
    graph_layers: int = 2
    fusion_layers: int = 2
    heads: int = 1
    edge_values: bool = True
    init_from: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.multitask_weight < 0:
            raise ValueError("multitask weight must be >= 0")
        MemoryMode(self.memory_mode, self.stride, self.long_anchor)

    @property
    def mode(self) -> MemoryMode:
        return MemoryMode(self.memory_mode, self.stride, self.long_anchor)

    @property
    def augmentation(self) -> AugmentationConfig:
        b = self.aug_boundary if self.aug_boundary is not None else self.stride
        return AugmentationConfig(self.aug_p, self.aug_short_fraction, self.aug_long_fraction, b,
                                  self.aug_contiguous)

    @property
    def visual_only(self) -> bool:
        return self.variant == "visual_only"

    @property
    def lbt_baseline(self) -> bool:
        return self.variant == "lbt"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    store: ParamStore
    enc: EncoderConfig
    vocab: Vocabulary
    cfg: TrainConfig

    @property
    def n_actions(self) -> int:
        return self.vocab.n_predicates + 1

    def meta(self) -> dict:
        return {"vocab": self.vocab.to_dict(), "encoder": dataclasses.asdict(self.enc),
                "train": self.cfg.to_dict()}


def build_model(vocab: Vocabulary, feature_dim: int, cfg: TrainConfig) -> Model:
    enc = EncoderConfig(vocab.n_entities, vocab.n_predicates, feature_dim, cfg.hidden,
                        cfg.graph_layers, cfg.fusion_layers, cfg.heads, edge_values=cfg.edge_values)
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    d = enc.hidden
    store.add("visual.proj.w", rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(feature_dim, d)))
    store.add("visual.proj.b", np.zeros(d))
    store.add("relation.fc1.w", rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, d)))
    store.add("relation.fc1.b", np.zeros(d))
    store.add("relation.fc2.w", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, vocab.n_predicates)))
    store.add("relation.fc2.b", np.zeros(vocab.n_predicates))
    store.add("action.fc.w", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, vocab.n_predicates + 1)))
    store.add("action.fc.b", np.zeros(vocab.n_predicates + 1))
    init_graph_encoder(store, enc, rng)
    init_fusion(store, enc, rng)
    init_lbt(store, enc, rng)
    return Model(store, enc, vocab, cfg)


def model_from_checkpoint(path: str) -> Model:
    arrays, meta = nx.read_checkpoint(path)
    try:
        vocab = Vocabulary.from_dict(meta["vocab"])
        enc = EncoderConfig(**meta["encoder"])
        cfg = TrainConfig.from_dict(meta["train"])
    except (KeyError, TypeError) as exc:
        raise nx.CheckpointError(f"{path}: checkpoint metadata incomplete ({exc})") from None
    model = build_model(vocab, enc.feature_dim, cfg)
    if model.enc != enc:
        raise nx.CheckpointError(f"{path}: encoder configuration does not match its training config")
    nx.load_into(model.store, arrays, strict=True)
    return model


def save_model(model: Model, path: str) -> None:
    nx.save_checkpoint(model.store, path, model.meta())


# ---------------------------------------------------------------- heads


def relation_logits(model: Model, pair_feats: Tensor, memory: Tensor) -> Tensor:
    """Per-pair predicate logits from ``concat(visual projection, memory)``."""
    P = model.store.params
    if pair_feats.shape[1:] != (model.enc.feature_dim,):
        raise nx.ShapeError(f"pair features {pair_feats.shape} do not match feature dim {model.enc.feature_dim}")
    if memory.shape != (pair_feats.shape[0], model.enc.hidden):
        raise nx.ShapeError(f"memory rows {memory.shape} vs {pair_feats.shape[0]} pairs of dim {model.enc.hidden}")
    vis = nx.linear(pair_feats, P["visual.proj.w"], P["visual.proj.b"])
    h = nx.gelu(nx.linear(nx.concat([vis, memory], axis=1), P["relation.fc1.w"], P["relation.fc1.b"]))
    return nx.linear(h, P["relation.fc2.w"], P["relation.fc2.b"])


def action_logits(model: Model, memory: Tensor) -> Tensor:
    P = model.store.params
    return nx.linear(memory, P["action.fc.w"], P["action.fc.b"])


def predict_timepoint(pair_features: np.ndarray, memory_rep: Tensor, model: Model) -> Tensor:
    """Logits ``[n_pairs, n_predicates]`` for one timepoint.

    The visual-only variant ignores ``memory_rep`` and feeds zeros instead.
    """
    d = model.enc.hidden
    pf = np.asarray(pair_features, dtype=np.float64).reshape(-1, model.enc.feature_dim)
    n = pf.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, model.vocab.n_predicates)))
    if memory_rep.shape != (d,):
        raise nx.ShapeError(f"memory representation must have shape ({d},), got {memory_rep.shape}")
    if model.cfg.visual_only:
        mem = Tensor(np.zeros((n, d)))
    else:
        mem = nx.embedding_lookup(nx.reshape(memory_rep, (1, d)), np.zeros(n, dtype=np.int64))
    return relation_logits(model, Tensor(pf), mem)


def assemble_graph(logits: np.ndarray, entities: Sequence[tuple[int, int]], none_index: int) -> SceneGraph:
    """Argmax per ordered pair (lowest index wins ties); none drops the pair."""
    ids = sorted(i for i, _ in entities)
    pairs = [(a, b) for a in ids for b in ids if a != b]
    logits = np.asarray(logits)
    if logits.shape[0] != len(pairs):
        raise nx.ShapeError(f"{logits.shape[0]} logit rows for {len(pairs)} ordered pairs")
    rels = []
    for (s, o), row in zip(pairs, logits):
        p = int(np.argmax(row))
        if p != none_index:
            rels.append((s, p, o))
    return SceneGraph(tuple(entities), tuple(rels))


def pair_targets(graph: SceneGraph, none_index: int) -> np.ndarray:
    rmap = graph.relation_map()
    return np.array([rmap.get(pr, none_index) for pr in graph.ordered_pairs()], dtype=np.int64)


def action_target(graph: SceneGraph, vocab: Vocabulary) -> int:
    a = main_action(graph, vocab)
    return vocab.n_predicates if a == NO_MAIN_ACTION else a


def multitask_loss(rel_logits: Tensor, gt_graph: SceneGraph | np.ndarray, act_logits: Tensor | None,
                   gt_main_action: int | np.ndarray | None, weight: float, vocab: Vocabulary) -> Tensor:
    """Mean per-pair cross-entropy plus ``weight`` times the main-action cross-entropy.

    ``gt_graph`` may also be a precomputed per-pair target array; a main
    action of ``NO_MAIN_ACTION`` maps to the extra last action class.
    """
    if isinstance(gt_graph, SceneGraph):
        targets = pair_targets(gt_graph, vocab.none_index)
    else:
        targets = np.asarray(gt_graph, dtype=np.int64)
    loss = nx.cross_entropy(rel_logits, targets)
    if weight > 0 and act_logits is not None:
        tgt = np.atleast_1d(np.asarray(gt_main_action, dtype=np.int64)).copy()
        tgt[tgt == NO_MAIN_ACTION] = vocab.n_predicates
        logits = act_logits if act_logits.ndim == 2 else nx.reshape(act_logits, (1, act_logits.shape[0]))
        loss = nx.add(loss, nx.scale(nx.cross_entropy(logits, tgt), weight))
    return loss


# ---------------------------------------------------------------- prepared data


@dataclass
class PreparedRecording:
    rec: Recording
    graphs: list[SceneGraph]
    feats: list[np.ndarray]
    targets: list[np.ndarray]
    actions: np.ndarray
    lbt: np.ndarray
    graph_batch: GraphBatch

    def __len__(self) -> int:
        return len(self.graphs)


def prepare(rec: Recording, vocab: Vocabulary, feature_dim: int) -> PreparedRecording:
    graphs = rec.graphs
    feats = []
    for tp in rec.timepoints:
        fm = tp.feature_matrix()
        if fm.size == 0:
            fm = np.zeros((len(tp.graph.ordered_pairs()), feature_dim))
        if fm.shape[1] != feature_dim:
            raise ValueError(f"take {rec.take_id!r} t={tp.t}: feature dim {fm.shape[1]} != {feature_dim}")
        feats.append(fm)
    targets = [pair_targets(g, vocab.none_index) for g in graphs]
    actions = np.array([action_target(g, vocab) for g in graphs], dtype=np.int64)
    lbt = np.stack([lbt_timepoint_feature(f, feature_dim) for f in feats]) if feats else np.zeros((0, feature_dim))
    return PreparedRecording(rec, graphs, feats, targets, actions, lbt, make_graph_batch(graphs, vocab.none_index))


def _take_graphs(batch: GraphBatch, rows: Sequence[int]) -> GraphBatch:
    rows = np.asarray(rows, dtype=np.int64)
    return GraphBatch(batch.node_cls[rows], batch.node_mask[rows], batch.edge_pred[rows], batch.edge_mask[rows])


# ---------------------------------------------------------------- training


def batch_loss(model: Model, prep: PreparedRecording, tois: Sequence[int],
               rng: np.random.Generator | None, teacher_graphs: Sequence | None = None) -> Tensor:
    """Loss over a set of timepoints of one recording, memory from ground truth.

    ``rng`` drives memory augmentation; pass ``None`` to disable it.
    """
    cfg = model.cfg
    d = model.enc.hidden
    B = len(tois)
    graphs = prep.graphs if teacher_graphs is None else teacher_graphs
    if cfg.visual_only:
        mem = Tensor(np.zeros((B, d)))
    else:
        windows = [build_window(graphs, cfg.mode, T) for T in tois]
        if rng is not None and cfg.use_augmentation:
            aug = cfg.augmentation
            windows = [augment_window(w, aug, rng) for w in windows]
        needed = sorted({e.t for w in windows for e in w.entries if e.payload is not UNKNOWN})
        row_of = {t: k for k, t in enumerate(needed)}
        if cfg.lbt_baseline:
            feats = lbt_project(model.store, prep.lbt[np.asarray(needed, dtype=np.int64)])
        elif needed:
            feats = encode_graph_batch(model.store, model.enc, _take_graphs(prep.graph_batch, needed))
        else:
            feats = Tensor(np.zeros((0, d)))
        table = feature_table(model.store, feats)
        unk = len(needed)
        rows = [[(unk if e.payload is UNKNOWN else row_of[e.t], e.toi_id) for e in w.entries] for w in windows]
        mem, _ = fuse_batch(model.store, model.enc, table, make_fusion_batch(rows), cfg.use_toi)
    owners = np.concatenate([np.full(len(prep.targets[T]), b, dtype=np.int64) for b, T in enumerate(tois)])
    pf = np.concatenate([prep.feats[T] for T in tois], axis=0)
    tg = np.concatenate([prep.targets[T] for T in tois])
    if len(tg) == 0:
        rel_loss = Tensor(0.0)
    else:
        rel = relation_logits(model, Tensor(pf), nx.embedding_lookup(mem, owners))
        rel_loss = nx.cross_entropy(rel, tg)
    if cfg.use_multitask and not cfg.visual_only and cfg.multitask_weight > 0:
        act = nx.cross_entropy(action_logits(model, mem), prep.actions[list(tois)])
        return nx.add(rel_loss, nx.scale(act, cfg.multitask_weight))
    return rel_loss


def _clip(store: ParamStore, max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = store.grad_norm()
    if norm > max_norm:
        for t in store.params.values():
            t.grad *= max_norm / norm


@dataclass
class TrainResult:
    model: Model
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float | None = None


def _epoch_batches(preps: Sequence[PreparedRecording], batch_size: int,
                   rng: np.random.Generator) -> list[tuple[int, list[int]]]:
    out = []
    for r, p in enumerate(preps):
        order = rng.permutation(len(p))
        for i in range(0, len(order), batch_size):
            out.append((r, sorted(int(x) for x in order[i:i + batch_size])))
    return [out[i] for i in rng.permutation(len(out))]


def train(dataset: Sequence[Recording], cfg: TrainConfig, vocab: Vocabulary,
          val: Sequence[Recording] = (), on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Teacher-forced training with Adam and early stopping on validation macro F1.

    Training stops after ``cfg.patience`` epochs without a new best score and
    restores the best weights. On ties the earlier epoch wins. Without a
    validation set every epoch runs and the final weights are kept.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    feature_dim = dataset[0].feature_dim
    if feature_dim == 0:
        raise ValueError("training recordings carry no pair features")
    model = build_model(vocab, feature_dim, cfg)
    if cfg.init_from:
        arrays, _ = nx.read_checkpoint(cfg.init_from)
        picked = {k: v for k, v in arrays.items() if k.startswith(VISUAL_PREFIXES)}
        nx.load_into(model.store, picked, strict=False)
    if not cfg.end_to_end:
        model.store.set_trainable("visual.", False)
    preps = [prepare(r, vocab, feature_dim) for r in dataset]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    result = TrainResult(model)
    best_snap = None
    since_best = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for r, tois in _epoch_batches(preps, cfg.batch_size, rng):
            model.store.zero_grad()
            loss = batch_loss(model, preps[r], tois, rng)
            loss.backward()
            _clip(model.store, cfg.clip_norm)
            nx.adam_step(model.store, cfg.lr)
            losses.append(loss.item())
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "seconds": time.perf_counter() - t0}
        if val:
            preds = [g for rec in val for g in infer_sequence(rec, model)]
            gts = [g for rec in val for g in rec.graphs]
            entry["val_macro_f1"] = macro_f1(preds, gts, vocab).macro_f1
            if result.best_val is None or entry["val_macro_f1"] > result.best_val:
                result.best_val = entry["val_macro_f1"]
                result.best_epoch = epoch
                best_snap = model.store.snapshot()
                since_best = 0
            else:
                since_best += 1
        result.log.append(entry)
        log.info("epoch %d loss %.4f%s", epoch, entry["train_loss"],
                 f" val_f1 {entry['val_macro_f1']:.4f}" if val else "")
        if on_epoch:
            on_epoch(entry)
        if val and since_best >= cfg.patience:
            break
    if best_snap is not None:
        model.store.restore(best_snap)
    else:
        result.best_epoch = len(result.log) - 1
    return result


# ---------------------------------------------------------------- inference


def infer_sequence(recording: Recording, model: Model, mode: MemoryMode | None = None,
                   trace: list | None = None) -> list[SceneGraph]:
    """Predict every timepoint in order, feeding earlier predictions back as memory.

    Only entity lists and pair features are read from ``recording``. When
    ``trace`` is a list, one record per fusion call is appended with the
    window timepoints, ToI ids and the summary attention of every layer.
    """
    cfg = model.cfg
    mode = mode or cfg.mode
    vocab = model.vocab
    d = model.enc.hidden
    fdim = model.enc.feature_dim
    preds: list[SceneGraph] = []
    with nx.no_grad():
        rows_cache: list[np.ndarray] = []
        lbt_rows = None
        if cfg.lbt_baseline and len(recording):
            feats = [tp.feature_matrix() for tp in recording.timepoints]
            lbt = np.stack([lbt_timepoint_feature(f, fdim) for f in feats])
            lbt_rows = lbt_project(model.store, lbt).data
        for tp in recording.timepoints:
            t = tp.t
            if cfg.visual_only:
                mem = Tensor(np.zeros(d))
            else:
                window = build_window(preds, mode, t)
                if cfg.lbt_baseline:
                    table_np = lbt_rows[:t]
                else:
                    table_np = np.array(rows_cache).reshape(t, d)
                table = feature_table(model.store, Tensor(table_np))
                rows = [[(e.t, e.toi_id) for e in window.entries]]
                mem_b, attn = fuse_batch(model.store, model.enc, table, make_fusion_batch(rows), cfg.use_toi)
                mem = nx.reshape(mem_b, (d,))
                if trace is not None:
                    trace.append({"t": t, "window": window.timepoints, "toi_ids": window.toi_ids,
                                  "attention": [a[0] for a in attn]})
            fm = tp.feature_matrix()
            if fm.size == 0:
                fm = np.zeros((len(tp.graph.ordered_pairs()), fdim))
            logits = predict_timepoint(fm, mem, model)
            graph = assemble_graph(logits.data, tp.graph.entities, vocab.none_index)
            preds.append(graph)
            if not cfg.visual_only and not cfg.lbt_baseline:
                vec = encode_graph_batch(model.store, model.enc, make_graph_batch([graph], vocab.none_index))
                rows_cache.append(vec.data[0])
    return preds


def infer_recordings(recs: Sequence[Recording], model: Model, mode: MemoryMode | None = None) -> list[Recording]:
    out = []
    for rec in recs:
        out.append(rec.with_graphs(infer_sequence(rec, model, mode), keep_features=False))
    return out
