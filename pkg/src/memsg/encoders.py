"""Scene-graph encoder, temporal fusion transformer and the LBT timepoint featurizer.

The graph encoder runs full node-to-node self-attention where the logit for
``i -> j`` is shifted by learned projections of the predicate embeddings on
the edges ``i -> j`` and ``j -> i``; the graph vector is the mean node state.
The fusion stack prepends a learned summary token to the memory entries and
reads the memory representation off that token after the last layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .memory import UNKNOWN
from .numerics import ParamStore, Tensor
from .sgcore import SceneGraph


@dataclass(frozen=True)
class EncoderConfig:
    n_entity_classes: int
    n_predicate_classes: int
    feature_dim: int = 16
    hidden: int = 80
    graph_layers: int = 2
    fusion_layers: int = 2
    heads: int = 1
    ff_mult: int = 4
    max_toi: int = 512
    edge_values: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def _init_block(store: ParamStore, prefix: str, d: int, ff: int, rng: np.random.Generator) -> None:
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}.g", np.ones(d))
        store.add(f"{prefix}.{ln}.b", np.zeros(d))
    for w in ("q", "k", "v", "o"):
        store.add(f"{prefix}.{w}.w", _dense(rng, d, d))
        # a key bias only shifts every logit of a row equally; leave it out
        if w != "k":
            store.add(f"{prefix}.{w}.b", np.zeros(d))
    store.add(f"{prefix}.ff1.w", _dense(rng, d, ff))
    store.add(f"{prefix}.ff1.b", np.zeros(ff))
    store.add(f"{prefix}.ff2.w", _dense(rng, ff, d))
    store.add(f"{prefix}.ff2.b", np.zeros(d))


def init_graph_encoder(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d = cfg.hidden
    store.add("graph.node_emb", rng.normal(0.0, 1.0, size=(cfg.n_entity_classes, d)))
    store.add("graph.edge_emb", rng.normal(0.0, 1.0, size=(cfg.n_predicate_classes, d)))
    for i in range(cfg.graph_layers):
        p = f"graph.layer{i}"
        _init_block(store, p, d, cfg.ff_mult * d, rng)
        store.add(f"{p}.edge_out.w", _dense(rng, d, cfg.heads))
        store.add(f"{p}.edge_in.w", _dense(rng, d, cfg.heads))
        if cfg.edge_values:
            store.add(f"{p}.edge_val.w", _dense(rng, d, d))
    store.add("graph.ln_f.g", np.ones(d))
    store.add("graph.ln_f.b", np.zeros(d))


def init_fusion(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d = cfg.hidden
    for i in range(cfg.fusion_layers):
        _init_block(store, f"fusion.layer{i}", d, cfg.ff_mult * d, rng)
    store.add("fusion.toi_emb", rng.normal(0.0, 1.0, size=(cfg.max_toi + 1, d)))
    store.add("fusion.summary", rng.normal(0.0, 1.0, size=d))
    store.add("fusion.unknown", rng.normal(0.0, 1.0, size=d))
    store.add("fusion.empty", rng.normal(0.0, 1.0, size=d))
    store.add("fusion.ln_f.g", np.ones(d))
    store.add("fusion.ln_f.b", np.zeros(d))


def init_lbt(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    store.add("lbt.proj.w", _dense(rng, cfg.feature_dim, cfg.hidden))
    store.add("lbt.proj.b", np.zeros(cfg.hidden))


# ---------------------------------------------------------------- shared block


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return nx.transpose(nx.reshape(x, (B, N, heads, d // heads)), (0, 2, 1, 3))


def attention_block(store: ParamStore, prefix: str, x: Tensor, mask: np.ndarray, heads: int,
                    bias: Tensor | None = None,
                    edge_values: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Pre-norm transformer layer over ``x[B, N, d]``.

    ``mask[B, N, N]`` marks which keys each query may attend to. Returns the
    new states and the attention weights ``[B, heads, N, N]``.
    """
    P = store.params
    B, N, d = x.shape
    h = nx.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    q = _split_heads(nx.linear(h, P[f"{prefix}.q.w"], P[f"{prefix}.q.b"]), heads)
    k = _split_heads(nx.linear(h, P[f"{prefix}.k.w"]), heads)
    v = _split_heads(nx.linear(h, P[f"{prefix}.v.w"], P[f"{prefix}.v.b"]), heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // heads))
    if bias is not None:
        scores = nx.add(scores, bias)
    full_mask = np.broadcast_to(mask[:, None, :, :], scores.shape)
    attn = nx.softmax(scores, axis=-1, mask=full_mask)
    ctx = nx.matmul(attn, v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, N, d))
    if edge_values is not None:
        # sum_j a_ij * e_ij, head-averaged weights, as a batched [1 x N] @ [N x d]
        a_mean = nx.reshape(nx.mean(attn, axis=1), (B, N, 1, N))
        ctx = nx.add(ctx, nx.reshape(nx.matmul(a_mean, edge_values), (B, N, d)))
    x = nx.add(x, nx.linear(ctx, P[f"{prefix}.o.w"], P[f"{prefix}.o.b"]))
    h = nx.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = nx.gelu(nx.linear(h, P[f"{prefix}.ff1.w"], P[f"{prefix}.ff1.b"]))
    x = nx.add(x, nx.linear(h, P[f"{prefix}.ff2.w"], P[f"{prefix}.ff2.b"]))
    return x, attn.data


# ---------------------------------------------------------------- graph encoder


@dataclass
class GraphBatch:
    node_cls: np.ndarray   # [B, N] int
    node_mask: np.ndarray  # [B, N] bool
    edge_pred: np.ndarray  # [B, N, N] int, predicate on i -> j
    edge_mask: np.ndarray  # [B, N, N] bool, True where i -> j is a real relation

    @property
    def size(self) -> int:
        return self.node_cls.shape[0]


def make_graph_batch(graphs: Sequence[SceneGraph], none_index: int) -> GraphBatch:
    B = len(graphs)
    N = max([len(g.entities) for g in graphs] + [1])
    node_cls = np.zeros((B, N), dtype=np.int64)
    node_mask = np.zeros((B, N), dtype=bool)
    edge_pred = np.zeros((B, N, N), dtype=np.int64)
    edge_mask = np.zeros((B, N, N), dtype=bool)
    for b, g in enumerate(graphs):
        pos = {}
        for n, (eid, cls) in enumerate(g.entities):
            pos[eid] = n
            node_cls[b, n] = cls
            node_mask[b, n] = True
        for s, p, o in g.relations:
            if p == none_index:
                continue
            edge_pred[b, pos[s], pos[o]] = p
            edge_mask[b, pos[s], pos[o]] = True
    return GraphBatch(node_cls, node_mask, edge_pred, edge_mask)


def encode_graph_batch(store: ParamStore, cfg: EncoderConfig, batch: GraphBatch) -> Tensor:
    """Feature vector ``[B, d]`` for every graph in the batch."""
    P = store.params
    B, N = batch.node_cls.shape
    H = cfg.heads
    x = nx.embedding_lookup(P["graph.node_emb"], batch.node_cls)
    attn_mask = np.broadcast_to(batch.node_mask[:, None, :], (B, N, N))
    in_pred = np.swapaxes(batch.edge_pred, 1, 2)
    in_mask = np.swapaxes(batch.edge_mask, 1, 2)
    out_keep = np.broadcast_to(batch.edge_mask[..., None], (B, N, N, H))
    in_keep = np.broadcast_to(in_mask[..., None], (B, N, N, H))
    edge_emb = P["graph.edge_emb"]
    for i in range(cfg.graph_layers):
        p = f"graph.layer{i}"
        b_out = nx.mask_fill(nx.embedding_lookup(nx.matmul(edge_emb, P[f"{p}.edge_out.w"]), batch.edge_pred), out_keep)
        b_in = nx.mask_fill(nx.embedding_lookup(nx.matmul(edge_emb, P[f"{p}.edge_in.w"]), in_pred), in_keep)
        bias = nx.transpose(nx.add(b_out, b_in), (0, 3, 1, 2))
        ev = None
        if cfg.edge_values:
            vals = nx.embedding_lookup(nx.matmul(edge_emb, P[f"{p}.edge_val.w"]), batch.edge_pred)
            ev = nx.mask_fill(vals, np.broadcast_to(batch.edge_mask[..., None], vals.shape))
        x, _ = attention_block(store, p, x, attn_mask, H, bias=bias, edge_values=ev)
    x = nx.layer_norm(x, P["graph.ln_f.g"], P["graph.ln_f.b"])
    return nx.masked_mean(x, batch.node_mask)


def encode_graph(graph: SceneGraph, store: ParamStore, cfg: EncoderConfig, none_index: int = -1) -> Tensor:
    """Feature vector ``[d]`` of one scene graph (zero vector for an empty graph)."""
    out = encode_graph_batch(store, cfg, make_graph_batch([graph], none_index))
    return nx.reshape(out, (cfg.hidden,))


# ---------------------------------------------------------------- fusion


@dataclass
class FusionBatch:
    entry_idx: np.ndarray   # [B, W] rows of the feature table
    entry_mask: np.ndarray  # [B, W] bool
    toi_ids: np.ndarray     # [B, W] int (>= 1 where valid)

    @property
    def size(self) -> int:
        return self.entry_idx.shape[0]


def make_fusion_batch(rows: Sequence[Sequence[tuple[int, int]]]) -> FusionBatch:
    """``rows[b]`` lists ``(table_row, toi_id)`` for the entries of window ``b``."""
    B = len(rows)
    W = max([len(r) for r in rows] + [0])
    idx = np.zeros((B, W), dtype=np.int64)
    mask = np.zeros((B, W), dtype=bool)
    toi = np.ones((B, W), dtype=np.int64)
    for b, r in enumerate(rows):
        for w, (row, tid) in enumerate(r):
            if tid < 1:
                raise ValueError(f"ToI ids must be positive, got {tid}")
            idx[b, w] = row
            mask[b, w] = True
            toi[b, w] = tid
    return FusionBatch(idx, mask, toi)


def fuse_batch(store: ParamStore, cfg: EncoderConfig, table: Tensor, batch: FusionBatch,
               use_toi: bool = True) -> tuple[Tensor, list[np.ndarray]]:
    """Memory representations ``[B, d]`` plus the summary token's attention
    over entries for every layer (each ``[B, heads, W]``).

    ``table`` holds one feature row per distinct payload; UNKNOWN entries
    point at a row holding the learned unknown embedding.
    """
    P = store.params
    d = cfg.hidden
    B, W = batch.entry_idx.shape
    empty = ~batch.entry_mask.any(axis=1)
    empty_row = nx.reshape(P["fusion.empty"], (1, d))
    if W == 0:
        return nx.embedding_lookup(empty_row, np.zeros(B, dtype=np.int64)), [
            np.zeros((B, cfg.heads, 0)) for _ in range(cfg.fusion_layers)]
    x = nx.embedding_lookup(table, batch.entry_idx)
    if use_toi:
        tid = np.minimum(batch.toi_ids, cfg.max_toi)
        x = nx.add(x, nx.embedding_lookup(P["fusion.toi_emb"], tid))
    summary = nx.embedding_lookup(nx.reshape(P["fusion.summary"], (1, d)), np.zeros((B, 1), dtype=np.int64))
    x = nx.concat([summary, x], axis=1)
    mask = np.ones((B, W + 1, W + 1), dtype=bool)
    mask[:, :, 1:] = batch.entry_mask[:, None, :]
    mask[:, 0, 0] = False  # summary reads entries only
    records = []
    for i in range(cfg.fusion_layers):
        x, attn = attention_block(store, f"fusion.layer{i}", x, mask, cfg.heads)
        records.append(attn[:, :, 0, 1:].copy())
    out = nx.layer_norm(nx.getitem(x, (slice(None), 0)), P["fusion.ln_f.g"], P["fusion.ln_f.b"])
    pick = np.where(empty, B, np.arange(B))
    return nx.embedding_lookup(nx.concat([out, empty_row], axis=0), pick), records


def feature_table(store: ParamStore, feats: Tensor) -> Tensor:
    """Append the UNKNOWN row; its index is ``feats.shape[0]``."""
    d = store["fusion.unknown"].shape[0]
    return nx.concat([feats, nx.reshape(store["fusion.unknown"], (1, d))], axis=0)


def fuse_memory(entries: Sequence[tuple[Tensor | object, int]], store: ParamStore, cfg: EncoderConfig,
                use_toi: bool = True) -> tuple[Tensor, list[np.ndarray]]:
    """Fuse one window of ``(feature [d] or UNKNOWN, toi_id)`` entries.

    Returns the memory representation ``[d]`` and, per layer, the summary
    attention over entries with shape ``[heads, len(entries)]``.
    """
    d = cfg.hidden
    for _, tid in entries:
        if tid < 1:
            raise ValueError(f"ToI ids must be positive, got {tid}")
    known = [f for f, _ in entries if f is not UNKNOWN]
    feats = nx.stack_rows(known) if known else Tensor(np.zeros((0, d)))
    table = feature_table(store, feats)
    rows, k = [], 0
    for f, tid in entries:
        if f is UNKNOWN:
            rows.append((len(known), tid))
        else:
            rows.append((k, tid))
            k += 1
    mem, recs = fuse_batch(store, cfg, table, make_fusion_batch([rows]), use_toi)
    return nx.reshape(mem, (d,)), [r[0] for r in recs]


# ---------------------------------------------------------------- LBT baseline


def lbt_timepoint_feature(pair_features: np.ndarray | Sequence[np.ndarray], dim: int | None = None) -> np.ndarray:
    """Mean of the per-pair visual vectors of one timepoint (zero vector if none)."""
    arr = np.asarray(pair_features, dtype=np.float64)
    if arr.size == 0:
        return np.zeros(dim or 0)
    return arr.mean(axis=0)


def lbt_project(store: ParamStore, feats: np.ndarray) -> Tensor:
    return nx.linear(Tensor(feats), store["lbt.proj.w"], store["lbt.proj.b"])
