import numpy as np
import pytest

from memsg import numerics as nx
from memsg.encoders import (
    EncoderConfig,
    encode_graph,
    fuse_memory,
    init_fusion,
    init_graph_encoder,
    lbt_timepoint_feature,
)
from memsg.memory import UNKNOWN
from memsg.model import TrainConfig, batch_loss, build_model, prepare
from memsg.numerics import ParamStore, Tensor, grad_check
from memsg.sgcore import SceneGraph
from memsg.synthdata import generate_recording

from helpers import random_graph


def _stack(vocab, hidden=80, seed=0, heads=1):
    cfg = EncoderConfig(vocab.n_entities, vocab.n_predicates, hidden=hidden, heads=heads)
    store = ParamStore()
    rng = np.random.default_rng(seed)
    init_graph_encoder(store, cfg, rng)
    init_fusion(store, cfg, rng)
    # random init leaves the special embeddings and biases at zero; perturb them
    for name in store.names():
        if name.startswith("fusion.") and name.endswith((".b", "summary", "unknown", "empty")):
            store[name].data[...] = rng.normal(scale=0.1, size=store[name].shape)
    return store, cfg


def _relabel_and_shuffle(g: SceneGraph, rng) -> SceneGraph:
    ids = list(g.entity_ids)
    new = dict(zip(ids, (int(x) for x in rng.choice(1000, size=len(ids), replace=False))))
    ents = [(new[e], c) for e, c in g.entities]
    rels = [(new[s], p, new[o]) for s, p, o in g.relations]
    rng.shuffle(ents)
    rng.shuffle(rels)
    return SceneGraph(tuple(ents), tuple(rels))


def test_graph_encoding_shape(vocab):
    store, cfg = _stack(vocab)
    g = SceneGraph(((0, 3),), ())
    assert encode_graph(g, store, cfg, vocab.none_index).shape == (80,)


def test_zero_node_graph_is_zero(vocab):
    store, cfg = _stack(vocab, hidden=16)
    out = encode_graph(SceneGraph((), ()), store, cfg, vocab.none_index)
    assert np.array_equal(out.data, np.zeros(16))


def test_graph_encoder_permutation_invariant(vocab):
    store, cfg = _stack(vocab)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        g = random_graph(rng, vocab, 2, 8, 0.3)
        a = encode_graph(g, store, cfg, vocab.none_index).data
        b = encode_graph(_relabel_and_shuffle(g, rng), store, cfg, vocab.none_index).data
        worst = max(worst, np.abs(a - b).max())
    assert worst < 1e-9


def test_edges_change_encoding(vocab):
    store, cfg = _stack(vocab, hidden=16)
    ents = ((0, 0), (1, 3))
    a = encode_graph(SceneGraph(ents, ((0, 2, 1),)), store, cfg).data
    b = encode_graph(SceneGraph(ents, ((0, 4, 1),)), store, cfg).data
    c = encode_graph(SceneGraph(ents, ((1, 2, 0),)), store, cfg).data
    assert np.linalg.norm(a - b) > 0 and np.linalg.norm(a - c) > 0


def test_fuse_empty_is_empty_embedding(vocab):
    store, cfg = _stack(vocab, hidden=16)
    mem, attn = fuse_memory([], store, cfg)
    assert np.array_equal(mem.data, store["fusion.empty"].data)
    assert all(a.size == 0 for a in attn)


def test_fuse_single_entry_attention(vocab):
    store, cfg = _stack(vocab, hidden=16, heads=2)
    f = Tensor(np.random.default_rng(0).normal(size=16))
    _, attn = fuse_memory([(f, 3)], store, cfg)
    assert len(attn) == cfg.fusion_layers
    for a in attn:
        assert np.array_equal(a, np.ones((2, 1)))


def test_toi_breaks_ties(vocab):
    store, cfg = _stack(vocab, hidden=16)
    f = Tensor(np.random.default_rng(0).normal(size=16))
    a, _ = fuse_memory([(f, 1), (f, 2)], store, cfg)
    b, _ = fuse_memory([(f, 1), (f, 7)], store, cfg)
    assert np.linalg.norm(a.data - b.data) > 0


def test_fusion_permutation_semantics(vocab):
    store, cfg = _stack(vocab, hidden=16)
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        feats = [Tensor(rng.normal(size=16)) for _ in range(n)]
        tois = [int(x) for x in rng.choice(np.arange(1, 40), size=n, replace=False)]
        base, _ = fuse_memory(list(zip(feats, tois)), store, cfg)
        perm = rng.permutation(n)
        with_ids, _ = fuse_memory([(feats[i], tois[i]) for i in perm], store, cfg)
        assert np.abs(base.data - with_ids.data).max() < 1e-12
        swapped = [(feats[i], tois[k]) for k, i in enumerate(np.roll(np.arange(n), 1))]
        moved, _ = fuse_memory(swapped, store, cfg)
        assert np.linalg.norm(moved.data - base.data) > 1e-9


def test_fusion_rows_are_distributions(vocab):
    store, cfg = _stack(vocab, hidden=16, heads=2)
    rng = np.random.default_rng(4)
    for _ in range(30):
        n = int(rng.integers(1, 12))
        entries = [(UNKNOWN if rng.random() < 0.3 else Tensor(rng.normal(size=16)), int(rng.integers(1, 600)))
                   for _ in range(n)]
        _, attn = fuse_memory(entries, store, cfg)
        for a in attn:
            assert (a >= 0).all()
            assert np.abs(a.sum(axis=-1) - 1).max() <= 1e-12


def test_toi_overflow_bucket(vocab):
    store, cfg = _stack(vocab, hidden=16)
    f = Tensor(np.ones(16))
    a, _ = fuse_memory([(f, 512)], store, cfg)
    b, _ = fuse_memory([(f, 9999)], store, cfg)
    assert np.array_equal(a.data, b.data)


def test_fuse_rejects_bad_toi(vocab):
    store, cfg = _stack(vocab, hidden=16)
    with pytest.raises(ValueError, match="positive"):
        fuse_memory([(Tensor(np.ones(16)), 0)], store, cfg)


def test_unknown_uses_learned_embedding(vocab):
    store, cfg = _stack(vocab, hidden=16)
    a, _ = fuse_memory([(UNKNOWN, 1)], store, cfg)
    b, _ = fuse_memory([(store["fusion.unknown"], 1)], store, cfg)
    assert np.array_equal(a.data, b.data)


def test_lbt_feature():
    v = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(lbt_timepoint_feature([v]), v)
    assert np.array_equal(lbt_timepoint_feature([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
    assert np.array_equal(lbt_timepoint_feature(np.zeros((0, 4)), 4), np.zeros(4))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 5))
    assert np.abs(lbt_timepoint_feature(x[rng.permutation(9)]) - lbt_timepoint_feature(x)).max() < 1e-15


@pytest.mark.parametrize("seed", range(20))
def test_full_stack_gradients(vocab, scenario, seed):
    """graph encoder -> fusion -> bimodal heads -> multitask loss, against central differences."""
    cfg = TrainConfig(seed=seed, hidden=8, heads=1)
    rec = generate_recording(scenario, vocab, seed)
    model = build_model(vocab, rec.feature_dim, cfg)
    rng = np.random.default_rng(seed)
    for name in model.store.names():
        if name.endswith((".b", "summary", "unknown", "empty")):
            model.store[name].data[...] = rng.normal(scale=0.1, size=model.store[name].shape)
    prep = prepare(rec, vocab, rec.feature_dim)
    tois = sorted(int(x) for x in rng.choice(np.arange(1, len(rec)), size=3, replace=False))

    def loss():
        return batch_loss(model, prep, tois, None)

    params = [model.store[n] for n in model.store.names() if not n.startswith("lbt.")]
    err = grad_check(loss, params, h=1e-5, n_samples=4, rng=np.random.default_rng(seed))
    assert err < 1e-4
