import numpy as np
import pytest

from memsg import numerics as nx
from memsg.numerics import ParamStore, Tensor, adam_step, grad_check


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_softmax_symmetric():
    p = nx.softmax(Tensor([0.0, 0.0]))
    assert np.array_equal(p.data, [0.5, 0.5])


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(scale=5, size=(7, 9)))
    mask = rng.random((7, 9)) < 0.7
    mask[:, 0] = True
    for m in (None, mask):
        p = nx.softmax(x, axis=-1, mask=m).data
        assert (p >= 0).all()
        assert np.abs(p.sum(axis=-1) - 1).max() <= 1e-12
    assert (nx.softmax(x, mask=mask).data[~mask] == 0).all()


def test_softmax_fully_masked_row_is_zero():
    p = nx.softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))
    assert np.array_equal(p.data, [[0.0, 0.0]])


def test_cross_entropy_confident():
    # independent closed form: -log(e^10 / (e^10 + e^-10))
    expected = np.log1p(np.exp(-20.0))
    got = nx.cross_entropy(Tensor([10.0, -10.0]), 0).item()
    assert got < 1e-4
    assert got == pytest.approx(expected, rel=1e-12)


def test_matmul_identity():
    a = np.random.default_rng(1).normal(size=(3, 3))
    assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_shape_errors_name_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(nx.ShapeError, match=r"\(2,\) vs \(3,\)"):
        nx.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_backward_sum():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    nx.sum_all(w).backward()
    assert np.array_equal(w.grad, np.ones(3))


def test_backward_square():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    nx.sum_all(nx.mul(w, w)).backward()
    assert np.array_equal(w.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nx.ShapeError):
        nx.scale(w, 2.0).backward()


def test_reused_parameter_accumulates():
    w = Tensor(np.array([2.0]), requires_grad=True)
    y = nx.add(nx.mul(w, w), nx.scale(w, 3.0))
    nx.sum_all(y).backward()
    assert w.grad[0] == pytest.approx(2 * 2.0 + 3.0)


OPS = {
    "matmul": lambda x, w, g, b: nx.matmul(x, w),
    "add_bias": lambda x, w, g, b: nx.add_bias(x, g),
    "gelu": lambda x, w, g, b: nx.gelu(x),
    "relu": lambda x, w, g, b: nx.relu(nx.add_bias(x, g)),
    "softmax": lambda x, w, g, b: nx.softmax(x, axis=0),
    "layer_norm": lambda x, w, g, b: nx.layer_norm(x, g, b),
    "concat": lambda x, w, g, b: nx.concat([x, x], axis=1),
    "transpose": lambda x, w, g, b: nx.transpose(x, (1, 0)),
    "mean": lambda x, w, g, b: nx.mean(x, axis=0),
    "getitem": lambda x, w, g, b: nx.getitem(x, (slice(None), 1)),
    "embedding": lambda x, w, g, b: nx.embedding_lookup(x, np.array([[0, 2], [2, 2]])),
    "masked_mean": lambda x, w, g, b: nx.masked_mean(x, np.array([1, 0, 1, 1])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    x, w, g, b = _param(rng, 4, 4), _param(rng, 4, 3), _param(rng, 4), _param(rng, 4)
    probe = rng.normal(size=OPS[name](x, w, g, b).shape)

    def f():
        out = OPS[name](x, w, g, b)
        return nx.sum_all(nx.mul(out, Tensor(probe)))

    assert grad_check(f, [x, w, g, b], n_samples=None) < 1e-6


def _mlp_loss(rng):
    x = Tensor(rng.normal(size=(6, 5)))
    targets = rng.integers(0, 4, size=6)
    params = {
        "w1": _param(rng, 5, 8), "b1": _param(rng, 8),
        "g": Tensor(1 + 0.1 * rng.normal(size=8), requires_grad=True), "be": _param(rng, 8),
        "w2": _param(rng, 8, 4), "b2": _param(rng, 4),
    }

    def f():
        h = nx.gelu(nx.layer_norm(nx.linear(x, params["w1"], params["b1"]), params["g"], params["be"]))
        logits = nx.linear(h, params["w2"], params["b2"])
        return nx.cross_entropy(nx.scale(nx.softmax(logits), 3.0), targets)

    return f, list(params.values())


@pytest.mark.parametrize("seed", range(20))
def test_mlp_finite_differences(seed):
    f, params = _mlp_loss(np.random.default_rng(seed))
    assert grad_check(f, params, h=1e-5, n_samples=None) < 1e-4


def test_determinism():
    f1, p1 = _mlp_loss(np.random.default_rng(5))
    f2, p2 = _mlp_loss(np.random.default_rng(5))
    a, b = f1(), f2()
    a.backward()
    b.backward()
    assert a.data.tobytes() == b.data.tobytes()
    for x, y in zip(p1, p2):
        assert x.grad.tobytes() == y.grad.tobytes()


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = nx.mul(w, w)
    assert not y.requires_grad


def test_adam_zero_grad_leaves_param():
    store = ParamStore()
    p = store.add("p", np.array([0.7]))
    store.zero_grad()
    adam_step(store, lr=0.1)
    assert p.data[0] == 0.7


def test_adam_first_step():
    # t=1: m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
    store = ParamStore()
    p = store.add("p", np.array([0.0]))
    p.grad = np.array([1.0])
    adam_step(store, lr=0.1, eps=1e-8)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_identical_params_stay_identical():
    store = ParamStore()
    a = store.add("a", np.array([1.0, -2.0]))
    b = store.add("b", np.array([1.0, -2.0]))
    rng = np.random.default_rng(0)
    for _ in range(25):
        g = rng.normal(size=2)
        a.grad, b.grad = g.copy(), g.copy()
        adam_step(store, lr=0.05)
    assert a.data.tobytes() == b.data.tobytes()


def test_adam_missing_grad():
    store = ParamStore()
    store.add("p", np.zeros(1))
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(store, lr=0.1)


def test_adam_skips_frozen():
    store = ParamStore()
    p = store.add("p", np.zeros(1), trainable=False)
    p.grad = np.ones(1)
    adam_step(store, lr=0.1)
    assert p.data[0] == 0.0


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    store = ParamStore()
    store.add("a.w", rng.normal(size=(3, 4)))
    store.add("b", rng.normal(size=5))
    path = tmp_path / "m.ckpt"
    nx.save_checkpoint(store, path, {"note": "x"})
    arrays, meta = nx.read_checkpoint(path)
    assert meta == {"note": "x"}
    other = ParamStore()
    other.add("a.w", np.zeros((3, 4)))
    other.add("b", np.zeros(5))
    nx.load_into(other, arrays)
    for k in store.names():
        assert other[k].data.tobytes() == store[k].data.tobytes()
    raw = path.read_bytes()
    assert raw[:8] == b"MEMSGCKP"


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    store = ParamStore()
    store.add("w", np.zeros((2, 2)))
    nx.save_checkpoint(store, tmp_path / "c")
    arrays, _ = nx.read_checkpoint(tmp_path / "c")
    other = ParamStore()
    other.add("w", np.zeros((3, 2)))
    with pytest.raises(nx.ShapeError, match="shape mismatch"):
        nx.load_into(other, arrays)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"hello world")
    with pytest.raises(nx.CheckpointError):
        nx.read_checkpoint(tmp_path / "bad")
    store = ParamStore()
    store.add("w", np.zeros(3))
    nx.save_checkpoint(store, tmp_path / "c")
    (tmp_path / "t").write_bytes((tmp_path / "c").read_bytes()[:-4])
    with pytest.raises(nx.CheckpointError):
        nx.read_checkpoint(tmp_path / "t")
