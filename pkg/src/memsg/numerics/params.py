"""Named parameter storage, Adam, checkpoints and finite-difference checks."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, ShapeError, no_grad

CHECKPOINT_MAGIC = b"MEMSGCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)
    state: dict[str, _AdamState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name in self.params:
            if name.startswith(prefix):
                self.trainable[name] = flag

    def grad_norm(self, prefix: str = "") -> float:
        total = 0.0
        for name, t in self.params.items():
            if name.startswith(prefix) and t.grad is not None:
                total += float(np.sum(t.grad**2))
        return float(np.sqrt(total))

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self.params.items():
            out.add(k, t.data, self.trainable[k])
        return out


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of every trainable parameter, in place."""
    for name, p in store.params.items():
        if not store.trainable[name]:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; call zero_grad/backward first")
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = _AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        g = p.grad
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        m_hat = st.m / (1.0 - beta1**st.step)
        v_hat = st.v / (1.0 - beta2**st.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               n_samples: int | None = 20, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    ``n_samples`` coordinates are drawn per parameter (all when ``None``).
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            if n_samples is None or n_samples >= flat.size:
                coords = np.arange(flat.size)
            else:
                coords = rng.choice(flat.size, size=n_samples, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
                flat[c] = orig
                num = (fp - fm) / (2.0 * h)
                a = ga.reshape(-1)[c]
                rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
                worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(store: ParamStore, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Write names, shapes and raw little-endian f64 buffers behind a versioned header.

    The file is written to a temporary sibling and renamed into place.
    """
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(store.params)),
              struct.pack("<I", len(meta_blob)), meta_blob]
    for name, t in store.params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    _atomic_write_bytes(path, b"".join(chunks))


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            arrays[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last parameter")
    return arrays, meta


def load_into(store: ParamStore, arrays: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy checkpoint arrays into ``store``; returns the names that were loaded.

    Shape mismatches always raise. With ``strict`` every store parameter must
    be present in ``arrays`` and vice versa.
    """
    if strict:
        missing = sorted(set(store.params) - set(arrays))
        extra = sorted(set(arrays) - set(store.params))
        if missing or extra:
            raise CheckpointError(f"checkpoint/parameter mismatch: missing={missing} extra={extra}")
    loaded = []
    for name, arr in arrays.items():
        if name not in store.params:
            continue
        if store.params[name].shape != arr.shape:
            raise ShapeError(f"checkpoint shape mismatch for {name!r}: "
                             f"{arr.shape} vs expected {store.params[name].shape}")
        store.params[name].data = np.array(arr, dtype=np.float64)
        loaded.append(name)
    return loaded


def _atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
