"""Memory windows: which past scene graphs a timepoint gets to see.

Four modes decide the window for a timepoint of interest ``T``:

* ``all``       every earlier timepoint ``0..T-1``
* ``short``     the ``S`` most recent timepoints
* ``long``      every ``S``-th timepoint counting back from ``T``
                (``T-S, T-2S, ...``); ``long_anchor="start"`` counts ``0, S, 2S, ...``
* ``longshort`` the union of ``short`` and ``long``

Each entry carries its distance to ``T`` (the ToI id), and training-time
augmentation may swap payloads for the :data:`UNKNOWN` token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Union

import numpy as np

from .sgcore import SceneGraph

MODES = ("all", "short", "long", "longshort")


class _Unknown:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "UNKNOWN"

    def __reduce__(self):
        return (_Unknown, ())


UNKNOWN = _Unknown()

Payload = Union[SceneGraph, _Unknown]


@dataclass(frozen=True)
class MemoryMode:
    mode: str = "longshort"
    stride: int = 5
    long_anchor: str = "toi"

    def __post_init__(self):
        m = self.mode.lower()
        if m not in MODES:
            raise ValueError(f"unknown memory mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "mode", m)
        if int(self.stride) < 1:
            raise ValueError("stride must be >= 1")
        if self.long_anchor not in ("toi", "start"):
            raise ValueError("long_anchor must be 'toi' or 'start'")


@dataclass(frozen=True)
class MemoryEntry:
    t: int
    payload: Payload
    toi_id: int


@dataclass(frozen=True)
class MemoryWindow:
    toi: int
    entries: tuple[MemoryEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timepoints(self) -> list[int]:
        return [e.t for e in self.entries]

    @property
    def toi_ids(self) -> list[int]:
        return [e.toi_id for e in self.entries]


@dataclass(frozen=True)
class AugmentationConfig:
    p_apply: float = 0.5
    short_fraction: float = 0.5
    long_fraction: float = 0.5
    boundary: int = 5
    contiguous: bool = False

    def __post_init__(self):
        for name in ("p_apply", "short_fraction", "long_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.boundary < 1:
            raise ValueError("boundary must be >= 1")


def _short(T: int, S: int) -> list[int]:
    return list(range(max(0, T - S), T))


def _long(T: int, S: int, anchor: str) -> list[int]:
    if anchor == "start":
        return list(range(0, T, S))
    return list(range(T - S, -1, -S))[::-1]


def select_memory_indices(mode: MemoryMode, T: int) -> list[int]:
    if T < 0:
        raise ValueError("T must be non-negative")
    S = mode.stride
    if mode.mode == "all":
        return list(range(T))
    if mode.mode == "short":
        return _short(T, S)
    if mode.mode == "long":
        return _long(T, S, mode.long_anchor)
    return sorted(set(_short(T, S)) | set(_long(T, S, mode.long_anchor)))


def build_window(graphs: Mapping[int, Payload], mode: MemoryMode, T: int) -> MemoryWindow:
    entries = []
    for t in select_memory_indices(mode, T):
        try:
            payload = graphs[t]
        except (KeyError, IndexError):
            raise KeyError(f"no scene graph for memory timepoint {t} (T={T})") from None
        entries.append(MemoryEntry(t, payload, T - t))
    return MemoryWindow(T, tuple(entries))


def augment_window(window: MemoryWindow, cfg: AugmentationConfig,
                   rng: np.random.Generator) -> MemoryWindow:
    """Randomly blank part of the short- or long-term memory with UNKNOWN."""
    if cfg.p_apply <= 0.0 or rng.random() >= cfg.p_apply:
        return window
    use_short = rng.random() < 0.5
    if use_short:
        seg = [i for i, e in enumerate(window.entries) if e.toi_id <= cfg.boundary]
        frac = cfg.short_fraction
    else:
        seg = [i for i, e in enumerate(window.entries) if e.toi_id > cfg.boundary]
        frac = cfg.long_fraction
    if not seg:
        return window
    # stochastic rounding keeps the expected replaced share equal to frac
    n = min(len(seg), int(math.floor(frac * len(seg) + rng.random())))
    if n == 0:
        return window
    if cfg.contiguous:
        start = int(rng.integers(0, len(seg) - n + 1))
        chosen = set(seg[start:start + n])
    else:
        chosen = set(int(i) for i in rng.choice(seg, size=n, replace=False))
    entries = tuple(replace(e, payload=UNKNOWN) if i in chosen else e
                    for i, e in enumerate(window.entries))
    return MemoryWindow(window.toi, entries)
