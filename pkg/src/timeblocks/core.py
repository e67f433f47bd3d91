"""Finite spaces, histories, extended costs and distributions.

Everything downstream addresses tables through :class:`HistorySpace`, a
mixed-radix enumeration of index tuples in lexicographic order. A history
``(w0, u0, w1, ..., u_{t-1}, w_t)`` at stage ``t`` therefore has a dense
integer address, and extending it by ``(u, w)`` maps index ``i`` to
``(i * |U_t| + u) * |W_{t+1}| + w``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

INF = math.inf
NORMALIZATION_TOL = 1e-12


class TimeblocksError(Exception):
    """Base class for all errors raised by the package."""


class InstanceMismatchError(TimeblocksError, ValueError):
    pass


class HorizonExceededError(TimeblocksError, ValueError):
    pass


class InvalidSplitError(TimeblocksError, ValueError):
    pass


class InvalidRangeError(TimeblocksError, ValueError):
    pass


class FeedbackDomainError(TimeblocksError, KeyError):
    pass


class NormalizationError(TimeblocksError, ValueError):
    pass


class InvalidCostError(TimeblocksError, ValueError):
    pass


class RepresentationError(TimeblocksError, ValueError):
    pass


class DomainError(TimeblocksError, ValueError):
    pass


class GridError(TimeblocksError, ValueError):
    pass


class IndependenceError(TimeblocksError, ValueError):
    pass


class IncompleteReductionError(TimeblocksError, ValueError):
    pass


class CapacityError(TimeblocksError):
    """A table or enumeration would exceed its configured budget."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class FactorizationError(TimeblocksError):
    """The criterion does not factor through the final reduction map."""

    def __init__(self, message, witness):
        super().__init__(message)
        self.witness = witness


class IncompatibleReductionError(TimeblocksError):
    """Commutation or kernel compatibility failed; carries the counterexample."""

    def __init__(self, message, counterexample):
        super().__init__(message)
        self.counterexample = counterexample


# -- extended costs ---------------------------------------------------------

def check_cost(value) -> float:
    """Validate one extended cost: a float in ``[0, +inf]``."""
    v = float(value)
    if math.isnan(v):
        raise InvalidCostError("cost is NaN")
    if v < 0:
        raise InvalidCostError(f"cost {v} is negative")
    return v


def as_cost_array(values, what="costs") -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if np.isnan(arr).any():
        raise InvalidCostError(f"{what} contain NaN")
    if (arr < 0).any():
        raise InvalidCostError(f"{what} contain negative entries")
    return arr


# -- spaces -----------------------------------------------------------------

@dataclass(frozen=True)
class FiniteSpace:
    size: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise InstanceMismatchError(f"space size must be a positive integer, got {self.size!r}")
        if self.labels is not None:
            labels = tuple(str(x) for x in self.labels)
            if len(labels) != self.size:
                raise InstanceMismatchError("label count differs from space size")
            if len(set(labels)) != len(labels):
                raise InstanceMismatchError("space labels must be distinct")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.size


class HistorySpace:
    """Lexicographically ordered product of index ranges.

    ``kinds`` tags each position as ``"w"`` (uncertainty) or ``"u"``
    (control); kernels that look at "the last uncertainty" use it.
    """

    __slots__ = ("radices", "kinds", "size", "_strides")

    def __init__(self, radices: Sequence[int], kinds: Sequence[str] | None = None):
        self.radices = tuple(int(r) for r in radices)
        if kinds is None:
            kinds = ("w",) * len(self.radices)
        self.kinds = tuple(kinds)
        if len(self.kinds) != len(self.radices):
            raise InstanceMismatchError("kinds and radices differ in length")
        if any(r < 1 for r in self.radices):
            raise InstanceMismatchError("radices must be positive")
        self.size = math.prod(self.radices)
        strides = []
        acc = 1
        for r in reversed(self.radices):
            strides.append(acc)
            acc *= r
        self._strides = tuple(reversed(strides))

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return isinstance(other, HistorySpace) and self.radices == other.radices and self.kinds == other.kinds

    def __hash__(self):
        return hash((self.radices, self.kinds))

    def __repr__(self):
        return f"HistorySpace(radices={self.radices})"

    @property
    def ndim(self):
        return len(self.radices)

    def index(self, entries: Sequence[int]) -> int:
        if len(entries) != len(self.radices):
            raise InstanceMismatchError(f"expected {len(self.radices)} entries, got {len(entries)}")
        idx = 0
        for e, r in zip(entries, self.radices):
            if not 0 <= e < r:
                raise InstanceMismatchError(f"entry {e} out of range [0, {r})")
            idx = idx * r + e
        return idx

    def entries(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.size:
            raise InstanceMismatchError(f"index {index} out of range [0, {self.size})")
        out = []
        for r in reversed(self.radices):
            index, e = divmod(index, r)
            out.append(e)
        return tuple(reversed(out))

    def __iter__(self):
        return itertools.product(*(range(r) for r in self.radices))

    def digits(self) -> np.ndarray:
        """Array of shape ``(size, ndim)``; row ``i`` holds ``entries(i)``."""
        if not self.radices:
            return np.zeros((1, 0), dtype=np.int64)
        grid = np.indices(self.radices, dtype=np.int64)
        return grid.reshape(len(self.radices), -1).T

    def last_position(self, kind: str) -> int:
        for pos in range(len(self.kinds) - 1, -1, -1):
            if self.kinds[pos] == kind:
                return pos
        raise InstanceMismatchError(f"no {kind!r} position in this space")

    def concat(self, other: "HistorySpace") -> "HistorySpace":
        return HistorySpace(self.radices + other.radices, self.kinds + other.kinds)


@dataclass(frozen=True)
class StageSpaces:
    """Control spaces for stages ``0..T-1`` and uncertainty spaces for ``0..T``."""

    controls: tuple[FiniteSpace, ...]
    uncertainties: tuple[FiniteSpace, ...]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "uncertainties", tuple(self.uncertainties))
        if len(self.uncertainties) != len(self.controls) + 1:
            raise InstanceMismatchError(
                f"need one more uncertainty space than control spaces, got "
                f"{len(self.uncertainties)} and {len(self.controls)}"
            )

    @classmethod
    def from_sizes(cls, controls: Iterable[int], uncertainties: Iterable[int]) -> "StageSpaces":
        return cls(tuple(FiniteSpace(int(n)) for n in controls), tuple(FiniteSpace(int(n)) for n in uncertainties))

    @property
    def horizon(self) -> int:
        return len(self.controls)

    @property
    def control_sizes(self) -> tuple[int, ...]:
        return tuple(s.size for s in self.controls)

    @property
    def noise_sizes(self) -> tuple[int, ...]:
        return tuple(s.size for s in self.uncertainties)

    def history_space(self, t: int) -> HistorySpace:
        if not 0 <= t <= self.horizon:
            raise HorizonExceededError(f"stage {t} outside [0, {self.horizon}]")
        key = ("h", t)
        if key not in self._cache:
            radices = [self.uncertainties[0].size]
            kinds = ["w"]
            for s in range(t):
                radices += [self.controls[s].size, self.uncertainties[s + 1].size]
                kinds += ["u", "w"]
            self._cache[key] = HistorySpace(radices, kinds)
        return self._cache[key]

    def segment_space(self, r: int, s: int) -> HistorySpace:
        """Space of segments ``(u_{r-1}, w_r, ..., u_{s-1}, w_s)``; empty when ``s < r``."""
        if r < 1 or s > self.horizon or s < r - 1:
            raise InvalidRangeError(f"segment range [{r}:{s}] invalid for horizon {self.horizon}")
        key = ("seg", r, s)
        if key not in self._cache:
            radices, kinds = [], []
            for k in range(r, s + 1):
                radices += [self.controls[k - 1].size, self.uncertainties[k].size]
                kinds += ["u", "w"]
            self._cache[key] = HistorySpace(radices, kinds)
        return self._cache[key]

    def history_count(self, t: int) -> int:
        return self.history_space(t).size


# -- histories --------------------------------------------------------------

@dataclass(frozen=True)
class History:
    stage: int
    entries: tuple[int, ...]

    def __post_init__(self):
        entries = tuple(int(e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        if self.stage < 0:
            raise InstanceMismatchError("history stage must be nonnegative")
        if len(entries) != 2 * self.stage + 1:
            raise InstanceMismatchError(
                f"stage-{self.stage} history needs {2 * self.stage + 1} entries, got {len(entries)}"
            )

    @property
    def uncertainties(self) -> tuple[int, ...]:
        return self.entries[0::2]

    @property
    def controls(self) -> tuple[int, ...]:
        return self.entries[1::2]

    def check(self, spaces: StageSpaces) -> None:
        spaces.history_space(self.stage).index(self.entries)

    def index(self, spaces: StageSpaces) -> int:
        return spaces.history_space(self.stage).index(self.entries)


@dataclass(frozen=True)
class HistorySegment:
    from_stage: int
    to_stage: int
    entries: tuple[int, ...]

    def __post_init__(self):
        entries = tuple(int(e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        if self.from_stage < 1 or self.to_stage < self.from_stage - 1:
            raise InvalidRangeError(f"bad segment range [{self.from_stage}:{self.to_stage}]")
        expected = 2 * (self.to_stage - self.from_stage + 1)
        if len(entries) != expected:
            raise InstanceMismatchError(f"segment needs {expected} entries, got {len(entries)}")

    def __len__(self):
        return len(self.entries)


def extend_history(h: History, u: int, w: int, spaces: StageSpaces) -> History:
    t = h.stage
    if t >= spaces.horizon:
        raise HorizonExceededError(f"cannot extend a stage-{t} history past horizon {spaces.horizon}")
    if not 0 <= u < spaces.controls[t].size:
        raise InstanceMismatchError(f"control {u} outside stage-{t} control space")
    if not 0 <= w < spaces.uncertainties[t + 1].size:
        raise InstanceMismatchError(f"uncertainty {w} outside stage-{t + 1} space")
    return History(t + 1, h.entries + (int(u), int(w)))


def split_history(h: History, r: int) -> tuple[History, HistorySegment]:
    if not 0 <= r <= h.stage:
        raise InvalidSplitError(f"cannot split a stage-{h.stage} history at {r}")
    cut = 2 * r + 1
    return History(r, h.entries[:cut]), HistorySegment(r + 1, h.stage, h.entries[cut:])


def join_history(h: History, seg: HistorySegment) -> History:
    if seg.from_stage != h.stage + 1:
        raise InstanceMismatchError("segment does not start right after the history")
    return History(seg.to_stage, h.entries + seg.entries)


# -- distributions ----------------------------------------------------------

class Distribution:
    """Probability vector on a finite space, checked to sum to one within 1e-12."""

    __slots__ = ("probs", "space")

    def __init__(self, probs, space: FiniteSpace | None = None):
        arr = np.array(probs, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise NormalizationError("empty distribution")
        if np.isnan(arr).any() or np.isinf(arr).any():
            raise NormalizationError("probabilities must be finite")
        if (arr < 0).any():
            raise NormalizationError("probabilities must be nonnegative")
        total = float(arr.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise NormalizationError(
                f"probabilities sum to {total!r}, outside tolerance {NORMALIZATION_TOL:g} of 1"
            )
        if space is None:
            space = FiniteSpace(arr.size)
        elif space.size != arr.size:
            raise InstanceMismatchError("probability vector length differs from space size")
        arr.setflags(write=False)
        self.probs = arr
        self.space = space

    @classmethod
    def uniform(cls, n: int) -> "Distribution":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, n: int, k: int) -> "Distribution":
        p = np.zeros(n)
        p[k] = 1.0
        return cls(p)

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, Distribution) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"Distribution({self.probs.tolist()})"


def check_probability_rows(rows, what="kernel rows") -> np.ndarray:
    """Validate a 2-D array whose rows are distributions."""
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise InstanceMismatchError(f"{what} must be a 2-D table")
    if not np.isfinite(arr).all() or (arr < 0).any():
        raise NormalizationError(f"{what} must be finite and nonnegative")
    sums = arr.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > NORMALIZATION_TOL)
    if bad.size:
        i = int(bad[0])
        raise NormalizationError(
            f"{what}: row {i} sums to {float(sums[i])!r}, outside tolerance {NORMALIZATION_TOL:g} of 1"
        )
    return arr


def expectation(d: Distribution, values) -> float:
    """``sum_i p_i v_i`` in index order, with ``0 * inf = 0``."""
    vals = as_cost_array(values, "values").reshape(-1)
    if vals.size != d.probs.size:
        raise InstanceMismatchError(f"{vals.size} values for a distribution of size {d.probs.size}")
    acc = 0.0
    for p, v in zip(d.probs, vals):
        if p > 0.0:
            acc += p * v
    return float(acc)


def total_variation(p: dict, q: dict) -> float:
    """Total-variation distance between two sparse distributions."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
