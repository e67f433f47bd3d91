"""Stochastic kernels, history feedbacks, flows and feedback-induced kernels."""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .core import (
    Distribution,
    FeedbackDomainError,
    History,
    HistorySpace,
    InstanceMismatchError,
    InvalidRangeError,
    StageSpaces,
    check_probability_rows,
    extend_history,
)

KINDS = ("full_table", "white_noise", "markov1", "reduced_via_map")


class StochasticKernel:
    """Distribution of the stage-``s`` uncertainty given a stage ``s-1`` history.

    Build one with the class methods; ``matrix(space)`` materializes the
    dense ``(|H_{s-1}|, |W_s|)`` row table for a given history space.

    ``reduced_via_map`` takes a ``key`` callable mapping history entries to
    a row index. If the key also has an ``array(space)`` method it is used
    to compute all keys at once.
    """

    def __init__(self, stage: int, kind: str, rows, key: Callable | None = None):
        if kind not in KINDS:
            raise InstanceMismatchError(f"unknown kernel representation {kind!r}")
        if stage < 1:
            raise InstanceMismatchError("kernel stage must be at least 1")
        self.stage = int(stage)
        self.kind = kind
        self.key = key
        rows = check_probability_rows(np.atleast_2d(rows), f"stage-{stage} kernel")
        if kind == "white_noise" and rows.shape[0] != 1:
            raise InstanceMismatchError("white-noise kernel takes a single distribution")
        if kind == "reduced_via_map" and key is None:
            raise InstanceMismatchError("reduced_via_map kernel needs a key function")
        rows.setflags(write=False)
        self.rows = rows

    @classmethod
    def full_table(cls, stage, rows):
        return cls(stage, "full_table", rows)

    @classmethod
    def white_noise(cls, stage, probs):
        if isinstance(probs, Distribution):
            probs = probs.probs
        return cls(stage, "white_noise", np.atleast_2d(probs))

    @classmethod
    def markov1(cls, stage, rows):
        """Rows indexed by the last uncertainty of the conditioning history."""
        return cls(stage, "markov1", rows)

    @classmethod
    def reduced_via_map(cls, stage, key, rows):
        return cls(stage, "reduced_via_map", rows, key=key)

    @classmethod
    def dirac(cls, stage, size, outcome=0):
        return cls.white_noise(stage, Distribution.dirac(size, outcome))

    def with_stage(self, stage: int) -> "StochasticKernel":
        return StochasticKernel(stage, self.kind, self.rows, key=self.key)

    @property
    def n_outcomes(self) -> int:
        return self.rows.shape[1]

    def __repr__(self):
        return f"StochasticKernel(stage={self.stage}, kind={self.kind!r}, outcomes={self.n_outcomes})"

    def _keys(self, space: HistorySpace) -> np.ndarray:
        if self.kind == "markov1":
            pos = space.last_position("w")
            keys = space.digits()[:, pos]
        else:
            vectorized = getattr(self.key, "array", None)
            if vectorized is not None:
                keys = np.asarray(vectorized(space), dtype=np.int64)
            else:
                keys = np.fromiter((self.key(e) for e in space), dtype=np.int64, count=space.size)
        if keys.size and (keys.min() < 0 or keys.max() >= self.rows.shape[0]):
            raise InstanceMismatchError(
                f"stage-{self.stage} kernel key out of range [0, {self.rows.shape[0]})"
            )
        return keys

    def matrix(self, space: HistorySpace) -> np.ndarray:
        if self.kind == "white_noise":
            return np.broadcast_to(self.rows, (space.size, self.n_outcomes))
        if self.kind == "full_table":
            if self.rows.shape[0] != space.size:
                raise InstanceMismatchError(
                    f"stage-{self.stage} kernel has {self.rows.shape[0]} rows for {space.size} histories"
                )
            return self.rows
        return self.rows[self._keys(space)]

    def row(self, entries: Sequence[int], space: HistorySpace) -> np.ndarray:
        if self.kind == "white_noise":
            return self.rows[0]
        if self.kind == "full_table":
            return self.rows[space.index(entries)]
        if self.kind == "markov1":
            return self.rows[entries[space.last_position("w")]]
        return self.rows[self.key(tuple(entries))]


class Feedback:
    """A control index for every history of every stage in ``[from_stage, to_stage]``.

    ``to_stage = from_stage - 1`` denotes the empty feedback.
    """

    def __init__(self, spaces: StageSpaces, from_stage: int, to_stage: int, controls: dict):
        if from_stage < 0 or to_stage < from_stage - 1 or to_stage > spaces.horizon - 1:
            raise InvalidRangeError(f"feedback range [{from_stage}, {to_stage}] invalid")
        self.spaces = spaces
        self.from_stage = from_stage
        self.to_stage = to_stage
        self.controls = {}
        for s in range(from_stage, to_stage + 1):
            if s not in controls:
                raise FeedbackDomainError(f"feedback has no map at stage {s}")
            arr = np.asarray(controls[s], dtype=np.int64).reshape(-1)
            n = spaces.history_count(s)
            if arr.size != n:
                raise FeedbackDomainError(f"stage-{s} feedback covers {arr.size} of {n} histories")
            if arr.min() < 0 or arr.max() >= spaces.controls[s].size:
                raise InstanceMismatchError(f"stage-{s} feedback uses a control outside the control space")
            arr.setflags(write=False)
            self.controls[s] = arr

    @classmethod
    def constant(cls, spaces, from_stage, to_stage, u=0):
        return cls(
            spaces,
            from_stage,
            to_stage,
            {s: np.full(spaces.history_count(s), u) for s in range(from_stage, to_stage + 1)},
        )

    @classmethod
    def from_function(cls, spaces, from_stage, to_stage, func: Callable[[int, tuple], int]):
        return cls(
            spaces,
            from_stage,
            to_stage,
            {
                s: np.fromiter((func(s, e) for e in spaces.history_space(s)), dtype=np.int64)
                for s in range(from_stage, to_stage + 1)
            },
        )

    def covers(self, r, t):
        return r >= self.from_stage and t <= self.to_stage

    def control(self, stage: int, entries: Sequence[int]) -> int:
        if stage not in self.controls:
            raise FeedbackDomainError(f"feedback does not cover stage {stage}")
        return int(self.controls[stage][self.spaces.history_space(stage).index(entries)])


def _require_cover(gamma: Feedback, r: int, t: int):
    for s in range(r, t):
        if s not in gamma.controls:
            raise FeedbackDomainError(f"feedback does not cover stage {s}")


def compute_flow(r: int, t: int, gamma: Feedback, h_r: History, noise: Sequence[int]) -> History:
    """History reached at stage ``t`` from ``h_r`` when ``gamma`` picks the controls."""
    if r > t:
        raise InvalidRangeError(f"flow from {r} to {t}")
    if h_r.stage != r:
        raise InstanceMismatchError(f"flow starts at stage {r} but history is at stage {h_r.stage}")
    if len(noise) != t - r:
        raise InstanceMismatchError(f"flow over [{r}, {t}] needs {t - r} noise entries, got {len(noise)}")
    _require_cover(gamma, r, t)
    h = h_r
    for s, w in zip(range(r, t), noise):
        h = extend_history(h, gamma.control(s, h.entries), w, gamma.spaces)
    return h


def feedback_kernel_row(r: int, t: int, gamma: Feedback, problem, h_r: History) -> dict:
    """Sparse law of the stage-``t`` history started at ``h_r`` under ``gamma``.

    Noise paths are visited in lexicographic order; each mass is the product
    of kernel probabilities along the path, left to right. Paths of zero
    mass are left out of the support.
    """
    if r > t:
        raise InvalidRangeError(f"kernel from {r} to {t}")
    if h_r.stage != r:
        raise InstanceMismatchError(f"expected a stage-{r} history")
    if t > problem.horizon:
        raise InstanceMismatchError(f"stage {t} beyond horizon {problem.horizon}")
    _require_cover(gamma, r, t)
    if r == t:
        return {h_r.entries: 1.0}
    spaces = problem.spaces
    out = {}
    ranges = [range(spaces.uncertainties[s].size) for s in range(r + 1, t + 1)]
    for path in itertools.product(*ranges):
        entries = h_r.entries
        mass = 1.0
        for s, w in zip(range(r, t), path):
            u = int(gamma.controls[s][spaces.history_space(s).index(entries)])
            mass = mass * problem.kernel_row(s + 1, entries)[w]
            entries = entries + (u, w)
            if mass == 0.0:
                break
        if mass > 0.0:
            out[entries] = out.get(entries, 0.0) + mass
    return out


def feedback_kernel_row_recursive(r: int, t: int, gamma: Feedback, problem, h_r: History) -> dict:
    """Same law as :func:`feedback_kernel_row`, built one stage at a time.

    One step of the base kernel is composed with the law from ``r + 1``
    started at the extended history.
    """
    if r > t:
        raise InvalidRangeError(f"kernel from {r} to {t}")
    _require_cover(gamma, r, t)
    if r == t:
        return {h_r.entries: 1.0}
    u = gamma.control(r, h_r.entries)
    row = problem.kernel_row(r + 1, h_r.entries)
    out = {}
    for w, p in enumerate(row):
        if p == 0.0:
            continue
        nxt = History(r + 1, h_r.entries + (u, w))
        for key, q in feedback_kernel_row_recursive(r + 1, t, gamma, problem, nxt).items():
            out[key] = out.get(key, 0.0) + p * q
    return out


def compose_feedback_kernel(r: int, t: int, gamma: Feedback, problem) -> dict:
    """Map every stage-``r`` history (as an entries tuple) to its sparse law at stage ``t``."""
    space = problem.spaces.history_space(r)
    return {e: feedback_kernel_row(r, t, gamma, problem, History(r, e)) for e in space}
