"""Two time scales: days ``d = 0..D`` of minutes ``m = 0..M``.

Time points ``(d, m)`` together with the closing point ``(D+1, 0)`` are
flattened lexicographically, ``(d, m) -> d * (M + 1) + m``, so a
:class:`TwoScaleProblem` is an ordinary flat :class:`ProblemSpec` whose
horizon is the flat index of ``(D+1, 0)``. Reductions live on day starts
only; within a day the problem is solved on its decision/noise tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .bellman import ProblemSpec, ValueFunction
from .core import DomainError, IncompatibleReductionError, InstanceMismatchError, StageSpaces, as_cost_array
from .kernels import StochasticKernel
from .reduction import (
    BlockSchedule,
    ReducedKernels,
    Reduction,
    _masked,
    _resolve_reduced_criterion,
    _want_factorization_check,
    check_factorization,
    check_state_reduction,
    derive_reduced_kernels,
    reachable_states,
)


@dataclass(frozen=True)
class TwoScaleClock:
    days: int
    minutes: int

    def __post_init__(self):
        if self.days < 0 or self.minutes < 0:
            raise DomainError("day and minute counts must be nonnegative")

    @property
    def flat_horizon(self) -> int:
        return (self.days + 1) * (self.minutes + 1)

    def contains(self, d: int, m: int) -> bool:
        return (0 <= d <= self.days and 0 <= m <= self.minutes) or (d == self.days + 1 and m == 0)

    def points(self):
        for d in range(self.days + 1):
            for m in range(self.minutes + 1):
                yield d, m
        yield self.days + 1, 0

    def day_start(self, d: int) -> int:
        return lex_index(self, d, 0)

    def schedule(self) -> BlockSchedule:
        return BlockSchedule(tuple(self.day_start(d) for d in range(self.days + 2)))


def lex_index(clock: TwoScaleClock, d: int, m: int) -> int:
    if not clock.contains(d, m):
        raise DomainError(f"({d}, {m}) is not a time point of a clock with D={clock.days}, M={clock.minutes}")
    return d * (clock.minutes + 1) + m


def lex_pair(clock: TwoScaleClock, t: int) -> tuple[int, int]:
    if not 0 <= t <= clock.flat_horizon:
        raise DomainError(f"flat index {t} outside [0, {clock.flat_horizon}]")
    return divmod(t, clock.minutes + 1)


class TwoScaleProblem:
    """A flat problem viewed on a day/minute clock."""

    def __init__(self, clock: TwoScaleClock, flat: ProblemSpec):
        if flat.horizon != clock.flat_horizon:
            raise InstanceMismatchError(
                f"flat horizon {flat.horizon} does not match the clock's {clock.flat_horizon}"
            )
        self.clock = clock
        self.flat = flat

    @classmethod
    def from_days(cls, clock: TwoScaleClock, controls: Mapping, uncertainties: Mapping,
                  within: Mapping, across: Mapping, criterion, name: str = "") -> "TwoScaleProblem":
        """Assemble from per-point sizes and kernels keyed by time point.

        ``controls[(d, m)]`` for ``d <= D``; ``uncertainties[(d, m)]`` for every
        point including ``(D+1, 0)``; ``within[(d, m)]`` for ``m >= 1`` and
        ``across[d]`` for the kernel that lands on ``(d+1, 0)``.
        """
        D, M = clock.days, clock.minutes
        pts = list(clock.points())
        try:
            ctrl = [controls[p] for p in pts[:-1]]
            unc = [uncertainties[p] for p in pts]
        except KeyError as exc:
            raise InstanceMismatchError(f"missing space size at time point {exc.args[0]}") from None
        kernels = []
        for d in range(D + 1):
            for m in range(1, M + 1):
                if (d, m) not in within:
                    raise InstanceMismatchError(f"missing within-day kernel at ({d}, {m})")
                kernels.append(within[(d, m)].with_stage(lex_index(clock, d, m)))
            if d not in across:
                raise InstanceMismatchError(f"missing across-day kernel into day {d + 1}")
            kernels.append(across[d].with_stage(lex_index(clock, d + 1, 0)))
        extra = set(within) - {(d, m) for d in range(D + 1) for m in range(1, M + 1)}
        if extra or set(across) - set(range(D + 1)):
            raise InstanceMismatchError("kernels declared at time points outside the clock")
        flat = ProblemSpec(StageSpaces.from_sizes(ctrl, unc), kernels, criterion, name)
        return cls(clock, flat)

    def within_kernel(self, d: int, m: int) -> StochasticKernel:
        if m < 1:
            raise DomainError("within-day kernels start at minute 1")
        return self.flat.kernel(lex_index(self.clock, d, m))

    def across_kernel(self, d: int) -> StochasticKernel:
        return self.flat.kernel(lex_index(self.clock, d + 1, 0))


def intra_block_solve(problem: TwoScaleProblem, d: int, x_d: int, next_value, *,
                      reduced_kernels: ReducedKernels, reduction: Reduction) -> tuple[float, dict]:
    """Value of day ``d`` from state ``x_d`` with terminal cost ``next_value`` on day ``d+1`` states.

    The day's decision/noise tree is expanded node by node from the reduced
    kernel rows and solved backward. The policy maps each node, written as
    the in-day segment ``(u_{d,0}, w_{d,1}, ...)`` seen so far, to its
    minimizing control.
    """
    clock = problem.clock
    flat = problem.flat
    spaces = flat.spaces
    r = clock.day_start(d)
    t = clock.day_start(d + 1)
    next_value = as_cost_array(next_value, "next-day values").reshape(-1)
    if next_value.size != reduction.state_size(t):
        raise InstanceMismatchError("next-day value table does not match the day-end state space")
    if not 0 <= x_d < reduction.state_size(r):
        raise InstanceMismatchError(f"state {x_d} outside the day-{d} state space")
    landing = reduction.block_dynamics(r, t, spaces)[x_d]
    policy = {}

    def solve_node(s: int, segment: tuple, seg_index: int) -> float:
        if s == t:
            return float(next_value[landing[seg_index]])
        n_seg = spaces.segment_space(r + 1, s).size
        row = reduced_kernels.table(r, s + 1)[x_d * n_seg + seg_index]
        n_u = spaces.controls[s].size
        n_w = spaces.uncertainties[s + 1].size
        best, arg = 0.0, 0
        for u in range(n_u):
            acc = 0.0
            for w in range(n_w):
                p = row[w]
                if p > 0.0:
                    acc = acc + p * solve_node(s + 1, segment + (u, w), (seg_index * n_u + u) * n_w + w)
            if u == 0 or acc < best:
                best, arg = acc, u
        policy[segment] = arg
        return best

    value = solve_node(r, (), 0)
    return value, policy


def _day_kernels(problem: TwoScaleProblem, reduction: Reduction, tol):
    schedule = problem.clock.schedule()
    verdict = check_state_reduction(reduction, schedule, problem.flat)
    if not verdict.ok:
        raise IncompatibleReductionError(verdict.describe(), verdict)
    compat = derive_reduced_kernels(reduction, schedule, problem.flat, tol)
    if not compat.ok:
        raise IncompatibleReductionError(compat.counterexample.describe(), compat.counterexample)
    return schedule, compat.kernels


def slow_bellman(problem: TwoScaleProblem, reduction: Reduction, reduced_kernels: ReducedKernels,
                 d: int, phi) -> np.ndarray:
    """Day-``d`` slow operator applied to a table over day ``d+1`` states, at every day-``d`` state."""
    n = reduction.state_size(problem.clock.day_start(d))
    return np.array([
        intra_block_solve(problem, d, x, phi, reduced_kernels=reduced_kernels, reduction=reduction)[0]
        for x in range(n)
    ])


def solve_two_timescale(problem: TwoScaleProblem, reduction: Reduction, reduced_criterion=None, *,
                        verify_factorization=None, tol: float = 1e-9) -> list[ValueFunction]:
    """Slow-scale recursion over day starts; ``result[d]`` is the table over day-``d`` states.

    ``policy`` of each table maps a reached state to its in-day tree policy.
    """
    flat = problem.flat
    schedule, kernels = _day_kernels(problem, reduction, tol)
    jt = _resolve_reduced_criterion(flat, reduced_criterion)
    if _want_factorization_check(verify_factorization, flat.horizon):
        check_factorization(flat, reduction, jt)
    reach = reachable_states(reduction, schedule, flat)
    D = problem.clock.days
    T = flat.horizon
    out = [ValueFunction(T, "reduced_state", _masked(jt, reach[T]))]
    for d in range(D, -1, -1):
        r = problem.clock.day_start(d)
        n = reduction.state_size(r)
        vals = np.full(n, math.inf)
        arg = np.zeros(n, dtype=np.int64)
        policies = {}
        for x in np.flatnonzero(reach[r]):
            v, pol = intra_block_solve(problem, d, int(x), out[-1].values, reduced_kernels=kernels, reduction=reduction)
            vals[x] = v
            arg[x] = pol[()]
            policies[int(x)] = pol
        out.append(ValueFunction(r, "reduced_state", vals, arg, policy=policies))
    return out[::-1]
