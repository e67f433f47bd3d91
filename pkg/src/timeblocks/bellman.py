"""Problem instances, history-space Bellman operators and the exhaustive oracle."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _backend
from .core import (
    CapacityError,
    History,
    HistorySpace,
    InstanceMismatchError,
    InvalidRangeError,
    RepresentationError,
    StageSpaces,
    as_cost_array,
)
from .kernels import Feedback, StochasticKernel, feedback_kernel_row

DEFAULT_TABLE_BUDGET = 10**6
DEFAULT_ENUMERATION_CAP = 10**7
ENUMERATION_CHUNK = 1 << 16


@dataclass(frozen=True)
class ValueFunction:
    """Dense value table over histories or reduced states.

    ``argmin`` holds the smallest minimizing control per domain element
    (absent for terminal tables). ``policy`` carries solver-specific extras
    such as in-block or tail controls.
    """

    stage: int
    domain: str
    values: np.ndarray
    argmin: np.ndarray | None = None
    space: HistorySpace | None = None
    policy: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.domain not in ("history", "reduced_state"):
            raise InstanceMismatchError(f"unknown value-function domain {self.domain!r}")
        values = as_cost_array(self.values, "value-function entries").reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.space is not None and self.space.size != values.size:
            raise InstanceMismatchError("value table size differs from its history space")

    def __len__(self):
        return self.values.size

    def __call__(self, key) -> float:
        if isinstance(key, History):
            key = key.entries
        if isinstance(key, tuple):
            if self.space is None:
                raise InstanceMismatchError("value function has no history space for tuple lookup")
            key = self.space.index(key)
        return float(self.values[key])


# -- criteria ---------------------------------------------------------------
#
# A criterion turns the owner's final history space into a dense cost table.
# The owner is anything with ``horizon`` and ``history_space(t)``.

class FullTableCriterion:
    kind = "full_table"

    def __init__(self, values):
        self.values = as_cost_array(values, "criterion values").reshape(-1)

    def table(self, owner) -> np.ndarray:
        n = owner.history_space(owner.horizon).size
        if self.values.size != n:
            raise InstanceMismatchError(f"criterion table has {self.values.size} entries for {n} histories")
        return self.values


class FinalStateCriterion:
    """``j = values o theta_T`` for a reduction exposing ``theta_array``."""

    kind = "final_state"

    def __init__(self, reduction, values):
        self.reduction = reduction
        self.values = as_cost_array(values, "final-state costs").reshape(-1)

    def table(self, owner) -> np.ndarray:
        states = self.reduction.theta_array(owner.horizon, owner)
        if states.size and states.max() >= self.values.size:
            raise InstanceMismatchError("final-state cost table smaller than the state space")
        return self.values[states]


class FunctionCriterion:
    """Criterion given by a Python callable on history entries."""

    kind = "function"

    def __init__(self, func: Callable[[tuple], float]):
        self.func = func

    def table(self, owner) -> np.ndarray:
        space = owner.history_space(owner.horizon)
        return as_cost_array([self.func(e) for e in space], "criterion values")


class AdditiveCriterion:
    """``j(h_T) = sum_t L_t(x_t, u_t, w_{t+1}) + K(x_T)`` with ``x_t = theta_t(h_t)``.

    ``stage_costs[t]`` has shape ``(|X_t|, |U_t|, |W_{t+1}|)`` and ``reduction``
    supplies the per-stage maps (a unit-step reduction).
    """

    kind = "additive"

    def __init__(self, reduction, stage_costs: Sequence, final_cost):
        self.reduction = reduction
        self.stage_costs = [as_cost_array(c, f"stage-{t} costs") for t, c in enumerate(stage_costs)]
        for t, c in enumerate(self.stage_costs):
            if c.ndim != 3:
                raise InstanceMismatchError(f"stage-{t} cost table must be 3-D (state, control, outcome)")
        self.final_cost = as_cost_array(final_cost, "final costs").reshape(-1)

    def check(self, spaces: StageSpaces):
        if len(self.stage_costs) != spaces.horizon:
            raise InstanceMismatchError(f"{len(self.stage_costs)} stage-cost tables for horizon {spaces.horizon}")
        for t, c in enumerate(self.stage_costs):
            want = (self.reduction.state_size(t), spaces.controls[t].size, spaces.uncertainties[t + 1].size)
            if c.shape != want:
                raise InstanceMismatchError(f"stage-{t} cost table has shape {c.shape}, expected {want}")
        if self.final_cost.size != self.reduction.state_size(spaces.horizon):
            raise InstanceMismatchError("final cost table does not match the final state space")

    def accumulated(self, t: int, spaces: StageSpaces) -> np.ndarray:
        """Realized ``sum_{s<t} L_s`` for every stage-``t`` history."""
        acc = np.zeros(spaces.history_count(0))
        for s in range(t):
            x = self.reduction.theta_array(s, spaces)
            acc = (acc[:, None, None] + self.stage_costs[s][x]).reshape(-1)
        return acc

    def table(self, owner) -> np.ndarray:
        spaces = owner.spaces if hasattr(owner, "spaces") else owner
        self.check(spaces)
        T = spaces.horizon
        return self.accumulated(T, spaces) + self.final_cost[self.reduction.theta_array(T, spaces)]


# -- problem ----------------------------------------------------------------

class ProblemSpec:
    """Spaces, one kernel per stage ``1..T`` and a criterion on ``H_T``."""

    def __init__(self, spaces: StageSpaces, kernels: Sequence[StochasticKernel], criterion, name: str = ""):
        self.spaces = spaces
        self.name = name
        T = spaces.horizon
        by_stage = {}
        for k in kernels:
            if k.stage in by_stage:
                raise InstanceMismatchError(f"duplicate kernel for stage {k.stage}")
            if not 1 <= k.stage <= T:
                raise InstanceMismatchError(f"kernel stage {k.stage} outside [1, {T}]")
            by_stage[k.stage] = k
        for s in range(1, T + 1):
            if s not in by_stage:
                raise InstanceMismatchError(f"kernel coverage gap at stage {s}")
            if by_stage[s].n_outcomes != spaces.uncertainties[s].size:
                raise InstanceMismatchError(
                    f"stage-{s} kernel has {by_stage[s].n_outcomes} outcomes, space has {spaces.uncertainties[s].size}"
                )
        self.kernels = tuple(by_stage[s] for s in range(1, T + 1))
        self.criterion = criterion
        if isinstance(criterion, AdditiveCriterion):
            criterion.check(spaces)
        self._matrices = {}
        self._criterion_table = None

    @classmethod
    def from_sizes(cls, controls, uncertainties, kernels, criterion, name=""):
        return cls(StageSpaces.from_sizes(controls, uncertainties), kernels, criterion, name)

    @property
    def horizon(self) -> int:
        return self.spaces.horizon

    def history_space(self, t: int) -> HistorySpace:
        return self.spaces.history_space(t)

    def kernel(self, s: int) -> StochasticKernel:
        if not 1 <= s <= self.horizon:
            raise InstanceMismatchError(f"no kernel at stage {s}")
        return self.kernels[s - 1]

    def kernel_matrix(self, s: int) -> np.ndarray:
        if s not in self._matrices:
            m = self.kernel(s).matrix(self.history_space(s - 1))
            if m.flags.writeable:
                m.setflags(write=False)
            self._matrices[s] = m
        return self._matrices[s]

    def kernel_row(self, s: int, entries) -> np.ndarray:
        return self.kernel_matrix(s)[self.history_space(s - 1).index(entries)]

    def criterion_table(self) -> np.ndarray:
        if self._criterion_table is None:
            table = as_cost_array(self.criterion.table(self), "criterion values").reshape(-1)
            n = self.history_space(self.horizon).size
            if table.size != n:
                raise InstanceMismatchError(f"criterion produced {table.size} values for {n} histories")
            table.setflags(write=False)
            self._criterion_table = table
        return self._criterion_table

    def criterion_value(self, entries) -> float:
        return float(self.criterion_table()[self.history_space(self.horizon).index(entries)])


def check_budget(problem, budget: int = DEFAULT_TABLE_BUDGET):
    """Raise :class:`CapacityError` naming the first stage that breaks the budget."""
    total = 0
    for t in range(problem.horizon + 1):
        total += problem.history_space(t).size
        if total > budget:
            raise CapacityError(
                f"history tables exceed the budget of {budget} entries at stage {t} "
                f"({total} entries through stage {t})",
                stage=t,
            )
    return total


# -- operators --------------------------------------------------------------

def apply_bellman(t: int, phi: ValueFunction, problem: ProblemSpec) -> ValueFunction:
    """One backward step: ``min_u E[phi(h_t, u, W_{t+1})]`` for every ``h_t``."""
    if phi.domain != "history" or phi.stage != t + 1:
        raise InstanceMismatchError(f"expected a stage-{t + 1} history value function, got stage {phi.stage}")
    if not 0 <= t < problem.horizon:
        raise InstanceMismatchError(f"no Bellman step from stage {t + 1} for horizon {problem.horizon}")
    space = problem.history_space(t)
    n_u = problem.spaces.controls[t].size
    n_w = problem.spaces.uncertainties[t + 1].size
    if phi.values.size != space.size * n_u * n_w:
        raise InstanceMismatchError("value table does not match the stage history space")
    values, arg = _backend.min_expectation(phi.values.reshape(space.size, n_u, n_w), problem.kernel_matrix(t + 1))
    return ValueFunction(t, "history", values, arg, space)


def compose_bellman(r: int, t: int, phi: ValueFunction, problem: ProblemSpec) -> ValueFunction:
    if r > t:
        raise InvalidRangeError(f"cannot compose Bellman operators from {t} back to {r}")
    if phi.stage != t:
        raise InstanceMismatchError(f"value function is at stage {phi.stage}, expected {t}")
    for s in range(t - 1, r - 1, -1):
        phi = apply_bellman(s, phi, problem)
    return phi


def terminal_value(problem: ProblemSpec) -> ValueFunction:
    T = problem.horizon
    return ValueFunction(T, "history", problem.criterion_table(), None, problem.history_space(T))


def solve_history_dp(problem: ProblemSpec, budget: int = DEFAULT_TABLE_BUDGET) -> list[ValueFunction]:
    """Backward recursion over history tables; ``result[t]`` is ``V_t``."""
    check_budget(problem, budget)
    values = [terminal_value(problem)]
    for t in range(problem.horizon - 1, -1, -1):
        values.append(apply_bellman(t, values[-1], problem))
    return values[::-1]


def argmin_feedback(values: Sequence[ValueFunction], problem: ProblemSpec) -> Feedback:
    """Greedy history feedback read off the argmin tables of ``solve_history_dp``."""
    T = problem.horizon
    return Feedback(problem.spaces, 0, T - 1, {t: values[t].argmin for t in range(T)})


def evaluate_feedback(t: int, h_t: History, gamma: Feedback, problem: ProblemSpec) -> float:
    """Expected criterion from ``h_t`` when ``gamma`` chooses controls from stage ``t`` on."""
    law = feedback_kernel_row(t, problem.horizon, gamma, problem, h_t)
    table = problem.criterion_table()
    space = problem.history_space(problem.horizon)
    acc = 0.0
    for entries, p in law.items():
        acc += p * table[space.index(entries)]
    return float(acc)


def _feedback_count(problem, t):
    """Number of distinct controls-on-visited-histories assignments from a stage-``t`` history."""
    count = 1
    branches = 1
    for s in range(t, problem.horizon):
        count *= problem.spaces.controls[s].size ** branches
        branches *= problem.spaces.uncertainties[s + 1].size
    return count


def brute_force_value(t: int, h_t: History, problem: ProblemSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Minimum expected criterion over every history feedback on ``[t, T-1]``.

    Two feedbacks that agree on every history reachable from ``h_t`` have the
    same cost, so the search runs over one representative per class: a
    control for each node of the noise tree rooted at ``h_t``. Each
    representative is scored like :func:`evaluate_feedback`, walking noise
    paths in lexicographic order and multiplying kernel probabilities left
    to right, for a chunk of representatives at once.
    """
    T = problem.horizon
    if h_t.stage != t:
        raise InstanceMismatchError(f"expected a stage-{t} history")
    h_t.check(problem.spaces)
    if t == T:
        return problem.criterion_value(h_t.entries)
    count = _feedback_count(problem, t)
    if count > cap:
        raise CapacityError(f"{count} feedbacks from stage {t} exceed the enumeration cap {cap}", stage=t)
    spaces = problem.spaces
    # One slot per (stage, noise prefix); the first slot is the most significant digit.
    slots = []
    for s in range(t, T):
        for prefix in itertools.product(*(range(spaces.uncertainties[k].size) for k in range(t + 1, s + 1))):
            slots.append((s, prefix))
    where = {slot: i for i, slot in enumerate(slots)}
    radix = np.array([spaces.controls[s].size for s, _ in slots], dtype=np.int64)
    stride = np.ones(len(slots), dtype=np.int64)
    for i in range(len(slots) - 2, -1, -1):
        stride[i] = stride[i + 1] * radix[i + 1]
    table = problem.criterion_table()
    matrices = [problem.kernel_matrix(s + 1) for s in range(t, T)]
    paths = list(itertools.product(*(range(spaces.uncertainties[s].size) for s in range(t + 1, T + 1))))
    base = problem.history_space(t).index(h_t.entries)
    best = math.inf
    for lo in range(0, count, ENUMERATION_CHUNK):
        choice = np.arange(lo, min(count, lo + ENUMERATION_CHUNK), dtype=np.int64)
        total = np.zeros(choice.size)
        for path in paths:
            idx = np.full(choice.size, base, dtype=np.int64)
            mass = np.ones(choice.size)
            for s, w in zip(range(t, T), path):
                i = where[(s, path[: s - t])]
                mass = mass * matrices[s - t][idx, w]
                idx = (idx * radix[i] + (choice // stride[i]) % radix[i]) * spaces.uncertainties[s + 1].size + w
            with np.errstate(invalid="ignore"):
                total += np.where(mass > 0.0, mass * table[idx], 0.0)
        best = min(best, float(total.min()))
    return best
