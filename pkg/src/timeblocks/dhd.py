"""Decision-hazard-decision problems.

Each period ``s`` has a head control ``u#_s`` chosen before the noise
``w_{s+1}`` and a tail control ``ub_{s+1}`` chosen after it. Head histories
``(w#_0, u#_0, w_1, ub_1, u#_1, w_2, ub_2, ...)`` are flattened three
entries per period and enumerated lexicographically like flat histories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _backend
from .bellman import DEFAULT_TABLE_BUDGET, FinalStateCriterion, ProblemSpec, ValueFunction, AdditiveCriterion
from .core import (
    CapacityError,
    Distribution,
    GridError,
    HistorySpace,
    IncompatibleReductionError,
    InstanceMismatchError,
    StageSpaces,
    as_cost_array,
)
from .kernels import StochasticKernel
from .reduction import (
    KernelCounterexample,
    _masked,
    _resolve_reduced_criterion,
    _want_factorization_check,
    check_factorization,
    dam_stock_reduction,
    group_rows,
)
from .two_timescale import TwoScaleClock, TwoScaleProblem


@dataclass(frozen=True)
class HeadHistory:
    """``(w#_0, u#_0, w_1, ub_1, ...)``: ``3 * stage + 1`` entries."""

    stage: int
    entries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))
        if len(self.entries) != 3 * self.stage + 1:
            raise InstanceMismatchError(f"stage-{self.stage} head history needs {3 * self.stage + 1} entries")


class DhdProblem:
    def __init__(self, initial_size: int, head_sizes: Sequence[int], noise_sizes: Sequence[int],
                 tail_sizes: Sequence[int], kernels: Sequence[StochasticKernel], criterion, name: str = ""):
        self.initial_size = int(initial_size)
        self.head_sizes = tuple(int(n) for n in head_sizes)
        self.noise_sizes = tuple(int(n) for n in noise_sizes)
        self.tail_sizes = tuple(int(n) for n in tail_sizes)
        self.name = name
        S = len(self.head_sizes)
        if len(self.noise_sizes) != S or len(self.tail_sizes) != S:
            raise InstanceMismatchError("head, noise and tail size lists must all have one entry per period")
        if min((self.initial_size,) + self.head_sizes + self.noise_sizes + self.tail_sizes) < 1:
            raise InstanceMismatchError("all spaces need at least one element")
        by_stage = {}
        for k in kernels:
            if not 1 <= k.stage <= S or k.stage in by_stage:
                raise InstanceMismatchError(f"kernel stage {k.stage} duplicated or outside [1, {S}]")
            by_stage[k.stage] = k
        for s in range(1, S + 1):
            if s not in by_stage:
                raise InstanceMismatchError(f"kernel coverage gap at stage {s}")
            if by_stage[s].n_outcomes != self.noise_sizes[s - 1]:
                raise InstanceMismatchError(f"stage-{s} kernel outcome count differs from the noise space")
        self.kernels = tuple(by_stage[s] for s in range(1, S + 1))
        self.criterion = criterion
        self._spaces = {}
        self._matrices = {}
        self._criterion_table = None

    @property
    def horizon(self) -> int:
        return len(self.head_sizes)

    def history_space(self, s: int) -> HistorySpace:
        if not 0 <= s <= self.horizon:
            raise InstanceMismatchError(f"stage {s} outside [0, {self.horizon}]")
        if s not in self._spaces:
            radices, kinds = [self.initial_size], ["w"]
            for k in range(s):
                radices += [self.head_sizes[k], self.noise_sizes[k], self.tail_sizes[k]]
                kinds += ["u", "w", "u"]
            self._spaces[s] = HistorySpace(radices, kinds)
        return self._spaces[s]

    def kernel(self, s: int) -> StochasticKernel:
        return self.kernels[s - 1]

    def kernel_matrix(self, s: int) -> np.ndarray:
        if s not in self._matrices:
            self._matrices[s] = self.kernel(s).matrix(self.history_space(s - 1))
        return self._matrices[s]

    def criterion_table(self) -> np.ndarray:
        if self._criterion_table is None:
            table = as_cost_array(self.criterion.table(self), "criterion values").reshape(-1)
            if table.size != self.history_space(self.horizon).size:
                raise InstanceMismatchError("criterion table does not cover the final head histories")
            table.setflags(write=False)
            self._criterion_table = table
        return self._criterion_table


class DhdReduction:
    """State maps folded from ``x_0 = initial[w#_0]`` and
    ``x_{s+1} = steps[s][x_s, u#_s, w_{s+1}, ub_{s+1}]``."""

    def __init__(self, state_sizes: Sequence[int], initial, steps: Sequence, name: str = "custom"):
        self.state_sizes = tuple(int(n) for n in state_sizes)
        self.initial = np.asarray(initial, dtype=np.int64).reshape(-1)
        self.steps = [np.asarray(s, dtype=np.int64) for s in steps]
        self.name = name
        if len(self.steps) != len(self.state_sizes) - 1:
            raise InstanceMismatchError("need one step table per period")
        if self.initial.min() < 0 or self.initial.max() >= self.state_sizes[0]:
            raise InstanceMismatchError("initial state map leaves the stage-0 state space")
        for s, step in enumerate(self.steps):
            if step.ndim != 4 or step.shape[0] != self.state_sizes[s]:
                raise InstanceMismatchError(f"step table {s} must have shape (states, head, noise, tail)")
            if step.min() < 0 or step.max() >= self.state_sizes[s + 1]:
                raise InstanceMismatchError(f"step table {s} leaves the next state space")
        self._cache = {}

    def state_size(self, s: int) -> int:
        return self.state_sizes[s]

    def check(self, problem: DhdProblem):
        if problem.horizon != len(self.steps) or problem.initial_size != self.initial.size:
            raise InstanceMismatchError("reduction does not match the problem's periods or initial space")
        for s, step in enumerate(self.steps):
            want = (self.state_sizes[s], problem.head_sizes[s], problem.noise_sizes[s], problem.tail_sizes[s])
            if step.shape != want:
                raise InstanceMismatchError(f"step table {s} has shape {step.shape}, expected {want}")

    def theta_array(self, s: int, problem: DhdProblem) -> np.ndarray:
        key = (s, problem.initial_size, problem.head_sizes, problem.noise_sizes, problem.tail_sizes)
        if key not in self._cache:
            self.check(problem)
            x = self.initial
            for k in range(s):
                x = self.steps[k][x].reshape(-1)
            self._cache[key] = x
        return self._cache[key]


def dhd_identity_reduction(problem: DhdProblem) -> DhdReduction:
    sizes = [problem.history_space(s).size for s in range(problem.horizon + 1)]
    steps = []
    for s in range(problem.horizon):
        a, b, c = problem.head_sizes[s], problem.noise_sizes[s], problem.tail_sizes[s]
        x = np.arange(sizes[s]).reshape(-1, 1, 1, 1)
        u = np.arange(a).reshape(1, -1, 1, 1)
        w = np.arange(b).reshape(1, 1, -1, 1)
        v = np.arange(c).reshape(1, 1, 1, -1)
        steps.append(((x * a + u) * b + w) * c + v)
    return DhdReduction(sizes, np.arange(sizes[0]), steps, name="identity")


def _two_level_min(values4: np.ndarray, probs: np.ndarray):
    """``min_head sum_w p_w min_tail values4[:, head, w, tail]`` row by row."""
    n, a, b, c = values4.shape
    inner, tail_arg = _backend.min_last_axis(values4.reshape(n * a * b, c))
    vals, head_arg = _backend.min_expectation(inner.reshape(n, a, b), probs)
    return vals, head_arg, tail_arg.reshape(n, a, b)


def dhd_bellman_apply(s: int, phi: ValueFunction, problem: DhdProblem) -> ValueFunction:
    """Head minimum of the expected tail minimum; ``policy["tail"]`` holds tail argmins
    indexed by ``(h_s, head control, outcome)``."""
    if phi.domain != "history" or phi.stage != s + 1:
        raise InstanceMismatchError(f"expected a stage-{s + 1} head-history value function")
    space = problem.history_space(s)
    shape = (space.size, problem.head_sizes[s], problem.noise_sizes[s], problem.tail_sizes[s])
    if phi.values.size != math.prod(shape):
        raise InstanceMismatchError("value table does not match the next head-history space")
    vals, head, tail = _two_level_min(phi.values.reshape(shape), problem.kernel_matrix(s + 1))
    return ValueFunction(s, "history", vals, head, space, policy={"tail": tail})


def solve_dhd_history(problem: DhdProblem, budget: int = DEFAULT_TABLE_BUDGET) -> list[ValueFunction]:
    """Unreduced recursion over head histories; ``result[s]`` is ``V_s``."""
    total = 0
    for s in range(problem.horizon + 1):
        total += problem.history_space(s).size
        if total > budget:
            raise CapacityError(f"head-history tables exceed the budget of {budget} entries at stage {s}", stage=s)
    S = problem.horizon
    out = [ValueFunction(S, "history", problem.criterion_table(), None, problem.history_space(S))]
    for s in range(S - 1, -1, -1):
        out.append(dhd_bellman_apply(s, out[-1], problem))
    return out[::-1]


def derive_dhd_kernels(problem: DhdProblem, reduction: DhdReduction, tol: float = 1e-9):
    """Reduced rows ``rho~_s`` of shape ``(|X_{s-1}|, |W_s|)``, or a counterexample."""
    tables = []
    for s in range(1, problem.horizon + 1):
        kernel = problem.kernel(s)
        n_x = reduction.state_size(s - 1)
        if kernel.kind == "white_noise":
            tables.append(np.broadcast_to(kernel.rows, (n_x, kernel.n_outcomes)))
            continue
        keys = reduction.theta_array(s - 1, problem)
        table, _, violation = group_rows(problem.kernel_matrix(s), keys, n_x, tol)
        if violation is not None:
            a, b, dist = violation
            space = problem.history_space(s - 1)
            return None, KernelCounterexample(s, HeadHistory(s - 1, space.entries(a)),
                                              HeadHistory(s - 1, space.entries(b)), dist)
        tables.append(table)
    return tables, None


def dhd_reachable(problem: DhdProblem, reduction: DhdReduction) -> list[np.ndarray]:
    masks = []
    mask = np.zeros(reduction.state_size(0), dtype=bool)
    mask[reduction.theta_array(0, problem)] = True
    masks.append(mask)
    for s in range(problem.horizon):
        nxt = np.zeros(reduction.state_size(s + 1), dtype=bool)
        nxt[np.unique(reduction.steps[s][masks[-1]])] = True
        masks.append(nxt)
    return masks


def solve_dhd(problem: DhdProblem, reduction: DhdReduction, reduced_criterion=None, *,
              verify_factorization=None, tol: float = 1e-9) -> list[ValueFunction]:
    """Reduced recursion ``V(x) = min_head E[min_tail V'(f(x, head, W, tail))]``.

    ``result[s]`` is the table over ``X_s`` with head argmins; tail argmins,
    indexed by ``(x, head, outcome)``, are in ``policy["tail"]``.
    """
    tables, cex = derive_dhd_kernels(problem, reduction, tol)
    if cex is not None:
        raise IncompatibleReductionError(cex.describe(), cex)
    jt = _resolve_reduced_criterion(problem, reduced_criterion)
    if _want_factorization_check(verify_factorization, problem.horizon):
        check_factorization(problem, reduction, jt)
    return _reduced_dhd_recursion(problem, reduction, jt, tables)


def _reduced_dhd_recursion(problem, reduction, jt, tables):
    reach = dhd_reachable(problem, reduction)
    S = problem.horizon
    out = [ValueFunction(S, "reduced_state", _masked(jt, reach[S]))]
    for s in range(S - 1, -1, -1):
        vals, head, tail = _two_level_min(out[-1].values[reduction.steps[s]], tables[s])
        out.append(ValueFunction(s, "reduced_state", _masked(vals, reach[s]), head, policy={"tail": tail}))
    return out[::-1]


# -- embedding into two time scales ----------------------------------------

def _spurious_positions(n_entries: int) -> list[int]:
    # Flat layout: w#0, u#0, w1, ub1, [w_{1,0}], u#1, w2, ub2, [w_{2,0}], ...
    return list(range(4, n_entries, 4))


def strip_spurious(entries: Sequence[int]) -> tuple[int, ...]:
    """Drop the singleton day-start uncertainties of an embedded flat history."""
    drop = set(_spurious_positions(len(entries)))
    return tuple(e for i, e in enumerate(entries) if i not in drop)


class _StripKey:
    """Kernel key sending an embedded day-start history to its head-history index."""

    def __init__(self, problem: DhdProblem, d: int):
        self.problem = problem
        self.d = d

    def __call__(self, entries):
        return self.problem.history_space(self.d).index(strip_spurious(entries))

    def array(self, space: HistorySpace):
        digits = space.digits()
        keep = [i for i in range(space.ndim) if i not in set(_spurious_positions(space.ndim))]
        head = self.problem.history_space(self.d)
        if not keep:
            return np.zeros(space.size, dtype=np.int64)
        return np.ravel_multi_index(tuple(digits[:, keep].T), head.radices)


class _StrippedCriterion:
    kind = "stripped"

    def __init__(self, problem: DhdProblem):
        self.problem = problem

    def table(self, owner):
        space = owner.history_space(owner.horizon)
        return self.problem.criterion_table()[_StripKey(self.problem, self.problem.horizon).array(space)]


def embed_dhd(problem: DhdProblem) -> TwoScaleProblem:
    """Two-scale problem with one day per period and singleton day-start noises."""
    S = problem.horizon
    clock = TwoScaleClock(S - 1, 1)
    controls, noises, within, across = {}, {}, {}, {}
    for d in range(S):
        noises[(d, 0)] = problem.initial_size if d == 0 else 1
        controls[(d, 0)] = problem.head_sizes[d]
        noises[(d, 1)] = problem.noise_sizes[d]
        controls[(d, 1)] = problem.tail_sizes[d]
        within[(d, 1)] = StochasticKernel.reduced_via_map(1, _StripKey(problem, d), problem.kernel_matrix(d + 1))
        across[d] = StochasticKernel.dirac(1, 1)
    noises[(S, 0)] = 1
    return TwoScaleProblem.from_days(clock, controls, noises, within, across, _StrippedCriterion(problem),
                                     name=f"{problem.name} embedded".strip())


def strip_index(problem: DhdProblem, flat_space: HistorySpace, s: int) -> np.ndarray:
    """Head-history index of every embedded history at the start of day ``s``."""
    return _StripKey(problem, s).array(flat_space)


# -- dam model --------------------------------------------------------------

def _grid(values, what) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0 or (arr < 0).any() or not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
        raise GridError(f"{what} must be nonnegative integers on the volume grid, got {list(values)}")
    return arr.astype(np.int64)


def build_dam_instance(capacity: int, inflow_values: Sequence[int], inflows: Sequence[Distribution],
                       turbine: Sequence[int], revenue, periods: int, variant: str = "min_dynamics", *,
                       final_cost=None, spill_penalty: int = 0):
    """Reservoir instance on an integer volume grid.

    Stage-0 uncertainty is the initial stock ``0..capacity``. Turbining
    ``turbine[u]`` in period ``s`` earns ``revenue[s][u]``; costs are the
    shortfall from the best revenue of the period, plus ``final_cost[x]``
    on the last stock (default ``capacity - x``). Releasing more than the
    stock costs ``+inf``.

    ``min_dynamics`` returns a :class:`ProblemSpec` with an additive
    criterion over the stock ``x' = min(capacity, x - q + a)``.
    ``spill_control`` returns a :class:`DhdProblem` where the tail control
    spills ``r`` units and ``0 <= x - q + a - r <= capacity`` is enforced
    with ``+inf``; its criterion is final-state over (stock, accumulated
    cost), the reduction being ``problem.criterion.reduction``.
    """
    if int(capacity) != capacity or capacity < 0:
        raise GridError(f"capacity must be a nonnegative integer, got {capacity}")
    capacity = int(capacity)
    inflow_values = _grid(inflow_values, "inflow volumes")
    turbine = _grid(turbine, "turbine volumes")
    revenue = np.asarray(revenue, dtype=np.float64)
    if revenue.shape != (periods, turbine.size):
        raise InstanceMismatchError(f"revenue table must have shape ({periods}, {turbine.size})")
    _grid(revenue, "revenues")
    if int(spill_penalty) != spill_penalty or spill_penalty < 0:
        raise GridError("spill penalty must be a nonnegative integer")
    if len(inflows) != periods:
        raise InstanceMismatchError("need one inflow distribution per period")
    for dist in inflows:
        if len(dist) != inflow_values.size:
            raise InstanceMismatchError("inflow distribution does not match the inflow grid")
    if final_cost is None:
        final_cost = capacity - np.arange(capacity + 1)
    final_cost = _grid(final_cost, "final costs")
    if final_cost.size != capacity + 1:
        raise InstanceMismatchError("final cost must list one value per stock level")
    shortfall = (revenue.max(axis=1, keepdims=True) - revenue).astype(np.int64)
    kernels = [StochasticKernel.white_noise(s + 1, inflows[s]) for s in range(periods)]
    stock = np.arange(capacity + 1)

    if variant == "min_dynamics":
        spaces = StageSpaces.from_sizes([turbine.size] * periods, [capacity + 1] + [inflow_values.size] * periods)
        red = dam_stock_reduction(spaces, capacity, turbine, inflow_values)
        costs = []
        for s in range(periods):
            c = np.where(turbine[None, :] <= stock[:, None], shortfall[s][None, :], math.inf)
            costs.append(np.repeat(c[:, :, None].astype(np.float64), inflow_values.size, axis=2))
        return ProblemSpec(spaces, kernels, AdditiveCriterion(red, costs, final_cost), name="dam min_dynamics")

    if variant != "spill_control":
        raise InstanceMismatchError(f"unknown dam variant {variant!r}")
    spill = np.arange(capacity + int(inflow_values.max()) + 1)
    c_max = int(shortfall.max(axis=1).sum()) + int(spill_penalty) * int(spill.max()) * periods
    width = c_max + 1
    dead = (capacity + 1) * width
    n_states = dead + 1
    idx = np.arange(dead).reshape(-1, 1, 1, 1)
    x, c = idx // width, idx % width
    q = turbine.reshape(1, -1, 1, 1)
    a = inflow_values.reshape(1, 1, -1, 1)
    r = spill.reshape(1, 1, 1, -1)
    y = x - q + a - r
    steps = []
    for s in range(periods):
        c_next = c + shortfall[s].reshape(1, -1, 1, 1) + int(spill_penalty) * r
        ok = (q <= x) & (y >= 0) & (y <= capacity) & (c_next <= c_max)
        live = np.where(ok, y * width + c_next, dead)
        step = np.full((n_states, turbine.size, inflow_values.size, spill.size), dead, dtype=np.int64)
        step[:dead] = live
        steps.append(step)
    red = DhdReduction([n_states] * (periods + 1), stock * width, steps, name="dam_stock_cost")
    values = np.full(n_states, math.inf)
    all_idx = np.arange(dead)
    values[:dead] = all_idx % width + final_cost[all_idx // width]
    return DhdProblem(capacity + 1, [turbine.size] * periods, [inflow_values.size] * periods,
                      [spill.size] * periods, kernels, FinalStateCriterion(red, values), name="dam spill_control")


def dam_state(problem: DhdProblem, x: int):
    """Decode a dam-reduction state into ``(stock, accumulated cost)``, or ``None`` for the dead state."""
    red = problem.criterion.reduction
    width = (red.state_size(0) - 1) // problem.initial_size
    if x == red.state_size(0) - 1:
        return None
    return divmod(int(x), width)
