"""State reductions across time blocks and the reduced dynamic programs.

A reduction compresses stage-``t`` histories into states ``x = theta_t(h)``
at the boundaries of a :class:`BlockSchedule`, and carries block dynamics
``f(x, segment)`` that roll a state across a block. Solvers here never
trust a reduction: commutation and kernel compatibility are checked by
exhaustive enumeration before any reduced table is used.

States that no history reaches get the value ``+inf``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _backend
from .bellman import AdditiveCriterion, FinalStateCriterion, ProblemSpec, ValueFunction
from .core import (
    CapacityError,
    FactorizationError,
    History,
    HistorySegment,
    HistorySpace,
    IncompatibleReductionError,
    IncompleteReductionError,
    InstanceMismatchError,
    InvalidRangeError,
    RepresentationError,
    StageSpaces,
    as_cost_array,
)

COMPATIBILITY_TOL = 1e-9
FACTORIZATION_CHECK_MAX_T = 8


def _spaces(owner) -> StageSpaces:
    return owner.spaces if hasattr(owner, "spaces") else owner


@dataclass(frozen=True)
class BlockSchedule:
    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0:
            raise InvalidRangeError(f"schedule must start at 0 and have at least two boundaries, got {b}")
        if any(x >= y for x, y in zip(b, b[1:])):
            raise InvalidRangeError(f"schedule boundaries must be strictly increasing, got {b}")

    @classmethod
    def unit(cls, horizon: int) -> "BlockSchedule":
        return cls(tuple(range(horizon + 1)))

    @property
    def horizon(self) -> int:
        return self.boundaries[-1]

    @property
    def blocks(self) -> list[tuple[int, int]]:
        return list(zip(self.boundaries, self.boundaries[1:]))

    def check_horizon(self, T: int):
        if self.horizon != T:
            raise InstanceMismatchError(f"schedule ends at {self.horizon}, horizon is {T}")

    def refines(self, other: "BlockSchedule") -> bool:
        return self.horizon == other.horizon and set(other.boundaries) <= set(self.boundaries)


# -- reductions -------------------------------------------------------------

class Reduction:
    """Interface shared by the concrete reductions below."""

    def state_size(self, t: int) -> int:
        raise NotImplementedError

    def has_boundary(self, t: int) -> bool:
        raise NotImplementedError

    def has_block(self, r: int, t: int) -> bool:
        raise NotImplementedError

    def theta_array(self, t: int, owner) -> np.ndarray:
        """State of every stage-``t`` history, in lexicographic order."""
        raise NotImplementedError

    def block_dynamics(self, r: int, t: int, owner) -> np.ndarray:
        """Table ``F[x, k]``: state at ``t`` after segment number ``k`` of ``H_{r+1:t}`` from ``x``."""
        raise NotImplementedError

    def theta(self, t: int, entries, owner) -> int:
        spaces = _spaces(owner)
        return int(self.theta_array(t, spaces)[spaces.history_space(t).index(tuple(entries))])

    def dynamics(self, r: int, t: int, x: int, segment, owner) -> int:
        spaces = _spaces(owner)
        k = spaces.segment_space(r + 1, t).index(tuple(segment))
        return int(self.block_dynamics(r, t, spaces)[x, k])


class StepReduction(Reduction):
    """Reduction defined at every stage by ``x_0 = initial[w_0]`` and
    ``x_{t+1} = steps[t][x_t, u_t, w_{t+1}]``.

    Because every ``theta_t`` is the fold of the steps, it exists at any
    boundary and block dynamics are folds over the segment.
    """

    def __init__(self, state_sizes: Sequence[int], initial, steps: Sequence, name: str = "custom"):
        self.state_sizes = tuple(int(n) for n in state_sizes)
        self.initial = np.asarray(initial, dtype=np.int64).reshape(-1)
        self.steps = [np.asarray(s, dtype=np.int64) for s in steps]
        self.name = name
        if len(self.steps) != len(self.state_sizes) - 1:
            raise InstanceMismatchError("need one step table per stage transition")
        if self.initial.size and (self.initial.min() < 0 or self.initial.max() >= self.state_sizes[0]):
            raise InstanceMismatchError("initial state map leaves the stage-0 state space")
        for t, step in enumerate(self.steps):
            if step.ndim != 3:
                raise InstanceMismatchError(f"step table {t} must be 3-D (state, control, outcome)")
            if step.shape[0] != self.state_sizes[t]:
                raise InstanceMismatchError(f"step table {t} has {step.shape[0]} rows for {self.state_sizes[t]} states")
            if step.size and (step.min() < 0 or step.max() >= self.state_sizes[t + 1]):
                raise InstanceMismatchError(f"step table {t} leaves the stage-{t + 1} state space")
        self._cache = {}

    def __repr__(self):
        return f"StepReduction({self.name!r}, states={self.state_sizes})"

    @property
    def horizon(self):
        return len(self.steps)

    def state_size(self, t):
        return self.state_sizes[t]

    def has_boundary(self, t):
        return 0 <= t <= self.horizon

    def has_block(self, r, t):
        return 0 <= r < t <= self.horizon

    def _check(self, spaces: StageSpaces):
        if spaces.horizon != self.horizon:
            raise InstanceMismatchError(f"reduction horizon {self.horizon} differs from problem horizon {spaces.horizon}")
        if self.initial.size != spaces.uncertainties[0].size:
            raise InstanceMismatchError("initial state map does not cover the stage-0 uncertainty space")
        for t, step in enumerate(self.steps):
            want = (self.state_sizes[t], spaces.controls[t].size, spaces.uncertainties[t + 1].size)
            if step.shape != want:
                raise InstanceMismatchError(f"step table {t} has shape {step.shape}, expected {want}")

    def theta_array(self, t, owner):
        spaces = _spaces(owner)
        key = ("theta", t, spaces.noise_sizes, spaces.control_sizes)
        if key not in self._cache:
            self._check(spaces)
            x = self.initial
            for s in range(t):
                x = self.steps[s][x].reshape(-1)
            x.setflags(write=False)
            self._cache[key] = x
        return self._cache[key]

    def block_dynamics(self, r, t, owner):
        spaces = _spaces(owner)
        key = ("block", r, t, spaces.noise_sizes, spaces.control_sizes)
        if key not in self._cache:
            self._check(spaces)
            if not self.has_block(r, t):
                raise IncompleteReductionError(f"no dynamics for block [{r}, {t}]")
            n = self.state_sizes[r]
            x = np.arange(n, dtype=np.int64).reshape(n, 1)
            for s in range(r, t):
                x = self.steps[s][x].reshape(n, -1)
            x.setflags(write=False)
            self._cache[key] = x
        return self._cache[key]

    def step_table(self, t, owner=None):
        return self.steps[t]


class TableReduction(Reduction):
    """Reduction given by explicit tables at chosen boundaries.

    ``thetas[t]`` lists the state of every stage-``t`` history; ``dynamics[(r, t)]``
    has shape ``(|X_r|, |H_{r+1:t}|)``.
    """

    def __init__(self, state_sizes: dict, thetas: dict, dynamics: dict, name: str = "tables"):
        self.state_sizes = {int(t): int(n) for t, n in state_sizes.items()}
        self.thetas = {int(t): np.asarray(v, dtype=np.int64).reshape(-1) for t, v in thetas.items()}
        self.dyn = {(int(r), int(t)): np.asarray(v, dtype=np.int64) for (r, t), v in dynamics.items()}
        self.name = name
        for t, v in self.thetas.items():
            if t not in self.state_sizes:
                raise InstanceMismatchError(f"theta at stage {t} has no declared state space")
            if v.size and (v.min() < 0 or v.max() >= self.state_sizes[t]):
                raise InstanceMismatchError(f"theta at stage {t} leaves its state space")
        for (r, t), v in self.dyn.items():
            if r not in self.state_sizes or t not in self.state_sizes:
                raise InstanceMismatchError(f"dynamics for block [{r}, {t}] reference undeclared state spaces")
            if v.ndim != 2 or v.shape[0] != self.state_sizes[r]:
                raise InstanceMismatchError(f"dynamics for block [{r}, {t}] must have {self.state_sizes[r]} rows")
            if v.size and (v.min() < 0 or v.max() >= self.state_sizes[t]):
                raise InstanceMismatchError(f"dynamics for block [{r}, {t}] leave the target state space")

    def __repr__(self):
        return f"TableReduction({self.name!r}, boundaries={sorted(self.state_sizes)})"

    def state_size(self, t):
        if t not in self.state_sizes:
            raise IncompleteReductionError(f"no state space declared at stage {t}")
        return self.state_sizes[t]

    def has_boundary(self, t):
        return t in self.thetas

    def has_block(self, r, t):
        return (r, t) in self.dyn

    def theta_array(self, t, owner):
        if t not in self.thetas:
            raise IncompleteReductionError(f"no theta declared at stage {t}")
        v = self.thetas[t]
        n = _spaces(owner).history_count(t)
        if v.size != n:
            raise InstanceMismatchError(f"theta at stage {t} lists {v.size} states for {n} histories")
        return v

    def block_dynamics(self, r, t, owner):
        if (r, t) not in self.dyn:
            raise IncompleteReductionError(f"no dynamics declared for block [{r}, {t}]")
        v = self.dyn[(r, t)]
        n = _spaces(owner).segment_space(r + 1, t).size
        if v.shape[1] != n:
            raise InstanceMismatchError(f"dynamics for block [{r}, {t}] list {v.shape[1]} segments, expected {n}")
        return v


# -- built-in reductions ----------------------------------------------------

def identity_reduction(spaces: StageSpaces) -> StepReduction:
    """``theta_t`` = lexicographic index of the history; dynamics append."""
    spaces = _spaces(spaces)
    sizes = [spaces.history_count(t) for t in range(spaces.horizon + 1)]
    steps = []
    for t in range(spaces.horizon):
        n_u, n_w = spaces.controls[t].size, spaces.uncertainties[t + 1].size
        x = np.arange(sizes[t]).reshape(-1, 1, 1)
        u = np.arange(n_u).reshape(1, -1, 1)
        w = np.arange(n_w).reshape(1, 1, -1)
        steps.append((x * n_u + u) * n_w + w)
    return StepReduction(sizes, np.arange(sizes[0]), steps, name="identity")


def last_uncertainty_reduction(spaces: StageSpaces) -> StepReduction:
    spaces = _spaces(spaces)
    sizes = list(spaces.noise_sizes)
    steps = []
    for t in range(spaces.horizon):
        shape = (sizes[t], spaces.controls[t].size, sizes[t + 1])
        steps.append(np.broadcast_to(np.arange(sizes[t + 1]), shape))
    return StepReduction(sizes, np.arange(sizes[0]), steps, name="last_uncertainty")


def running_sum_reduction(spaces: StageSpaces) -> StepReduction:
    """State = sum of the uncertainty indices seen so far."""
    spaces = _spaces(spaces)
    sizes = [spaces.uncertainties[0].size]
    for t in range(1, spaces.horizon + 1):
        sizes.append(sizes[-1] + spaces.uncertainties[t].size - 1)
    steps = []
    for t in range(spaces.horizon):
        x = np.arange(sizes[t]).reshape(-1, 1, 1)
        w = np.arange(spaces.uncertainties[t + 1].size).reshape(1, 1, -1)
        steps.append(np.broadcast_to(x + w, (sizes[t], spaces.controls[t].size, spaces.uncertainties[t + 1].size)))
    return StepReduction(sizes, np.arange(sizes[0]), steps, name="running_sum")


def dam_stock_reduction(spaces: StageSpaces, capacity: int, turbine: Sequence[int], inflow: Sequence[int]) -> StepReduction:
    """Reservoir stock ``x' = min(capacity, x - q + a)``, clipped at 0.

    ``w_0`` is the initial stock; control ``u`` releases ``turbine[u]`` and
    outcome ``w`` brings ``inflow[w]``. Releases larger than the stock are
    priced at ``+inf`` by the dam criterion, so the clip at 0 only keeps the
    state on the grid.
    """
    spaces = _spaces(spaces)
    n = capacity + 1
    turbine = np.asarray(turbine, dtype=np.int64)
    inflow = np.asarray(inflow, dtype=np.int64)
    x = np.arange(n).reshape(-1, 1, 1)
    nxt = np.clip(x - turbine.reshape(1, -1, 1) + inflow.reshape(1, 1, -1), 0, capacity)
    steps = []
    for t in range(spaces.horizon):
        if spaces.controls[t].size != turbine.size or spaces.uncertainties[t + 1].size != inflow.size:
            raise InstanceMismatchError("dam grids do not match the problem spaces")
        steps.append(nxt)
    if spaces.uncertainties[0].size != n:
        raise InstanceMismatchError("stage-0 uncertainty must enumerate the initial stocks 0..capacity")
    return StepReduction([n] * (spaces.horizon + 1), np.arange(n), steps, name="dam_stock")


BUILTIN_REDUCTIONS = {
    "identity": identity_reduction,
    "last_uncertainty": last_uncertainty_reduction,
    "running_sum": running_sum_reduction,
    "dam_stock": dam_stock_reduction,
}


class ReductionKey:
    """Kernel key ``h -> theta_t(h)``, usable with ``StochasticKernel.reduced_via_map``."""

    def __init__(self, reduction: Reduction, stage: int, spaces: StageSpaces):
        self.reduction = reduction
        self.stage = stage
        self.spaces = _spaces(spaces)

    def __call__(self, entries):
        return self.reduction.theta(self.stage, entries, self.spaces)

    def array(self, space: HistorySpace):
        if space != self.spaces.history_space(self.stage):
            raise InstanceMismatchError("key used on a different history space")
        return self.reduction.theta_array(self.stage, self.spaces)


class BlockStateKey:
    """Kernel key ``h_s -> (theta_r(h_r), h_{r+1:s})`` flattened to one index.

    This is exactly the grouping key of compatibility, so any table of rows
    indexed by it yields a kernel compatible with the reduction on a block
    starting at ``r``.
    """

    def __init__(self, reduction: Reduction, r: int, s: int, spaces: StageSpaces):
        self.reduction = reduction
        self.r = r
        self.s = s
        self.spaces = _spaces(spaces)
        self.n_segments = self.spaces.segment_space(r + 1, s).size

    @property
    def size(self):
        return self.reduction.state_size(self.r) * self.n_segments

    def __call__(self, entries):
        i = self.spaces.history_space(self.s).index(tuple(entries))
        return int(self.array(None)[i])

    def array(self, space):
        if space is not None and space != self.spaces.history_space(self.s):
            raise InstanceMismatchError("key used on a different history space")
        return block_keys(self.reduction, self.r, self.s, self.spaces)


def block_keys(reduction: Reduction, r: int, s: int, owner) -> np.ndarray:
    """Flattened ``(theta_r(h_r), h_{r+1:s})`` for every stage-``s`` history."""
    spaces = _spaces(owner)
    n_seg = spaces.segment_space(r + 1, s).size
    idx = np.arange(spaces.history_count(s), dtype=np.int64)
    theta_r = reduction.theta_array(r, spaces)
    return theta_r[idx // n_seg] * n_seg + idx % n_seg


# -- verification -----------------------------------------------------------

@dataclass(frozen=True)
class ReductionVerdict:
    ok: bool
    block: tuple[int, int] | None = None
    history: History | None = None
    segment: HistorySegment | None = None
    expected: int | None = None
    got: int | None = None

    def describe(self) -> str:
        if self.ok:
            return "commutation holds on every block"
        return (
            f"block {self.block}: theta of {self.history.entries + self.segment.entries} is {self.got}, "
            f"dynamics from theta of {self.history.entries} along {self.segment.entries} give {self.expected}"
        )


def check_state_reduction(reduction: Reduction, schedule: BlockSchedule, problem) -> ReductionVerdict:
    """Exhaustive check of ``theta_t(h_r, seg) == f(theta_r(h_r), seg)`` on every block."""
    spaces = _spaces(problem)
    schedule.check_horizon(spaces.horizon)
    for r, t in schedule.blocks:
        for stage in (r, t):
            if not reduction.has_boundary(stage):
                raise IncompleteReductionError(f"reduction declares no theta at stage {stage}")
        if not reduction.has_block(r, t):
            raise IncompleteReductionError(f"reduction declares no dynamics for block [{r}, {t}]")
        theta_r = reduction.theta_array(r, spaces)
        theta_t = reduction.theta_array(t, spaces)
        dyn = reduction.block_dynamics(r, t, spaces)
        n_seg = dyn.shape[1]
        idx = np.arange(theta_t.size)
        expected = dyn[theta_r[idx // n_seg], idx % n_seg]
        bad = np.flatnonzero(expected != theta_t)
        if bad.size:
            i = int(bad[0])
            h_r = History(r, spaces.history_space(r).entries(i // n_seg))
            seg = HistorySegment(r + 1, t, spaces.segment_space(r + 1, t).entries(i % n_seg))
            return ReductionVerdict(False, (r, t), h_r, seg, int(expected[i]), int(theta_t[i]))
    return ReductionVerdict(True)


@dataclass(frozen=True)
class KernelCounterexample:
    stage: int
    first: History
    second: History
    distance: float

    def describe(self) -> str:
        return (
            f"stage-{self.stage} kernel rows at {self.first.entries} and {self.second.entries} share a reduced key "
            f"but differ by total variation {self.distance:.3g}"
        )


def group_rows(rows: np.ndarray, keys: np.ndarray, n_keys: int, tol: float = COMPATIBILITY_TOL):
    """Check that rows sharing a key agree; return ``(table, reached, violation)``.

    ``table[k]`` is the first row with key ``k`` (uniform where no row has
    that key), ``reached`` flags keys that occur, and ``violation`` is
    ``None`` or ``(representative, offender, distance)`` for the first
    offending row in index order.
    """
    n_out = rows.shape[1]
    table = np.full((n_keys, n_out), 1.0 / n_out)
    reached = np.zeros(n_keys, dtype=bool)
    if keys.size == 0:
        return table, reached, None
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    rep = first[inverse.reshape(-1)]
    tv = 0.5 * np.abs(rows - rows[rep]).sum(axis=1)
    bad = np.flatnonzero(tv > tol)
    table[uniq] = rows[first]
    reached[uniq] = True
    if bad.size:
        i = int(bad[0])
        return table, reached, (int(rep[i]), i, float(tv[i]))
    return table, reached, None


@dataclass
class ReducedKernels:
    """Reduced kernel rows for every in-block stage of a schedule.

    ``tables[(r, s)]`` has shape ``(|X_r| * |H_{r+1:s-1}|, |W_s|)``; row
    ``x * n + k`` is the law of ``w_s`` given state ``x`` at ``r`` and
    in-block segment number ``k``.
    """

    schedule: BlockSchedule
    tables: dict = field(default_factory=dict)

    def table(self, r: int, s: int) -> np.ndarray:
        return self.tables[(r, s)]


@dataclass(frozen=True)
class CompatibilityResult:
    ok: bool
    kernels: ReducedKernels | None = None
    counterexample: KernelCounterexample | None = None


def derive_reduced_kernels(reduction: Reduction, schedule: BlockSchedule, problem: ProblemSpec,
                           tol: float = COMPATIBILITY_TOL) -> CompatibilityResult:
    """Group kernel rows by ``(theta_r(h_r), in-block segment)`` and keep the shared rows."""
    spaces = problem.spaces
    schedule.check_horizon(spaces.horizon)
    out = ReducedKernels(schedule)
    for r, t in schedule.blocks:
        n_x = reduction.state_size(r)
        for s in range(r + 1, t + 1):
            n_seg = spaces.segment_space(r + 1, s - 1).size
            kernel = problem.kernel(s)
            if kernel.kind == "white_noise":
                out.tables[(r, s)] = np.broadcast_to(kernel.rows, (n_x * n_seg, kernel.n_outcomes))
                continue
            keys = block_keys(reduction, r, s - 1, spaces)
            table, _, violation = group_rows(problem.kernel_matrix(s), keys, n_x * n_seg, tol)
            if violation is not None:
                a, b, dist = violation
                space = spaces.history_space(s - 1)
                cex = KernelCounterexample(s, History(s - 1, space.entries(a)), History(s - 1, space.entries(b)), dist)
                return CompatibilityResult(False, None, cex)
            out.tables[(r, s)] = table
    return CompatibilityResult(True, out)


def _verify_supplied_kernels(supplied: ReducedKernels, derived: ReducedKernels, reach: dict, problem, tol):
    spaces = problem.spaces
    for (r, s), table in derived.tables.items():
        if (r, s) not in supplied.tables:
            raise IncompleteReductionError(f"supplied reduced kernels miss stage {s} of the block at {r}")
        given = np.asarray(supplied.tables[(r, s)], dtype=np.float64)
        if given.shape != table.shape:
            raise InstanceMismatchError(f"supplied reduced kernel for stage {s} has shape {given.shape}")
        n_seg = spaces.segment_space(r + 1, s - 1).size
        live = np.repeat(reach[r], n_seg)
        tv = 0.5 * np.abs(given - table).sum(axis=1)
        bad = np.flatnonzero(live & (tv > tol))
        if bad.size:
            raise IncompatibleReductionError(
                f"supplied reduced kernel for stage {s} disagrees with the problem kernel at key {int(bad[0])}",
                int(bad[0]),
            )


def _values_equal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    both_inf = np.isinf(a) & np.isinf(b)
    with np.errstate(invalid="ignore"):
        close = np.abs(a - b) <= 1e-12 * np.maximum(1.0, np.abs(a))
    return both_inf | close


def check_factorization(problem, reduction: Reduction, reduced_criterion) -> None:
    """Raise :class:`FactorizationError` unless ``j == reduced_criterion o theta_T`` everywhere."""
    T = problem.horizon
    j = problem.criterion_table()
    theta = reduction.theta_array(T, problem)
    space = problem.history_space(T)
    jt = as_cost_array(reduced_criterion, "reduced criterion").reshape(-1)
    if jt.size != reduction.state_size(T):
        raise InstanceMismatchError(f"reduced criterion has {jt.size} entries for {reduction.state_size(T)} states")
    _, first, inverse = np.unique(theta, return_index=True, return_inverse=True)
    rep = first[inverse.reshape(-1)]
    bad = np.flatnonzero(~_values_equal(j, j[rep]))
    if bad.size:
        a, b = int(rep[bad[0]]), int(bad[0])
        raise FactorizationError(
            f"histories {space.entries(a)} and {space.entries(b)} share final state {int(theta[a])} "
            f"but have costs {j[a]} and {j[b]}",
            (space.entries(a), space.entries(b)),
        )
    bad = np.flatnonzero(~_values_equal(j, jt[theta]))
    if bad.size:
        i = int(bad[0])
        raise FactorizationError(
            f"history {space.entries(i)} costs {j[i]} but its final state {int(theta[i])} is priced {jt[theta[i]]}",
            (space.entries(i), None),
        )


def _want_factorization_check(flag, T):
    return T <= FACTORIZATION_CHECK_MAX_T if flag is None else bool(flag)


def _resolve_reduced_criterion(problem, reduced_criterion):
    if reduced_criterion is not None:
        return as_cost_array(reduced_criterion, "reduced criterion").reshape(-1)
    if isinstance(problem.criterion, FinalStateCriterion):
        return problem.criterion.values
    raise RepresentationError("a reduced criterion is required unless the criterion is declared final_state")


def reachable_states(reduction: Reduction, schedule: BlockSchedule, problem) -> dict:
    """Boolean masks of the states reached at each boundary, propagated forward."""
    spaces = _spaces(problem)
    reach = {}
    x0 = reduction.theta_array(0, spaces)
    mask = np.zeros(reduction.state_size(0), dtype=bool)
    mask[x0] = True
    reach[0] = mask
    for r, t in schedule.blocks:
        dyn = reduction.block_dynamics(r, t, spaces)
        nxt = np.zeros(reduction.state_size(t), dtype=bool)
        nxt[np.unique(dyn[reach[r]])] = True
        reach[t] = nxt
    return reach


def _masked(values, mask):
    out = np.array(values, dtype=np.float64)
    out[~mask] = math.inf
    return out


# -- reduced operators and solvers ------------------------------------------

def reduced_bellman(problem: ProblemSpec, reduction: Reduction, kernels: ReducedKernels,
                    r: int, t: int, phi) -> tuple[np.ndarray, dict]:
    """Block operator on a table over ``X_t``; returns values over ``X_r`` and in-block argmins.

    The nested min/expectation over the block is evaluated backward over
    in-block depth: at depth ``s`` the table is indexed by state at ``r``
    and segment ``h_{r+1:s}``.
    """
    spaces = problem.spaces
    phi = as_cost_array(phi, "reduced values").reshape(-1)
    if phi.size != reduction.state_size(t):
        raise InstanceMismatchError(f"table over X_{t} has {phi.size} entries, expected {reduction.state_size(t)}")
    n_x = reduction.state_size(r)
    cur = phi[reduction.block_dynamics(r, t, spaces)]
    policy = {}
    for s in range(t - 1, r - 1, -1):
        n_seg = spaces.segment_space(r + 1, s).size
        n_u, n_w = spaces.controls[s].size, spaces.uncertainties[s + 1].size
        vals, arg = _backend.min_expectation(cur.reshape(n_x * n_seg, n_u, n_w), kernels.table(r, s + 1))
        policy[s] = arg.reshape(n_x, n_seg)
        cur = vals
    return cur.reshape(n_x), policy


def solve_reduced_dp(problem: ProblemSpec, schedule: BlockSchedule, reduction: Reduction,
                     reduced_criterion=None, *, verify_factorization=None,
                     reduced_kernels: ReducedKernels | None = None, tol: float = COMPATIBILITY_TOL) -> list[ValueFunction]:
    """Block dynamic program; ``result[i]`` is the table over ``X_{t_i}``.

    Each result carries the stage-``t_i`` argmin per state and, in
    ``policy``, the in-block argmins keyed by stage.
    """
    schedule.check_horizon(problem.horizon)
    verdict = check_state_reduction(reduction, schedule, problem)
    if not verdict.ok:
        raise IncompatibleReductionError(verdict.describe(), verdict)
    compat = derive_reduced_kernels(reduction, schedule, problem, tol)
    if not compat.ok:
        raise IncompatibleReductionError(compat.counterexample.describe(), compat.counterexample)
    reach = reachable_states(reduction, schedule, problem)
    kernels = compat.kernels
    if reduced_kernels is not None:
        _verify_supplied_kernels(reduced_kernels, kernels, reach, problem, tol)
        kernels = reduced_kernels
    jt = _resolve_reduced_criterion(problem, reduced_criterion)
    if _want_factorization_check(verify_factorization, problem.horizon):
        check_factorization(problem, reduction, jt)
    T = problem.horizon
    out = [ValueFunction(T, "reduced_state", _masked(jt, reach[T]))]
    for r, t in reversed(schedule.blocks):
        vals, policy = reduced_bellman(problem, reduction, kernels, r, t, out[-1].values)
        out.append(ValueFunction(r, "reduced_state", _masked(vals, reach[r]), policy[r][:, 0], policy=policy))
    return out[::-1]


def _unit_compatibility(problem, reduction, tol):
    schedule = BlockSchedule.unit(problem.horizon)
    verdict = check_state_reduction(reduction, schedule, problem)
    if not verdict.ok:
        raise IncompatibleReductionError(verdict.describe(), verdict)
    compat = derive_reduced_kernels(reduction, schedule, problem, tol)
    if not compat.ok:
        raise IncompatibleReductionError(compat.counterexample.describe(), compat.counterexample)
    return schedule, compat.kernels, reachable_states(reduction, schedule, problem)


def solve_unit_block_dp(problem: ProblemSpec, reduction: Reduction, reduced_criterion=None, *,
                        verify_factorization=None, tol: float = COMPATIBILITY_TOL) -> list[ValueFunction]:
    """Classical state-space recursion ``V(x) = min_u E[V'(f(x, u, W))]``; ``result[t]`` is over ``X_t``."""
    _, kernels, reach = _unit_compatibility(problem, reduction, tol)
    jt = _resolve_reduced_criterion(problem, reduced_criterion)
    if _want_factorization_check(verify_factorization, problem.horizon):
        check_factorization(problem, reduction, jt)
    spaces = problem.spaces
    T = problem.horizon
    out = [ValueFunction(T, "reduced_state", _masked(jt, reach[T]))]
    for t in range(T - 1, -1, -1):
        n_x = reduction.state_size(t)
        f = reduction.block_dynamics(t, t + 1, spaces).reshape(n_x, spaces.controls[t].size, spaces.uncertainties[t + 1].size)
        vals, arg = _backend.min_expectation(out[-1].values[f], kernels.table(t, t + 1))
        out.append(ValueFunction(t, "reduced_state", _masked(vals, reach[t]), arg))
    return out[::-1]


def solve_additive_dp(problem: ProblemSpec, reduction: Reduction | None = None, *,
                      tol: float = COMPATIBILITY_TOL) -> list[ValueFunction]:
    """Recursion with the stage cost inside the expectation; ``result[t]`` is over ``X_t``."""
    crit = problem.criterion
    if not isinstance(crit, AdditiveCriterion):
        raise RepresentationError("solve_additive_dp needs a criterion declared additive")
    reduction = reduction or crit.reduction
    _, kernels, reach = _unit_compatibility(problem, reduction, tol)
    spaces = problem.spaces
    T = problem.horizon
    out = [ValueFunction(T, "reduced_state", _masked(crit.final_cost, reach[T]))]
    for t in range(T - 1, -1, -1):
        n_x = reduction.state_size(t)
        f = reduction.block_dynamics(t, t + 1, spaces).reshape(n_x, spaces.controls[t].size, spaces.uncertainties[t + 1].size)
        vals, arg = _backend.min_expectation(crit.stage_costs[t] + out[-1].values[f], kernels.table(t, t + 1))
        out.append(ValueFunction(t, "reduced_state", _masked(vals, reach[t]), arg))
    return out[::-1]


def additive_history_values(problem: ProblemSpec, vhat: Sequence[ValueFunction], t: int) -> np.ndarray:
    """``sum_{s<t} L_s`` along each stage-``t`` history plus ``vhat_t(theta_t(h))``."""
    crit = problem.criterion
    if not isinstance(crit, AdditiveCriterion):
        raise RepresentationError("criterion is not additive")
    spaces = problem.spaces
    return crit.accumulated(t, spaces) + vhat[t].values[crit.reduction.theta_array(t, spaces)]


def lift(values: ValueFunction, reduction: Reduction, problem) -> np.ndarray:
    """Pull a reduced table back to histories: ``V(h) = values(theta_t(h))``."""
    return values.values[reduction.theta_array(values.stage, problem)]
