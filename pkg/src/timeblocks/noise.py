"""Problems driven by an exogenous noise process.

The noise law is given directly (a joint table, independent marginals or
independent day blocks) and the stage kernels are its conditional laws
given past noise only. The adapted oracle searches over controls that are
functions of observed noise, which is a different search space from the
history feedbacks of :mod:`timeblocks.bellman`; the two must agree.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _backend
from .bellman import AdditiveCriterion, ProblemSpec, ValueFunction
from .core import (
    NORMALIZATION_TOL,
    CapacityError,
    Distribution,
    History,
    IncompatibleReductionError,
    IndependenceError,
    InstanceMismatchError,
    NormalizationError,
    RepresentationError,
    StageSpaces,
    as_cost_array,
)
from .dhd import DhdProblem, DhdReduction, dhd_reachable
from .kernels import StochasticKernel
from .reduction import (
    BlockSchedule,
    Reduction,
    _masked,
    _resolve_reduced_criterion,
    _want_factorization_check,
    check_factorization,
    check_state_reduction,
    reachable_states,
)
from .two_timescale import TwoScaleClock, TwoScaleProblem, lex_pair

DEFAULT_PATH_CAP = 10**5
DEFAULT_ORACLE_CAP = 10**7
ORACLE_CHUNK = 1 << 16


class NoiseProcessSpec:
    """Law of ``(W_0, ..., W_T)`` on finite spaces.

    Build with :meth:`joint_table`, :meth:`white_noise` or
    :meth:`day_independent`.
    """

    def __init__(self, kind: str, sizes: Sequence[int], *, joint=None, marginals=None,
                 clock: TwoScaleClock | None = None, initial=None, days=None):
        self.kind = kind
        self.sizes = tuple(int(n) for n in sizes)
        self.joint = joint
        self.marginals = marginals
        self.clock = clock
        self.initial = initial
        self.days = days
        self._prefix_tables = {}

    @property
    def horizon(self) -> int:
        return len(self.sizes) - 1

    @classmethod
    def joint_table(cls, probs, sizes: Sequence[int] | None = None, path_cap: int = DEFAULT_PATH_CAP):
        arr = np.array(probs, dtype=np.float64)
        if sizes is not None:
            arr = arr.reshape(tuple(sizes))
        if arr.size > path_cap:
            raise CapacityError(f"joint table lists {arr.size} paths, above the cap of {path_cap}")
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise NormalizationError("joint probabilities must be finite and nonnegative")
        total = float(arr.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise NormalizationError(
                f"joint table sums to {total!r}, outside tolerance {NORMALIZATION_TOL:g} of 1"
            )
        arr.setflags(write=False)
        return cls("joint_table", arr.shape, joint=arr)

    @classmethod
    def white_noise(cls, marginals: Sequence):
        dists = [m if isinstance(m, Distribution) else Distribution(m) for m in marginals]
        return cls("white_noise", [len(d) for d in dists], marginals=dists)

    @classmethod
    def day_independent(cls, clock: TwoScaleClock, initial, days: Sequence, path_cap: int = DEFAULT_PATH_CAP):
        """``initial`` is the law of ``w_{0,0}``; ``days[d]`` is the joint law of
        ``(w_{d,1}, ..., w_{d,M}, w_{d+1,0})``, independent across days."""
        init = initial if isinstance(initial, Distribution) else Distribution(initial)
        if len(days) != clock.days + 1:
            raise InstanceMismatchError(f"need {clock.days + 1} day tables, got {len(days)}")
        tables = []
        sizes = [len(init)]
        for d, table in enumerate(days):
            arr = np.array(table, dtype=np.float64)
            if arr.ndim != clock.minutes + 1:
                raise InstanceMismatchError(f"day-{d} table must have {clock.minutes + 1} axes")
            if arr.size > path_cap:
                raise CapacityError(f"day-{d} table lists {arr.size} paths, above the cap of {path_cap}")
            if not np.isfinite(arr).all() or (arr < 0).any() or abs(arr.sum() - 1.0) > NORMALIZATION_TOL:
                raise NormalizationError(
                    f"day-{d} table must be a distribution (tolerance {NORMALIZATION_TOL:g})"
                )
            arr.setflags(write=False)
            tables.append(arr)
            sizes.extend(arr.shape)
        return cls("day_independent", sizes, clock=clock, initial=init, days=tables)

    # conditional laws ---------------------------------------------------

    def _block(self, k: int):
        """For a day-independent spec: (table, first stage of its block) holding stage ``k``."""
        d, m = lex_pair(self.clock, k)
        day = d if m >= 1 else d - 1
        return self.days[day], k - (m if m >= 1 else self.clock.minutes + 1) + 1

    def _prefix_marginal(self, table: np.ndarray, length: int) -> np.ndarray:
        key = (id(table), length)
        if key not in self._prefix_tables:
            axes = tuple(range(length, table.ndim))
            self._prefix_tables[key] = table.sum(axis=axes) if axes else table
        return self._prefix_tables[key]

    def conditional_row(self, prefix: Sequence[int]) -> tuple[np.ndarray, bool]:
        """Law of ``w_k`` given ``w_0..w_{k-1} = prefix`` and whether it is well defined.

        Where the conditioning path has probability zero the row is uniform
        and the flag is ``False``.
        """
        k = len(prefix)
        if not 0 <= k <= self.horizon:
            raise InstanceMismatchError(f"prefix of length {k} for horizon {self.horizon}")
        if self.kind == "white_noise":
            return self.marginals[k].probs, True
        if self.kind == "joint_table":
            table, local = self.joint, tuple(prefix)
        elif k == 0:
            return self.initial.probs, True
        else:
            table, start = self._block(k)
            local = tuple(prefix[start:])
        num = self._prefix_marginal(table, len(local) + 1)[local]
        total = num.sum()
        if total <= 0.0:
            return np.full(num.size, 1.0 / num.size), False
        return num / total, True

    def path_probability(self, path: Sequence[int], start: int = 0) -> float:
        """Product of conditional rows along ``path[start:]`` given ``path[:start]``."""
        p = 1.0
        for k in range(start, len(path)):
            p = p * self.conditional_row(path[:k])[0][path[k]]
        return p

    def day_tables(self):
        """``(initial, days)`` for a spec whose day blocks are independent.

        Joint tables are split and checked: the product of the block
        marginals must reproduce the joint within 1e-12.
        """
        if self.kind == "day_independent":
            return self.initial, self.days
        if self.clock is None:
            raise IndependenceError("attach a clock to split the noise law into days")
        if self.kind == "white_noise":
            M = self.clock.minutes
            days = []
            for d in range(self.clock.days + 1):
                t0 = d * (M + 1) + 1
                table = np.ones(())
                for k in range(t0, t0 + M + 1):
                    table = np.multiply.outer(table, self.marginals[k].probs)
                days.append(table)
            return self.marginals[0], days
        joint = self.joint
        M = self.clock.minutes
        initial = Distribution(joint.sum(axis=tuple(range(1, joint.ndim))))
        days = []
        product = initial.probs
        for d in range(self.clock.days + 1):
            t0 = d * (M + 1) + 1
            keep = set(range(t0, t0 + M + 1))
            table = joint.sum(axis=tuple(a for a in range(joint.ndim) if a not in keep))
            days.append(table)
            product = np.multiply.outer(product, table)
        if np.abs(product - joint).max() > NORMALIZATION_TOL:
            raise IndependenceError("the joint noise law does not factor into independent day blocks")
        return initial, days

    def with_clock(self, clock: TwoScaleClock) -> "NoiseProcessSpec":
        if clock.flat_horizon != self.horizon:
            raise InstanceMismatchError("clock horizon differs from the noise horizon")
        out = NoiseProcessSpec(self.kind, self.sizes, joint=self.joint, marginals=self.marginals,
                               clock=clock, initial=self.initial, days=self.days)
        return out


class NoisePrefixKey:
    """Kernel key: index of the uncertainty part ``(w_0..w_{s-1})`` of a history."""

    def __init__(self, sizes: Sequence[int]):
        self.sizes = tuple(sizes)

    def __call__(self, entries):
        return int(np.ravel_multi_index(tuple(entries[0::2]), self.sizes))

    def array(self, space):
        pos = [i for i, kind in enumerate(space.kinds) if kind == "w"]
        digits = space.digits()[:, pos]
        return np.ravel_multi_index(tuple(digits.T), self.sizes)


@dataclass
class NoiseKernels:
    kernels: list
    flagged: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.kernels)


def kernels_from_noise_process(spec: NoiseProcessSpec) -> NoiseKernels:
    """Stage kernels given by the conditional law of each noise on past noise.

    Rows whose conditioning path has probability zero are uniform; their
    noise prefixes are listed in ``flagged[stage]``.
    """
    out = NoiseKernels([])
    for s in range(1, spec.horizon + 1):
        if spec.kind == "white_noise":
            out.kernels.append(StochasticKernel.white_noise(s, spec.marginals[s]))
            continue
        prefixes = list(itertools.product(*(range(n) for n in spec.sizes[:s])))
        rows = np.empty((len(prefixes), spec.sizes[s]))
        for i, prefix in enumerate(prefixes):
            rows[i], defined = spec.conditional_row(prefix)
            if not defined:
                out.flagged.setdefault(s, []).append(prefix)
        out.kernels.append(StochasticKernel.reduced_via_map(s, NoisePrefixKey(spec.sizes[:s]), rows))
    return out


def problem_from_noise(spec: NoiseProcessSpec, control_sizes: Sequence[int], criterion, name="") -> ProblemSpec:
    spaces = StageSpaces.from_sizes(control_sizes, spec.sizes)
    return ProblemSpec(spaces, kernels_from_noise_process(spec).kernels, criterion, name)


def _check_kernels_match(problem: ProblemSpec, spec: NoiseProcessSpec):
    if problem.spaces.noise_sizes != spec.sizes:
        raise InstanceMismatchError("problem uncertainty spaces differ from the noise process")
    derived = kernels_from_noise_process(spec).kernels
    for s in range(1, problem.horizon + 1):
        space = problem.history_space(s - 1)
        if np.abs(problem.kernel_matrix(s) - derived[s - 1].matrix(space)).max() > NORMALIZATION_TOL:
            raise InstanceMismatchError(f"stage-{s} kernel is not the conditional law of the noise process")


# -- adapted oracle ---------------------------------------------------------

INFORMATION_PATTERNS = ("adapted", "with_past_controls", "clairvoyant")


def adapted_value_oracle(t: int, h_t: History, problem: ProblemSpec, spec: NoiseProcessSpec, *,
                         cap: int = DEFAULT_ORACLE_CAP, information: str = "adapted") -> float:
    """Exact minimum of ``E[j | w_0..w_t]`` over controls built from observed noise.

    ``information`` selects what the stage-``s`` control may depend on:
    ``adapted`` sees ``w_{t+1..s}``; ``with_past_controls`` also sees
    ``u_{t..s-1}``; ``clairvoyant`` sees the whole future ``w_{t+1..T}``.
    ``adapted`` enumerates every noise feedback and is the oracle proper;
    the other two are evaluated directly and serve as reference bounds.
    """
    if information not in INFORMATION_PATTERNS:
        raise InstanceMismatchError(f"unknown information pattern {information!r}")
    _check_kernels_match(problem, spec)
    if h_t.stage != t:
        raise InstanceMismatchError(f"expected a stage-{t} history")
    h_t.check(problem.spaces)
    T = problem.horizon
    spaces = problem.spaces
    table = problem.criterion_table()
    final = problem.history_space(T)
    if t == T:
        return float(table[final.index(h_t.entries)])
    future = [range(spaces.uncertainties[k].size) for k in range(t + 1, T + 1)]
    paths = list(itertools.product(*future))
    past = h_t.uncertainties
    probs = [spec.path_probability(past + path, start=t + 1) for path in paths]

    def criterion(entries):
        return table[final.index(entries)]

    if information == "clairvoyant":
        # each path gets its own best open-loop control sequence
        sequences = list(itertools.product(*(range(spaces.controls[s].size) for s in range(t, T))))
        total = 0.0
        for path, p in zip(paths, probs):
            if p == 0.0:
                continue
            best = min(criterion(h_t.entries + tuple(x for pair in zip(seq, path) for x in pair))
                       for seq in sequences)
            total += p * best
        return total

    if information == "with_past_controls":
        # a control may read its own past controls: backward min over the tree
        def node(s, entries, noise):
            if s == T:
                return criterion(entries)
            law, _ = spec.conditional_row(past + noise)
            best = math.inf
            for u in range(spaces.controls[s].size):
                acc = 0.0
                for w in range(spaces.uncertainties[s + 1].size):
                    if law[w] > 0.0:
                        acc += law[w] * node(s + 1, entries + (u, w), noise + (w,))
                best = min(best, acc)
            return best

        return node(t, h_t.entries, ())

    slots = [(s, obs) for s in range(t, T) for obs in itertools.product(*future[: s - t])]
    count = 1
    for s, _ in slots:
        count *= spaces.controls[s].size
        if count > cap:
            raise CapacityError(f"noise feedbacks from stage {t} exceed the enumeration cap {cap}", stage=t)

    # Noise feedbacks are numbered in mixed radix over the slots and scored a
    # chunk at a time; each path reads its controls off the digits.
    radix = np.array([spaces.controls[s].size for s, _ in slots], dtype=np.int64)
    stride = np.ones(len(slots), dtype=np.int64)
    for i in range(len(slots) - 2, -1, -1):
        stride[i] = stride[i + 1] * radix[i + 1]
    where = {slot: i for i, slot in enumerate(slots)}
    live = [(path, p) for path, p in zip(paths, probs) if p > 0.0]
    base = problem.history_space(t).index(h_t.entries)
    best = math.inf
    for lo in range(0, count, ORACLE_CHUNK):
        choice = np.arange(lo, min(count, lo + ORACLE_CHUNK), dtype=np.int64)
        total = np.zeros(choice.size)
        for path, p in live:
            idx = np.full(choice.size, base, dtype=np.int64)
            for s, w in zip(range(t, T), path):
                i = where[(s, path[: s - t])]
                u = (choice // stride[i]) % radix[i]
                idx = (idx * radix[i] + u) * spaces.uncertainties[s + 1].size + w
            total += p * table[idx]
        best = min(best, float(total.min()))
    return best


# -- white-noise solvers ----------------------------------------------------

def _require_white(kernels):
    for k in kernels:
        if k.kind != "white_noise":
            raise RepresentationError(f"stage-{k.stage} kernel is {k.kind}, a white-noise solver needs independent noise")


def _require_injective_start(theta0: np.ndarray):
    if np.unique(theta0).size != theta0.size:
        raise RepresentationError("the initial state map must identify the initial uncertainty")


def solve_white_noise_dp(problem: ProblemSpec, reduction: Reduction, mode: str = "final_cost",
                         reduced_criterion=None, *, verify: bool = True, verify_factorization=None) -> list[ValueFunction]:
    """State recursion with the stage marginals as transition laws; ``result[t]`` is over ``X_t``.

    ``final_cost`` mode takes ``min_u E[V'(f(x, u, W))]``; ``additive`` mode
    adds the stage cost ``L_t(x, u, W)`` inside the expectation.
    """
    _require_white(problem.kernels)
    spaces = problem.spaces
    T = problem.horizon
    _require_injective_start(reduction.theta_array(0, spaces))
    schedule = BlockSchedule.unit(T)
    if verify:
        verdict = check_state_reduction(reduction, schedule, problem)
        if not verdict.ok:
            raise IncompatibleReductionError(verdict.describe(), verdict)
    reach = reachable_states(reduction, schedule, problem)
    if mode == "final_cost":
        terminal = _resolve_reduced_criterion(problem, reduced_criterion)
        if _want_factorization_check(verify_factorization, T):
            check_factorization(problem, reduction, terminal)
        stage_costs = None
    elif mode == "additive":
        crit = problem.criterion
        if not isinstance(crit, AdditiveCriterion):
            raise RepresentationError("additive mode needs a criterion declared additive")
        terminal, stage_costs = crit.final_cost, crit.stage_costs
    else:
        raise InstanceMismatchError(f"unknown mode {mode!r}")
    out = [ValueFunction(T, "reduced_state", _masked(terminal, reach[T]))]
    for t in range(T - 1, -1, -1):
        n_x, n_u, n_w = reduction.state_size(t), spaces.controls[t].size, spaces.uncertainties[t + 1].size
        nxt = out[-1].values[reduction.block_dynamics(t, t + 1, spaces).reshape(n_x, n_u, n_w)]
        if stage_costs is not None:
            nxt = stage_costs[t] + nxt
        probs = np.broadcast_to(problem.kernel(t + 1).rows, (n_x, n_w))
        vals, arg = _backend.min_expectation(nxt, probs)
        out.append(ValueFunction(t, "reduced_state", _masked(vals, reach[t]), arg))
    return out[::-1]


def solve_white_noise_2ts(problem: TwoScaleProblem, spec: NoiseProcessSpec, reduction: Reduction,
                          reduced_criterion=None, *, verify_factorization=None) -> list[ValueFunction]:
    """Slow-scale recursion with independent day blocks; ``result[d]`` is over day-``d`` states.

    Each day is solved on its own noise tree built from the day's joint law;
    controls at a node may depend on the noise seen so far that day (and on
    the controls that noise induced), never on later noise.
    """
    flat = problem.flat
    clock = problem.clock
    if spec.clock is None and spec.kind != "day_independent":
        spec = spec.with_clock(clock)
    initial, days = spec.day_tables()
    _check_kernels_match(flat, spec)
    spaces = flat.spaces
    _require_injective_start(reduction.theta_array(0, spaces))
    schedule = clock.schedule()
    verdict = check_state_reduction(reduction, schedule, flat)
    if not verdict.ok:
        raise IncompatibleReductionError(verdict.describe(), verdict)
    jt = _resolve_reduced_criterion(flat, reduced_criterion)
    if _want_factorization_check(verify_factorization, flat.horizon):
        check_factorization(flat, reduction, jt)
    reach = reachable_states(reduction, schedule, flat)
    T = flat.horizon
    out = [ValueFunction(T, "reduced_state", _masked(jt, reach[T]))]
    for d in range(clock.days, -1, -1):
        r, t = clock.day_start(d), clock.day_start(d + 1)
        landing = reduction.block_dynamics(r, t, spaces)
        day = days[d]
        nxt = out[-1].values
        vals = np.full(reduction.state_size(r), math.inf)
        arg = np.zeros(reduction.state_size(r), dtype=np.int64)

        def node(x, s, noise, seg_index):
            if s == t:
                return float(nxt[landing[x, seg_index]])
            weights = day[tuple(noise)]
            if weights.ndim > 1:
                weights = weights.reshape(weights.shape[0], -1).sum(axis=1)
            mass = weights.sum()
            law = weights / mass if mass > 0 else np.full(weights.size, 1.0 / weights.size)
            n_u, n_w = spaces.controls[s].size, spaces.uncertainties[s + 1].size
            best = None
            for u in range(n_u):
                acc = 0.0
                for w in range(n_w):
                    if law[w] > 0.0:
                        acc = acc + law[w] * node(x, s + 1, noise + [w], (seg_index * n_u + u) * n_w + w)
                if best is None or acc < best[0]:
                    best = (acc, u)
            return best if s == r else best[0]

        for x in np.flatnonzero(reach[r]):
            vals[x], arg[x] = node(int(x), r, [], 0)
        out.append(ValueFunction(r, "reduced_state", vals, arg))
    return out[::-1]


def solve_white_noise_dhd(problem: DhdProblem, reduction: DhdReduction, reduced_criterion=None, *,
                          verify_factorization=None) -> list[ValueFunction]:
    """``V(x) = min_head E[min_tail V'(f(x, head, W, tail))]`` with the noise marginals."""
    _require_white(problem.kernels)
    _require_injective_start(reduction.theta_array(0, problem))
    jt = _resolve_reduced_criterion(problem, reduced_criterion)
    if _want_factorization_check(verify_factorization, problem.horizon):
        check_factorization(problem, reduction, jt)
    reach = dhd_reachable(problem, reduction)
    S = problem.horizon
    out = [ValueFunction(S, "reduced_state", _masked(jt, reach[S]))]
    for s in range(S - 1, -1, -1):
        p = problem.kernel(s + 1).rows[0]
        after = out[-1].values[reduction.steps[s]]
        inner = after.min(axis=3)
        acc = np.zeros(inner.shape[:2])
        for w in range(p.size):
            if p[w] > 0.0:
                acc = acc + p[w] * inner[:, :, w]
        out.append(ValueFunction(s, "reduced_state", _masked(acc.min(axis=1), reach[s]), acc.argmin(axis=1),
                                 policy={"tail": after.argmin(axis=3)}))
    return out[::-1]


def dhd_adapted_oracle(s: int, head_entries: Sequence[int], problem: DhdProblem, *,
                       cap: int = DEFAULT_ORACLE_CAP) -> float:
    """Minimum expected criterion over head and tail controls adapted to the noise.

    The head control of period ``k`` sees ``w_{s+1..k}``, the tail control
    right after it also sees ``w_{k+1}``. Requires white noise.
    """
    _require_white(problem.kernels)
    S = problem.horizon
    table = problem.criterion_table()
    final = problem.history_space(S)
    head_entries = tuple(head_entries)
    problem.history_space(s).index(head_entries)
    if s == S:
        return float(table[final.index(head_entries)])
    future = [range(problem.noise_sizes[k]) for k in range(s, S)]
    paths = list(itertools.product(*future))
    probs = []
    for path in paths:
        p = 1.0
        for k, w in zip(range(s, S), path):
            p = p * problem.kernel(k + 1).rows[0][w]
        probs.append(p)
    slots = []
    for k in range(s, S):
        for prefix in itertools.product(*future[: k - s]):
            slots.append(("head", k, prefix))
        for prefix in itertools.product(*future[: k - s + 1]):
            slots.append(("tail", k, prefix))
    sizes = [problem.head_sizes[k] if kind == "head" else problem.tail_sizes[k] for kind, k, _ in slots]
    if math.prod(sizes) > cap:
        raise CapacityError(f"adapted head/tail controls exceed the enumeration cap {cap}", stage=s)
    best = math.inf
    for choice in itertools.product(*(range(n) for n in sizes)):
        policy = dict(zip(slots, choice))
        total = 0.0
        for path, p in zip(paths, probs):
            if p == 0.0:
                continue
            entries = head_entries
            for k, w in zip(range(s, S), path):
                i = k - s
                entries = entries + (policy[("head", k, path[:i])], w, policy[("tail", k, path[: i + 1])])
            total += p * table[final.index(entries)]
        best = min(best, total)
    return best
