"""Seeded random instances shared by the test modules."""
import numpy as np

from timeblocks import (
    DhdProblem,
    FinalStateCriterion,
    FullTableCriterion,
    ProblemSpec,
    StageSpaces,
    StepReduction,
    StochasticKernel,
)
from timeblocks.dhd import DhdReduction
from timeblocks.reduction import ReductionKey


def random_rows(rng, n, k, sparse=0.0):
    rows = rng.dirichlet(np.ones(k), size=n)
    if sparse and k > 1:
        kill = rng.random(rows.shape) < sparse
        kill[np.arange(n), rng.integers(0, k, n)] = False
        rows = np.where(kill, 0.0, rows)
        rows /= rows.sum(axis=1, keepdims=True)
    return rows


def random_sizes(rng, T, max_u=2, max_w=2):
    return [int(rng.integers(1, max_u + 1)) for _ in range(T)], [int(rng.integers(1, max_w + 1)) for _ in range(T + 1)]


def random_flat(rng, T=None, max_u=2, max_w=2, inf_frac=0.15, sparse=0.2):
    """History-dependent kernels and a full-table criterion with some +inf entries."""
    T = int(rng.integers(1, 4)) if T is None else T
    controls, noises = random_sizes(rng, T, max_u, max_w)
    spaces = StageSpaces.from_sizes(controls, noises)
    kernels = [
        StochasticKernel.full_table(s, random_rows(rng, spaces.history_count(s - 1), noises[s], sparse))
        for s in range(1, T + 1)
    ]
    j = rng.uniform(0, 10, spaces.history_count(T))
    j[rng.random(j.size) < inf_frac] = np.inf
    return ProblemSpec(spaces, kernels, FullTableCriterion(j))


def random_step_reduction(rng, spaces, max_x=3, injective_start=False):
    T = spaces.horizon
    sizes = [int(rng.integers(1, max_x + 1)) for _ in range(T + 1)]
    n0 = spaces.uncertainties[0].size
    if injective_start:
        sizes[0] = max(sizes[0], n0)
        initial = rng.permutation(sizes[0])[:n0]
    else:
        initial = rng.integers(0, sizes[0], n0)
    steps = [
        rng.integers(0, sizes[t + 1], (sizes[t], spaces.controls[t].size, spaces.uncertainties[t + 1].size))
        for t in range(T)
    ]
    return StepReduction(sizes, initial, steps)


def controlled_markov(rng, T=None, max_x=3, max_u=2, max_w=2, inf_frac=0.1, white=False, injective_start=False):
    """Kernels and criterion that see a history only through a random folded state.

    Such a reduction is compatible with every schedule.
    """
    T = int(rng.integers(1, 7)) if T is None else T
    controls, noises = random_sizes(rng, T, max_u, max_w)
    spaces = StageSpaces.from_sizes(controls, noises)
    red = random_step_reduction(rng, spaces, max_x, injective_start)
    kernels = []
    for s in range(1, T + 1):
        if white:
            kernels.append(StochasticKernel.white_noise(s, random_rows(rng, 1, noises[s])[0]))
        else:
            rows = random_rows(rng, red.state_size(s - 1), noises[s], 0.2)
            kernels.append(StochasticKernel.reduced_via_map(s, ReductionKey(red, s - 1, spaces), rows))
    jt = rng.uniform(0, 10, red.state_size(T))
    jt[rng.random(jt.size) < inf_frac] = np.inf
    return ProblemSpec(spaces, kernels, FinalStateCriterion(red, jt)), red, jt


def random_schedule(rng, T, min_len=1, max_len=3):
    bounds = [0]
    while bounds[-1] < T:
        bounds.append(min(T, bounds[-1] + int(rng.integers(min_len, max_len + 1))))
    return tuple(bounds)


def random_dhd(rng, S=None, max_size=2, white=False):
    S = int(rng.integers(1, 4)) if S is None else S
    pick = lambda: int(rng.integers(1, max_size + 1))  # noqa: E731
    sizes = dict(initial_size=pick(), head_sizes=[pick() for _ in range(S)], noise_sizes=[pick() for _ in range(S)],
                 tail_sizes=[pick() for _ in range(S)])
    probe = DhdProblem(**sizes, kernels=[StochasticKernel.white_noise(s, np.ones(n) / n)
                                         for s, n in enumerate(sizes["noise_sizes"], 1)],
                       criterion=FullTableCriterion([0.0]))
    kernels = []
    for s in range(1, S + 1):
        n = sizes["noise_sizes"][s - 1]
        if white:
            kernels.append(StochasticKernel.white_noise(s, random_rows(rng, 1, n)[0]))
        else:
            kernels.append(StochasticKernel.full_table(s, random_rows(rng, probe.history_space(s - 1).size, n, 0.2)))
    j = rng.uniform(0, 10, probe.history_space(S).size)
    return DhdProblem(**sizes, kernels=kernels, criterion=FullTableCriterion(j))


def random_dhd_reduction(rng, problem, max_x=3):
    S = problem.horizon
    sizes = [max(problem.initial_size, int(rng.integers(1, max_x + 1)))] + [int(rng.integers(1, max_x + 1))
                                                                            for _ in range(S)]
    initial = rng.permutation(sizes[0])[: problem.initial_size]
    steps = [rng.integers(0, sizes[s + 1], (sizes[s], problem.head_sizes[s], problem.noise_sizes[s],
                                            problem.tail_sizes[s])) for s in range(S)]
    return DhdReduction(sizes, initial, steps)


def inf_aware_delta(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    same_inf = np.isinf(a) & np.isinf(b)
    with np.errstate(invalid="ignore"):
        diff = np.where(same_inf, 0.0, np.abs(a - b))
    return float(diff.max()) if diff.size else 0.0
