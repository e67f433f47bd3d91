import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import inf_aware_delta, random_flat
from timeblocks import (
    Feedback,
    FullTableCriterion,
    FunctionCriterion,
    History,
    ProblemSpec,
    StageSpaces,
    StochasticKernel,
    ValueFunction,
    apply_bellman,
    argmin_feedback,
    brute_force_value,
    compose_bellman,
    evaluate_feedback,
    solve_history_dp,
)
from timeblocks.bellman import check_budget, terminal_value
from timeblocks.core import CapacityError, InstanceMismatchError, InvalidRangeError

seeds = st.integers(0, 2**32 - 1)


def _one_step(probs, costs):
    spaces = StageSpaces.from_sizes([2], [1, len(probs)])
    return ProblemSpec(spaces, [StochasticKernel.white_noise(1, probs)], FullTableCriterion(costs))


def test_single_step_example():
    # phi over (u, w): (0,0)->0, (0,1)->2, (1,0)->1, (1,1)->3
    problem = _one_step([0.5, 0.5], [0, 2, 1, 3])
    out = apply_bellman(0, terminal_value(problem), problem)
    assert out.values.tolist() == [1.0]
    assert out.argmin.tolist() == [0]


def test_ties_go_to_smallest_control():
    problem = _one_step([0.5, 0.5], [1, 1, 1, 1])
    assert apply_bellman(0, terminal_value(problem), problem).argmin.tolist() == [0]


def test_infinite_cost_avoided_when_possible():
    problem = _one_step([0.5, 0.5], [math.inf, 0, 4, 4])
    out = apply_bellman(0, terminal_value(problem), problem)
    assert out.values.tolist() == [4.0]
    assert out.argmin.tolist() == [1]


def test_zero_probability_infinite_outcome_is_ignored():
    problem = _one_step([1.0, 0.0], [3, math.inf, 5, 5])
    assert apply_bellman(0, terminal_value(problem), problem).values.tolist() == [3.0]


def test_compose_equals_repeated_application():
    rng = np.random.default_rng(7)
    problem = random_flat(rng, T=2)
    phi = terminal_value(problem)
    twice = apply_bellman(0, apply_bellman(1, phi, problem), problem)
    assert np.array_equal(compose_bellman(0, 2, phi, problem).values, twice.values)
    assert compose_bellman(2, 2, phi, problem) is phi
    with pytest.raises(InvalidRangeError):
        compose_bellman(2, 1, phi, problem)


def test_evaluate_feedback_two_paths():
    spaces = StageSpaces.from_sizes([2], [1, 2])
    problem = ProblemSpec(spaces, [StochasticKernel.white_noise(1, [0.3, 0.7])],
                          FullTableCriterion([1.0, 2.0, 10.0, 20.0]))
    gamma = Feedback(spaces, 0, 0, {0: [1]})
    assert evaluate_feedback(0, History(0, (0,)), gamma, problem) == pytest.approx(0.3 * 10 + 0.7 * 20, abs=1e-12)


def test_history_dp_equals_brute_force_on_two_stages():
    rng = np.random.default_rng(11)
    spaces = StageSpaces.from_sizes([2, 2], [2, 2, 2])
    kernels = [StochasticKernel.full_table(s, rng.dirichlet([1, 1], spaces.history_count(s - 1))) for s in (1, 2)]
    problem = ProblemSpec(spaces, kernels, FullTableCriterion(rng.uniform(0, 5, spaces.history_count(2))))
    values = solve_history_dp(problem)
    for t in range(3):
        for entries in spaces.history_space(t):
            assert abs(values[t](entries) - brute_force_value(t, History(t, entries), problem)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_greedy_feedback_attains_value(seed):
    rng = np.random.default_rng(seed)
    problem = random_flat(rng)
    values = solve_history_dp(problem)
    gamma = argmin_feedback(values, problem)
    for entries in problem.history_space(0):
        assert inf_aware_delta(evaluate_feedback(0, History(0, entries), gamma, problem), values[0](entries)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_bellman_is_monotone(seed):
    rng = np.random.default_rng(seed)
    problem = random_flat(rng, inf_frac=0.0)
    t = int(rng.integers(0, problem.horizon))
    space = problem.history_space(t + 1)
    phi = rng.uniform(0, 5, space.size)
    psi = phi + rng.uniform(0, 1, space.size)
    psi[rng.random(space.size) < 0.2] = math.inf
    lo = apply_bellman(t, ValueFunction(t + 1, "history", phi, None, space), problem).values
    hi = apply_bellman(t, ValueFunction(t + 1, "history", psi, None, space), problem).values
    assert np.all(lo <= hi)


@settings(max_examples=60, deadline=None)
@given(seeds, st.floats(0, 1e6))
def test_constants_are_fixed_points(seed, c):
    rng = np.random.default_rng(seed)
    problem = random_flat(rng, inf_frac=0.0)
    t = int(rng.integers(0, problem.horizon))
    space = problem.history_space(t + 1)
    out = apply_bellman(t, ValueFunction(t + 1, "history", np.full(space.size, c), None, space), problem).values
    assert np.max(np.abs(out - c)) <= 1e-12 * max(1.0, c)


def test_budget_names_the_stage():
    spaces = StageSpaces.from_sizes([2] * 4, [2] * 5)
    problem = ProblemSpec(spaces, [StochasticKernel.white_noise(s, [0.5, 0.5]) for s in range(1, 5)],
                          FunctionCriterion(lambda e: 0.0))
    with pytest.raises(CapacityError, match="stage 2") as err:
        check_budget(problem, budget=30)
    assert err.value.stage == 2
    with pytest.raises(CapacityError):
        brute_force_value(0, History(0, (0,)), problem, cap=100)


def test_kernel_coverage_gap():
    spaces = StageSpaces.from_sizes([1, 1], [1, 1, 1])
    with pytest.raises(InstanceMismatchError, match="kernel coverage gap at stage 2"):
        ProblemSpec(spaces, [StochasticKernel.white_noise(1, [1.0])], FullTableCriterion([0.0]))


def test_value_tables_are_read_only():
    problem = _one_step([0.5, 0.5], [0, 2, 1, 3])
    values = solve_history_dp(problem)
    with pytest.raises(ValueError):
        values[0].values[0] = 5.0
    assert values[1]((0, 1, 1)) == 3.0
    assert values[1](History(1, (0, 0, 1))) == 2.0


def _every_history_feedback(problem, t):
    spaces = problem.spaces
    tables = [itertools.product(range(spaces.controls[s].size), repeat=spaces.history_count(s))
              for s in range(t, problem.horizon)]
    for combo in itertools.product(*(list(tab) for tab in tables)):
        yield Feedback(spaces, t, problem.horizon - 1, {t + i: np.array(c) for i, c in enumerate(combo)})


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_brute_force_is_the_best_feedback(seed):
    # every full history table, not just one per noise-tree node
    rng = np.random.default_rng(seed)
    while True:
        problem = random_flat(rng, T=2)
        t = 0
        n = sum(problem.spaces.history_count(s) for s in range(2))
        if n <= 12:
            break
    for entries in problem.history_space(t):
        h = History(t, entries)
        best = min(evaluate_feedback(t, h, g, problem) for g in _every_history_feedback(problem, t))
        assert brute_force_value(t, h, problem) == best
