import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import inf_aware_delta, random_dhd, random_dhd_reduction, random_rows, random_step_reduction
from timeblocks import (
    AdditiveCriterion,
    DhdProblem,
    Distribution,
    FinalStateCriterion,
    FullTableCriterion,
    History,
    NoiseProcessSpec,
    ProblemSpec,
    StageSpaces,
    StepReduction,
    StochasticKernel,
    TwoScaleClock,
    TwoScaleProblem,
    build_dam_instance,
    lift,
    solve_dhd,
    solve_history_dp,
    solve_two_timescale,
    solve_unit_block_dp,
)
from timeblocks.core import (
    CapacityError,
    IndependenceError,
    InstanceMismatchError,
    NormalizationError,
    RepresentationError,
)
from timeblocks.noise import (
    adapted_value_oracle,
    dhd_adapted_oracle,
    kernels_from_noise_process,
    problem_from_noise,
    solve_white_noise_2ts,
    solve_white_noise_dhd,
    solve_white_noise_dp,
)
from timeblocks.reduction import running_sum_reduction

seeds = st.integers(0, 2**32 - 1)


def _random_joint(rng, sizes, zero_frac=0.2):
    joint = rng.dirichlet(np.ones(int(np.prod(sizes))))
    joint[rng.random(joint.size) < zero_frac] = 0.0
    if joint.sum() == 0:
        joint[0] = 1.0
    return (joint / joint.sum()).reshape(sizes)


def test_perfect_correlation_gives_dirac_row():
    spec = NoiseProcessSpec.joint_table([[0.5, 0.0], [0.0, 0.5]])
    for w0 in range(2):
        row, defined = spec.conditional_row((w0,))
        assert defined
        assert row.tolist() == [1.0 if w == w0 else 0.0 for w in range(2)]
    assert spec.conditional_row(())[0].tolist() == [0.5, 0.5]


def test_impossible_prefix_is_uniform_and_flagged():
    spec = NoiseProcessSpec.joint_table([[0.0, 0.0, 0.0], [0.2, 0.3, 0.5]])
    row, defined = spec.conditional_row((0,))
    assert not defined
    assert np.allclose(row, 1 / 3, rtol=0, atol=1e-15)
    assert kernels_from_noise_process(spec).flagged == {1: [(0,)]}


def test_white_rows_are_the_marginals():
    marg = [[1.0], [0.25, 0.75], [0.1, 0.2, 0.7]]
    spec = NoiseProcessSpec.white_noise(marg)
    problem = problem_from_noise(spec, [2, 3], FullTableCriterion(np.zeros(1 * 2 * 2 * 3 * 3)))
    for s in (1, 2):
        m = problem.kernel_matrix(s)
        assert np.all(m == np.asarray(marg[s]))
    assert not kernels_from_noise_process(spec).flagged


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_rows_ignore_control_entries(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 3)) for _ in range(T + 1)]
    spec = NoiseProcessSpec.joint_table(_random_joint(rng, sizes))
    controls = [int(rng.integers(1, 4)) for _ in range(T)]
    n = StageSpaces.from_sizes(controls, sizes).history_count(T)
    problem = problem_from_noise(spec, controls, FullTableCriterion(np.zeros(n)))
    for s in range(1, T + 1):
        space = problem.history_space(s - 1)
        m = problem.kernel_matrix(s)
        for i, e in enumerate(space):
            shuffled = list(e)
            for k in range(1, len(e), 2):
                shuffled[k] = int(rng.integers(0, controls[k // 2]))
            assert np.array_equal(m[i], m[space.index(tuple(shuffled))])


def test_joint_table_validation():
    with pytest.raises(CapacityError):
        NoiseProcessSpec.joint_table(np.full(8, 1 / 8), sizes=(2, 2, 2), path_cap=4)
    with pytest.raises(NormalizationError, match="tolerance 1e-12"):
        NoiseProcessSpec.joint_table([[0.5, 0.4], [0.0, 0.0]])


def _joint_problem(seed, T=None):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 4)) if T is None else T
    sizes = [int(rng.integers(1, 3)) for _ in range(T + 1)]
    controls = [int(rng.integers(1, 3)) for _ in range(T)]
    spec = NoiseProcessSpec.joint_table(_random_joint(rng, sizes))
    n = StageSpaces.from_sizes(controls, sizes).history_count(T)
    return problem_from_noise(spec, controls, FullTableCriterion(rng.uniform(0, 10, n))), spec


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_adapted_oracle_equals_history_dp(seed):
    problem, spec = _joint_problem(seed)
    values = solve_history_dp(problem)
    for t in range(problem.horizon + 1):
        for e in problem.history_space(t):
            assert abs(adapted_value_oracle(t, History(t, e), problem, spec) - values[t](e)) <= 1e-9


def test_two_stage_white_instance():
    rng = np.random.default_rng(71)
    spec = NoiseProcessSpec.white_noise([[0.5, 0.5], [0.3, 0.7], [0.6, 0.4]])
    n = StageSpaces.from_sizes([2, 2], [2, 2, 2]).history_count(2)
    problem = problem_from_noise(spec, [2, 2], FullTableCriterion(rng.uniform(0, 10, n)))
    values = solve_history_dp(problem)
    for t in range(3):
        for e in problem.history_space(t):
            assert abs(adapted_value_oracle(t, History(t, e), problem, spec) - values[t](e)) <= 1e-9
    # two stages of binary controls already give 2**3 noise feedbacks
    with pytest.raises(CapacityError):
        adapted_value_oracle(0, History(0, (0,)), problem, spec, cap=7)
    assert adapted_value_oracle(0, History(0, (0,)), problem, spec, cap=8) == values[0]((0,))


def test_last_stage_is_a_single_minimum():
    problem, spec = _joint_problem(73, T=1)
    table = problem.criterion_table().reshape(problem.spaces.noise_sizes[0], problem.spaces.controls[0].size, -1)
    for w0 in range(problem.spaces.noise_sizes[0]):
        law, _ = spec.conditional_row((w0,))
        expected = min(float(law @ table[w0, u]) for u in range(table.shape[1]))
        assert abs(adapted_value_oracle(0, History(0, (w0,)), problem, spec) - expected) <= 1e-12


def test_deterministic_noise_is_open_loop():
    rng = np.random.default_rng(79)
    spec = NoiseProcessSpec.white_noise([[1.0], [0.0, 1.0], [1.0, 0.0]])
    n = StageSpaces.from_sizes([3, 2], [1, 2, 2]).history_count(2)
    problem = problem_from_noise(spec, [3, 2], FullTableCriterion(rng.uniform(0, 10, n)))
    h = History(0, (0,))
    open_loop = min(problem.criterion_table()[problem.history_space(2).index((0, u0, 1, u1, 0))]
                    for u0 in range(3) for u1 in range(2))
    assert adapted_value_oracle(0, h, problem, spec) == open_loop
    assert adapted_value_oracle(0, h, problem, spec, information="clairvoyant") == open_loop


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_information_patterns_are_ordered(seed):
    problem, spec = _joint_problem(seed)
    for e in problem.history_space(0):
        h = History(0, e)
        adapted = adapted_value_oracle(0, h, problem, spec)
        with_controls = adapted_value_oracle(0, h, problem, spec, information="with_past_controls")
        clairvoyant = adapted_value_oracle(0, h, problem, spec, information="clairvoyant")
        assert abs(adapted - with_controls) <= 1e-9
        assert clairvoyant <= adapted + 1e-12


def test_oracle_errors():
    problem, spec = _joint_problem(83, T=3)
    h = History(0, (0,))
    with pytest.raises(InstanceMismatchError):
        adapted_value_oracle(0, h, problem, spec, information="psychic")
    skewed = np.zeros(spec.sizes)
    skewed.reshape(-1)[-1] = 1.0
    with pytest.raises(InstanceMismatchError, match="conditional law"):
        adapted_value_oracle(0, h, problem, NoiseProcessSpec.joint_table(skewed))


def _white_markov(seed, T=None):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 5)) if T is None else T
    controls = [int(rng.integers(1, 3)) for _ in range(T)]
    sizes = [int(rng.integers(1, 3)) for _ in range(T + 1)]
    spaces = StageSpaces.from_sizes(controls, sizes)
    red = random_step_reduction(rng, spaces, injective_start=True)
    spec = NoiseProcessSpec.white_noise([random_rows(rng, 1, n)[0] for n in sizes])
    jt = rng.uniform(0, 10, red.state_size(T))
    return problem_from_noise(spec, controls, FinalStateCriterion(red, jt)), red, spec


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_white_dp_equals_unit_block_dp(seed):
    problem, red, _ = _white_markov(seed)
    for a, b in zip(solve_white_noise_dp(problem, red), solve_unit_block_dp(problem, red)):
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.argmin, b.argmin)


def test_white_dp_with_dirac_marginals_is_deterministic():
    spec = NoiseProcessSpec.white_noise([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    spaces = StageSpaces.from_sizes([2, 2], [2, 2, 2])
    red = running_sum_reduction(spaces)
    jt = np.array([5.0, 3.0, 4.0, 1.0])
    problem = problem_from_noise(spec, [2, 2], FinalStateCriterion(red, jt))
    values = solve_white_noise_dp(problem, red)
    # the noise path is forced to (1, 0, 1), leaving a choice of controls only
    direct = min(jt[red.theta_array(2, spaces)[spaces.history_space(2).index((1, u0, 0, u1, 1))]]
                 for u0 in range(2) for u1 in range(2))
    assert values[0].values[red.theta_array(0, spaces)[1]] == direct


def test_additive_mode_with_zero_costs():
    rng = np.random.default_rng(89)
    spaces = StageSpaces.from_sizes([2, 2], [2, 2, 2])
    red = running_sum_reduction(spaces)
    final = rng.uniform(0, 5, red.state_size(2))
    spec = NoiseProcessSpec.white_noise([[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])
    zeros = [np.zeros((red.state_size(t), 2, 2)) for t in range(2)]
    additive = problem_from_noise(spec, [2, 2], AdditiveCriterion(red, zeros, final))
    plain = problem_from_noise(spec, [2, 2], FinalStateCriterion(red, final))
    for a, b in zip(solve_white_noise_dp(additive, red, "additive"), solve_white_noise_dp(plain, red)):
        assert np.array_equal(a.values, b.values)


def test_white_solvers_reject_other_kernels():
    problem, spec = _joint_problem(97, T=2)
    spaces = problem.spaces
    red = StepReduction([spaces.noise_sizes[0]] + [1] * 2, np.arange(spaces.noise_sizes[0]),
                        [np.zeros((spaces.noise_sizes[0] if t == 0 else 1, spaces.controls[t].size,
                                   spaces.uncertainties[t + 1].size), dtype=int) for t in range(2)])
    if all(k.kind == "white_noise" for k in problem.kernels):
        pytest.skip("random joint happened to be independent")
    with pytest.raises(RepresentationError):
        solve_white_noise_dp(problem, red)


def test_white_dp_needs_injective_start():
    spaces = StageSpaces.from_sizes([1], [2, 1])
    red = StepReduction([1, 1], [0, 0], [np.zeros((1, 1, 1), dtype=int)])
    spec = NoiseProcessSpec.white_noise([[0.5, 0.5], [1.0]])
    problem = problem_from_noise(spec, [1], FinalStateCriterion(red, [0.0]))
    with pytest.raises(RepresentationError):
        solve_white_noise_dp(problem, red)


def _day_problem(seed, D, M, white=False, one_point=False):
    rng = np.random.default_rng(seed)
    clock = TwoScaleClock(D, M)
    T = clock.flat_horizon
    sizes = [1 if one_point else int(rng.integers(1, 3)) for _ in range(T + 1)]
    if white:
        spec = NoiseProcessSpec.white_noise([random_rows(rng, 1, n)[0] for n in sizes])
    else:
        days = [_random_joint(rng, tuple(sizes[d * (M + 1) + 1: (d + 1) * (M + 1) + 1]), 0.1) for d in range(D + 1)]
        spec = NoiseProcessSpec.day_independent(clock, random_rows(rng, 1, sizes[0])[0], days)
    controls = [int(rng.integers(1, 3)) for _ in range(T)]
    spaces = StageSpaces.from_sizes(controls, sizes)
    red = random_step_reduction(rng, spaces, max_x=3, injective_start=True)
    jt = rng.uniform(0, 10, red.state_size(T))
    flat = problem_from_noise(spec, controls, FinalStateCriterion(red, jt))
    return TwoScaleProblem(clock, flat), spec, red


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_correlated_days_match_flat_dp(seed):
    problem, spec, red = _day_problem(seed, 1, 1)
    slow = solve_white_noise_2ts(problem, spec, red)
    flat = solve_history_dp(problem.flat)
    for d, vf in enumerate(slow):
        t = problem.clock.day_start(d)
        assert inf_aware_delta(flat[t].values, vf.values[red.theta_array(t, problem.flat.spaces)]) <= 1e-9
    for a, b in zip(slow, solve_two_timescale(problem, red)):
        assert inf_aware_delta(a.values, b.values) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(0, 3))
def test_single_minute_days_collapse_to_white_dp(seed, D):
    problem, spec, red = _day_problem(seed, D, 0, white=True)
    slow = solve_white_noise_2ts(problem, spec, red)
    unit = solve_white_noise_dp(problem.flat, red)
    assert len(slow) == len(unit)
    for a, b in zip(slow, unit):
        assert inf_aware_delta(a.values, b.values) <= 1e-9


def test_one_point_noises_are_a_lookup():
    problem, spec, red = _day_problem(101, 1, 1, one_point=True)
    flat = problem.flat
    jt = flat.criterion.values
    T = flat.horizon
    final = red.theta_array(T, flat.spaces)
    best = min(jt[final[flat.history_space(T).index((0,) + tuple(x for u in us for x in (u, 0)))]]
               for us in itertools.product(*(range(c.size) for c in flat.spaces.controls)))
    slow = solve_white_noise_2ts(problem, spec, red)
    assert slow[0].values[red.theta_array(0, flat.spaces)[0]] == best


def test_joint_that_does_not_split_into_days():
    joint = np.zeros((1, 2, 2))
    joint[0, 0, 0] = joint[0, 1, 1] = 0.5
    spec = NoiseProcessSpec.joint_table(joint)
    with pytest.raises(IndependenceError):
        spec.day_tables()
    with pytest.raises(IndependenceError):
        spec.with_clock(TwoScaleClock(1, 0)).day_tables()
    # the same correlation inside one day is fine
    initial, days = spec.with_clock(TwoScaleClock(0, 1)).day_tables()
    assert initial.probs.tolist() == [1.0] and days[0].tolist() == [[0.5, 0.0], [0.0, 0.5]]


def test_day_tables_shape_checks():
    clock = TwoScaleClock(1, 1)
    with pytest.raises(InstanceMismatchError):
        NoiseProcessSpec.day_independent(clock, [1.0], [np.full((2, 2), 0.25)])
    with pytest.raises(InstanceMismatchError):
        NoiseProcessSpec.day_independent(clock, [1.0], [np.full(4, 0.25)] * 2)


def _dam2(inflows=None, inflow_values=(0, 1)):
    inflows = inflows or [Distribution([0.5, 0.5])] * 2
    return build_dam_instance(capacity=2, inflow_values=list(inflow_values), inflows=inflows, turbine=[0, 1],
                              revenue=[[0, 3]] * 2, periods=2, variant="spill_control")


def test_white_dhd_on_the_dam():
    dam = _dam2()
    red = dam.criterion.reduction
    white = solve_white_noise_dhd(dam, red)
    for a, b in zip(white, solve_dhd(dam, red)):
        assert inf_aware_delta(a.values, b.values) <= 1e-9
    theta0 = red.theta_array(0, dam)
    assert white[0].values[theta0].tolist() == [6.0, 3.0, 1.0]
    for stock in range(3):
        assert abs(dhd_adapted_oracle(0, (stock,), dam) - white[0].values[theta0[stock]]) <= 1e-9


def test_white_dhd_with_dirac_inflow():
    dam = _dam2([Distribution([0.0, 1.0])] * 2)
    red = dam.criterion.reduction
    theta0 = red.theta_array(0, dam)
    values = solve_white_noise_dhd(dam, red)[0].values[theta0]
    # one unit arrives every period; an empty dam must idle once before it can turbine
    assert values.tolist() == [4.0, 1.0, 0.0]
    assert inf_aware_delta(values, solve_dhd(dam, red)[0].values[theta0]) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_singleton_tail_white_dhd_is_white_dp(seed):
    rng = np.random.default_rng(seed)
    S = int(rng.integers(1, 4))
    head = [int(rng.integers(1, 3)) for _ in range(S)]
    noise = [int(rng.integers(1, 3)) for _ in range(S + 1)]
    marg = [random_rows(rng, 1, n)[0] for n in noise]
    dhd = DhdProblem(noise[0], head, noise[1:], [1] * S,
                     [StochasticKernel.white_noise(s, marg[s]) for s in range(1, S + 1)], FullTableCriterion([0.0]))
    dred = random_dhd_reduction(rng, dhd)
    jt = rng.uniform(0, 5, dred.state_size(S))
    spaces = StageSpaces.from_sizes(head, noise)
    red = StepReduction(dred.state_sizes, dred.initial, [step[..., 0] for step in dred.steps])
    flat = ProblemSpec(spaces, [StochasticKernel.white_noise(s, marg[s]) for s in range(1, S + 1)],
                       FinalStateCriterion(red, jt))
    a = solve_white_noise_dhd(dhd, dred, jt, verify_factorization=False)
    b = solve_white_noise_dp(flat, red)
    for x, y in zip(a, b):
        assert inf_aware_delta(x.values, y.values) <= 1e-9


def test_dhd_white_solver_rejects_history_kernels():
    problem = random_dhd(np.random.default_rng(103), S=2)
    while all(k.kind == "white_noise" for k in problem.kernels):
        problem = random_dhd(np.random.default_rng(104), S=2)
    red = random_dhd_reduction(np.random.default_rng(105), problem)
    with pytest.raises(RepresentationError):
        solve_white_noise_dhd(problem, red, np.zeros(red.state_size(2)))
    with pytest.raises(RepresentationError):
        dhd_adapted_oracle(0, (0,), problem)


def test_dhd_oracle_cap():
    with pytest.raises(CapacityError):
        dhd_adapted_oracle(0, (0,), _dam2(), cap=100)
