import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import random_flat
from timeblocks import (
    Feedback,
    FullTableCriterion,
    History,
    ProblemSpec,
    StageSpaces,
    StochasticKernel,
    compose_feedback_kernel,
    compute_flow,
    feedback_kernel_row,
)
from timeblocks.core import FeedbackDomainError, InstanceMismatchError, InvalidRangeError, NormalizationError
from timeblocks.kernels import feedback_kernel_row_recursive


def _uniform_problem(T=2):
    spaces = StageSpaces.from_sizes([2] * T, [2] * (T + 1))
    kernels = [StochasticKernel.white_noise(s, [0.5, 0.5]) for s in range(1, T + 1)]
    return ProblemSpec(spaces, kernels, FullTableCriterion(np.zeros(spaces.history_count(T))))


def test_flow_two_steps_copies_last_outcome():
    problem = _uniform_problem()
    spaces = problem.spaces
    # stage 0 plays 1; stage 1 plays the outcome it just saw
    gamma = Feedback.from_function(spaces, 0, 1, lambda s, e: 1 if s == 0 else e[-1])
    h = compute_flow(0, 2, gamma, History(0, (0,)), (1, 0))
    assert h.entries == (0, 1, 1, 1, 0)


def test_flow_identity_when_no_steps():
    problem = _uniform_problem()
    gamma = Feedback.constant(problem.spaces, 0, 1)
    h = History(1, (1, 0, 1))
    assert compute_flow(1, 1, gamma, h, ()) == h


def test_kernel_from_feedback_uniform_two_steps():
    problem = _uniform_problem()
    gamma = Feedback.constant(problem.spaces, 0, 1, u=1)
    law = feedback_kernel_row(0, 2, gamma, problem, History(0, (0,)))
    assert len(law) == 4
    assert all(p == 0.25 for p in law.values())
    assert all(h[1] == 1 and h[3] == 1 for h in law)


def test_kernel_from_feedback_dirac_when_r_equals_t():
    problem = _uniform_problem()
    gamma = Feedback.constant(problem.spaces, 0, 1)
    table = compose_feedback_kernel(1, 1, gamma, problem)
    assert all(law == {h: 1.0} for h, law in table.items())


def test_feedback_validation():
    spaces = StageSpaces.from_sizes([2, 2], [2, 2, 2])
    with pytest.raises(FeedbackDomainError):
        Feedback(spaces, 0, 1, {0: [0, 0]})
    with pytest.raises(FeedbackDomainError):
        Feedback(spaces, 0, 0, {0: [0, 0, 0]})
    with pytest.raises(InstanceMismatchError):
        Feedback(spaces, 0, 0, {0: [0, 2]})
    with pytest.raises(InvalidRangeError):
        Feedback(spaces, 1, -1, {})
    empty = Feedback(spaces, 1, 0, {})
    assert empty.controls == {}
    with pytest.raises(FeedbackDomainError):
        compute_flow(0, 1, empty, History(0, (0,)), (0,))


def test_kernel_representations_agree():
    spaces = StageSpaces.from_sizes([2, 2], [2, 3, 2])
    rows = np.array([[0.2, 0.8], [0.5, 0.5], [1.0, 0.0]])
    markov = StochasticKernel.markov1(2, rows)
    space = spaces.history_space(1)
    full = StochasticKernel.full_table(2, np.array([rows[e[-1]] for e in space]))
    assert np.array_equal(markov.matrix(space), full.matrix(space))
    mapped = StochasticKernel.reduced_via_map(2, lambda e: e[-1], rows)
    assert np.array_equal(mapped.matrix(space), full.matrix(space))
    white = StochasticKernel.white_noise(2, [0.3, 0.7])
    assert np.all(white.matrix(space) == [0.3, 0.7])
    assert StochasticKernel.dirac(2, 2, 1).rows.tolist() == [[0.0, 1.0]]


def test_kernel_rejects_bad_rows():
    with pytest.raises(NormalizationError, match="tolerance 1e-12"):
        StochasticKernel.white_noise(1, [0.6, 0.3])
    with pytest.raises(InstanceMismatchError):
        StochasticKernel.full_table(0, [[1.0]])
    spaces = StageSpaces.from_sizes([2], [2, 2])
    with pytest.raises(InstanceMismatchError):
        StochasticKernel.full_table(1, [[1.0, 0.0]] * 3).matrix(spaces.history_space(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_direct_and_recursive_laws_match(seed):
    rng = np.random.default_rng(seed)
    problem = random_flat(rng, T=int(rng.integers(1, 4)), inf_frac=0.0)
    T = problem.horizon
    spaces = problem.spaces
    gamma = Feedback(spaces, 0, T - 1, {s: rng.integers(0, spaces.controls[s].size, spaces.history_count(s))
                                        for s in range(T)})
    r = int(rng.integers(0, T + 1))
    t = int(rng.integers(r, T + 1))
    for entries in spaces.history_space(r):
        a = feedback_kernel_row(r, t, gamma, problem, History(r, entries))
        b = feedback_kernel_row_recursive(r, t, gamma, problem, History(r, entries))
        assert set(a) == set(b)
        assert max(abs(a[k] - b[k]) for k in a) <= 1e-12
        assert abs(sum(a.values()) - 1.0) <= 1e-12
