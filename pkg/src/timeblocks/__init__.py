"""Multistage stochastic optimization over history spaces with time-block state reduction."""
from ._backend import available_backends, get_threads, set_backend, set_threads
from .bellman import (
    AdditiveCriterion,
    FinalStateCriterion,
    FullTableCriterion,
    FunctionCriterion,
    ProblemSpec,
    ValueFunction,
    apply_bellman,
    argmin_feedback,
    brute_force_value,
    compose_bellman,
    evaluate_feedback,
    solve_history_dp,
)
from .core import (
    CapacityError,
    Distribution,
    FiniteSpace,
    History,
    HistorySegment,
    HistorySpace,
    StageSpaces,
    TimeblocksError,
    extend_history,
    join_history,
    split_history,
)
from .dhd import (
    DhdProblem,
    DhdReduction,
    build_dam_instance,
    dhd_bellman_apply,
    embed_dhd,
    solve_dhd,
    solve_dhd_history,
)
from .kernels import Feedback, StochasticKernel, compose_feedback_kernel, compute_flow, feedback_kernel_row
from .noise import (
    NoiseProcessSpec,
    adapted_value_oracle,
    kernels_from_noise_process,
    solve_white_noise_2ts,
    solve_white_noise_dhd,
    solve_white_noise_dp,
)
from .reduction import (
    BlockSchedule,
    StepReduction,
    TableReduction,
    check_state_reduction,
    derive_reduced_kernels,
    lift,
    reduced_bellman,
    solve_additive_dp,
    solve_reduced_dp,
    solve_unit_block_dp,
)
from .two_timescale import TwoScaleClock, TwoScaleProblem, lex_index, lex_pair, solve_two_timescale

__version__ = "0.1.0"
