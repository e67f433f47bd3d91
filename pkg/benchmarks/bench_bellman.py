"""Time the compiled and numpy inner loops on the same inputs.

    python benchmarks/bench_bellman.py [--repeat 5] [--threads 1]

Reports the best wall time per backend for the raw min-expectation kernel
and for a full history DP, and checks that both backends return identical
tables.
"""
import argparse
import time

import numpy as np

from timeblocks import FullTableCriterion, ProblemSpec, StageSpaces, StochasticKernel, _backend, solve_history_dp


def best_of(repeat, func):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        out = func()
        times.append(time.perf_counter() - start)
    return min(times), out


def kernel_case(rng, rows, controls, outcomes):
    values = rng.uniform(0, 10, (rows, controls, outcomes))
    values[rng.random(values.shape) < 0.05] = np.inf
    probs = rng.dirichlet(np.ones(outcomes), rows)
    return values, probs


def history_problem(rng, T, n):
    spaces = StageSpaces.from_sizes([n] * T, [n] * (T + 1))
    kernels = [StochasticKernel.full_table(s, rng.dirichlet(np.ones(n), spaces.history_count(s - 1)))
               for s in range(1, T + 1)]
    return ProblemSpec(spaces, kernels, FullTableCriterion(rng.uniform(0, 10, spaces.history_count(T))))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    backends = _backend.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(args.seed)
    _backend.set_threads(args.threads)

    print(f"{'case':<34}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    cases = [("min_expectation 10^4 x 4 x 4", kernel_case(rng, 10_000, 4, 4)),
             ("min_expectation 10^5 x 8 x 8", kernel_case(rng, 100_000, 8, 8)),
             ("min_expectation 10^6 x 2 x 2", kernel_case(rng, 1_000_000, 2, 2))]
    for label, (values, probs) in cases:
        timings, outs = {}, {}
        for b in backends:
            timings[b], outs[b] = best_of(args.repeat, lambda: _backend.min_expectation(values, probs, backend=b))
        _report(label, backends, timings, outs)

    problem = history_problem(rng, T=4, n=3)
    timings, outs = {}, {}
    before = _backend.ACTIVE
    for b in backends:
        _backend.set_backend(b)
        timings[b], vfs = best_of(args.repeat, lambda: solve_history_dp(problem))
        outs[b] = (vfs[0].values, vfs[0].argmin)
    _backend.set_backend(before)
    _report("solve_history_dp T=4, sizes 3", backends, timings, outs)


def _report(label, backends, timings, outs):
    line = f"{label:<34}" + "".join(f"{timings[b] * 1e3:>10.2f}ms" for b in backends)
    if len(backends) == 2:
        line += f"{timings['python'] / timings['compiled']:>9.1f}x"
        a, b = outs["compiled"], outs["python"]
        if not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])):
            line += "  MISMATCH"
    print(line)


if __name__ == "__main__":
    main()
