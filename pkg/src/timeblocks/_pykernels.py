"""Pure-Python (numpy) versions of the compiled inner loops.

Same signatures and the same floating-point operation order as
``_ckernels`` so both backends return bit-identical tables.
"""
import numpy as np


def min_expectation(values, probs, out_value, out_arg, start, stop):
    block = values[start:stop]
    p = probs[start:stop]
    best = None
    arg = np.zeros(stop - start, dtype=np.int64)
    for u in range(block.shape[1]):
        acc = np.zeros(stop - start)
        for w in range(block.shape[2]):
            live = p[:, w] > 0.0
            acc[live] = acc[live] + p[live, w] * block[live, u, w]
        if best is None:
            best = acc
        else:
            better = acc < best
            best = np.where(better, acc, best)
            arg[better] = u
    out_value[start:stop] = best
    out_arg[start:stop] = arg


def min_last_axis(values, out_value, out_arg, start, stop):
    block = values[start:stop]
    out_arg[start:stop] = np.argmin(block, axis=1)
    out_value[start:stop] = block.min(axis=1)
