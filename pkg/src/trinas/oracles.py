"""Reference implementations used to check the fast paths.

These are deliberately slow and literal: plain Python loops over every output
element and kernel tap, with no shared code from :mod:`trinas.tensor`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct convolution by nested loops.

    Returns ``(output, multiplies)`` where ``multiplies`` counts every
    multiply performed, padded taps included.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wid = x.shape
    cout, cg, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wid + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wid] = x
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wid + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    og = cout // groups
    out = np.zeros((n, cout, ho, wo))
    mults = 0
    for b_ in range(n):
        for o in range(cout):
            grp = o // og
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for i in range(k):
                            for j in range(k):
                                acc += (xp[b_, grp * cg + ci, r * stride + i * dilation, s * stride + j * dilation]
                                        * w[o, ci, i, j])
                                mults += 1
                    out[b_, o, r, s] = acc + (0.0 if b is None else float(b[o]))
    return out, mults // n


def count_conv_multiplies(c_in, c_out, k, h_in, w_in, stride=1, dilation=1, groups=1):
    """Multiply count of a single-image convolution, by running the loop oracle
    on a zero input of the requested shape."""
    pad = dilation * (k - 1) // 2
    _, mults = naive_conv2d(np.zeros((1, c_in, h_in, w_in)), np.zeros((c_out, c_in // groups, k, k)),
                            stride=stride, padding=pad, dilation=dilation, groups=groups)
    return mults


def finite_difference(f: Callable[[], float], array: np.ndarray, index, h: float = 1e-4) -> float:
    """Central difference of ``f`` w.r.t. ``array[index]`` (perturbed in place)."""
    old = array[index]
    array[index] = old + h
    fp = f()
    array[index] = old - h
    fm = f()
    array[index] = old
    return (fp - fm) / (2 * h)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(array, dtype=np.float64)
    for idx in np.ndindex(array.shape):
        grad[idx] = finite_difference(f, array, idx, h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def count_block_multiplies(block, h_in: int, w_in: int) -> int:
    """Multiplies performed by a built block on one ``h_in x w_in`` image,
    counted by pushing a zero input through the loop oracle unit by unit."""
    x = np.zeros((1, block.c_in, h_in, w_in))
    total = 0
    for unit in block.units:
        w = np.zeros(unit.weight.shape)
        x, mults = naive_conv2d(x, w, stride=unit.stride, padding=unit.padding,
                                dilation=unit.dilation, groups=unit.groups)
        total += mults
    return total
