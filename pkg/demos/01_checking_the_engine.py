"""Checking the numerical engine against slow references.

Everything the search relies on is computed by a small numpy autodiff
core.  Before trusting a search, it is worth seeing that core agree with
references that share none of its code:

* a convolution written as nested Python loops,
* a multiply counter that runs that loop convolution on zero tensors,
* central finite differences of the full search objective.

Run with ``python demos/01_checking_the_engine.py``; it takes a few seconds.
"""

import numpy as np

from trinas import tensor as T
from trinas.costmodel import LayerShape, flops_of
from trinas.opspace import build_block, full_catalogue
from trinas.oracles import count_block_multiplies, naive_conv2d
from trinas.selftest import ALL_CHECKS

# A single dilated, grouped, strided convolution, computed both ways.
rng = np.random.default_rng(0)
x = rng.normal(size=(1, 4, 9, 9))
w = rng.normal(size=(6, 2, 3, 3))
with T.precision(np.float64):
    fast = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=2, dilation=2, groups=2).data
slow, multiplies = naive_conv2d(x, w, stride=2, padding=2, dilation=2, groups=2)
print(f"conv: max difference {np.abs(fast - slow).max():.2e}, {multiplies} multiplies counted")

# The closed-form FLOPs of every candidate op against the counted multiplies.
shape = LayerShape(c_in=4, c_out=4, h=6, w=6)
print("\nop              formula   counted")
for op in list(full_catalogue())[::4]:
    counted = count_block_multiplies(build_block(op, 4, 4), 6, 6)
    print(f"{op.name:<15} {flops_of(op, shape):>7}   {counted:>7}")

# The same checks ``trinas selftest`` runs.
print()
for check in ALL_CHECKS:
    print(check().line())
