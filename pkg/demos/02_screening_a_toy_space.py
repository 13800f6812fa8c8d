"""Screening on problems small enough to solve by hand.

Screening ranks candidate operations by the norm of their column of
softmax-ed architecture scores and repeatedly drops the weakest.  A sparsity
term rewards letting one column collapse, which pushes the scores apart.

Two toy problems make this visible without a detector in the loop:

1. Four operations that scale their input by 1, -1, 0 and 2, mixed to fit
   ``y = x``.  Any pair whose gains bracket 1 can fit exactly; screening to
   two should keep such a pair and throw away {zero, negate}, the only pair
   that cannot.
2. A fixed chain of eight gains.  With the sparsity weight switched on, the
   spread of the column norms after training should be larger than without.
"""

import numpy as np

from trinas.screening import four_op_screen, score_variance

print("four-op task")
for seed in range(3):
    kept, losses, best = four_op_screen(seed)
    print(f"  seed {seed}: kept {sorted(kept)}, loss of kept pair {losses[kept]:.3g} (best possible {best:.3g})")
worst = max(losses.values())
print(f"  the only pair that cannot fit: {[sorted(s) for s, v in losses.items() if v == worst]}")

print("\ncolumn-norm variance after 500 arch steps")
for seed in range(3):
    plain, sparse = score_variance(0.0, seed), score_variance(0.1, seed)
    print(f"  seed {seed}: mu=0 {plain:.2e}   mu=0.1 {sparse:.2e}   ratio {sparse / plain:.0f}x")
