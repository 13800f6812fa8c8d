"""How the cost weight trades accuracy for compute.

The architecture objective adds ``lam`` times the expected MACs of the
mixture (normalised so the uniform mixture costs 1).  This script runs two
short searches that differ only in ``lam`` and decodes both.  The larger
weight should end up with a cheaper architecture.

A short search (3 epochs on 64 images per split) keeps this under two
minutes; pass ``--epochs 8 --samples 256`` for the desk acceptance setting.
"""

import argparse
import time

from trinas.archio import decode
from trinas.opspace import COMPONENTS, appendix_subspace
from trinas.search import SearchConfig, run_search, uniform_cost
from trinas.supernet import Supernet, SupernetConfig
from trinas.toytask import DatasetSpec, generate

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--samples", type=int, default=64)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

cfg = SupernetConfig.desk(image_size=32)
spaces = {c: appendix_subspace(c) for c in COMPONENTS}
data = generate(DatasetSpec(seed=args.seed, n_weight=args.samples, n_arch=args.samples, n_test=32, image_size=32))

for lam in (0.01, 0.1):
    t0 = time.perf_counter()
    net = Supernet(cfg, spaces, seed=args.seed)
    uniform = uniform_cost(net)
    res = run_search(net, data, SearchConfig(lam=lam, epochs=args.epochs, seed=args.seed))
    arch = decode(net.arch, net.spaces, cfg)
    print(f"lam={lam:<5} expected MACs {uniform:.0f} -> {res.expected_flops[-1]:.0f}; "
          f"decoded architecture {arch.flops(cfg)} MACs ({time.perf_counter() - t0:.0f}s)")
    print("   head:", " ".join(arch.head))
