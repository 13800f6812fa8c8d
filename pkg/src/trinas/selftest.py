"""Oracle checks shared by ``trinas selftest`` and the acceptance suite.

Each check compares a fast path against an independent reference and
returns a ``Check`` holding the worst discrepancy it saw.  The default
sizes are the ones the acceptance suite uses; all of them together run in
seconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .costmodel import CostTable, LayerShape, cost_regularizer, flops_of
from .opspace import COMPONENTS, appendix_subspace, build_block, full_catalogue
from .oracles import count_block_multiplies, naive_conv2d, relative_error
from .supernet import MixedLayer, Supernet, SupernetConfig, layer_plan
from .training import detection_loss


@dataclass
class Check:
    name: str
    worst: float
    tolerance: float
    detail: str = ""

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tolerance)

    def summary(self) -> str:
        return f"{self.name}: worst {self.worst:.3g} (tolerance {self.tolerance:g}) {self.detail}".rstrip()

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.summary()}"


def arch_gradient_check(n_logits: int = 20, seed: int = 0, lam: float = 0.01, h: float = 1e-4,
                        cfg: SupernetConfig | None = None, batch: int = 2) -> Check:
    """Analytic vs central-difference gradients of task loss plus
    ``lam`` times the normalised expected cost, in 64-bit precision, at
    ``n_logits`` randomly chosen architecture logits."""
    cfg = cfg or SupernetConfig.desk(image_size=32)
    r = np.random.default_rng([seed, 2])
    with T.precision(np.float64):
        net = Supernet(cfg, {c: appendix_subspace(c) for c in COMPONENTS}, seed=seed)
        for m in net.arch.tensors():
            m.data = r.normal(scale=0.5, size=m.shape)
        x = r.normal(size=(batch, cfg.in_channels, cfg.image_size, cfg.image_size))
        labels = r.integers(0, cfg.num_classes, size=batch)
        boxes = r.uniform(0.2, 0.8, size=(batch, 4))
        tables = net.cost_tables()
        scale = float(sum(t.flops.mean(axis=1).sum() for t in tables.values()))

        def objective() -> T.Tensor:
            cls, box = net(x)
            cost = net.expected_cost(tables=tables, scale=scale)
            return T.add(detection_loss(cls, box, labels, boxes), T.mul(cost, lam))

        for m in net.arch.tensors():
            m.grad = None
        objective().backward()
        sizes = [m.data.size for m in net.arch.tensors()]
        flat = r.choice(sum(sizes), size=min(n_logits, sum(sizes)), replace=False)
        worst = 0.0
        with T.no_grad():
            for f in flat:
                k = int(np.searchsorted(np.cumsum(sizes), f, side="right"))
                m = net.arch.tensors()[k]
                idx = np.unravel_index(int(f - sum(sizes[:k])), m.shape)
                old = m.data[idx]
                m.data[idx] = old + h
                up = objective().item()
                m.data[idx] = old - h
                down = objective().item()
                m.data[idx] = old
                worst = max(worst, relative_error(m.grad[idx], (up - down) / (2 * h)))
    return Check("arch gradients vs finite differences", worst, 1e-3, f"({len(flat)} logits)")


def mixture_check(trials: int = 100, seed: int = 0, cfg: SupernetConfig | None = None) -> Check:
    """Saturated one-hot logits make a mixed layer reproduce the chosen
    candidate, for random catalogue ops at random layers of the desk plan."""
    cfg = cfg or SupernetConfig.desk(image_size=32)
    plan = [info for c in COMPONENTS for info in layer_plan(cfg)[c]]
    r = np.random.default_rng([seed, 3])
    worst = 0.0
    for _ in range(trials):
        info = plan[int(r.integers(len(plan)))]
        space = full_catalogue().restrict(info.component)
        layer = MixedLayer(info, space, np.random.default_rng(r.integers(2**32)))
        j = int(r.integers(len(space)))
        logits = np.full(len(space), -40.0)
        logits[j] = 40.0
        x = T.Tensor(r.normal(size=(2, info.c_in, info.in_hw, info.in_hw)))
        with T.no_grad():
            mixed = layer(x, T.Tensor(logits)).data
            single = layer.candidates[j](x).data
        worst = max(worst, float(np.max(np.abs(mixed - single))))
    return Check("saturated mixture equals the chosen candidate", worst, 1e-6, f"({trials} trials)")


def cost_linearity_check(seed: int = 0, cfg: SupernetConfig | None = None) -> Check:
    """Uniform mixing weights give the per-layer arithmetic mean of FLOPs."""
    cfg = cfg or SupernetConfig.desk(image_size=32)
    plan = layer_plan(cfg)
    worst = 0.0
    for c in COMPONENTS:
        table = CostTable.build(full_catalogue().restrict(c), [i.shape() for i in plan[c]])
        with T.precision(np.float64):
            got = cost_regularizer(T.Tensor(np.zeros(table.shape)), table).item()
        want = float(sum(np.mean(row) for row in table.flops))
        worst = max(worst, abs(got - want) / want)
    return Check("uniform expected cost equals mean FLOPs", worst, 1e-9)


def flops_check(n_shapes: int = 20, seed: int = 0, max_side: int = 6, max_channels: int = 4) -> Check:
    """``flops_of`` against the loop oracle's multiply count for every
    catalogue op on ``n_shapes`` random shapes."""
    r = np.random.default_rng([seed, 4])
    mismatches = 0
    total = 0
    for _ in range(n_shapes):
        c_in, c_out = (int(v) for v in r.integers(1, max_channels + 1, size=2))
        stride = int(r.choice([1, 2]))
        h, w = (int(v) for v in r.integers(2, max_side + 1, size=2))
        shape = LayerShape(c_in, c_out, (h - 1) // stride + 1, (w - 1) // stride + 1, stride, in_h=h, in_w=w)
        for op in full_catalogue():
            total += 1
            mismatches += flops_of(op, shape) != count_block_multiplies(build_block(op, c_in, c_out, stride), h, w)
    return Check("FLOPs formula vs multiply-counting oracle", float(mismatches), 0.0, f"({total} op/shape pairs)")


def conv_check(trials: int = 10, seed: int = 0) -> Check:
    """Vectorised convolution against the loop reference."""
    r = np.random.default_rng([seed, 5])
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(trials):
            groups = int(r.choice([1, 2]))
            c_in, c_out = 2 * int(r.integers(1, 3)), 2 * int(r.integers(1, 3))
            k, stride, dil = int(r.choice([1, 3, 5])), int(r.choice([1, 2])), int(r.choice([1, 2]))
            pad = dil * (k - 1) // 2
            x = r.normal(size=(2, c_in, 7, 6))
            w = r.normal(size=(c_out, c_in // groups, k, k))
            b = r.normal(size=c_out)
            got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=pad, dilation=dil,
                           groups=groups).data
            want, _ = naive_conv2d(x, w, b, stride=stride, padding=pad, dilation=dil, groups=groups)
            worst = max(worst, float(np.max(np.abs(got - want))))
    return Check("convolution vs loop reference", worst, 1e-10, f"({trials} trials)")


ALL_CHECKS: tuple[Callable[[], Check], ...] = (conv_check, flops_check, cost_linearity_check, mixture_check,
                                               arch_gradient_check)


def run_selftest(emit=print) -> bool:
    ok = True
    for check in ALL_CHECKS:
        result = check()
        emit(result.line())
        ok &= result.ok
    return ok
