"""Candidate screening: shrink each component's space from the whole catalogue
to a small sub space.

Architecture logits are trained with a column-sparsity penalty.  Each
column's score is the Euclidean norm, over layers, of the softmax
probability that every layer assigns to that candidate.  After a warmup of
weight-only training, the lowest-scoring candidate of every component is
removed at a fixed interval until the target sizes remain.

Any model works as long as it exposes ``components``, ``arch[component]``
(an L x N logits tensor), ``op_names(component)``, ``weight_parameters()``,
``remove_candidate(component, col)`` and ``loss(batch)``.  ``Supernet``
does, and so does the small ``OpChain`` model below.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .opspace import COMPONENTS, ConfigurationError, SearchSpace, full_catalogue
from .optim import SGD, Adam, cosine_lr
from .supernet import Supernet, SupernetConfig
from .toytask import Dataset, DatasetSpec, Split
from .training import SplitAudit, arch_step, weight_step

PENALTIES = ("min", "sum")


# -- scores and penalty -----------------------------------------------------------
def column_norms(matrix) -> np.ndarray:
    """Per-column L2 norm of the row-wise softmax of an L x N logits matrix."""
    z = np.asarray(matrix.data if isinstance(matrix, T.Tensor) else matrix, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return np.sqrt((p * p).sum(axis=0))


def column_norms_tensor(logits: T.Tensor) -> T.Tensor:
    """Differentiable version of ``column_norms``."""
    p = T.softmax(logits, axis=1)
    return T.sqrt(T.tsum(T.mul(p, p), axis=0))


def sparsity_penalty(matrices: Sequence[T.Tensor], mu: float, penalty: str = "min") -> T.Tensor:
    """``mu * min_i ||p_i||`` (or ``mu * sum_i ||p_i||``) summed over the given
    logits matrices.  Exactly zero, and gradient-free, when ``mu == 0``."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if penalty not in PENALTIES:
        raise ConfigurationError(f"penalty must be one of {PENALTIES}, got {penalty!r}")
    if mu == 0:
        return T.Tensor(0.0)
    total = None
    for m in matrices:
        norms = column_norms_tensor(m)
        term = T.amin(norms) if penalty == "min" else T.tsum(norms)
        total = term if total is None else T.add(total, term)
    return T.mul(total, mu)


# -- configuration and state --------------------------------------------------------
@dataclass(frozen=True)
class ScreeningConfig:
    targets: tuple[int, ...] = (8, 8, 8)
    mu: float = 0.1
    penalty: str = "min"
    epochs: int = 12
    warmup_epochs: int = 5
    removal_interval: int | None = None   # arch steps between removals; None spreads them evenly
    removals_per_event: int = 1
    batch_size: int = 32
    weight_lr: float = 0.04
    momentum: float = 0.9
    arch_lr: float = 4e-4
    clip: float | None = 5.0
    screen_depth_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.penalty not in PENALTIES:
            raise ConfigurationError(f"penalty must be one of {PENALTIES}, got {self.penalty!r}")
        if self.mu < 0:
            raise ConfigurationError("mu must be non-negative")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError("need 0 <= warmup_epochs <= epochs")
        if self.removals_per_event < 1:
            raise ConfigurationError("each removal event must remove at least one candidate")
        if self.removal_interval is not None and self.removal_interval < 1:
            raise ConfigurationError("removal_interval must be positive")
        if min(self.targets) < 1:
            raise ConfigurationError("targets must be positive")
        if not 0 < self.screen_depth_factor <= 1:
            raise ConfigurationError("screen_depth_factor must be in (0, 1]")


@dataclass(frozen=True)
class Removal:
    epoch: int
    step: int
    component: str
    op_name: str
    column_norm: float


@dataclass
class ScreeningState:
    active_ops: dict[str, list[str]]
    arch: dict[str, np.ndarray]
    targets: dict[str, int]
    mu: float
    removal_log: list[Removal] = field(default_factory=list)
    trace: list[tuple[int, str, str, float]] = field(default_factory=list)
    audit: SplitAudit = field(default_factory=SplitAudit)

    def spaces(self) -> dict[str, SearchSpace]:
        return {c: SearchSpace.from_names(ops, c) for c, ops in self.active_ops.items()}


def _record(trace: list, step: int, model) -> None:
    for comp in model.components:
        for name, norm in zip(model.op_names(comp), column_norms(model.arch[comp])):
            trace.append((step, comp, name, float(norm)))


def write_trace(trace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "component", "op_name", "column_norm"])
        for step, comp, name, norm in trace:
            w.writerow([step, comp, name, repr(float(norm))])


def weakest_columns(norms: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` smallest norms; ties go to the lower index."""
    order = np.lexsort((np.arange(len(norms)), norms))
    return sorted(int(i) for i in order[:k])


class Screener:
    """Runs the screening loop on ``model`` with data from ``data``."""

    def __init__(self, model, data, cfg: ScreeningConfig):
        self.model, self.data, self.cfg = model, data, cfg
        comps = list(model.components)
        if len(cfg.targets) != len(comps):
            raise ConfigurationError(f"{len(cfg.targets)} targets for {len(comps)} components")
        self.targets = dict(zip(comps, cfg.targets))
        for c in comps:
            n = len(model.op_names(c))
            if self.targets[c] > n:
                raise ConfigurationError(f"{c}: target {self.targets[c]} exceeds the {n} available candidates")
        self.state = ScreeningState({c: list(model.op_names(c)) for c in comps}, {}, self.targets, cfg.mu)

    # -- helpers -----------------------------------------------------------
    def _excess(self) -> dict[str, int]:
        return {c: len(self.model.op_names(c)) - self.targets[c] for c in self.model.components}

    def _arch_tensors(self) -> list[T.Tensor]:
        return [self.model.arch[c] for c in self.model.components]

    def _arch_loss(self, batch):
        task = self.model.loss(batch)
        return T.add(task, sparsity_penalty(self._arch_tensors(), self.cfg.mu, self.cfg.penalty))

    def _remove(self, epoch: int, step: int, arch_opt: Adam | None) -> None:
        for comp in self.model.components:
            excess = len(self.model.op_names(comp)) - self.targets[comp]
            if excess <= 0:
                continue
            norms = column_norms(self.model.arch[comp])
            cols = weakest_columns(norms, min(self.cfg.removals_per_event, excess))
            names = self.model.op_names(comp)
            for col in sorted(cols, reverse=True):
                self.state.removal_log.append(Removal(epoch, step, comp, names[col], float(norms[col])))
                old = self.model.arch[comp]
                self.model.remove_candidate(comp, col)
                if arch_opt is not None:
                    keep = [j for j in range(old.shape[1]) if j != col]
                    arch_opt.replace(old, self.model.arch[comp], keep)

    def _interval(self, arch_steps_total: int) -> int:
        if self.cfg.removal_interval is not None:
            return self.cfg.removal_interval
        events = math.ceil(max(self._excess().values()) / self.cfg.removals_per_event)
        return max(1, arch_steps_total // (events + 1))

    # -- main loop -----------------------------------------------------------------
    def run(self, trace_path: str | Path | None = None) -> ScreeningState:
        cfg, model, st = self.cfg, self.model, self.state
        if max(self._excess().values()) > 0:
            wsplit, asplit = self.data.split("weight"), self.data.split("arch")
            steps_per_epoch = min(math.ceil(len(wsplit) / cfg.batch_size), math.ceil(len(asplit) / cfg.batch_size))
            total_steps = steps_per_epoch * cfg.epochs
            interval = self._interval(steps_per_epoch * (cfg.epochs - cfg.warmup_epochs))
            weights = list(model.weight_parameters())
            sgd = SGD(weights, cfg.weight_lr, cfg.momentum) if weights else None
            adam = Adam(self._arch_tensors(), cfg.arch_lr)
            step = arch_steps = 0
            _record(st.trace, 0, model)
            for epoch in range(cfg.epochs):
                wb = wsplit.batches(cfg.batch_size, cfg.seed, epoch)
                ab = asplit.batches(cfg.batch_size, cfg.seed, epoch)
                for b_w, b_a in zip(wb, ab):
                    if sgd is not None:
                        sgd.lr = cosine_lr(cfg.weight_lr, step, total_steps)
                        weight_step(model.loss, b_w, model.weight_parameters(), self._arch_tensors(), sgd,
                                    cfg.clip, st.audit)
                    step += 1
                    if epoch < cfg.warmup_epochs:
                        continue
                    arch_step(self._arch_loss, b_a, self._arch_tensors(), model.weight_parameters(), adam, st.audit)
                    arch_steps += 1
                    _record(st.trace, arch_steps, model)
                    if arch_steps % interval == 0 and max(self._excess().values()) > 0:
                        self._remove(epoch, arch_steps, adam)
                        if sgd is not None:
                            sgd.retain(model.weight_parameters())
            # budget exhausted before the targets were met: rank on the final scores
            while max(self._excess().values()) > 0:
                self._remove(cfg.epochs, arch_steps, None)
        st.active_ops = {c: list(model.op_names(c)) for c in model.components}
        st.arch = {c: model.arch[c].data.copy() for c in model.components}
        if trace_path is not None:
            write_trace(st.trace, trace_path)
        return st


def screen(model, data, cfg: ScreeningConfig, trace_path: str | Path | None = None) -> ScreeningState:
    """Screen ``model``'s candidates down to ``cfg.targets`` and return the state."""
    return Screener(model, data, cfg).run(trace_path)


def screening_supernet(cfg: SupernetConfig, depth_factor: float = 0.5, seed: int = 0,
                       catalogue: SearchSpace | None = None) -> Supernet:
    """Supernet over the whole catalogue in every component, with the backbone
    depth scaled by ``depth_factor``."""
    cat = catalogue or full_catalogue()
    return Supernet(cfg.with_depth_factor(depth_factor), {c: cat.restrict(c) for c in COMPONENTS}, seed)


# -- synthetic operation chain ---------------------------------------------------------
class OpChain:
    """Scalar regression through ``L`` mixed layers of fixed-gain operations.

    Candidate ``j`` multiplies its input by ``gains[j]``; a layer outputs the
    softmax-weighted sum of its candidates.  There are no trainable weights,
    so only the architecture logits move.  Targets are ``target_gain * x``.
    """

    def __init__(self, names: Sequence[str], gains: Sequence[float], layers: int = 1,
                 component: str = "whole", dtype=None):
        if len(names) != len(gains):
            raise ValueError("names and gains differ in length")
        dtype = dtype or T.get_default_dtype()
        self.components = (component,)
        self.names = list(names)
        self.gains = np.asarray(gains, dtype=np.float64)
        self.arch = {component: T.Tensor(np.zeros((layers, len(names)), dtype=dtype), requires_grad=True)}

    def op_names(self, component: str) -> list[str]:
        return list(self.names)

    def weight_parameters(self) -> list[T.Tensor]:
        return []

    def remove_candidate(self, component: str, col: int) -> None:
        keep = [j for j in range(len(self.names)) if j != col]
        del self.names[col]
        self.gains = self.gains[keep]
        old = self.arch[component]
        self.arch[component] = T.Tensor(old.data[:, keep].copy(), requires_grad=True)

    def forward(self, x: np.ndarray) -> T.Tensor:
        (comp,) = self.components
        m = self.arch[comp]
        h = T.Tensor(np.asarray(x, dtype=m.dtype))
        g = T.Tensor(self.gains.astype(m.dtype))
        for row in range(m.shape[0]):
            coef = T.tsum(T.mul(T.softmax(m[row]), g))
            h = T.mul(h, coef)
        return h

    def loss(self, batch) -> T.Tensor:
        d = T.add(self.forward(batch.images), T.mul(T.Tensor(batch.boxes), -1.0))
        return T.tmean(T.mul(d, d))


def regression_data(n: int = 256, target_gain: float = 1.0, noise: float = 0.0, seed: int = 0) -> Dataset:
    """Weight/arch/test splits of ``y = target_gain * x + noise`` for ``OpChain``."""
    splits = []
    for k, name in enumerate(("weight", "arch", "test")):
        r = np.random.default_rng([seed, 101, k])
        x = r.normal(size=n)
        y = target_gain * x + noise * r.normal(size=n)
        splits.append(Split(name, x, np.zeros(n, dtype=np.int64), y))
    return Dataset(DatasetSpec(seed=seed), *splits)


def best_subsets(names: Sequence[str], gains: Sequence[float], size: int,
                 target_gain: float = 1.0) -> tuple[dict[frozenset, float], float]:
    """Exhaustive check over all ``size``-subsets of a one-layer ``OpChain``.

    A mixture of candidates with gains ``g`` realises exactly the gains in
    ``[min g, max g]`` (endpoints as limits), so the smallest reachable squared
    gain error is the squared distance from ``target_gain`` to that interval.
    Returns ``({subset: loss}, best_loss)``.
    """
    from itertools import combinations

    out = {}
    for combo in combinations(range(len(names)), size):
        g = np.asarray([gains[i] for i in combo], dtype=np.float64)
        gap = max(g.min() - target_gain, target_gain - g.max(), 0.0)
        out[frozenset(names[i] for i in combo)] = float(gap * gap)
    return out, min(out.values())


# -- fixed toy problems ------------------------------------------------------------------
FOUR_OPS = {"copy": 1.0, "negate": -1.0, "zero": 0.0, "double": 2.0}


def four_op_screen(seed: int = 0, n: int = 256) -> tuple[frozenset, dict[frozenset, float], float]:
    """Screen the four fixed-gain ops of ``FOUR_OPS`` down to two on an
    identity-regression task.  Returns the retained pair together with the
    exhaustive per-pair losses and the best achievable loss."""
    names, gains = list(FOUR_OPS), list(FOUR_OPS.values())
    cfg = ScreeningConfig(targets=(2,), epochs=4, warmup_epochs=0, arch_lr=0.01, seed=seed)
    state = screen(OpChain(names, gains), regression_data(n, seed=seed), cfg)
    losses, best = best_subsets(names, gains, 2)
    return frozenset(state.active_ops["whole"]), losses, best


def score_variance(mu: float, seed: int, steps: int = 500, lr: float = 0.01, penalty: str = "min") -> float:
    """Variance of the column norms after ``steps`` arch steps on a fixed
    four-layer chain of eight candidate gains, with sparsity weight ``mu``.

    The gains and target are fixed; ``seed`` selects the data and batch order.
    """
    gains = np.random.default_rng(1234).uniform(0.25, 1.75, size=8)
    model = OpChain([f"g{j}" for j in range(8)], gains, layers=4)
    data = regression_data(512, target_gain=0.8, noise=0.1, seed=seed)
    a = model.arch["whole"]
    opt = Adam([a], lr)

    def objective(batch):
        return T.add(model.loss(batch), sparsity_penalty([a], mu, penalty))

    n = epoch = 0
    while n < steps:
        for b in data.arch.batches(32, seed, epoch):
            arch_step(objective, b, [a], [], opt)
            n += 1
            if n == steps:
                break
        epoch += 1
    return float(np.var(column_norms(a)))
