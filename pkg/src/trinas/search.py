"""End-to-end search: alternate weight steps on one half of the data with
architecture steps on the other half.

The architecture objective is the detection loss on the arch split plus
``lam * (C(alpha) + C(beta) + C(gamma)) / flops_scale``.  The expected
cost ``C`` is linear in the softmax mixing weights.  Only first-order
gradients are used: the architecture step treats the current weights as
constants.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .costmodel import expected_cost
from .opspace import COMPONENTS, ConfigurationError
from .optim import SGD, Adam, cosine_lr
from .supernet import Supernet, save_checkpoint
from .toytask import Batch, Dataset
from .training import NumericalError, SplitAudit, arch_step, detection_loss, weight_step

__all__ = ["SearchConfig", "SearchResult", "alternating_step", "detection_loss", "run_search",
           "uniform_cost", "expected_flops"]


@dataclass(frozen=True)
class SearchConfig:
    lam: float = 0.01
    epochs: int = 20
    arch_warmup_epochs: int | None = None      # None -> a quarter of the epochs
    weight_lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 0.0
    arch_lr: float = 4e-4
    batch_size: int = 32
    split_fraction: float = 0.5
    clip: float | None = 5.0
    flops_scale: float | None = None           # None -> cost of the uniform mixture
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lam must be non-negative")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if self.arch_warmup_epochs is not None and not 0 <= self.arch_warmup_epochs <= self.epochs:
            raise ConfigurationError("need 0 <= arch_warmup_epochs <= epochs")
        if not 0 < self.split_fraction < 1:
            raise ConfigurationError("split_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.flops_scale is not None and self.flops_scale <= 0:
            raise ConfigurationError("flops_scale must be positive")

    @property
    def warmup(self) -> int:
        return self.epochs // 4 if self.arch_warmup_epochs is None else self.arch_warmup_epochs


@dataclass
class SearchResult:
    arch: dict[str, np.ndarray]
    train_loss: list[float]
    val_loss: list[float]
    expected_flops: list[float]
    checkpoint: str | None = None
    checkpoint_sha256: str | None = None
    audit: SplitAudit = field(default_factory=SplitAudit)
    net: Supernet | None = None


def uniform_cost(net: Supernet, tables=None) -> float:
    """Expected MACs of the uniform mixture over every component."""
    tables = tables or net.cost_tables()
    return float(sum(t.flops.mean(axis=1).sum() for t in tables.values()))


def expected_flops(arch: dict[str, np.ndarray], tables) -> float:
    """C(alpha) + C(beta) + C(gamma) in MACs for plain logits matrices."""
    total = 0.0
    for c in COMPONENTS:
        z = np.asarray(arch[c], dtype=np.float64)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        total += expected_cost(p / p.sum(axis=1, keepdims=True), tables[c])
    return float(total)


class _Objective:
    """Arch-phase loss that remembers its task part for logging."""

    def __init__(self, net: Supernet, lam: float, tables, scale: float):
        self.net, self.lam, self.tables, self.scale = net, lam, tables, scale
        self.task = float("nan")

    def __call__(self, batch: Batch) -> T.Tensor:
        task = self.net.loss(batch)
        self.task = task.item()
        if self.lam == 0:
            return task
        cost = self.net.expected_cost(tables=self.tables, scale=self.scale)
        return T.add(task, T.mul(cost, self.lam))


def alternating_step(net: Supernet, batch_w: Batch, batch_a: Batch | None, cfg: SearchConfig,
                     weight_opt: SGD, arch_opt: Adam | None, tables=None, scale: float | None = None,
                     audit: SplitAudit | None = None) -> tuple[float, float | None, float | None]:
    """Weight step on ``batch_w`` with the logits fixed, then (if ``batch_a``
    is given) an arch step on ``batch_a`` with the weights fixed.

    Returns ``(weight_loss, arch_objective, arch_task_loss)``.
    """
    arch = net.arch.tensors()
    weights = net.weight_parameters()
    w_loss = weight_step(net.loss, batch_w, weights, arch, weight_opt, cfg.clip, audit)
    if batch_a is None or arch_opt is None:
        return w_loss, None, None
    tables = tables or net.cost_tables()
    scale = scale or cfg.flops_scale or uniform_cost(net, tables)
    objective = _Objective(net, cfg.lam, tables, scale)
    a_loss = arch_step(objective, batch_a, net.arch.tensors(), weights, arch_opt, audit)
    return w_loss, a_loss, objective.task


def _dump(path: Path, info: dict) -> None:
    path.write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")


def write_search_trace(result: SearchResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "expected_flops"])
        for e, row in enumerate(zip(result.train_loss, result.val_loss, result.expected_flops)):
            w.writerow([e, *(repr(float(v)) for v in row)])


def run_search(net: Supernet, data: Dataset, cfg: SearchConfig, out_dir: str | Path | None = None,
               log=None) -> SearchResult:
    """Search ``net``'s architecture logits on ``data`` for ``cfg.epochs`` epochs.

    With ``out_dir`` the run writes ``search_trace.csv`` and one checkpoint per
    epoch under ``checkpoints/``.  A non-finite loss aborts the run after
    writing ``nan_dump.json`` describing the offending step.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    tables = net.cost_tables()
    scale = cfg.flops_scale or uniform_cost(net, tables)
    wsplit, asplit = data.split("weight"), data.split("arch")
    steps_per_epoch = min(math.ceil(len(wsplit) / cfg.batch_size), math.ceil(len(asplit) / cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    sgd = SGD(net.weight_parameters(), cfg.weight_lr, cfg.momentum, cfg.weight_decay)
    adam = Adam(net.arch.tensors(), cfg.arch_lr)
    result = SearchResult({}, [], [], [], net=net)
    step = 0
    for epoch in range(cfg.epochs):
        searching = epoch >= cfg.warmup
        train, val = [], []
        pairs = zip(wsplit.batches(cfg.batch_size, cfg.seed, epoch), asplit.batches(cfg.batch_size, cfg.seed, epoch))
        for b_w, b_a in pairs:
            sgd.lr = cosine_lr(cfg.weight_lr, step, total)
            try:
                w_loss, _, task = alternating_step(net, b_w, b_a if searching else None, cfg, sgd,
                                                   adam if searching else None, tables, scale, result.audit)
                if not searching:
                    with T.no_grad():
                        task = net.loss(b_a).item()
                    if not math.isfinite(task):
                        raise NumericalError(f"non-finite validation loss {task!r}")
            except NumericalError as exc:
                if out is not None:
                    _dump(out / "nan_dump.json", {
                        "error": str(exc), "epoch": epoch, "step": step, "weight_batch_ids": b_w.ids.tolist(),
                        "arch_batch_ids": b_a.ids.tolist(), "lr": sgd.lr,
                        "arch": {c: net.arch[c].data.tolist() for c in COMPONENTS},
                        "nonfinite_weights": [n for n, p in net.named_parameters() if not np.isfinite(p.data).all()],
                    })
                raise
            train.append(w_loss)
            val.append(task)
            step += 1
        result.train_loss.append(float(np.mean(train)))
        result.val_loss.append(float(np.mean(val)))
        result.expected_flops.append(expected_flops(net.arch.numpy(), tables))
        if out is not None:
            path = out / "checkpoints" / f"epoch_{epoch:03d}.npz"
            result.checkpoint = str(path)
            result.checkpoint_sha256 = save_checkpoint(net, path, extra={"epoch": epoch, "search": asdict(cfg)})
        if log is not None:
            log(f"epoch {epoch}: train {result.train_loss[-1]:.4f} val {result.val_loss[-1]:.4f} "
                f"expected MACs {result.expected_flops[-1]:.0f}")
    result.arch = net.arch.numpy()
    if out is not None:
        write_search_trace(result, out / "search_trace.csv")
    return result
