"""Loss and single-step update helpers shared by screening, search and retraining.

Every batch carries the name of the split it came from.  The step helpers
refuse batches from the wrong split and report what they consumed to an
optional ``SplitAudit`` so a run can prove its split discipline afterwards.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .optim import clip_grad_norm
from .toytask import Batch, DataError


class SplitViolation(RuntimeError):
    """A batch from one split reached the update reserved for the other."""


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite."""


def detection_loss(cls_logits: T.Tensor, box_pred: T.Tensor, labels, boxes) -> T.Tensor:
    """Cross-entropy plus smooth-L1, both averaged over the batch.

    The smooth-L1 term is summed over the four box coordinates of a sample
    before averaging, so a box that is off by 2 everywhere costs 4 * 1.5 = 6.
    """
    labels = np.asarray(labels)
    k = cls_logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    n = len(labels)
    ce = T.cross_entropy(cls_logits, labels)
    loc = T.mul(T.smooth_l1(box_pred, boxes, reduction="sum"), 1.0 / n)
    return T.add(ce, loc)


class SplitAudit:
    """Counts samples per (phase, split) and keeps the ids seen by each phase."""

    def __init__(self):
        self.counts: Counter = Counter()
        self.ids: dict[str, set] = {"weight": set(), "arch": set()}

    def record(self, phase: str, batch: Batch) -> None:
        self.counts[(phase, batch.split)] += len(batch)
        self.ids[phase].update(int(i) for i in batch.ids)

    def cross_samples(self) -> dict[str, int]:
        """Samples that reached the wrong phase; zero for a disciplined run."""
        return {"arch_in_weight": sum(v for (p, s), v in self.counts.items() if p == "weight" and s != "weight"),
                "weight_in_arch": sum(v for (p, s), v in self.counts.items() if p == "arch" and s != "arch")}


def check_split(batch: Batch, expected: str) -> None:
    if batch.split != expected:
        raise SplitViolation(f"{expected}-phase update received a batch from the {batch.split!r} split")


@contextmanager
def frozen(tensors: Sequence[T.Tensor]):
    """Temporarily exclude ``tensors`` from differentiation."""
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
        t.grad = None
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def optimizer_step(loss_fn, batch, params, fixed=(), optimizer=None, clip=None, where="step") -> float:
    """Backward ``loss_fn(batch)`` into ``params`` only, then step ``optimizer``."""
    for p in params:
        p.grad = None
    with frozen(list(fixed)):
        loss = loss_fn(batch)
        if not np.isfinite(loss.data).all():
            raise NumericalError(f"non-finite loss in {where}: {loss.item()!r}")
        loss.backward()
    if clip:
        clip_grad_norm(params, clip)
    optimizer.step()
    return loss.item()


def weight_step(loss_fn: Callable[[Batch], T.Tensor], batch: Batch, params: Sequence[T.Tensor],
                fixed: Sequence[T.Tensor], optimizer, clip: float | None = None,
                audit: SplitAudit | None = None) -> float:
    """One optimizer step on the weights ``params``; ``fixed`` (the
    architecture logits) take no part in the backward pass."""
    check_split(batch, "weight")
    if audit is not None:
        audit.record("weight", batch)
    return optimizer_step(loss_fn, batch, params, fixed, optimizer, clip, "weight step")


def arch_step(loss_fn: Callable[[Batch], T.Tensor], batch: Batch, arch: Sequence[T.Tensor],
              fixed: Sequence[T.Tensor], optimizer, audit: SplitAudit | None = None) -> float:
    """One optimizer step on the architecture logits; the weights ``fixed``
    take no part in the backward pass."""
    check_split(batch, "arch")
    if audit is not None:
        audit.record("arch", batch)
    return optimizer_step(loss_fn, batch, arch, fixed, optimizer, None, "arch step")
