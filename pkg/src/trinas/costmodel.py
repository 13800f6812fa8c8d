"""FLOPs / parameter accounting for candidate operations and the expected-cost
regulariser used during search.

FLOPs are counted as multiply-accumulates: one MAC is one unit.  Bias adds,
activations and residual additions are not counted.  Pass ``mac_factor=2`` to
the reporting helpers to follow the multiply-plus-add convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .opspace import OpSpec, SearchSpace, parse_opname


class AlignmentError(ValueError):
    """A cost table does not line up with an architecture matrix."""


@dataclass(frozen=True)
class LayerShape:
    """Context of one searched layer: channels, output extents and stride.

    ``in_h``/``in_w`` default to ``h * stride``; give them explicitly for odd
    inputs to stride-2 layers.
    """

    c_in: int
    c_out: int
    h: int
    w: int
    stride: int = 1
    in_h: int | None = None
    in_w: int | None = None

    def __post_init__(self):
        for name in ("c_in", "c_out", "h", "w", "stride"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"LayerShape.{name} must be a positive integer")

    @property
    def input_hw(self) -> tuple[int, int]:
        return (self.in_h or self.h * self.stride, self.in_w or self.w * self.stride)


def _conv_macs(c_in, c_out, k, h_out, w_out, groups=1) -> int:
    return (c_in // groups) * k * k * c_out * h_out * w_out


def flops_of(op: OpSpec | str, shape: LayerShape) -> int:
    """MACs of one forward pass of ``op`` for a single image."""
    if isinstance(op, str):
        op = parse_opname(op)
    h, w = shape.h, shape.w
    hi, wi = shape.input_hw
    if op.family == "skip":
        return 0
    if op.family == "ir":
        hidden = shape.c_in * op.expansion
        return (_conv_macs(shape.c_in, hidden, 1, hi, wi)
                + _conv_macs(hidden, hidden, op.kernel, h, w, groups=hidden)
                + _conv_macs(hidden, shape.c_out, 1, h, w))
    if op.family == "sep":
        return (_conv_macs(shape.c_in, shape.c_in, op.kernel, h, w, groups=shape.c_in)
                + _conv_macs(shape.c_in, shape.c_out, 1, h, w))
    return _conv_macs(shape.c_in, shape.c_out, op.kernel, h, w, groups=op.groups)


def params_of(op: OpSpec | str, c_in: int, c_out: int) -> int:
    """Weights plus biases of ``op``."""
    if isinstance(op, str):
        op = parse_opname(op)
    if op.family == "skip":
        return 0
    k2 = op.kernel * op.kernel
    if op.family == "ir":
        hid = c_in * op.expansion
        return (c_in * hid + hid) + (hid * k2 + hid) + (hid * c_out + c_out)
    if op.family == "sep":
        return (c_in * k2 + c_in) + (c_in * c_out + c_out)
    return (c_in // op.groups) * k2 * c_out + c_out


@dataclass
class CostTable:
    """FLOPs and parameter counts, one row per searched layer and one column
    per candidate."""

    flops: np.ndarray
    params: np.ndarray
    op_names: list[str]
    layer_ids: list[str]

    def __post_init__(self):
        self.flops = np.asarray(self.flops, dtype=np.float64)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.flops.shape != self.params.shape or self.flops.shape != (len(self.layer_ids), len(self.op_names)):
            raise AlignmentError("cost matrices do not match layer/op labels")
        if np.any(self.flops < 0) or np.any(self.params < 0):
            raise ValueError("cost entries must be non-negative")

    @classmethod
    def build(cls, space: SearchSpace, shapes: Sequence[LayerShape], layer_ids: Sequence[str] | None = None):
        flops = [[flops_of(op, s) for op in space] for s in shapes]
        params = [[params_of(op, s.c_in, s.c_out) for op in space] for s in shapes]
        ids = list(layer_ids) if layer_ids is not None else [str(i) for i in range(len(shapes))]
        return cls(np.array(flops, dtype=np.float64).reshape(len(shapes), len(space)),
                   np.array(params, dtype=np.float64).reshape(len(shapes), len(space)), space.names, ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flops.shape

    def subset(self, keep: Sequence[int]) -> "CostTable":
        keep = sorted(keep)
        return CostTable(self.flops[:, keep], self.params[:, keep], [self.op_names[i] for i in keep],
                         list(self.layer_ids))

    def chosen_flops(self, choices: Sequence[int]) -> float:
        return float(sum(self.flops[l, j] for l, j in enumerate(choices)))

    def to_csv_rows(self, mac_factor: int = 1):
        for l, lid in enumerate(self.layer_ids):
            for j, name in enumerate(self.op_names):
                yield lid, name, int(self.flops[l, j]) * mac_factor, int(self.params[l, j])


def cost_regularizer(logits: T.Tensor, table: CostTable | np.ndarray, scale: float = 1.0) -> T.Tensor:
    """Expected cost ``sum_l sum_o softmax(logits_l)_o * FLOPs(o, l) / scale``.

    The mixing weights are the row-wise softmax of the logits, the same
    weights used by the mixed nodes.
    """
    flops = table.flops if isinstance(table, CostTable) else np.asarray(table, dtype=np.float64)
    if flops.shape != logits.shape:
        raise AlignmentError(f"cost table {flops.shape} does not align with architecture matrix {logits.shape}")
    weights = T.softmax(logits, axis=1)
    return T.tsum(T.mul(weights, T.Tensor(flops / scale, dtype=logits.dtype)))


def expected_cost(weights: np.ndarray, table: CostTable | np.ndarray) -> float:
    """Same linear form evaluated on explicit mixing weights (rows sum to 1)."""
    flops = table.flops if isinstance(table, CostTable) else np.asarray(table, dtype=np.float64)
    if flops.shape != np.shape(weights):
        raise AlignmentError(f"cost table {flops.shape} does not align with weights {np.shape(weights)}")
    return float(np.sum(np.asarray(weights, dtype=np.float64) * flops))
