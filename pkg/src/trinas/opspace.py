"""Candidate operations: naming, the 32-entry catalogue, sub spaces and the
block graphs each operation expands to."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .layers import ConvUnit, Module

FAMILIES = ("ir", "sep", "conv", "skip")
_LONG = {"ir": "inverted_residual", "sep": "separable", "conv": "conv", "skip": "skip"}
KERNELS = {"ir": (3, 5, 7), "sep": (3, 5), "conv": (3, 5)}
DILATIONS = (1, 2, 3)
EXPANSIONS = (1, 3, 6)
COMPONENTS = ("backbone", "neck", "head")


class ConfigurationError(ValueError):
    """An operation or network cannot be built with the requested settings."""


class OpNameError(ValueError):
    """A candidate name does not follow ``<family>_k<kernel>_d<dilation>[_e<expansion>]``."""

    def __init__(self, name: str, position: int, reason: str):
        self.name, self.position = name, position
        super().__init__(f"{reason} at position {position} in {name!r}")


@dataclass(frozen=True)
class OpSpec:
    family: str
    kernel: int = 0
    dilation: int = 1
    expansion: int = 0
    groups: int = 1

    @property
    def long_family(self) -> str:
        return _LONG[self.family]

    @property
    def name(self) -> str:
        return format_opname(self)

    def __str__(self) -> str:
        return self.name


def format_opname(op: OpSpec) -> str:
    if op.family == "skip":
        return "skip"
    name = f"{op.family}_k{op.kernel}_d{op.dilation}"
    if op.family == "ir":
        name += f"_e{op.expansion}"
    if op.groups != 1:
        name += f"_g{op.groups}"
    return name


_TOKEN = re.compile(r"_([kdeg])(\d+)")


def parse_opname(name: str) -> OpSpec:
    """Parse a canonical candidate name, e.g. ``"ir_k5_d2_e6"`` or ``"sep_k3_d3"``."""
    if name == "skip":
        return OpSpec("skip")
    family, sep, _ = name.partition("_")
    if family not in ("ir", "sep", "conv") or not sep:
        raise OpNameError(name, 0, f"unknown family {family!r}")
    pos = len(family)
    fields: dict[str, int] = {}
    order = ["k", "d", "e"] if family == "ir" else ["k", "d", "g"] if family == "conv" else ["k", "d"]
    for key in order:
        m = _TOKEN.match(name, pos)
        if m is None or m.group(1) != key:
            if key in ("k", "d") or (family == "ir" and key == "e"):
                raise OpNameError(name, pos, f"expected '_{key}<int>'")
            break
        fields[key] = int(m.group(2))
        value_pos = m.start(2)
        if key == "k" and fields[key] not in KERNELS[family]:
            raise OpNameError(name, value_pos, f"kernel {fields[key]} not available for {family}")
        if key == "d" and fields[key] not in DILATIONS:
            raise OpNameError(name, value_pos, f"dilation {fields[key]} not in {DILATIONS}")
        if key == "e" and fields[key] not in EXPANSIONS:
            raise OpNameError(name, value_pos, f"expansion {fields[key]} not in {EXPANSIONS}")
        if key == "g" and fields[key] < 1:
            raise OpNameError(name, value_pos, "groups must be positive")
        pos = m.end()
    if pos != len(name):
        raise OpNameError(name, pos, "unexpected trailing text")
    return OpSpec(family, fields["k"], fields["d"], fields.get("e", 0), fields.get("g", 1))


_CATALOGUE_NAMES = (
    "ir_k3_d1_e1", "ir_k3_d1_e3", "ir_k3_d1_e6",
    "ir_k3_d2_e1", "ir_k3_d2_e3", "ir_k3_d2_e6",
    "ir_k3_d3_e1", "ir_k3_d3_e3", "ir_k3_d3_e6",
    "ir_k5_d1_e1", "ir_k5_d1_e3", "ir_k5_d1_e6",
    "ir_k5_d2_e1", "ir_k5_d2_e3", "ir_k5_d2_e6",
    "ir_k5_d3_e1", "ir_k5_d3_e3", "ir_k5_d3_e6",
    "ir_k7_d1_e1", "ir_k7_d1_e6",
    "sep_k3_d1", "sep_k3_d2", "sep_k3_d3",
    "sep_k5_d1", "sep_k5_d2", "sep_k5_d3",
    "conv_k3_d1", "conv_k3_d2", "conv_k3_d3",
    "conv_k5_d1", "conv_k5_d2", "conv_k5_d3",
)

# Sub spaces reported for the reference detector.  The backbone list names
# ir_k5_d1_e3 twice; only the seven distinct entries are kept.
APPENDIX_SUBSPACES = {
    "backbone": ("ir_k3_d1_e3", "ir_k3_d1_e6", "ir_k3_d2_e3", "ir_k5_d1_e3", "ir_k5_d1_e3",
                 "ir_k5_d2_e6", "ir_k5_d3_e6", "ir_k7_d1_e6"),
    "neck": ("conv_k3_d3", "conv_k5_d1", "ir_k3_d2_e1", "ir_k5_d1_e3", "sep_k3_d1", "sep_k3_d3",
             "sep_k5_d2", "sep_k5_d3"),
    "head": ("ir_k3_d1_e3", "ir_k3_d1_e6", "ir_k3_d2_e6", "ir_k5_d1_e3", "ir_k5_d1_e6", "ir_k7_d1_e6",
             "conv_k3_d1", "conv_k5_d1"),
}


@dataclass(frozen=True)
class SearchSpace:
    """Ordered candidate list; column ``i`` of an architecture matrix refers
    to ``ops[i]``."""

    ops: tuple[OpSpec, ...]
    component: str = "whole"
    duplicates: tuple[str, ...] = field(default=())

    def __post_init__(self):
        names = [op.name for op in self.ops]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate candidates in {self.component} space: {names}")
        if not self.ops:
            raise ConfigurationError(f"{self.component} space is empty")

    @classmethod
    def from_names(cls, names: Sequence[str], component: str = "whole") -> "SearchSpace":
        seen, ops, dups = set(), [], []
        for n in names:
            if n in seen:
                dups.append(n)
                continue
            seen.add(n)
            ops.append(parse_opname(n))
        return cls(tuple(ops), component, tuple(dups))

    @property
    def names(self) -> list[str]:
        return [op.name for op in self.ops]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self) -> Iterator[OpSpec]:
        return iter(self.ops)

    def __getitem__(self, i) -> OpSpec:
        return self.ops[i]

    def subset(self, keep: Sequence[int], component: str | None = None) -> "SearchSpace":
        return SearchSpace(tuple(self.ops[i] for i in sorted(keep)), component or self.component)

    def restrict(self, component: str) -> "SearchSpace":
        return SearchSpace(self.ops, component)


def full_catalogue() -> SearchSpace:
    return SearchSpace.from_names(_CATALOGUE_NAMES, "whole")


def appendix_subspace(component: str) -> SearchSpace:
    return SearchSpace.from_names(APPENDIX_SUBSPACES[component], component)


# -- blocks ---------------------------------------------------------------------
RESIDUAL_INIT_SCALE = 0.25


class Block(Module):
    """One candidate operation instantiated for a fixed (c_in, c_out, stride)."""

    def __init__(self, op: OpSpec, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
        self.op, self.c_in, self.c_out, self.stride = op, c_in, c_out, stride
        self.residual = stride == 1 and c_in == c_out
        self.units: list[ConvUnit] = []
        f = op.family
        if f == "skip":
            if not self.residual:
                raise ConfigurationError("skip needs stride 1 and c_in == c_out")
            return
        if f not in KERNELS or op.kernel not in KERNELS[f] or op.dilation not in DILATIONS:
            raise ConfigurationError(f"unsupported combination family={f} kernel={op.kernel} "
                                     f"dilation={op.dilation}")
        k, d = op.kernel, op.dilation
        if f == "ir":
            if op.expansion not in EXPANSIONS:
                raise ConfigurationError(f"unsupported expansion {op.expansion}")
            hidden = c_in * op.expansion
            self.expand = ConvUnit(c_in, hidden, 1, rng)
            self.depthwise = ConvUnit(hidden, hidden, k, rng, stride=stride, dilation=d, groups=hidden)
            self.project = ConvUnit(hidden, c_out, 1, rng, act=False)
            self.units = [self.expand, self.depthwise, self.project]
        elif f == "sep":
            self.depthwise = ConvUnit(c_in, c_in, k, rng, stride=stride, dilation=d, groups=c_in)
            self.pointwise = ConvUnit(c_in, c_out, 1, rng, act=False)
            self.units = [self.depthwise, self.pointwise]
        else:
            if c_in % op.groups or c_out % op.groups:
                raise ConfigurationError(f"groups={op.groups} does not divide channels {c_in}->{c_out}")
            self.conv = ConvUnit(c_in, c_out, k, rng, stride=stride, dilation=d, groups=op.groups)
            self.units = [self.conv]
        if self.residual:
            # without normalisation layers, full-size residual branches double
            # the activation variance per block; start them small instead
            self.units[-1].weight.data *= RESIDUAL_INIT_SCALE

    def forward(self, x: T.Tensor) -> T.Tensor:
        y = x
        for unit in self.units:
            y = unit(y)
        if self.residual:
            y = x if not self.units else T.add(y, x)
        return y

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        if self.stride == 1:
            return self.c_out, h, w
        return self.c_out, (h - 1) // 2 + 1, (w - 1) // 2 + 1


def build_block(op: OpSpec | str, c_in: int, c_out: int, stride: int = 1,
                rng: np.random.Generator | None = None) -> Block:
    """Instantiate ``op`` as a differentiable sub-graph.

    Stride-2 variants put the stride on the spatial (k x k) convolution; a
    residual connection is added whenever stride is 1 and channels match.
    """
    if isinstance(op, str):
        op = parse_opname(op)
    return Block(op, c_in, c_out, stride, rng if rng is not None else np.random.default_rng(0))
