"""Weight-sharing supernet over backbone, neck and head.

Every searched layer is a mixed node: all candidate blocks run on the same
input and their outputs are summed with softmax weights taken from one row
of the component's architecture matrix.

Topology (strides relative to the input image)::

    stem 3x3/2 -> stage1 (C1, /4) -> stage2 (C2, /8) -> stage3 (C3, /16) -> stage4 (C4, /32)
    lateral 1x1 projections Li = proj(Ci) to the neck width
    top-down   P4 = mix(L4);  Pi = mix(Li) + up2(P(i+1))
    bottom-up  N1 = mix(P1);  Ni = mix(maxpool2(N(i-1))) + Pi
    head       mean_i resize(Ni -> g x g) -> 4 mixed blocks -> fc -> {class logits, box}

The head input resizes every Ni to a fixed g x g grid (average pooling or
nearest upsampling) and averages them, a one-stage stand-in for multi-level
RoI pooling.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .costmodel import CostTable, LayerShape, cost_regularizer
from .layers import ConvUnit, Linear, Module, ModuleList
from .training import detection_loss
from .opspace import COMPONENTS, Block, ConfigurationError, SearchSpace, build_block

CHECKPOINT_VERSION = 1
ARCH_KEYS = {"backbone": "alpha", "neck": "beta", "head": "gamma"}


@dataclass(frozen=True)
class SupernetConfig:
    stage_depths: tuple[int, ...] = (4, 4, 8, 4)
    stage_channels: tuple[int, ...] = (48, 96, 256, 352)
    stem_channels: int = 16
    neck_channels: int = 256
    head_blocks: int = 4
    head_fc_dim: int = 512
    head_pool: int = 4
    num_classes: int = 4
    image_size: int = 64
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_depths) != 4 or len(self.stage_channels) != 4:
            raise ConfigurationError("need exactly four backbone stages")
        if min(self.stage_depths) < 1 or min(self.stage_channels) < 1:
            raise ConfigurationError("stage depths and channels must be positive")
        if min(self.stem_channels, self.neck_channels, self.head_blocks, self.head_fc_dim, self.head_pool) < 1:
            raise ConfigurationError("stem/neck/head sizes must be positive")
        if self.image_size % 32:
            raise ConfigurationError(f"image_size {self.image_size} must be a multiple of 32 (total stride)")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")

    @classmethod
    def paper(cls, **kw) -> "SupernetConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "SupernetConfig":
        base = dict(stage_depths=(1, 1, 2, 1), stage_channels=(8, 16, 32, 48), stem_channels=8,
                    neck_channels=16, head_fc_dim=32, head_pool=4)
        base.update(kw)
        return cls(**base)

    def with_depth_factor(self, factor: float) -> "SupernetConfig":
        """Config with every stage depth scaled by ``factor`` (at least one block)."""
        return replace(self, stage_depths=tuple(max(1, int(round(d * factor))) for d in self.stage_depths))

    def layer_counts(self) -> tuple[int, int, int]:
        return sum(self.stage_depths), 8, self.head_blocks

    def level_sizes(self) -> list[int]:
        return [self.image_size // s for s in (4, 8, 16, 32)]

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetConfig":
        return cls(**d)


def search_space_size(layer_counts: Sequence[int], space_sizes: Sequence[int]) -> int:
    """Number of discrete architectures: prod(size ** layers), exact."""
    if len(layer_counts) != len(space_sizes):
        raise ValueError("layer_counts and space_sizes differ in length")
    total = 1
    for layers, size in zip(layer_counts, space_sizes):
        total *= int(size) ** int(layers)
    return total


@dataclass(frozen=True)
class LayerInfo:
    component: str
    index: int
    layer_id: str
    c_in: int
    c_out: int
    stride: int
    in_hw: int
    out_hw: int

    def shape(self) -> LayerShape:
        return LayerShape(self.c_in, self.c_out, self.out_hw, self.out_hw, self.stride, self.in_hw, self.in_hw)


def layer_plan(cfg: SupernetConfig) -> dict[str, list[LayerInfo]]:
    """Searched layers of each component with their static shapes."""
    plan: dict[str, list[LayerInfo]] = {c: [] for c in COMPONENTS}
    hw = cfg.image_size // 2
    c_prev = cfg.stem_channels
    for s, (depth, ch) in enumerate(zip(cfg.stage_depths, cfg.stage_channels)):
        for b in range(depth):
            stride = 2 if b == 0 else 1
            out = (hw - 1) // 2 + 1 if stride == 2 else hw
            plan["backbone"].append(LayerInfo("backbone", len(plan["backbone"]), f"backbone.s{s + 1}.b{b}",
                                              c_prev, ch, stride, hw, out))
            hw, c_prev = out, ch
    sizes = cfg.level_sizes()
    nc = cfg.neck_channels
    for lvl in (4, 3, 2, 1):
        hw = sizes[lvl - 1]
        plan["neck"].append(LayerInfo("neck", len(plan["neck"]), f"neck.td.P{lvl}", nc, nc, 1, hw, hw))
    for lvl in (1, 2, 3, 4):
        hw = sizes[lvl - 1]
        plan["neck"].append(LayerInfo("neck", len(plan["neck"]), f"neck.bu.N{lvl}", nc, nc, 1, hw, hw))
    g = cfg.head_pool
    for b in range(cfg.head_blocks):
        plan["head"].append(LayerInfo("head", b, f"head.b{b}", nc, nc, 1, g, g))
    return plan


class ArchParams:
    """Architecture logits: ``alpha`` (backbone), ``beta`` (neck), ``gamma`` (head)."""

    def __init__(self, alpha: T.Tensor, beta: T.Tensor, gamma: T.Tensor):
        self.alpha, self.beta, self.gamma = alpha, beta, gamma

    @classmethod
    def zeros(cls, shapes: dict[str, tuple[int, int]], dtype=None) -> "ArchParams":
        dtype = dtype or T.get_default_dtype()
        mats = [T.Tensor(np.zeros(shapes[c], dtype=dtype), requires_grad=True) for c in COMPONENTS]
        return cls(*mats)

    def __getitem__(self, component: str) -> T.Tensor:
        return getattr(self, ARCH_KEYS[component])

    def __setitem__(self, component: str, value: T.Tensor) -> None:
        setattr(self, ARCH_KEYS[component], value)

    def tensors(self) -> list[T.Tensor]:
        return [self.alpha, self.beta, self.gamma]

    def numpy(self) -> dict[str, np.ndarray]:
        return {c: self[c].data.copy() for c in COMPONENTS}


class MixedLayer(Module):
    """One searched layer holding a block per candidate."""

    def __init__(self, info: LayerInfo, space: SearchSpace, rng: np.random.Generator):
        super().__init__()
        self.info = info
        self.ops = list(space.names)
        self.candidates = ModuleList(build_block(op, info.c_in, info.c_out, info.stride, rng) for op in space)
        shapes = {blk.output_shape(info.in_hw, info.in_hw) for blk in self.candidates}
        expected = (info.c_out, info.out_hw, info.out_hw)
        if shapes != {expected}:
            raise ConfigurationError(f"{info.layer_id}: candidate output shapes {sorted(shapes)} != {expected}")

    def forward(self, x: T.Tensor, logits_row: T.Tensor) -> T.Tensor:
        if logits_row.shape != (len(self.candidates),):
            raise T.DimensionError(f"{self.info.layer_id}: logits row {logits_row.shape} for "
                                   f"{len(self.candidates)} candidates")
        weights = T.softmax(logits_row)
        return T.weighted_sum(weights, [blk(x) for blk in self.candidates])

    def remove(self, col: int) -> None:
        del self.candidates.items[col]
        del self.ops[col]


PREDICTOR_INIT_SCALE = 0.1


def scale_predictors(net) -> None:
    """Start the class and box outputs near zero so the first steps are tame."""
    for lin in (net.cls_out, net.box_out):
        lin.weight.data *= PREDICTOR_INIT_SCALE


def resize_to(x: T.Tensor, size: int) -> T.Tensor:
    hw = x.shape[2]
    if hw == size:
        return x
    if hw > size:
        return T.avg_pool2d(x, hw // size)
    return T.nearest_upsample(x, size // hw)


class Supernet(Module):
    """Mixed-operation detector; ``arch`` holds the logits, the modules hold w."""

    components = COMPONENTS

    def __init__(self, cfg: SupernetConfig, spaces: dict[str, SearchSpace], seed: int = 0):
        super().__init__()
        for comp in COMPONENTS:
            if comp not in spaces or len(spaces[comp]) == 0:
                raise ConfigurationError(f"missing or empty {comp} search space")
        self.cfg = cfg
        self.seed = seed
        self.spaces = {c: SearchSpace(spaces[c].ops, c) for c in COMPONENTS}
        self.plan = layer_plan(cfg)
        g = cfg.head_pool
        for s in cfg.level_sizes():
            if (s % g if s >= g else g % s):
                raise ConfigurationError(f"head_pool {g} incompatible with level size {s}")
        rng = np.random.default_rng([seed, 11])
        self.stem = ConvUnit(cfg.in_channels, cfg.stem_channels, 3, rng, stride=2)
        self.backbone = ModuleList(MixedLayer(i, self.spaces["backbone"], rng) for i in self.plan["backbone"])
        self.laterals = ModuleList(ConvUnit(c, cfg.neck_channels, 1, rng, act=False) for c in cfg.stage_channels)
        self.neck = ModuleList(MixedLayer(i, self.spaces["neck"], rng) for i in self.plan["neck"])
        self.head = ModuleList(MixedLayer(i, self.spaces["head"], rng) for i in self.plan["head"])
        self.fc = Linear(cfg.neck_channels * g * g, cfg.head_fc_dim, rng, act=True)
        self.cls_out = Linear(cfg.head_fc_dim, cfg.num_classes, rng)
        self.box_out = Linear(cfg.head_fc_dim, 4, rng)
        scale_predictors(self)
        self.arch = ArchParams.zeros({c: (len(self.plan[c]), len(self.spaces[c])) for c in COMPONENTS})

    # -- structure ----------------------------------------------------------
    def layers(self, component: str) -> ModuleList:
        return getattr(self, component)

    def layer_counts(self) -> tuple[int, int, int]:
        return tuple(len(self.plan[c]) for c in COMPONENTS)

    def weight_parameters(self) -> list[T.Tensor]:
        return self.parameters()

    def op_names(self, component: str) -> list[str]:
        return self.spaces[component].names

    def cost_tables(self) -> dict[str, CostTable]:
        return {c: CostTable.build(self.spaces[c], [i.shape() for i in self.plan[c]],
                                   [i.layer_id for i in self.plan[c]]) for c in COMPONENTS}

    def remove_candidate(self, component: str, col: int) -> None:
        """Drop candidate ``col`` from every layer of ``component`` and from its
        architecture matrix; the softmax then runs over the survivors."""
        for layer in self.layers(component):
            layer.remove(col)
        keep = [j for j in range(len(self.spaces[component])) if j != col]
        self.spaces[component] = self.spaces[component].subset(keep, component)
        old = self.arch[component]
        self.arch[component] = T.Tensor(old.data[:, keep].copy(), requires_grad=True)

    # -- forward --------------------------------------------------------------
    def mixed_forward(self, x: T.Tensor, component: str, index: int, logits_row: T.Tensor) -> T.Tensor:
        return self.layers(component)[index](x, logits_row)

    def features(self, images, arch: ArchParams | None = None) -> T.Tensor:
        """Fused head input before the head blocks."""
        arch = arch or self.arch
        x = images if isinstance(images, T.Tensor) else T.Tensor(images)
        x = self.stem(x)
        feats = []
        li = 0
        alpha = arch.alpha
        for depth in self.cfg.stage_depths:
            for _ in range(depth):
                x = self.backbone[li](x, alpha[li])
                li += 1
            feats.append(x)
        lat = [proj(c) for proj, c in zip(self.laterals, feats)]
        beta = arch.beta
        p: list[T.Tensor | None] = [None] * 4
        for k, lvl in enumerate((4, 3, 2, 1)):
            y = self.neck[k](lat[lvl - 1], beta[k])
            p[lvl - 1] = y if lvl == 4 else T.add(y, T.nearest_upsample(p[lvl]))
        n: list[T.Tensor] = []
        for k, lvl in enumerate((1, 2, 3, 4)):
            if lvl == 1:
                n.append(self.neck[4](p[0], beta[4]))
            else:
                n.append(T.add(self.neck[4 + k](T.maxpool2d(n[-1], 2), beta[4 + k]), p[lvl - 1]))
        g = self.cfg.head_pool
        fused = resize_to(n[0], g)
        for t in n[1:]:
            fused = T.add(fused, resize_to(t, g))
        return T.mul(fused, 1.0 / len(n))

    def forward(self, images, arch: ArchParams | None = None):
        arch = arch or self.arch
        h = self.features(images, arch)
        for k, layer in enumerate(self.head):
            h = layer(h, arch.gamma[k])
        h = self.fc(T.flatten(h))
        return self.cls_out(h), self.box_out(h)

    def loss(self, batch, arch: ArchParams | None = None) -> T.Tensor:
        """Detection loss on a ``toytask.Batch``."""
        cls, box = self(batch.images, arch)
        return detection_loss(cls, box, batch.labels, batch.boxes)

    def expected_cost(self, arch: ArchParams | None = None, tables=None, scale: float = 1.0) -> T.Tensor:
        """C(alpha) + C(beta) + C(gamma) on the softmax mixing weights."""
        arch = arch or self.arch
        tables = tables or self.cost_tables()
        total = None
        for c in COMPONENTS:
            term = cost_regularizer(arch[c], tables[c], scale)
            total = term if total is None else T.add(total, term)
        return total


def build_supernet(cfg: SupernetConfig, spaces: dict[str, SearchSpace], seed: int = 0) -> Supernet:
    return Supernet(cfg, spaces, seed)


# -- checkpoints --------------------------------------------------------------
def npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    """An ``.npz`` archive readable by ``np.load`` whose bytes depend only on
    the arrays: entries carry a fixed timestamp, unlike ``np.savez``."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(net: Supernet, path: str | Path, extra: dict | None = None) -> str:
    """Write config, spaces, architecture logits and all weights to an ``.npz``
    container.  Returns the sha256 of the written bytes."""
    meta = {
        "format": "trinas-supernet", "version": CHECKPOINT_VERSION, "seed": net.seed,
        "config": net.cfg.to_dict(), "spaces": {c: net.spaces[c].names for c in COMPONENTS},
        "dtype": str(net.arch.alpha.dtype), "extra": extra or {},
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for c in COMPONENTS:
        arrays[f"arch/{ARCH_KEYS[c]}"] = net.arch[c].data
    for name, p in net.named_parameters():
        arrays[f"w/{name}"] = p.data
    data = npz_bytes(arrays)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[Supernet, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "trinas-supernet":
            raise ValueError(f"{path} is not a supernet checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} is newer than supported {CHECKPOINT_VERSION}")
        cfg = SupernetConfig.from_dict(meta["config"])
        spaces = {c: SearchSpace.from_names(meta["spaces"][c], c) for c in COMPONENTS}
        with T.precision(meta["dtype"]):
            net = Supernet(cfg, spaces, meta["seed"])
        for c in COMPONENTS:
            net.arch[c].data = z[f"arch/{ARCH_KEYS[c]}"].copy()
        for name, p in net.named_parameters():
            p.data = z[f"w/{name}"].copy()
    return net, meta
