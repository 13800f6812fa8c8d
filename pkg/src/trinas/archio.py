"""Discrete architectures: decoding, a text format, standalone detectors and
retraining.

Architecture files are line oriented::

    trinas-architecture 1
    fingerprint: 3f0c2a9d81b7e645
    stage_depths: 1 1 2 1
    head_fc_dim: 32
    seed: 0
    source: <sha256 of the search checkpoint, or "none">
    backbone/0: ir_k3_d1_e3
    ...
    neck/7: sep_k5_d2
    head/0: conv_k3_d1
    ...

Header keys appear in exactly that order.  Body lines are
``component/layer_index: op_name``; backbone first, then the eight neck
layers (four top-down P4..P1, four bottom-up N1..N4), then the head.
Lines end with ``\\n`` and there is no trailing blank line.

Sub-space files use the same idea::

    trinas-subspaces 1
    backbone: ir_k3_d1_e3 ir_k3_d1_e6 ...
    neck: ...
    head: ...
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .costmodel import CostTable, flops_of
from .layers import ConvUnit, Linear, Module, ModuleList
from .opspace import COMPONENTS, ConfigurationError, SearchSpace, build_block, parse_opname
from .optim import SGD, cosine_lr
from .supernet import ArchParams, LayerInfo, Supernet, SupernetConfig, layer_plan, npz_bytes, scale_predictors
from .toytask import Dataset, Split, evaluate
from .training import detection_loss, optimizer_step

ARCH_FORMAT = "trinas-architecture"
SPACES_FORMAT = "trinas-subspaces"
FORMAT_VERSION = 1


class DecodeError(ValueError):
    """Architecture logits cannot be decoded (non-finite entries)."""


class FormatError(ValueError):
    """An architecture or sub-space file does not follow the grammar."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Architecture:
    backbone: tuple[str, ...]
    neck: tuple[str, ...]
    head: tuple[str, ...]
    stage_depths: tuple[int, ...]
    head_fc_dim: int
    fingerprint: str
    seed: int = 0
    source: str = "none"

    def __post_init__(self):
        for comp in COMPONENTS:
            object.__setattr__(self, comp, tuple(getattr(self, comp)))
            for name in getattr(self, comp):
                parse_opname(name)
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        if len(self.backbone) != sum(self.stage_depths):
            raise ConfigurationError(f"{len(self.backbone)} backbone ops for stage depths {self.stage_depths}")
        if len(self.neck) != 8:
            raise ConfigurationError(f"the neck has 8 searched layers, got {len(self.neck)} ops")

    def ops(self, component: str) -> tuple[str, ...]:
        return getattr(self, component)

    def backbone_layers(self) -> list[tuple[str, str, int]]:
        """``(layer_id, op_name, stride)`` for every backbone layer."""
        out, i = [], 0
        for s, depth in enumerate(self.stage_depths):
            for b in range(depth):
                out.append((f"backbone.s{s + 1}.b{b}", self.backbone[i], 2 if b == 0 else 1))
                i += 1
        return out

    def check(self, cfg: SupernetConfig) -> None:
        if cfg.fingerprint() != self.fingerprint:
            raise ConfigurationError(f"architecture fingerprint {self.fingerprint} does not match "
                                     f"config fingerprint {cfg.fingerprint()}")
        counts = tuple(len(self.ops(c)) for c in COMPONENTS)
        if counts != cfg.layer_counts():
            raise ConfigurationError(f"layer counts {counts} do not match config {cfg.layer_counts()}")

    def table(self, cfg: SupernetConfig) -> list[tuple[str, str, int]]:
        """``(layer_id, op_name, MACs)`` rows, a textual stand-in for a diagram."""
        plan = layer_plan(cfg)
        return [(info.layer_id, op, flops_of(op, info.shape()))
                for c in COMPONENTS for info, op in zip(plan[c], self.ops(c))]

    def flops(self, cfg: SupernetConfig) -> int:
        return sum(f for _, _, f in self.table(cfg))


# -- decode ----------------------------------------------------------------------
def decode(arch, spaces: dict[str, SearchSpace], cfg: SupernetConfig, seed: int = 0,
           source: str = "none") -> Architecture:
    """Pick the highest-logit candidate in every layer.

    Ties go to the lowest column.  Screened spaces keep catalogue order, so
    there the lowest column is also the lowest catalogue index.
    """
    mats = arch.numpy() if isinstance(arch, ArchParams) else arch
    chosen = {}
    for c in COMPONENTS:
        m = np.asarray(mats[c].data if isinstance(mats[c], T.Tensor) else mats[c])
        if not np.isfinite(m).all():
            raise DecodeError(f"{c} logits contain non-finite entries")
        if m.shape[1] != len(spaces[c]):
            raise ConfigurationError(f"{c}: {m.shape[1]} logit columns for {len(spaces[c])} candidates")
        chosen[c] = [spaces[c].names[int(j)] for j in np.argmax(m, axis=1)]
    return Architecture(chosen["backbone"], chosen["neck"], chosen["head"], cfg.stage_depths,
                        cfg.head_fc_dim, cfg.fingerprint(), seed, source)


# -- text formats ----------------------------------------------------------------
def serialize(arch: Architecture) -> str:
    lines = [f"{ARCH_FORMAT} {FORMAT_VERSION}", f"fingerprint: {arch.fingerprint}",
             "stage_depths: " + " ".join(str(d) for d in arch.stage_depths),
             f"head_fc_dim: {arch.head_fc_dim}", f"seed: {arch.seed}", f"source: {arch.source}"]
    for c in COMPONENTS:
        lines += [f"{c}/{i}: {op}" for i, op in enumerate(arch.ops(c))]
    return "\n".join(lines) + "\n"


_HEADER_KEYS = ("fingerprint", "stage_depths", "head_fc_dim", "seed", "source")


def _version_line(line: str, fmt: str) -> None:
    parts = line.split(" ")
    if len(parts) != 2 or parts[0] != fmt:
        raise FormatError(1, f"expected '{fmt} <version>', got {line!r}")
    if not parts[1].isdigit() or int(parts[1]) > FORMAT_VERSION:
        raise FormatError(1, f"unsupported version {parts[1]!r} (this reader handles {FORMAT_VERSION})")


def parse(text: str) -> Architecture:
    if not text.endswith("\n"):
        raise FormatError(text.count("\n") + 1, "file must end with a newline")
    lines = text[:-1].split("\n")
    _version_line(lines[0], ARCH_FORMAT)
    header = {}
    for no, key in enumerate(_HEADER_KEYS, start=2):
        if no - 1 >= len(lines) or not lines[no - 1].startswith(key + ": "):
            raise FormatError(no, f"expected '{key}: ...'")
        header[key] = lines[no - 1][len(key) + 2:]
    ops: dict[str, list[str]] = {c: [] for c in COMPONENTS}
    order = 0
    for no, line in enumerate(lines[len(_HEADER_KEYS) + 1:], start=len(_HEADER_KEYS) + 2):
        key, sep, op = line.partition(": ")
        comp, slash, idx = key.partition("/")
        if not sep or not slash or comp not in ops or not idx.isdigit():
            raise FormatError(no, f"expected 'component/layer_index: op_name', got {line!r}")
        if COMPONENTS.index(comp) < order:
            raise FormatError(no, f"{comp} lines must precede {COMPONENTS[order]} lines")
        order = COMPONENTS.index(comp)
        if int(idx) != len(ops[comp]):
            raise FormatError(no, f"expected {comp}/{len(ops[comp])}, got {key}")
        try:
            parse_opname(op)
        except ValueError as exc:
            raise FormatError(no, str(exc)) from None
        ops[comp].append(op)
    try:
        depths = tuple(int(d) for d in header["stage_depths"].split(" "))
        return Architecture(ops["backbone"], ops["neck"], ops["head"], depths, int(header["head_fc_dim"]),
                            header["fingerprint"], int(header["seed"]), header["source"])
    except (ValueError, ConfigurationError) as exc:
        raise FormatError(len(lines), str(exc)) from None


def serialize_spaces(spaces: dict[str, SearchSpace]) -> str:
    lines = [f"{SPACES_FORMAT} {FORMAT_VERSION}"]
    lines += [f"{c}: " + " ".join(spaces[c].names) for c in COMPONENTS]
    return "\n".join(lines) + "\n"


def parse_spaces(text: str) -> dict[str, SearchSpace]:
    if not text.endswith("\n"):
        raise FormatError(text.count("\n") + 1, "file must end with a newline")
    lines = text[:-1].split("\n")
    _version_line(lines[0], SPACES_FORMAT)
    if len(lines) != 1 + len(COMPONENTS):
        raise FormatError(len(lines), f"expected {len(COMPONENTS)} component lines")
    out = {}
    for no, (c, line) in enumerate(zip(COMPONENTS, lines[1:]), start=2):
        if not line.startswith(c + ": "):
            raise FormatError(no, f"expected '{c}: op ...'")
        try:
            out[c] = SearchSpace.from_names(line[len(c) + 2:].split(" "), c)
        except ValueError as exc:
            raise FormatError(no, str(exc)) from None
        if out[c].duplicates:
            raise FormatError(no, f"duplicate candidates {list(out[c].duplicates)}")
    return out


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_bytes(text.encode("utf-8"))


def read_architecture(path: str | Path) -> Architecture:
    return parse(Path(path).read_text(encoding="utf-8"))


def read_spaces(path: str | Path) -> dict[str, SearchSpace]:
    return parse_spaces(Path(path).read_text(encoding="utf-8"))


# -- standalone detector ------------------------------------------------------------
class FixedLayer(Module):
    """A searched layer reduced to its single chosen block."""

    def __init__(self, info: LayerInfo, op: str, rng: np.random.Generator):
        super().__init__()
        self.info, self.op = info, op
        self.block = build_block(op, info.c_in, info.c_out, info.stride, rng)

    def forward(self, x: T.Tensor, logits_row=None) -> T.Tensor:
        return self.block(x)


class Detector(Supernet):
    """The supernet wiring with one fixed block per searched layer."""

    def __init__(self, cfg: SupernetConfig, arch: Architecture, seed: int = 0):
        Module.__init__(self)
        arch.check(cfg)
        self.cfg, self.seed, self.architecture = cfg, seed, arch
        self.plan = layer_plan(cfg)
        self.spaces = {c: SearchSpace.from_names(sorted(set(arch.ops(c))), c) for c in COMPONENTS}
        g = cfg.head_pool
        rng = np.random.default_rng([seed, 12])
        self.stem = ConvUnit(cfg.in_channels, cfg.stem_channels, 3, rng, stride=2)
        self.backbone = ModuleList(FixedLayer(i, op, rng) for i, op in zip(self.plan["backbone"], arch.backbone))
        self.laterals = ModuleList(ConvUnit(c, cfg.neck_channels, 1, rng, act=False) for c in cfg.stage_channels)
        self.neck = ModuleList(FixedLayer(i, op, rng) for i, op in zip(self.plan["neck"], arch.neck))
        self.head = ModuleList(FixedLayer(i, op, rng) for i, op in zip(self.plan["head"], arch.head))
        self.fc = Linear(cfg.neck_channels * g * g, cfg.head_fc_dim, rng, act=True)
        self.cls_out = Linear(cfg.head_fc_dim, cfg.num_classes, rng)
        self.box_out = Linear(cfg.head_fc_dim, 4, rng)
        scale_predictors(self)
        zeros = {c: T.Tensor(np.zeros((len(self.plan[c]), 1), dtype=T.get_default_dtype())) for c in COMPONENTS}
        self.arch = ArchParams(zeros["backbone"], zeros["neck"], zeros["head"])

    def op_names(self, component: str) -> list[str]:
        return list(self.architecture.ops(component))

    def remove_candidate(self, component: str, col: int) -> None:
        raise ConfigurationError("a standalone detector has no candidates to remove")

    def flops(self) -> int:
        return self.architecture.flops(self.cfg)


def _copy_module(dst: Module, src: Module) -> None:
    d, s = list(dst.parameters()), list(src.parameters())
    if [p.shape for p in d] != [p.shape for p in s]:
        raise ConfigurationError("cannot copy weights between differently shaped modules")
    for a, b in zip(d, s):
        a.data = b.data.copy()


def instantiate(arch: Architecture, cfg: SupernetConfig, seed: int = 0,
                inherit_from: Supernet | None = None) -> Detector:
    """Build the standalone detector for ``arch``.

    Weights are fresh unless ``inherit_from`` names the supernet to copy the
    chosen candidates' (and the fixed glue layers') weights from.
    """
    net = Detector(cfg, arch, seed)
    if inherit_from is not None:
        if inherit_from.cfg.fingerprint() != cfg.fingerprint():
            raise ConfigurationError("supernet and architecture configs differ")
        for name in ("stem", "laterals", "fc", "cls_out", "box_out"):
            src, dst = getattr(inherit_from, name), getattr(net, name)
            if isinstance(src, ModuleList):
                for a, b in zip(dst, src):
                    _copy_module(a, b)
            else:
                _copy_module(dst, src)
        for c in COMPONENTS:
            for layer, sup in zip(net.layers(c), inherit_from.layers(c)):
                _copy_module(layer.block, sup.candidates[sup.ops.index(layer.op)])
    return net


def decoded_flops(arch: Architecture, tables: dict[str, CostTable], spaces: dict[str, SearchSpace]) -> float:
    """Sum of the chosen ops' entries in the supernet's cost tables."""
    return float(sum(tables[c].chosen_flops([spaces[c].index(op) for op in arch.ops(c)]) for c in COMPONENTS))


# -- retraining -----------------------------------------------------------------------
@dataclass(frozen=True)
class TrainBudget:
    epochs: int = 10
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    clip: float | None = 5.0
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < epochs")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


def predict(net: Supernet, split: Split, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    logits, boxes = [], []
    with T.no_grad():
        for b in split.batches(batch_size, 0, 0, shuffle=False):
            c, x = net(b.images)
            logits.append(c.data)
            boxes.append(x.data)
    return np.concatenate(logits), np.concatenate(boxes)


def evaluate_net(net: Supernet, split: Split) -> dict[str, float]:
    logits, boxes = predict(net, split)
    return evaluate(logits, boxes, split.labels, split.boxes)


def train_net(net: Supernet, train: Split, budget: TrainBudget, log=None) -> list[float]:
    """Plain SGD on every weight with a cosine schedule; returns per-epoch losses."""
    params = net.weight_parameters()
    sgd = SGD(params, budget.lr, budget.momentum, budget.weight_decay)
    per_epoch = math.ceil(len(train) / budget.batch_size)
    total, warmup = budget.epochs * per_epoch, budget.warmup_epochs * per_epoch
    step, history = 0, []
    for epoch in range(budget.epochs):
        losses = []
        for b in train.batches(budget.batch_size, budget.seed, epoch):
            sgd.lr = cosine_lr(budget.lr, step, total, warmup=warmup)
            losses.append(optimizer_step(net.loss, b, params, net.arch.tensors(), sgd, budget.clip, "retrain"))
            step += 1
        history.append(float(np.mean(losses)))
        if log is not None:
            log(f"retrain epoch {epoch}: loss {history[-1]:.4f}")
    return history


def train_detector(arch: Architecture, cfg: SupernetConfig, data: Dataset, budget: TrainBudget,
                   log=None) -> tuple[Detector, list[float]]:
    """Fresh detector for ``arch`` trained on the weight and arch splits,
    with its per-epoch training losses."""
    net = instantiate(arch, cfg, seed=budget.seed)
    return net, train_net(net, data.train_pool(), budget, log)


def detector_metrics(net: Detector, data: Dataset) -> dict[str, float]:
    metrics = evaluate_net(net, data.test)
    metrics.update(flops=float(net.flops()), params=float(net.num_parameters()))
    return metrics


def retrain_and_eval(arch: Architecture, cfg: SupernetConfig, data: Dataset, budget: TrainBudget,
                     log=None) -> dict[str, float]:
    """Train ``arch`` from scratch on the weight and arch splits, score it on
    the test split.  Deterministic given the budget's seed."""
    return detector_metrics(train_detector(arch, cfg, data, budget, log)[0], data)


def save_detector(net: Detector, path: str | Path) -> str:
    """Write a trained detector (architecture text, config, weights); returns
    the sha256 of the bytes, which depend only on the contents."""
    meta = {"format": "trinas-detector", "version": FORMAT_VERSION, "seed": net.seed,
            "config": net.cfg.to_dict(), "architecture": serialize(net.architecture)}
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for name, p in net.named_parameters():
        arrays[f"w/{name}"] = p.data
    data = npz_bytes(arrays)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_detector(path: str | Path) -> Detector:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "trinas-detector":
            raise ValueError(f"{path} is not a detector checkpoint")
        net = Detector(SupernetConfig.from_dict(meta["config"]), parse(meta["architecture"]), meta["seed"])
        for name, p in net.named_parameters():
            p.data = z[f"w/{name}"].copy()
    return net


def random_architecture(spaces: dict[str, SearchSpace], cfg: SupernetConfig,
                        rng: np.random.Generator, seed: int = 0) -> Architecture:
    """One op per layer, drawn uniformly from each component's sub space."""
    counts = cfg.layer_counts()
    picks = {c: [spaces[c].names[int(j)] for j in rng.integers(0, len(spaces[c]), size=n)]
             for c, n in zip(COMPONENTS, counts)}
    return Architecture(picks["backbone"], picks["neck"], picks["head"], cfg.stage_depths, cfg.head_fc_dim,
                        cfg.fingerprint(), seed, "random")


def random_baseline(spaces: dict[str, SearchSpace], cfg: SupernetConfig, data: Dataset, budget: TrainBudget,
                    count: int = 5, seed: int = 0) -> tuple[list[dict[str, float]], dict[str, float]]:
    """Retrain ``count`` uniformly random architectures identically; returns
    the individual metrics and their mean."""
    rng = np.random.default_rng([seed, 31])
    runs = [retrain_and_eval(random_architecture(spaces, cfg, rng, seed), cfg, data, budget) for _ in range(count)]
    mean = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
    return runs, mean
