"""Run configuration: one document covering every stage of a run.

Files use ``configparser`` syntax with Python literals as values::

    [run]
    seed = 3
    out_dir = "runs/desk"

    [search]
    lam = 0.1
    epochs = 12

Values are resolved in this order, later sources winning: the named
profile (``desk`` or ``paper``), the config file, environment variables
``TRINAS_<SECTION>_<KEY>`` for scalar keys, and finally ``--set
section.key=value`` command-line overrides.  Unknown sections or keys are
errors.  Seeds are not set per section: every stage draws from a named
substream of ``run.seed``.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import os
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .archio import TrainBudget
from .opspace import ConfigurationError
from .screening import ScreeningConfig
from .search import SearchConfig
from .supernet import SupernetConfig
from .toytask import DataError, DatasetSpec

ENV_PREFIX = "TRINAS_"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    spaces: str = "screened"          # "screened" or "appendix"
    baseline_count: int = 5

    def __post_init__(self):
        if self.spaces not in ("screened", "appendix"):
            raise ConfigurationError(f"run.spaces must be 'screened' or 'appendix', got {self.spaces!r}")
        if self.baseline_count < 1:
            raise ConfigurationError("run.baseline_count must be positive")


@dataclass(frozen=True)
class DataSection:
    train_pool: int = 512
    n_test: int = 256
    noise: float = 0.05
    min_side: float = 0.1
    max_side: float = 0.6
    variant: str = "standard"
    cache: bool = True

    def __post_init__(self):
        if self.train_pool < 2 or self.n_test < 1:
            raise ConfigurationError("data.train_pool must be >= 2 and data.n_test >= 1")


SECTIONS = {"run": RunSection, "supernet": SupernetConfig, "screening": ScreeningConfig,
            "search": SearchConfig, "data": DataSection, "retrain": TrainBudget}
_DERIVED = {"screening": {"seed"}, "search": {"seed"}, "retrain": {"seed"}}

PROFILES: dict[str, dict[str, dict]] = {
    "paper": {
        "run": {"out_dir": "runs/paper"},
        "supernet": dataclasses.asdict(SupernetConfig.paper()),
        "screening": {"targets": (8, 8, 8), "mu": 0.1, "epochs": 12, "warmup_epochs": 5, "arch_lr": 4e-4},
        "search": {"lam": 0.01, "epochs": 12, "arch_warmup_epochs": 5, "weight_lr": 0.04, "arch_lr": 4e-4},
        "data": {"train_pool": 2048, "n_test": 512},
        "retrain": {"epochs": 20, "lr": 0.04, "weight_decay": 1e-4, "clip": 1.0},
    },
    "desk": {
        "run": {"out_dir": "runs/desk"},
        "supernet": dataclasses.asdict(SupernetConfig.desk(image_size=32)),
        "screening": {"targets": (8, 8, 8), "mu": 0.1, "epochs": 4, "warmup_epochs": 1, "arch_lr": 4e-4,
                      "batch_size": 32},
        "search": {"lam": 0.01, "epochs": 8, "weight_lr": 0.04, "arch_lr": 4e-4, "batch_size": 32},
        "data": {"train_pool": 512, "n_test": 256},
        "retrain": {"epochs": 20, "lr": 0.04, "clip": 1.0},
    },
}


def substream(seed: int, name: str) -> int:
    """Independent 32-bit seed for the named consumer of ``seed``."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(cls)}


def _coerce(section: str, key: str, raw, kind: str):
    """Turn ``raw`` (text from a file, env or flag, or a preset value) into
    the declared type ``kind``."""
    value = raw
    if isinstance(raw, str) and kind != "str":
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            if kind == "bool" and raw.strip().lower() in ("true", "false", "yes", "no", "on", "off", "1", "0"):
                value = raw.strip().lower() in ("true", "yes", "on", "1")
            else:
                raise ConfigurationError(f"{section}.{key}: cannot parse {raw!r}") from None
    elif isinstance(raw, str):
        try:
            parsed = ast.literal_eval(raw)
            value = parsed if isinstance(parsed, str) else raw
        except (ValueError, SyntaxError):
            value = raw
    base, _, optional = kind.partition(" | ")
    if value is None and optional == "None":
        return None
    bad = ConfigurationError(f"{section}.{key}: expected {kind}, got {value!r}")
    if base == "bool":
        if isinstance(value, int) and not isinstance(value, bool) and value in (0, 1):
            value = bool(value)
        if not isinstance(value, bool):
            raise bad
    elif base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
    elif base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        value = float(value)
    elif base.startswith("tuple"):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                            for v in value):
            raise bad
        value = tuple(value)
    elif base == "str" and not isinstance(value, str):
        raise bad
    return value


def _check_key(section: str, key: str) -> str:
    if section not in SECTIONS:
        raise ConfigurationError(f"unknown config section [{section}] (known: {', '.join(SECTIONS)})")
    allowed = _field_types(SECTIONS[section])
    if key not in allowed or key in _DERIVED.get(section, ()):
        known = sorted(k for k in allowed if k not in _DERIVED.get(section, ()))
        raise ConfigurationError(f"unknown key {section}.{key} (known: {', '.join(known)})")
    return allowed[key]


@dataclass(frozen=True)
class RunConfig:
    profile: str
    run: RunSection
    supernet: SupernetConfig
    screening: ScreeningConfig
    search: SearchConfig
    data: DataSection
    retrain: TrainBudget

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def dataset_spec(self) -> DatasetSpec:
        n_weight = int(round(self.data.train_pool * self.search.split_fraction))
        n_arch = self.data.train_pool - n_weight
        if min(n_weight, n_arch) < 1:
            raise ConfigurationError("train_pool too small for the weight/arch split")
        return DatasetSpec(seed=substream(self.seed, "dataset"), n_weight=n_weight, n_arch=n_arch,
                           n_test=self.data.n_test, image_size=self.supernet.image_size,
                           num_classes=self.supernet.num_classes, noise=self.data.noise,
                           min_side=self.data.min_side, max_side=self.data.max_side, variant=self.data.variant)

    @property
    def init_seed(self) -> int:
        return substream(self.seed, "init")

    def to_text(self) -> str:
        """The resolved configuration in file syntax (round-trips through ``load``)."""
        lines = [f"# profile: {self.profile}"]
        for name in SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                if f.name in _DERIVED.get(name, ()):
                    continue
                lines.append(f"{f.name} = {getattr(obj, f.name)!r}")
            lines.append("")
        return "\n".join(lines)


def load(profile: str = "desk", path: str | Path | None = None, env: Mapping[str, str] | None = None,
         overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve a ``RunConfig`` from profile, file, environment and overrides."""
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r} (known: {', '.join(PROFILES)})")
    values: dict[str, dict] = {s: dict(v) for s, v in PROFILES[profile].items()}
    for s in SECTIONS:
        values.setdefault(s, {})

    def put(section: str, key: str, raw) -> None:
        default = _check_key(section, key)
        values[section][key] = _coerce(section, key, raw, default)

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                put(section, key, raw)
    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section = next((s for s in SECTIONS if rest.startswith(s + "_")), None)
        if section is None:
            raise ConfigurationError(f"environment variable {name} names no config section")
        key = rest[len(section) + 1:]
        if _check_key(section, key).startswith("tuple"):
            raise ConfigurationError(f"{name}: only scalar keys may come from the environment")
        put(section, key, raw)
    for item, raw in (overrides or {}).items():
        section, dot, key = item.partition(".")
        if not dot:
            raise ConfigurationError(f"override {item!r} must look like section.key")
        put(section, key, raw)
    seed = values["run"].get("seed", 0)
    values["screening"]["seed"] = substream(seed, "shuffle")
    values["search"]["seed"] = substream(seed, "shuffle")
    values["retrain"]["seed"] = substream(seed, "retrain")
    try:
        built = {s: SECTIONS[s](**values[s]) for s in SECTIONS}
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    cfg = RunConfig(profile, **built)
    if len(cfg.screening.targets) != 3:
        raise ConfigurationError("screening.targets needs one size per component (3 values)")
    try:
        cfg.dataset_spec()
    except DataError as exc:
        raise ConfigurationError(f"[data]: {exc}") from None
    return cfg
