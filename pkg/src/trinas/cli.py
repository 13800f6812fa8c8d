"""Command line front end.

Every subcommand reads one resolved ``RunConfig`` and writes its artifacts
under the run's output directory::

    subspaces.txt         screen      screened sub search spaces
    screening_trace.csv   screen      column norms after every arch step
    removals.csv          screen      the order in which candidates were dropped
    search_trace.csv      search      per-epoch losses and expected MACs
    checkpoints/          search      one supernet checkpoint per epoch
    supernet.npz          search      the final supernet
    architecture.txt      decode      the discrete architecture
    detector.npz          train       the retrained detector
    train_trace.csv       train       per-epoch retraining loss
    metrics.json          eval        test metrics (and the random baseline)
    cost_table.csv        flops       FLOPs/params per layer and candidate
    report.md             report      summary tables collated from the above
    config.ini            all         the resolved configuration

Artifacts hold no timestamps, so re-running a command on the same inputs
rewrites identical bytes.  A lockfile gives one process exclusive use of an
output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from . import config as config_mod
from .archio import (DecodeError, FormatError, decode, detector_metrics, load_detector,
                     random_baseline, read_architecture, read_spaces, save_detector, serialize, serialize_spaces,
                     train_detector, write_text)
from .costmodel import AlignmentError, CostTable
from .opspace import COMPONENTS, ConfigurationError, OpNameError, appendix_subspace, full_catalogue
from .screening import screen, screening_supernet
from .search import run_search, write_search_trace
from .supernet import Supernet, layer_plan, load_checkpoint, save_checkpoint
from .toytask import DataError, load_or_generate
from .training import NumericalError

log = logging.getLogger("trinas")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERICAL = 5
EXIT_LOCKED = 6

LOCK_NAME = ".trinas.lock"


class MissingArtifact(FileNotFoundError):
    """A prerequisite file from an earlier stage is absent."""


class DirectoryLocked(RuntimeError):
    pass


# -- plumbing ------------------------------------------------------------------------------
@contextmanager
def locked(out: Path):
    """Hold ``out/.trinas.lock`` for the duration of the block."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
    except FileExistsError:
        raise DirectoryLocked(f"{out} is in use by another run (lockfile {path}); "
                              f"if no run is active, delete the lockfile") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}: {hint}")
    return path


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_bytes(buf.getvalue().encode())


def write_json(path: Path, obj) -> None:
    path.write_bytes((json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def dataset(cfg: config_mod.RunConfig):
    cache = cfg.out_dir / "cache" if cfg.data.cache else None
    return load_or_generate(cfg.dataset_spec(), cache)


def resolve_spaces(cfg: config_mod.RunConfig, appendix: bool = False, path: str | None = None):
    if path is not None:
        return read_spaces(require(Path(path), "pass an existing sub-space file"))
    if appendix or cfg.run.spaces == "appendix":
        return {c: appendix_subspace(c) for c in COMPONENTS}
    target = cfg.out_dir / "subspaces.txt"
    return read_spaces(require(target, "run `trinas screen` first, or pass --appendix to search the fixed "
                                       "Appendix sub spaces"))


# -- subcommands ---------------------------------------------------------------------------
def cmd_screen(cfg, args) -> int:
    out = cfg.out_dir
    data = dataset(cfg)
    model = screening_supernet(cfg.supernet, cfg.screening.screen_depth_factor, cfg.init_seed)
    log.info("screening %s candidates down to %s", [len(model.op_names(c)) for c in COMPONENTS],
             list(cfg.screening.targets))
    t0 = time.perf_counter()
    state = screen(model, data, cfg.screening, out / "screening_trace.csv")
    write_text(out / "subspaces.txt", serialize_spaces(state.spaces()))
    write_csv(out / "removals.csv", ["epoch", "step", "component", "op_name", "column_norm"],
              [(r.epoch, r.step, r.component, r.op_name, repr(r.column_norm)) for r in state.removal_log])
    cross = state.audit.cross_samples()
    log.info("screened in %.1fs; %d removals; split audit %s", time.perf_counter() - t0, len(state.removal_log),
             cross)
    for c in COMPONENTS:
        print(f"{c}: {' '.join(state.active_ops[c])}")
    return EXIT_OK


def cmd_search(cfg, args) -> int:
    out = cfg.out_dir
    spaces = resolve_spaces(cfg, args.appendix, args.spaces)
    data = dataset(cfg)
    net = Supernet(cfg.supernet, spaces, seed=cfg.init_seed)
    t0 = time.perf_counter()
    result = run_search(net, data, cfg.search, out_dir=out, log=log.info)
    sha = save_checkpoint(net, out / "supernet.npz", extra={"epoch": cfg.search.epochs - 1, "search": "final"})
    write_search_trace(result, out / "search_trace.csv")
    log.info("searched in %.1fs; split audit %s", time.perf_counter() - t0, result.audit.cross_samples())
    print(f"supernet.npz sha256 {sha}")
    return EXIT_OK


def cmd_decode(cfg, args) -> int:
    out = cfg.out_dir
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "supernet.npz"
    require(ckpt, "run `trinas search` first or pass --checkpoint")
    net, _ = load_checkpoint(ckpt)
    source = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    arch = decode(net.arch, net.spaces, net.cfg, seed=cfg.seed, source=source)
    write_text(out / "architecture.txt", serialize(arch))
    print(f"decoded architecture: {arch.flops(net.cfg)} MACs")
    return EXIT_OK


def _architecture(cfg, args):
    path = Path(args.arch) if args.arch else cfg.out_dir / "architecture.txt"
    return read_architecture(require(path, "run `trinas decode` first or pass --arch"))


def cmd_train(cfg, args) -> int:
    out = cfg.out_dir
    arch = _architecture(cfg, args)
    data = dataset(cfg)
    net, history = train_detector(arch, cfg.supernet, data, cfg.retrain, log=log.info)
    sha = save_detector(net, out / "detector.npz")
    write_csv(out / "train_trace.csv", ["epoch", "train_loss"], [(e, repr(v)) for e, v in enumerate(history)])
    print(f"detector.npz sha256 {sha}")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    out = cfg.out_dir
    path = Path(args.detector) if args.detector else out / "detector.npz"
    net = load_detector(require(path, "run `trinas train` first or pass --detector"))
    data = dataset(cfg)
    metrics = {"detector": detector_metrics(net, data)}
    if args.baseline:
        spaces = resolve_spaces(cfg, args.appendix, args.spaces)
        runs, mean = random_baseline(spaces, cfg.supernet, data, cfg.retrain, cfg.run.baseline_count, cfg.seed)
        metrics["baseline"] = {"runs": runs, "mean": mean}
        metrics["beats_baseline"] = bool(metrics["detector"]["loss"] < mean["loss"])
    write_json(out / "metrics.json", metrics)
    d = metrics["detector"]
    print(f"test loss {d['loss']:.4f} accuracy {d['accuracy']:.3f} mean IoU {d['mean_iou']:.3f} "
          f"MACs {d['flops']:.0f}")
    if args.baseline:
        print(f"random baseline mean loss {metrics['baseline']['mean']['loss']:.4f}")
    return EXIT_OK


def cmd_flops(cfg, args) -> int:
    out = cfg.out_dir
    if args.spaces == "appendix":
        spaces = {c: appendix_subspace(c) for c in COMPONENTS}
    elif args.spaces == "catalogue":
        spaces = {c: full_catalogue().restrict(c) for c in COMPONENTS}
    elif args.spaces == "screened":
        spaces = resolve_spaces(cfg)
    else:
        spaces = resolve_spaces(cfg, path=args.spaces)
    plan = layer_plan(cfg.supernet)
    comps = [args.component] if args.component else list(COMPONENTS)
    rows = []
    for c in comps:
        table = CostTable.build(spaces[c], [i.shape() for i in plan[c]], [i.layer_id for i in plan[c]])
        rows.extend(table.to_csv_rows(args.mac_factor))
    target = Path(args.output) if args.output else out / "cost_table.csv"
    write_csv(target, ["layer_id", "op_name", "flops", "params"], rows)
    print(f"{target}: {len(rows)} rows")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg, args) -> int:
    out = cfg.out_dir
    lines = ["# Run report", "", f"profile `{cfg.profile}`, seed {cfg.seed}", ""]
    found = False
    if (out / "subspaces.txt").exists():
        found = True
        spaces = read_spaces(out / "subspaces.txt")
        lines += ["## Screened sub spaces", "", "| component | size | operations |", "|---|---|---|"]
        lines += [f"| {c} | {len(spaces[c])} | {' '.join(spaces[c].names)} |" for c in COMPONENTS]
        lines.append("")
    if (out / "removals.csv").exists():
        rows = _read_csv(out / "removals.csv")
        lines += ["## Screening removals", "", "| component | removed | first step | last step |", "|---|---|---|---|"]
        for c in COMPONENTS:
            mine = [r for r in rows if r["component"] == c]
            if mine:
                lines.append(f"| {c} | {len(mine)} | {mine[0]['step']} | {mine[-1]['step']} |")
        lines.append("")
    if (out / "search_trace.csv").exists():
        found = True
        lines += ["## Search", "", "| epoch | train loss | val loss | expected MACs |", "|---|---|---|---|"]
        for r in _read_csv(out / "search_trace.csv"):
            lines.append(f"| {r['epoch']} | {float(r['train_loss']):.4f} | {float(r['val_loss']):.4f} | "
                         f"{float(r['expected_flops']):.0f} |")
        lines.append("")
    if (out / "architecture.txt").exists():
        found = True
        arch = read_architecture(out / "architecture.txt")
        lines += ["## Architecture", "", "| component | operations |", "|---|---|"]
        lines += [f"| {c} | {' '.join(arch.ops(c))} |" for c in COMPONENTS]
        lines.append("")
    if (out / "metrics.json").exists():
        found = True
        m = json.loads((out / "metrics.json").read_text())
        lines += ["## Test metrics", "", "| model | loss | accuracy | mean IoU | MACs |", "|---|---|---|---|---|"]
        rows = [("searched", m["detector"])]
        if "baseline" in m:
            rows += [(f"random {i}", r) for i, r in enumerate(m["baseline"]["runs"])]
            rows.append(("random mean", m["baseline"]["mean"]))
        for name, r in rows:
            lines.append(f"| {name} | {r['loss']:.4f} | {r['accuracy']:.3f} | {r['mean_iou']:.3f} | {r['flops']:.0f} |")
        lines.append("")
    if not found:
        raise MissingArtifact(f"nothing to report in {out}: run `trinas screen` or `trinas search` first")
    text = "\n".join(lines)
    write_text(out / "report.md", text)
    print(text, end="")
    return EXIT_OK


def cmd_selftest(cfg, args) -> int:
    from .selftest import run_selftest
    return EXIT_OK if run_selftest(print) else EXIT_FAILURE


COMMANDS = {"screen": cmd_screen, "search": cmd_search, "decode": cmd_decode, "train": cmd_train,
            "eval": cmd_eval, "flops": cmd_flops, "report": cmd_report, "selftest": cmd_selftest}
_UNLOCKED = {"selftest"}


# -- argument parsing -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--profile", choices=sorted(config_mod.PROFILES), default=argparse.SUPPRESS,
                   help="preset to start from (default: desk)")
    g.add_argument("--config", metavar="FILE", default=argparse.SUPPRESS, help="config file")
    g.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=argparse.SUPPRESS,
                   help="override one key (repeatable)")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="shorthand for --set run.seed=N")
    g.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="shorthand for --set run.out_dir=DIR")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="trinas", parents=[common],
                                     description="Hierarchical screening and differentiable search of small "
                                                 "detectors on a synthetic task.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    add("screen", "shrink the full catalogue to one sub search space per component")
    p = add("search", "differentiable search over the sub spaces")
    p.add_argument("--appendix", action="store_true", help="search the fixed Appendix sub spaces")
    p.add_argument("--spaces", metavar="FILE", help="sub-space file (default: OUT/subspaces.txt)")
    p = add("decode", "turn the searched logits into an architecture file")
    p.add_argument("--checkpoint", metavar="FILE", help="supernet checkpoint (default: OUT/supernet.npz)")
    p = add("train", "retrain the decoded architecture from scratch")
    p.add_argument("--arch", metavar="FILE", help="architecture file (default: OUT/architecture.txt)")
    p = add("eval", "test metrics of the retrained detector")
    p.add_argument("--detector", metavar="FILE", help="detector checkpoint (default: OUT/detector.npz)")
    p.add_argument("--baseline", action="store_true", help="also retrain random architectures for comparison")
    p.add_argument("--appendix", action="store_true", help="draw baseline architectures from the Appendix spaces")
    p.add_argument("--spaces", metavar="FILE", help="sub-space file for the baseline")
    p = add("flops", "cost table of every candidate at every searched layer")
    p.add_argument("--spaces", default="appendix", metavar="WHICH",
                   help="appendix, catalogue, screened or a sub-space file (default: appendix)")
    p.add_argument("--component", choices=COMPONENTS)
    p.add_argument("--mac-factor", type=int, choices=(1, 2), default=1,
                   help="2 reports FLOPs as two per multiply-accumulate")
    p.add_argument("--output", metavar="FILE", help="default: OUT/cost_table.csv")
    add("report", "collate the run's CSV and JSON artifacts into report.md")
    add("selftest", "run the oracle checks (finite differences, reference conv, FLOPs counter)")
    return parser


def resolve(args) -> config_mod.RunConfig:
    overrides: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigurationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if hasattr(args, "seed"):
        overrides["run.seed"] = str(args.seed)
    if hasattr(args, "out"):
        overrides["run.out_dir"] = repr(args.out)
    return config_mod.load(getattr(args, "profile", "desk"), getattr(args, "config", None), overrides=overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(getattr(args, "verbose", 0), logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        if args.command in _UNLOCKED:
            return COMMANDS[args.command](cfg, args)
        with locked(cfg.out_dir):
            write_text(cfg.out_dir / "config.ini", cfg.to_text())
            return COMMANDS[args.command](cfg, args)
    except DirectoryLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (ConfigurationError, OpNameError, AlignmentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FormatError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DecodeError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
