"""Command-line entry point.

Exit codes: 0 success, 1 a check or run failed, 2 bad input (config, spec, files).

Config precedence: built-in defaults < JSON config file (--config) < flags.
The resolved configuration is written next to every run as config.json; it
holds the architecture text itself, so it alone reproduces the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .arch import (ArchSpecError, count_parameters, format_branchnet, load_branchnet,
                   parameter_breakdown, parse_arch_spec, reshape_to_branchconnect)
from .checkpoint import CheckpointError, load_checkpoint
from .data import DataFormatError
from .experiments import (ConfigError, DatasetConfig, ExperimentConfig, build_datasets,
                          check_network_gradients, compare_trajectories, run_experiment,
                          sweep_k, write_comparison)
from .gates import binarize_deterministic
from .network import init_network
from .trainer import NonFiniteError, TrainConfig, evaluate, read_metrics

log = logging.getLogger("branchconnect")

OUT_ENV = "BRANCHCONNECT_OUT"
USER_ERRORS = (ConfigError, ArchSpecError, CheckpointError, DataFormatError,
               FileNotFoundError, json.JSONDecodeError)


class CheckFailed(Exception):
    pass


def out_root():
    return Path(os.environ.get(OUT_ENV, "runs"))


def read_text(path, what="file"):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {p} does not exist")
    return p.read_text()


def parse_schedule(text):
    """'0:0.01,400:0.001' -> [(0, 0.01), (400, 0.001)]; a bare rate means [(0, rate)]."""
    pairs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ":" in part:
                it, rate = part.split(":")
                pairs.append((int(it), float(rate)))
            else:
                pairs.append((0, float(part)))
        except ValueError:
            raise ConfigError(f"bad --lr-schedule entry {part!r}; use ITER:RATE[,ITER:RATE]") from None
    return pairs


def int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- config assembly


def add_run_flags(p):
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--arch", help="architecture file (base or sectioned)")
    p.add_argument("--dataset", choices=["synthetic", "cifar10", "cifar100"])
    p.add_argument("--data-path", help="directory holding the CIFAR binary files")
    p.add_argument("--m", type=int, help="number of branches M")
    p.add_argument("--k", type=int, help="active connections per class K")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    p.add_argument("--iters", type=int, help="number of training iterations")
    p.add_argument("--lr-schedule", help="ITER:RATE[,ITER:RATE...], e.g. 0:0.001,4000:0.0001")
    p.add_argument("--gate-lr-mult", type=float, help="gate rate multiplier (default 10)")
    p.add_argument("--momentum", type=float, help="default 0.9")
    p.add_argument("--weight-decay", type=float, help="default 0.004")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--mirror", action="store_true", default=None)
    p.add_argument("--baseline", choices=["none", "base_v1", "random_connect"])
    p.add_argument("--dtype", choices=["float64", "float32"])


def load_config_dict(path):
    if not path:
        return {}, Path(".")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return d, p.parent


def resolve_config(args, command) -> ExperimentConfig:
    d, base_dir = load_config_dict(getattr(args, "config", None))
    d = json.loads(json.dumps(d))  # deep copy
    if args.arch:
        d["arch_file"] = str(Path(args.arch))
        d["arch"] = None
        base_dir = Path(".")
    if d.get("arch") is None and not d.get("arch_file"):
        raise ConfigError("no architecture given (--arch or 'arch_file' in --config)")
    ds = d.setdefault("dataset", {})
    if args.dataset:
        ds["kind"] = args.dataset
    if args.data_path:
        ds["path"] = args.data_path
    for flag, key in (("m", "M"), ("k", "K"), ("baseline", "baseline"), ("dtype", "dtype")):
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    tr = d.setdefault("train", {})
    for flag, key in (("seed", "seed"), ("iters", "max_iters"), ("gate_lr_mult", "gate_lr_multiplier"),
                      ("momentum", "momentum"), ("weight_decay", "weight_decay"),
                      ("batch_size", "batch_size"), ("eval_every", "eval_every"),
                      ("crop", "crop"), ("mirror", "mirror")):
        if getattr(args, flag) is not None:
            tr[key] = getattr(args, flag)
    if args.lr_schedule:
        tr["lr_schedule"] = parse_schedule(args.lr_schedule)
    if args.out:
        d["output_dir"] = args.out
    elif "output_dir" not in d:
        d["output_dir"] = str(out_root() / command)
    try:
        cfg = ExperimentConfig.from_dict(d, base_dir)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, USER_ERRORS):
            raise
        raise ConfigError(str(exc)) from None
    if cfg.arch_file:
        cfg.arch_file = str(Path(base_dir) / cfg.arch_file) if not Path(cfg.arch_file).is_absolute() \
            and base_dir != Path(".") else cfg.arch_file
    check_writable(cfg.output_dir)
    return cfg


def check_writable(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {p} is not writable: {exc}") from None
    if not os.access(p, os.W_OK):
        raise ConfigError(f"output directory {p} is not writable")


# ---------------------------------------------------------------- commands


def cmd_reshape(args):
    text = read_text(args.arch, "architecture file")
    base = parse_arch_spec(text)
    spec = reshape_to_branchconnect(base, args.m, args.k)
    if args.m == 1:
        print("warning: M=1 gives a degenerate single-branch network", file=sys.stderr)
    out = Path(args.out) if args.out else out_root() / "reshape" / f"{Path(args.arch).stem}_M{args.m}_K{args.k}.arch"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_branchnet(spec))
    b = parameter_breakdown(spec)
    print(f"base parameters:          {count_parameters(base)}")
    print(f"branchconnect parameters: {b['total']} (stem {b['stem']} + {args.m} x branch {b['branch']}"
          f" + head {b['head']})")
    print(f"gates (C x M):            {b['gates']}")
    print(f"wrote {out}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args, "train")
    records, state = run_experiment(cfg)
    last = records[-1]
    acc = "-" if last.test_accuracy is None else f"{last.test_accuracy:.4f}"
    print(f"iter {last.iteration} train_loss {last.train_loss:.4f} test_acc {acc}")
    print(f"wrote {Path(cfg.output_dir) / 'metrics.csv'} and {Path(cfg.output_dir) / 'checkpoint.bin'}")
    return 0


def cmd_eval(args):
    state, _, extra, _ = load_checkpoint(args.checkpoint)
    if args.config or args.dataset:
        d, _ = load_config_dict(args.config)
        ds = dict(d.get("dataset", {}))
    else:
        tc = (extra or {}).get("dataset")
        ds = dict(tc or {})
        snapshot = Path(args.checkpoint).with_name("config.json")
        if not ds and snapshot.is_file():
            ds = json.loads(snapshot.read_text()).get("dataset", {})
    if args.dataset:
        ds["kind"] = args.dataset
    if args.data_path:
        ds["path"] = args.data_path
    try:
        dc = DatasetConfig(**ds)
    except TypeError as exc:
        raise ConfigError(f"bad dataset config: {exc}") from None
    train, test = build_datasets(dc)
    target = test if args.split == "test" else train
    crop = (extra or {}).get("train_config", {}).get("crop")
    loss, acc = evaluate(state, target, args.batch_size, crop)
    result = {"split": args.split, "n": len(target), "loss": loss, "accuracy": acc}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_inspect_gates(args):
    state, _, _, _ = load_checkpoint(args.checkpoint)
    bank = state.gates
    binary = binarize_deterministic(bank)
    load = bank.branch_load(binary)
    print(f"C={bank.C} M={bank.M} K={bank.K} frozen={bank.frozen}")
    rows = ["class," + ",".join(f"g_r_{m}" for m in range(bank.M)) + ",active"]
    for c in range(bank.C):
        active = np.flatnonzero(binary[c]).tolist()
        vals = " ".join(f"{v:.4f}" for v in bank.real[c])
        print(f"class {c:3d}  g_r [{vals}]  active {active}")
        rows.append(f"{c}," + ",".join(repr(float(v)) for v in bank.real[c]) + ","
                    + " ".join(map(str, active)))
    print("branch load: " + " ".join(f"{m}:{n}" for m, n in enumerate(load)) + f"  (sum {int(load.sum())})")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("gates.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    Path(out).with_name(out.stem + "_load.csv").write_text(
        "branch,load\n" + "".join(f"{m},{int(n)}\n" for m, n in enumerate(load)))
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args):
    text = read_text(args.arch, "architecture file")
    spec = load_branchnet(text, args.m, args.k)
    if not args.keep_init:
        spec = replace(spec, init=("msra",))
    state = init_network(spec, args.seed, "float64")
    report = check_network_gradients(state, batch=args.batch, seed=args.seed, eps=args.eps,
                                     threshold=args.threshold, fault=args.inject_fault)
    width = max(len(g) for g in report.groups)
    for g, e in report.groups.items():
        mark = "ok" if e < report.threshold else "FAIL"
        print(f"{g:<{width}}  max_rel_error {e:.3e}  {mark}")
    if report.passed:
        print(f"PASS: all {len(report.groups)} groups below {report.threshold:g}")
        return 0
    print(f"FAIL: {', '.join(report.failed)}")
    return 1


def cmd_sweep_k(args):
    cfg = resolve_config(args, "sweep-k")
    ks = int_list(args.k_list) if args.k_list else list(range(1, cfg.M + 1))
    seeds = int_list(args.seeds) if args.seeds else [cfg.seed]
    rows = sweep_k(cfg, ks, seeds, cfg.output_dir, workers=args.workers)
    print("K,final_test_acc")
    for r in rows:
        print(f"{r['K']},{'' if r['final_test_acc'] is None else format(r['final_test_acc'], '.4f')}")
        for e in r["errors"]:
            print(f"  K={r['K']} failed: {e}", file=sys.stderr)
    print(f"wrote {Path(cfg.output_dir) / 'sweep.csv'}")
    return 1 if any(r["final_test_acc"] is None for r in rows) else 0


def collect_metrics(spec_text):
    """'name=path[,path...]' -> (name, [records per path]); a directory means its metrics.csv."""
    if "=" not in spec_text:
        raise ConfigError(f"--metrics expects NAME=PATH[,PATH...], got {spec_text!r}")
    name, paths = spec_text.split("=", 1)
    runs = []
    for p in paths.split(","):
        p = Path(p)
        if p.is_dir():
            p = p / "metrics.csv"
        if not p.is_file():
            raise ConfigError(f"run {name!r}: metrics file {p} does not exist")
        runs.append(read_metrics(p))
    return name, runs


def cmd_compare(args):
    seeds = int_list(args.seeds) if args.seeds else None
    runs = {}
    if args.metrics:
        for item in args.metrics:
            name, recs = collect_metrics(item)
            runs[name] = recs
        out = Path(args.out) if args.out else out_root() / "compare"
    else:
        cfgs = {}
        for name, path in (("branchconnect", args.branchconnect), ("base_v2", args.base_v2),
                           ("random_connect", args.random_connect)):
            if path is None:
                raise ConfigError(f"missing --{name.replace('_', '-')} config (or use --metrics)")
            d, base_dir = load_config_dict(path)
            cfgs[name] = ExperimentConfig.from_dict(d, base_dir)
        ref = cfgs["branchconnect"]
        for name, c in cfgs.items():
            if c.dataset != ref.dataset:
                raise ConfigError(f"config {name!r} uses a different dataset from branchconnect")
            if c.train.eval_every != ref.train.eval_every or c.train.max_iters != ref.train.max_iters:
                raise ConfigError(f"config {name!r}: evaluation cadence differs from branchconnect")
        out = Path(args.out) if args.out else out_root() / "compare"
        datasets = build_datasets(ref.dataset)
        for name, c in cfgs.items():
            runs[name] = []
            for s in seeds or [c.seed]:
                sub = replace(c, train=replace(c.train, seed=s))
                recs, _ = run_experiment(sub, out / name / f"seed{s}", datasets)
                runs[name].append(recs)
    comp = compare_trajectories(runs, reference=args.reference)
    summary = write_comparison(out, comp)
    for name, frac in comp.win_fraction.items():
        n = len(comp.gaps[name])
        print(f"{args.reference} vs {name}: test loss <= baseline at {frac:.2%} of {n} matched levels")
    for name, acc in comp.final_accuracy.items():
        print(f"final test accuracy {name}: {acc:.4f}")
    print(f"wrote {out / 'trajectories.csv'} and {out / 'gaps.csv'}")
    del summary
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="branchconnect", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reshape", help="convert a base architecture into stem/branch/gated head")
    r.add_argument("--arch", required=True)
    r.add_argument("--m", type=int, required=True)
    r.add_argument("--k", type=int, required=True)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_reshape)

    t = sub.add_parser("train", help="train one configuration")
    add_run_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with deterministic gates")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--dataset", choices=["synthetic", "cifar10", "cifar100"])
    e.add_argument("--data-path")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--batch-size", type=int, default=200)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("inspect-gates", help="print real gates, active sets and branch loads")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--out", help="CSV path (default: gates.csv next to the checkpoint)")
    g.set_defaults(fn=cmd_inspect_gates)

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    c.add_argument("--arch", required=True)
    c.add_argument("--m", type=int)
    c.add_argument("--k", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--batch", type=int, default=4)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--threshold", type=float, default=1e-3)
    c.add_argument("--keep-init", action="store_true",
                   help="use the file's INIT instead of MSRA scaling")
    c.add_argument("--inject-fault", metavar="GROUP",
                   help="double the analytic gradient of GROUP (forced failure)")
    c.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sweep-k", help="train one model per K and tabulate final accuracy")
    add_run_flags(s)
    s.add_argument("--k-list", help="comma-separated K values (default 1..M)")
    s.add_argument("--seeds", help="comma-separated seeds averaged per K")
    s.add_argument("--workers", type=int, default=1, help="parallel worker threads")
    s.set_defaults(fn=cmd_sweep_k)

    ct = sub.add_parser("compare-trajectories",
                        help="train/compare loss trajectories at matched train-loss levels")
    ct.add_argument("--branchconnect", help="config for the gated model")
    ct.add_argument("--base-v2", help="config for the parameter-matched base model")
    ct.add_argument("--random-connect", help="config for the frozen random-gate model")
    ct.add_argument("--metrics", action="append",
                    help="NAME=PATH[,PATH...] existing metrics instead of training (repeatable)")
    ct.add_argument("--reference", default="branchconnect")
    ct.add_argument("--seeds", help="comma-separated seeds (default: each config's seed)")
    ct.add_argument("--out")
    ct.set_defaults(fn=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ArchSpecError as exc:
        where = getattr(args, "arch", None)
        print(f"error: {where + ': ' if where else ''}{exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, CheckFailed) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
