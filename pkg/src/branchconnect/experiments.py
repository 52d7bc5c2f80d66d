"""Experiment orchestration: configs, single runs, K sweeps and loss-trajectory comparison."""
from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .arch import (BaseArchSpec, Layer, format_branchnet, is_sectioned, load_branchnet,
                   parse_arch_spec, reshape_to_branchconnect)
from .data import generate_synthetic, load_cifar_dir, split
from .network import init_network
from .trainer import MetricsRecord, TrainConfig, make_random_connect, train_loop

log = logging.getLogger(__name__)

BASELINES = ("none", "base_v1", "random_connect")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | cifar10 | cifar100
    path: str | None = None
    classes: int = 10
    n_per_class: int = 80
    hw: int = 16
    noise: float = 1.0
    data_seed: int = 0
    n_train: int = 400
    n_test: int = 400

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigError(f"dataset kind must be synthetic, cifar10 or cifar100, got {self.kind!r}")
        if self.kind != "synthetic" and not self.path:
            raise ConfigError(f"{self.kind} needs a dataset path")


@dataclass
class ExperimentConfig:
    arch: str  # architecture text (a file path is resolved by from_dict)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    M: int = 5
    K: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/experiment"
    baseline: str = "none"
    random_connect_seed: int | None = None
    dtype: str = "float64"
    arch_file: str | None = None

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.baseline != "base_v1" and not 1 <= self.K <= self.M:
            raise ConfigError(f"K must satisfy 1 <= K <= M, got K={self.K}, M={self.M}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def seed(self):
        return self.train.seed

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        if "arch" not in d and "arch_file" in d:
            d["arch"] = None
        arch_file = d.get("arch_file")
        if d.get("arch") is None:
            if not arch_file:
                raise ConfigError("config needs 'arch' text or 'arch_file'")
            p = Path(arch_file)
            if not p.is_absolute():
                p = Path(base_dir) / p
            if not p.exists():
                raise ConfigError(f"architecture file {p} does not exist")
            d["arch"] = p.read_text()
        ds = d.get("dataset", {})
        d["dataset"] = ds if isinstance(ds, DatasetConfig) else DatasetConfig(**ds)
        tr = d.get("train", {})
        d["train"] = tr if isinstance(tr, TrainConfig) else TrainConfig(**tr)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def resolved_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def build_datasets(dc: DatasetConfig):
    if dc.kind == "synthetic":
        full = generate_synthetic(dc.classes, dc.n_per_class, dc.hw, dc.data_seed, dc.noise)
        return split(full, dc.n_train, dc.n_test, dc.data_seed)
    train, test = load_cifar_dir(dc.path, dc.kind)
    if dc.n_train < len(train):
        train, _ = split(train, dc.n_train, 0, dc.data_seed)
    if dc.n_test < len(test):
        test = test.subset(np.arange(dc.n_test), test.name, train.mean_image)
    else:
        test.mean_image = train.mean_image
    return train, test


def build_spec(cfg: ExperimentConfig):
    if cfg.baseline == "base_v1":
        if is_sectioned(cfg.arch):
            raise ConfigError("baseline base_v1 needs an unsectioned base architecture")
        return reshape_to_branchconnect(parse_arch_spec(cfg.arch), 1, 1)
    return load_branchnet(cfg.arch, cfg.M, cfg.K)


def build_state(cfg: ExperimentConfig):
    spec = build_spec(cfg)
    state = init_network(spec, cfg.seed, cfg.dtype)
    if cfg.baseline == "random_connect":
        rc_seed = cfg.seed if cfg.random_connect_seed is None else cfg.random_connect_seed
        state = make_random_connect(state, spec.K, rc_seed)
    elif cfg.baseline == "base_v1":
        state.gates.frozen = True
    return state


def run_experiment(cfg: ExperimentConfig, out_dir=None, datasets=None):
    """Train one configuration; writes metrics.csv, checkpoint.bin, config.json, arch.txt."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = datasets if datasets is not None else build_datasets(cfg.dataset)
    state = build_state(cfg)
    (out / "config.json").write_text(cfg.resolved_json())
    (out / "arch.txt").write_text(format_branchnet(state.spec))
    records, state = train_loop(state, train, test if len(test) else None, cfg.train,
                                metrics_path=out / "metrics.csv",
                                checkpoint_path=out / "checkpoint.bin")
    return records, state


def widen(base: BaseArchSpec, factor: float) -> BaseArchSpec:
    """Scale every conv filter count and hidden FC width by ``factor`` (rounded)."""
    layers = []
    last_fc = max((i for i, lay in enumerate(base.layers) if lay.kind == "fc"), default=None)
    last_conv = max(i for i, lay in enumerate(base.layers) if lay.kind == "conv")
    for i, lay in enumerate(base.layers):
        if lay.kind == "conv" and not (base.P_f == 0 and i == last_conv):
            lay = replace(lay, filters=max(1, int(round(lay.filters * factor))))
        elif lay.kind == "fc" and i != last_fc:
            lay = replace(lay, units=max(1, int(round(lay.units * factor))))
        layers.append(lay)
    from .arch import format_base
    return parse_arch_spec(format_base(replace(base, layers=layers)))


# ---------------------------------------------------------------- K sweep


def dedupe_k(k_list, M):
    seen, out = set(), []
    for k in k_list:
        if k in seen:
            log.warning("duplicate K=%d in sweep list dropped", k)
            continue
        if not 1 <= k <= M:
            raise ConfigError(f"K={k} outside [1, M={M}]")
        seen.add(k)
        out.append(k)
    return out


def sweep_k(cfg: ExperimentConfig, k_list, seeds=(0,), out_dir=None, workers=1):
    """Train one model per (K, seed); returns rows (K, mean final test acc, per-seed accs, errors)."""
    out = Path(out_dir or cfg.output_dir)
    ks = dedupe_k(k_list, cfg.M)
    datasets = build_datasets(cfg.dataset)
    jobs = [(k, s) for k in ks for s in seeds]
    results = {}
    lock = threading.Lock()

    def run(job):
        k, s = job
        sub = replace(cfg, K=k, train=replace(cfg.train, seed=s))
        try:
            records, _ = run_experiment(sub, out / f"K{k}" / f"seed{s}", datasets)
            acc = records[-1].test_accuracy
            res = (acc, None)
        except Exception as exc:  # recorded, sweep continues
            log.error("sweep run K=%d seed=%d failed: %s", k, s, exc)
            res = (None, f"{type(exc).__name__}: {exc}")
        with lock:
            results[job] = res

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    rows = []
    for k in ks:
        accs = [results[(k, s)][0] for s in seeds]
        errs = [results[(k, s)][1] for s in seeds if results[(k, s)][1]]
        ok = [a for a in accs if a is not None]
        rows.append({"K": k, "final_test_acc": float(np.mean(ok)) if ok else None,
                     "per_seed": accs, "errors": errs})
    write_sweep(out, rows, seeds)
    return rows


def write_sweep(out, rows, seeds):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["K,final_test_acc"]
    for r in rows:
        lines.append(f"{r['K']},{'' if r['final_test_acc'] is None else repr(r['final_test_acc'])}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    plot = ["K,seed,final_test_acc,error"]
    for r in rows:
        for s, a in zip(seeds, r["per_seed"]):
            err = next((e for e in r["errors"]), "") if a is None else ""
            plot.append(f"{r['K']},{s},{'' if a is None else repr(a)},{json.dumps(err) if err else ''}")
    (out / "sweep_plot.csv").write_text("\n".join(plot) + "\n")


# ---------------------------------------------------------------- trajectories


def average_runs(name, runs):
    """Mean (iteration, train_loss, test_loss) over seeds; all runs must share a cadence."""
    if not runs:
        raise ValueError(f"run {name!r} has no metrics")
    iters = [r.iteration for r in runs[0]]
    for i, recs in enumerate(runs):
        if [r.iteration for r in recs] != iters:
            raise ValueError(f"run {name!r} seed #{i}: evaluation cadence differs from seed #0")
        missing = [r.iteration for r in recs if r.test_loss is None]
        if missing:
            raise ValueError(f"run {name!r} seed #{i}: no test loss at iterations {missing[:5]}")
    tr = np.mean([[r.train_loss for r in recs] for recs in runs], axis=0)
    te = np.mean([[r.test_loss for r in recs] for recs in runs], axis=0)
    acc = np.mean([[r.test_accuracy for r in recs] for recs in runs], axis=0)
    return np.asarray(iters), tr, te, acc


def interp_at_train_loss(train, test, level):
    """Test loss where the trajectory first reaches ``level`` (piecewise-linear), or None."""
    for k in range(len(train)):
        if train[k] == level:
            return float(test[k])
        if k and (train[k - 1] - level) * (train[k] - level) < 0:
            t = (level - train[k - 1]) / (train[k] - train[k - 1])
            return float(test[k - 1] + t * (test[k] - test[k - 1]))
    return None


@dataclass
class TrajectoryComparison:
    rows: list  # (iter, model, train_loss, test_loss)
    gaps: dict  # baseline -> list of (level, reference test, baseline test, gap)
    win_fraction: dict  # baseline -> fraction of matched levels where reference <= baseline
    final_accuracy: dict  # model -> mean final test accuracy


def compare_trajectories(runs: dict, reference="branchconnect", final_fraction=1 / 3):
    """Compare seed-averaged loss trajectories at matched train-loss levels.

    Levels are the reference model's train losses at evaluation points in the
    last ``final_fraction`` of training.  gap = reference test loss - baseline
    test loss, both interpolated by the same rule, so a model compared with
    itself has zero gap everywhere.
    """
    if reference not in runs:
        raise ValueError(f"reference run {reference!r} missing")
    avg = {name: average_runs(name, r) for name, r in runs.items()}
    ref_iters = avg[reference][0]
    for name, (iters, *_rest) in avg.items():
        if not np.array_equal(iters, ref_iters):
            raise ValueError(f"run {name!r}: evaluation cadence differs from {reference!r}")
    rows = []
    for name, (iters, tr, te, _) in avg.items():
        rows += [(int(i), name, float(a), float(b)) for i, a, b in zip(iters, tr, te)]
    rows.sort(key=lambda r: (r[0], r[1]))
    iters, rtr, rte, _ = avg[reference]
    cutoff = iters[-1] - iters[-1] * final_fraction  # 30 * (1 - 1/3) rounds above 20
    levels = [float(rtr[k]) for k in range(len(iters)) if iters[k] >= cutoff and iters[k] > 0]
    gaps, wins = {}, {}
    for name, (_, btr, bte, _) in avg.items():
        if name == reference:
            continue
        g = []
        for L in levels:
            ref_val = interp_at_train_loss(rtr, rte, L)
            base_val = interp_at_train_loss(btr, bte, L)
            if ref_val is None or base_val is None:
                continue
            g.append((L, ref_val, base_val, ref_val - base_val))
        gaps[name] = g
        wins[name] = (sum(1 for *_x, d in g if d <= 0) / len(g)) if g else float("nan")
    final_acc = {name: float(a[3][-1]) for name, a in avg.items()}
    return TrajectoryComparison(rows, gaps, wins, final_acc)


def write_comparison(out, comp: TrajectoryComparison):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["iter,model,train_loss,test_loss"]
    lines += [f"{i},{m},{a!r},{b!r}" for i, m, a, b in comp.rows]
    (out / "trajectories.csv").write_text("\n".join(lines) + "\n")
    g = ["baseline,train_loss_level,reference_test_loss,baseline_test_loss,gap"]
    for name, rows in comp.gaps.items():
        g += [f"{name},{L!r},{r!r},{b!r},{d!r}" for L, r, b, d in rows]
    (out / "gaps.csv").write_text("\n".join(g) + "\n")
    summary = {"win_fraction": comp.win_fraction, "final_test_accuracy": comp.final_accuracy}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True,
                                                 default=lambda v: None) + "\n")
    return summary


def isnan(v):
    return isinstance(v, float) and math.isnan(v)


# ---------------------------------------------------------------- gradient check

GRADCHECK_MAX_PARAMS = 50_000


@dataclass
class NetworkGradCheck:
    groups: dict  # group name -> max relative error
    threshold: float

    @property
    def failed(self):
        return [g for g, e in self.groups.items() if not e < self.threshold]

    @property
    def passed(self):
        return not self.failed


def check_network_gradients(state, batch=4, seed=0, eps=1e-5, threshold=1e-3, fault=None):
    """Finite-difference check of every parameter group and of relaxed gates.

    The gates are replaced by real values drawn uniformly from (0.1, 0.9), so
    the fused head is smooth in them.  ``fault`` names a group whose analytic
    gradient is doubled before comparison (forced-failure path).
    """
    from . import autodiff as ad
    from .arch import count_parameters
    from .network import forward

    n = count_parameters(state.spec)
    if n >= GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"gradcheck needs fewer than {GRADCHECK_MAX_PARAMS} parameters, spec has {n}")
    if state.dtype != "float64":
        raise ConfigError("gradcheck runs in float64 only")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch,) + tuple(state.spec.input_shape))
    y = rng.integers(0, state.spec.num_classes, size=batch)
    gates = ad.Tensor(rng.uniform(0.1, 0.9, size=(state.gates.C, state.gates.M)), name="gates")
    names = list(state.params) + ["gates"]
    tensors = [state.params[k] for k in state.params] + [gates]
    if fault is not None and fault not in names:
        raise ConfigError(f"unknown gradient group {fault!r}; groups are {names}")

    def loss_fn(*_):
        logits, _ = forward(state, x, gates=gates)
        return ad.softmax_cross_entropy(logits, y)

    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with ad.Tape() as tape:
        loss = loss_fn()
    ad.backward(tape, loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    if fault is not None:
        analytic[names.index(fault)] *= 2.0
    groups = {}
    for name, t, a in zip(names, tensors, analytic):
        rep = ad.grad_check(loss_fn, [t], eps=eps, analytic=[a])
        groups[name] = rep.max_rel_error
    return NetworkGradCheck(groups, threshold)
