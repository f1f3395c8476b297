"""Experiment orchestration: multi-seed runs, aggregation, CSV reports.

A run directory contains one subdirectory per experiment, holding
``config.txt`` (the resolved configuration echo), one ``seed<k>.csv`` of
per-epoch rows per seed, best-snapshot checkpoints, ``summary.csv`` with
one row per (seed, task), and ``aggregate.csv`` with min/max/mean/std over
seeds. Accuracies in CSV files are percentages; standard deviations are
population (not sample) deviations, as the ``*_std_pop`` naming records.

Reruns with an identical configuration and AVIL_WORKERS=1 produce
byte-identical CSV files; with more workers, only delta collection
parallelizes and its reduction order is fixed, so results do not change.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import weighting
from .model import build_model, save_checkpoint
from .weighting import NanLossError, TrainerConfig

ConfigError = weighting.ConfigError


class ReportError(RuntimeError):
    pass


DESK_TRAIN_SUBSET = 10_000
DEV_SIZE = 10_000
METHODS = ("singletask", "multitask", "diw", "avil")


@dataclass
class ExperimentConfig:
    method: str = "avil"
    target: str = datamod.TASK_TOP_LEFT
    seeds: tuple = (1, 2, 3)
    scale: str = "desk"
    epochs: int | None = None
    batch_size: int = 256
    learning_rate: float = 0.05
    momentum: float = 0.9
    rho: float = 1.0
    dtype: str = "float32"
    train_subset: int | None = None
    tune_steps: int = 10
    meta_learning_rate: float = 0.005
    meta_momentum: float = 0.5
    clamp_floor: float = 1e-6
    diw_eta: float = 0.1
    diw_patience: int = 10
    eval_batch_size: int = 512
    data_source: str = "auto"
    data_dir: str = "data"
    pair_seed: int = 1234
    synthetic_n: int = 60_000
    synthetic_test_n: int = 10_000
    dev_size: int = DEV_SIZE
    out_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"scale must be 'desk' or 'full', got {self.scale!r}")
        if self.scale == "desk" and len(self.seeds) > 5:
            raise ConfigError(f"desk scale runs at most 5 seeds, got {len(self.seeds)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def effective_epochs(self):
        if self.epochs is not None:
            return self.epochs
        return 20 if self.scale == "desk" else 100

    @property
    def effective_subset(self):
        if self.train_subset is not None:
            return self.train_subset
        return DESK_TRAIN_SUBSET if self.scale == "desk" else None

    def trainer_config(self):
        return TrainerConfig(
            epochs=self.effective_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            rho=self.rho,
            tune_steps=self.tune_steps,
            meta_learning_rate=self.meta_learning_rate,
            meta_momentum=self.meta_momentum,
            clamp_floor=self.clamp_floor,
            diw_eta=self.diw_eta,
            diw_patience=self.diw_patience,
            eval_batch_size=self.eval_batch_size,
            workers=env_workers(),
            dtype=self.dtype,
        )

    def run_name(self):
        if self.method in ("singletask", "avil", "diw"):
            return f"{self.method}-{self.target}"
        return self.method


def env_workers():
    """AVIL_WORKERS caps parallel delta-collection workers; default 1."""
    raw = os.environ.get("AVIL_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"AVIL_WORKERS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# configuration file: flat key=value with dotted sections

_KEY_MAP = {
    "method": ("method", str),
    "target": ("target", str),
    "seeds": ("seeds", "seeds"),
    "scale": ("scale", str),
    "train.lr": ("learning_rate", float),
    "train.momentum": ("momentum", float),
    "train.batch_size": ("batch_size", int),
    "train.epochs": ("epochs", int),
    "train.rho": ("rho", float),
    "train.dtype": ("dtype", str),
    "train.subset": ("train_subset", int),
    "avil.s": ("tune_steps", int),
    "avil.meta_lr": ("meta_learning_rate", float),
    "avil.meta_momentum": ("meta_momentum", float),
    "clamp.floor": ("clamp_floor", float),
    "diw.eta_w": ("diw_eta", float),
    "diw.patience": ("diw_patience", int),
    "eval.batch_size": ("eval_batch_size", int),
    "data.source": ("data_source", str),
    "data.dir": ("data_dir", str),
    "data.pair_seed": ("pair_seed", int),
    "data.synthetic_n": ("synthetic_n", int),
    "data.synthetic_test_n": ("synthetic_test_n", int),
    "data.dev_size": ("dev_size", int),
    "out.dir": ("out_dir", str),
}


def _parse_seeds(raw):
    return tuple(int(s) for s in raw.replace(",", " ").split())


def parse_config_text(text, base=None):
    """Apply key=value lines to a config; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KEY_MAP:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        attr, conv = _KEY_MAP[key]
        values[attr] = _parse_seeds(raw) if conv == "seeds" else conv(raw)
    base = base or ExperimentConfig()
    return replace(base, **values)


def load_config(path, overrides=None):
    cfg = parse_config_text(Path(path).read_text(encoding="utf-8"))
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def config_echo(config):
    """Resolved configuration as sorted key=value lines (written per run)."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "seeds":
            value = ",".join(str(s) for s in value)
        lines.append(f"{f.name}={value}")
    lines.append(f"effective_epochs={config.effective_epochs}")
    lines.append(f"effective_subset={config.effective_subset}")
    lines.append(f"workers={env_workers()}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data loading


def load_pools(config):
    """(train pool, test set) according to the configured data source.

    ``auto`` prefers cached generated files, then raw IDX files, then the
    synthetic source.
    """
    directory = Path(config.data_dir)
    source = config.data_source
    cache_train = directory / datamod.cache_name("train", config.pair_seed)
    cache_test = directory / datamod.cache_name("test", config.pair_seed)
    if source == "auto":
        if cache_train.exists() and cache_test.exists():
            source = "cache"
        else:
            try:
                datamod.find_idx_pair(directory, "train")
                source = "idx"
            except FileNotFoundError:
                source = "synthetic"
    if source == "cache":
        return (
            datamod.load_cache(cache_train, split="train"),
            datamod.load_cache(cache_test, split="test"),
        )
    if source == "idx":
        train_images, train_labels = datamod.load_idx(*datamod.find_idx_pair(directory, "train"))
        test_images, test_labels = datamod.load_idx(*datamod.find_idx_pair(directory, "t10k"))
        assert len(train_images) == 60_000, f"train pool has {len(train_images)} images, expected 60000"
        assert len(test_images) == 10_000, f"test set has {len(test_images)} images, expected 10000"
        return (
            datamod.make_multimnist(train_images, train_labels, config.pair_seed, split="train"),
            datamod.make_multimnist(test_images, test_labels, config.pair_seed, split="test"),
        )
    if source == "synthetic":
        train_images, train_labels = datamod.synthetic_mnist(config.synthetic_n, config.pair_seed)
        test_images, test_labels = datamod.synthetic_mnist(
            config.synthetic_test_n, config.pair_seed + 1
        )
        return (
            datamod.make_multimnist(train_images, train_labels, config.pair_seed, split="train"),
            datamod.make_multimnist(test_images, test_labels, config.pair_seed, split="test"),
        )
    raise ConfigError(f"unknown data source {source!r}")


def seed_datasets(config, train_pool, seed):
    """Per-seed (train, dev) pair: dev split plus optional desk-scale subset."""
    train_full, dev = datamod.split_dev(train_pool, config.dev_size, seed)
    subset = config.effective_subset
    if subset is not None and subset < len(train_full):
        order = datamod.sample_fraction(train_full, 1.0, seed, 0, key="subset")
        train_full = train_full.take(np.sort(order[:subset]))
    return train_full, dev


# ---------------------------------------------------------------------------
# metrics


def evaluate_accuracy(model, dataset, task, batch_size=512):
    """Fraction of argmax-correct predictions (ties to the lowest class)."""
    acc, _ = weighting.evaluate(model, dataset, task, batch_size)
    return acc


def aggregate_values(values):
    """min/max/mean/population-std of a sequence of floats."""
    arr = np.asarray(list(values), dtype=np.float64)
    return {
        "min": float(arr.min()),
        "max": float(arr.max()),
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=0)),
    }


# ---------------------------------------------------------------------------
# CSV writing

_ACC = ".6f"
_LOSS = ".8f"
_GEN = ".10g"


def _fmt(value, spec):
    return "" if value is None else format(value, spec)


def _row_csv(values):
    return ",".join(values) + "\n"


def write_seed_csv(path, result):
    """Per-epoch rows: losses, dev accuracies (percent), alphas, weights."""
    tasks = result.task_ids
    header = ["epoch"]
    header += [f"train_loss_{t}" for t in tasks]
    header += [f"dev_acc_{t}" for t in tasks]
    header += ["target_dev_loss"]
    header += [f"alpha_{t}" for t in tasks]
    header += [f"weight_{t}" for t in tasks]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_row_csv(header))
        for row in result.rows:
            cells = [str(row.epoch)]
            cells += [_fmt(row.train_loss.get(t), _LOSS) for t in tasks]
            cells += [_fmt(100.0 * row.dev_acc[t] if t in row.dev_acc else None, _ACC) for t in tasks]
            cells += [_fmt(row.target_dev_loss, _LOSS)]
            cells += [_fmt(row.alphas.get(t) if row.alphas else None, _GEN) for t in tasks]
            cells += [_fmt(row.weights.get(t) if row.weights else None, _GEN) for t in tasks]
            fh.write(_row_csv(cells))


def write_summary_csv(path, rows):
    header = ["seed", "task", "status", "best_epoch", "dev_acc", "test_acc"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_row_csv(header))
        for row in rows:
            fh.write(_row_csv([
                str(row["seed"]),
                row["task"],
                row["status"],
                "" if row.get("best_epoch") is None else str(row["best_epoch"]),
                _fmt(row.get("dev_acc"), _ACC),
                _fmt(row.get("test_acc"), _ACC),
            ]))


def write_aggregate_csv(path, summary_rows):
    """Aggregates over successful seeds; failures are counted, not imputed."""
    header = ["task", "split", "n_seeds", "n_failed", "min", "max", "mean", "std_pop"]
    tasks = sorted({row["task"] for row in summary_rows})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_row_csv(header))
        for task in tasks:
            ok = [r for r in summary_rows if r["task"] == task and r["status"] == "ok"]
            failed = [r for r in summary_rows if r["task"] == task and r["status"] != "ok"]
            for split, key in (("dev", "dev_acc"), ("test", "test_acc")):
                if not ok:
                    fh.write(_row_csv([task, split, "0", str(len(failed)), "", "", "", ""]))
                    continue
                agg = aggregate_values([r[key] for r in ok])
                fh.write(_row_csv([
                    task, split, str(len(ok)), str(len(failed)),
                    _fmt(agg["min"], _ACC), _fmt(agg["max"], _ACC),
                    _fmt(agg["mean"], _ACC), _fmt(agg["std"], _ACC),
                ]))


# ---------------------------------------------------------------------------
# experiment driver


def _dispatch(config, trainer_cfg, train_set, dev_set, seed):
    tasks = sorted(train_set.labels)
    if config.method == "singletask":
        return weighting.singletask_train(train_set, dev_set, config.target, trainer_cfg, seed)
    if config.method == "multitask":
        return weighting.multitask_train(train_set, dev_set, tasks, trainer_cfg, seed)
    if config.method == "diw":
        return weighting.diw_train(train_set, dev_set, tasks, config.target, trainer_cfg, seed)
    return weighting.avil_train(train_set, dev_set, tasks, config.target, trainer_cfg, seed)


def run_experiment(config, pools=None):
    """Run the configured method over all seeds; returns the run directory.

    Per seed: a dev split and optional desk subset are drawn, the method is
    trained, the best snapshot per reported task is evaluated exactly once
    on the test set, and per-epoch rows are written to CSV. A seed whose
    loss turns NaN is recorded as failed and excluded from aggregates.
    """
    if pools is None:
        pools = load_pools(config)
    train_pool, test_set = pools
    trainer_cfg = config.trainer_config()
    run_dir = Path(config.out_dir) / config.run_name()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config_echo(config), encoding="utf-8")
    summary_rows = []
    for seed in config.seeds:
        train_set, dev_set = seed_datasets(config, train_pool, seed)
        try:
            result = _dispatch(config, trainer_cfg, train_set, dev_set, seed)
        except NanLossError as exc:
            summary_rows.append({
                "seed": seed, "task": config.target, "status": f"failed:{exc}",
            })
            continue
        write_seed_csv(run_dir / f"seed{seed}.csv", result)
        for task, best in sorted(result.best.items()):
            eval_model = build_model(result.task_ids, seed, dtype=trainer_cfg.np_dtype)
            eval_model.restore(best.params)
            test_acc = evaluate_accuracy(eval_model, test_set, task, config.eval_batch_size)
            suffix = f"_{task}" if len(result.best) > 1 else ""
            save_checkpoint(run_dir / f"seed{seed}{suffix}.ckpt", best.params, result.task_ids)
            summary_rows.append({
                "seed": seed,
                "task": task,
                "status": "ok",
                "best_epoch": best.epoch,
                "dev_acc": 100.0 * best.dev_accuracy,
                "test_acc": 100.0 * test_acc,
            })
    write_summary_csv(run_dir / "summary.csv", summary_rows)
    write_aggregate_csv(run_dir / "aggregate.csv", summary_rows)
    return run_dir


# ---------------------------------------------------------------------------
# reporting


def _read_csv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def report(run_dir):
    """Comparison table across finished runs plus per-run alpha/weight CSVs.

    Returns the table text. Run subdirectories without a summary are listed
    as incomplete; an empty directory is an error.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"no runs found: {run_dir} is not a directory")
    subdirs = sorted(p for p in run_dir.iterdir() if p.is_dir())
    complete = [p for p in subdirs if (p / "summary.csv").exists()]
    incomplete = [p.name for p in subdirs if not (p / "summary.csv").exists()]
    if not complete:
        raise ReportError(f"no runs found under {run_dir}")
    lines = []
    comparison_rows = []
    header = f"{'run':<18} {'task':<6} {'split':<5} {'min':>8} {'max':>8} {'mean':>8} {'std':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for path in complete:
        for row in _read_csv(path / "aggregate.csv"):
            comparison_rows.append({"run": path.name, **row})
            if row["mean"]:
                lines.append(
                    f"{path.name:<18} {row['task']:<6} {row['split']:<5} "
                    f"{float(row['min']):>8.2f} {float(row['max']):>8.2f} "
                    f"{float(row['mean']):>8.2f} {float(row['std_pop']):>7.2f}"
                )
            else:
                lines.append(f"{path.name:<18} {row['task']:<6} {row['split']:<5} (all seeds failed)")
    if incomplete:
        lines.append("incomplete runs: " + ", ".join(incomplete))
    with open(run_dir / "comparison.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_row_csv(["run", "task", "split", "n_seeds", "n_failed", "min", "max", "mean", "std_pop"]))
        for row in comparison_rows:
            fh.write(_row_csv([
                row["run"], row["task"], row["split"], row["n_seeds"], row["n_failed"],
                row["min"], row["max"], row["mean"], row["std_pop"],
            ]))
    for path in complete:
        if not path.name.startswith("avil"):
            continue
        out = path / "alpha_long.csv"
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_row_csv(["seed", "epoch", "task", "alpha", "weight"]))
            for seed_csv in sorted(path.glob("seed*.csv")):
                seed = seed_csv.stem.removeprefix("seed")
                for row in _read_csv(seed_csv):
                    for key, value in row.items():
                        if key.startswith("alpha_") and value:
                            task = key.removeprefix("alpha_")
                            fh.write(_row_csv([seed, row["epoch"], task, value, row[f"weight_{task}"]]))
    return "\n".join(lines)
