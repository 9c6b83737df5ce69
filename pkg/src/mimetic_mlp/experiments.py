"""Experiment runners: seeded training, bias sweeps, epoch curves, population farms and analysis.

Every runner is a pure function of an :class:`ExperimentConfig` plus a seed
list, so re-running a recipe reproduces its files exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from .autodiff import ConfigurationError
from .data import Dataset, SyntheticTaskSpec, default_data_dir, load_cifar10, make_synthetic
from .init_schemes import InitSpec
from .models import ModelConfig
from .population import MAX_DENSE_PN, analyze, collect, export_heatmap_data
from .train import (
    OptimSpec,
    SnapshotFormatError,
    TrainResult,
    TrainSettings,
    decode_snapshot,
    encode_snapshot,
    load_snapshot,
    run_hash,
    train,
)

logger = logging.getLogger(__name__)

SWEEP_ARMS = ("mean", "scalar_bias", "linear_bias")


class OutputExistsError(FileExistsError):
    pass


@dataclass(frozen=True)
class DataSpec:
    kind: str = "synthetic"
    dir: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    synthetic: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigurationError(f"data.kind must be synthetic or cifar10, got {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        d = dict(d)
        if isinstance(d.get("synthetic"), dict):
            d["synthetic"] = SyntheticTaskSpec(**d["synthetic"])
        return cls(**d)

    def identity(self) -> str:
        return json.dumps(self.to_dict() if self.kind == "synthetic" else
                          {k: v for k, v in self.to_dict().items() if k not in ("dir", "synthetic")},
                          sort_keys=True)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSpec = field(default_factory=DataSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    settings: TrainSettings = field(default_factory=TrainSettings)
    epochs: int = 5
    epochs_grid: tuple[int, ...] = (2, 5, 10)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    b_grid: tuple[float, ...] = (0.0, 0.01, 0.02, 0.05)
    sigma_b: float = 0.02
    init_modes: tuple[str, ...] = ("none", "constant:0.02")
    arms: tuple[str, ...] = SWEEP_ARMS
    out: str = "runs/default"

    def __post_init__(self):
        problems = []
        if not self.seeds:
            problems.append("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            problems.append("seeds must be distinct")
        if any(s < 0 for s in self.seeds):
            problems.append("seeds must be >= 0")
        if not self.b_grid:
            problems.append("b_grid must be non-empty")
        if not self.epochs_grid or any(e < 0 for e in self.epochs_grid):
            problems.append("epochs_grid must be non-empty and >= 0")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if not self.init_modes:
            problems.append("init_modes must be non-empty")
        if unknown := [a for a in self.arms if a not in SWEEP_ARMS]:
            problems.append(f"unknown sweep arms {unknown}")
        if problems:
            raise ConfigurationError("invalid experiment config: " + "; ".join(problems))
        self.model.validate()
        for mode in self.init_modes:
            InitSpec.parse_mode(mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["optim"] = self.optim.to_dict()
        d["data"] = self.data.to_dict()
        for k in ("epochs_grid", "seeds", "b_grid", "init_modes", "arms"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "data" in d:
                d["data"] = DataSpec.from_dict(d["data"])
            if "optim" in d:
                o = dict(d["optim"])
                if "betas" in o:
                    o["betas"] = tuple(o["betas"])
                d["optim"] = OptimSpec.from_dict(o)
            if "settings" in d:
                d["settings"] = TrainSettings(**d["settings"])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid experiment config: {exc}") from exc
        if "seeds" in d:
            seeds = d["seeds"] if isinstance(d["seeds"], list) else [d["seeds"]]
            d["seeds"] = tuple(x for item in seeds for x in
                               (parse_seeds(item) if isinstance(item, str) else (int(item),)))
        for k in ("epochs_grid", "seeds", "b_grid", "init_modes", "arms"):
            if k in d:
                d[k] = tuple(d[k])
        if "b_grid" in d:
            d["b_grid"] = tuple(float(b) for b in d["b_grid"])
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: not valid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def with_init(self, init: InitSpec) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, init_spec=init))


def with_mode(base: InitSpec, mode: str) -> InitSpec:
    """Overlay a ``--init`` mode string on ``base``, keeping its base scheme and bias settings."""
    m = InitSpec.parse_mode(mode)
    return replace(base, mlp_mean_mode=m.mlp_mean_mode, mlp_mean_value=m.mlp_mean_value,
                   anticorrelate_w1_w2=m.anticorrelate_w1_w2)


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0-4"`` -> (0, 1, 2, 3, 4); ``"1,3,9-10"`` -> (1, 3, 9, 10)."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return tuple(seeds)


def parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


# -- data -------------------------------------------------------------------

def load_data(spec: DataSpec) -> tuple[tuple[Dataset, Dataset], str]:
    """Return ``((train, test), data_id)``; ``data_id`` enters every run hash."""
    if spec.kind == "synthetic":
        train_set, test_set = make_synthetic(spec.synthetic, spec.seed)
    else:
        root = spec.dir or default_data_dir()
        if not root:
            raise ConfigurationError("cifar10 data needs data.dir or MIMETIC_DATA_DIR")
        train_set, test_set = load_cifar10(root)
    if spec.train_subset:
        train_set = train_set.subset(spec.train_subset)
    if spec.test_subset:
        test_set = test_set.subset(spec.test_subset)
    return (train_set, test_set), spec.identity()


_WORKER_DATA: dict[str, tuple[tuple[Dataset, Dataset], str]] = {}


def _cached_data(spec: DataSpec):
    key = json.dumps(spec.to_dict(), sort_keys=True)
    if key not in _WORKER_DATA:
        _WORKER_DATA[key] = load_data(spec)
    return _WORKER_DATA[key]


# -- task execution ---------------------------------------------------------

@dataclass(frozen=True)
class Task:
    key: tuple
    model: ModelConfig
    data: DataSpec
    optim: OptimSpec
    settings: TrainSettings
    epochs: int
    seed: int


def execute(task: Task) -> tuple[tuple, TrainResult, bytes | None]:
    """Run one task; exceptions become a failed result rather than propagating."""
    try:
        data, data_id = _cached_data(task.data)
        result, snap = train(task.model, data, task.optim, task.epochs, task.seed, task.settings, data_id)
        return task.key, result, (encode_snapshot(snap) if snap is not None else None)
    except Exception as exc:  # noqa: BLE001 - a worker failure must not stop the farm
        logger.exception("task %s failed", task.key)
        chash = run_hash(replace(task.model, seed=task.seed), task.optim, task.epochs, task.settings,
                         task.data.identity())
        return task.key, TrainResult(seed=task.seed, config_hash=chash, epochs=task.epochs,
                                     status=f"failed: {type(exc).__name__}: {exc}"), None


def run_tasks(tasks: Sequence[Task], parallel: int = 1,
              on_done: Callable[[tuple, TrainResult, bytes | None], None] | None = None) -> dict:
    """Execute tasks serially or on a process pool; results are keyed, so order never matters."""
    out = {}
    if parallel <= 1 or len(tasks) <= 1:
        done: Iterable = map(execute, tasks)
        for key, result, raw in done:
            out[key] = (result, raw)
            if on_done:
                on_done(key, result, raw)
        return out
    with ProcessPoolExecutor(max_workers=min(parallel, len(tasks))) as pool:
        for key, result, raw in pool.map(execute, tasks):
            out[key] = (result, raw)
            if on_done:
                on_done(key, result, raw)
    return out


def default_parallelism() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# -- helpers ----------------------------------------------------------------

def _claim_output(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise OutputExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def summarize(values: Sequence[float]) -> tuple[int, float, float, float]:
    """``(n, mean, sample std, standard error)``; std and SE are NaN below two values."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    n = len(v)
    mean = float(v.mean()) if n else math.nan
    std = float(v.std(ddof=1)) if n > 1 else math.nan
    return n, mean, std, (std / math.sqrt(n) if n > 1 else math.nan)


def seed_file(seed: int, suffix: str) -> str:
    return f"seed_{seed:05d}{suffix}"


def _final_acc(result: TrainResult) -> float:
    return result.final_test_acc if not result.failed and result.final_test_acc is not None else math.nan


# -- train ------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out: Path, parallel: int = 1, force: bool = False) -> list[TrainResult]:
    out = Path(out)
    _claim_output(out / "summary.json", force)
    tasks = [Task((s,), replace(cfg.model, seed=s), cfg.data, cfg.optim, cfg.settings, cfg.epochs, s)
             for s in cfg.seeds]
    (out / "results").mkdir(parents=True, exist_ok=True)
    (out / "snapshots").mkdir(exist_ok=True)

    def store(key, result, raw):
        (out / "results" / seed_file(key[0], ".json")).write_text(result.to_json())
        if raw is not None:
            _atomic_write(out / "snapshots" / seed_file(key[0], ".mimw"), raw)

    done = run_tasks(tasks, parallel, store)
    results = [done[(s,)][0] for s in cfg.seeds]
    n, mean, std, sem = summarize([_final_acc(r) for r in results])
    summary = {"config": cfg.to_dict(), "n": n, "mean_final_acc": mean, "std_final_acc": std,
               "sem_final_acc": sem, "failed_seeds": [r.seed for r in results if r.failed]}
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=1, sort_keys=True))
    return results


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _atomic_write(path: Path, raw: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)


# -- bias sweep -------------------------------------------------------------

def arm_init(base: InitSpec, arm: str, b: float) -> InitSpec:
    """Init for one sweep cell. ``mean`` shifts W1 by b; the two baselines put b elsewhere."""
    reset = replace(base, mlp_mean_mode="none", mlp_mean_value=0.0, learnable_scalar_bias=False,
                    scalar_bias_init=0.0, linear_bias_init="zero", linear_bias_value=0.0)
    if arm == "mean":
        return replace(reset, mlp_mean_mode="constant" if b != 0 else "none", mlp_mean_value=b)
    if arm == "scalar_bias":
        return replace(reset, learnable_scalar_bias=True, scalar_bias_init=b)
    if arm == "linear_bias":
        return replace(reset, linear_bias_init="constant", linear_bias_value=b)
    raise ValueError(f"unknown arm {arm!r}")


SWEEP_HEADER = ("arm", "b", "seed", "final_acc")
SUMMARY_HEADER = ("arm", "b", "n", "mean", "std", "sem")


def run_sweep_bias(cfg: ExperimentConfig, out: Path, parallel: int = 1, force: bool = False) -> list[tuple]:
    """One short run per (arm, b, seed). Writes ``sweep.csv`` and ``sweep_summary.csv``."""
    if 0.0 not in cfg.b_grid:
        raise ConfigurationError("b_grid must include 0 as the control")
    out = Path(out)
    _claim_output(out / "sweep.csv", force)
    cells = [(arm, b, s) for arm in cfg.arms for b in cfg.b_grid for s in cfg.seeds]
    tasks = [Task((arm, b, s), replace(cfg.model, seed=s, init_spec=arm_init(cfg.model.init_spec, arm, b)),
                  cfg.data, cfg.optim, cfg.settings, cfg.epochs, s) for arm, b, s in cells]
    done = run_tasks(tasks, parallel)
    rows = [(arm, b, s, _final_acc(done[(arm, b, s)][0])) for arm, b, s in cells]
    _write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    _write_csv(out / "sweep_summary.csv", SUMMARY_HEADER, summarize_rows(rows))
    return rows


def summarize_rows(rows: Sequence[tuple]) -> list[tuple]:
    """Group ``(group, x, seed, value)`` rows by ``(group, x)`` in first-seen order."""
    groups: dict[tuple, list[float]] = {}
    for g, x, _, value in rows:
        groups.setdefault((g, x), []).append(value)
    return [(g, x, *summarize(v)) for (g, x), v in groups.items()]


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# -- epoch curve ------------------------------------------------------------

CURVE_HEADER = ("mode", "epochs", "seed", "final_acc")


def run_epoch_curve(cfg: ExperimentConfig, out: Path, parallel: int = 1, force: bool = False) -> list[tuple]:
    """Independent from-scratch runs per (mode, budget, seed); each run's schedule spans its own budget."""
    out = Path(out)
    _claim_output(out / "epoch_curve.csv", force)
    cells = [(m, e, s) for m in cfg.init_modes for e in cfg.epochs_grid for s in cfg.seeds]
    tasks = []
    for mode, e, s in cells:
        init = with_mode(cfg.model.init_spec, mode)
        tasks.append(Task((mode, e, s), replace(cfg.model, seed=s, init_spec=init), cfg.data, cfg.optim,
                          cfg.settings, e, s))
    done = run_tasks(tasks, parallel)
    rows = [(m, e, s, _final_acc(done[(m, e, s)][0])) for m, e, s in cells]
    _write_csv(out / "epoch_curve.csv", CURVE_HEADER, rows)
    _write_csv(out / "epoch_curve_summary.csv", ("mode", "epochs", "n", "mean", "std", "sem"),
               summarize_rows(rows))
    return rows


# -- farm -------------------------------------------------------------------

@dataclass
class FarmReport:
    trained: list[int] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)


def farm_config_hash(cfg: ExperimentConfig) -> str:
    return run_hash(cfg.model, cfg.optim, cfg.epochs, cfg.settings, cfg.data.identity())


def _has_valid_snapshot(path: Path, chash: str) -> bool:
    try:
        return load_snapshot(path).config_hash == chash
    except (OSError, SnapshotFormatError):
        return False


def run_farm(cfg: ExperimentConfig, out: Path, parallel: int = 1) -> FarmReport:
    """Train one model per seed into ``out/snapshots``; seeds with a valid snapshot are skipped."""
    if len(cfg.seeds) < 2:
        raise ConfigurationError("a farm needs at least 2 seeds")
    out = Path(out)
    snaps, results = out / "snapshots", out / "results"
    snaps.mkdir(parents=True, exist_ok=True)
    results.mkdir(exist_ok=True)
    chash = farm_config_hash(cfg)
    report = FarmReport()
    todo = []
    for s in cfg.seeds:
        if _has_valid_snapshot(snaps / seed_file(s, ".mimw"), chash):
            report.skipped.append(s)
        else:
            todo.append(Task((s,), replace(cfg.model, seed=s), cfg.data, cfg.optim, cfg.settings, cfg.epochs, s))

    def store(key, result, raw):
        seed = key[0]
        (results / seed_file(seed, ".json")).write_text(result.to_json())
        if raw is None:
            report.failed.append(seed)
            logger.warning("seed %d failed: %s", seed, result.status)
        else:
            decode_snapshot(raw)
            _atomic_write(snaps / seed_file(seed, ".mimw"), raw)
            report.trained.append(seed)

    run_tasks(todo, parallel, store)
    (out / "farm.json").write_text(json.dumps({"config": _jsonable(cfg.to_dict()), "config_hash": chash},
                                              indent=1, sort_keys=True))
    return report


# -- analyze ----------------------------------------------------------------

def snapshot_dir_of(path) -> Path:
    path = Path(path)
    return path / "snapshots" if (path / "snapshots").is_dir() else path


def run_analyze(snapshot_dir, out, layers: Sequence[int] | None = None,
                dense_cap: int = MAX_DENSE_PN) -> dict[int, dict]:
    """Population statistics per MLP layer: ``stats_layer{L}.json`` and, when small enough, a heatmap CSV."""
    src = snapshot_dir_of(snapshot_dir)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if layers is None:
        first = next(iter(sorted(src.glob("*.mimw"))), None)
        depth = 0
        if first is not None:
            try:
                depth = sum(1 for n in load_snapshot(first).names() if n.endswith(".mlp.W1"))
            except SnapshotFormatError:
                depth = 0
        layers = range(max(depth, 1))
    report = {}
    for layer in layers:
        pop = collect(src, layer)
        stats = analyze(pop, dense_cap)
        d = stats.to_dict()
        d["config_hash"] = pop.config_hash
        d["seeds"] = pop.seeds
        d["skipped_corrupt"] = pop.skipped_corrupt
        d["skipped_failed"] = pop.skipped_failed
        d["w1_vs_w2"] = {axis: {"W1": stats.stripe_scores["W1"][axis], "W2": stats.stripe_scores["W2"][axis]}
                         for axis in ("rows", "columns")}
        if stats.cov is not None:
            export_heatmap_data(stats.cov, out / f"cov_layer{layer}.csv", pop.pn)
        (out / f"stats_layer{layer}.json").write_text(json.dumps(_jsonable(d), indent=1, sort_keys=True))
        report[layer] = d
    return report


def stripes_found(stats: dict, threshold: float = 1.5) -> list[str]:
    """Axes where W1 scores above ``threshold`` and above W2 on the same axis."""
    s = stats["stripe_scores"]
    return [axis for axis in ("rows", "columns")
            if s["W1"][axis] > threshold and s["W1"][axis] > s["W2"][axis]]
