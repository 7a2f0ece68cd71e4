"""Config-driven attack experiments: shadow-size sweeps with repeated attacks.

A config is a YAML mapping (see ``configs/default.yaml`` for every key).
``validate_config`` turns raw text into an :class:`ExperimentConfig` or a
:class:`ConfigError` listing every problem with its field path.

Seeds all descend from the master seed::

    data        derive_seed(master, "data")
    split       derive_seed(master, "split")
    source      derive_seed(master, "source")
    unit        derive_seed(master, "unit", shadow_size, repeat)

A unit is one (shadow size, repeat) pair.  Its seed does not depend on the
regime or attack kind, so every regime sees the same shadow draws and every
kind is fitted on the same shadow ensemble.  Comparisons across regimes
and kinds are therefore paired.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__
from .attacks import (AttackKind, AttackSettings, BlackBox, build_adversary,
                      run_blackbox_target_attack, train_shadows_for)
from .data import LabeledDataset, SynthConfig, load_table, split_four_way, stratified_sample, synth_generate
from .errors import ConfigError
from .metrics import METRICS, MetricsReport, aggregate, evaluate
from .nn import ACTIVATIONS, LayeredNet, TrainConfig, accuracy, init_net, train
from .seeding import derive_seed
from .shadow import Regime, ShadowPlan, build_attack_training_set
from .transfer import TransferMode, TransferPlan, split, transfer_train

logger = logging.getLogger(__name__)

PAPER_SWEEP = (100, 200, 300, 400, 500, 600, 800, 1000)
SUMMARY_HEADER = ("regime", "kind", "shadow_size", "metric", "mean", "std",
                  "n_repeats", "undefined_count")
APPENDIX_HEADER = ("mode", "kind", "target_train_size", "metric", "mean", "std",
                   "n_repeats", "undefined_count")


# -- config ---------------------------------------------------------------------

@dataclass(frozen=True)
class SourceSpec:
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "relu"
    split_index: int | None = None
    select_best: bool = False
    train: TrainConfig = TrainConfig(epochs=100, batch_size=16, learning_rate=0.01)


@dataclass(frozen=True)
class AppendixSpec:
    victim_mode: TransferMode = TransferMode.FREEZING
    attacker_mode: TransferMode = TransferMode.FREEZING
    target_data: SynthConfig = SynthConfig(class_count=5, dim=1, points_per_class=200)
    target_train_sizes: tuple[int, ...] = (100, 200)
    target_head: tuple[int, ...] = ()
    target_train: TrainConfig = TrainConfig(epochs=50, batch_size=16, learning_rate=0.01)
    shadow_size: int = 100
    repeats: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    synth: SynthConfig | None = SynthConfig(class_count=10, dim=16, points_per_class=240,
                                            noise_sigma=1.0)
    data_path: str | None = None
    split_sizes: tuple[int, int, int, int] = (200, 200, 1000, 1000)
    stratified: bool = True
    source: SourceSpec = SourceSpec()
    num_shadows: int = 25
    shadow_train: TrainConfig = TrainConfig(epochs=100, batch_size=16, learning_rate=0.01)
    attack: AttackSettings = AttackSettings()
    sweep: tuple[int, ...] = PAPER_SWEEP
    kinds: tuple[AttackKind, ...] = (AttackKind.DNN, AttackKind.SVM, AttackKind.MPE)
    regimes: tuple[Regime, ...] = (Regime.BASELINE, Regime.FREEZING, Regime.FINE_TUNING)
    repeats: int = 10
    baseline_full_size: int | None = None
    workers: int = 1
    appendix: AppendixSpec | None = None

    def to_dict(self) -> dict:
        """Plain mapping in the config file's schema, every default filled in."""
        def train_block(t: TrainConfig) -> dict:
            return {k: getattr(t, k) for k in
                    ("epochs", "batch_size", "learning_rate", "momentum", "weight_decay")}

        def synth_block(s: SynthConfig, with_dim: bool = True) -> dict:
            keys = ["class_count", "dim", "points_per_class", "class_mean_scale", "noise_sigma"]
            return {k: getattr(s, k) for k in keys if with_dim or k != "dim"}

        names = ("source_train", "source_test", "shadow_train", "shadow_test")
        out = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": ({"path": self.data_path} if self.data_path is not None
                        else {"synth": synth_block(self.synth)}),
            "splits": {**dict(zip(names, self.split_sizes)), "stratified": self.stratified},
            "source": {"hidden": list(self.source.hidden),
                       "activation": self.source.activation,
                       "split_index": self.source.split_index,
                       "select_best": self.source.select_best,
                       "train": train_block(self.source.train)},
            "shadow": {"num_shadows": self.num_shadows, "train": train_block(self.shadow_train)},
            "attack": {"dnn_hidden": list(self.attack.dnn_hidden),
                       "dnn_train": train_block(self.attack.dnn_train),
                       "svm_lambda": self.attack.svm_lambda,
                       "svm_epochs": self.attack.svm_epochs,
                       "svm_batch_size": self.attack.svm_batch_size},
            "sweep": list(self.sweep),
            "kinds": [k.value for k in self.kinds],
            "regimes": [r.value for r in self.regimes],
            "repeats": self.repeats,
            "baseline_full_size": self.baseline_full_size,
            "workers": self.workers,
        }
        if self.appendix is not None:
            ap = self.appendix
            out["appendix"] = {
                "victim_mode": ap.victim_mode.value,
                "attacker_mode": ap.attacker_mode.value,
                "target_data": synth_block(ap.target_data, with_dim=False),
                "target_train_sizes": list(ap.target_train_sizes),
                "target_head": list(ap.target_head),
                "target_train": train_block(ap.target_train),
                "shadow_size": ap.shadow_size,
                "repeats": ap.repeats,
            }
        return out

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring ``output_dir`` and ``workers``."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


class _Fields:
    """Reads nested mappings, collecting every error with its dotted path."""

    def __init__(self):
        self.errors: list[str] = []

    def fail(self, path: str, msg: str) -> None:
        self.errors.append(f"{path}: {msg}")

    def section(self, raw: dict, key: str, path: str, known: set[str]) -> dict | None:
        value = raw.get(key)
        if value is None:
            return None
        where = f"{path}{key}"
        if not isinstance(value, dict):
            self.fail(where, "expected a mapping")
            return None
        self.unknown(value, known, where + ".")
        return value

    def unknown(self, raw: dict, known: set[str], path: str) -> None:
        for k in sorted(set(raw) - known, key=str):
            self.fail(f"{path}{k}", "unknown key")

    def get(self, raw: dict | None, key: str, path: str, kind, default,
            check: Callable[[Any], str | None] | None = None):
        if raw is None or key not in raw or raw[key] is None:
            return default
        value = raw[key]
        where = f"{path}{key}"
        try:
            value = _coerce(value, kind)
        except (TypeError, ValueError) as exc:
            self.fail(where, str(exc))
            return default
        if check is not None:
            problem = check(value)
            if problem:
                self.fail(where, problem)
                return default
        return value


def _coerce(value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise TypeError(f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise TypeError(f"expected a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {value!r}")
        return value
    raise AssertionError(kind)


def _positive(v):
    return None if v > 0 else "must be positive"


def _nonneg(v):
    return None if v >= 0 else "must be nonnegative"


_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay"}


def _train_cfg(f: _Fields, raw: dict, key: str, path: str, default: TrainConfig) -> TrainConfig:
    sec = f.section(raw, key, path, _TRAIN_KEYS)
    where = f"{path}{key}."
    return TrainConfig(
        epochs=f.get(sec, "epochs", where, int, default.epochs, _nonneg),
        batch_size=f.get(sec, "batch_size", where, int, default.batch_size, _positive),
        learning_rate=f.get(sec, "learning_rate", where, float, default.learning_rate, _positive),
        momentum=f.get(sec, "momentum", where, float, default.momentum,
                       lambda v: None if 0 <= v < 1 else "must lie in [0, 1)"),
        weight_decay=f.get(sec, "weight_decay", where, float, default.weight_decay, _nonneg),
    )


def _int_list(f: _Fields, raw: dict | None, key: str, path: str, default, minimum: int = 1):
    values = f.get(raw, key, path, list, None)
    if values is None:
        return tuple(default)
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, int):
            f.fail(f"{path}{key}[{i}]", f"expected an integer, got {v!r}")
        elif v < minimum:
            f.fail(f"{path}{key}[{i}]", f"must be at least {minimum}")
        else:
            out.append(v)
    return tuple(out)


def _enum_list(f: _Fields, raw: dict, key: str, enum_type, default):
    values = f.get(raw, key, "", list, None)
    if values is None:
        return tuple(default)
    out = []
    allowed = [e.value for e in enum_type]
    for i, v in enumerate(values):
        try:
            member = enum_type(v)
        except ValueError:
            f.fail(f"{key}[{i}]", f"{v!r} is not one of {allowed}")
            continue
        if member in out:
            f.fail(f"{key}[{i}]", f"{v!r} is listed twice")
        out.append(member)
    if not out and not any(e.startswith(key) for e in f.errors):
        f.fail(key, "must not be empty")
    return tuple(out)


def _enum(f: _Fields, raw: dict | None, key: str, path: str, enum_type, default):
    value = f.get(raw, key, path, str, None)
    if value is None:
        return default
    try:
        return enum_type(value)
    except ValueError:
        f.fail(f"{path}{key}", f"{value!r} is not one of {[e.value for e in enum_type]}")
        return default


_SYNTH_KEYS = {"class_count", "dim", "points_per_class", "class_mean_scale", "noise_sigma"}


def _synth(f: _Fields, raw: dict, path: str, default: SynthConfig) -> SynthConfig:
    where = path + "."
    return SynthConfig(
        class_count=f.get(raw, "class_count", where, int, default.class_count, _positive),
        dim=f.get(raw, "dim", where, int, default.dim, _positive),
        points_per_class=f.get(raw, "points_per_class", where, int, default.points_per_class,
                               _positive),
        class_mean_scale=f.get(raw, "class_mean_scale", where, float, default.class_mean_scale,
                               _positive),
        noise_sigma=f.get(raw, "noise_sigma", where, float, default.noise_sigma, _positive),
    )


_TOP_KEYS = {"seed", "output_dir", "dataset", "splits", "source", "shadow", "attack", "sweep",
             "kinds", "regimes", "repeats", "baseline_full_size", "workers", "appendix"}


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Build a config from an already-loaded mapping; raise ConfigError on problems."""
    f = _Fields()
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected a mapping"])
    f.unknown(raw, _TOP_KEYS, "")
    d = ExperimentConfig()

    seed = f.get(raw, "seed", "", int, d.seed, _nonneg)
    output_dir = f.get(raw, "output_dir", "", str, d.output_dir)

    synth, data_path = d.synth, None
    dataset = f.section(raw, "dataset", "", {"synth", "path"})
    if dataset is not None:
        if "synth" in dataset and "path" in dataset:
            f.fail("dataset", "give either synth or path, not both")
        if "path" in dataset:
            data_path = f.get(dataset, "path", "dataset.", str, None)
            synth = None
            if data_path is not None:
                resolved = Path(data_path)
                if base_dir is not None and not resolved.is_absolute():
                    resolved = base_dir / resolved
                if not resolved.is_file():
                    f.fail("dataset.path", f"no such file {str(resolved)!r}")
                data_path = str(resolved)
        else:
            sec = f.section(dataset, "synth", "dataset.", _SYNTH_KEYS)
            synth = _synth(f, sec or {}, "dataset.synth", d.synth)

    sp = f.section(raw, "splits", "", {"source_train", "source_test", "shadow_train",
                                       "shadow_test", "stratified"})
    names = ("source_train", "source_test", "shadow_train", "shadow_test")
    sizes = tuple(f.get(sp, k, "splits.", int, dflt, _positive)
                  for k, dflt in zip(names, d.split_sizes))
    stratified = f.get(sp, "stratified", "splits.", bool, d.stratified)
    if synth is not None:
        total = synth.class_count * synth.points_per_class
        if sum(sizes) > total:
            f.fail("splits", f"sizes sum to {sum(sizes)} but the synthetic dataset has {total}")
        if stratified:
            for k, s in zip(names, sizes):
                if s % synth.class_count:
                    f.fail(f"splits.{k}",
                           f"{s} is not divisible by {synth.class_count} classes")

    src = f.section(raw, "source", "", {"hidden", "activation", "split_index", "select_best",
                                        "train"}) or {}
    hidden = _int_list(f, src, "hidden", "source.", d.source.hidden)
    n_layers = len(hidden) + 1
    source = SourceSpec(
        hidden=hidden,
        activation=f.get(src, "activation", "source.", str, d.source.activation,
                         lambda v: None if v in ACTIVATIONS else f"must be one of {ACTIVATIONS}"),
        split_index=f.get(src, "split_index", "source.", int, None,
                          lambda v: None if 0 < v < n_layers
                          else f"must lie strictly between 0 and {n_layers}"),
        select_best=f.get(src, "select_best", "source.", bool, d.source.select_best),
        train=_train_cfg(f, src, "train", "source.", d.source.train),
    )
    if not hidden:
        f.fail("source.hidden", "needs at least one hidden layer to split")

    sh = f.section(raw, "shadow", "", {"num_shadows", "train"}) or {}
    num_shadows = f.get(sh, "num_shadows", "shadow.", int, d.num_shadows, _positive)
    shadow_train = _train_cfg(f, sh, "train", "shadow.", d.shadow_train)

    at = f.section(raw, "attack", "", {"dnn_hidden", "dnn_train", "svm_lambda", "svm_epochs",
                                       "svm_batch_size"}) or {}
    attack = AttackSettings(
        dnn_hidden=_int_list(f, at, "dnn_hidden", "attack.", d.attack.dnn_hidden),
        dnn_train=_train_cfg(f, at, "dnn_train", "attack.", d.attack.dnn_train),
        svm_lambda=f.get(at, "svm_lambda", "attack.", float, d.attack.svm_lambda, _positive),
        svm_epochs=f.get(at, "svm_epochs", "attack.", int, d.attack.svm_epochs, _positive),
        svm_batch_size=f.get(at, "svm_batch_size", "attack.", int, d.attack.svm_batch_size,
                             _positive),
    )

    pool = min(sizes[2], sizes[3])
    sweep = _int_list(f, raw, "sweep", "", d.sweep)
    for i, n in enumerate(sweep):
        if n > pool:
            f.fail(f"sweep[{i}]", f"shadow size {n} exceeds the shadow pool size {pool}")
    if "sweep" in raw and not sweep and not any(e.startswith("sweep") for e in f.errors):
        f.fail("sweep", "must not be empty")
    full = f.get(raw, "baseline_full_size", "", int, None,
                 lambda v: None if 0 < v <= pool
                 else f"must lie in [1, {pool}] (the shadow pool size)")

    appendix = None
    ap = f.section(raw, "appendix", "", {"victim_mode", "attacker_mode", "target_data",
                                         "target_train_sizes", "target_head", "target_train",
                                         "shadow_size", "repeats"})
    if ap is not None:
        da = AppendixSpec()
        victim = _enum(f, ap, "victim_mode", "appendix.", TransferMode, da.victim_mode)
        attacker = _enum(f, ap, "attacker_mode", "appendix.", TransferMode, victim)
        if attacker is not victim:
            f.fail("appendix.attacker_mode",
                   f"{attacker.value} differs from the victim's {victim.value}; "
                   "the attacker must know the victim's transfer mode")
        tsec = f.section(ap, "target_data", "appendix.", _SYNTH_KEYS - {"dim"}) or {}
        dim = synth.dim if synth is not None else 1
        target_data = dataclasses.replace(_synth(f, tsec, "appendix.target_data", da.target_data),
                                          dim=dim)
        sizes_t = _int_list(f, ap, "target_train_sizes", "appendix.", da.target_train_sizes)
        tpool = target_data.class_count * target_data.points_per_class
        for i, n in enumerate(sizes_t):
            if n > tpool:
                f.fail(f"appendix.target_train_sizes[{i}]",
                       f"{n} exceeds the {tpool} target records")
            elif n % target_data.class_count:
                f.fail(f"appendix.target_train_sizes[{i}]",
                       f"{n} is not divisible by {target_data.class_count} target classes")
        appendix = AppendixSpec(
            victim_mode=victim,
            attacker_mode=attacker,
            target_data=target_data,
            target_train_sizes=sizes_t,
            target_head=_int_list(f, ap, "target_head", "appendix.", da.target_head),
            target_train=_train_cfg(f, ap, "target_train", "appendix.", da.target_train),
            shadow_size=f.get(ap, "shadow_size", "appendix.", int, da.shadow_size,
                              lambda v: None if 0 < v <= pool
                              else f"must lie in [1, {pool}] (the shadow pool size)"),
            repeats=f.get(ap, "repeats", "appendix.", int, da.repeats,
                          lambda v: None if v >= 1 else "must be at least 1"),
        )

    cfg = dict(
        seed=seed, output_dir=output_dir, synth=synth, data_path=data_path,
        split_sizes=sizes, stratified=stratified, source=source, num_shadows=num_shadows,
        shadow_train=shadow_train, attack=attack, sweep=sweep,
        kinds=_enum_list(f, raw, "kinds", AttackKind, d.kinds),
        regimes=_enum_list(f, raw, "regimes", Regime, d.regimes),
        repeats=f.get(raw, "repeats", "", int, d.repeats,
                      lambda v: None if v >= 1 else "must be at least 1"),
        baseline_full_size=full,
        workers=f.get(raw, "workers", "", int, d.workers, _positive),
        appendix=appendix,
    )
    if f.errors:
        raise ConfigError(f.errors)
    return ExperimentConfig(**cfg)


def validate_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse YAML text into a config; every violation is reported at once."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<yaml>: {exc}"]) from None
    return parse_config({} if raw is None else raw, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return validate_config(path.read_text(), path.parent)


# -- shared setup ---------------------------------------------------------------

@dataclass(frozen=True)
class SourceSetup:
    """The victim and the four data splits, fixed for one master seed."""

    source: LayeredNet
    shallow: LayeredNet
    source_train: LabeledDataset
    source_test: LabeledDataset
    pool_train: LabeledDataset
    pool_test: LabeledDataset

    @property
    def dims(self) -> tuple[int, ...]:
        return self.source.dims


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.data_path is not None:
        return load_table(cfg.data_path)
    synth = dataclasses.replace(cfg.synth, seed=derive_seed(cfg.seed, "data"))
    return synth_generate(synth)


def build_source(cfg: ExperimentConfig) -> SourceSetup:
    data = load_dataset(cfg)
    parts = split_four_way(data, cfg.split_sizes, derive_seed(cfg.seed, "split"), cfg.stratified)
    s_train, s_test, pool_train, pool_test = parts
    spec = cfg.source
    dims = (data.dim, *spec.hidden, data.num_classes)
    seed = derive_seed(cfg.seed, "source")
    net = init_net(dims, spec.activation, spec.split_index, seed=derive_seed(seed, "init"))
    net = train(net, s_train, spec.train.with_seed(seed),
                select_on=s_test if spec.select_best else None)
    shallow, _ = split(net)
    return SourceSetup(net, shallow, s_train, s_test, pool_train, pool_test)


# -- main experiment ------------------------------------------------------------

Cell = tuple[Regime, AttackKind, int]


@dataclass
class ExperimentReport:
    """Aggregated grid plus per-repeat reports and failures."""

    cells: dict[Cell, MetricsReport | None]
    repeats: dict[Cell, list[MetricsReport]]
    failed: dict[Cell, list[str]]
    provenance: dict
    repeat_seeds: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failed)


def _unit_seed(master: int, size: int, repeat: int) -> int:
    return derive_seed(master, "unit", size, repeat)


def _run_unit(cfg: ExperimentConfig, setup: SourceSetup, regime: Regime, size: int,
              seed: int) -> dict[AttackKind, MetricsReport]:
    plan = ShadowPlan(cfg.num_shadows, size, regime, setup.dims, cfg.shadow_train,
                      setup.shallow if regime is not Regime.BASELINE else None,
                      setup.source.split_index, cfg.source.activation)
    victim = BlackBox.from_net(setup.source)
    ensemble = train_shadows_for(victim, setup.shallow, (setup.pool_train, setup.pool_test),
                                 plan, regime, seed)
    records = build_attack_training_set(ensemble)
    out = {}
    for kind in cfg.kinds:
        adv = build_adversary(records, kind, cfg.attack, derive_seed(seed, "attack"))
        out[kind] = evaluate(adv, victim, setup.source_train, setup.source_test)
    return out


def _guarded_unit(args):
    cfg, setup, regime, size, seed = args
    try:
        return _run_unit(cfg, setup, regime, size, seed), None
    except Exception as exc:  # a failed unit marks its cells and the run continues
        logger.exception("unit regime=%s size=%d failed", regime.value, size)
        return None, f"{type(exc).__name__}: {exc}"


def _grid(cfg: ExperimentConfig) -> list[tuple[Regime, int]]:
    units = [(r, n) for r in cfg.regimes for n in cfg.sweep]
    if cfg.baseline_full_size is not None and (Regime.BASELINE, cfg.baseline_full_size) not in units:
        units.append((Regime.BASELINE, cfg.baseline_full_size))
    return units


def _map(fn, tasks, workers: int):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _provenance(cfg: ExperimentConfig, setup: SourceSetup) -> dict:
    return {
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "master_seed": cfg.seed,
        "versions": {"transmia": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "source_accuracy": {"train": accuracy(setup.source, setup.source_train),
                            "test": accuracy(setup.source, setup.source_test)},
    }


def run_experiment(cfg: ExperimentConfig, setup: SourceSetup | None = None) -> ExperimentReport:
    """Run every (regime, kind, shadow size) cell ``cfg.repeats`` times."""
    setup = build_source(cfg) if setup is None else setup
    units = _grid(cfg)
    tasks, keys = [], []
    for regime, size in units:
        for k in range(cfg.repeats):
            seed = _unit_seed(cfg.seed, size, k)
            tasks.append((cfg, setup, regime, size, seed))
            keys.append((regime, size, k, seed))
    logger.info("running %d attack units", len(tasks))
    results = _map(_guarded_unit, tasks, cfg.workers)

    repeats: dict[Cell, list[MetricsReport]] = {}
    failed: dict[Cell, list[str]] = {}
    seeds = {}
    for (regime, size, k, seed), (reports, err) in zip(keys, results):
        seeds[(size, k)] = seed
        for kind in cfg.kinds:
            cell = (regime, kind, size)
            repeats.setdefault(cell, [])
            if err is not None:
                failed.setdefault(cell, []).append(f"repeat {k}: {err}")
            else:
                repeats[cell].append(reports[kind])
    cells = {c: aggregate(r) if r else None for c, r in repeats.items()}
    prov = _provenance(cfg, setup)
    prov["unit_seeds"] = {f"size_{n}/repeat_{k}": s for (n, k), s in sorted(seeds.items())}
    return ExperimentReport(cells, repeats, failed, prov, seeds)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def summary_rows(cells: dict) -> list[tuple]:
    rows = []
    for (a, b, n), report in cells.items():
        for m in METRICS:
            if report is None:
                rows.append((a.value, b.value, n, m, "", "", 0, ""))
                continue
            rows.append((a.value, b.value, n, m, _fmt(report.overall[m]),
                         _fmt(report.dispersion[m]), report.repeats,
                         report.undefined_count[m]))
    return rows


def summary_csv(report: ExperimentReport, header=SUMMARY_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(summary_rows(report.cells))
    return buf.getvalue()


def _write_cells(report: ExperimentReport, out: Path, prefix: Callable[[Cell], Path],
                 seed_of: Callable[[Cell, int], int]) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    for cell, reps in report.repeats.items():
        cell_dir = out / prefix(cell)
        for k, rep in enumerate(reps):
            d = cell_dir / f"repeat_{k}"
            d.mkdir(parents=True, exist_ok=True)
            (d / "report.csv").write_text(rep.to_csv())
            doc = rep.to_json_dict()
            doc["provenance"] = {"config_sha256": report.provenance["config_sha256"],
                                 "master_seed": report.provenance["master_seed"],
                                 "repeat_seed": seed_of(cell, k),
                                 "versions": report.provenance["versions"],
                                 "timestamp": stamp}
            (d / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        if cell in report.failed:
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "FAILED").write_text("\n".join(report.failed[cell]) + "\n")


def write_report(report: ExperimentReport, out_dir, header=SUMMARY_HEADER,
                 prefix: Callable[[Cell], Path] | None = None) -> Path:
    """Write per-repeat reports, ``summary.csv`` and a combined ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if prefix is None:
        prefix = lambda c: Path(c[0].value, c[1].value, f"size_{c[2]}")  # noqa: E731

    def seed_of(cell, k):
        return report.repeat_seeds.get((cell[2], k))

    _write_cells(report, out, prefix, seed_of)
    (out / "summary.csv").write_text(summary_csv(report, header))
    combined = {
        "provenance": {**report.provenance,
                       "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
        "partial": report.partial,
        "failed": {prefix(c).as_posix(): v for c, v in report.failed.items()},
        "cells": {prefix(c).as_posix(): (r.to_json_dict() if r else None)
                  for c, r in report.cells.items()},
    }
    (out / "report.json").write_text(json.dumps(combined, indent=2, sort_keys=True))
    return out / "summary.csv"


# -- appendix: attacking through a transferred target model -----------------------

@dataclass(frozen=True)
class TargetVictim:
    target: LayeredNet
    target_train: LabeledDataset


def build_target_victim(cfg: ExperimentConfig, setup: SourceSetup, size: int) -> TargetVictim:
    """Transfer the source's shallow stack and train the victim target model."""
    ap = cfg.appendix
    tdata = synth_generate(dataclasses.replace(ap.target_data, dim=setup.source.in_dim,
                                               seed=derive_seed(cfg.seed, "target-data")),
                           id_offset=10 ** 9)
    d_train = stratified_sample(tdata, size, derive_seed(cfg.seed, "target-split", size))
    head = (setup.shallow.out_dim, *ap.target_head, ap.target_data.class_count)
    plan = TransferPlan(setup.shallow, head, ap.victim_mode,
                        ap.target_train.with_seed(derive_seed(cfg.seed, "victim", size)),
                        cfg.source.activation)
    return TargetVictim(transfer_train(plan, d_train), d_train)


def _appendix_unit(args):
    cfg, setup, size, seed = args
    ap = cfg.appendix
    try:
        victim = build_target_victim(cfg, setup, size)
        dims = setup.dims
        plan = ShadowPlan(cfg.num_shadows, ap.shadow_size, Regime.BASELINE, dims,
                          cfg.shadow_train, split_index=len(dims) - 2,
                          activation=cfg.source.activation)
        head = (setup.shallow.out_dim, *ap.target_head, ap.target_data.class_count)
        bb = BlackBox.from_net(victim.target)
        run = run_blackbox_target_attack(bb, victim.target_train,
                                         (setup.pool_train, setup.pool_test), plan,
                                         ap.attacker_mode, head, ap.target_train, seed,
                                         cfg.attack)
        return evaluate(run.adversary, bb, setup.source_train, setup.source_test), None
    except Exception as exc:  # a failed unit marks its cell and the run continues
        logger.exception("appendix unit size=%d failed", size)
        return None, f"{type(exc).__name__}: {exc}"


def run_appendix_experiment(cfg: ExperimentConfig,
                            setup: SourceSetup | None = None) -> ExperimentReport:
    """Attack source membership through target models, one cell per target-train size."""
    if cfg.appendix is None:
        raise ConfigError(["appendix: section required for the appendix experiment"])
    ap = cfg.appendix
    setup = build_source(cfg) if setup is None else setup
    tasks, keys = [], []
    for size in ap.target_train_sizes:
        for k in range(ap.repeats):
            seed = derive_seed(cfg.seed, "appendix", size, k)
            tasks.append((cfg, setup, size, seed))
            keys.append((size, k, seed))
    results = _map(_appendix_unit, tasks, cfg.workers)
    repeats, failed, seeds = {}, {}, {}
    regime = Regime(ap.victim_mode.value)
    for (size, k, seed), (rep, err) in zip(keys, results):
        cell = (regime, AttackKind.DNN, size)
        seeds[(size, k)] = seed
        repeats.setdefault(cell, [])
        if err is None:
            repeats[cell].append(rep)
        else:
            failed.setdefault(cell, []).append(f"repeat {k}: {err}")
    cells = {c: aggregate(r) if r else None for c, r in repeats.items()}
    prov = _provenance(cfg, setup)
    prov["unit_seeds"] = {f"size_{n}/repeat_{k}": s for (n, k), s in sorted(seeds.items())}
    return ExperimentReport(cells, repeats, failed, prov, seeds)


def write_appendix_report(report: ExperimentReport, out_dir) -> Path:
    return write_report(report, out_dir, APPENDIX_HEADER,
                        lambda c: Path("appendix", c[0].value, f"size_{c[2]}"))
