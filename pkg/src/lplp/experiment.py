"""Methods x seeds experiment grid on synthetic bags.

Config file (INI)::

    [experiment]
    methods = ours, two_stage, ppl, ce, pl
    seeds = 0, 1, 2, 3, 4
    out_dir = runs

    [dataset]
    C = 2
    dim = 8
    class_separation = 6
    n_train_pos = 400
    ...

    [train]            ; defaults for every method
    learning_rate = 0.0003

    [ours]             ; overrides for one method
    aggregation = select_on_validation

A run writes into ``<out_dir>/<config hash>-<UTC timestamp>/``: one dataset
file per seed, one directory per (method, seed) cell holding checkpoint,
metrics and report, and ``summary.tsv``.  The summary holds only values
derived from the config, so reruns produce identical bytes.
"""
from __future__ import annotations

import configparser
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .bagdata import ConfigurationError, atomic_write_text, save_dataset, synth_gaussian_dataset
from .evaluation import EvalReport, evaluate
from .trainer import METHODS, TrainConfig, train

log = logging.getLogger(__name__)

METRICS = ("accuracy", "miou", "binary_accuracy")

DATASET_DEFAULTS = dict(C=2, dim=8, class_separation=6.0, n_train_pos=400, n_train_neg=400,
                        n_val_pos=100, n_val_neg=100, n_test_pos=100, n_test_neg=10, bag_size=32)

DEFAULT_CONFIG = """\
[experiment]
methods = ours, two_stage, ppl, ce, pl
seeds = 0, 1, 2, 3, 4
out_dir = runs

[dataset]
C = 2
dim = 8
class_separation = 6
n_train_pos = 400
n_train_neg = 400
n_val_pos = 100
n_val_neg = 100
n_test_pos = 100
n_test_neg = 10
bag_size = 32

[train]
learning_rate = 0.0003
batch_bags = 16
w_mil = 0.01
patience = 30
max_epochs = 1000
aggregation = select_on_validation
lse_r = 4
inference_threshold = 0.5
"""


@dataclass
class ExperimentConfig:
    methods: list
    seeds: list
    dataset: dict
    train: dict = field(default_factory=dict)
    per_method: dict = field(default_factory=dict)
    out_dir: str = "runs"
    text: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:12]

    def train_config(self, method: str, seed: int) -> TrainConfig:
        opts = {**self.train, **self.per_method.get(method, {})}
        return TrainConfig(method=method, seed=seed, **opts)


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert_train(section) -> dict:
    out = {}
    for key, raw in section.items():
        if key in ("method", "seed"):
            raise ConfigurationError(f"{key!r} is set by the experiment grid, not per section")
        if key not in _TRAIN_TYPES:
            raise ConfigurationError(f"unknown training option {key!r}")
        if key in ("learning_rate", "w_mil", "lse_r", "inference_threshold"):
            out[key] = float(raw)
        elif key in ("batch_bags", "patience", "max_epochs"):
            out[key] = int(raw)
        elif key == "hidden":
            out[key] = tuple(int(v) for v in raw.split(","))
        elif key == "two_stage_reuse_extractor":
            out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            out[key] = raw.strip()
    return out


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    methods = [m.strip() for m in exp.get("methods", ",".join(METHODS)).split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(f"unknown method {m!r}")
    try:
        seeds = [int(s) for s in exp.get("seeds", "0,1,2,3,4").split(",") if s.strip()]
        dataset = dict(DATASET_DEFAULTS)
        if cp.has_section("dataset"):
            for key, raw in cp["dataset"].items():
                if key not in dataset:
                    raise ConfigurationError(f"unknown dataset option {key!r}")
                dataset[key] = float(raw) if key == "class_separation" else int(raw)
        train_opts = _convert_train(cp["train"]) if cp.has_section("train") else {}
        per_method = {m: _convert_train(cp[m]) for m in METHODS if cp.has_section(m)}
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad config value: {exc}") from None
    if not seeds or not methods:
        raise ConfigurationError("need at least one method and one seed")
    return ExperimentConfig(methods, seeds, dataset, train_opts, per_method,
                            exp.get("out_dir", "runs"), text)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def make_dataset(dataset: dict, seed: int):
    d = dataset
    return synth_gaussian_dataset(d["C"], d["dim"], d["class_separation"], d["n_train_pos"],
                                  d["n_train_neg"], d["n_val_pos"], d["n_val_neg"],
                                  d["n_test_pos"], d["n_test_neg"], d["bag_size"], seed)


@dataclass
class ExperimentSummary:
    methods: list
    seeds: list
    reports: dict                      # method -> {seed: EvalReport}
    failures: dict = field(default_factory=dict)   # (method, seed) -> message
    run_dir: Optional[str] = None

    def values(self, method: str, metric: str) -> list:
        per_seed = self.reports.get(method, {})
        return [per_seed[s].metrics()[metric] for s in self.seeds if s in per_seed]

    def mean(self, method: str, metric: str) -> float:
        vals = self.values(method, metric)
        return float(np.mean(vals)) if vals else math.nan

    def std(self, method: str, metric: str) -> Optional[float]:
        vals = self.values(method, metric)
        return float(np.std(vals, ddof=1)) if len(vals) >= 2 else None

    def to_text(self) -> str:
        lines = ["method\tmetric\tn\tmean\tstd\tper_seed"]
        for m in self.methods:
            for metric in METRICS:
                vals = self.values(m, metric)
                if not vals:
                    continue
                std = self.std(m, metric)
                per_seed = ",".join(f"{s}:{self.reports[m][s].metrics()[metric]!r}"
                                    for s in self.seeds if s in self.reports[m])
                lines.append(f"{m}\t{metric}\t{len(vals)}\t{self.mean(m, metric)!r}\t"
                             f"{'-' if std is None else repr(std)}\t{per_seed}")
        for (m, s), msg in sorted(self.failures.items()):
            lines.append(f"{m}\tfailed\tseed={s}\t{msg}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Percentages with two decimals, mean +- std."""
        rows = [f"{'method':<10} {'Acc [%]':>16} {'mIoU [%]':>16} {'binary Acc [%]':>16}"]
        for m in self.methods:
            cells = []
            for metric in METRICS:
                vals = self.values(m, metric)
                if not vals:
                    cells.append(f"{'failed':>16}")
                    continue
                std = self.std(m, metric)
                cell = f"{100 * self.mean(m, metric):.2f}"
                if std is not None:
                    cell += f"+-{100 * std:.2f}"
                cells.append(f"{cell:>16}")
            rows.append(f"{m:<10} " + " ".join(cells))
        return "\n".join(rows)


def run_experiment(config: ExperimentConfig, out_root=None, write: bool = True) -> ExperimentSummary:
    """Train and evaluate every (method, seed) cell; failures are recorded per cell."""
    run_dir = None
    if write:
        root = out_root if out_root is not None else config.out_dir
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        run_dir = os.path.join(root, f"{config.digest}-{stamp}")
        suffix = 1
        while os.path.exists(run_dir):
            run_dir = os.path.join(root, f"{config.digest}-{stamp}-{suffix}")
            suffix += 1
        os.makedirs(run_dir)
        atomic_write_text(os.path.join(run_dir, "config.ini"), config.text)

    reports = {m: {} for m in config.methods}
    failures = {}
    for seed in config.seeds:
        data = make_dataset(config.dataset, seed)
        if run_dir:
            save_dataset(data, os.path.join(run_dir, f"data_seed{seed}.lplp"))
        for method in config.methods:
            cell = os.path.join(run_dir, f"{method}_seed{seed}") if run_dir else None
            try:
                tc = config.train_config(method, seed)
                t0 = time.time()
                state = train(tc, data, cell)
                report = evaluate(state.model, data.test, tc.inference_threshold, method, seed)
            except Exception as exc:  # one failed cell must not sink the grid
                log.exception("cell %s seed %d failed", method, seed)
                failures[(method, seed)] = f"{type(exc).__name__}: {exc}"
                continue
            log.info("%s seed %d: acc=%.4f miou=%.4f (%.1fs, %d epochs)", method, seed,
                     report.accuracy, report.miou, time.time() - t0, state.epoch)
            reports[method][seed] = report
            if cell:
                atomic_write_text(os.path.join(cell, "report.txt"), report.to_text())
    summary = ExperimentSummary(config.methods, config.seeds, reports, failures, run_dir)
    if run_dir:
        atomic_write_text(os.path.join(run_dir, "summary.tsv"), summary.to_text())
    return summary
