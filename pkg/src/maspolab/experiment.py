"""Run experiments, sweeps and gate-shape tables, writing files atomically."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import SWEEP_PARAMS, ExperimentConfig, save_config
from .gating import ConfigError, GateMethod, GateParams, surrogate_terms
from .io import atomic_write_text
from .metrics import COLUMNS, MetricsRecord
from .oracle import mean_exact_expected_reward
from .policy import save_policy
from .trainer import DivergenceError, TrainerState, run_training

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
POLICY_FILE = "policy.bin"
SUMMARY_FILE = "summary.json"
DIVERGENCE_FILE = "divergence.json"


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow(rec.as_row())
    return buf.getvalue()


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRecord.from_row(row) for row in reader]


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> int:
    """Train for ``cfg.train.total_steps`` steps; returns a process exit status.

    Writes ``metrics.csv``, ``policy.bin``, ``summary.json`` and the resolved
    ``config.yaml`` into the output directory.  On divergence the metrics so
    far are kept, ``divergence.json`` is written and 3 is returned.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    state = TrainerState.initial(cfg.task, cfg.train)
    records: list[MetricsRecord] = []
    try:
        for state, rec in run_training(cfg.task, cfg.train, oracle_every=cfg.oracle_every, state=state):
            records.append(rec)
            log.debug("step %d reward %.4f entropy %.4f", rec.step, rec.mean_reward, rec.mean_entropy)
    except DivergenceError as exc:
        atomic_write_text(out / METRICS_FILE, metrics_csv(records))
        atomic_write_text(out / DIVERGENCE_FILE, json.dumps({"step": exc.step, "reason": str(exc)}, indent=2) + "\n")
        log.error("diverged: %s", exc)
        return 3

    atomic_write_text(out / METRICS_FILE, metrics_csv(records))
    save_policy(state.policy, out / POLICY_FILE)
    summary = {"steps": len(records), "method": cfg.train.method.value, "seed": cfg.train.seed}
    if cfg.task.enumerable:
        summary["final_exact_expected_reward"] = mean_exact_expected_reward(state.policy, cfg.task)
    atomic_write_text(out / SUMMARY_FILE, json.dumps(summary, indent=2) + "\n")
    return 0


def _sweep_entry(args) -> int:
    cfg, out = args
    return run_experiment(cfg, out)


def run_sweep(
    base: ExperimentConfig, param: str, values: Sequence[float], output_dir: str | Path, *, jobs: int = 1
) -> list[dict]:
    """One run per value (seed ``base_seed + index``) plus an ``index.csv``."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"--param {param!r} is not sweepable; expected one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(output_dir)
    configs = [base.with_param(param, float(v), seed=base.train.seed + i) for i, v in enumerate(values)]
    dirs = [out / f"{i:02d}_{param}={float(v):g}" for i, v in enumerate(values)]
    work = list(zip(configs, dirs))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            statuses = list(pool.map(_sweep_entry, work))
    else:
        statuses = [_sweep_entry(w) for w in work]

    index = []
    for i, (v, cfg, d, status) in enumerate(zip(values, configs, dirs, statuses)):
        index.append({"index": i, "param": param, "value": float(v), "seed": cfg.train.seed,
                      "status": status, "metrics": str(d / METRICS_FILE)})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(index[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(index)
    atomic_write_text(out / "index.csv", buf.getvalue())
    return index


def gate_table(
    methods: Sequence[GateMethod | str],
    pi_old: float,
    advantage: float,
    rho_min: float,
    rho_max: float,
    points: int,
    params: GateParams,
) -> tuple[list[str], np.ndarray]:
    """Gate weight and gradient coefficient per method on a ratio grid."""
    methods = [GateMethod.parse(m) for m in methods]
    if not methods:
        raise ConfigError("at least one method is required")
    if points < 2 or not 0 < rho_min < rho_max:
        raise ConfigError("ratio grid needs points >= 2 and 0 < rho_min < rho_max")
    rho = np.linspace(rho_min, rho_max, points)
    header = ["rho"]
    cols = [rho]
    for m in methods:
        terms = surrogate_terms(m, rho, advantage, pi_old, params)
        header += [f"{m.value}_gate", f"{m.value}_coef"]
        cols += [terms.weight, terms.coefficient]
    return header, np.column_stack(cols)


def emit_gate_table(path: str | Path, *args, **kwargs) -> None:
    header, table = gate_table(*args, **kwargs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in table:
        writer.writerow([repr(float(x)) for x in row])
    atomic_write_text(Path(path), buf.getvalue())
