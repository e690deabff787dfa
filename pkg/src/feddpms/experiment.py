"""Experiment driver: data preparation, seeded runs, CSV/JSON output, sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol
from .config import ExperimentConfig
from .costs import CostInputs, reconcile
from .data import (Dataset, PartitionSpec, dirichlet_partition, load_idx, make_synthetic_source,
                   negotiate_n, partition_hash, train_test_split)

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "FEDDPMS_OUTPUT_DIR"

CSV_HEADER = ("round", "scheme", "test_accuracy", "client_train_loss",
              "n_assisting", "n_benefited", "uploaded_scalars", "downloaded_scalars")


@dataclass
class RunMetrics:
    config: dict
    partition_hash: str
    rows: list[protocol.RoundRecord]
    final_accuracy: float | None
    best_accuracy: float | None
    dpms_rounds: dict[int, int] = field(default_factory=dict)
    benefit_rounds: dict[int, int] = field(default_factory=dict)
    cost_report: dict | None = None
    warnings: list[str] = field(default_factory=list)
    csv_path: str | None = None
    result: protocol.RunResult | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "scheme": self.config["scheme"],
            "seed": self.config["seed"],
            "beta": self.config["beta"],
            "partition_hash": self.partition_hash,
            "final_accuracy": self.final_accuracy,
            "best_accuracy": self.best_accuracy,
            "dpms_rounds": {str(k): v for k, v in self.dpms_rounds.items()},
            "benefit_rounds": {str(k): v for k, v in self.benefit_rounds.items()},
            "cost_report": self.cost_report,
            "warnings": self.warnings,
            "config": self.config,
        }


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        src = make_synthetic_source(cfg.synthetic_classes, cfg.synthetic_per_class + cfg.test_per_class,
                                    cfg.synthetic_spread, cfg.seed, dim=cfg.synthetic_dim,
                                    modes=cfg.synthetic_modes, mode_radius=cfg.synthetic_mode_radius)
        return train_test_split(src, cfg.test_per_class, cfg.seed)
    train = load_idx(cfg.train_images, cfg.train_labels)
    test = load_idx(cfg.test_images, cfg.test_labels)
    if cfg.idx_fraction < 1:
        train = _fraction(train, cfg.idx_fraction, cfg.seed)
        test = _fraction(test, cfg.idx_fraction, cfg.seed + 1)
    return train, test


def _fraction(d: Dataset, frac: float, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 13])
    keep = np.sort(rng.permutation(len(d))[: max(1, int(round(frac * len(d))))])
    return d.subset(keep)


def prepare(cfg: ExperimentConfig) -> tuple[list[Dataset], Dataset]:
    """Client datasets and the test set; the split depends on (seed, beta) only."""
    train, test = load_data(cfg)
    parts = dirichlet_partition(train, PartitionSpec(cfg.clients, cfg.beta, cfg.seed))
    return parts, test


def run_experiment(cfg: ExperimentConfig, parts: list[Dataset] | None = None,
                   test: Dataset | None = None, write: bool = True) -> RunMetrics:
    cfg.validate()
    if parts is None:
        parts, test = prepare(cfg)
    if cfg.negotiate_n:
        cfg = dataclasses.replace(cfg, n=negotiate_n(parts))
        log.info("negotiated n=%d", cfg.n)
    result = protocol.run(cfg, parts, test)
    accs = [r.test_accuracy for r in result.rows if r.test_accuracy is not None]
    metrics = RunMetrics(
        config=cfg.to_dict(),
        partition_hash=partition_hash(parts),
        rows=result.rows,
        final_accuracy=result.final_accuracy,
        best_accuracy=max(accs) if accs else None,
        warnings=list(result.warnings),
        result=result,
    )
    if cfg.scheme == "feddpms":
        metrics.dpms_rounds = dict(result.server.shared_round)
        metrics.benefit_rounds = dict(result.server.benefit_round)
        inputs = cost_inputs(cfg, result, parts)
        metrics.cost_report = reconcile(result.traffic, inputs).to_dict()
    if write:
        write_outputs(metrics, output_dir(cfg))
    return metrics


def cost_inputs(cfg: ExperimentConfig, result: protocol.RunResult, parts: list[Dataset]) -> CostInputs:
    return CostInputs(theta=result.server.theta, latent_dim=cfg.latent_dim, n=cfg.n, alpha=cfg.alpha,
                      k=cfg.clients_per_round, K=len(parts), T=cfg.rounds, T_p=cfg.pretrain_rounds,
                      G=parts[0].dim)


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def run_name(cfg_dict: dict) -> str:
    return f"{cfg_dict['scheme']}_beta{cfg_dict['beta']:g}_seed{cfg_dict['seed']}"


def rows_to_csv(rows: list[protocol.RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        losses = ";".join(f"{i}:{loss!r}" for i, loss in sorted(r.client_losses.items()))
        acc = "" if r.test_accuracy is None else repr(r.test_accuracy)
        w.writerow((r.round, r.scheme, acc, losses, r.n_assisting, r.n_benefited, r.uploaded, r.downloaded))
    return buf.getvalue()


def write_outputs(metrics: RunMetrics, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    name = run_name(metrics.config)
    csv_path = out / f"{name}.csv"
    csv_path.write_text(rows_to_csv(metrics.rows))
    (out / f"{name}.json").write_text(json.dumps(metrics.summary(), indent=2, sort_keys=True))
    metrics.csv_path = str(csv_path)
    return csv_path


def run_trials(cfg: ExperimentConfig, write: bool = True) -> tuple[list[RunMetrics], float]:
    """Run ``cfg.trials`` seeds starting at ``cfg.seed``; returns runs and mean final accuracy."""
    runs = []
    for s in range(cfg.trials):
        runs.append(run_experiment(dataclasses.replace(cfg, seed=cfg.seed + s, trials=1), write=write))
    accs = [m.final_accuracy for m in runs if m.final_accuracy is not None]
    return runs, float(np.mean(accs)) if accs else float("nan")


def compare_schemes(cfg: ExperimentConfig, schemes=("feddpms", "fedavg", "fedprox"),
                    seeds=(0,), write: bool = False) -> dict[str, list[float]]:
    """Final accuracy per scheme and seed; schemes share each seed's partition."""
    out: dict[str, list[float]] = {s: [] for s in schemes}
    for seed in seeds:
        base = dataclasses.replace(cfg, seed=seed)
        parts, test = prepare(base)
        for s in schemes:
            m = run_experiment(dataclasses.replace(base, scheme=s), parts, test, write=write)
            out[s].append(m.final_accuracy)
    return out


def sweep_beta(cfg: ExperimentConfig, betas, schemes=("feddpms", "fedavg"), seeds=(0,),
               write: bool = True) -> dict:
    """Mean final accuracy per (beta, scheme)."""
    table = {}
    for beta in betas:
        res = compare_schemes(dataclasses.replace(cfg, beta=beta), schemes, seeds, write=write)
        table[float(beta)] = {s: float(np.mean(v)) for s, v in res.items()}
    if write:
        out = output_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep_beta.json").write_text(json.dumps(
            {f"{b:g}": row for b, row in table.items()}, indent=2, sort_keys=True))
    return table
