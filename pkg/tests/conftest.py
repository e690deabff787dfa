import dataclasses

import numpy as np
import pytest

from feddpms.config import ExperimentConfig
from feddpms.data import PartitionSpec, dirichlet_partition, make_synthetic_source, train_test_split


def tiny_config(**changes) -> ExperimentConfig:
    """A config small enough for sub-second protocol runs."""
    base = ExperimentConfig(
        synthetic_classes=4, synthetic_per_class=60, synthetic_dim=5, synthetic_spread=0.05,
        test_per_class=20, clients=4, clients_per_round=4, rounds=6, pretrain_rounds=3,
        local_epochs=1, batch_size=8, latent_dim=4, enc_hidden=[16], clf_hidden=[8],
        n=1, alpha=3, noise_std=0.0, lr=0.01, output_dir="unused",
    )
    return dataclasses.replace(base, **changes).validate()


def tiny_data(cfg: ExperimentConfig):
    src = make_synthetic_source(cfg.synthetic_classes, cfg.synthetic_per_class + cfg.test_per_class,
                                cfg.synthetic_spread, cfg.seed, dim=cfg.synthetic_dim)
    train, test = train_test_split(src, cfg.test_per_class, cfg.seed)
    return dirichlet_partition(train, PartitionSpec(cfg.clients, cfg.beta, cfg.seed)), test


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"{status} criterion {number}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
