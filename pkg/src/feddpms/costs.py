"""Closed-form overhead ratios against FedAvg, and reconciliation with counted traffic.

All communication is in parameter-count units; FedAvg's baseline traffic over a
run is ``2 * k * theta * T`` (download plus upload per selected client and round).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class CostInputs:
    theta: int
    latent_dim: int
    n: int
    alpha: int
    k: int
    K: int
    T: int
    T_p: int
    G: int = 1

    def __post_init__(self):
        if self.k < 1 or self.K < 1 or self.k > self.K:
            raise ValueError("need 1 <= k <= K")
        if not 0 <= self.T_p <= self.T or self.T < 1:
            raise ValueError("need 0 <= T_p <= T and T >= 1")
        if self.theta <= 0:
            raise ValueError("theta must be positive")

    @property
    def nu(self) -> float:
        return self.k / self.K


def comm_r1(alpha: int, n: int, latent_dim: int, theta: int) -> float:
    if theta <= 0:
        raise ValueError("theta must be positive")
    return alpha * n * latent_dim / theta


def _selected_fraction(nu: float, rounds: int) -> float:
    # 1 - (1 - nu)^rounds without cancellation for small nu
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    if nu == 1.0:
        return 1.0 if rounds > 0 else 0.0
    return -math.expm1(rounds * math.log1p(-nu))


def expected_downloads_E(nu: float, k: int, T: int, T_p: int) -> float:
    """Expected number of distinct clients that fetch the global decoder."""
    return _selected_fraction(nu, T - T_p) * k / nu


def comm_r2(nu: float, T: int, T_p: int) -> float:
    return _selected_fraction(nu, T - T_p) / (2.0 * nu * T)


def cost_table(inputs: CostInputs) -> dict[str, dict[str, float | str]]:
    r1 = comm_r1(inputs.alpha, inputs.n, inputs.latent_dim, inputs.theta)
    r2 = comm_r2(inputs.nu, inputs.T, inputs.T_p)
    extra = 1.0 + inputs.T_p / inputs.T
    return {
        "fedavg": {"communication": 1.0, "computation": 1.0, "memory": 1.0},
        "fedprox": {"communication": 1.0, "computation": "1 + t_prox/t_avg", "memory": 2.0},
        "fedmix": {"communication": 1.0 + inputs.G / inputs.theta, "computation": 1.0, "memory": 1.0},
        "moon": {"communication": 1.0, "computation": "1 + t_moon/t_avg", "memory": 3.0},
        "feddpms": {"communication": 1.0 + r1 + r2, "computation": extra, "memory": extra},
    }


TRAFFIC_CATEGORIES = (
    "model_up", "model_down", "decoder_up", "decoder_down",
    "latent_up", "latent_down", "meta_up", "meta_down",
)


@dataclass
class Traffic:
    """Scalar counters per category plus event counts."""

    units: dict[str, int] = field(default_factory=lambda: dict.fromkeys(TRAFFIC_CATEGORIES, 0))
    decoder_downloads: int = 0

    def add(self, category: str, amount: int) -> None:
        if category not in self.units:
            raise KeyError(f"unknown traffic category {category!r}")
        self.units[category] += int(amount)

    @property
    def uploaded(self) -> int:
        return sum(v for k, v in self.units.items() if k.endswith("_up"))

    @property
    def downloaded(self) -> int:
        return sum(v for k, v in self.units.items() if k.endswith("_down"))

    @property
    def total(self) -> int:
        return sum(self.units.values())


@dataclass
class CostReport:
    r1: float
    E: float
    r2: float
    UB: float
    computation: float
    memory: float
    measured: dict[str, int]
    measured_total: int
    measured_r1: float
    measured_E: int
    measured_r2: float
    baseline_units: int
    measured_baseline_units: int
    rel_err_r1: float
    rel_err_E: float

    def to_dict(self) -> dict:
        return asdict(self)


def _rel(measured: float, analytic: float) -> float:
    if analytic == 0:
        return 0.0 if measured == 0 else math.inf
    return abs(measured - analytic) / abs(analytic)


def reconcile(traffic: Traffic | None, inputs: CostInputs) -> CostReport:
    """Compare counted traffic with the closed forms.

    Measured r1 divides latent traffic by ``2 * theta * K``, i.e. one model
    upload and download per client; it equals r1 when every client shares and
    receives exactly once.  Measured r2 counts decoder downloads as
    ``theta``-sized transfers, matching the closed form.
    """
    if traffic is None:
        raise ValueError("missing traffic counters")
    r1 = comm_r1(inputs.alpha, inputs.n, inputs.latent_dim, inputs.theta)
    E = expected_downloads_E(inputs.nu, inputs.k, inputs.T, inputs.T_p)
    r2 = comm_r2(inputs.nu, inputs.T, inputs.T_p)
    baseline = 2 * inputs.k * inputs.theta * inputs.T
    latent = traffic.units["latent_up"] + traffic.units["latent_down"]
    m_r1 = latent / (2 * inputs.theta * inputs.K)
    m_E = traffic.decoder_downloads
    extra = 1.0 + inputs.T_p / inputs.T
    return CostReport(
        r1=r1, E=E, r2=r2, UB=r1 + r2, computation=extra, memory=extra,
        measured=dict(traffic.units), measured_total=traffic.total,
        measured_r1=m_r1, measured_E=m_E, measured_r2=m_E / (2 * inputs.k * inputs.T),
        baseline_units=baseline,
        measured_baseline_units=traffic.units["model_up"] + traffic.units["model_down"],
        rel_err_r1=_rel(m_r1, r1), rel_err_E=_rel(m_E, E),
    )
