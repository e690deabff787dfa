"""Gaussian mechanism for releasing bounded latent means.

A mean over ``m`` values in ``[0, 1]`` moves by at most ``1/m`` when one value
changes, so the released mean gets noise of std ``noise_std = sigma_mech / m``.
``sigma_mech`` and ``(epsilon, delta)`` are tied by
``delta = 0.8 * exp(-(sigma_mech * epsilon)^2 / 2)`` (natural log).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

DELTA_CEILING = 0.8


class DegenerateBudgetWarning(UserWarning):
    """delta >= 4/5: any sigma satisfies the bound."""


class PrivacyFloorError(ValueError):
    pass


@dataclass(frozen=True)
class DpParams:
    cls: int
    m: int
    noise_std: float
    sigma_mech: float
    sensitivity: float
    epsilon: float
    delta: float
    min_epsilon: float | None = None
    target_delta: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        return d


def sensitivity(m: int) -> float:
    if m < 1:
        raise ValueError("m must be >= 1")
    return 1.0 / m


def calibrate_sigma(epsilon: float, delta: float) -> float:
    """Smallest ``sigma`` with ``sigma >= sqrt(2 ln(4 / (5 delta))) / epsilon``.

    For ``delta >= 4/5`` the bound is vacuous: returns 0 and warns.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if delta >= DELTA_CEILING:
        warnings.warn(f"delta={delta} >= 4/5 makes the Gaussian bound vacuous",
                      DegenerateBudgetWarning, stacklevel=2)
        return 0.0
    return math.sqrt(2.0 * math.log(DELTA_CEILING / delta)) / epsilon


def delta_for(sigma: float, epsilon: float) -> float:
    if sigma < 0 or epsilon <= 0:
        raise ValueError("need sigma >= 0 and epsilon > 0")
    return DELTA_CEILING * math.exp(-0.5 * (sigma * epsilon) ** 2)


def epsilon_for(sigma: float, delta: float) -> float:
    """Smallest epsilon reachable at ``delta`` with multiplier ``sigma``."""
    if sigma <= 0:
        return math.inf
    if delta >= DELTA_CEILING:
        return 0.0
    return math.sqrt(2.0 * math.log(DELTA_CEILING / delta)) / sigma


def perturb_mean(zbar: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. ``N(0, noise_std^2)`` to every coordinate; no clamping."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    zbar = np.asarray(zbar, dtype=np.float64)
    return zbar + noise_std * rng.standard_normal(zbar.shape)


def budget_report(noise_std: float, class_counts: dict[int, int], epsilon: float = 0.5,
                  delta: float = 0.01, min_m: int = 1) -> list[DpParams]:
    """Per shared class: implied mechanism multiplier, delta at ``epsilon``, epsilon at ``delta``."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rows = []
    for cls, m in sorted(class_counts.items()):
        if m < min_m:
            raise PrivacyFloorError(f"class {cls}: m={m} below floor {min_m}; no privacy claim")
        sigma = noise_std * m
        rows.append(DpParams(cls=int(cls), m=int(m), noise_std=noise_std, sigma_mech=sigma,
                             sensitivity=sensitivity(m), epsilon=epsilon,
                             delta=delta_for(sigma, epsilon),
                             min_epsilon=epsilon_for(sigma, delta), target_delta=delta))
    return rows
