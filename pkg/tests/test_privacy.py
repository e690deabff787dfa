import math
import warnings

import numpy as np
import pytest

from feddpms import privacy
from feddpms.privacy import DegenerateBudgetWarning, PrivacyFloorError


def test_calibration_example_natural_log():
    # sqrt(2 ln(0.8 / 0.01)) / 0.5
    assert privacy.calibrate_sigma(0.5, 0.01) == pytest.approx(5.920828749203193, rel=1e-12)


def test_calibration_round_trip_on_grid():
    for eps in np.linspace(0.1, 5, 20):
        for delta in np.geomspace(1e-6, 0.5, 20):
            sigma = privacy.calibrate_sigma(eps, delta)
            assert privacy.delta_for(sigma, eps) == pytest.approx(delta, abs=1e-9)


def test_degenerate_delta_warns_and_returns_zero():
    with pytest.warns(DegenerateBudgetWarning):
        assert privacy.calibrate_sigma(1.0, 0.85) == 0.0


def test_calibration_rejects_bad_inputs():
    with pytest.raises(ValueError):
        privacy.calibrate_sigma(0.0, 0.1)
    with pytest.raises(ValueError):
        privacy.calibrate_sigma(1.0, 1.0)


def test_epsilon_for_inverts_calibration():
    s = privacy.calibrate_sigma(0.7, 1e-3)
    assert privacy.epsilon_for(s, 1e-3) == pytest.approx(0.7, rel=1e-12)
    assert privacy.epsilon_for(0.0, 1e-3) == math.inf


def test_sensitivity_bound_on_random_adjacent_means(rng):
    m, d, trials = 20, 4, 100_000
    for start in range(0, trials, 10_000):
        a = rng.uniform(size=(10_000, m, d))
        b = a.copy()
        idx = rng.integers(0, m, size=10_000)
        b[np.arange(10_000), idx] = rng.uniform(size=(10_000, d))
        gap = np.abs(a.mean(axis=1) - b.mean(axis=1)).max()
        assert gap <= privacy.sensitivity(m) + 1e-15


def test_sensitivity_bound_is_attained_at_boundary():
    m = 8
    a = np.zeros((m, 1))
    b = a.copy()
    b[3, 0] = 1.0
    assert abs(a.mean() - b.mean()) == privacy.sensitivity(m)
    with pytest.raises(ValueError):
        privacy.sensitivity(0)


def test_perturbation_zero_noise_is_identity(rng):
    z = rng.uniform(size=6)
    assert np.array_equal(privacy.perturb_mean(z, 0.0, rng), z)


def test_perturbation_std_monte_carlo(rng):
    z = np.full(100_000, 0.5)
    out = privacy.perturb_mean(z, 0.07, rng)
    assert np.std(out - z) == pytest.approx(0.07, rel=0.01)
    assert np.abs(np.mean(out - z)) < 0.001


def test_perturbation_is_not_clamped(rng):
    out = privacy.perturb_mean(np.zeros(10_000), 1.0, rng)
    assert out.min() < 0 and out.max() > 1


def test_perturbation_rejects_negative_std(rng):
    with pytest.raises(ValueError):
        privacy.perturb_mean(np.zeros(2), -0.1, rng)


def test_budget_report_examples():
    (row,) = privacy.budget_report(0.04, {3: 100})
    assert row.sigma_mech == pytest.approx(4.0)
    assert row.sensitivity == 0.01
    d = row.to_dict()
    assert d["class"] == 3 and "cls" not in d


def test_reported_noise_level_misses_delta_claim_under_natural_log():
    (row,) = privacy.budget_report(0.039, {0: 100}, epsilon=0.5, delta=0.01)
    assert row.delta > 0.01
    needed = privacy.calibrate_sigma(0.5, 0.01) / 100
    assert needed == pytest.approx(0.0592, abs=1e-4)


def test_doubling_m_doubles_sigma_and_shrinks_delta():
    a, b = privacy.budget_report(0.02, {0: 100, 1: 200})
    assert b.sigma_mech == pytest.approx(2 * a.sigma_mech)
    assert b.delta < a.delta


def test_budget_floor():
    with pytest.raises(PrivacyFloorError):
        privacy.budget_report(0.1, {0: 5}, min_m=10)


def test_no_warning_in_normal_range():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        privacy.calibrate_sigma(1.0, 0.1)
