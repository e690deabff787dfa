import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddpms import costs
from feddpms.costs import CostInputs, Traffic


def _brute_expected_downloads(K, k, rounds):
    # each client is picked in a round with probability k/K, independently across rounds
    nu = k / K
    return K * (1 - (1 - nu) ** rounds)


def test_r1_headline_value():
    assert costs.comm_r1(200, 3, 128, 10 ** 6) == pytest.approx(0.0768, abs=1e-15)


def test_r1_scales_inversely_with_theta():
    assert costs.comm_r1(10, 2, 8, 2000) == costs.comm_r1(10, 2, 8, 1000) / 2


def test_full_participation_limits():
    assert costs.expected_downloads_E(1.0, 7, 50, 20) == 7
    assert costs.comm_r2(1.0, 50, 20) == pytest.approx(1 / 100, rel=1e-15)


def test_small_nu_limit_of_r2():
    T, Tp = 50, 20
    assert costs.comm_r2(1e-6, T, Tp) == pytest.approx(0.5 - Tp / (2 * T), abs=1e-3)


@given(st.integers(1, 50), st.data(), st.integers(1, 60))
@settings(max_examples=100, deadline=None)
def test_expected_downloads_matches_binomial_oracle(K, data, rounds):
    k = data.draw(st.integers(1, K))
    E = costs.expected_downloads_E(k / K, k, rounds, 0)
    assert E == pytest.approx(_brute_expected_downloads(K, k, rounds), rel=1e-12)
    # k / nu can land one ulp above K
    assert 0 <= E <= K * (1 + 1e-12)


def test_no_secondary_rounds_means_no_downloads():
    assert costs.expected_downloads_E(0.3, 3, 20, 20) == 0
    assert costs.comm_r2(0.3, 20, 20) == 0


def test_table_rows():
    inp = CostInputs(theta=10 ** 6, latent_dim=128, n=3, alpha=200, k=10, K=10, T=50, T_p=20, G=784)
    t = costs.cost_table(inp)
    assert t["fedavg"] == {"communication": 1.0, "computation": 1.0, "memory": 1.0}
    assert t["fedprox"]["computation"] == "1 + t_prox/t_avg" and t["fedprox"]["memory"] == 2.0
    assert t["moon"]["computation"] == "1 + t_moon/t_avg" and t["moon"]["memory"] == 3.0
    assert t["fedmix"]["communication"] == pytest.approx(1 + 784 / 10 ** 6)
    assert t["feddpms"]["communication"] == pytest.approx(1 + 0.0768 + 1 / 100)
    assert t["feddpms"]["computation"] == t["feddpms"]["memory"] == pytest.approx(1.4)


def test_inputs_validation():
    with pytest.raises(ValueError):
        CostInputs(theta=1, latent_dim=1, n=1, alpha=1, k=3, K=2, T=5, T_p=1)
    with pytest.raises(ValueError):
        CostInputs(theta=1, latent_dim=1, n=1, alpha=1, k=1, K=2, T=5, T_p=6)
    with pytest.raises(ValueError):
        costs.comm_r1(1, 1, 1, 0)


def test_traffic_counters():
    tr = Traffic()
    tr.add("model_up", 5)
    tr.add("latent_down", 3)
    assert (tr.uploaded, tr.downloaded, tr.total) == (5, 3, 8)
    with pytest.raises(KeyError):
        tr.add("bogus", 1)


def test_reconcile_exact_when_everyone_shares_once():
    inp = CostInputs(theta=1000, latent_dim=4, n=2, alpha=5, k=4, K=4, T=10, T_p=4)
    tr = Traffic()
    per_client = inp.alpha * inp.n * inp.latent_dim
    for _ in range(inp.K):
        tr.add("latent_up", per_client)
        tr.add("latent_down", per_client)
        tr.decoder_downloads += 1
    rep = costs.reconcile(tr, inp)
    assert rep.rel_err_r1 == 0.0
    assert rep.measured_E == 4 and rep.rel_err_E == 0.0
    assert rep.measured_r2 == pytest.approx(rep.r2)
    assert rep.baseline_units == 2 * 4 * 1000 * 10


def test_reconcile_needs_traffic():
    inp = CostInputs(theta=1, latent_dim=1, n=1, alpha=1, k=1, K=1, T=2, T_p=1)
    with pytest.raises(ValueError):
        costs.reconcile(None, inp)


def test_selected_fraction_is_cancellation_free():
    f = costs._selected_fraction(1e-12, 3)
    assert f == pytest.approx(3e-12, rel=1e-9)
    assert not math.isnan(f)
