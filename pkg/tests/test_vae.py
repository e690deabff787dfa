import numpy as np
import pytest

from feddpms import nn, vae
from feddpms.nn import OptimState, ShapeError
from feddpms.vae import VaeArch


def _model(seed=0, **kw):
    arch = VaeArch(input_dim=kw.pop("input_dim", 5), latent_dim=kw.pop("latent_dim", 3),
                   num_classes=kw.pop("num_classes", 4), enc_hidden=(7,), clf_hidden=(6,))
    return arch, vae.init_model(arch, np.random.default_rng(seed))


def _num_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6))


def test_encode_shapes_and_mu_bounds(rng):
    arch, m = _model()
    code = vae.encode(m.enc, rng.uniform(size=(9, 5)), rng=rng)
    assert code.mu.shape == code.logvar.shape == code.z.shape == (9, 3)
    assert np.all((code.mu >= 0) & (code.mu <= 1))


def test_encode_is_deterministic_given_eps(rng):
    _, m = _model()
    x = rng.uniform(size=(4, 5))
    eps = rng.normal(size=(4, 3))
    a = vae.encode(m.enc, x, eps=eps)
    b = vae.encode(m.enc, x, eps=eps)
    assert np.array_equal(a.z, b.z)
    c = vae.encode(m.enc, x, rng=np.random.default_rng(3))
    d = vae.encode(m.enc, x, rng=np.random.default_rng(3))
    assert np.array_equal(c.z, d.z)


def test_reparameterization_formula(rng):
    _, m = _model()
    x = rng.uniform(size=(4, 5))
    eps = rng.normal(size=(4, 3))
    code = vae.encode(m.enc, x, eps=eps)
    np.testing.assert_allclose(code.z, code.mu + np.exp(0.5 * code.logvar) * eps, rtol=1e-15)
    assert np.array_equal(vae.encode(m.enc, x).z, code.mu)


def test_decoder_output_in_unit_cube(rng):
    _, m = _model()
    out = vae.decode(m.dec, rng.normal(scale=10, size=(6, 3)))
    assert out.shape == (6, 5)
    assert np.all((out >= 0) & (out <= 1))


def test_shape_errors(rng):
    _, m = _model()
    with pytest.raises(ShapeError):
        vae.encode(m.enc, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        vae.decode(m.dec, np.zeros((2, 4)))


def test_classify_returns_distribution(rng):
    _, m = _model()
    x = rng.uniform(size=(5, 5))
    p = vae.classify(m.enc, m.clf, x)
    assert np.array_equal(np.argmax(p, axis=1), vae.predict(m.enc, m.clf, x))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_composite_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    _, m = _model(seed)
    x = rng.uniform(size=(5, 5))
    y = rng.integers(0, 4, size=5)
    eps = rng.normal(size=(5, 3))
    lam = 0.7

    def loss():
        return vae.preliminary_loss(m.enc, m.clf, m.dec, x, y, lam, eps)

    _, grads, _ = vae.preliminary_loss_and_grads(m.enc, m.clf, m.dec, x, y, lam, eps)
    for params, g in zip((m.enc, m.clf, m.dec), grads):
        for (_, w, b), (_, gw, gb) in zip(params.layers, g.layers):
            for arr, ga in ((w, gw), (b, gb)):
                num = _num_grad(loss, arr)
                if np.abs(num).max() < 1e-9 and np.abs(ga).max() < 1e-9:
                    continue
                assert _rel_err(ga, num) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_secondary_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    _, m = _model(seed)
    x = rng.uniform(size=(4, 5))
    y = rng.integers(0, 4, size=4)
    eps = rng.normal(size=(4, 3))
    _, grads = vae.secondary_loss_and_grads(m.enc, m.clf, x, y, eps)
    for params, g in zip((m.enc, m.clf), grads):
        for (_, w, _), (_, gw, _) in zip(params.layers, g.layers):
            num = _num_grad(lambda: vae.secondary_loss(m.enc, m.clf, x, y, eps), w)
            assert _rel_err(gw, num) < 1e-4


def test_lambda_zero_equals_cross_entropy_alone(rng):
    _, m = _model()
    x, y, eps = rng.uniform(size=(6, 5)), rng.integers(0, 4, size=6), rng.normal(size=(6, 3))
    assert vae.preliminary_loss(m.enc, m.clf, m.dec, x, y, 0.0, eps) == vae.secondary_loss(m.enc, m.clf, x, y, eps)


def test_composite_loss_is_affine_in_lambda(rng):
    _, m = _model()
    x, y, eps = rng.uniform(size=(6, 5)), rng.integers(0, 4, size=6), rng.normal(size=(6, 3))
    l0 = vae.preliminary_loss(m.enc, m.clf, m.dec, x, y, 0.0, eps)
    _, _, parts = vae.preliminary_loss_and_grads(m.enc, m.clf, m.dec, x, y, 1.0, eps)
    slope = parts["kld"] + parts["mse"]
    assert slope >= 0
    for lam in (0.05, 0.5, 3.0):
        assert vae.preliminary_loss(m.enc, m.clf, m.dec, x, y, lam, eps) == pytest.approx(l0 + lam * slope, rel=1e-12)


def test_negative_lambda_rejected(rng):
    _, m = _model()
    with pytest.raises(ValueError):
        vae.preliminary_loss(m.enc, m.clf, m.dec, np.zeros((1, 5)), np.zeros(1, dtype=int), -0.1, np.zeros((1, 3)))


def _train(m, x, y, lam, steps, rng):
    joint = nn.ModelParams(m.enc.layers + m.clf.layers + m.dec.layers).contiguous()
    ne, nc = len(m.enc), len(m.clf)
    enc, clf, dec = joint[:ne], joint[ne:ne + nc], joint[ne + nc:]
    opt = OptimState.for_params(joint, base_lr=3e-3, period=10 ** 9)
    for _ in range(steps):
        eps = rng.normal(size=(len(x), enc.layers[-1][1].shape[1]))
        _, g, _ = vae.preliminary_loss_and_grads(enc, clf, dec, x, y, lam, eps)
        flat = nn.ModelParams(g[0].layers + g[1].layers + g[2].layers).flat()
        nn.adam_step(joint, flat, opt)
    return enc, clf, dec


def test_training_separates_two_classes_and_reconstructs(rng):
    arch = VaeArch(input_dim=4, latent_dim=2, num_classes=2, enc_hidden=(16,), clf_hidden=(8,))
    m = vae.init_model(arch, np.random.default_rng(7))
    x = np.vstack([rng.normal(0.25, 0.05, size=(100, 4)), rng.normal(0.75, 0.05, size=(100, 4))]).clip(0, 1)
    y = np.repeat([0, 1], 100)
    untrained = nn.mse_loss(vae.decode(m.dec, vae.latent_means(m.enc, x)), x)[0]
    enc, clf, dec = _train(m, x, y, lam=0.05, steps=600, rng=rng)
    assert np.mean(vae.predict(enc, clf, x) == y) > 0.95
    trained = nn.mse_loss(vae.decode(dec, vae.latent_means(enc, x)), x)[0]
    assert trained < untrained


def test_plain_loss_ignores_sampling(rng):
    _, m = _model()
    x, y = rng.uniform(size=(4, 5)), rng.integers(0, 4, size=4)
    loss, (g_enc, _) = vae.plain_loss_and_grads(m.enc, m.clf, x, y)
    assert loss == vae.secondary_loss(m.enc, m.clf, x, y, np.zeros((4, 3)))
    # the log-variance head gets no gradient
    assert not g_enc.layers[-1][1].any()
