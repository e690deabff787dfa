"""Encoder / decoder / classifier model and its training losses.

The encoder maps ``x`` to a sigmoid-bounded latent mean ``mu`` and a
log-variance; the classifier reads a latent vector; the decoder maps a latent
vector back to input space through a sigmoid head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import ModelParams, ShapeError


# element-mean keeps the prior term on the same scale as the mean-reduced MSE;
# a per-sample sum over latent dims holds sigma_z near 1 and drowns the class signal
KLD_REDUCTION = "mean"


@dataclass(frozen=True)
class VaeArch:
    input_dim: int
    latent_dim: int = 32
    num_classes: int = 10
    enc_hidden: tuple[int, ...] = (256,)
    clf_hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim >= 1 and num_classes >= 2 required")

    @property
    def dec_hidden(self) -> tuple[int, ...]:
        return tuple(reversed(self.enc_hidden))


@dataclass
class VaeModel:
    enc: ModelParams
    clf: ModelParams
    dec: ModelParams

    def copy(self) -> "VaeModel":
        return VaeModel(self.enc.copy(), self.clf.copy(), self.dec.copy())


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    eps: np.ndarray


def init_encoder(arch: VaeArch, rng: np.random.Generator) -> ModelParams:
    trunk = nn.init_dense(rng, [arch.input_dim, *arch.enc_hidden], "enc")
    width = arch.enc_hidden[-1] if arch.enc_hidden else arch.input_dim
    heads = nn.init_dense(rng, [width, arch.latent_dim], "head")
    mu_w, mu_b = heads.layers[0][1:]
    lv = nn.init_dense(rng, [width, arch.latent_dim], "head")
    lv_w, lv_b = lv.layers[0][1:]
    return ModelParams(trunk.layers + [("enc.mu", mu_w, mu_b), ("enc.logvar", lv_w, lv_b)])


def init_classifier(arch: VaeArch, rng: np.random.Generator) -> ModelParams:
    return nn.init_dense(rng, [arch.latent_dim, *arch.clf_hidden, arch.num_classes], "clf")


def init_decoder(arch: VaeArch, rng: np.random.Generator) -> ModelParams:
    return nn.init_dense(rng, [arch.latent_dim, *arch.dec_hidden, arch.input_dim], "dec")


def init_model(arch: VaeArch, rng: np.random.Generator) -> VaeModel:
    return VaeModel(init_encoder(arch, rng), init_classifier(arch, rng), init_decoder(arch, rng))


def _chain_acts(params: ModelParams, last: str) -> list[str]:
    return ["relu"] * (len(params) - 1) + [last]


# -- encoder internals -----------------------------------------------------------

@dataclass
class _EncCache:
    trunk: nn.Cache | None
    h: np.ndarray
    mu: nn.Cache
    logvar: nn.Cache


def _encode_fwd(enc: ModelParams, x: np.ndarray):
    trunk = enc[:-2]
    x = np.atleast_2d(np.asarray(x, dtype=nn.DTYPE))
    if x.shape[1] != enc.fan_in:
        raise ShapeError(f"input has {x.shape[1]} features, encoder expects {enc.fan_in}")
    if len(trunk):
        h, tc = nn.forward(trunk, ["relu"] * len(trunk), x)
    else:
        h, tc = x, None
    mu, mc = nn.forward(enc[-2:-1], ["sigmoid"], h)
    logvar, lc = nn.forward(enc[-1:], ["linear"], h)
    return mu, logvar, _EncCache(tc, h, mc, lc)


def _encode_bwd(enc: ModelParams, cache: _EncCache, dmu: np.ndarray, dlogvar: np.ndarray) -> ModelParams:
    g_mu, dh_mu = nn.backward(enc[-2:-1], cache.mu, dmu)
    g_lv, dh_lv = nn.backward(enc[-1:], cache.logvar, dlogvar)
    if cache.trunk is not None:
        g_trunk, _ = nn.backward(enc[:-2], cache.trunk, dh_mu + dh_lv)
        layers = g_trunk.layers
    else:
        layers = []
    return ModelParams(layers + g_mu.layers + g_lv.layers)


# -- public model ops --------------------------------------------------------------

def encode(enc: ModelParams, x: np.ndarray, rng: np.random.Generator | None = None,
           eps: np.ndarray | None = None) -> LatentCode:
    """Encode a batch; ``z = mu + exp(logvar / 2) * eps``.

    ``eps`` is drawn from ``rng`` unless given.  With neither, ``eps = 0``.
    """
    mu, logvar, _ = _encode_fwd(enc, x)
    if eps is None:
        eps = rng.standard_normal(mu.shape) if rng is not None else np.zeros_like(mu)
    eps = np.broadcast_to(eps, mu.shape)
    return LatentCode(mu, logvar, mu + np.exp(0.5 * logvar) * eps, eps)


def latent_means(enc: ModelParams, x: np.ndarray) -> np.ndarray:
    return _encode_fwd(enc, x)[0]


def decode(dec: ModelParams, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=nn.DTYPE))
    if z.shape[1] != dec.fan_in:
        raise ShapeError(f"latent has {z.shape[1]} dims, decoder expects {dec.fan_in}")
    return nn.forward(dec, _chain_acts(dec, "sigmoid"), z)[0]


def logits_from_latent(clf: ModelParams, z: np.ndarray) -> np.ndarray:
    return nn.forward(clf, _chain_acts(clf, "linear"), z)[0]


def classify(enc: ModelParams, clf: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities, computed from the latent mean (no sampling)."""
    logits = logits_from_latent(clf, latent_means(enc, x))
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def predict(enc: ModelParams, clf: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits_from_latent(clf, latent_means(enc, x)), axis=1)


# -- losses with gradients ---------------------------------------------------------

def weighted_loss_and_grads(enc, clf, dec, x, y, eps: np.ndarray, w_ce: float, w_kld: float, w_mse: float):
    """``w_ce * ce + w_kld * kld + w_mse * mse`` on a batch with frozen ``eps``.

    Returns ``(loss, (g_enc, g_clf, g_dec), parts)`` where ``parts`` holds the
    three unweighted terms.
    """
    x = np.atleast_2d(np.asarray(x, dtype=nn.DTYPE))
    mu, logvar, ecache = _encode_fwd(enc, x)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps

    logits, ccache = nn.forward(clf, _chain_acts(clf, "linear"), z)
    ce, dlogits = nn.ce_loss(logits, y)
    g_clf, dz = nn.backward(clf, ccache, w_ce * dlogits)

    kld, dmu_k, dlv_k = nn.kld_loss(mu, logvar, reduction=KLD_REDUCTION)
    xhat, dcache = nn.forward(dec, _chain_acts(dec, "sigmoid"), z)
    mse, dxhat = nn.mse_loss(xhat, x)
    g_dec, dz_rec = nn.backward(dec, dcache, w_mse * dxhat)

    dz = dz + dz_rec
    dmu = dz + w_kld * dmu_k
    dlogvar = dz * 0.5 * std * eps + w_kld * dlv_k
    g_enc = _encode_bwd(enc, ecache, dmu, dlogvar)
    loss = w_ce * ce + w_kld * kld + w_mse * mse
    return loss, (g_enc, g_clf, g_dec), {"ce": ce, "kld": kld, "mse": mse}


def preliminary_loss_and_grads(enc, clf, dec, x, y, lam: float, eps: np.ndarray):
    """Composite loss ``ce + lam * (kld + mse)``; see weighted_loss_and_grads."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return weighted_loss_and_grads(enc, clf, dec, x, y, eps, 1.0, lam, lam)


def preliminary_loss(enc, clf, dec, x, y, lam: float, eps: np.ndarray) -> float:
    return preliminary_loss_and_grads(enc, clf, dec, x, y, lam, eps)[0]


def secondary_loss_and_grads(enc, clf, x, y, eps: np.ndarray):
    """Cross-entropy on sampled latents; the decoder takes no part."""
    x = np.atleast_2d(np.asarray(x, dtype=nn.DTYPE))
    mu, logvar, ecache = _encode_fwd(enc, x)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    logits, ccache = nn.forward(clf, _chain_acts(clf, "linear"), z)
    ce, dlogits = nn.ce_loss(logits, y)
    g_clf, dz = nn.backward(clf, ccache, dlogits)
    g_enc = _encode_bwd(enc, ecache, dz, dz * 0.5 * std * eps)
    return ce, (g_enc, g_clf)


def secondary_loss(enc, clf, x, y, eps: np.ndarray) -> float:
    return secondary_loss_and_grads(enc, clf, x, y, eps)[0]


def plain_loss_and_grads(enc, clf, x, y):
    """Cross-entropy through the latent mean only; used by the baselines."""
    mu, logvar, ecache = _encode_fwd(enc, x)
    logits, ccache = nn.forward(clf, _chain_acts(clf, "linear"), mu)
    ce, dlogits = nn.ce_loss(logits, y)
    g_clf, dmu = nn.backward(clf, ccache, dlogits)
    g_enc = _encode_bwd(enc, ecache, dmu, np.zeros_like(logvar))
    return ce, (g_enc, g_clf)
