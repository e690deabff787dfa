"""Dense feed-forward engine: layers, activations, losses, analytic gradients, Adam.

Everything is float64.  Tensors are plain ``numpy.ndarray`` objects; a batch is
a 2-D array of shape ``(batch, features)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

ACTIVATIONS = ("linear", "relu", "sigmoid")


class ShapeError(ValueError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ModelParams:
    """Ordered ``(layer_id, weight, bias)`` triples.

    Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    """

    layers: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    # set when every array is a view into one contiguous vector
    buffer: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.layers]

    @property
    def count(self) -> int:
        """Total number of scalars."""
        return sum(w.size + b.size for _, w, b in self.layers)

    @property
    def fan_in(self) -> int:
        return self.layers[0][1].shape[0]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return ModelParams(self.layers[idx])
        return self.layers[idx]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for _, w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([(n, w.copy(), b.copy()) for n, w, b in self.layers])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([(n, np.zeros_like(w), np.zeros_like(b)) for n, w, b in self.layers])

    def compatible(self, other: "ModelParams") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for (n1, w1, b1), (n2, w2, b2) in zip(self.layers, other.layers):
            if n1 != n2 or w1.shape != w2.shape or b1.shape != b2.shape:
                return False
        return True

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([a.ravel() for a in self.arrays()])

    def load_flat(self, vec: np.ndarray) -> "ModelParams":
        """Return a new ModelParams with the same layout filled from ``vec``."""
        if vec.size != self.count:
            raise ShapeError(f"flat vector has {vec.size} scalars, expected {self.count}")
        out, pos = [], 0
        for n, w, b in self.layers:
            nw = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            nb = vec[pos:pos + b.size].reshape(b.shape).copy()
            pos += b.size
            out.append((n, nw, nb))
        return ModelParams(out)

    def contiguous(self) -> "ModelParams":
        """Copy into a single buffer; the layer arrays become views of ``buffer``."""
        buf = self.flat().copy()
        out, pos = [], 0
        for n, w, b in self.layers:
            nw = buf[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            nb = buf[pos:pos + b.size].reshape(b.shape)
            pos += b.size
            out.append((n, nw, nb))
        return ModelParams(out, buffer=buf)

    def assign(self, other: "ModelParams") -> None:
        """Copy values from ``other`` into these arrays."""
        _require_compatible(self, other)
        for dst, src in zip(self.arrays(), other.arrays()):
            dst[...] = src

    def equal(self, other: "ModelParams") -> bool:
        return self.compatible(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def __add__(self, other: "ModelParams") -> "ModelParams":
        _require_compatible(self, other)
        return ModelParams([(n, w1 + w2, b1 + b2) for (n, w1, b1), (_, w2, b2)
                            in zip(self.layers, other.layers)])


def _require_compatible(a: ModelParams, b: ModelParams) -> None:
    if not a.compatible(b):
        raise ShapeError(f"incompatible parameter layouts: {a.names} vs {b.names}")


def init_dense(rng: np.random.Generator, sizes: list[int], prefix: str) -> ModelParams:
    """He-uniform weights, zero biases, for the chain ``sizes[0] -> ... -> sizes[-1]``."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DTYPE)
        layers.append((f"{prefix}.{i}", w, np.zeros(fan_out, dtype=DTYPE)))
    return ModelParams(layers)


def weighted_average(models: list[ModelParams], weights) -> ModelParams:
    """Return ``sum_i weights[i] * models[i]``; accumulation runs in list order."""
    if not models:
        raise ValueError("nothing to aggregate")
    if len(models) != len(weights):
        raise ValueError("one weight per model required")
    ref = models[0]
    for m in models[1:]:
        _require_compatible(ref, m)
    out = []
    for li, (name, w0, b0) in enumerate(ref.layers):
        w = weights[0] * w0
        b = weights[0] * b0
        for wt, m in zip(weights[1:], models[1:]):
            w = w + wt * m.layers[li][1]
            b = b + wt * m.layers[li][2]
        out.append((name, w, b))
    return ModelParams(out)


# -- forward / backward ------------------------------------------------------

@dataclass
class Cache:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    activations: list[str]


def _activate(pre: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(pre, 0.0)
    if act == "sigmoid":
        return sigmoid(pre)
    if act == "linear":
        return pre
    raise ValueError(f"unknown activation {act!r}")


def forward(params: ModelParams, activations: list[str], x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Run the layer chain on a batch and return ``(output, cache)``."""
    if len(activations) != len(params):
        raise ValueError("one activation per layer required")
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.fan_in:
        raise ShapeError(f"input has {x.shape[1]} features, first layer expects {params.fan_in}")
    inputs, outputs = [], []
    h = x
    for (_, w, b), act in zip(params.layers, activations):
        inputs.append(h)
        h = _activate(h @ w + b, act)
        outputs.append(h)
    return h, Cache(inputs, outputs, list(activations))


def backward(params: ModelParams, cache: Cache | None, dout: np.ndarray) -> tuple[ModelParams, np.ndarray]:
    """Backpropagate ``dout`` (gradient w.r.t. the chain output).

    Returns ``(param_grads, input_grad)``.
    """
    if cache is None:
        raise RuntimeError("backward called without a cached forward pass")
    grads = []
    g = dout
    for (name, w, _), h_in, h_out, act in zip(reversed(params.layers), reversed(cache.inputs),
                                              reversed(cache.outputs), reversed(cache.activations)):
        if act == "relu":
            g = g * (h_out > 0.0)
        elif act == "sigmoid":
            g = g * h_out * (1.0 - h_out)
        grads.append((name, h_in.T @ g, g.sum(axis=0)))
        g = g @ w.T
    grads.reverse()
    return ModelParams(grads), g


# -- losses --------------------------------------------------------------------

def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise FloatingPointError(f"{what} is not finite")
    return value


def ce_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("one label per row required")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be integers in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return _finite(float(loss), "cross-entropy"), grad / n


def kld_loss(mu: np.ndarray, logvar: np.ndarray, reduction: str = "sum") -> tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mu, exp(logvar)) || N(0, I)) in closed form.

    ``reduction="sum"`` sums over latent dims and averages over rows;
    ``"mean"`` averages over every element, like ``mse_loss``.
    Returns ``(loss, dmu, dlogvar)``.
    """
    mu = np.atleast_2d(mu)
    logvar = np.atleast_2d(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar shapes differ")
    if reduction == "sum":
        scale = mu.shape[0]
    elif reduction == "mean":
        scale = mu.size
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    with np.errstate(over="ignore"):
        var = np.exp(logvar)
    loss = -0.5 * np.sum(1.0 + logvar - mu * mu - var) / scale
    return _finite(float(loss), "KL divergence"), mu / scale, 0.5 * (var - 1.0) / scale


def mse_loss(xhat: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. ``xhat``."""
    xhat = np.atleast_2d(xhat)
    x = np.atleast_2d(x)
    if xhat.shape != x.shape:
        raise ShapeError(f"reconstruction shape {xhat.shape} != target shape {x.shape}")
    diff = xhat - x
    return _finite(float(np.mean(diff * diff)), "MSE"), 2.0 * diff / diff.size


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimState:
    """Adam moments plus a step-decay schedule.

    Moments are flat vectors in ``ModelParams.flat`` order.  ``t`` counts Adam
    updates (bias correction); ``epoch`` counts schedule steps and the learning
    rate is ``base_lr * gamma ** (epoch // period)``.
    """

    m: np.ndarray
    v: np.ndarray
    base_lr: float = 1e-3
    period: int = 10
    gamma: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    epoch: int = 0

    @classmethod
    def for_params(cls, params: ModelParams, **kwargs) -> "OptimState":
        return cls(m=np.zeros(params.count, dtype=DTYPE), v=np.zeros(params.count, dtype=DTYPE), **kwargs)

    @property
    def lr(self) -> float:
        return self.base_lr * self.gamma ** (self.epoch // self.period)

    def schedule_step(self, n: int = 1) -> None:
        self.epoch += n


def adam_step(params: ModelParams, grads: ModelParams | np.ndarray, opt: OptimState) -> ModelParams:
    """Apply one bias-corrected Adam update in place and return ``params``.

    ``grads`` may be a ModelParams of the same layout or its flattened vector.
    """
    if isinstance(grads, ModelParams):
        _require_compatible(params, grads)
        g = grads.buffer if grads.buffer is not None else grads.flat()
    else:
        g = grads
    if opt.m.size != params.count or g.size != params.count:
        raise ShapeError("optimizer state or gradient does not mirror parameters")
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * g
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * (g * g)
    step = (opt.lr / c1) * opt.m / (np.sqrt(opt.v / c2) + opt.eps)
    if params.buffer is not None:
        params.buffer -= step
    else:
        pos = 0
        for a in params.arrays():
            a -= step[pos:pos + a.size].reshape(a.shape)
            pos += a.size
    return params
