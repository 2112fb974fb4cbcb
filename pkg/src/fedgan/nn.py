"""Dense networks with hand-written backpropagation.

Every network is described by a :class:`NetSpec` and its parameters live in a
single flat numpy vector (the unit that federated aggregation works on). The
layout is fixed: for each layer, the ``(in, out)`` weight matrix in row-major
order followed by the ``out`` biases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LayoutError, NonFiniteWeightsError

LEAKY_SLOPE = 0.2
OUTPUT_ACTIVATIONS = ("tanh", "sigmoid", "softmax")


@dataclass(frozen=True)
class NetSpec:
    layer_sizes: tuple[int, ...]
    output_activation: str = "tanh"
    hidden_activation: str = "leaky_relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise LayoutError("a network needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise LayoutError(f"layer sizes must be positive, got {sizes}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise LayoutError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation != "leaky_relu":
            raise LayoutError(f"unknown hidden activation {self.hidden_activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "output_activation": self.output_activation,
            "hidden_activation": self.hidden_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(tuple(d["layer_sizes"]), d.get("output_activation", "tanh"),
                   d.get("hidden_activation", "leaky_relu"))


@dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


def _check_weights(spec: NetSpec, w: np.ndarray) -> None:
    if w.ndim != 1 or w.shape[0] != spec.n_params:
        raise LayoutError(f"expected a flat vector of {spec.n_params} params, got shape {w.shape}")


def unflatten(spec: NetSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copies)."""
    _check_weights(spec, w)
    layers = []
    pos = 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = w[pos:pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = w[pos:pos + n_out]
        pos += n_out
        layers.append((W, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_params(spec: NetSpec, seed, dtype=np.float64) -> np.ndarray:
    """Glorot-uniform weights, zero biases; deterministic in ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    parts = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        parts.append(rng.uniform(-limit, limit, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return np.concatenate(parts).astype(dtype)


def _leaky(z):
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_grad(z):
    return np.where(z > 0, 1.0, LEAKY_SLOPE).astype(z.dtype)


def _sigmoid(z):
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _activate_output(kind: str, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return _sigmoid(z)
    return _softmax(z)


def _forward_cached(spec: NetSpec, w: np.ndarray, x: np.ndarray):
    layers = unflatten(spec, w)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise LayoutError(f"batch must have shape (n, {spec.n_in}), got {x.shape}")
    acts = [x]
    pre = []
    a = x
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        pre.append(z)
        a = _leaky(z) if i < len(layers) - 1 else z
        acts.append(a)
    return layers, acts, pre


def forward(spec: NetSpec, w: np.ndarray, batch: np.ndarray) -> np.ndarray:
    _, _, pre = _forward_cached(spec, w, batch)
    return _activate_output(spec.output_activation, pre[-1])


def logits(spec: NetSpec, w: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Output-layer pre-activations."""
    _, _, pre = _forward_cached(spec, w, batch)
    return pre[-1]


def _backward(layers, acts, pre, g):
    """Propagate dL/d(final pre-activation) back; return (flat grad, dL/dinput)."""
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((acts[i].T @ g, g.sum(axis=0)))
        g = g @ W.T
        if i > 0:
            g = g * _leaky_grad(pre[i - 1])
    grads.reverse()
    return flatten(grads), g


def _output_vjp(kind: str, out, g):
    if kind == "tanh":
        return g * (1.0 - out * out)
    if kind == "sigmoid":
        return g * out * (1.0 - out)
    return out * (g - (g * out).sum(axis=1, keepdims=True))


def _softplus(z):
    return np.logaddexp(0.0, z)


def disc_loss_and_grad(spec: NetSpec, w_d: np.ndarray, real: np.ndarray, fake: np.ndarray):
    """Binary cross-entropy of the discriminator, real labelled 1 and fake 0.

    The loss is the average of the two per-batch means, so a discriminator that
    outputs 0.5 everywhere scores ln 2. Computed on logits for stability.
    """
    if spec.output_activation != "sigmoid" or spec.n_out != 1:
        raise LayoutError("discriminator must end in a single sigmoid unit")
    real = np.asarray(real)
    fake = np.asarray(fake)
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("discriminator loss needs nonempty real and fake batches")
    layers, acts_r, pre_r = _forward_cached(spec, w_d, real)
    _, acts_f, pre_f = _forward_cached(spec, w_d, fake)
    z_r, z_f = pre_r[-1], pre_f[-1]
    loss = 0.5 * (_softplus(-z_r).mean() + _softplus(z_f).mean())
    g_r = 0.5 * (_sigmoid(z_r) - 1.0) / len(real)
    g_f = 0.5 * _sigmoid(z_f) / len(fake)
    grad_r, _ = _backward(layers, acts_r, pre_r, g_r)
    grad_f, _ = _backward(layers, acts_f, pre_f, g_f)
    return float(loss), grad_r + grad_f


def gen_loss_and_grad(spec_g: NetSpec, spec_d: NetSpec, w_g: np.ndarray, w_d: np.ndarray,
                      noise: np.ndarray, kind: str = "non_saturating"):
    """Generator loss with the discriminator held fixed.

    ``non_saturating`` minimises ``-E[ln D(G(z))]``; ``minimax`` minimises
    ``E[ln(1 - D(G(z)))]``. The gradient is with respect to ``w_g`` only.
    """
    if spec_g.n_out != spec_d.n_in:
        raise LayoutError("generator output width must match discriminator input width")
    noise = np.asarray(noise)
    if len(noise) == 0:
        raise ValueError("generator loss needs a nonempty noise batch")
    layers_g, acts_g, pre_g = _forward_cached(spec_g, w_g, noise)
    fake = _activate_output(spec_g.output_activation, pre_g[-1])
    layers_d, acts_d, pre_d = _forward_cached(spec_d, w_d, fake)
    z = pre_d[-1]
    n = len(noise)
    if kind == "non_saturating":
        loss = _softplus(-z).mean()
        g = (_sigmoid(z) - 1.0) / n
    elif kind == "minimax":
        loss = -_softplus(z).mean()
        g = -_sigmoid(z) / n
    else:
        raise ValueError(f"unknown generator loss {kind!r}")
    _, g_fake = _backward(layers_d, acts_d, pre_d, g)
    g_out = _output_vjp(spec_g.output_activation, fake, g_fake)
    grad, _ = _backward(layers_g, acts_g, pre_g, g_out)
    return float(loss), grad


def xent_loss_and_grad(spec: NetSpec, w: np.ndarray, x: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy, used to fit the scoring classifier."""
    if spec.output_activation != "softmax":
        raise LayoutError("cross-entropy needs a softmax output layer")
    labels = np.asarray(labels)
    layers, acts, pre = _forward_cached(spec, w, x)
    z = pre[-1]
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    grad, _ = _backward(layers, acts, pre, g / n)
    return float(loss), grad


def sgd_step(w: np.ndarray, grad: np.ndarray, opt: OptimizerState) -> np.ndarray:
    """Plain SGD with decoupled L2 decay: ``w - lr*grad - lr*decay*w``.

    Returns a new vector and bumps ``opt.step_count``.
    """
    w = np.asarray(w)
    grad = np.asarray(grad)
    if w.shape != grad.shape:
        raise LayoutError(f"weights {w.shape} and gradient {grad.shape} differ in layout")
    lr = opt.learning_rate
    new = w - lr * grad - (lr * opt.weight_decay) * w
    if not np.all(np.isfinite(new)):
        raise NonFiniteWeightsError(f"SGD step {opt.step_count} produced non-finite weights")
    opt.step_count += 1
    return new.astype(w.dtype, copy=False)
