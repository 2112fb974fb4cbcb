"""Scoring at desk scale.

A small softmax classifier, trained once per dataset and then frozen, plays
the part of the Inception network: every architecture is scored against the
same oracle. The Fréchet distance is taken directly in sample space.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .datasets import LabeledSet, MixtureSpec, make_ring_mixture
from .errors import ClassifierGateError

log = logging.getLogger(__name__)

KL_EPS = 1e-12
FRECHET_RIDGE = 1e-6
ACCURACY_GATE = 0.95


@dataclass
class FrozenClassifier:
    spec: nn.NetSpec
    weights: np.ndarray
    accuracy: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.weights.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return self.spec.n_out

    def predict_proba(self, x) -> np.ndarray:
        return nn.forward(self.spec, self.weights, np.asarray(x, dtype=np.float64))

    def save(self, path) -> None:
        np.savez(path, weights=self.weights, layer_sizes=np.array(self.spec.layer_sizes),
                 accuracy=self.accuracy)

    @classmethod
    def load(cls, path) -> "FrozenClassifier":
        with np.load(path) as z:
            spec = nn.NetSpec(tuple(int(s) for s in z["layer_sizes"]), "softmax")
            return cls(spec, z["weights"], float(z["accuracy"]))


def fit_classifier(train: LabeledSet, held_out: LabeledSet, n_classes: int, seed=0,
                   hidden=(32,), steps=2000, lr=0.5, batch=256,
                   gate: float | None = ACCURACY_GATE) -> FrozenClassifier:
    """Minibatch SGD on cross-entropy, then freeze and check held-out accuracy."""
    x = np.asarray(train.points, dtype=np.float64)
    spec = nn.NetSpec((x.shape[1], *hidden, n_classes), "softmax")
    w = nn.init_params(spec, [seed, 0xC1F])
    opt = nn.OptimizerState(lr)
    rng = np.random.default_rng([seed, 0xC1F, 1])
    for _ in range(steps):
        idx = rng.integers(0, len(x), size=min(batch, len(x)))
        _, g = nn.xent_loss_and_grad(spec, w, x[idx], train.labels[idx])
        w = nn.sgd_step(w, g, opt)
    pred = nn.forward(spec, w, np.asarray(held_out.points, dtype=np.float64)).argmax(axis=1)
    acc = float((pred == held_out.labels).mean())
    if gate is not None and acc < gate:
        raise ClassifierGateError(f"held-out accuracy {acc:.3f} below gate {gate}")
    log.info("scoring classifier frozen at held-out accuracy %.4f", acc)
    return FrozenClassifier(spec, w, acc, {"steps": steps, "lr": lr, "hidden": list(hidden)})


def classifier_for_mixture(mix: MixtureSpec, n_train: int = 4000, n_held_out: int = 2000,
                           gate: float | None = ACCURACY_GATE) -> FrozenClassifier:
    train = make_ring_mixture(MixtureSpec(mix.k, mix.ring_radius, mix.sigma, [mix.seed, 101]), n_train)
    held = make_ring_mixture(MixtureSpec(mix.k, mix.ring_radius, mix.sigma, [mix.seed, 202]), n_held_out)
    return fit_classifier(train, held, mix.k, seed=mix.seed, gate=gate)


# --- inception-score analogue ----------------------------------------------

def proxy_is_from_probs(probs) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))`` for a matrix of class conditionals."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("need at least one row of class probabilities")
    marginal = p.mean(axis=0)
    kl = (p * (np.log(np.maximum(p, KL_EPS)) - np.log(np.maximum(marginal, KL_EPS)))).sum(axis=1)
    return float(np.exp(kl.mean()))


def proxy_is(samples, clf: FrozenClassifier) -> float:
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("proxy inception score of an empty sample set")
    return proxy_is_from_probs(clf.predict_proba(samples))


# --- Fréchet distance --------------------------------------------------------

def sqrtm_2x2(m) -> np.ndarray:
    """Principal square root of a 2x2 matrix with nonnegative real eigenvalues.

    Uses sqrt(M) = (M + s I) / t with s = sqrt(det M), t = sqrt(tr M + 2 s).
    """
    m = np.asarray(m, dtype=np.float64)
    s = math.sqrt(max(np.linalg.det(m), 0.0))
    t = math.sqrt(max(np.trace(m) + 2.0 * s, 0.0))
    if t == 0.0:
        return np.zeros((2, 2))
    return (m + s * np.eye(2)) / t


def _fit(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("Fréchet distance needs at least two samples per set")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def _regularize(c):
    if np.linalg.eigvalsh(c)[0] <= 0.0:
        return c + FRECHET_RIDGE * np.eye(len(c))
    return c


def frechet_from_moments(mu1, c1, mu2, c2) -> float:
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    c1, c2 = _regularize(np.asarray(c1, float)), _regularize(np.asarray(c2, float))
    if c1.shape == (2, 2):
        prod = c1 @ c2
        tr_sqrt = math.sqrt(max(np.trace(prod) + 2.0 * math.sqrt(max(np.linalg.det(prod), 0.0)), 0.0))
    else:
        # Tr sqrt(C1 C2) = Tr sqrt(C1^1/2 C2 C1^1/2), symmetric so eigh applies
        vals, vecs = np.linalg.eigh(c1)
        root = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
        tr_sqrt = float(np.sqrt(np.maximum(np.linalg.eigvalsh(root @ c2 @ root), 0.0)).sum())
    trace_term = float(np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)
    if trace_term < 0.0:
        if trace_term < -1e-9:
            warnings.warn(f"negative Fréchet trace term {trace_term:.3g} clipped to 0", RuntimeWarning)
        trace_term = 0.0
    return float(((mu1 - mu2) ** 2).sum() + trace_term)


def frechet_2d(real, fake) -> float:
    mu_r, c_r = _fit(real)
    mu_f, c_f = _fit(fake)
    if c_r.shape != (2, 2) or c_f.shape != (2, 2):
        raise ValueError("frechet_2d expects 2-D points")
    return frechet_from_moments(mu_r, c_r, mu_f, c_f)


def frechet_distance(real, fake) -> float:
    """Any dimension; the 2-D case goes through the closed form."""
    mu_r, c_r = _fit(real)
    mu_f, c_f = _fit(fake)
    return frechet_from_moments(mu_r, c_r, mu_f, c_f)


# --- diversity and stability -------------------------------------------------

def mode_counts(samples, mixture: MixtureSpec) -> np.ndarray:
    """Samples per mode, counting only points within 3 sigma of their nearest center."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    counts = np.zeros(mixture.k, dtype=np.int64)
    if len(samples) == 0:
        return counts
    centers = mixture.centers()
    d = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    nearest = d.argmin(axis=1)
    close = d[np.arange(len(samples)), nearest] <= 3.0 * mixture.sigma
    np.add.at(counts, nearest[close], 1)
    return counts


def default_min_count(n_samples: int) -> int:
    # 10 per 1000 samples
    return max(1, int(round(10 * n_samples / 1000)))


def mode_coverage(samples, mixture: MixtureSpec, min_count: int | None = None) -> int:
    samples = np.asarray(samples).reshape(-1, 2)
    if min_count is None:
        min_count = default_min_count(len(samples))
    return int((mode_counts(samples, mixture) >= min_count).sum())


def class_coverage(samples, clf: FrozenClassifier, min_count: int | None = None) -> tuple[int, np.ndarray]:
    """Coverage for image data: classes predicted at least ``min_count`` times."""
    samples = np.asarray(samples)
    counts = np.zeros(clf.n_classes, dtype=np.int64)
    if len(samples):
        np.add.at(counts, clf.predict_proba(samples).argmax(axis=1), 1)
    if min_count is None:
        min_count = default_min_count(len(samples))
    return int((counts >= min_count).sum()), counts


def stability(fids) -> float:
    fids = list(fids)
    if not fids:
        raise ValueError("stability of an empty score list")
    return float(max(fids) - min(fids))


# --- complexity --------------------------------------------------------------

@dataclass
class CostInputs:
    epochs: int
    batch_size: int
    object_counts: list  # D_i_o, objects held by each client
    model_sizes: object  # |w| scalar, per client (N,), or per client and model (N, X*Y)
    X: int = 1
    Y: int = 1
    object_size: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.X < 1 or self.Y < 1:
            raise ValueError("cost inputs must be positive")
        if any(c <= 0 for c in self.object_counts):
            raise ValueError("every client must hold at least one object")


def cost_model(c: CostInputs, arch: str) -> tuple[float, float]:
    """Compute and space estimates from the complexity table.

    FLGAN keeps one model per client; MULTI-FLGAN keeps ``X*Y`` per client.
    """
    n = len(c.object_counts)
    counts = np.asarray(c.object_counts, dtype=np.float64)
    k = 1 if arch in ("FLGAN", "AFLGAN") else c.X * c.Y
    sizes = np.asarray(c.model_sizes, dtype=np.float64)
    if sizes.ndim == 0:
        sizes = np.full((n, k), float(sizes))
    elif sizes.ndim == 1:
        sizes = np.repeat(sizes[:, None], k, axis=1)
    if sizes.shape != (n, k):
        raise ValueError(f"model sizes must broadcast to ({n}, {k}), got {sizes.shape}")
    compute = c.epochs * c.batch_size * float((sizes / counts[:, None]).sum())
    space = float(sizes.sum())
    return compute, space
