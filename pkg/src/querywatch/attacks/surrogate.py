"""White-box attacks on a local model (FGSM, margin PGD) and the hybrid
query/surrogate attack built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..models import ClassifierConfig, Dataset, train_classifier
from .oracle import AttackTrace, Oracle, OracleBanned, make_trace


def input_gradient(model: nx.NetModel, x, label: int) -> np.ndarray:
    """d cross-entropy(label) / d x for a single image."""
    acts = nx.forward(model, np.asarray(x, dtype=np.float64)[None, :])
    g = nx.softmax(acts[-1])
    g[0, label] -= 1.0
    _, gx = nx.backward(model, acts, g)
    return gx[0]


def fgsm(model: nx.NetModel, x, label: int, eps: float) -> np.ndarray:
    """One signed-gradient step increasing the loss of ``label``."""
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    return np.clip(x + eps * np.sign(input_gradient(model, x, label)), 0.0, 1.0)


def margin(logits, target: int) -> float:
    others = np.delete(logits, target)
    return float(logits[target] - others.max())


def pgd_margin(model: nx.NetModel, x, target: int, eps: float, kappa: float, steps: int = 100,
               step_size: float | None = None) -> np.ndarray:
    """Signed-gradient ascent on logit[target] - max other logit inside the
    l-inf ball, stopping as soon as the margin exceeds ``kappa``."""
    x = np.asarray(x, dtype=np.float64)
    step_size = step_size if step_size is not None else 2.5 * eps / max(steps, 1)
    lo, hi = np.maximum(x - eps, 0.0), np.minimum(x + eps, 1.0)
    adv = x.copy()
    for _ in range(steps):
        acts = nx.forward(model, adv[None, :])
        logits = acts[-1][0]
        if margin(logits, target) > kappa:
            break
        rival = int(np.argmax(np.where(np.arange(len(logits)) == target, -np.inf, logits)))
        g = np.zeros_like(acts[-1])
        g[0, target], g[0, rival] = 1.0, -1.0
        _, gx = nx.backward(model, acts, g)
        adv = np.clip(adv + step_size * np.sign(gx[0]), lo, hi)
    return adv


@dataclass(frozen=True)
class HybridParams:
    far: float = 0.09   # D: per-coordinate perturbation magnitude lower bound
    near: float = 0.01  # d
    n: int = 500  # queried far points
    m: int = 500  # unqueried near points
    epsilon: float = 0.05
    kappa: float = 100.0
    pgd_steps: int = 100
    surrogate: ClassifierConfig = ClassifierConfig(optim=nx.OptimConfig(learning_rate=0.005, momentum=0.9,
                                                                         batch_size=32, epochs=50))

    def __post_init__(self):
        if self.n < 1 or self.m < 0:
            raise ValueError("need n >= 1 and m >= 0")
        if not 0.0 <= self.near <= self.far <= 1.0:
            raise ValueError("need 0 <= near <= far <= 1")


def far_samples(x, far: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """x + delta, |delta_i| ~ U(far, 1) with random signs, clipped to [0, 1]."""
    mag = rng.uniform(far, 1.0, (count, x.size))
    sign = rng.choice([-1.0, 1.0], size=(count, x.size))
    return np.clip(x + sign * mag, 0.0, 1.0)


def near_samples(x, near: float, count: int, rng: np.random.Generator) -> np.ndarray:
    mag = rng.uniform(0.0, near, (count, x.size))
    sign = rng.choice([-1.0, 1.0], size=(count, x.size))
    return np.clip(x + sign * mag, 0.0, 1.0)


def hybrid_surrogate_attack(oracle: Oracle, x, label: int, params: HybridParams = HybridParams(),
                            rng: np.random.Generator | None = None, shape=None) -> AttackTrace:
    """Untargeted: query n far points, label m unqueried near points as
    ``label``, fit a fresh surrogate, attack it towards its runner-up class
    and spend one query to verify the transfer."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    start = oracle.queries
    try:
        xf = far_samples(x, params.far, params.n, rng)
        yf = oracle.hard_batch(xf)
        xn = near_samples(x, params.near, params.m, rng)
        images = np.concatenate([xf, xn])
        labels = np.concatenate([yf, np.full(params.m, label, dtype=np.int64)])
        if len(np.unique(labels)) < 2:
            return make_trace(False, oracle, start, x, x, "degenerate surrogate data")
        shape = shape if shape is not None else (1, 1, x.size)
        data = Dataset(images, labels, oracle.n_classes, tuple(shape))
        net = train_classifier(data, params.surrogate, rng)
        logits = nx.predict(net, x[None, :])[0]
        logits[label] = -np.inf
        target = int(np.argmax(logits))
        adv = pgd_margin(net, x, target, params.epsilon, params.kappa, params.pgd_steps)
        ok = oracle.hard(adv) != label
    except OracleBanned:
        return make_trace(False, oracle, start, x, x, "banned")
    return make_trace(ok, oracle, start, adv, x, "" if ok else "did not transfer", [("target", target)])
