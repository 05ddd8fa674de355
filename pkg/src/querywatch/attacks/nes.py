"""Label-only NES: antithetic Gaussian gradient estimates from class-proportion
scores, driven by a shrinking l-inf projection from a target-class seed."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .blinding import blind_batch_queries, random_directions, softlabel_extrapolate
from .oracle import AttackTrace, Oracle, OracleBanned, make_trace, linf


@dataclass(frozen=True)
class NesParams:
    sigma: float = 0.001
    n: int = 4
    s: int = 50
    mu: float = 0.001
    learning_rate: float = 0.01
    epsilon: float = 0.05
    max_queries: int = 20000
    # None samples the l-inf ball of radius mu; otherwise a TransformSpec or Blinder
    blinding: object = None
    decay: float = 0.1  # fractional shrink of the l-inf bound per accepted step
    min_decay: float = 1e-3
    # soft-label mode: scores come from extrapolated soft labels instead of samples
    soft: bool = False
    extrapolation: tuple[float, float, int] = (3.0, 0.05, 1)  # (d, step, trials)
    shared_directions: bool = False  # True: one direction set per gradient estimate

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ValueError("n must be an even number >= 2 (antithetic pairs)")
        for name in ("sigma", "s", "mu", "learning_rate", "decay", "min_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.max_queries < 0:
            raise ValueError("max_queries must be nonnegative")


def ball_sampler(mu: float) -> Callable:
    def sample(points, rng):
        return np.clip(points + rng.uniform(-mu, mu, points.shape), 0.0, 1.0)
    return sample


def blinding_sampler(blinding, shape) -> Callable:
    def sample(points, rng):
        return blind_batch_queries(blinding, points, rng, shape)
    return sample


def estimate_score(oracle: Oracle, point, s: int, sampler: Callable, rng: np.random.Generator) -> np.ndarray:
    """Class proportions among the labels of ``s`` sampled neighbours of ``point``."""
    point = np.asarray(point, dtype=np.float64)
    samples = sampler(np.repeat(point[None, :], s, axis=0), rng)
    labels = oracle.hard_batch(samples)
    return np.bincount(labels, minlength=oracle.n_classes)[:oracle.n_classes] / float(s)


def nes_gradient_from_scores(score_fn: Callable, x, n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Antithetic NES estimate (1 / (n sigma)) * sum_i score(x + sigma d_i) d_i."""
    x = np.asarray(x, dtype=np.float64)
    half = rng.standard_normal((n // 2, x.size))
    deltas = np.concatenate([half, -half])
    scores = np.array([score_fn(x + sigma * d) for d in deltas])
    return (scores[:, None] * deltas).sum(axis=0) / (n * sigma)


def nes_gradient(oracle: Oracle, x, target: int, params: NesParams, rng: np.random.Generator,
                 sampler: Callable | None = None) -> np.ndarray:
    """Gradient of the target-class score; costs exactly n * s hard-label queries."""
    sampler = sampler if sampler is not None else ball_sampler(params.mu)
    return nes_gradient_from_scores(
        lambda p: estimate_score(oracle, p, params.s, sampler, rng)[target],
        x, params.n, params.sigma, rng)


def _soft_score_fn(oracle, target, params, rng, dim):
    """Extrapolated target probability.  With ``shared_directions`` every call
    within one gradient estimate reuses the same directions so their errors
    largely cancel; otherwise each call draws its own."""
    d, step, trials = params.extrapolation
    dirs = random_directions(trials, dim, rng) if params.shared_directions else None
    return lambda p: softlabel_extrapolate(oracle, p, d, step, trials, rng, clip=True, directions=dirs)[target]


def _project(point, x, eps):
    return np.clip(np.clip(point, x - eps, x + eps), 0.0, 1.0)


def nes_attack(oracle: Oracle, x, target: int, seed_image, params: NesParams = NesParams(),
               rng: np.random.Generator | None = None, shape=None) -> AttackTrace:
    """Targeted label-only NES.

    Starts from ``seed_image`` (already classified as ``target``) and
    alternates gradient estimation with a sign step projected onto an l-inf
    ball around ``x`` whose radius shrinks by ``decay`` whenever the
    candidate keeps the target label.  A rejected candidate halves ``decay``
    (floored at ``min_decay``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    start = oracle.queries
    log: list = []
    if params.max_queries == 0:
        return make_trace(False, oracle, start, seed_image, x, "no query budget", log)
    if params.soft:
        score_fn = None  # fresh directions per gradient estimate
    else:
        sampler = ball_sampler(params.mu) if params.blinding is None else blinding_sampler(params.blinding, shape)
        score_fn = lambda p: estimate_score(oracle, p, params.s, sampler, rng)[target]  # noqa: E731

    def label_of(img):
        if params.soft:
            d, step, trials = params.extrapolation
            return int(np.argmax(softlabel_extrapolate(oracle, img, d, step, trials, rng, clip=True)))
        return int(oracle.hard_batch(blind_batch_queries(params.blinding, img[None, :], rng, shape))[0])

    adv = np.asarray(seed_image, dtype=np.float64).copy()
    eps_cur = linf(adv, x)
    decay = params.decay
    try:
        if label_of(adv) != target:
            return make_trace(False, oracle, start, adv, x, "seed not classified as target", log)
        while eps_cur > params.epsilon + 1e-12:
            if oracle.queries - start >= params.max_queries:
                return make_trace(False, oracle, start, adv, x, "query budget exhausted", log)
            fn = score_fn if score_fn is not None else _soft_score_fn(oracle, target, params, rng, x.size)
            grad = nes_gradient_from_scores(fn, adv, params.n, params.sigma, rng)
            step = params.learning_rate * np.sign(grad)
            eps_new = max(params.epsilon, eps_cur * (1.0 - decay))
            cand = _project(adv + step, x, eps_new)
            if label_of(cand) == target:
                adv, eps_cur = cand, eps_new
                log.append(("accept", oracle.queries - start, eps_cur))
            else:
                decay = max(params.min_decay, decay / 2.0)
                # still try to climb the score at the current radius
                if np.any(step):
                    cand = _project(adv + step, x, eps_cur)
                    if label_of(cand) == target:
                        adv = cand
                log.append(("reject", oracle.queries - start, eps_cur))
    except OracleBanned:
        return make_trace(False, oracle, start, adv, x, "banned", log)
    return make_trace(True, oracle, start, adv, x, "", log)
