"""Decision-based boundary attack (targeted, hard labels)."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .blinding import blind_batch_queries
from .oracle import AttackTrace, Oracle, OracleBanned, linf, make_trace


@dataclass(frozen=True)
class BoundaryParams:
    epsilon: float = 0.05
    max_queries: int = 20000
    orthogonal_step: float = 0.01  # relative to the current l2 distance
    inward_step: float = 0.01
    window: int = 25
    stall: float = 1e-7
    blinding: object = None

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.window < 1:
            raise ValueError("window must be positive")


def orthogonal_step(x, adv, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Random step orthogonal to (x - adv), renormalized onto the sphere
    around ``x`` through ``adv`` (no clipping)."""
    diff = adv - x
    dist = np.linalg.norm(diff)
    r = rng.standard_normal(adv.shape)
    if dist > 0:
        unit = diff / dist
        r -= (r @ unit) * unit
        r *= delta * dist / max(np.linalg.norm(r), 1e-300)
    cand = adv + r
    off = cand - x
    norm = np.linalg.norm(off)
    return x + off * (dist / norm) if norm > 0 else cand


def _adapt(rate: float) -> float:
    return 1.1 if rate > 0.5 else 0.9 if rate < 0.5 else 1.0


def inward_step(x, adv, eps: float) -> np.ndarray:
    return adv + eps * (x - adv)


def boundary_attack(oracle: Oracle, x, target: int, seed_image, params: BoundaryParams = BoundaryParams(),
                    rng: np.random.Generator | None = None, shape=None) -> AttackTrace:
    """Alternate boundary-following and inward steps.  Once ``window`` steps
    have been taken, every step rescales both step sizes from their
    acceptance rate over the trailing window.

    Orthogonal candidates are clipped into [0, 1] and into the l-inf box of
    the current iterate, so both l2 and l-inf distortion are nonincreasing.
    Fails when the inward step underflows ``stall``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    start = oracle.queries
    log: list = []
    if params.max_queries == 0:
        return make_trace(False, oracle, start, seed_image, x, "no query budget", log)

    def is_target(img) -> bool:
        q = blind_batch_queries(params.blinding, img[None, :], rng, shape)
        return int(oracle.hard_batch(q)[0]) == target

    adv = np.asarray(seed_image, dtype=np.float64).copy()
    delta, eps = params.orthogonal_step, params.inward_step
    orth_hist: deque = deque(maxlen=params.window)
    in_hist: deque = deque(maxlen=params.window)
    try:
        if not is_target(adv):
            return make_trace(False, oracle, start, adv, x, "seed not classified as target", log)
        while linf(adv, x) > params.epsilon:
            if oracle.queries - start >= params.max_queries:
                return make_trace(False, oracle, start, adv, x, "query budget exhausted", log)
            if eps < params.stall:
                return make_trace(False, oracle, start, adv, x, "stalled", log)
            box = linf(adv, x)
            cand = np.clip(orthogonal_step(x, adv, delta, rng), np.maximum(x - box, 0.0), np.minimum(x + box, 1.0))
            ok = is_target(cand)
            orth_hist.append(ok)
            if ok:
                adv = cand
            cand = inward_step(x, adv, eps)
            ok = is_target(cand)
            in_hist.append(ok)
            if ok:
                adv = cand
            if len(orth_hist) == params.window:
                delta *= _adapt(np.mean(orth_hist))
                eps *= _adapt(np.mean(in_hist))
            log.append((oracle.queries - start, float(np.linalg.norm(adv - x)), linf(adv, x)))
    except OracleBanned:
        return make_trace(False, oracle, start, adv, x, "banned", log)
    return make_trace(True, oracle, start, adv, x, "", log)
