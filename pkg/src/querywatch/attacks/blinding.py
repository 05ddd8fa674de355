"""Query blinding: randomized preprocessing of attack queries, soft-label
extrapolation, and diversity filtering of candidate queries."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import transforms as tf
from ..models import Blinder, blind_batch
from .oracle import Oracle


def _identity_reveal(labels):
    return labels[0]


def blind_query(blinding, x, rng: np.random.Generator, shape=None):
    """Return ``(queries, reveal)``: the images to send and how to read the answer back.

    ``blinding`` is None, a :class:`TransformSpec` or a :class:`Blinder`; all
    of these send exactly one query and reveal the returned label unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if blinding is None:
        return [x], _identity_reveal
    if isinstance(blinding, tf.TransformSpec):
        if shape is None:
            raise ValueError("transform blinding needs the image shape")
        return [tf.apply(blinding, x, rng, shape)], _identity_reveal
    if isinstance(blinding, Blinder):
        return [blind_batch(blinding, x[None, :], rng)[0]], _identity_reveal
    raise TypeError(f"unsupported blinding {type(blinding).__name__}")


def blind_batch_queries(blinding, xs, rng: np.random.Generator, shape=None) -> np.ndarray:
    """Vectorized :func:`blind_query` for single-query blindings."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if blinding is None:
        return xs.copy()
    if isinstance(blinding, tf.TransformSpec):
        return tf.apply_batch(blinding, xs, rng, shape)
    if isinstance(blinding, Blinder):
        return blind_batch(blinding, xs, rng)
    raise TypeError(f"unsupported blinding {type(blinding).__name__}")


def extrapolation_queries(x, d: float, step: float, direction) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(direction, dtype=np.float64)
    r = r / np.linalg.norm(r)
    return x + d * r, x + (d + step) * r


def extrapolate(y0, y1, d: float, step: float):
    return y0 + (d / step) * (y0 - y1)


def random_directions(trials: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    dirs = rng.standard_normal((trials, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def softlabel_extrapolate(oracle: Oracle, x, d: float, step: float, trials: int,
                          rng: np.random.Generator, clip: bool = False, directions=None) -> np.ndarray:
    """Estimate the soft label at ``x`` from pairs of far-away queries.

    Each trial picks a random unit direction r, queries x + d r and
    x + (d + step) r and extrapolates linearly back to x.  The average over
    trials is projected onto the probability simplex (negatives zeroed,
    renormalized).  With ``clip`` the queries are clipped to [0, 1], which is
    what a real endpoint requires but breaks exactness on linear oracles.
    Passing fixed ``directions`` (one per trial) lets several estimates share
    their extrapolation error.
    """
    x = np.asarray(x, dtype=np.float64)
    if directions is None:
        if trials < 1:
            raise ValueError("trials must be >= 1")
        dirs = random_directions(trials, x.size, rng)
    else:
        dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        trials = len(dirs)
    near = x + d * dirs
    far = x + (d + step) * dirs
    if clip:
        near, far = np.clip(near, 0.0, 1.0), np.clip(far, 0.0, 1.0)
    ys = oracle.soft_batch(np.concatenate([near, far]))
    est = extrapolate(ys[:trials], ys[trials:], d, step).mean(axis=0)
    return project_simplex(est)


def raw_extrapolate(y0, y1, d, step):
    """Unprojected estimate (for exactness checks)."""
    return extrapolate(np.asarray(y0, dtype=np.float64), np.asarray(y1, dtype=np.float64), d, step)


def project_simplex(p) -> np.ndarray:
    p = np.maximum(np.asarray(p, dtype=np.float64), 0.0)
    total = p.sum()
    if total <= 0:
        return np.full_like(p, 1.0 / len(p))
    return p / total


# --- diversity ----------------------------------------------------------------

def attacker_kdistance(history, candidate, k: int) -> float:
    history = np.asarray(history, dtype=np.float64)
    if len(history) == 0:
        return np.inf
    d = np.linalg.norm(history - np.asarray(candidate), axis=1)
    m = min(k, len(d))
    return float(np.sort(d)[:m].mean())


def diversity_greedy(history, candidate_generator: Callable[[], np.ndarray], tau: float,
                     k: int, max_resamples: int):
    """Draw candidates until one sits at image-space k-distance >= tau from history.

    Returns ``(candidate, resamples)``; when the budget runs out the farthest
    candidate seen is returned.
    """
    best, best_d = None, -np.inf
    resamples = 0
    while True:
        cand = candidate_generator()
        dist = attacker_kdistance(history, cand, k)
        if dist >= tau:
            return cand, resamples
        if dist > best_d:
            best, best_d = cand, dist
        if resamples >= max_resamples:
            return best, resamples
        resamples += 1


def conflict_graph(candidates, tau: float) -> list[set[int]]:
    x = np.asarray(candidates, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    close = np.sqrt(np.maximum(d2, 0.0)) < tau
    np.fill_diagonal(close, False)
    return [set(np.nonzero(row)[0].tolist()) for row in close]


def sequential_greedy(adj: list[set[int]]) -> list[int]:
    """Accept nodes in index order whenever they conflict with nothing accepted."""
    chosen: list[int] = []
    blocked: set[int] = set()
    for v in range(len(adj)):
        if v not in blocked:
            chosen.append(v)
            blocked |= adj[v]
    return chosen


def min_degree_greedy(adj: list[set[int]]) -> list[int]:
    """Repeatedly take a minimum-degree vertex of the remaining graph (lowest index on ties)."""
    alive = set(range(len(adj)))
    chosen = []
    while alive:
        v = min(alive, key=lambda u: (len(adj[u] & alive), u))
        chosen.append(v)
        alive -= adj[v] | {v}
    return sorted(chosen)


def _improve_swaps(adj: list[set[int]], chosen: list[int]) -> list[int]:
    """(1,2)-swap local search: drop one vertex and add two that become free."""
    sol = set(chosen)
    n = len(adj)
    improved = True
    while improved:
        improved = False
        for v in sorted(sol):
            # vertices outside sol whose only conflict in sol is v
            free = [u for u in range(n) if u not in sol and (adj[u] & sol) == {v}]
            for i, a in enumerate(free):
                for b in free[i + 1:]:
                    if b not in adj[a]:
                        sol = (sol - {v}) | {a, b}
                        # anything else now unblocked
                        for w in range(n):
                            if w not in sol and not (adj[w] & sol):
                                sol.add(w)
                        improved = True
                        break
                if improved:
                    break
            if improved:
                break
    return sorted(sol)


def diversity_independent_set(candidates, tau: float) -> list[int]:
    """Indices of a large subset of ``candidates`` with all pairwise l2 distances >= tau.

    The larger of the minimum-degree and sequential greedy sets, then
    (1,2)-swap improvement.  Swaps only grow the set, so the result is never
    smaller than either greedy.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if len(candidates) == 0:
        raise ValueError("need at least one candidate")
    adj = conflict_graph(candidates, tau)
    start = max(min_degree_greedy(adj), sequential_greedy(adj), key=len)
    return _improve_swaps(adj, start)
