"""Query interfaces the attacks talk to, and the per-attack trace record."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx


class OracleBanned(Exception):
    """The oracle refused a query and no fresh account is available."""


class Oracle:
    """Hard-label (and optionally soft-label) access to a classifier.

    Subclasses implement ``_hard_batch`` / ``_soft_batch``; the public methods
    count exactly one query per image.
    """

    n_classes: int
    soft_enabled: bool = False

    def __init__(self):
        self.queries = 0

    def hard(self, x) -> int:
        return int(self.hard_batch(np.asarray(x)[None, :])[0])

    def soft(self, x) -> np.ndarray:
        return self.soft_batch(np.asarray(x)[None, :])[0]

    def hard_batch(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        out = self._hard_batch(xs)
        self.queries += len(xs)
        return out

    def soft_batch(self, xs) -> np.ndarray:
        if not self.soft_enabled:
            raise PermissionError("soft-label queries are disabled for this oracle")
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        out = self._soft_batch(xs)
        self.queries += len(xs)
        return out

    def _hard_batch(self, xs):  # pragma: no cover - interface
        raise NotImplementedError

    def _soft_batch(self, xs):  # pragma: no cover - interface
        raise NotImplementedError


class ModelOracle(Oracle):
    """Undefended access to a trained classifier."""

    def __init__(self, model: nx.NetModel, soft: bool = False):
        super().__init__()
        self.model = model
        self.n_classes = model.out_dim
        self.soft_enabled = soft

    def _hard_batch(self, xs):
        return np.argmax(nx.predict(self.model, xs), axis=1)

    def _soft_batch(self, xs):
        return nx.softmax(nx.predict(self.model, xs))


class FunctionOracle(Oracle):
    """Wraps plain callables (used for analytic test oracles)."""

    def __init__(self, n_classes: int, hard_fn=None, soft_fn=None):
        super().__init__()
        self.n_classes = n_classes
        self._hard_fn = hard_fn
        self._soft_fn = soft_fn
        self.soft_enabled = soft_fn is not None

    def _hard_batch(self, xs):
        if self._hard_fn is None:
            return np.argmax(self._soft_fn(xs), axis=1)
        return np.asarray(self._hard_fn(xs))

    def _soft_batch(self, xs):
        return np.asarray(self._soft_fn(xs))


@dataclass
class AttackTrace:
    success: bool
    queries: int
    final: np.ndarray | None
    linf: float
    l2: float = float("nan")
    detections: int = 0
    raw_detections: int = 0
    reason: str = ""
    log: list = field(default_factory=list)

    @property
    def accounts(self) -> int:
        return self.detections + 1

    def to_record(self) -> str:
        rec = {k: getattr(self, k) for k in ("success", "queries", "linf", "l2", "detections",
                                             "raw_detections", "reason")}
        rec["steps"] = len(self.log)
        return json.dumps(rec, sort_keys=True)

    @staticmethod
    def from_record(line: str) -> dict:
        return json.loads(line)


def linf(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def make_trace(success, oracle: Oracle, start_queries: int, final, x, reason="", log=None) -> AttackTrace:
    final = None if final is None else np.asarray(final)
    dist_inf = linf(final, x) if final is not None else float("inf")
    dist_2 = float(np.linalg.norm(final - x)) if final is not None else float("inf")
    return AttackTrace(bool(success), oracle.queries - start_queries, final, dist_inf, dist_2,
                       reason=reason, log=log if log is not None else [])
