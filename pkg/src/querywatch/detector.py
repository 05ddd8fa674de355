"""Stateful query monitor: per-account encoding buffers, k-NN mean-distance
flagging, buffer reset on detection and delayed ban scheduling.  Also the
threshold calibration and the side-channel / storage arithmetic."""

from __future__ import annotations

import io
import math
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BAN_KINDS = ("immediate", "power-of-two", "geometric")
BUFFER_KINDS = ("query", "time")
METRICS = ("encoder", "raw-l2")

SNAPSHOT_MAGIC = b"QWDS"
SNAPSHOT_VERSION = 1


class AccountBanned(Exception):
    pass


class UnknownAccount(KeyError):
    pass


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class BanPolicy:
    kind: str = "immediate"
    base: float = 1.1  # geometric only
    offset: int = 50

    def __post_init__(self):
        if self.kind not in BAN_KINDS:
            raise ValueError(f"unknown ban policy {self.kind!r}")
        if self.kind == "geometric" and not self.base > 1.0:
            raise ValueError("geometric ban base must exceed 1")


@dataclass(frozen=True)
class BufferPolicy:
    kind: str = "query"
    limit: float = 2000  # entries for "query", hours for "time"

    def __post_init__(self):
        if self.kind not in BUFFER_KINDS:
            raise ValueError(f"unknown buffer policy {self.kind!r}")
        if not self.limit > 0:
            raise ValueError("buffer limit must be positive")


@dataclass(frozen=True)
class DetectorConfig:
    threshold: float
    k: int = 50
    buffer: BufferPolicy = BufferPolicy()
    fpr_target: float = 0.001
    ban: BanPolicy = BanPolicy()
    metric: str = "encoder"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not 0.0 < self.fpr_target < 1.0:
            raise ValueError("fpr_target must lie in (0, 1)")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def storage_dtype(self):
        return np.float16 if self.metric == "encoder" else np.float32


@dataclass(frozen=True)
class DetectionEvent:
    account_id: int
    query_index: int
    distance: float
    timestamp: float

    def to_line(self) -> str:
        return f"{self.account_id}\t{self.query_index}\t{self.distance!r}\t{self.timestamp!r}"

    @classmethod
    def from_line(cls, line: str) -> "DetectionEvent":
        a, q, d, t = line.rstrip("\n").split("\t")
        return cls(int(a), int(q), float(d), float(t))


@dataclass(frozen=True)
class Decision:
    flagged: bool
    distance: float
    query_index: int


class QueryBuffer:
    """Arrival-ordered store of vectors with O(1) amortized append and
    front eviction."""

    def __init__(self, dim: int, dtype=np.float16, capacity: int = 64):
        self.dim = dim
        self.dtype = np.dtype(dtype)
        # values are rounded to ``dtype`` but held in float64 so the distance
        # scan needs no per-query conversion; squared norms are cached
        self._vecs = np.empty((capacity, dim), dtype=np.float64)
        self._sq = np.empty(capacity, dtype=np.float64)
        self._idx = np.empty(capacity, dtype=np.int64)
        self._times = np.empty(capacity, dtype=np.float64)
        self._head = 0
        self._tail = 0

    def __len__(self) -> int:
        return self._tail - self._head

    @property
    def vectors(self) -> np.ndarray:
        return self._vecs[self._head:self._tail]

    @property
    def indices(self) -> np.ndarray:
        return self._idx[self._head:self._tail]

    @property
    def times(self) -> np.ndarray:
        return self._times[self._head:self._tail]

    def append(self, vec, index: int, t: float) -> None:
        if self._tail == len(self._vecs):
            n = len(self)
            if n * 2 > len(self._vecs):
                cap = 2 * len(self._vecs)
                for name in ("_vecs", "_sq", "_idx", "_times"):
                    old = getattr(self, name)
                    new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
                    new[:n] = old[self._head:self._tail]
                    setattr(self, name, new)
            else:
                for name in ("_vecs", "_sq", "_idx", "_times"):
                    arr = getattr(self, name)
                    arr[:n] = arr[self._head:self._tail].copy()
            self._head, self._tail = 0, n
        v = np.asarray(vec, dtype=np.float64).astype(self.dtype).astype(np.float64)
        self._vecs[self._tail] = v
        self._sq[self._tail] = v @ v
        self._idx[self._tail] = index
        self._times[self._tail] = t
        self._tail += 1

    def drop_front(self, count: int) -> None:
        self._head = min(self._tail, self._head + max(0, count))

    def clear(self) -> None:
        self._head = self._tail = 0

    def sq_distances(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        v = self.vectors
        return np.maximum(self._sq[self._head:self._tail] + q @ q - 2.0 * (v @ q), 0.0)

    def evict(self, policy: BufferPolicy, now: float) -> None:
        if policy.kind == "query":
            excess = len(self) - int(policy.limit)
            if excess > 0:
                self.drop_front(excess)
        else:
            horizon = now - policy.limit * 3600.0
            # arrival times are nondecreasing within an account
            self.drop_front(int(np.searchsorted(self.times, horizon, side="left")))


@dataclass
class AccountState:
    account_id: int
    buffer: QueryBuffer
    n_queries: int = 0
    detections: int = 0
    banned: bool = False
    ban_at: int | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


def knn_mean_distance(vectors, query, k: int) -> float:
    """Mean l2 distance from ``query`` to its min(k, n) nearest rows of ``vectors``.

    An empty buffer yields +inf.  Only the multiset of distances matters for
    the mean, so tie order among equidistant neighbours cannot change it.
    """
    vectors = np.asarray(vectors)
    if len(vectors) == 0:
        return math.inf
    diff = vectors.astype(np.float64) - np.asarray(query, dtype=np.float64)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    m = min(k, len(dist))
    if m < len(dist):
        dist = np.partition(dist, m - 1)[:m]
    return float(dist.mean())


def nearest_neighbors(vectors, indices, query, k: int) -> np.ndarray:
    """Arrival indices of the k nearest rows; ties go to the earlier arrival."""
    diff = np.asarray(vectors, dtype=np.float64) - np.asarray(query, dtype=np.float64)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((np.asarray(indices), dist))
    return np.asarray(indices)[order[:k]]


def apply_ban_policy(policy: BanPolicy, index: int) -> int:
    """Query index after which the account is refused service."""
    if index < 1:
        raise ValueError("query index is 1-based")
    if policy.kind == "immediate":
        return index
    if policy.kind == "power-of-two":
        return 1 << (index - 1).bit_length()
    i = 1
    while _geometric_point(policy, i) < index:
        i += 1
    return _geometric_point(policy, i)


def _geometric_point(policy: BanPolicy, i: int) -> int:
    # round first: 50 * 1.1 is 55.000000000000007 in binary floating point
    return math.ceil(round(policy.offset * policy.base ** i, 9))


def process_query(state: AccountState, vector, config: DetectorConfig, now: float) -> Decision:
    """Run one query through the account's buffer (caller holds the account lock)."""
    index = state.n_queries + 1
    if state.banned or (state.ban_at is not None and index > state.ban_at):
        state.banned = True
        raise AccountBanned(state.account_id)
    state.n_queries = index
    buf = state.buffer
    buf.evict(config.buffer, now)
    stored = np.asarray(vector, dtype=np.float64).astype(buf.dtype).astype(np.float64)
    if len(buf):
        d = np.sqrt(buf.sq_distances(stored))
        m = min(config.k, len(d))
        dist = float((np.partition(d, m - 1)[:m] if m < len(d) else d).mean())
    else:
        dist = math.inf
    flagged = len(buf) >= config.k and dist < config.threshold
    if flagged:
        state.detections += 1
        buf.clear()
        ban = apply_ban_policy(config.ban, index)
        state.ban_at = ban if state.ban_at is None else min(state.ban_at, ban)
    else:
        buf.append(stored, index, now)
        buf.evict(config.buffer, now)  # keep at most N at rest, not N + 1
    return Decision(bool(flagged), dist, index)


# --- calibration ----------------------------------------------------------------

def kdistance_stream(vectors, ks, buffer: BufferPolicy = BufferPolicy("query", 2000),
                     block: int = 256) -> dict[int, np.ndarray]:
    """k-distance of every streamed vector against its predecessors (no clearing).

    Only positions with at least k predecessors in the buffer contribute to k's
    sequence.  Time-bounded buffers are treated as unbounded here: a
    calibration stream has no wall clock.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = len(x)
    ks = sorted(set(int(k) for k in ks))
    kmax = ks[-1]
    cap = int(buffer.limit) if buffer.kind == "query" else n
    sq = np.einsum("ij,ij->i", x, x)
    out = {k: [] for k in ks}
    for s in range(0, n, block):
        e = min(n, s + block)
        lo = max(0, s - cap)
        d2 = sq[s:e, None] + sq[None, lo:e] - 2.0 * x[s:e] @ x[lo:e].T
        dist = np.sqrt(np.maximum(d2, 0.0))
        for r, i in enumerate(range(s, e)):
            a = max(lo, i - cap)
            row = dist[r, a - lo:i - lo]
            if len(row) < ks[0]:
                continue
            m = min(kmax, len(row))
            near = np.sort(np.partition(row, m - 1)[:m])
            csum = np.cumsum(near)
            for k in ks:
                if k <= len(row):
                    out[k].append(csum[k - 1] / k)
    return {k: np.asarray(v) for k, v in out.items()}


def threshold_from_kdistances(kd: np.ndarray, fpr: float) -> float:
    """The ``floor(fpr * n)``-th smallest k-distance (0-based).

    With strict ``<`` flagging this flags exactly ``floor(fpr * n)`` of the
    calibration values (ties aside); fpr 0 puts the threshold at the minimum,
    which flags nothing.
    """
    kd = np.sort(np.asarray(kd))
    if len(kd) == 0:
        raise ValueError("no eligible k-distances")
    return float(kd[min(int(math.floor(fpr * len(kd))), len(kd) - 1)])


def _prepare_stream(embed, images, rng, k, fpr):
    images = np.asarray(images)
    if fpr > 0 and len(images) - k < 1.0 / fpr:
        raise ValueError(f"stream of {len(images)} is too short for fpr {fpr} at k={k}")
    order = rng.permutation(len(images))
    return np.asarray(embed(images[order]), dtype=np.float64)


def calibrate_threshold(embed: Callable, images, k: int = 50, fpr: float = 0.001,
                        rng: np.random.Generator | None = None,
                        buffer: BufferPolicy = BufferPolicy()) -> float:
    """Stream a shuffled benign set through a fresh buffer and take the fpr quantile."""
    rng = rng if rng is not None else np.random.default_rng(0)
    vecs = _prepare_stream(embed, images, rng, k, fpr)
    tau = threshold_from_kdistances(kdistance_stream(vecs, [k], buffer)[k], fpr)
    if not tau > 0:
        raise ValueError("degenerate calibration stream (zero threshold)")
    return tau


def k_sweep(embed: Callable, images, ks, fpr: float = 0.001, rng: np.random.Generator | None = None,
            buffer: BufferPolicy = BufferPolicy()) -> list[tuple[int, float]]:
    rng = rng if rng is not None else np.random.default_rng(0)
    vecs = _prepare_stream(embed, images, rng, max(ks), fpr)
    kd = kdistance_stream(vecs, ks, buffer)
    return [(int(k), threshold_from_kdistances(kd[int(k)], fpr)) for k in ks]


def identity_embed(images):
    return np.asarray(images, dtype=np.float64)


# --- monitor --------------------------------------------------------------------

class EventLog:
    """Collects detection events; optionally appends them to a file, one per line."""

    def __init__(self, path=None):
        self.events: list[DetectionEvent] = []
        self.path = path
        self._lock = threading.Lock()

    def append(self, event: DetectionEvent) -> None:
        with self._lock:
            self.events.append(event)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(event.to_line() + "\n")

    @staticmethod
    def read(path) -> list[DetectionEvent]:
        with open(path, encoding="utf-8") as fh:
            return [DetectionEvent.from_line(line) for line in fh if line.strip()]


class Monitor:
    """Account table plus detector.  Different accounts proceed concurrently;
    one account's queries are serialized by its lock."""

    def __init__(self, config: DetectorConfig, embed: Callable, dim: int,
                 log: EventLog | None = None, clock: Callable[[], float] = time.time):
        self.config = config
        self.embed = embed
        self.dim = dim
        self.log = log if log is not None else EventLog()
        self.clock = clock
        self.accounts: dict[int, AccountState] = {}
        self._next_id = 1
        self._table_lock = threading.Lock()

    def create_account(self) -> int:
        with self._table_lock:
            aid = self._next_id
            self._next_id += 1
            self.accounts[aid] = AccountState(aid, QueryBuffer(self.dim, self.config.storage_dtype))
        return aid

    def account(self, account_id: int) -> AccountState:
        try:
            return self.accounts[account_id]
        except KeyError:
            raise UnknownAccount(account_id) from None

    def process(self, account_id: int, image, now: float | None = None) -> Decision:
        vec = np.asarray(self.embed(np.asarray(image)[None, :]))[0]
        return self.process_vector(account_id, vec, now)

    def process_vector(self, account_id: int, vec, now: float | None = None) -> Decision:
        """Like :meth:`process` for a query that is already embedded."""
        state = self.account(account_id)
        with state.lock:
            t = self.clock() if now is None else now
            decision = process_query(state, vec, self.config, t)
            if decision.flagged:
                self.log.append(DetectionEvent(account_id, decision.query_index, decision.distance, t))
        return decision

    def is_banned(self, account_id: int) -> bool:
        state = self.account(account_id)
        return state.banned or (state.ban_at is not None and state.n_queries + 1 > state.ban_at)

    # --- persistence ---

    def dumps(self) -> bytes:
        c = self.config
        buf = io.BytesIO()
        buf.write(struct.pack("<Id", c.k, c.threshold))
        buf.write(struct.pack("<Bd", BUFFER_KINDS.index(c.buffer.kind), float(c.buffer.limit)))
        buf.write(struct.pack("<dBdI", c.fpr_target, BAN_KINDS.index(c.ban.kind), c.ban.base, c.ban.offset))
        buf.write(struct.pack("<BIQI", METRICS.index(c.metric), self.dim, self._next_id, len(self.accounts)))
        for aid in sorted(self.accounts):
            st = self.accounts[aid]
            with st.lock:
                b = st.buffer
                buf.write(struct.pack("<QQQBqI", aid, st.n_queries, st.detections, st.banned,
                                      -1 if st.ban_at is None else st.ban_at, len(b)))
                buf.write(np.ascontiguousarray(b.vectors, dtype=b.dtype.newbyteorder("<")).tobytes())
                buf.write(np.ascontiguousarray(b.indices, dtype="<i8").tobytes())
                buf.write(np.ascontiguousarray(b.times, dtype="<f8").tobytes())
        body = buf.getvalue()
        head = SNAPSHOT_MAGIC + struct.pack("<I", SNAPSHOT_VERSION)
        return head + body + struct.pack("<I", zlib.crc32(head + body))

    @classmethod
    def loads(cls, data: bytes, embed: Callable, log: EventLog | None = None,
              clock: Callable[[], float] = time.time) -> "Monitor":
        if len(data) < 12 or data[:4] != SNAPSHOT_MAGIC:
            raise SnapshotError("not a detector snapshot")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise SnapshotError("snapshot checksum mismatch")
        view = memoryview(data)[:-4]
        try:
            off = 8
            k, tau = struct.unpack_from("<Id", view, off); off += 12
            bk, blim = struct.unpack_from("<Bd", view, off); off += 9
            fpr, pk, base, offset = struct.unpack_from("<dBdI", view, off); off += 21
            mk, dim, next_id, n_acc = struct.unpack_from("<BIQI", view, off); off += 17
            config = DetectorConfig(tau, k, BufferPolicy(BUFFER_KINDS[bk], blim), fpr,
                                    BanPolicy(BAN_KINDS[pk], base, offset), METRICS[mk])
            mon = cls(config, embed, dim, log, clock)
            mon._next_id = next_id
            dtype = np.dtype(config.storage_dtype).newbyteorder("<")
            for _ in range(n_acc):
                aid, nq, det, banned, ban_at, n = struct.unpack_from("<QQQBqI", view, off); off += 37
                vecs = np.frombuffer(view, dtype, n * dim, off).reshape(n, dim); off += n * dim * dtype.itemsize
                idx = np.frombuffer(view, "<i8", n, off); off += 8 * n
                times = np.frombuffer(view, "<f8", n, off); off += 8 * n
                qb = QueryBuffer(dim, config.storage_dtype, max(64, n))
                for v, i, t in zip(vecs, idx, times):
                    qb.append(v, int(i), float(t))
                mon.accounts[aid] = AccountState(aid, qb, nq, det, bool(banned), None if ban_at < 0 else ban_at)
        except (struct.error, ValueError, IndexError) as exc:
            raise SnapshotError(f"corrupt snapshot: {exc}") from None
        if off != len(view):
            raise SnapshotError("trailing bytes in snapshot")
        return mon

    def snapshot(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    @classmethod
    def restore(cls, path, embed: Callable, **kw) -> "Monitor":
        with open(path, "rb") as fh:
            return cls.loads(fh.read(), embed, **kw)


# --- side channel and storage arithmetic ----------------------------------------

def side_channel_bits(policy: BanPolicy, max_queries: int) -> float:
    """Bits revealed by the position at which one account gets cancelled."""
    if max_queries <= policy.offset:
        raise ValueError("max_queries must exceed the geometric offset")
    if policy.kind == "immediate":
        return math.log2(max_queries)
    if policy.kind == "power-of-two":
        # ban points 2^0 .. 2^floor(lg max)
        return math.log2(math.floor(math.log2(max_queries)) + 1)
    return math.log2(math.log(max_queries / policy.offset, policy.base))


def optimal_probe_bits(p: float) -> float:
    """Entropy (bits) of the geometric stopping index when each probe trips with prob p."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return (-(1 - p) * math.log2(1 - p) - p * math.log2(p)) / p


def optimal_probe_queries(p: float, k: int = 50) -> float:
    return k + 1.0 / p


def buffer_storage_bytes(d: int, precision_bytes: int, rate_per_minute: float, hours: float) -> float:
    return rate_per_minute * 60.0 * hours * d * precision_bytes


def storage_cost_per_month(n_bytes: float, usd_per_gb_month: float) -> float:
    return n_bytes / 1e9 * usd_per_gb_month
