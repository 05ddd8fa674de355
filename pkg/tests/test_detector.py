import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from querywatch import detector as dt
from querywatch.detector import BanPolicy, BufferPolicy, DetectorConfig, Monitor

from _cases import detector_property_run


def _monitor(k=3, tau=0.5, ban=BanPolicy(), buffer=BufferPolicy("query", 100), dim=2, metric="raw-l2"):
    return Monitor(DetectorConfig(tau, k, buffer, 0.001, ban, metric), dt.identity_embed, dim, clock=lambda: 0.0)


# --- k-NN distance ----------------------------------------------------------------

def test_knn_identical_copies_is_zero():
    q = np.array([0.3, 0.7])
    assert dt.knn_mean_distance(np.tile(q, (5, 1)), q, 5) == 0.0


def test_knn_two_entries():
    assert dt.knn_mean_distance(np.array([[1.0, 0.0], [3.0, 0.0]]), np.zeros(2), 2) == pytest.approx(2.0)


def test_knn_empty_is_infinite():
    assert dt.knn_mean_distance(np.zeros((0, 3)), np.zeros(3), 4) == math.inf


@given(st.integers(0, 2**31 - 1), st.integers(1, 60))
def test_knn_matches_sort_oracle(seed, k):
    rng = np.random.default_rng(seed)
    buf = rng.normal(size=(500, 6))
    q = rng.normal(size=6)
    oracle = np.mean(sorted(np.linalg.norm(buf - q, axis=1))[:k])
    assert dt.knn_mean_distance(buf, q, k) == pytest.approx(oracle, rel=1e-12)


def test_neighbor_ties_go_to_earlier_arrival():
    vecs = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert list(dt.nearest_neighbors(vecs, np.array([7, 3, 5]), np.zeros(2), 2)) == [3, 5]


# --- ban policy -------------------------------------------------------------------

def test_ban_policy_examples():
    assert dt.apply_ban_policy(BanPolicy("power-of-two"), 600) == 1024
    assert dt.apply_ban_policy(BanPolicy("geometric", 1.1, 50), 51) == 55
    assert dt.apply_ban_policy(BanPolicy("immediate"), 600) == 600
    assert dt.apply_ban_policy(BanPolicy("power-of-two"), 1) == 1
    with pytest.raises(ValueError):
        dt.apply_ban_policy(BanPolicy(), 0)
    with pytest.raises(ValueError):
        BanPolicy("geometric", 1.0)


@given(st.integers(1, 10**7), st.sampled_from(["immediate", "power-of-two", "geometric"]),
       st.floats(1.01, 3.0))
def test_ban_never_precedes_detection(index, kind, base):
    assert dt.apply_ban_policy(BanPolicy(kind, base, 50), index) >= index


def test_geometric_points_are_the_ceiling_sequence():
    pol = BanPolicy("geometric", 1.1, 50)
    pts = sorted({dt.apply_ban_policy(pol, i) for i in range(1, 200)})
    assert pts[:4] == [55, 61, 67, 74]  # ceil(50 * 1.1^i) for i = 1..4


# --- process_query ----------------------------------------------------------------

def test_no_flag_before_k_neighbours():
    mon = _monitor(k=3)
    a = mon.create_account()
    flags = [mon.process_vector(a, np.zeros(2)).flagged for _ in range(4)]
    assert flags == [False, False, False, True]


def test_flagged_query_answered_then_immediate_ban():
    mon = _monitor(k=3)
    a = mon.create_account()
    for _ in range(4):
        mon.process_vector(a, np.zeros(2))
    assert mon.account(a).detections == 1 and len(mon.account(a).buffer) == 0
    with pytest.raises(dt.AccountBanned):
        mon.process_vector(a, np.ones(2))
    with pytest.raises(dt.AccountBanned):
        mon.process_vector(a, np.ones(2))


def test_power_of_two_ban_is_delayed():
    mon = _monitor(k=3, ban=BanPolicy("power-of-two"))
    a = mon.create_account()
    for _ in range(4):
        mon.process_vector(a, np.zeros(2))      # flag at query 4 -> ban after query 4
    mon2 = _monitor(k=3, ban=BanPolicy("power-of-two"))
    b = mon2.create_account()
    mon2.process_vector(b, np.array([5.0, 5.0]))
    for _ in range(4):
        mon2.process_vector(b, np.zeros(2))     # flag at query 5 -> served through 8
    for _ in range(3):
        assert not mon2.process_vector(b, np.array([9.0, -9.0]) * (1 + _)).flagged
    with pytest.raises(dt.AccountBanned):
        mon2.process_vector(b, np.zeros(2))
    with pytest.raises(dt.AccountBanned):
        mon.process_vector(a, np.zeros(2))


def test_unknown_account():
    with pytest.raises(dt.UnknownAccount):
        _monitor().process_vector(99, np.zeros(2))


def test_time_bounded_eviction():
    clock = [0.0]
    mon = Monitor(DetectorConfig(0.5, 2, BufferPolicy("time", 1.0)), dt.identity_embed, 2,
                  clock=lambda: clock[0])
    a = mon.create_account()
    mon.process_vector(a, np.zeros(2))
    mon.process_vector(a, np.zeros(2))
    clock[0] = 3601.0 + 0.5
    # both old entries expired, so an identical query cannot be flagged
    assert not mon.process_vector(a, np.zeros(2)).flagged
    assert len(mon.account(a).buffer) == 1


def test_encoder_metric_stores_half_precision():
    mon = _monitor(metric="encoder")
    a = mon.create_account()
    mon.process_vector(a, np.array([0.1, 1 / 3]))
    stored = mon.account(a).buffer.vectors[0]
    np.testing.assert_array_equal(stored, np.array([0.1, 1 / 3]).astype(np.float16))


@pytest.mark.parametrize("kind", ["immediate", "power-of-two", "geometric"])
@pytest.mark.parametrize("buffer", [BufferPolicy("query", 20), BufferPolicy("time", 0.02)])
def test_randomized_state_machine(kind, buffer):
    events, _, stats = detector_property_run(3000, 7, BanPolicy(kind), buffer)
    assert stats["flags"] > 0 and stats["bans"] > 0
    again, _, _ = detector_property_run(3000, 7, BanPolicy(kind), buffer)
    assert events == again


# --- calibration -------------------------------------------------------------------

def test_threshold_quantile_definition():
    kd = np.arange(1.0, 1001.0)
    assert dt.threshold_from_kdistances(kd, 0.001) == 2.0  # flags exactly 1 value (strict <)
    assert dt.threshold_from_kdistances(kd, 0.0) == 1.0    # flags nothing


def test_kdistance_stream_matches_brute_force(rng):
    x = rng.normal(size=(80, 3))
    got = dt.kdistance_stream(x, [4], BufferPolicy("query", 30))[4]
    want = []
    for i in range(len(x)):
        prev = x[max(0, i - 30):i]
        if len(prev) >= 4:
            want.append(np.sort(np.linalg.norm(prev - x[i], axis=1))[:4].mean())
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_calibration_is_reproducible_and_sound(rng):
    images = rng.uniform(0, 1, (3000, 5))
    tau = dt.calibrate_threshold(dt.identity_embed, images, 10, 0.01, np.random.default_rng(0))
    assert tau == dt.calibrate_threshold(dt.identity_embed, images, 10, 0.01, np.random.default_rng(0))
    mon = Monitor(DetectorConfig(tau, 10, BufferPolicy("query", 2000), 0.01, BanPolicy()),
                  dt.identity_embed, 5, clock=lambda: 0.0)
    a = mon.create_account()
    flags = 0
    for x in images[np.random.default_rng(0).permutation(len(images))]:
        try:
            flags += mon.process_vector(a, x).flagged
        except dt.AccountBanned:
            a = mon.create_account()
            flags += mon.process_vector(a, x).flagged
    assert flags / len(images) <= 2 * 0.01


def test_calibration_rejects_short_stream(rng):
    with pytest.raises(ValueError):
        dt.calibrate_threshold(dt.identity_embed, rng.uniform(size=(100, 2)), 50, 0.001)


def test_k_sweep_shapes(rng):
    images = rng.uniform(0, 1, (2000, 4))
    pairs = dt.k_sweep(dt.identity_embed, images, [1, 5, 20], 0.001, np.random.default_rng(0))
    assert [k for k, _ in pairs] == [1, 5, 20]
    assert pairs[0][1] < pairs[-1][1]
    single = dt.k_sweep(dt.identity_embed, images, [5], 0.001, np.random.default_rng(0))
    assert single[0][1] == dt.calibrate_threshold(dt.identity_embed, images, 5, 0.001, np.random.default_rng(0))


# --- persistence and logs ------------------------------------------------------------

def _drive(mon, accounts, stream):
    out = []
    for aid, v in stream:
        try:
            d = mon.process_vector(accounts[aid], v, 0.0)
            out.append((d.flagged, d.query_index, d.distance))
        except dt.AccountBanned:
            out.append("banned")
    return out


def test_snapshot_restore_equivalence(tmp_path, rng):
    mon = _monitor(k=4, tau=0.3, ban=BanPolicy("power-of-two"), buffer=BufferPolicy("query", 50), metric="encoder")
    accounts = [mon.create_account() for _ in range(3)]
    centers = rng.uniform(0, 3, (2, 2))

    def stream(n):
        return [(int(rng.integers(3)), centers[rng.integers(2)] + rng.normal(0, 0.1, 2)) for _ in range(n)]

    _drive(mon, accounts, stream(1000))
    path = tmp_path / "state.qwds"
    mon.snapshot(path)
    back = Monitor.restore(path, dt.identity_embed)
    assert back.dumps() == mon.dumps()
    tail = stream(500)
    assert _drive(back, accounts, tail) == _drive(mon, accounts, tail)


def test_empty_snapshot_round_trip():
    mon = _monitor()
    assert Monitor.loads(mon.dumps(), dt.identity_embed).dumps() == mon.dumps()


def test_corrupt_snapshot_rejected():
    mon = _monitor()
    mon.process_vector(mon.create_account(), np.zeros(2))
    data = bytearray(mon.dumps())
    data[20] ^= 0xFF
    with pytest.raises(dt.SnapshotError):
        Monitor.loads(bytes(data), dt.identity_embed)
    with pytest.raises(dt.SnapshotError):
        Monitor.loads(b"nope", dt.identity_embed)


def test_banned_state_survives_snapshot():
    mon = _monitor(k=1)
    a = mon.create_account()
    mon.process_vector(a, np.zeros(2))
    mon.process_vector(a, np.zeros(2))
    back = Monitor.loads(mon.dumps(), dt.identity_embed)
    with pytest.raises(dt.AccountBanned):
        back.process_vector(a, np.ones(2))


def test_event_log_lines(tmp_path):
    path = tmp_path / "events.log"
    mon = Monitor(DetectorConfig(0.5, 1), dt.identity_embed, 2, dt.EventLog(path), clock=lambda: 12.5)
    a = mon.create_account()
    mon.process_vector(a, np.zeros(2))
    mon.process_vector(a, np.zeros(2))
    assert dt.EventLog.read(path) == mon.log.events
    assert mon.log.events[0].query_index == 2 and mon.log.events[0].distance < 0.5


# --- side channel and storage --------------------------------------------------------

def test_side_channel_bits():
    assert dt.side_channel_bits(BanPolicy("power-of-two"), 2**20) == pytest.approx(math.log2(21))
    assert dt.side_channel_bits(BanPolicy("power-of-two"), 2**20) == pytest.approx(4.39, abs=0.005)
    assert dt.side_channel_bits(BanPolicy("geometric", 1.1, 50), 2**20) == pytest.approx(6.71, abs=0.005)


def test_optimal_probe_matches_entropy_series():
    p = 1 / 18
    # entropy of the geometric distribution by direct summation
    series = -sum((1 - p) ** (i - 1) * p * math.log2((1 - p) ** (i - 1) * p) for i in range(1, 2000))
    assert dt.optimal_probe_bits(p) == pytest.approx(series, rel=1e-9)
    assert dt.optimal_probe_bits(p) == pytest.approx(5.57, abs=0.005)
    assert dt.optimal_probe_queries(p) == pytest.approx(68.0)


def test_storage_arithmetic():
    n = dt.buffer_storage_bytes(256, 2, 1800, 100)
    assert n == 10_800_000 * 256 * 2
    assert n / 1e9 == pytest.approx(5.5296)
    assert dt.storage_cost_per_month(n, 0.026) == pytest.approx(0.1438, abs=5e-5)
    assert dt.buffer_storage_bytes(256, 2, 1800, 0) == 0
