import numpy as np
import pytest
from hypothesis import given, strategies as st

from querywatch import attacks as atk
from querywatch import models
from querywatch import numerics as nx
from querywatch import transforms as tf
from querywatch.attacks import blinding as bl
from querywatch.attacks import boundary as bd
from querywatch.attacks import nes
from querywatch.attacks import surrogate as sg

from _cases import brute_force_mis

DIM = 16


def _linear_net(rng, dim=DIM, classes=3):
    w = rng.normal(size=(dim, classes))
    b = -0.5 * w.sum(axis=0)  # centre the decision regions on the unit cube
    return nx.NetModel((nx.Layer(dim, classes, "softmax"),), [(w, b)])


def _problem(rng, net, target=1):
    """(x, seed): x not in ``target``, seed in it, and some point of ``target``
    within l-inf 0.04 of x so an attack at 0.05 is feasible."""
    w = net.weights[0][0]
    while True:
        pts = rng.uniform(0, 1, (200, net.in_dim))
        lab = models.classify_batch(net, pts)
        for x, c in zip(pts[lab != target], lab[lab != target]):
            near = np.clip(x + 0.04 * np.sign(w[:, target] - w[:, c]), 0, 1)
            if models.classify(net, near) == target:
                return x, pts[lab == target][0]


# --- score estimates and NES gradients ---------------------------------------------

def test_estimate_score_examples(rng):
    always_two = atk.FunctionOracle(3, hard_fn=lambda xs: np.full(len(xs), 2))
    np.testing.assert_array_equal(atk.estimate_score(always_two, np.zeros(4), 10, nes.ball_sampler(0.1), rng),
                                  [0, 0, 1])
    assert always_two.queries == 10
    half = atk.FunctionOracle(2, hard_fn=lambda xs: (xs[:, 0] > 0.5).astype(int))
    score = atk.estimate_score(half, np.full(4, 0.5), 4000, nes.ball_sampler(0.1), rng)
    assert score.sum() == pytest.approx(1.0) and score[1] == pytest.approx(0.5, abs=0.03)


def test_antithetic_pairs_cancel_constant_score(rng):
    g = nes.nes_gradient_from_scores(lambda p: 0.7, np.zeros(DIM), 8, 0.01, rng)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def _cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_nes_recovers_linear_gradient(rng):
    w = rng.normal(size=DIM)
    score = lambda p: float(w @ p)  # noqa: E731
    cos = {n: np.mean([_cosine(nes.nes_gradient_from_scores(score, np.zeros(DIM), n, 0.01, rng), w)
                       for _ in range(20)]) for n in (10, 100, 1000)}
    assert cos[100] >= 0.5
    assert cos[10] < cos[100] < cos[1000]


def test_nes_gradient_query_count(rng):
    orc = atk.ModelOracle(_linear_net(rng))
    nes.nes_gradient(orc, rng.uniform(0, 1, DIM), 0, atk.NesParams(n=6, s=7), rng)
    assert orc.queries == 6 * 7


def test_nes_params_validation():
    with pytest.raises(ValueError):
        atk.NesParams(n=3)
    with pytest.raises(ValueError):
        atk.NesParams(epsilon=1.0)


# --- NES and boundary on a toy model --------------------------------------------------

def test_nes_attack_succeeds_on_linear_model(rng):
    net = _linear_net(rng)
    x, seed = _problem(rng, net)
    orc = atk.ModelOracle(net)
    trace = atk.nes_attack(orc, x, 1, seed, atk.NesParams(mu=0.05, sigma=0.01, s=20), rng)
    assert trace.success and trace.linf <= 0.05 + 1e-12
    assert models.classify(net, trace.final) == 1
    assert trace.queries == orc.queries


def test_boundary_attack_succeeds_on_linear_model(rng):
    net = _linear_net(rng)
    x, seed = _problem(rng, net)
    trace = atk.boundary_attack(atk.ModelOracle(net), x, 1, seed, rng=rng)
    assert trace.success and trace.linf <= 0.05
    assert models.classify(net, trace.final) == 1


@pytest.mark.parametrize("attack", [atk.nes_attack, atk.boundary_attack])
def test_already_adversarial_costs_one_query(attack, rng):
    net = _linear_net(rng)
    x, seed = _problem(rng, net)
    near = np.clip(x + 0.01 * np.sign(seed - x), 0, 1)
    orc = atk.FunctionOracle(3, hard_fn=lambda xs: np.ones(len(xs), dtype=int))
    trace = attack(orc, x, 1, near, rng=rng)
    assert trace.success and trace.queries == 1


@pytest.mark.parametrize("attack", [atk.nes_attack, atk.boundary_attack])
def test_wrong_seed_and_empty_budget(attack, rng):
    net = _linear_net(rng)
    x, seed = _problem(rng, net)
    assert not attack(atk.ModelOracle(net), x, 1, x, rng=rng).success
    params = atk.NesParams(max_queries=0) if attack is atk.nes_attack else atk.BoundaryParams(max_queries=0)
    orc = atk.ModelOracle(net)
    trace = attack(orc, x, 1, seed, params, rng=rng)
    assert not trace.success and orc.queries == 0


@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 0.5))
def test_orthogonal_step_keeps_distance(seed, delta):
    rng = np.random.default_rng(seed)
    x, adv = rng.uniform(0, 1, (2, DIM))
    cand = bd.orthogonal_step(x, adv, delta, rng)
    assert abs(np.linalg.norm(cand - x) - np.linalg.norm(adv - x)) <= 1e-9


def test_banned_oracle_ends_attack(rng):
    net = _linear_net(rng)
    x, seed = _problem(rng, net)

    class Refusing(atk.ModelOracle):
        def _hard_batch(self, xs):
            if self.queries >= 3:
                raise atk.OracleBanned()
            return super()._hard_batch(xs)

    trace = atk.boundary_attack(Refusing(net), x, 1, seed, rng=rng)
    assert not trace.success and trace.reason == "banned"


# --- white-box and hybrid ---------------------------------------------------------------

def test_fgsm_zero_eps_and_sign(rng):
    net = _linear_net(rng)
    x = rng.uniform(0.2, 0.8, DIM)
    assert np.array_equal(sg.fgsm(net, x, 0, 0.0), x)
    g = sg.input_gradient(net, x, 0)
    np.testing.assert_allclose(sg.fgsm(net, x, 0, 0.1), np.clip(x + 0.1 * np.sign(g), 0, 1))


def test_input_gradient_matches_finite_difference(rng):
    net = _linear_net(rng)
    x = rng.uniform(0, 1, DIM)

    def loss(z):
        return -np.log(nx.softmax(nx.predict(net, z[None, :]))[0, 2])

    fd = np.array([(loss(x + 1e-6 * e) - loss(x - 1e-6 * e)) / 2e-6 for e in np.eye(DIM)])
    np.testing.assert_allclose(sg.input_gradient(net, x, 2), fd, rtol=1e-5, atol=1e-8)


def test_pgd_reaches_margin_inside_box(rng):
    net = _linear_net(rng)
    x = rng.uniform(0, 1, DIM)
    target = int(np.argmin(nx.predict(net, x[None, :])[0]))
    adv = sg.pgd_margin(net, x, target, 0.5, 0.0)
    assert np.max(np.abs(adv - x)) <= 0.5 + 1e-12 and adv.min() >= 0 and adv.max() <= 1
    assert sg.margin(nx.predict(net, adv[None, :])[0], target) > 0


def test_far_and_near_sample_ranges(rng):
    x = np.full(DIM, 0.5)
    far = sg.far_samples(x, 0.3, 50, rng)
    assert np.all(np.abs(far - x) >= 0.3 - 1e-12)
    near = sg.near_samples(x, 0.01, 50, rng)
    assert np.all(np.abs(near - x) <= 0.01)


def test_hybrid_query_count(rng):
    net = _linear_net(rng)
    x = rng.uniform(0, 1, DIM)
    orc = atk.ModelOracle(net)
    params = atk.HybridParams(n=40, m=40, surrogate=models.ClassifierConfig(hidden=(8,),
                              optim=nx.OptimConfig(0.01, 0.9, 16, 3)))
    trace = atk.hybrid_surrogate_attack(orc, x, models.classify(net, x), params, rng)
    assert trace.queries == orc.queries == 41


def test_hybrid_degenerate_data(rng):
    orc = atk.FunctionOracle(3, hard_fn=lambda xs: np.zeros(len(xs), dtype=int))
    trace = atk.hybrid_surrogate_attack(orc, np.full(DIM, 0.5), 0, atk.HybridParams(n=10, m=10), rng)
    assert not trace.success and trace.reason == "degenerate surrogate data" and trace.queries == 10


# --- blinding ---------------------------------------------------------------------------

def test_blind_query_variants(rng, desk):
    x = desk.test.images[0]
    qs, reveal = bl.blind_query(None, x, rng)
    assert len(qs) == 1 and np.array_equal(qs[0], x) and reveal([3]) == 3
    spec = desk.low_transforms["brightness"]
    qs, _ = bl.blind_query(spec, x, np.random.default_rng(4), desk.shape)
    assert np.array_equal(qs[0], tf.apply(spec, x, np.random.default_rng(4), desk.shape))
    qs, _ = bl.blind_query(desk.blinder, x, np.random.default_rng(4))
    assert np.array_equal(qs[0], models.blind(desk.blinder, x, np.random.default_rng(4)))
    with pytest.raises(ValueError):
        bl.blind_query(spec, x, rng)
    with pytest.raises(TypeError):
        bl.blind_query("rotate", x, rng)


def _share_above_half(desk, kind):
    x = desk.test.images[:400]
    target = tf.scaled_target(tf.LOW_DISTORTION, desk.train.dim)
    out = bl.blind_batch_queries(desk.low_transforms[kind], x, np.random.default_rng(0), desk.shape)
    return np.mean(np.linalg.norm(out - x, axis=1) >= 0.5 * target)


@pytest.mark.parametrize("kind", ["uniform-noise", "gaussian-noise"])
def test_noise_blinding_distortion_rarely_falls_short(desk, kind):
    assert _share_above_half(desk, kind) >= 0.95


def test_single_draw_blinding_distortion_rate(desk):
    # brightness moves every pixel by one c ~ U(-r, r); unclipped, the distortion is
    # |c| sqrt(D) with mean (r/2) sqrt(D), so it clears half the mean iff |c| >= r/4
    assert _share_above_half(desk, "brightness") == pytest.approx(0.75, abs=0.05)
    for kind in ("translate", "rotate", "pixel-scale", "crop-resize", "contrast"):
        assert _share_above_half(desk, kind) >= 0.6, kind


# --- soft-label extrapolation -------------------------------------------------------------

def _linear_soft(rng, dim=DIM, classes=3):
    w = rng.normal(size=(dim, classes)) * 1e-3
    w -= w.mean(axis=1, keepdims=True)  # rows sum to zero keeps outputs on the simplex
    p0 = np.full(classes, 1.0 / classes)
    return lambda xs: p0 + xs @ w, p0, w


def test_linear_oracle_extrapolation_is_exact(rng):
    fn, p0, w = _linear_soft(rng)
    orc = atk.FunctionOracle(3, soft_fn=fn)
    x = rng.uniform(0, 1, DIM)
    est = bl.softlabel_extrapolate(orc, x, 5.0, 0.1, 3, rng)
    np.testing.assert_allclose(est, fn(x[None, :])[0], atol=1e-9, rtol=0)
    assert orc.queries == 6


def test_quadratic_error_is_second_order(rng):
    q = rng.normal(size=(DIM, DIM))
    q = q + q.T
    g = rng.normal(size=DIM)
    f = lambda z: float(g @ z + z @ q @ z)  # noqa: E731
    x = rng.uniform(0, 1, DIM)
    r = bl.random_directions(1, DIM, rng)[0]
    step = 1e-4
    errs = []
    for d in (0.01, 0.02, 0.04, 0.08):
        y0, y1 = f(x + d * r), f(x + (d + step) * r)
        errs.append(abs(bl.raw_extrapolate(y0, y1, d, step) - f(x)))
        # closed form: the estimate is off by (d^2 + d step) r'Qr
        assert errs[-1] == pytest.approx(abs((d * d + d * step) * (r @ q @ r)), rel=1e-5)
    for a, b in zip(errs, errs[1:]):
        assert b / a == pytest.approx(4.0, rel=0.02)


def test_project_simplex():
    np.testing.assert_allclose(bl.project_simplex([-1.0, 1.0, 3.0]), [0, 0.25, 0.75])
    np.testing.assert_allclose(bl.project_simplex([-1.0, -2.0]), [0.5, 0.5])


def test_soft_queries_need_soft_access(rng):
    orc = atk.ModelOracle(_linear_net(rng))
    with pytest.raises(PermissionError):
        bl.softlabel_extrapolate(orc, np.zeros(DIM), 1.0, 0.1, 1, rng)


# --- diversity ------------------------------------------------------------------------------

def test_diversity_greedy_examples(rng):
    hist = np.zeros((3, 2))
    draws = iter([np.array([0.1, 0.0]), np.array([0.2, 0.0]), np.array([2.0, 0.0])])
    cand, n = bl.diversity_greedy(hist, lambda: next(draws), 1.0, 2, 10)
    assert np.array_equal(cand, [2.0, 0.0]) and n == 2
    draws = iter([np.array([0.1, 0.0]), np.array([0.3, 0.0]), np.array([0.2, 0.0])])
    cand, n = bl.diversity_greedy(hist, lambda: next(draws), 1.0, 2, 2)
    assert np.array_equal(cand, [0.3, 0.0]) and n == 2
    cand, n = bl.diversity_greedy(np.zeros((0, 2)), lambda: np.ones(2), 1.0, 2, 0)
    assert n == 0


def test_mis_examples():
    # a path on 4 points spaced 1 apart, tau 1.5: best keeps the two ends... and one of the middle
    pts = np.array([[0.0], [1.0], [2.0], [3.0]])
    chosen = bl.diversity_independent_set(pts, 1.5)
    assert len(chosen) == 2
    # a star: the centre conflicts with all leaves, leaves are far apart
    star = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    assert bl.diversity_independent_set(star, 1.2) == [1, 2, 3, 4]
    assert bl.diversity_independent_set(np.ones((1, 3)), 1.0) == [0]
    with pytest.raises(ValueError):
        bl.diversity_independent_set(np.zeros((0, 2)), 1.0)


@given(st.integers(0, 2**31 - 1))
def test_mis_is_independent_and_beats_greedy(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (18, 2))
    tau = float(rng.uniform(0.15, 0.4))
    chosen = bl.diversity_independent_set(pts, tau)
    for i in chosen:
        for j in chosen:
            if i < j:
                assert np.linalg.norm(pts[i] - pts[j]) >= tau
    adj = bl.conflict_graph(pts, tau)
    assert len(chosen) >= len(bl.sequential_greedy(adj))
    assert len(chosen) <= brute_force_mis(adj)


def test_attacker_kdistance():
    hist = np.array([[1.0, 0.0], [3.0, 0.0], [10.0, 0.0]])
    assert bl.attacker_kdistance(hist, np.zeros(2), 2) == pytest.approx(2.0)
    assert bl.attacker_kdistance(hist[:1], np.zeros(2), 5) == pytest.approx(1.0)
