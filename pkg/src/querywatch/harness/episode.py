"""Attack episodes against the defended gateway, with per-trial re-registration
and a raw-pixel shadow detector fed the identical query stream."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .. import attacks as atk
from .. import transforms as tf
from ..attacks.oracle import AttackTrace, Oracle, OracleBanned, linf
from ..detector import AccountBanned, BanPolicy, Monitor
from ..gateway import Gateway
from ..models import classify_batch
from .desk import Desk, substream

log = logging.getLogger(__name__)

ATTACKS = ("none", "nes", "nes-soft", "boundary", "hybrid")


class DefendedOracle(Oracle):
    """Attacker-side view of the gateway: on a ban it opens a new account and
    resends the refused queries.  ``queries`` counts answered queries."""

    def __init__(self, gateway: Gateway, shadow: Monitor | None = None, max_accounts: int | None = None):
        super().__init__()
        self.gateway = gateway
        self.shadow = shadow
        self.max_accounts = max_accounts
        self.n_classes = gateway.classifier.out_dim
        self.soft_enabled = gateway.soft_enabled
        self.accounts: list[int] = []
        self.shadow_accounts: list[int] = []
        self._new_account()
        if shadow is not None:
            self.shadow_accounts.append(shadow.create_account())

    def _new_account(self):
        if self.max_accounts is not None and len(self.accounts) >= self.max_accounts:
            raise OracleBanned(f"account limit {self.max_accounts} reached")
        self.accounts.append(self.gateway.create_account())

    @property
    def detections(self) -> int:
        mon = self.gateway.monitor
        return sum(mon.account(a).detections for a in self.accounts)

    @property
    def raw_detections(self) -> int:
        if self.shadow is None:
            return 0
        return sum(self.shadow.account(a).detections for a in self.shadow_accounts)

    def _shadow(self, xs):
        vecs = xs.astype(np.float32).astype(np.float64)
        for v in vecs:
            try:
                self.shadow.process_vector(self.shadow_accounts[-1], v, 0.0)
            except AccountBanned:
                self.shadow_accounts.append(self.shadow.create_account())
                self.shadow.process_vector(self.shadow_accounts[-1], v, 0.0)

    def _ask(self, xs, mode):
        out = []
        pending = xs
        while len(pending):
            resps = self.gateway.handle_batch(self.accounts[-1], pending, mode)
            answered = [r for r in resps if r.status == "ok"]
            if self.shadow is not None:
                self._shadow(pending[:len(answered)])
            out.extend(answered)
            pending = pending[len(answered):]
            if len(pending):
                self._new_account()
        return out

    def _hard_batch(self, xs):
        return np.array([r.label for r in self._ask(xs, "hard")], dtype=np.int64)

    def _soft_batch(self, xs):
        return np.array([r.probs for r in self._ask(xs, "soft")])


@dataclass(frozen=True)
class EpisodeConfig:
    attack: str = "nes"
    # None | "kind:r" transform spec | "low:<kind>" / "high:<kind>" (desk-calibrated) | "blinder"
    blinding: str | None = None
    trials: int = 20
    max_queries: int = 20000
    seed: int = 0
    ban: BanPolicy = BanPolicy()
    shadow: bool = True
    epsilon: float = 0.05
    nes: atk.NesParams | None = None  # None: nes_variant(blinding)
    boundary: atk.BoundaryParams = atk.BoundaryParams()
    hybrid: atk.HybridParams = atk.HybridParams()
    benign_stream: int = 10000  # attack=none: images replayed per trial

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")


@dataclass
class EpisodeReport:
    attack: str
    trials: int
    success_rate: float
    mean_queries: float
    sd_queries: float
    detections: float
    raw_detections: float
    mean_accounts: float
    mean_linf: float
    total_queries: int = 0
    total_detections: int = 0
    traces: list = field(default_factory=list, repr=False)

    @property
    def detection_rate(self) -> float:
        """Detections per answered query over all trials."""
        return self.total_detections / self.total_queries if self.total_queries else 0.0


def resolve_blinding(desk: Desk, spec: str | None):
    if spec is None or spec == "none":
        return None
    if spec == "blinder":
        if desk.blinder is None:
            raise ValueError("desk was built without a blinder")
        return desk.blinder
    level, _, kind = spec.partition(":")
    if level in ("low", "high"):
        table = desk.low_transforms if level == "low" else desk.high_transforms
        if kind not in table:
            raise ValueError(f"no calibrated {level}-distortion {kind!r} transform on this desk")
        return table[kind]
    return tf.TransformSpec.parse(spec)


def nes_variant(blinding: str | None, base: atk.NesParams = atk.NesParams()) -> atk.NesParams:
    """Per-variant NES settings: blinded variants estimate scores from two
    samples (the blinding already spreads them), and high-distortion
    transforms need a wider basis to see past their own noise."""
    if blinding is None or blinding == "none":
        return base
    if blinding.startswith("high:"):
        return replace(base, s=2, sigma=0.01)
    return replace(base, s=2)


def _pick_problem(desk: Desk, rng: np.random.Generator):
    """Random correctly classified test image, random other target class and
    a training image the defended model assigns to that class."""
    preds = classify_batch(desk.classifier, desk.test.images)
    ok = np.nonzero(preds == desk.test.labels)[0]
    i = int(rng.choice(ok))
    label = int(desk.test.labels[i])
    target = int(rng.choice([c for c in range(desk.train.n_classes) if c != label]))
    train_preds = classify_batch(desk.classifier, desk.train.images)
    seeds = np.nonzero((desk.train.labels == target) & (train_preds == target))[0]
    seed_img = desk.train.images[int(rng.choice(seeds))]
    return desk.test.images[i], label, target, seed_img


def _verify(desk: Desk, trace: AttackTrace, x, label, target, eps, targeted: bool) -> bool:
    """Re-check success against the defended model on the float32 grid."""
    if not trace.success or trace.final is None:
        return False
    if linf(trace.final, x) > eps + 1e-9:
        return False
    pred = int(classify_batch(desk.classifier, trace.final.astype(np.float32).astype(np.float64)[None, :])[0])
    return pred == target if targeted else pred != label


def run_trial(desk: Desk, config: EpisodeConfig, trial: int) -> AttackTrace:
    rng = substream(config.seed, f"attack-{trial}")
    gw = desk.gateway(config.ban, soft=config.attack == "nes-soft")
    shadow = desk.monitor(BanPolicy("immediate"), metric="raw-l2") if config.shadow else None
    oracle = DefendedOracle(gw, shadow)
    blinding = resolve_blinding(desk, config.blinding)
    if config.attack == "none":
        stream = desk.calibration[rng.permutation(len(desk.calibration))[:config.benign_stream]]
        for s in range(0, len(stream), 500):
            oracle.hard_batch(stream[s:s + 500])
        trace = AttackTrace(False, oracle.queries, None, float("nan"), reason="benign replay")
    else:
        x, label, target, seed_img = _pick_problem(desk, rng)
        if config.attack in ("nes", "nes-soft"):
            base = config.nes if config.nes is not None else nes_variant(config.blinding)
            params = replace(base, max_queries=config.max_queries, epsilon=config.epsilon,
                             blinding=blinding, soft=config.attack == "nes-soft")
            trace = atk.nes_attack(oracle, x, target, seed_img, params, rng, desk.shape)
            targeted = True
        elif config.attack == "boundary":
            params = replace(config.boundary, max_queries=config.max_queries, epsilon=config.epsilon,
                             blinding=blinding)
            trace = atk.boundary_attack(oracle, x, target, seed_img, params, rng, desk.shape)
            targeted = True
        else:
            params = replace(config.hybrid, epsilon=config.epsilon)
            trace = atk.hybrid_surrogate_attack(oracle, x, label, params, rng, desk.shape)
            targeted = False
        trace.success = _verify(desk, trace, x, label, target, config.epsilon, targeted)
    trace.detections = oracle.detections
    trace.raw_detections = oracle.raw_detections
    return trace


def summarize(attack: str, traces: list[AttackTrace]) -> EpisodeReport:
    """Queries, detections and distortion are averaged over successful trials
    (over all trials when none succeeded)."""
    wins = [t for t in traces if t.success]
    basis = wins or traces
    q = np.array([t.queries for t in basis], dtype=np.float64)
    return EpisodeReport(
        attack=attack,
        trials=len(traces),
        success_rate=len(wins) / len(traces),
        mean_queries=float(q.mean()),
        sd_queries=float(q.std()),
        detections=float(np.mean([t.detections for t in basis])),
        raw_detections=float(np.mean([t.raw_detections for t in basis])),
        mean_accounts=float(np.mean([t.accounts for t in basis])),
        mean_linf=float(np.mean([t.linf for t in basis])),
        total_queries=int(sum(t.queries for t in traces)),
        total_detections=int(sum(t.detections for t in traces)),
        traces=traces,
    )


def run_episode(desk: Desk, config: EpisodeConfig, name: str | None = None) -> EpisodeReport:
    if desk.classifier is None or desk.encoder is None or not desk.tau > 0:
        raise ValueError("desk has no trained classifier / encoder / threshold")
    traces = []
    for trial in range(config.trials):
        t0 = time.time()
        traces.append(run_trial(desk, config, trial))
        tr = traces[-1]
        log.info("%s trial %d: success=%s queries=%d detections=%d raw=%d (%.1fs)", config.attack, trial,
                 tr.success, tr.queries, tr.detections, tr.raw_detections, time.time() - t0)
    label = name or (config.attack if config.blinding is None else f"{config.attack}/{config.blinding}")
    return summarize(label, traces)


def benign_baseline(desk: Desk, stream, seed: int = 0, ban: BanPolicy = BanPolicy()) -> float:
    """Flag rate of a benign image stream through one re-registering client."""
    oracle = DefendedOracle(desk.gateway(ban))
    stream = np.asarray(stream)[substream(seed, "benign").permutation(len(stream))]
    for s in range(0, len(stream), 500):
        oracle.hard_batch(stream[s:s + 500])
    return oracle.detections / oracle.queries
