"""Dense feed-forward networks with hand-written backpropagation.

Everything here runs in float64 on numpy arrays.  A model is a chain of dense
layers; weights are stored as ``(W, b)`` pairs with ``W`` shaped
``(in_dim, out_dim)`` so that a batch of row vectors maps as ``x @ W + b``.

Three losses are supported: ``cross-entropy`` (classifier training),
``contrastive`` (similarity encoder) and ``blinder`` (randomized auto-encoder
trained against a frozen surrogate classifier).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "softmax")
LOSS_KINDS = ("cross-entropy", "contrastive", "blinder")

MAGIC = b"SGNN"
FORMAT_VERSION = 1
FLAG_SECRET = 1
FLAG_BLINDER = 2

_ACT_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}


class ShapeError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")


@dataclass
class NetModel:
    """Layer specs plus one ``(W, b)`` pair per layer.

    The ``softmax`` activation tag marks a logits layer: :func:`forward`
    returns raw logits for it and the losses apply the softmax themselves.
    """

    layers: tuple[Layer, ...]
    weights: list[tuple[np.ndarray, np.ndarray]]
    flags: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if len(self.layers) != len(self.weights):
            raise ShapeError("one (W, b) pair per layer required")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        for layer, (w, b) in zip(self.layers, self.weights):
            if w.shape != (layer.in_dim, layer.out_dim) or b.shape != (layer.out_dim,):
                raise ShapeError("weight shapes do not match layer spec")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def secret(self) -> bool:
        return bool(self.flags & FLAG_SECRET)

    def copy(self) -> "NetModel":
        return NetModel(self.layers, [(w.copy(), b.copy()) for w, b in self.weights],
                        self.flags, dict(self.meta))

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.weights)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs nonnegative")


def init_model(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> NetModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every weight and bias."""
    if len(dims) != len(activations) + 1:
        raise ValueError("need len(dims) == len(activations) + 1")
    layers, weights = [], []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(Layer(int(fan_in), int(fan_out), act))
        weights.append((rng.uniform(-bound, bound, (fan_in, fan_out)),
                        rng.uniform(-bound, bound, fan_out)))
    return NetModel(tuple(layers), weights)


def _as_batch(model: NetModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"expected inner dim {model.in_dim}, got shape {x.shape}")
    return x


def forward(model: NetModel, batch) -> list[np.ndarray]:
    """Return activations ``[input, layer1, ..., output]`` for a batch."""
    a = _as_batch(model, batch)
    acts = [a]
    for layer, (w, b) in zip(model.layers, model.weights):
        z = a @ w + b
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(a)
    return acts


def predict(model: NetModel, batch) -> np.ndarray:
    return forward(model, batch)[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def backward(model: NetModel, acts: list[np.ndarray], grad_out: np.ndarray):
    """Backpropagate ``dL/d(output)`` through the net.

    Returns ``(weight_grads, input_grad)``.
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    delta = grad_out
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        w, _ = model.weights[i]
        if layer.activation == "relu":
            delta = delta * (acts[i + 1] > 0.0)
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        delta = delta @ w.T
    return grads, delta


def _cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy; ``labels`` is an int vector or a row-stochastic matrix."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        target = np.zeros_like(logits)
        target[np.arange(n), labels.astype(int)] = 1.0
    else:
        target = labels.astype(np.float64)
    loss = -np.sum(target * logp) / n
    grad = (np.exp(logp) * target.sum(axis=1, keepdims=True) - target) / n
    return float(loss), grad


def contrastive_terms(e_i, e_p, e_j, e_n, margin: float):
    """Per-row contrastive loss and its gradients w.r.t. the four encodings."""
    dp = e_i - e_p
    dn = e_j - e_n
    pos = np.sum(dp * dp, axis=1)
    neg_sq = np.sum(dn * dn, axis=1)
    hinge = margin * margin - neg_sq
    active = hinge > 0.0
    loss = pos + np.where(active, hinge, 0.0)
    g_i = 2.0 * dp
    g_j = np.where(active[:, None], -2.0 * dn, 0.0)
    return loss, g_i, -g_i, g_j, -g_j


def blinder_output(model: NetModel, images: np.ndarray, noise: np.ndarray):
    """Blinded images ``clip(x + net([x, r]), 0, 1)`` plus what backprop needs."""
    acts = forward(model, np.concatenate([images, noise], axis=1))
    raw = images + acts[-1]
    inside = (raw > 0.0) & (raw < 1.0)
    return np.clip(raw, 0.0, 1.0), acts, inside


def _grad_cross_entropy(model, batch, labels):
    acts = forward(model, batch)
    loss, g = _cross_entropy(acts[-1], labels)
    grads, _ = backward(model, acts, g)
    return loss, grads


def _grad_contrastive(model, batch, margin):
    try:
        x_i, x_p, x_j, x_n = batch
    except (TypeError, ValueError):
        raise ShapeError("contrastive loss expects a (x_i, x_p, x_j, x_n) tuple") from None
    b = len(x_i)
    stacked = np.concatenate([_as_batch(model, x) for x in (x_i, x_p, x_j, x_n)], axis=0)
    if stacked.shape[0] != 4 * b:
        raise ShapeError("all four contrastive blocks must have the same length")
    acts = forward(model, stacked)
    e = acts[-1]
    loss, *g = contrastive_terms(e[:b], e[b:2 * b], e[2 * b:3 * b], e[3 * b:], margin)
    grad_out = np.concatenate(g, axis=0) / b
    grads, _ = backward(model, acts, grad_out)
    return float(loss.mean()), grads


def _grad_blinder(model, images, surrogate, noise_a, noise_b, c, d):
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    target = softmax(predict(surrogate, images))
    loss = 0.0
    outs = []
    for noise in (noise_a, noise_b):
        out, acts, inside = blinder_output(model, images, noise)
        s_acts = forward(surrogate, out)
        ce, g_logits = _cross_entropy(s_acts[-1], target)
        _, g_img = backward(surrogate, s_acts, g_logits)
        loss += 0.5 * ce
        outs.append([out, acts, inside, 0.5 * g_img])
    diff = outs[0][0] - outs[1][0]
    sq = np.sum(diff * diff, axis=1)
    below = sq < d * d
    loss -= c * np.mean(np.where(below, sq, d * d))
    g_spread = np.where(below[:, None], -2.0 * c * diff / n, 0.0)
    outs[0][3] = outs[0][3] + g_spread
    outs[1][3] = outs[1][3] - g_spread
    total = None
    for out, acts, inside, g_out in outs:
        grads, _ = backward(model, acts, g_out * inside)
        if total is None:
            total = grads
        else:
            total = [(a + w, b + v) for (a, b), (w, v) in zip(total, grads)]
    return float(loss), total


def loss_and_grads(model: NetModel, batch, labels=None, kind: str = "cross-entropy", **aux):
    """Loss value and per-layer ``(dW, db)`` gradients.

    ``cross-entropy``: ``batch`` is an image matrix, ``labels`` class indices or
    target distributions.
    ``contrastive``: ``batch`` is ``(x_i, x_p, x_j, x_n)``; pass ``margin=``.
    ``blinder``: ``batch`` is an image matrix, ``model`` the blinder net; pass
    ``surrogate=``, ``noise=(r1, r2)``, ``c=`` and ``d=``.
    """
    if kind == "cross-entropy":
        if labels is None:
            raise ValueError("cross-entropy needs labels")
        return _grad_cross_entropy(model, batch, labels)
    if kind == "contrastive":
        return _grad_contrastive(model, batch, float(aux.get("margin", np.sqrt(10.0))))
    if kind == "blinder":
        try:
            surrogate = aux["surrogate"]
            noise_a, noise_b = aux["noise"]
        except KeyError as exc:
            raise ValueError(f"blinder loss needs {exc.args[0]!r}") from None
        return _grad_blinder(model, batch, surrogate, noise_a, noise_b,
                             float(aux.get("c", 1.0)), float(aux.get("d", 10.0)))
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def loss_value(model, batch, labels=None, kind="cross-entropy", **aux) -> float:
    return loss_and_grads(model, batch, labels, kind, **aux)[0]


def optimizer_step(model: NetModel, grads, config: OptimConfig, velocity: list | None = None) -> NetModel:
    """One SGD-with-momentum step, returning a new model.

    ``velocity`` (a list, initially empty) carries momentum between calls:
    ``v <- mu * v - lr * g`` then ``theta <- theta + v``.
    """
    if len(grads) != len(model.weights):
        raise ShapeError("gradient list does not match model")
    if velocity is not None and not velocity:
        velocity.extend((np.zeros_like(w), np.zeros_like(b)) for w, b in model.weights)
    new_weights = []
    for i, ((w, b), (gw, gb)) in enumerate(zip(model.weights, grads)):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError("gradient shape mismatch")
        if velocity is None or config.momentum == 0.0:
            step_w, step_b = -config.learning_rate * gw, -config.learning_rate * gb
        else:
            vw, vb = velocity[i]
            step_w = config.momentum * vw - config.learning_rate * gw
            step_b = config.momentum * vb - config.learning_rate * gb
            velocity[i] = (step_w, step_b)
        new_weights.append((w + step_w, b + step_b))
    return NetModel(model.layers, new_weights, model.flags, dict(model.meta))


def train(model: NetModel, n_items: int, batch_fn, config: OptimConfig, rng: np.random.Generator,
          kind: str = "cross-entropy", **aux) -> NetModel:
    """Generic minibatch loop: ``batch_fn(indices) -> (batch, labels, extra_aux)``."""
    velocity: list = []
    for _ in range(config.epochs):
        order = rng.permutation(n_items)
        for start in range(0, n_items, config.batch_size):
            batch, labels, extra = batch_fn(order[start:start + config.batch_size])
            _, grads = loss_and_grads(model, batch, labels, kind, **aux, **extra)
            model = optimizer_step(model, grads, config, velocity)
    return model


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(model: NetModel, batch, labels=None, kind: str = "cross-entropy", tol: float = 1e-4,
               step: float = 1e-5, grads=None, floor: float = 1e-6, **aux) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error per component is ``|a - n| / max(|a|, |n|, floor * max(1, |L|))``;
    the loss-scaled floor absorbs finite-difference rounding noise on components
    that are exactly zero (dead ReLUs).  Pass ``grads`` to check a supplied
    gradient instead of the analytic one.
    """
    base, analytic = loss_and_grads(model, batch, labels, kind, **aux)
    if grads is None:
        grads = analytic
    floor = floor * max(1.0, abs(base))
    probe = model.copy()
    worst, count = 0.0, 0
    for li, (w, b) in enumerate(probe.weights):
        for arr, g in ((w, grads[li][0]), (b, grads[li][1])):
            flat, gflat = arr.reshape(-1), np.asarray(g).reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = loss_value(probe, batch, labels, kind, **aux)
                flat[j] = orig - step
                down = loss_value(probe, batch, labels, kind, **aux)
                flat[j] = orig
                numeric = (up - down) / (2.0 * step)
                denom = max(abs(gflat[j]), abs(numeric), floor)
                worst = max(worst, abs(gflat[j] - numeric) / denom)
                count += 1
    return GradCheckReport(worst, count, tol)


# --- serialization -----------------------------------------------------------

def dumps_model(model: NetModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, model.flags, len(model.layers)))
    for layer in model.layers:
        buf.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_TAGS[layer.activation]))
    if model.flags & FLAG_BLINDER:
        buf.write(struct.pack("<Idd", int(model.meta["noise_dim"]), float(model.meta["d_b"]),
                              float(model.meta["c_b"])))
    for w, b in model.weights:
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(data: bytes) -> NetModel:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ModelFormatError("bad magic bytes")
    try:
        version, flags, n_layers = struct.unpack_from("<III", view, 4)
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format version {version}")
        off = 16
        layers = []
        for _ in range(n_layers):
            i, o, tag = struct.unpack_from("<IIB", view, off)
            off += 9
            layers.append(Layer(i, o, ACTIVATIONS[tag]))
        meta = {}
        if flags & FLAG_BLINDER:
            nd, d_b, c_b = struct.unpack_from("<Idd", view, off)
            off += 20
            meta = {"noise_dim": nd, "d_b": d_b, "c_b": c_b}
        weights = []
        for layer in layers:
            nw, nb = layer.in_dim * layer.out_dim, layer.out_dim
            w = np.frombuffer(view, "<f8", nw, off).reshape(layer.in_dim, layer.out_dim).copy()
            off += 8 * nw
            b = np.frombuffer(view, "<f8", nb, off).copy()
            off += 8 * nb
            weights.append((w, b))
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"truncated or corrupt model file: {exc}") from None
    if off != len(data):
        raise ModelFormatError("trailing bytes after model weights")
    return NetModel(tuple(layers), weights, flags, meta)


def save_model(model: NetModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> NetModel:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
