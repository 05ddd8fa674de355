"""Similarity encoder: a classifier body with a fresh linear encoding head,
fine-tuned with a contrastive loss on transform-generated positive pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import transforms as tf
from .models import ClassifierConfig, Dataset, train_classifier
from .numerics import NetModel, OptimConfig

log = logging.getLogger(__name__)

STORAGE_BYTES = 2  # float16 per encoding component


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    margin: float = float(np.sqrt(10.0))
    pretrain: ClassifierConfig = ClassifierConfig()
    # at desk scale lr 1e-3 for 20 epochs leaves transform pairs far apart in the encoding
    finetune: OptimConfig = OptimConfig(learning_rate=3e-3, momentum=0.9, batch_size=32, epochs=100)
    # positives come from these; empty means "calibrate the low-distortion set on the data"
    transforms: tuple[tf.TransformSpec, ...] = ()

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("encoding dimension must be positive")
        if not self.margin > 0:
            raise ValueError("margin must be positive")


def make_pair_batch(dataset: Dataset, b: int, rng: np.random.Generator, transforms):
    """``b`` positive pairs (x, T(x)) and ``b`` negative pairs of distinct images.

    Each positive uses its own transform, drawn uniformly from ``transforms``.
    """
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two images to form negative pairs")
    transforms = list(transforms)
    if not transforms:
        raise ValueError("no positive-pair transforms given")
    idx = rng.integers(0, n, b)
    x_i = dataset.images[idx]
    x_p = np.empty_like(x_i)
    which = rng.integers(0, len(transforms), b)
    for t in np.unique(which):
        rows = np.nonzero(which == t)[0]
        x_p[rows] = tf.apply_batch(transforms[t], x_i[rows], rng, dataset.shape)
    j = rng.integers(0, n, b)
    # offset in [1, n) guarantees a different index
    k = (j + rng.integers(1, n, b)) % n
    return x_i, x_p, dataset.images[j], dataset.images[k]


def low_distortion_set(dataset: Dataset, seed: int = 0) -> tuple[tf.TransformSpec, ...]:
    target = tf.scaled_target(tf.LOW_DISTORTION, dataset.dim)
    return tuple(tf.calibrate_set(dataset.images[:500], dataset.shape, target, rng=seed).values())


def train_encoder(dataset: Dataset, config: EncoderConfig = EncoderConfig(),
                  rng: np.random.Generator | None = None, classifier: NetModel | None = None) -> NetModel:
    """Pretrain (or reuse) a classifier, swap its logits layer for a d-dim
    identity head and fine-tune contrastively.  The result is flagged secret."""
    rng = rng if rng is not None else np.random.default_rng(config.finetune.seed)
    if classifier is None:
        classifier = train_classifier(dataset, config.pretrain, rng)
    if classifier.in_dim != dataset.dim:
        raise nx.ShapeError("classifier input does not match dataset")
    transforms = config.transforms or low_distortion_set(dataset)
    body_layers = classifier.layers[:-1]
    head_in = body_layers[-1].out_dim if body_layers else dataset.dim
    head = nx.init_model([head_in, config.d], ["identity"], rng)
    model = NetModel(body_layers + head.layers,
                     [(w.copy(), b.copy()) for w, b in classifier.weights[:-1]] + head.weights)

    b = config.finetune.batch_size

    def batch_fn(idx):
        return make_pair_batch(dataset, len(idx), rng, transforms), None, {}

    # one "epoch" draws as many pair batches as there are images / b
    model = nx.train(model, len(dataset), batch_fn, config.finetune, rng, "contrastive",
                     margin=config.margin)
    model.flags |= nx.FLAG_SECRET
    model.meta = {}
    log.info("encoder trained: d=%d, %d batches of %d pairs per epoch", config.d, -(-len(dataset) // b), b)
    return model


def encode_batch(encoder: NetModel, images) -> np.ndarray:
    return nx.predict(encoder, images)


def encode(encoder: NetModel, image) -> np.ndarray:
    return encode_batch(encoder, np.asarray(image)[None, :])[0]


def separation(encoder: NetModel, dataset: Dataset, transforms, n: int, rng: np.random.Generator):
    """Return (Pr[pos < neg], mean neg / mean pos) over ``n`` triples (x, T(x), x')."""
    x, xp, _, _ = make_pair_batch(dataset, n, rng, transforms)
    other = dataset.images[rng.integers(0, len(dataset), n)]
    same = np.all(other == x, axis=1)
    other[same] = dataset.images[(rng.integers(0, len(dataset), same.sum()))]
    e, ep, eo = (encode_batch(encoder, a) for a in (x, xp, other))
    pos = np.linalg.norm(e - ep, axis=1)
    neg = np.linalg.norm(e - eo, axis=1)
    return float(np.mean(pos < neg)), float(neg.mean() / max(pos.mean(), 1e-12))
