"""Concrete networks: the defended classifier, the attacker's surrogate and the
randomized blinding auto-encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import NetModel, OptimConfig

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    images: np.ndarray  # (n, h*w*c), HWC order, values in [0, 1]
    labels: np.ndarray  # (n,) ints in [0, n_classes)
    n_classes: int
    shape: tuple[int, int, int]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ValueError("images must be (n, D) with one label per image")
        if self.images.shape[1] != int(np.prod(self.shape)):
            raise ValueError("image dimension does not match shape")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.shape)


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, ...] = (128, 64)
    optim: OptimConfig = OptimConfig(learning_rate=0.005, momentum=0.9, batch_size=32, epochs=40)


def train_classifier(dataset: Dataset, config: ClassifierConfig = ClassifierConfig(),
                     rng: np.random.Generator | None = None, holdout: Dataset | None = None) -> NetModel:
    """Cross-entropy SGD on a dense ReLU net; logs held-out accuracy if given."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if len(np.unique(dataset.labels)) < 2:
        raise ValueError("degenerate dataset: fewer than two classes present")
    rng = rng if rng is not None else np.random.default_rng(config.optim.seed)
    dims = [dataset.dim, *config.hidden, dataset.n_classes]
    model = nx.init_model(dims, ["relu"] * len(config.hidden) + ["softmax"], rng)
    images, labels = dataset.images, dataset.labels
    model = nx.train(model, len(dataset), lambda idx: (images[idx], labels[idx], {}),
                     config.optim, rng, "cross-entropy")
    if holdout is not None:
        log.info("classifier held-out accuracy %.3f", accuracy(model, holdout))
    return model


def classify_soft_batch(model: NetModel, images) -> np.ndarray:
    return nx.softmax(nx.predict(model, images))


def classify_batch(model: NetModel, images) -> np.ndarray:
    # argmax returns the lowest index on ties
    return np.argmax(nx.predict(model, images), axis=1)


def classify_soft(model: NetModel, image) -> np.ndarray:
    return classify_soft_batch(model, np.asarray(image)[None, :])[0]


def classify(model: NetModel, image) -> int:
    return int(classify_batch(model, np.asarray(image)[None, :])[0])


def accuracy(model: NetModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(classify_batch(model, dataset.images) == dataset.labels))


@dataclass
class SurrogateModel:
    """An attacker-side classifier together with the indices it was trained on.

    Wrapping it keeps the defended model out of :func:`train_blinder`.
    """

    net: NetModel
    train_indices: np.ndarray


# a 10% split is small: a narrow net and many epochs generalize best there
SURROGATE_CONFIG = ClassifierConfig(hidden=(32,), optim=OptimConfig(learning_rate=0.005, momentum=0.9,
                                                                    batch_size=32, epochs=200))


def train_surrogate(dataset: Dataset, fraction: float = 0.1, config: ClassifierConfig = SURROGATE_CONFIG,
                    rng: np.random.Generator | None = None,
                    exclude: np.ndarray | None = None) -> SurrogateModel:
    """Train f' on a random ``fraction`` of ``dataset``, skipping ``exclude`` indices."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = np.arange(len(dataset))
    if exclude is not None:
        pool = np.setdiff1d(pool, exclude)
    idx = np.sort(rng.choice(pool, size=max(2, int(round(fraction * len(dataset)))), replace=False))
    net = train_classifier(dataset.subset(idx), config, rng)
    return SurrogateModel(net, idx)


@dataclass(frozen=True)
class BlinderConfig:
    noise_dim: int = 16
    hidden: tuple[int, ...] = (128,)
    d_b: float | None = None  # None -> 10 * sqrt(D / 3072)
    c_b: float = 1.0
    optim: OptimConfig = OptimConfig(learning_rate=0.01, momentum=0.9, batch_size=32, epochs=10)


@dataclass
class Blinder:
    net: NetModel
    noise_dim: int
    d_b: float
    c_b: float

    def to_model(self) -> NetModel:
        model = self.net.copy()
        model.flags |= nx.FLAG_BLINDER
        model.meta = {"noise_dim": self.noise_dim, "d_b": self.d_b, "c_b": self.c_b}
        return model

    @classmethod
    def from_model(cls, model: NetModel) -> "Blinder":
        if not model.flags & nx.FLAG_BLINDER:
            raise nx.ModelFormatError("model file is not a blinder")
        m = model.meta
        net = NetModel(model.layers, model.weights, model.flags & ~nx.FLAG_BLINDER)
        return cls(net, int(m["noise_dim"]), float(m["d_b"]), float(m["c_b"]))


def default_blinder_distance(dim: int) -> float:
    return 10.0 * np.sqrt(dim / 3072.0)


def train_blinder(images: np.ndarray, surrogate: SurrogateModel, config: BlinderConfig = BlinderConfig(),
                  rng: np.random.Generator | None = None) -> Blinder:
    """Fit alpha(x; r) so that two draws differ by about ``d_b`` while f' agrees."""
    if not isinstance(surrogate, SurrogateModel):
        raise TypeError("train_blinder only accepts a SurrogateModel (never the defended classifier)")
    images = np.asarray(images, dtype=np.float64)
    dim = images.shape[1]
    if surrogate.net.in_dim != dim:
        raise ValueError("surrogate input dimension does not match the images")
    rng = rng if rng is not None else np.random.default_rng(config.optim.seed)
    d_b = config.d_b if config.d_b is not None else default_blinder_distance(dim)
    dims = [dim + config.noise_dim, *config.hidden, dim]
    net = nx.init_model(dims, ["relu"] * len(config.hidden) + ["identity"], rng)
    # start near the identity map so f' agreement holds from the first batch
    w, b = net.weights[-1]
    net.weights[-1] = (w * 0.1, b * 0.0)

    def batch_fn(idx):
        noise = (rng.uniform(0.0, 1.0, (len(idx), config.noise_dim)),
                 rng.uniform(0.0, 1.0, (len(idx), config.noise_dim)))
        return images[idx], None, {"noise": noise}

    net = nx.train(net, len(images), batch_fn, config.optim, rng, "blinder",
                   surrogate=surrogate.net, c=config.c_b, d=d_b)
    return Blinder(net, config.noise_dim, float(d_b), config.c_b)


def blind_batch(blinder: Blinder, images, rng: np.random.Generator) -> np.ndarray:
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    noise = rng.uniform(0.0, 1.0, (len(images), blinder.noise_dim))
    out, _, _ = nx.blinder_output(blinder.net, images, noise)
    return out


def blind(blinder: Blinder, image, rng: np.random.Generator) -> np.ndarray:
    return blind_batch(blinder, np.asarray(image)[None, :], rng)[0]
