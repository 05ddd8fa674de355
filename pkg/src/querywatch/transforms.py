"""Randomized image transforms used for query blinding and encoder positives.

Images are flat HWC vectors; the geometric kinds need the ``(h, w, c)`` shape.
Every random parameter is drawn as ``r * unit_draw`` so that, for a fixed
generator seed, the transform strength is a smooth function of ``r`` (the
calibration search relies on that).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("uniform-noise", "translate", "rotate", "pixel-scale", "crop-resize",
         "brightness", "contrast", "gaussian-noise")
GEOMETRIC = ("translate", "rotate", "crop-resize")

# upper bounds of the legal parameter range; crop-resize is half-open
_R_MAX = {
    "uniform-noise": 1.0,
    "translate": 8.0,  # pixels
    "rotate": 0.25,  # multiples of pi; past about 45 degrees distortion stops growing with r
    "pixel-scale": 1.0,
    "crop-resize": 0.5,
    "brightness": 1.0,
    "contrast": 1.0,
    "gaussian-noise": 1.0,
}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    r: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        hi = _R_MAX[self.kind]
        ok = 0.0 <= self.r < hi if self.kind == "crop-resize" else 0.0 <= self.r <= hi
        if not ok:
            raise ValueError(f"{self.kind}: r={self.r} outside legal range [0, {hi}]")

    def __str__(self):
        return f"{self.kind}:{self.r:g}"

    @classmethod
    def parse(cls, text: str) -> "TransformSpec":
        kind, _, r = text.partition(":")
        return cls(kind.strip(), float(r))


def legal_max(kind: str) -> float:
    return _R_MAX[kind]


def _bilinear(images: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Sample ``images`` (n, h, w, c) at fractional pixel-center coordinates.

    ``src_y``/``src_x`` are (n, h, w) in index units (pixel ``i`` has its center
    at ``i``).  Samples outside the image read as zero.
    """
    n, h, w, c = images.shape
    padded = np.zeros((n, h + 2, w + 2, c))
    padded[:, 1:-1, 1:-1] = images
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    wy = (src_y - y0)[..., None]
    wx = (src_x - x0)[..., None]
    # anything at or beyond the border lands on the zero frame
    iy0 = np.clip(y0, -1, h).astype(int) + 1
    ix0 = np.clip(x0, -1, w).astype(int) + 1
    iy1 = np.clip(y0 + 1, -1, h).astype(int) + 1
    ix1 = np.clip(x0 + 1, -1, w).astype(int) + 1
    b = np.arange(n)[:, None, None]
    return ((1 - wy) * (1 - wx) * padded[b, iy0, ix0] + (1 - wy) * wx * padded[b, iy0, ix1]
            + wy * (1 - wx) * padded[b, iy1, ix0] + wy * wx * padded[b, iy1, ix1])


def _grid(n, h, w):
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.broadcast_to(yy, (n, h, w)), np.broadcast_to(xx, (n, h, w))


def translate_images(images: np.ndarray, dy, dx) -> np.ndarray:
    """Shift (n, h, w, c) images down by ``dy`` and right by ``dx`` pixels."""
    n, h, w, _ = images.shape
    yy, xx = _grid(n, h, w)
    dy = np.broadcast_to(np.asarray(dy, dtype=np.float64), (n,))[:, None, None]
    dx = np.broadcast_to(np.asarray(dx, dtype=np.float64), (n,))[:, None, None]
    return _bilinear(images, yy - dy, xx - dx)


def rotate_images(images: np.ndarray, angle) -> np.ndarray:
    """Rotate (n, h, w, c) images by ``angle`` radians about the image center."""
    n, h, w, _ = images.shape
    yy, xx = _grid(n, h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = np.broadcast_to(np.asarray(angle, dtype=np.float64), (n,))[:, None, None]
    cos, sin = np.cos(a), np.sin(a)
    # inverse map: output pixel -> source location
    src_y = cy + cos * (yy - cy) - sin * (xx - cx)
    src_x = cx + sin * (yy - cy) + cos * (xx - cx)
    return _bilinear(images, src_y, src_x)


def crop_resize_images(images: np.ndarray, c) -> np.ndarray:
    """Crop to the normalized box [c, c, 1-c, 1-c] and resize back to full size."""
    n, h, w, _ = images.shape
    yy, xx = _grid(n, h, w)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (n,))[:, None, None]
    # output pixel center u in (0, 1) -> normalized source c + u * (1 - 2c)
    src_y = (c + (yy + 0.5) / h * (1 - 2 * c)) * h - 0.5
    src_x = (c + (xx + 0.5) / w * (1 - 2 * c)) * w - 0.5
    return _bilinear(images, src_y, src_x)


def apply_batch(spec: TransformSpec, images, rng: np.random.Generator, shape) -> np.ndarray:
    """Apply ``spec`` to each row of ``images`` with independent random parameters."""
    x = np.atleast_2d(np.asarray(images, dtype=np.float64))
    n = len(x)
    h, w, c = shape
    if x.shape[1] != h * w * c:
        raise ValueError(f"image dimension {x.shape[1]} does not match shape {tuple(shape)}")
    r = spec.r
    if r == 0.0:
        return np.clip(x, 0.0, 1.0)
    kind = spec.kind
    if kind == "uniform-noise":
        out = x + r * rng.uniform(-1.0, 1.0, x.shape)
    elif kind == "gaussian-noise":
        out = x + r * rng.standard_normal(x.shape)
    elif kind == "brightness":
        out = x + r * rng.uniform(-1.0, 1.0, (n, 1))
    elif kind == "pixel-scale":
        out = x * (1.0 + r * rng.uniform(-1.0, 1.0, (n, 1)))
    elif kind == "contrast":
        factor = 1.0 - r * rng.uniform(0.0, 1.0, (n, 1, 1))
        img = x.reshape(n, h * w, c)
        mean = img.mean(axis=1, keepdims=True)
        out = (mean + factor * (img - mean)).reshape(n, -1)
    else:
        img = x.reshape(n, h, w, c)
        if kind == "translate":
            shift = r * rng.uniform(-1.0, 1.0, (n, 2))
            out = translate_images(img, shift[:, 0], shift[:, 1])
        elif kind == "rotate":
            out = rotate_images(img, np.pi * r * rng.uniform(-1.0, 1.0, n))
        else:
            out = crop_resize_images(img, r * rng.uniform(0.0, 1.0, n))
        out = out.reshape(n, -1)
    return np.clip(out, 0.0, 1.0)


def apply(spec: TransformSpec, image, rng: np.random.Generator, shape) -> np.ndarray:
    return apply_batch(spec, np.asarray(image)[None, :], rng, shape)[0]


def expected_distortion(spec: TransformSpec, images, trials: int, rng: np.random.Generator, shape) -> float:
    """Monte-Carlo mean of ||T(x) - x||_2 over ``trials`` draws of image and parameter."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    if len(images) == 0 or images.shape[1] == 0:
        raise ValueError("need at least one sample image")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    picks = images[rng.integers(0, len(images), trials)]
    out = apply_batch(spec, picks, rng, shape)
    return float(np.mean(np.linalg.norm(out - picks, axis=1)))


def calibrate(kind: str, images, target: float, rng: np.random.Generator | int = 0, shape=None,
              trials: int = 200, tol: float = 0.05, iters: int = 40) -> TransformSpec:
    """Bisect ``r`` so that the expected distortion of ``kind`` hits ``target``.

    Each evaluation reseeds from the same value (common random numbers), which
    makes the Monte-Carlo estimate a deterministic, essentially monotone
    function of ``r``.
    """
    if target < 0:
        raise ValueError("target must be nonnegative")
    if target == 0:
        return TransformSpec(kind, 0.0)
    if shape is None:
        raise ValueError("shape is required")
    seed = int(rng.integers(0, 2**63 - 1)) if isinstance(rng, np.random.Generator) else int(rng)

    def measure(r):
        return expected_distortion(TransformSpec(kind, r), images, trials, np.random.default_rng(seed), shape)

    hi = _R_MAX[kind] * (1 - 1e-9) if kind == "crop-resize" else _R_MAX[kind]
    top = measure(hi)
    if top < target * (1 - tol):
        raise CalibrationError(f"{kind}: target {target:g} unreachable (max {top:.4g} at r={hi:g})")
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if measure(mid) < target:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda r: abs(measure(r) - target))
    got = measure(best)
    if abs(got - target) > tol * target:
        raise CalibrationError(f"{kind}: closest distortion {got:.4g} misses target {target:g}")
    return TransformSpec(kind, float(best))


def scaled_target(paper_l2: float, dim: int) -> float:
    """Rescale a distortion quoted for 3072-dim images to ``dim`` dimensions."""
    return paper_l2 * np.sqrt(dim / 3072.0)


LOW_DISTORTION = 2.32
HIGH_DISTORTION = 5.10
HIGH_KINDS = ("pixel-scale", "brightness", "contrast")


def calibrate_set(images, shape, target: float, kinds=KINDS, rng: int = 0, trials: int = 200) -> dict:
    """Calibrate every kind in ``kinds``; kinds that cannot reach ``target`` are skipped."""
    out = {}
    for i, kind in enumerate(kinds):
        try:
            out[kind] = calibrate(kind, images, target, rng + i, shape, trials)
        except CalibrationError:
            continue
    return out
