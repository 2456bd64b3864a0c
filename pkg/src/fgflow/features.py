"""Interpretable image features with exact gradients.

Pixel coordinates are ``u = (row, col)``.  All three moment features share the
intensity-weighted centroid ``mu`` and covariance ``C``; their gradients follow
from ``dC/dI(v) = ((v - mu)(v - mu)^T - C) / g1`` (the centroid terms cancel
because the weighted deviations sum to zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

MASS_THRESHOLD = 1e-12
EIGEN_FLOOR = 1e-9
TIE_TOLERANCE = 1e-9


class FeatureError(ValueError):
    """A feature cannot be evaluated (or differentiated) at this image."""

    index: int | None = None


class DegenerateMassError(FeatureError):
    pass


class NondifferentiablePointError(FeatureError):
    pass


class EigenFloorError(FeatureError):
    pass


class FeatureMap(Protocol):
    name: str

    def value_and_grad(self, image: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class MomentSummary:
    g1: float
    mu: np.ndarray
    C: np.ndarray
    eigenvalues: tuple[float, float]


def _image(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {x.shape}")
    return x


def _grid(shape):
    rows, cols = np.indices(shape, dtype=np.float64)
    return rows, cols


def _eigs(C) -> tuple[float, float, float]:
    """Closed-form eigenvalues of a symmetric 2x2 matrix, plus the half-gap r."""
    a, b, c = C[0, 0], C[0, 1], C[1, 1]
    half_tr = 0.5 * (a + c)
    r = float(np.hypot(0.5 * (a - c), b))
    return half_tr + r, half_tr - r, r


def moments(image) -> MomentSummary:
    x = _image(image)
    g1 = float(x.sum())
    if g1 <= MASS_THRESHOLD:
        raise DegenerateMassError(f"total intensity {g1:.3g} is not above {MASS_THRESHOLD}")
    rows, cols = _grid(x.shape)
    mu = np.array([(rows * x).sum(), (cols * x).sum()]) / g1
    dr, dc_ = rows - mu[0], cols - mu[1]
    C = np.array([[(x * dr * dr).sum(), (x * dr * dc_).sum()],
                  [0.0, (x * dc_ * dc_).sum()]]) / g1
    C[1, 0] = C[0, 1]
    l1, l2, _ = _eigs(C)
    return MomentSummary(g1, mu, C, (l1, max(l2, 0.0)))


def brightness(image) -> tuple[float, np.ndarray]:
    x = _image(image)
    return float(x.sum()), np.ones_like(x)


def extent(image) -> tuple[float, np.ndarray]:
    x = _image(image)
    m = moments(x)
    rows, cols = _grid(x.shape)
    tr = float(m.C[0, 0] + m.C[1, 1])
    dist2 = (rows - m.mu[0]) ** 2 + (cols - m.mu[1]) ** 2
    return tr, (dist2 - tr) / m.g1


def log_aspect_ratio(image) -> tuple[float, np.ndarray]:
    """``log(sigma1) - log(sigma2) = artanh(2r / tr C)`` with its gradient."""
    x = _image(image)
    m = moments(x)
    C = m.C
    l1, l2, r = _eigs(C)
    if l1 - l2 < TIE_TOLERANCE:
        raise NondifferentiablePointError(
            f"covariance is isotropic within {TIE_TOLERANCE} (eigenvalue gap {l1 - l2:.3g})")
    if l2 < EIGEN_FLOOR:
        raise EigenFloorError(f"minor eigenvalue {l2:.3g} is below the floor {EIGEN_FLOOR}")
    value = 0.5 * (np.log(l1) - np.log(l2))

    # value = artanh(s), s = 2r / T, r = hypot((a - c)/2, b), T = a + c
    a, b, c = C[0, 0], C[0, 1], C[1, 1]
    T = a + c
    s = 2.0 * r / T
    dv_ds = 1.0 / (1.0 - s * s)
    dr_da = (a - c) / (4.0 * r)
    dr_db = b / r
    ds_da = 2.0 * dr_da / T - 2.0 * r / T**2
    ds_dc = -2.0 * dr_da / T - 2.0 * r / T**2
    ds_db = 2.0 * dr_db / T

    rows, cols = _grid(x.shape)
    dr_, dc_ = rows - m.mu[0], cols - m.mu[1]
    # dC/dI(v) entries
    da = (dr_ * dr_ - a) / m.g1
    db = (dr_ * dc_ - b) / m.g1
    dc2 = (dc_ * dc_ - c) / m.g1
    grad = dv_ds * (ds_da * da + ds_db * db + ds_dc * dc2)
    return float(value), grad


@dataclass(frozen=True)
class NamedFeature:
    name: str
    fn: object = field(repr=False)

    def value_and_grad(self, image):
        return self.fn(image)


@dataclass
class RandomFeature:
    """Fixed linear functional ``w . x`` with ``w ~ N(0, I_d)`` drawn from ``seed``."""

    seed: int
    d: int
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.random.default_rng(self.seed).standard_normal(self.d)
        w.flags.writeable = False
        self.weights = w

    @property
    def name(self) -> str:
        return f"random:{self.seed}"

    def value_and_grad(self, image):
        x = _image(image)
        if x.size != self.d:
            raise ValueError(f"random feature built for d={self.d}, image has {x.size} pixels")
        return float(self.weights @ x.ravel()), self.weights.reshape(x.shape).copy()


def random_feature(seed: int, d: int) -> RandomFeature:
    return RandomFeature(seed, d)


BRIGHTNESS = NamedFeature("brightness", brightness)
EXTENT = NamedFeature("extent", extent)
LOG_ASPECT_RATIO = NamedFeature("log_aspect_ratio", log_aspect_ratio)
INTERPRETABLE_FEATURES = ("brightness", "extent", "log_aspect_ratio")

DISPLAY_NAMES = {
    "brightness": "overall brightness",
    "extent": "tumor extent",
    "log_aspect_ratio": "log aspect ratio",
}


def make_feature(name: str, d: int | None = None):
    """Look up a feature by registry name; ``random:<seed>`` needs ``d``."""
    fixed = {"brightness": BRIGHTNESS, "extent": EXTENT, "log_aspect_ratio": LOG_ASPECT_RATIO}
    if name in fixed:
        return fixed[name]
    if name.startswith("random:"):
        try:
            seed = int(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad random feature name {name!r}") from None
        if d is None:
            raise ValueError("random features need the pixel count d")
        return RandomFeature(seed, d)
    raise ValueError(f"unknown feature {name!r}; known: {sorted(fixed)} or random:<seed>")


def is_random(name: str) -> bool:
    return name.startswith("random:")


class FeatureSet(list):
    """Ordered feature maps; stacked gradients give the m x d Jacobian."""

    @classmethod
    def from_names(cls, names: Sequence[str], d: int | None = None) -> "FeatureSet":
        return cls(make_feature(n, d) for n in names)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self]


def feature_jacobian(features: Sequence, image) -> np.ndarray:
    x = _image(image)
    rows = []
    for i, f in enumerate(features):
        try:
            _, g = f.value_and_grad(x)
        except FeatureError as exc:
            exc.index = i
            exc.args = (f"feature {i} ({f.name}): {exc}",)
            raise
        rows.append(np.asarray(g, dtype=np.float64).ravel())
    return np.vstack(rows) if rows else np.zeros((0, x.size))
