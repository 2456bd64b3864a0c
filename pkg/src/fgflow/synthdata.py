"""Synthetic masked-blob images with labels driven by known feature values.

Each image holds one elliptical blob with a Gaussian intensity falloff,
``I = peak * exp(-2 rho^2)`` for ``rho <= 1`` where ``rho`` is the elliptical
radius in units of the semi-axes, and zero outside the ellipse.  Labels are a
function of the generating parameters, not of the rendered pixels.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"FGFLOWDS"
DATASET_VERSION = 1
MARGIN = 2
RULES = ("brightness-threshold", "extent-threshold", "aspect-threshold", "mixed-logistic")
_CALIBRATION_DRAWS = 20000
_CALIBRATION_STREAM = 0x5EED

# Normalised radial moments of exp(-2 rho^2) on the unit disc.
_MASS = (1.0 - math.exp(-2.0)) / 4.0                                  # int_0^1 r e^{-2r^2} dr
_SECOND = (1.0 - 3.0 * math.exp(-2.0)) / 8.0 / _MASS                 # E[rho^2]


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class BlobSpec:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float
    peak: float
    noise: float = 0.0

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise InfeasibleSpecError("semi-axes must be positive")

    def half_extents(self) -> tuple[float, float]:
        a, b = self.semi_axes
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return math.hypot(a * c, b * s), math.hypot(a * s, b * c)

    # generative feature values (continuum limits of the rendered moments)
    @property
    def true_brightness(self) -> float:
        a, b = self.semi_axes
        return self.peak * math.pi * a * b * (1.0 - math.exp(-2.0)) / 2.0

    @property
    def true_extent(self) -> float:
        a, b = self.semi_axes
        return 0.5 * _SECOND * (a * a + b * b)

    @property
    def true_log_aspect(self) -> float:
        a, b = self.semi_axes
        return abs(math.log(a / b))


@dataclass(frozen=True)
class SpecDistribution:
    """Ranges for blob parameters; semi-axes are given as fractions of the resolution."""

    resolution: int = 64
    semi_axis_range: tuple[float, float] = (0.0625, 0.1875)
    peak_range: tuple[float, float] = (0.4, 1.0)
    noise: float = 0.02

    def semi_axis_pixels(self) -> tuple[float, float]:
        lo, hi = self.semi_axis_range
        return lo * self.resolution, hi * self.resolution

    def check(self):
        _, hi = self.semi_axis_pixels()
        if 2 * hi + 2 * MARGIN + 1 > self.resolution:
            raise InfeasibleSpecError(
                f"blobs up to {hi:.1f} px semi-axis do not fit a {self.resolution} px image")
        if self.semi_axis_range[0] <= 0:
            raise InfeasibleSpecError("semi-axis range must be positive")

    def sample_shape(self, rng: np.random.Generator) -> tuple[tuple[float, float], float, float]:
        lo, hi = self.semi_axis_pixels()
        a, b = rng.uniform(lo, hi, size=2)
        rotation = rng.uniform(0.0, math.pi)
        peak = rng.uniform(*self.peak_range)
        return (float(a), float(b)), float(rotation), float(peak)

    def sample(self, rng: np.random.Generator) -> BlobSpec:
        axes, rotation, peak = self.sample_shape(rng)
        proto = BlobSpec((0.0, 0.0), axes, rotation, peak, self.noise)
        hr, hc = proto.half_extents()
        r = self.resolution
        cr = rng.uniform(MARGIN + hr, r - 1 - MARGIN - hr)
        cc = rng.uniform(MARGIN + hc, r - 1 - MARGIN - hc)
        return BlobSpec((float(cr), float(cc)), axes, rotation, peak, self.noise)


def elliptic_radius2(spec: BlobSpec, resolution: int) -> np.ndarray:
    rows, cols = np.indices((resolution, resolution), dtype=np.float64)
    dr, dc = rows - spec.center[0], cols - spec.center[1]
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    u = c * dr + s * dc
    v = -s * dr + c * dc
    a, b = spec.semi_axes
    return (u / a) ** 2 + (v / b) ** 2


def support(spec: BlobSpec, resolution: int) -> np.ndarray:
    return elliptic_radius2(spec, resolution) <= 1.0


def mask(image, blob: BlobSpec | np.ndarray) -> np.ndarray:
    """Zero every pixel outside the blob support (a BlobSpec or boolean mask)."""
    x = np.asarray(image, dtype=np.float64)
    keep = blob if isinstance(blob, np.ndarray) else support(blob, x.shape[0])
    return np.where(keep, x, 0.0)


def render(spec: BlobSpec, resolution: int, rng: np.random.Generator | None = None) -> np.ndarray:
    hr, hc = spec.half_extents()
    cr, cc = spec.center
    if (cr - hr < MARGIN or cc - hc < MARGIN or cr + hr > resolution - 1 - MARGIN
            or cc + hc > resolution - 1 - MARGIN):
        raise InfeasibleSpecError(f"blob {spec} does not fit in {resolution} px with margin {MARGIN}")
    rho2 = elliptic_radius2(spec, resolution)
    img = spec.peak * np.exp(-2.0 * rho2)
    if spec.noise > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        img = img + spec.noise * rng.standard_normal(img.shape)
    return mask(np.clip(img, 0.0, 1.0), rho2 <= 1.0)


# ---------------------------------------------------------------- labels

@dataclass(frozen=True)
class LabelRule:
    name: str = "brightness-threshold"
    positive_rate: float = 0.13
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sharpness: float = 4.0
    threshold: float | None = None

    def __post_init__(self):
        if self.name not in RULES:
            raise ValueError(f"unknown label rule {self.name!r}; choose from {RULES}")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")


def _generative_features(specs) -> np.ndarray:
    return np.array([[s.true_brightness, s.true_extent, s.true_log_aspect] for s in specs])


def _rule_score(rule: LabelRule, feats: np.ndarray, ref: np.ndarray) -> np.ndarray:
    col = {"brightness-threshold": 0, "extent-threshold": 1, "aspect-threshold": 2}
    if rule.name in col:
        return feats[:, col[rule.name]]
    mean, std = ref.mean(axis=0), ref.std(axis=0)
    return ((feats - mean) / std) @ np.asarray(rule.weights, dtype=np.float64)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class CalibratedRule:
    rule: LabelRule
    threshold: float
    reference: np.ndarray = field(repr=False)

    def probabilities(self, specs) -> np.ndarray:
        score = _rule_score(self.rule, _generative_features(specs), self.reference)
        if self.rule.name == "mixed-logistic":
            return _sigmoid(self.rule.sharpness * (score - self.threshold))
        return (score > self.threshold).astype(np.float64)


def calibrate(rule: LabelRule, dist: SpecDistribution, seed: int) -> CalibratedRule:
    """Fix the rule's threshold so the expected positive rate hits the target."""
    rng = np.random.default_rng([seed, _CALIBRATION_STREAM])
    ref_specs = []
    for _ in range(_CALIBRATION_DRAWS):
        axes, rotation, peak = dist.sample_shape(rng)
        ref_specs.append(BlobSpec((0.0, 0.0), axes, rotation, peak))
    ref = _generative_features(ref_specs)
    score = _rule_score(rule, ref, ref)
    if rule.threshold is not None:
        return CalibratedRule(rule, float(rule.threshold), ref)
    if rule.name != "mixed-logistic":
        return CalibratedRule(rule, float(np.quantile(score, 1.0 - rule.positive_rate)), ref)
    lo, hi = float(score.min()) - 10.0, float(score.max()) + 10.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        rate = float(_sigmoid(rule.sharpness * (score - mid)).mean())
        lo, hi = (mid, hi) if rate > rule.positive_rate else (lo, mid)
    return CalibratedRule(rule, 0.5 * (lo + hi), ref)


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)
    specs: list[BlobSpec] | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[1])

    @property
    def positive_rate(self) -> float:
        return float(np.mean(self.labels))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        specs = [self.specs[i] for i in idx] if self.specs is not None else None
        return Dataset(self.images[idx], self.labels[idx], dict(self.meta), specs)


def generate(n: int, dist: SpecDistribution | None = None, rule: LabelRule | None = None,
             seed: int = 0) -> Dataset:
    """Render ``n`` labelled blob images; sample i uses its own spawned RNG stream."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    dist = dist or SpecDistribution()
    rule = rule or LabelRule()
    dist.check()
    cal = calibrate(rule, dist, seed)
    streams = np.random.SeedSequence(seed).spawn(n)
    images = np.empty((n, dist.resolution, dist.resolution))
    specs = []
    draws = np.empty(n)
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        spec = dist.sample(rng)
        images[i] = render(spec, dist.resolution, rng)
        draws[i] = rng.uniform()
        specs.append(spec)
    labels = (draws < cal.probabilities(specs)).astype(np.uint8)
    meta = {
        "seed": seed,
        "resolution": dist.resolution,
        "rule": asdict(rule),
        "threshold": cal.threshold,
        "distribution": asdict(dist),
    }
    return Dataset(images, labels, meta, specs)


def stratified_split(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, held_out) with ``fraction`` of each class held out."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5917])
    train, held = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        held.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(held, dtype=int))


# File layout (little-endian):
#   8 bytes  magic "FGFLOWDS"
#   uint32   version
#   uint32   n
#   uint32   height, uint32 width
#   int64    seed (-1 when unknown)
#   uint32   header length L, then L bytes UTF-8 JSON (rule and generator metadata)
#   n records of height*width float64 pixels followed by one uint8 label

def save_dataset(path, ds: Dataset) -> dict:
    path = Path(path)
    n, h, w = ds.images.shape
    raw = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
    seed = ds.meta.get("seed")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIIqI", DATASET_VERSION, n, h, w,
                             -1 if seed is None else int(seed), len(raw)))
        fh.write(raw)
        for img, lab in zip(ds.images, ds.labels):
            fh.write(np.ascontiguousarray(img, dtype="<f8").tobytes())
            fh.write(struct.pack("<B", int(lab)))
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "format": "fgflow-dataset",
        "version": DATASET_VERSION,
        "file": path.name,
        "sha256": digest,
        "n": int(n),
        "height": int(h),
        "width": int(w),
        "positives": int(np.sum(ds.labels)),
        "positive_rate": float(np.mean(ds.labels)),
        "meta": ds.meta,
    }
    path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, n, h, w, seed, hlen = struct.unpack_from("<IIIIqI", data, 8)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 8 + struct.calcsize("<IIIIqI")
    meta = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    rec = h * w * 8 + 1
    if len(data) - off != n * rec:
        raise ValueError(f"{path}: expected {n} records, file size disagrees")
    body = np.frombuffer(data, dtype=np.uint8, offset=off).reshape(n, rec)
    images = body[:, :-1].copy().view("<f8").reshape(n, h, w).astype(np.float64)
    labels = body[:, -1].copy()
    return Dataset(images, labels, meta)


def load_external(image_paths, mask_paths, labels, resolution: int | None = None) -> Dataset:
    """Import 8/16-bit grayscale rasters with binary masks.

    Intensities are scaled to [0, 1] by the raster's bit depth and pixels
    outside the mask are zeroed; ``resolution`` resizes bilinearly.
    """
    from PIL import Image

    images = []
    for ip, mp in zip(image_paths, mask_paths, strict=True):
        with Image.open(ip) as im:
            arr = np.asarray(im)
            if arr.ndim != 2:
                raise ValueError(f"{ip}: expected a single-channel raster")
            scale = 65535.0 if arr.dtype.itemsize >= 2 else 255.0
            img = arr.astype(np.float64) / scale
            if resolution is not None and img.shape != (resolution, resolution):
                img = np.asarray(Image.fromarray(img.astype(np.float32)).resize(
                    (resolution, resolution), Image.BILINEAR), dtype=np.float64)
        with Image.open(mp) as m:
            keep = np.asarray(m) > 0
            if resolution is not None and keep.shape != (resolution, resolution):
                keep = np.asarray(m.convert("L").resize((resolution, resolution), Image.NEAREST)) > 0
        images.append(mask(np.clip(img, 0.0, 1.0), keep))
    labels = np.asarray(labels, dtype=np.uint8)
    if len(labels) != len(images):
        raise ValueError("one label per image required")
    return Dataset(np.stack(images), labels, {"source": "external"})
