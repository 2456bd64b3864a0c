"""Binary CNN classifier: three conv/avg-pool/ELU stages and three dense layers."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diffcore as dc

CHECKPOINT_MAGIC = b"FGFLOWCK"
CHECKPOINT_VERSION = 1

HEADS = ("logit", "probability")


class ResolutionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    resolution: int = 64
    channels: tuple[int, int, int] = (8, 16, 32)
    kernels: tuple[int, int, int] = (5, 3, 3)
    hidden: tuple[int, int] = (256, 128)

    def __post_init__(self):
        if self.resolution % 8:
            raise ValueError("resolution must be divisible by 8 (three 2x2 poolings)")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def flat_dim(self) -> int:
        side = self.resolution // 8
        return self.channels[-1] * side * side

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        c_in = 1
        for i, (c, k) in enumerate(zip(self.channels, self.kernels), start=1):
            out[f"conv{i}.w"] = (c, c_in, k, k)
            out[f"conv{i}.b"] = (c,)
            c_in = c
        dims = (self.flat_dim, *self.hidden, 1)
        for i in range(3):
            out[f"fc{i + 1}.w"] = (dims[i], dims[i + 1])
            out[f"fc{i + 1}.b"] = (dims[i + 1],)
        return out


@dataclass
class ClassifierParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        shapes = self.arch.shapes()
        if set(shapes) != set(self.tensors):
            raise ValueError(f"parameter names {sorted(self.tensors)} do not match architecture")
        for name, shape in shapes.items():
            t = np.asarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name}: non-finite values")
            self.tensors[name] = t

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].astype("<f8").tobytes())
        return h.hexdigest()


def init_params(arch: Architecture | None = None, seed: int = 0) -> ClassifierParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.shapes().items():
        wshape = arch.shapes()[name.replace(".b", ".w")]
        fan_in = int(np.prod(wshape[1:])) if name.startswith("conv") else wshape[0]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ClassifierParams(arch, tensors, seed)


def zero_params(arch: Architecture | None = None) -> ClassifierParams:
    arch = arch or Architecture()
    return ClassifierParams(arch, {k: np.zeros(s) for k, s in arch.shapes().items()})


def logit_graph(p: dict, x: dc.Var, arch: Architecture) -> dc.Var:
    """Logits of shape (N,) for images of shape (N, 1, R, R) on the tape."""
    n = x.shape[0]
    h = x
    for i in range(1, 4):
        h = dc.elu(dc.avg_pool2(dc.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])))
    h = dc.reshape(h, (n, arch.flat_dim))
    h = dc.elu(h @ p["fc1.w"] + p["fc1.b"])
    h = dc.elu(h @ p["fc2.w"] + p["fc2.b"])
    z = h @ p["fc3.w"] + p["fc3.b"]
    return dc.reshape(z, (n,))


def _as_batch(params: ClassifierParams, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    r = params.arch.resolution
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (r, r):
        raise ResolutionError(f"expected image(s) of shape ({r}, {r}), got {np.shape(images)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains NaN or Inf")
    return x[:, None]


class ClassifierOutput(NamedTuple):
    logit: float
    probability: float


def logistic(z):
    z = np.asarray(z, dtype=np.float64)
    return dc._sigmoid_np(z)


def predict_logits(params: ClassifierParams, images) -> np.ndarray:
    x = dc.Var(_as_batch(params, images))
    p = {k: dc.Var(v) for k, v in params.tensors.items()}
    return logit_graph(p, x, params.arch).value.copy()


def predict(params: ClassifierParams, image) -> ClassifierOutput:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ResolutionError("predict takes a single 2-D image")
    z = float(predict_logits(params, image)[0])
    return ClassifierOutput(z, float(logistic(z)))


def logits_and_input_grads(params: ClassifierParams, images, head: str = "logit"):
    """Logits (N,) and per-image gradients (N, R, R) of the chosen head.

    Samples are independent, so one sweep from the summed output gives every
    per-sample input gradient at once.
    """
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    x = _as_batch(params, images)
    tape = dc.Tape()
    xv = tape.leaf(x, "input")
    p = {k: dc.Var(v) for k, v in params.tensors.items()}
    z = logit_graph(p, xv, params.arch)
    out = dc.sigmoid(z) if head == "probability" else z
    (g,) = dc.grad(dc.sum(out), [xv])
    return z.value.copy(), g.value[:, 0]


def input_gradient(params: ClassifierParams, image, head: str = "logit") -> dc.Gradient:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ResolutionError("input_gradient takes a single 2-D image")
    _, g = logits_and_input_grads(params, image, head)
    return dc.Gradient("input", g[0])


class ClassifierModel:
    """Adapter exposing the classifier to the geometry routines."""

    def __init__(self, params: ClassifierParams, head: str = "logit"):
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        self.params = params
        self.head = head

    def logits(self, images) -> np.ndarray:
        return predict_logits(self.params, images)

    def logits_and_grads(self, images):
        return logits_and_input_grads(self.params, images, self.head)

    def output_jacobian(self, image) -> np.ndarray:
        """Rows are the gradients of (p, 1 - p); shape (2, d)."""
        _, g = logits_and_input_grads(self.params, image, "probability")
        row = g[0].ravel()
        return np.stack([row, -row])


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic "FGFLOWCK"
#   uint32    format version
#   uint32    header length L
#   L bytes   UTF-8 JSON header: architecture, seed, tensor names/shapes, extra metadata
#   ...       tensors in header order as little-endian float64, row-major

def save_checkpoint(path, params: ClassifierParams, extra_tensors: dict | None = None,
                    meta: dict | None = None) -> None:
    extra_tensors = extra_tensors or {}
    blocks = list(params.tensors.items()) + list(extra_tensors.items())
    header = {
        "endianness": "little",
        "dtype": "float64",
        "architecture": asdict(params.arch),
        "seed": params.seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
        "extra": [{"name": k, "shape": list(np.shape(v))} for k, v in extra_tensors.items()],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for _, v in blocks:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    params: ClassifierParams
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a classifier checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen

    def take(entries):
        nonlocal offset
        out = {}
        for e in entries:
            shape = tuple(e["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(data):
                raise CheckpointError(f"{path}: truncated at tensor {e['name']}")
            out[e["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                           offset=offset).reshape(shape).astype(np.float64)
            offset = end
        return out

    arch_d = header["architecture"]
    arch = Architecture(**{k: tuple(v) if isinstance(v, list) else v for k, v in arch_d.items()})
    tensors = take(header["tensors"])
    extra = take(header["extra"])
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(ClassifierParams(arch, tensors, header["seed"]), extra, header["meta"])
