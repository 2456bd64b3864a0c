"""Classifier training with an optional gradient-alignment reward.

The loss per batch is

    sum_x BCE(f(x), y) - sum_x sum_i lambda_i * cos^2(grad_x f(x), grad_x g_i(x))

The reward depends on the input gradient, so its parameter gradient needs a
second sweep over the tape that produced ``grad_x f``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .analysis import balanced_accuracy
from .features import FeatureError, make_feature
from .model import HEADS, ClassifierParams, logit_graph, predict_logits

log = logging.getLogger(__name__)

MAX_ROTATION_DEG = 20.0
MAX_SHIFT_FRACTION = 0.015


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 3.0e-5
    features: tuple[str, ...] = ()
    lambdas: tuple[float, ...] = ()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    head: str = "logit"
    augment: bool = True
    vanishing: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if len(self.features) != len(self.lambdas):
            raise ValueError("one lambda per feature required")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambdas must be nonnegative")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")

    @property
    def enhanced(self) -> bool:
        return any(v > 0 for v in self.lambdas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        d["lambdas"] = list(self.lambdas)
        return d


@dataclass
class TrainRecord:
    loss: list[float] = field(default_factory=list)
    val_balanced_accuracy: list[float | None] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


class LossTerms(NamedTuple):
    loss: float
    base: float
    reward: float
    skipped: int
    grads: dict[str, np.ndarray] | None


def _feature_gradients(features, images) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-feature (N, d) gradient stacks and validity masks."""
    n = images.shape[0]
    stacks, masks = [], []
    for f in features:
        g = np.zeros((n, images[0].size))
        ok = np.ones(n, dtype=bool)
        for i in range(n):
            try:
                g[i] = f.value_and_grad(images[i])[1].ravel()
            except FeatureError:
                ok[i] = False
        ok &= np.einsum("ij,ij->i", g, g) > 0
        stacks.append(g)
        masks.append(ok)
    return stacks, masks


def alignment_loss(params: ClassifierParams, images, labels, features: Sequence = (),
                   lambdas: Sequence[float] = (), head: str = "logit", need_grad: bool = True,
                   vanishing: float = 1e-12, feature_grads=None) -> LossTerms:
    """Batch loss (base BCE minus the alignment reward) and its parameter gradient.

    Samples whose classifier gradient norm is below ``vanishing``, or where a
    feature cannot be differentiated, contribute no reward for that feature
    and are counted in ``skipped``.
    """
    images = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(features) != len(lambdas):
        raise ValueError("one lambda per feature required")
    n = images.shape[0]
    tape = dc.Tape()
    names = list(params.tensors)
    p = {k: tape.leaf(v, k) for k, v in params.tensors.items()}
    active = [i for i, lam in enumerate(lambdas) if lam > 0]
    x = tape.leaf(images[:, None], "input") if active else dc.Var(images[:, None])
    z = logit_graph(p, x, params.arch)
    base = dc.sum(dc.softplus(z) - y * z)
    loss = base
    reward_value = 0.0
    skipped = 0
    if active:
        out = dc.sigmoid(z) if head == "probability" else z
        (gx,) = dc.grad(dc.sum(out), [x], create_graph=True)
        gx = dc.reshape(gx, (n, -1))
        nf = dc.sum(gx * gx, axis=1)
        live = nf.value > vanishing ** 2
        skipped += int(np.sum(~live))
        safe_nf = nf + (~live).astype(np.float64)
        if feature_grads is None:
            feature_grads = _feature_gradients([features[i] for i in active], images)
            stacks, masks = feature_grads
        else:
            stacks = [feature_grads[0][i] for i in active]
            masks = [feature_grads[1][i] for i in active]
        reward = None
        for i, G, ok in zip(active, stacks, masks):
            keep = (ok & live).astype(np.float64)
            skipped += int(np.sum(live & ~ok))
            ng = np.where(ok, np.einsum("ij,ij->i", G, G), 1.0)
            dot = dc.sum(gx * G, axis=1)
            cos2 = dot * dot / (safe_nf * ng)
            term = lambdas[i] * dc.sum(cos2 * keep)
            reward = term if reward is None else reward + term
        loss = base - reward
        reward_value = float(reward.value)
    grads = None
    if need_grad:
        gs = dc.grad(loss, [p[k] for k in names])
        grads = {k: g.value for k, g in zip(names, gs)}
    return LossTerms(float(loss.value), float(base.value), reward_value, skipped, grads)


class Adam:
    def __init__(self, shapes: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, tensors: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            tensors[k] = tensors[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        return out

    def load(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.array(state[f"adam.m.{k}"])
            self.v[k] = np.array(state[f"adam.v.{k}"])
        self.t = int(state["adam.t"][0])


# ---------------------------------------------------------------- augmentation

def affine_resample(image, angle_deg: float = 0.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Rotate about the image centre and translate; bilinear, zero fill."""
    x = np.asarray(image, dtype=np.float64)
    t = math.radians(angle_deg)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    centre = (np.array(x.shape, dtype=np.float64) - 1.0) / 2.0
    shift = np.asarray(shift, dtype=np.float64)
    # output o samples input R^T (o - centre - shift) + centre
    offset = centre - R.T @ (centre + shift)
    return ndimage.affine_transform(x, R.T, offset=offset, order=1, mode="constant", cval=0.0)


def augment(image, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    angle = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    shift = rng.uniform(-MAX_SHIFT_FRACTION, MAX_SHIFT_FRACTION, size=2) * np.array(x.shape)
    return affine_resample(x, angle, shift)


def balanced_sample(labels, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` indices with replacement, weights inverse to class frequency."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValueError("training data must contain both classes")
    w = 1.0 / counts[np.searchsorted(classes, labels)]
    return rng.choice(labels.size, size=n, replace=True, p=w / w.sum())


# ---------------------------------------------------------------- loop

def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(params: ClassifierParams, images, labels, config: TrainConfig,
          val: tuple[np.ndarray, np.ndarray] | None = None,
          on_epoch: Callable[[int, ClassifierParams, Adam, TrainRecord], None] | None = None,
          start_epoch: int = 0, optimizer_state: dict | None = None,
          record: TrainRecord | None = None) -> tuple[ClassifierParams, TrainRecord]:
    """Seeded mini-batch Adam training; returns new params and the epoch log.

    Each epoch draws ``len(labels)`` class-balanced samples with replacement,
    augments them, and takes one optimizer step per batch.  Epoch randomness
    is derived from ``(seed, epoch)``, so a resumed run matches an unbroken one.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("training data must contain both classes")
    d = images[0].size
    feats = [make_feature(name, d) for name in config.features]
    lambdas = list(config.lambdas)
    use = [f for f, lam in zip(feats, lambdas) if lam > 0]
    use_l = [lam for lam in lambdas if lam > 0]

    params = params.copy()
    tensors = params.tensors
    opt = Adam({k: v.shape for k, v in tensors.items()}, config.learning_rate,
               config.beta1, config.beta2, config.eps)
    if optimizer_state is not None:
        opt.load(optimizer_state)
    record = record or TrainRecord()
    n = labels.size

    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        order = balanced_sample(labels, n, rng)
        tot_loss = tot_reward = 0.0
        skipped = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = images[idx]
            if config.augment:
                batch = np.stack([augment(im, rng) for im in batch])
            terms = alignment_loss(params, batch, labels[idx], use, use_l, config.head,
                                   vanishing=config.vanishing)
            opt.step(tensors, terms.grads)
            tot_loss += terms.loss
            tot_reward += terms.reward
            skipped += terms.skipped
        record.loss.append(tot_loss / n)
        record.mean_reward.append(tot_reward / n)
        record.skipped.append(skipped)
        ba = None
        if val is not None and np.unique(val[1]).size == 2:
            ba = balanced_accuracy(predict_logits(params, val[0]) > 0, val[1])
        record.val_balanced_accuracy.append(ba)
        if not all(math.isfinite(v) for v in (record.loss[-1], record.mean_reward[-1])):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        log.info("epoch %d loss %.6g reward %.3g val_ba %s", epoch, record.loss[-1],
                 record.mean_reward[-1], ba)
        if on_epoch is not None:
            on_epoch(epoch, params, opt, record)
    return params, record
