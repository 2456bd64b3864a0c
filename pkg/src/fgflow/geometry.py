"""Gradient alignment between a classifier and interpretable features.

Pointwise score ``S = |grad_par|^2 / |grad f|^2`` where ``grad_par`` is the
orthogonal projection of the classifier gradient onto the span of the feature
gradients, and the flow score ``F`` integrates numerator and denominator
along the gradient flow from a sample to the decision boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .diffcore import Gradient
from .features import FeatureError, feature_jacobian

PINV_RTOL = 1e-10
VANISHING_GRADIENT = 1e-12

BOUNDARY = "boundary-crossed"
MAX_STEPS = "max-steps"
VANISHING = "vanishing-gradient"
CRITICAL = "critical-point"


class CriticalPointError(ValueError):
    """A gradient needed for a score is zero."""


class DegenerateFeatureError(ValueError):
    """The feature Jacobian has no nonzero row."""


class EmptyPathError(ValueError):
    pass


def _vec(g) -> np.ndarray:
    if isinstance(g, Gradient):
        g = g.vector
    return np.asarray(g, dtype=np.float64).ravel()


@dataclass(frozen=True)
class AlignmentScore:
    s: float
    parallel_sq: float
    total_sq: float

    @property
    def perpendicular_sq(self) -> float:
        return self.total_sq - self.parallel_sq


def pointwise_alignment_single(grad_f, grad_g) -> AlignmentScore:
    f, g = _vec(grad_f), _vec(grad_g)
    nf2, ng2 = float(f @ f), float(g @ g)
    if nf2 == 0.0:
        raise CriticalPointError("classifier gradient vanishes")
    if ng2 == 0.0:
        raise CriticalPointError("feature gradient vanishes")
    dot = float(f @ g)
    s = dot * dot / (nf2 * ng2)
    return AlignmentScore(s, s * nf2, nf2)


def row_space_basis(jac) -> np.ndarray:
    """Orthonormal basis (r x d) of the span of the Jacobian rows.

    Singular values of ``Dg`` with ``sigma^2 <= PINV_RTOL * sigma_max^2`` are
    dropped, i.e. the same cut as a relative tolerance on ``Dg Dg^T``.
    """
    J = np.atleast_2d(np.asarray(jac, dtype=np.float64))
    if J.size == 0 or not np.any(J):
        raise DegenerateFeatureError("feature Jacobian is all zero")
    _, sv, vt = np.linalg.svd(J, full_matrices=False)
    keep = sv * sv > PINV_RTOL * sv[0] * sv[0]
    return vt[keep]


def project_gradient(grad_f, jac) -> tuple[np.ndarray, np.ndarray]:
    """Split ``grad_f`` into its component in the feature-gradient span and the rest."""
    f = _vec(grad_f)
    V = row_space_basis(jac)
    parallel = V.T @ (V @ f)
    return parallel, f - parallel


def pointwise_alignment_multi(grad_f, jac) -> AlignmentScore:
    f = _vec(grad_f)
    nf2 = float(f @ f)
    if nf2 == 0.0:
        raise CriticalPointError("classifier gradient vanishes")
    V = row_space_basis(jac)
    coeffs = V @ f
    par2 = min(float(coeffs @ coeffs), nf2)
    return AlignmentScore(par2 / nf2, par2, nf2)


# ---------------------------------------------------------------- rank

@dataclass(frozen=True)
class RankReport:
    singular_values: np.ndarray
    numerical_rank: int
    is_regular: bool


def rank_of(jacobian, tol: float = 1e-8) -> RankReport:
    J = np.atleast_2d(np.asarray(jacobian, dtype=np.float64))
    k = J.shape[0]
    sv = np.linalg.svd(J, compute_uv=False)
    top = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > tol * top)) if top > 0 else 0
    return RankReport(sv, rank, rank == k - 1)


def rank_report(model, image, tol: float = 1e-8) -> RankReport:
    """Numerical rank of the K x d output Jacobian; regular iff rank = K - 1."""
    return rank_of(model.output_jacobian(image), tol)


# ---------------------------------------------------------------- flow

class FlowModel(Protocol):
    def logits(self, images) -> np.ndarray: ...

    def logits_and_grads(self, images) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class FlowConfig:
    """Explicit Euler settings.

    ``step_size`` is the time step; ``None`` picks ``step_scale / |grad f(x0)|``
    per sample, so the first displacement has length ``step_scale``.
    """

    step_size: float | None = None
    step_scale: float = 0.5
    max_steps: int = 1000
    vanishing: float = VANISHING_GRADIENT

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.step_scale <= 0 or self.max_steps < 0:
            raise ValueError("step_scale must be positive and max_steps nonnegative")


@dataclass
class FlowPath:
    """Euler trajectory toward the decision boundary.

    ``points[k + 1] = points[k] + step_size * directions[k]`` exactly, with
    ``directions[k] = -sign(logit(x0)) * gradients[k]``.  ``weights[k]`` is the
    quadrature time weight of interval k (``step_size``, or a fraction of it for
    the interval that crosses the boundary).
    """

    points: list[np.ndarray]
    gradients: list[np.ndarray]
    logits: list[float]
    step_size: float
    weights: list[float]
    termination: str
    direction_sign: float

    @property
    def steps_taken(self) -> int:
        return len(self.points) - 1

    @property
    def directions(self) -> list[np.ndarray]:
        return [self.direction_sign * g for g in self.gradients[:self.steps_taken]]

    @property
    def integrands(self) -> list[float]:
        return [float(np.vdot(g, g)) for g in self.gradients[:len(self.weights)]]


StepCallback = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


@dataclass
class _BatchState:
    steps: np.ndarray
    termination: list[str]
    step_size: np.ndarray
    sign: np.ndarray


def _run_flow(model: FlowModel, images, config: FlowConfig, on_step: StepCallback,
              on_point: Callable | None = None) -> _BatchState:
    """Batched Euler integration.

    ``on_step(k, idx, x_k, g_k, dt)`` is called once the quadrature weight of
    interval k is known for samples ``idx``; ``on_point(idx, x, z)`` sees every
    accepted point including the start.
    """
    x = np.array(images, dtype=np.float64, copy=True)
    n = x.shape[0]
    z, g = model.logits_and_grads(x)
    z = np.asarray(z, dtype=np.float64).copy()
    g = np.asarray(g, dtype=np.float64).reshape(x.shape).copy()
    sign = -np.sign(z)
    gnorm = np.sqrt(np.einsum("ij,ij->i", g.reshape(n, -1), g.reshape(n, -1)))
    if config.step_size is None:
        with np.errstate(divide="ignore"):
            h = np.where(gnorm > 0, config.step_scale / np.where(gnorm > 0, gnorm, 1.0), 0.0)
    else:
        h = np.full(n, float(config.step_size))
    state = _BatchState(np.zeros(n, dtype=int), [""] * n, h, sign)

    active = np.ones(n, dtype=bool)
    for i in range(n):
        if z[i] == 0.0:
            state.termination[i] = BOUNDARY
            active[i] = False
        elif gnorm[i] < config.vanishing:
            state.termination[i] = CRITICAL
            active[i] = False
    if on_point is not None:
        on_point(np.arange(n), x, z)

    s0 = np.sign(z)
    for k in range(config.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xk, gk = x[idx], g[idx]
        step = (h[idx] * sign[idx]).reshape((-1,) + (1,) * (x.ndim - 1))
        xn = xk + step * gk
        zn, gn = model.logits_and_grads(xn)
        zn = np.asarray(zn, dtype=np.float64)
        gn = np.asarray(gn, dtype=np.float64).reshape(xn.shape)
        crossed = np.sign(zn) != s0[idx]
        dt = h[idx].copy()
        if np.any(crossed):
            ci = np.flatnonzero(crossed)
            # one bisection of the crossing interval
            zm = np.asarray(model.logits(xk[ci] + 0.5 * step[ci] * gk[ci]), dtype=np.float64)
            dt[ci] *= np.where(np.sign(zm) != s0[idx][ci], 0.5, 1.0)
        on_step(k, idx, xk, gk, dt)
        x[idx], g[idx], z[idx] = xn, gn, zn
        state.steps[idx] += 1
        if on_point is not None:
            on_point(idx, xn, zn)
        nn = np.sqrt(np.einsum("ij,ij->i", gn.reshape(idx.size, -1), gn.reshape(idx.size, -1)))
        for j, i in enumerate(idx):
            if crossed[j]:
                state.termination[i] = BOUNDARY
                active[i] = False
            elif nn[j] < config.vanishing:
                state.termination[i] = VANISHING
                active[i] = False
    for i in np.flatnonzero(active):
        state.termination[i] = MAX_STEPS
    return state


def trace_gradient_flow(model: FlowModel, image, config: FlowConfig | None = None) -> FlowPath:
    """Follow ``-sign(f(x0)) * grad f`` from ``image`` until the logit changes sign."""
    config = config or FlowConfig()
    x0 = np.asarray(image, dtype=np.float64)
    points: list[np.ndarray] = []
    logits: list[float] = []
    grads: list[np.ndarray] = []
    weights: list[float] = []

    def on_point(idx, x, z):
        points.append(x[0].copy())
        logits.append(float(z[0]))

    def on_step(k, idx, xk, gk, dt):
        grads.append(gk[0].copy())
        weights.append(float(dt[0]))

    state = _run_flow(model, x0[None], config, on_step, on_point)
    if state.termination[0] == CRITICAL:
        raise CriticalPointError("classifier gradient vanishes at the starting point")
    _, g_last = model.logits_and_grads(points[-1][None])
    grads.append(np.asarray(g_last, dtype=np.float64).reshape(x0.shape))
    return FlowPath(points, grads, logits, float(state.step_size[0]), weights,
                    state.termination[0], float(state.sign[0]))


def _flow_ratio(num: float, den: float) -> float:
    if den <= 0.0:
        raise EmptyPathError("flow path has no interval with positive gradient norm")
    return min(num / den, 1.0)


def flow_alignment(path: FlowPath, features: Sequence) -> float:
    """F score by left-endpoint sums with the path's interval weights."""
    if not path.weights:
        raise EmptyPathError("flow path has no steps")
    num = den = 0.0
    for x, g, w in zip(path.points, path.gradients, path.weights):
        jac = feature_jacobian(features, x)
        score = pointwise_alignment_multi(g, jac)
        num += w * score.parallel_sq
        den += w * score.total_sq
    return _flow_ratio(num, den)


@dataclass
class FlowResult:
    """Streaming flow outcome for one sample."""

    F: dict[str, float] = field(default_factory=dict)
    termination: str = ""
    steps: int = 0
    step_size: float = 0.0
    feature_errors: dict[str, int] = field(default_factory=dict)


def flow_scores(model: FlowModel, images, feature_sets: Mapping[str, Sequence],
                config: FlowConfig | None = None, trace_sink: Callable | None = None
                ) -> list[FlowResult]:
    """F for several feature sets per sample without storing the paths.

    Intervals where a feature set cannot be evaluated (e.g. a degenerate
    moment) are dropped from that set's sums and counted in ``feature_errors``.
    ``trace_sink(sample, step, logit, distance_from_start)`` receives one
    record per accepted point when given.
    """
    config = config or FlowConfig()
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    num = {k: np.zeros(n) for k in feature_sets}
    den = {k: np.zeros(n) for k in feature_sets}
    errors = {k: np.zeros(n, dtype=int) for k in feature_sets}
    counter = np.zeros(n, dtype=int)

    def on_step(k, idx, xk, gk, dt):
        for j, i in enumerate(idx):
            g = gk[j].ravel()
            t2 = float(g @ g)
            for name, fs in feature_sets.items():
                try:
                    jac = feature_jacobian(fs, xk[j])
                    V = row_space_basis(jac)
                except (FeatureError, DegenerateFeatureError):
                    errors[name][i] += 1
                    continue
                c = V @ g
                num[name][i] += dt[j] * min(float(c @ c), t2)
                den[name][i] += dt[j] * t2

    on_point = None
    if trace_sink is not None:
        starts = images.reshape(n, -1)

        def on_point(idx, x, z):
            for j, i in enumerate(idx):
                trace_sink(int(i), int(counter[i]), float(z[j]),
                           float(np.linalg.norm(x[j].ravel() - starts[i])))
                counter[i] += 1

    state = _run_flow(model, images, config, on_step, on_point)
    out = []
    for i in range(n):
        r = FlowResult(termination=state.termination[i], steps=int(state.steps[i]),
                       step_size=float(state.step_size[i]))
        for name in feature_sets:
            r.F[name] = float(min(num[name][i] / den[name][i], 1.0)) if den[name][i] > 0 else float("nan")
            if errors[name][i]:
                r.feature_errors[name] = int(errors[name][i])
        out.append(r)
    return out
