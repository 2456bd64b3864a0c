"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The desk-scale experiment (64x64 blobs, 300 samples, 100 epochs) is trained
once per seed and shared by criteria 3, 4, 5 and 9.
"""

import functools
import json
import math
import time

import numpy as np
import pytest

from fgflow import analysis, cli
from fgflow import features as F
from fgflow import geometry as G
from fgflow import synthdata as sd
from fgflow.model import (
    Architecture, ClassifierModel, init_params, logits_and_input_grads, predict_logits,
)
from fgflow.training import TrainConfig, train
from tests.conftest import LinearLogit, QuadraticLogit
from tests.oracles import brute_ecdf_d, kolmogorov_q, max_rel_error

RESULT_LINES: dict[int, str] = {}

# desk-scale experiment
SEEDS = (0, 1, 2)
N_TRAIN = 300
N_TEST = 500
RULE = "brightness-threshold"
REWARD_FEATURE = "extent"
REWARD_LAMBDA = 3e-3
RANDOM_SEED = 1
D = 64 * 64


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULT_LINES[n] = line
    print(line)


# ---------------------------------------------------------------- shared experiment

@functools.lru_cache(maxsize=None)
def desk_data(seed: int):
    ds = sd.generate(N_TRAIN, rule=sd.LabelRule(RULE), seed=seed)
    tr, val = sd.stratified_split(ds.labels, 0.3, seed)
    # an independent test draw labelled with the same calibrated threshold
    fixed = sd.LabelRule(RULE, threshold=ds.meta["threshold"])
    test = sd.generate(N_TEST, rule=fixed, seed=10_000 + seed)
    return ds, tr, val, test


@functools.lru_cache(maxsize=None)
def desk_model(seed: int, enhanced: bool):
    """(params, seconds spent training)."""
    ds, tr, val, _ = desk_data(seed)
    lam = (REWARD_LAMBDA,) if enhanced else (0.0,)
    cfg = TrainConfig(epochs=100, features=(REWARD_FEATURE,), lambdas=lam, seed=seed)
    t0 = time.perf_counter()
    params, _ = train(init_params(Architecture(), seed), ds.images[tr], ds.labels[tr], cfg,
                      val=(ds.images[val], ds.labels[val]))
    return params, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def desk_gradients(seed: int, enhanced: bool):
    params, _ = desk_model(seed, enhanced)
    test = desk_data(seed)[3]
    z, g = logits_and_input_grads(params, test.images)
    return z, g.reshape(len(z), -1)


def s_values(seed: int, enhanced: bool, feature) -> np.ndarray:
    test = desk_data(seed)[3]
    _, grads = desk_gradients(seed, enhanced)
    out = []
    for img, g in zip(test.images, grads):
        try:
            out.append(G.pointwise_alignment_single(g, feature.value_and_grad(img)[1]).s)
        except (F.FeatureError, G.CriticalPointError):
            out.append(np.nan)
    return np.array(out)


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    arch = Architecture(resolution=16)
    params = init_params(arch, seed=5)
    h = 1e-5
    worst = {"classifier": 0.0, "brightness": 0.0, "extent": 0.0, "log_aspect_ratio": 0.0}
    eye = np.eye(256).reshape(256, 16, 16)
    for _ in range(50):
        img = rng.random((16, 16))
        _, g = logits_and_input_grads(params, img)
        z = predict_logits(params, np.concatenate([img + h * eye, img - h * eye]))
        fd = (z[:256] - z[256:]) / (2 * h)
        worst["classifier"] = max(worst["classifier"], max_rel_error(g[0], dict(enumerate(fd))))
        for name in ("brightness", "extent", "log_aspect_ratio"):
            fn = getattr(F, name)
            _, gf = fn(img)
            vals = np.array([fn(img + h * e)[0] - fn(img - h * e)[0] for e in eye]) / (2 * h)
            worst[name] = max(worst[name], max_rel_error(gf, dict(enumerate(vals))))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 60
    report(1, "gradient correctness", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" max rel err; {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_projection_identities():
    rng = np.random.default_rng(77)
    pyth = single = growth = 0.0
    bounds_ok = True
    deficient = 0
    for i in range(1000):
        d = int(rng.integers(2, 65))
        m = int(rng.integers(1, 6))
        f = rng.normal(size=d) * 10 ** rng.uniform(-3, 3)
        J = rng.normal(size=(m, d))
        if m > 1 and i % 3 == 0:
            J[-1] = J[:-1].T @ rng.normal(size=m - 1)  # dependent row
            deficient += 1
        par, perp = G.project_gradient(f, J)
        total = f @ f
        pyth = max(pyth, abs(par @ par + perp @ perp - total) / total)
        sc = G.pointwise_alignment_multi(f, J)
        bounds_ok &= 0.0 <= sc.s <= 1.0
        single = max(single, abs(G.pointwise_alignment_multi(f, J[:1]).s
                                 - G.pointwise_alignment_single(f, J[0]).s))
        bigger = G.pointwise_alignment_multi(f, np.vstack([J, rng.normal(size=d)])).s
        growth = max(growth, sc.s - bigger)
    ok = pyth < 1e-10 and bounds_ok and single < 1e-12 and growth <= 1e-10
    report(2, "projection identities", ok,
           f"Pythagoras rel {pyth:.1e}, S in [0,1] {bounds_ok}, m=1 diff {single:.1e}, "
           f"span-growth violation {max(growth, 0.0):.1e} ({deficient} rank-deficient of 1000)")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_random_baseline_anchor():
    _, train_time = desk_model(0, False)
    t0 = time.perf_counter()
    s = s_values(0, False, F.random_feature(RANDOM_SEED, D))
    total = train_time + time.perf_counter() - t0
    mean = float(np.nanmean(s))
    lo, hi = 1 / (3 * D), 3 / D
    ok = lo <= mean <= hi and np.sum(np.isfinite(s)) >= 500 and total < 300
    report(3, "random baseline anchor", ok,
           f"mean S {mean:.2e} vs 1/d {1 / D:.2e} (bounds [{lo:.2e}, {hi:.2e}]) over "
           f"{int(np.sum(np.isfinite(s)))} test samples; {total:.0f} s incl. training")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_feature_beats_random():
    sb = s_values(0, False, F.make_feature("brightness", D))
    sr = s_values(0, False, F.random_feature(RANDOM_SEED, D))
    sb, sr = sb[np.isfinite(sb)], sr[np.isfinite(sr)]
    ks = analysis.ks_two_sample(sb, sr)
    ratio = sb.mean() / sr.mean()
    ok = ks.p_value < 1e-3 and ratio >= 10
    report(4, "feature vs random", ok,
           f"mean S brightness {sb.mean():.2e}, random {sr.mean():.2e} (ratio {ratio:.0f}x), "
           f"KS D {ks.statistic:.2f} p {ks.p_value:.1e}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_enhancement_direction():
    t0 = time.perf_counter()
    feat = F.make_feature(REWARD_FEATURE, D)
    per_seed = []
    for seed in SEEDS:
        test = desk_data(seed)[3]
        sp = s_values(seed, False, feat)
        se = s_values(seed, True, feat)
        sp, se = sp[np.isfinite(sp)], se[np.isfinite(se)]
        p = analysis.ks_two_sample(sp, se).p_value
        ba = [analysis.balanced_accuracy(predict_logits(desk_model(seed, e)[0], test.images) > 0,
                                         test.labels) for e in (False, True)]
        per_seed.append((seed, sp.mean(), se.mean(), p, ba[0], ba[1]))
    elapsed = time.perf_counter() - t0
    s_ok = all(se > sp and p < 0.05 for _, sp, se, p, _, _ in per_seed)
    drops = [bp - be for *_, bp, be in per_seed]
    ba_ok = all(dr < 0.05 for dr in drops)
    ok = s_ok and ba_ok and elapsed < 1800
    detail = "; ".join(f"seed {s}: S {sp:.3f}->{se:.3f} p {p:.1e}, BA {bp:.3f}->{be:.3f}"
                       for s, sp, se, p, bp, be in per_seed)
    report(5, f"enhancement direction ({REWARD_FEATURE}, lambda {REWARD_LAMBDA})", ok,
           f"{detail}; {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 6

class FixedGradient:
    name = "fixed"

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def value_and_grad(self, image):
        return float(np.sum(self.w * image)), self.w.reshape(np.shape(image))


class OwnGradient:
    name = "own"

    def __init__(self, model):
        self.model = model

    def value_and_grad(self, image):
        z, g = self.model.logits_and_grads(np.asarray(image)[None])
        return float(z[0]), g[0]


def test_criterion_6_flow_integrator():
    rng = np.random.default_rng(6)
    f_err = 0.0
    count_err = 0
    for _ in range(50):
        w = rng.normal(size=(4, 8))
        v = rng.normal(size=(4, 8))
        z0 = rng.uniform(0.5, 5.0) * rng.choice([-1, 1])
        x0 = (z0 / np.sum(w * w)) * w
        h = rng.uniform(0.01, 0.2) / np.sum(w * w) * abs(z0)
        path = G.trace_gradient_flow(LinearLogit(w), x0, G.FlowConfig(step_size=h))
        f_err = max(f_err, abs(G.flow_alignment(path, [FixedGradient(v)])
                               - G.pointwise_alignment_single(w, v).s))
        expected = math.ceil(abs(z0) / (h * np.sum(w * w)))
        count_err = max(count_err, abs(path.steps_taken - expected))

    A = np.array([[0.6, 0.2], [0.2, -0.3]])
    quad = QuadraticLogit(A, np.array([1.0, 0.5]), 0.8)
    x0 = np.array([[0.4, 0.3]])
    feats = [FixedGradient(np.array([[1.0, 0.0]]))]
    Fs = []
    for h in (4e-3, 2e-3, 1e-3):
        Fs.append(G.flow_alignment(G.trace_gradient_flow(quad, x0, G.FlowConfig(step_size=h, max_steps=100_000)), feats))
    d1, d2 = abs(Fs[0] - Fs[1]), abs(Fs[1] - Fs[2])
    ok = f_err < 1e-9 and count_err <= 1 and d2 < 1e-3
    report(6, "flow integrator", ok,
           f"linear F-S {f_err:.1e}, step-count deviation {count_err}, quadratic |dF| on halving "
           f"{d1:.1e} then {d2:.1e} (ratio {d1 / d2 if d2 else float('inf'):.2f})")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_flow_score_sanity():
    rng = np.random.default_rng(7)
    own_dev = 0.0
    # own gradient in the feature set: quadratic toys and a small CNN
    for _ in range(20):
        k = int(rng.integers(2, 6))
        A = rng.normal(size=(k, k))
        quad = QuadraticLogit(0.5 * (A + A.T), rng.normal(size=k), rng.uniform(0.5, 2.0))
        x0 = rng.normal(size=(1, 1, k)) * 0.3
        fs = {"own": [OwnGradient(quad), FixedGradient(rng.normal(size=(1, k)))]}
        res = G.flow_scores(quad, x0, fs, G.FlowConfig(max_steps=200))[0]
        if not math.isnan(res.F["own"]):
            own_dev = max(own_dev, abs(res.F["own"] - 1.0))
    cnn = ClassifierModel(init_params(Architecture(resolution=16), seed=2))
    imgs = rng.random((4, 16, 16))
    res = G.flow_scores(cnn, imgs, {"own": [OwnGradient(cnn)]}, G.FlowConfig(max_steps=40))
    own_dev = max([own_dev] + [abs(r.F["own"] - 1.0) for r in res])

    violations = evaluated = nan = 0
    for batch in range(100):
        k = int(rng.integers(2, 9))
        shape = (1, k)
        if batch % 2:
            model = LinearLogit(rng.normal(size=shape), rng.normal())
        else:
            A = rng.normal(size=(k, k))
            model = QuadraticLogit(0.5 * (A + A.T), rng.normal(size=k), rng.normal())
        sets = {f"m{m}": [FixedGradient(rng.normal(size=shape)) for _ in range(m)] for m in (1, 2, 3)}
        x = rng.normal(size=(100,) + shape)
        z, g = model.logits_and_grads(x)
        for i in range(100):
            for fs in sets.values():
                s = G.pointwise_alignment_multi(g[i], F.feature_jacobian(fs, x[i])).s
                violations += not (0.0 <= s <= 1.0)
        for r in G.flow_scores(model, x, sets, G.FlowConfig(max_steps=60)):
            for v in r.F.values():
                if math.isnan(v):
                    nan += 1
                    continue
                evaluated += 1
                violations += not (0.0 <= v <= 1.0)
    ok = own_dev <= 1e-12 and violations == 0 and evaluated + nan == 30000
    report(7, "F-vs-S sanity", ok,
           f"own-gradient |F-1| max {own_dev:.1e}; 10000 fuzzed instances, {violations} bound "
           f"violations ({nan} F undefined at zero-length paths)")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_ks_oracle():
    rng = np.random.default_rng(8)
    d_mismatch = 0
    p_err = 0.0
    for _ in range(200):
        a = np.round(rng.random(int(rng.integers(1, 25))), int(rng.integers(1, 4)))
        b = np.round(rng.random(int(rng.integers(1, 25))), int(rng.integers(1, 4)))
        r = analysis.ks_two_sample(a, b, warn_small=False)
        brute = brute_ecdf_d(list(a), list(b))
        d_mismatch += r.statistic != brute
        t = math.sqrt(a.size * b.size / (a.size + b.size)) * brute
        p_err = max(p_err, abs(r.p_value - kolmogorov_q(t)))
    ok = d_mismatch == 0 and p_err < 1e-10
    report(8, "KS oracle equivalence", ok,
           f"D mismatches {d_mismatch}/200, max |p - series| {p_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_rank_diagnostics():
    test = desk_data(0)[3]
    worst_prob_rank = 0
    regular = total = 0
    for enhanced in (False, True):
        params, _ = desk_model(0, enhanced)
        prob = ClassifierModel(params, "probability")
        for img in test.images:
            rep = G.rank_report(prob, img, tol=1e-8)
            worst_prob_rank = max(worst_prob_rank, rep.numerical_rank)
            regular += rep.numerical_rank == 1
            total += 1
    frac = regular / total
    ok = worst_prob_rank <= 1 and frac >= 0.99
    report(9, "rank diagnostics", ok,
           f"max probability-head rank {worst_prob_rank}; rank 1 on {regular}/{total} "
           f"({frac:.1%}) inputs of two trained models")
    assert ok


# ---------------------------------------------------------------- 10

def test_criterion_10_end_to_end_determinism(tmp_path):
    cfg = {
        "schema_version": 1,
        "seed": 3,
        "data": {"n": 60, "resolution": 32, "positive_rate": 0.3},
        "train": {"epochs": 3, "learning_rate": 1e-3},
        "features": {"lambdas": [0.05, 0.05, 0.05]},
        "flow": {"max_steps": 50},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    digests = []
    for rep in ("a", "b"):
        root = str(tmp_path / rep)
        for argv in (["generate"], ["train"], ["train", "--enhanced"],
                     ["align", "--flow"], ["align", "--flow", "--model", "enhanced", "-j", "2"],
                     ["report"]):
            assert cli.main([argv[0], "--config", str(path), "--run-dir", root, *argv[1:]]) == 0
        digests.append({p.name: p.read_bytes() for p in sorted((tmp_path / rep / "report").iterdir())})
    same = digests[0] == digests[1] and len(digests[0]) == 4
    report(10, "end-to-end determinism", same,
           f"{len(digests[0])} report files byte-identical across two full runs: {same}")
    assert same
