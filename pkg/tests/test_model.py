import numpy as np
import pytest

from fgflow import diffcore as dc
from fgflow.model import (
    Architecture, CheckpointError, ClassifierModel, ResolutionError, init_params,
    input_gradient, load_checkpoint, logistic, logits_and_input_grads, predict,
    predict_logits, save_checkpoint, zero_params,
)
from tests.oracles import central_diff, loop_logit, max_rel_error


def test_zero_params_give_even_odds(small_arch, rng):
    p = zero_params(small_arch)
    out = predict(p, rng.random((16, 16)))
    assert out.logit == 0.0
    assert out.probability == 0.5
    np.testing.assert_array_equal(input_gradient(p, rng.random((16, 16))).vector, 0.0)


def test_predict_is_bit_deterministic(small_arch, rng):
    img = rng.random((16, 16))
    a = predict(init_params(small_arch, seed=9), img)
    b = predict(init_params(small_arch, seed=9), img)
    assert a.logit.hex() == b.logit.hex()


def test_logit_matches_straight_loop_reference(small_params, rng):
    img = rng.random((16, 16))
    expected = loop_logit(small_params.tensors, img)
    assert predict(small_params, img).logit == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_probability_is_logistic_of_logit(small_params, rng):
    out = predict(small_params, rng.random((16, 16)))
    assert abs(out.probability - 1.0 / (1.0 + np.exp(-out.logit))) < 1e-15


def test_resolution_mismatch(small_params):
    with pytest.raises(ResolutionError):
        predict(small_params, np.zeros((8, 8)))


def test_input_gradient_matches_finite_differences(small_params, rng):
    img = rng.random((16, 16))
    g = input_gradient(small_params, img).vector
    fd = central_diff(lambda x: predict(small_params, x).logit, img)
    assert max_rel_error(g, fd) < 1e-5


def test_probability_head_chain_rule(small_params, rng):
    img = rng.random((16, 16))
    z, gz = logits_and_input_grads(small_params, img, "logit")
    _, gp = logits_and_input_grads(small_params, img, "probability")
    p = logistic(z[0])
    np.testing.assert_allclose(gp[0], p * (1 - p) * gz[0], rtol=1e-12, atol=1e-18)


def test_batched_gradients_equal_single(small_params, rng):
    imgs = rng.random((3, 16, 16))
    z, g = logits_and_input_grads(small_params, imgs)
    for i in range(3):
        np.testing.assert_allclose(g[i], input_gradient(small_params, imgs[i]).vector, rtol=1e-12)
        assert z[i] == pytest.approx(predict(small_params, imgs[i]).logit, rel=1e-12)


def test_masked_zero_regions_stay_finite(small_params):
    img = np.zeros((16, 16))
    img[6:10, 6:10] = 1.0
    g = input_gradient(small_params, img).vector
    assert np.all(np.isfinite(g))


def test_output_jacobian_rows_sum_to_zero(small_params, rng):
    J = ClassifierModel(small_params).output_jacobian(rng.random((16, 16)))
    assert J.shape == (2, 256)
    np.testing.assert_array_equal(J[0] + J[1], 0.0)


def test_architecture_shapes():
    shapes = Architecture().shapes()
    assert shapes["conv1.w"] == (8, 1, 5, 5)
    assert shapes["conv2.w"] == (16, 8, 3, 3)
    assert shapes["conv3.w"] == (32, 16, 3, 3)
    assert shapes["fc1.w"] == (32 * 8 * 8, 256)
    assert shapes["fc2.w"] == (256, 128)
    assert shapes["fc3.w"] == (128, 1)
    with pytest.raises(ValueError):
        Architecture(resolution=60)


def test_checkpoint_roundtrip(tmp_path, small_params):
    path = tmp_path / "m.ckpt"
    extra = {"adam.t": np.array([3.0])}
    save_checkpoint(path, small_params, extra, {"config_hash": "abc"})
    raw = path.read_bytes()
    assert raw[:8] == b"FGFLOWCK"
    assert int.from_bytes(raw[8:12], "little") == 1
    ck = load_checkpoint(path)
    assert ck.params.arch == small_params.arch
    assert ck.params.digest() == small_params.digest()
    assert ck.meta["config_hash"] == "abc"
    assert ck.extra["adam.t"][0] == 3.0


def test_checkpoint_rejects_garbage(tmp_path, small_params):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, small_params)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


def test_nonfinite_params_rejected(small_arch):
    p = zero_params(small_arch)
    p.tensors["fc3.b"] = np.array([np.inf])
    with pytest.raises(ValueError):
        type(p)(p.arch, p.tensors)


def test_predict_logits_accepts_batches(small_params, rng):
    imgs = rng.random((4, 16, 16))
    assert predict_logits(small_params, imgs).shape == (4,)


def test_finite_difference_harness_on_classifier(small_params, rng):
    img = rng.random((16, 16))

    def fn(x):
        z, g = logits_and_input_grads(small_params, x)
        return float(z[0]), g[0]

    assert dc.finite_difference_check(fn, img, step=1e-5) < 1e-5
