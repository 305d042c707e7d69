import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prism import autograd as ag
from prism.models import ARCHITECTURES, ModelSpec, bind, embed, forward, init_params, predict


def _logits(spec, params, videos):
    g = ag.Graph()
    return forward(spec, bind(g, params), g.const(videos)).value


def test_init_is_deterministic_and_seed_dependent():
    spec = ModelSpec()
    a, b, c = init_params(spec, 7), init_params(spec, 7), init_params(spec, 8)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_bound_for_fan_in_100():
    spec = ModelSpec(widths=(8, 100))
    w = init_params(spec, 0)["head.w"]
    assert w.shape[0] == 100
    assert np.max(np.abs(w)) <= np.sqrt(3) / 10
    assert np.max(np.abs(w)) > 0.9 * np.sqrt(3) / 10


def test_biases_start_at_zero():
    params = init_params(ModelSpec(arch="conv2d-recurrent"), 0)
    for k, v in params.items():
        if k.endswith(".b"):
            np.testing.assert_array_equal(v, 0)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_batch_gives_zero_logits(arch):
    spec = ModelSpec(arch=arch)
    out = _logits(spec, init_params(spec, 1), np.zeros((2, *spec.geometry), np.float32))
    assert out.shape == (2, spec.num_classes)
    np.testing.assert_array_equal(out, 0)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_parameter_count_is_a_function_of_the_spec(arch):
    spec = ModelSpec(arch=arch)
    params = init_params(spec, 3)
    assert sum(v.size for v in params.values()) == spec.num_params()
    assert {k: v.shape for k, v in params.items()} == spec.param_shapes()


def test_conv2d_mean_ignores_frame_order():
    spec = ModelSpec(arch="conv2d-mean")
    params = init_params(spec, 2)
    video = np.random.default_rng(0).uniform(size=(1, *spec.geometry)).astype(np.float32)
    perm = video[:, ::-1]
    np.testing.assert_allclose(_logits(spec, params, video), _logits(spec, params, perm), rtol=1e-5, atol=1e-6)


def test_order_sensitive_architectures():
    video = np.random.default_rng(1).uniform(size=(1, 8, 16, 16, 3)).astype(np.float32)
    for arch in ("conv3d-micro", "conv2d-recurrent"):
        spec = ModelSpec(arch=arch)
        params = init_params(spec, 2)
        params = {k: v + 0.1 if k.endswith(".b") else v for k, v in params.items()}
        shuffled = video[:, [3, 0, 6, 1, 7, 2, 5, 4]]
        assert not np.allclose(_logits(spec, params, video), _logits(spec, params, shuffled))


def test_spec_validation():
    with pytest.raises(ValueError, match="architecture"):
        ModelSpec(arch="resnet")
    with pytest.raises(ValueError, match="num_classes"):
        ModelSpec(num_classes=1)
    with pytest.raises(ValueError, match="divisible"):
        ModelSpec(geometry=(8, 10, 16, 3))
    with pytest.raises(ValueError, match="kernel"):
        ModelSpec(geometry=(2, 16, 16, 3))
    with pytest.raises(ValueError, match="flatten"):
        ModelSpec(arch="conv2d-recurrent", head="flatten")


def test_geometry_mismatch_is_a_shape_error():
    spec = ModelSpec()
    g = ag.Graph()
    with pytest.raises(ag.ShapeError, match="geometry"):
        forward(spec, bind(g, init_params(spec, 0)), g.const(np.zeros((1, 8, 8, 8, 3))))


def test_flatten_head_keeps_position():
    spec = ModelSpec(head="flatten")
    assert spec.param_shapes()["head.w"] == (16 * 8 * 4 * 4, 6)
    params = init_params(spec, 0)
    out = _logits(spec, params, np.random.default_rng(0).uniform(size=(2, *spec.geometry)).astype(np.float32))
    assert out.shape == (2, 6)


def test_with_arch_keeps_the_rest():
    spec = ModelSpec(num_classes=4, geometry=(4, 8, 8, 1), widths=(3, 5))
    other = spec.with_arch("conv2d-mean")
    assert (other.arch, other.num_classes, other.geometry, other.widths) == ("conv2d-mean", 4, (4, 8, 8, 1), (3, 5))


def test_predict_and_embed_agree_with_forward():
    spec = ModelSpec()
    params = init_params(spec, 4)
    videos = np.random.default_rng(2).uniform(size=(5, *spec.geometry)).astype(np.float32)
    np.testing.assert_allclose(predict(spec, params, videos, chunk=2), _logits(spec, params, videos), rtol=1e-6)
    feats = embed(spec, params, videos, chunk=3)
    assert feats.shape == (5, spec.widths[-1])
    logits = feats @ params["head.w"].astype(np.float64) + params["head.b"]
    np.testing.assert_allclose(logits, _logits(spec, params, videos), rtol=1e-4, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(ARCHITECTURES))
def test_logits_are_finite_for_pixel_inputs(seed, arch):
    spec = ModelSpec(arch=arch)
    video = np.random.default_rng(seed).uniform(size=(1, *spec.geometry)).astype(np.float32)
    assert np.all(np.isfinite(_logits(spec, init_params(spec, seed), video)))


def test_frame_permutation_over_eight_trials():
    rng = np.random.default_rng(11)
    mean_spec, rec_spec = ModelSpec(arch="conv2d-mean"), ModelSpec(arch="conv2d-recurrent")
    changed = 0
    for trial in range(8):
        video = rng.uniform(size=(1, *mean_spec.geometry)).astype(np.float32)
        perm = video[:, rng.permutation(8)]
        mp, rp = init_params(mean_spec, trial), init_params(rec_spec, trial)
        np.testing.assert_allclose(_logits(mean_spec, mp, video), _logits(mean_spec, mp, perm), rtol=1e-5, atol=1e-6)
        changed += not np.allclose(_logits(rec_spec, rp, video), _logits(rec_spec, rp, perm))
    assert changed == 8


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_gradient_reaches_the_input(arch):
    spec = ModelSpec(arch=arch)
    dead = 0
    for seed in range(20):
        g = ag.Graph()
        x = g.param(np.random.default_rng(seed).uniform(size=(2, *spec.geometry)))
        loss = ag.softmax_cross_entropy(forward(spec, bind(g, init_params(spec, seed)), x), [0, 1])
        dead += not np.any(g.backward(loss, [x])[x])
    assert dead == 0
