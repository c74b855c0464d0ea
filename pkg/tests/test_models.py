import numpy as np
import pytest

from cloudpatch import tensor as T
from cloudpatch.errors import NonFiniteInput, ShapeMismatch, UnsupportedKind
from cloudpatch.models import (
    KINDS,
    ModelSpec,
    backward,
    build_model,
    flatten_params,
    forward,
    load_model,
    param_count,
    prepare_input,
    save_model,
    unflatten_params,
)
from cloudpatch.raster import CloudMask, MultibandImage


def conv_params(cin, cout):
    return 9 * cin * cout + cout


def lstm_params(d, u):
    return 4 * u * (d + u + 1)


def dense_params(d, o):
    return d * o + o


def expected_count(kind, h, w):
    """Independent tally of each architecture's layer inventory."""
    cells = (h // 4) * (w // 4)
    if kind == "cnn":
        return conv_params(9, 32) + conv_params(32, 64) + conv_params(64, 128) + conv_params(128, 8)
    if kind == "autoencoder_cnn":
        return (
            conv_params(9, 32) + conv_params(32, 64) + conv_params(64, 128)
            + conv_params(128, 64) + conv_params(64, 32) + conv_params(32, 8)
        )
    trunk = conv_params(9, 32) + conv_params(32, 64) + lstm_params(cells * 64, 64)
    if kind == "cnn_lstm":
        return trunk + dense_params(64, cells * 32) + conv_params(32, 32) + conv_params(32, 8)
    return trunk + dense_params(64, cells * 64) + conv_params(64, 64) + conv_params(64, 32) + conv_params(32, 8)


# frozen from expected_count; a change here means the architecture changed
GOLDEN_64 = {"cnn": 104200, "autoencoder_cnn": 189544, "cnn_lstm": 4776104, "autoencoder_lstm": 5354728}


@pytest.mark.parametrize("kind", KINDS)
def test_golden_param_counts(kind):
    params = build_model(ModelSpec.for_kind(kind, 64, 64), 0)
    assert param_count(params) == expected_count(kind, 64, 64) == GOLDEN_64[kind]


def test_first_conv_params():
    first = next(iter(build_model(ModelSpec.for_kind("cnn", 64, 64), 0).values()))
    assert first["w"].shape == (3, 3, 9, 32)
    assert first["w"].size + first["b"].size == 2624


def test_unsupported_kind():
    with pytest.raises(UnsupportedKind):
        ModelSpec.for_kind("inception_resnet", 64, 64)


def test_spec_roundtrip_and_validation():
    spec = ModelSpec.for_kind("cnn_lstm", 32, 16)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        ModelSpec("cnn", 64, 64, 9, (32, 64), 0, 0.2, 1)


def test_build_deterministic():
    spec = ModelSpec.for_kind("autoencoder_cnn", 16, 16)
    a, b = flatten_params(build_model(spec, 3)), flatten_params(build_model(spec, 3))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = flatten_params(build_model(spec, 4))
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def batch_for(spec, n, seed=0):
    rng = np.random.default_rng(seed)
    shape = (n, spec.timesteps, spec.height, spec.width, 9) if spec.temporal else (n, spec.height, spec.width, 9)
    x = rng.uniform(0, 0.3, shape).astype(np.float32)
    x[..., 8] = (rng.random(shape[:-1]) < 0.1).astype(np.float32)
    return x


@pytest.mark.parametrize("kind", KINDS)
def test_output_shapes(kind):
    spec = ModelSpec.for_kind(kind, 16, 16)
    params = build_model(spec, 0)
    out = forward(spec, params, batch_for(spec, 2))
    want = (2, 5, 16, 16, 8) if spec.temporal else (2, 16, 16, 8)
    assert out.shape == want and out.dtype == np.float32


@pytest.mark.parametrize("kind", KINDS)
def test_inference_deterministic(kind):
    spec = ModelSpec.for_kind(kind, 16, 16)
    params = build_model(spec, 0)
    x = batch_for(spec, 2)
    assert np.array_equal(forward(spec, params, x), forward(spec, params, x))
    assert np.array_equal(forward(spec, params, x, training=True, seed=5), forward(spec, params, x, training=True, seed=5))


@pytest.mark.parametrize("kind", KINDS)
def test_zero_params_give_output_bias(kind):
    spec = ModelSpec.for_kind(kind, 16, 16)
    params = build_model(spec, 0)
    flat = {k: np.zeros_like(v) for k, v in flatten_params(params).items()}
    last = list(params)[-1]
    flat[f"{last}/b"] = np.arange(1, 9, dtype=np.float32)
    out = forward(spec, unflatten_params(flat, params), batch_for(spec, 2))
    assert np.all(out == np.arange(1, 9, dtype=np.float32))


@pytest.mark.parametrize("kind", KINDS)
def test_batch_permutation_equivariance(kind):
    spec = ModelSpec.for_kind(kind, 16, 16)
    params = build_model(spec, 1)
    x = batch_for(spec, 3, seed=2)
    perm = [2, 0, 1]
    np.testing.assert_allclose(forward(spec, params, x[perm]), forward(spec, params, x)[perm], rtol=1e-5, atol=1e-7)


def test_shape_and_nan_guards():
    spec = ModelSpec.for_kind("cnn", 16, 16)
    params = build_model(spec, 0)
    with pytest.raises(ShapeMismatch):
        forward(spec, params, np.zeros((1, 8, 16, 9), np.float32))
    x = batch_for(spec, 1)
    x[0, 3, 3, 2] = np.nan
    with pytest.raises(NonFiniteInput):
        forward(spec, params, x)


@pytest.mark.parametrize("kind", KINDS)
def test_one_adam_step_reduces_loss(kind):
    spec = ModelSpec.for_kind(kind, 16, 16)
    params = build_model(spec, 0, np.float64)
    x = batch_for(spec, 2, seed=1).astype(np.float64)
    y = np.random.default_rng(9).uniform(0, 0.3, x.shape[:-1] + (8,))
    vm = x[..., 8:9]

    def loss_of(p):
        return T.masked_mse(y, forward(spec, p, x), vm)[0]

    tape: list = []
    pred = forward(spec, params, x, tape=tape)  # inference mode: the step direction matches the loss probed below
    before, grad = T.masked_mse(y, pred, vm)
    grads = backward(spec, params, tape, grad)
    flat, _ = T.adam_step(flatten_params(params), grads, T.AdamState(lr=1e-4))
    assert loss_of(unflatten_params(flat, params)) < before


@pytest.mark.parametrize("kind", ["cnn", "cnn_lstm"])
def test_model_gradient_matches_finite_difference(kind):
    """End-to-end backward through a whole small network, spot-checked."""
    spec = ModelSpec.for_kind(kind, 8, 8)
    params = build_model(spec, 0, np.float64)
    x = batch_for(spec, 1, seed=3).astype(np.float64)
    y = np.random.default_rng(4).uniform(0, 0.3, x.shape[:-1] + (8,))
    vm = np.ones(x.shape[:-1] + (1,))
    tape: list = []
    _, grad = T.masked_mse(y, forward(spec, params, x, tape=tape), vm)
    grads = backward(spec, params, tape, grad)
    flat = flatten_params(params)
    rng = np.random.default_rng(0)
    for key in list(flat)[:: max(1, len(flat) // 4)]:
        idx = tuple(rng.integers(0, s) for s in flat[key].shape)
        h = 1e-5
        vals = []
        for sign in (1, -1):
            f2 = {k: v.copy() for k, v in flat.items()}
            f2[key][idx] += sign * h
            vals.append(T.masked_mse(y, forward(spec, unflatten_params(f2, params), x), vm)[0])
        num = (vals[0] - vals[1]) / (2 * h)
        assert abs(num - grads[key][idx]) <= 1e-4 * max(abs(num), abs(grads[key][idx]), 1e-8) + 1e-10


def test_prepare_input_examples():
    data = np.random.default_rng(0).uniform(0, 1, (4, 4, 8)).astype(np.float32)
    img = MultibandImage(data)
    x = prepare_input(img)
    assert x.shape == (4, 4, 9) and np.all(x[..., 8] == 0) and np.array_equal(x[..., :8], data)
    full = prepare_input(img, CloudMask(np.ones((4, 4))))
    assert np.all(full[..., :8] == 0) and np.all(full[..., 8] == 1)
    holed = data.copy()
    holed[1, 1, 2] = np.nan
    x = prepare_input(MultibandImage(holed), CloudMask.empty(4, 4))
    expected = np.zeros((4, 4))
    expected[1, 1] = 1
    assert np.array_equal(x[..., 8], expected)
    assert np.all(x[1, 1, :8] == 0) and np.all(np.isfinite(x))


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_roundtrip(tmp_path, kind):
    spec = ModelSpec.for_kind(kind, 16, 16)
    params = build_model(spec, 7)
    save_model(tmp_path / "m.prm", spec, params)
    spec2, params2 = load_model(tmp_path / "m.prm")
    assert spec2 == spec
    a, b = flatten_params(params), flatten_params(params2)
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
    save_model(tmp_path / "m2.prm", spec2, params2)
    assert (tmp_path / "m.prm").read_bytes() == (tmp_path / "m2.prm").read_bytes()
