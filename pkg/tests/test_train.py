from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudpatch.errors import EmptyMask, TooFewImages
from cloudpatch.maskgen import GrfConfig, mask_series
from cloudpatch.models import ModelSpec, flatten_params
from cloudpatch.raster import CloudMask
from cloudpatch.synth import SceneConfig, generate_scene
from cloudpatch.train import (
    EarlyStopping,
    Samples,
    TrainConfig,
    augment_batch,
    dihedral,
    impute_images,
    make_samples,
    multi_run,
    overfit,
    predict,
    split_dataset,
    split_sizes,
    train_model,
    window_starts,
)


def test_split_examples():
    assert tuple(len(p) for p in split_dataset(20, 0)) == (11, 5, 4)
    assert tuple(len(p) for p in split_dataset(10, 0)) == (5, 2, 3)
    assert split_sizes(60) == (33, 15, 12)


@given(st.integers(5, 500), st.integers(0, 2**32))
@settings(max_examples=100, deadline=None)
def test_split_partition(n, seed):
    tr, va, te = split_dataset(n, seed)
    assert sorted(tr + va + te) == list(range(n))
    assert (len(tr), len(va), len(te)) == split_sizes(n)


def test_split_seeded():
    assert split_dataset(30, 1) == split_dataset(30, 1)
    assert split_dataset(30, 1) != split_dataset(30, 2)


def test_too_few_images():
    with pytest.raises(TooFewImages):
        split_dataset(4, 0)
    with pytest.raises(TooFewImages):
        split_dataset(8, 0, min_images=10)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(split=(0.5, 0.3, 0.3))
    with pytest.raises(ValueError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(n_runs=0)


def test_early_stopping_patience_one():
    stop = EarlyStopping(1)
    assert stop.update(1, 1.0) is False
    assert stop.update(2, 2.0) is True  # strictly worse: stop after epoch 2
    assert stop.best_epoch == 1


def test_early_stopping_counts_plateaus():
    stop = EarlyStopping(3)
    flags = [stop.update(e, v) for e, v in enumerate([3.0, 2.0, 2.0, 2.5, 1.0, 1.1, 1.2, 1.3], 1)]
    assert flags == [False, False, False, False, False, False, False, True]
    assert stop.best_epoch == 5


def test_window_starts():
    assert window_starts(7, 5) == [0, 1, 2]
    assert window_starts(4, 5) == []


@pytest.fixture(scope="module")
def tiny():
    cfg = SceneConfig(height=16, width=16, n_dates=12, seed=5)
    series = generate_scene(cfg)
    _, masks = mask_series(series, GrfConfig(seed=11))
    return series, masks


def test_temporal_windows_stay_in_split(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn_lstm", 16, 16)
    s = make_samples(spec, series.images[:7], masks[:7])
    assert s.x.shape == (3, 5, 16, 16, 9)
    assert np.array_equal(s.y[1, 0], series.images[1].data)


def test_empty_mask_rejected(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn", 16, 16)
    empty = [CloudMask.empty(16, 16)] * 3
    s = make_samples(spec, series.images[:3], empty)
    good = make_samples(spec, series.images[3:6], masks[3:6])
    with pytest.raises(EmptyMask):
        train_model(spec, s, good, TrainConfig(max_epochs=1), 0)


def test_training_deterministic_and_best_restored(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn", 16, 16)
    tr = make_samples(spec, series.images[:6], masks[:6])
    va = make_samples(spec, series.images[6:9], masks[6:9])
    cfg = TrainConfig(max_epochs=4, batch_size=2)
    p1, r1 = train_model(spec, tr, va, cfg, 3)
    p2, r2 = train_model(spec, tr, va, cfg, 3)
    assert r1.train_history == r2.train_history and r1.val_history == r2.val_history
    assert all(a.tobytes() == b.tobytes() for a, b in zip(flatten_params(p1).values(), flatten_params(p2).values()))
    assert r1.best_val == min(r1.val_history) == r1.val_history[r1.best_epoch - 1]
    from cloudpatch.train import evaluate_loss

    assert evaluate_loss(spec, p1, va) == r1.best_val


def test_overfit_small_steps(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn", 16, 16)
    s = make_samples(spec, series.images[:1], masks[:1])
    _, hist = overfit(spec, s, 60)
    assert hist[-1] < 0.5 * hist[0]


def test_predict_temporal_averages_windows(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn_lstm", 16, 16)
    from cloudpatch.models import build_model, forward, stack_inputs

    params = build_model(spec, 0)
    x = stack_inputs(series.images[:6], masks[:6])
    out = predict(spec, params, x)
    w0 = forward(spec, params, x[None, 0:5])[0]
    w1 = forward(spec, params, x[None, 1:6])[0]
    np.testing.assert_allclose(out[0], w0[0], rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(out[3], 0.5 * (w0[3] + w1[2]), rtol=1e-5, atol=1e-7)


def test_impute_fills_only_gaps(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn", 16, 16)
    from cloudpatch.maskgen import apply_mask
    from cloudpatch.models import build_model

    params = build_model(spec, 0)
    obs = [apply_mask(i, m) for i, m in zip(series.images[:3], masks[:3])]
    out = impute_images(spec, params, obs, masks[:3])
    for o, r, m in zip(obs, out, masks):
        keep = m.cells == 0
        assert r.data[keep].tobytes() == o.data[keep].tobytes()
        assert np.all(np.isfinite(r.data)) and np.all(r.data >= 0)


@pytest.mark.slow
def test_multi_run_statistics(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn", 16, 16)
    cfg = TrainConfig(max_epochs=2, batch_size=2, n_runs=3, base_seed=10)
    res = multi_run(spec, series, masks, cfg)
    assert [r.seed for r in res.records] == [10, 11, 12]
    assert res.n_diverged == 0
    for k, row in enumerate(res.summary):
        vals = [r.test_metrics[k].rmse for r in res.records]
        assert abs(row["rmse_mean"] - sum(vals) / 3) <= 1e-12
    assert any(row["rmse_std"] > 0 for row in res.summary)
    again = multi_run(spec, series, masks, replace(cfg, n_runs=1))
    assert again.records[0].val_history == res.records[0].val_history
    assert all(row["rmse_std"] == 0.0 for row in again.summary)


def test_dihedral_group():
    a = np.arange(2 * 3 * 3 * 1).reshape(2, 3, 3, 1)
    views = [dihedral(a, k) for k in range(8)]
    assert len({v.tobytes() for v in views}) == 8  # all eight symmetries differ on an asymmetric image
    assert np.array_equal(dihedral(dihedral(a, 1), 3), a)
    assert np.array_equal(dihedral(dihedral(a, 5), 5), a)  # reflections are involutions
    t = np.arange(2 * 5 * 3 * 4 * 1).reshape(2, 5, 3, 4, 1)
    assert np.array_equal(dihedral(t, 2)[:, 1], dihedral(t[:, 1], 2))  # time axis untouched


def test_augment_keeps_inputs_targets_and_masks_aligned():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, 4, 6, 8)).astype(np.float32)
    vm = (rng.random((3, 4, 6, 1)) < 0.3).astype(np.float32)
    x = np.concatenate([np.where(vm == 1, 0, y), vm], axis=-1)
    for _ in range(20):
        b = augment_batch(Samples(x, y, vm), rng)
        assert b.x.shape == x.shape  # non-square: no quarter turns
        assert np.array_equal(b.x[..., 8:], b.vm)
        assert np.array_equal(b.x[..., :8], np.where(b.vm == 1, 0, b.y))


def test_augmented_training_deterministic(tiny):
    series, masks = tiny
    spec = ModelSpec.for_kind("cnn", 16, 16)
    tr = make_samples(spec, series.images[:6], masks[:6])
    va = make_samples(spec, series.images[6:9], masks[6:9])
    cfg = TrainConfig(max_epochs=2, batch_size=2, augment=True)
    _, r1 = train_model(spec, tr, va, cfg, 3)
    _, r2 = train_model(spec, tr, va, cfg, 3)
    _, plain = train_model(spec, tr, va, replace(cfg, augment=False), 3)
    assert r1.train_history == r2.train_history
    assert r1.train_history != plain.train_history
