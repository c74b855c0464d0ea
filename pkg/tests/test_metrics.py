import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudpatch.errors import ConstantSeries, DimMismatch, EmptyMask
from cloudpatch.metrics import (
    REPORT_COLUMNS,
    BandMetrics,
    evaluate_model,
    pearson_of,
    pearson_r,
    pooled_rmse,
    read_report,
    render_report,
    rmse,
    rmse_of,
    summarize_runs,
    write_report,
)
from cloudpatch.raster import CloudMask, MultibandImage


def loop_rmse(obs, imp, mask, band):
    """Double-loop oracle."""
    total, n = 0.0, 0
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            y = float(obs[i, j, band])
            if mask[i, j] == 1 and math.isfinite(y):
                total += (y - float(imp[i, j, band])) ** 2
                n += 1
    return math.sqrt(total / n)


def pair(y, yhat):
    """Two single-row images plus a full mask."""
    y = np.asarray(y, np.float32).reshape(1, -1, 1)
    yhat = np.asarray(yhat, np.float32).reshape(1, -1, 1)
    y = np.pad(y, ((0, 3), (0, (-y.shape[1]) % 4), (0, 0)), constant_values=np.nan)
    yhat = np.pad(yhat, ((0, 3), (0, (-yhat.shape[1]) % 4), (0, 0)), constant_values=0)
    return MultibandImage(y), MultibandImage(yhat), CloudMask(np.ones(y.shape[:2]))


def test_rmse_hand_value():
    o, i, m = pair([0, 0], [3, 4])
    assert rmse(o, i, m, 1) == pytest.approx(math.sqrt(25 / 2), abs=1e-12)
    assert rmse(o, i, m, 1) == pytest.approx(3.5355, abs=1e-4)


def test_rmse_identity_zero():
    o, _, m = pair([0.1, 0.4, 0.3], [0, 0, 0])
    assert rmse(o, o, m, 1) == 0.0


def test_nan_observation_excluded():
    with_nan = np.array([[0.0, np.nan, 0.0, 0.0]] * 4, np.float32)[..., None]
    imp = np.array([[3.0, 100.0, 4.0, 0.0]] * 4, np.float32)[..., None]
    mask = np.zeros((4, 4))
    mask[0, :3] = 1
    assert rmse(MultibandImage(with_nan), MultibandImage(imp), CloudMask(mask), 1) == pytest.approx(math.sqrt(25 / 2))


def test_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        obs = rng.uniform(0, 1, (8, 8, 8)).astype(np.float32)
        obs[rng.random(obs.shape) < 0.1] = np.nan
        imp = rng.uniform(0, 1, (8, 8, 8)).astype(np.float32)
        mask = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        mask[0, 0] = 1
        obs[0, 0] = 0.5
        for band in range(8):
            got = rmse(MultibandImage(obs), MultibandImage(imp), CloudMask(mask), band + 1)
            assert got == pytest.approx(loop_rmse(obs, imp, mask, band), rel=1e-12)


def test_empty_mask():
    o, i, _ = pair([0.1, 0.2], [0, 0])
    with pytest.raises(EmptyMask):
        rmse(o, i, CloudMask.empty(4, 4), 1)
    with pytest.raises(EmptyMask):
        pearson_r(o, i, CloudMask.empty(4, 4), 1)


def test_pearson_examples():
    y = np.array([0.1, 0.5, 0.2, 0.9])
    assert pearson_of(y, y) == 1.0
    assert pearson_of(y, 2 * y) == pytest.approx(1.0, abs=1e-12)
    assert pearson_of(y, -y) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ConstantSeries):
        pearson_of(y, np.ones(4))
    with pytest.raises(ConstantSeries):
        pearson_of(np.array([1.0]), np.array([2.0]))


@given(st.integers(0, 2**32), st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=50, deadline=None)
def test_pearson_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    y, yhat = rng.normal(size=30), rng.normal(size=30)
    r = pearson_of(y, yhat)
    assert -1.0 <= r <= 1.0
    assert pearson_of(y, a * yhat + b) == pytest.approx(r, abs=1e-9)
    assert rmse_of(y, yhat) >= 0


def _series(seed, n=3):
    rng = np.random.default_rng(seed)
    obs, imp, masks = [], [], []
    for _ in range(n):
        o = rng.uniform(0, 1, (8, 8, 8)).astype(np.float32)
        obs.append(MultibandImage(o))
        imp.append(MultibandImage(o + rng.normal(0, 0.05, o.shape).astype(np.float32).clip(-o, None)))
        masks.append(CloudMask((rng.random((8, 8)) < 0.3).astype(np.uint8)))
    return obs, imp, masks


def test_evaluate_model_pooled_oracle():
    obs, imp, masks = _series(1)
    metrics = evaluate_model(obs, imp, masks)
    assert [m.band for m in metrics] == list(range(1, 9))
    for m in metrics:
        ys = np.concatenate([o.data[:, :, m.band - 1][k.cells == 1] for o, k in zip(obs, masks)]).astype(np.float64)
        ps = np.concatenate([i.data[:, :, m.band - 1][k.cells == 1] for i, k in zip(imp, masks)]).astype(np.float64)
        assert m.rmse == pytest.approx(np.sqrt(np.mean((ys - ps) ** 2)), rel=1e-12)
        assert m.pearson_r == pytest.approx(np.corrcoef(ys, ps)[0, 1], abs=1e-12)
        assert m.n_pixels == ys.size


def test_evaluate_perfect():
    obs, _, masks = _series(2)
    for m in evaluate_model(obs, obs, masks):
        assert m.rmse == 0.0 and m.pearson_r == 1.0


def test_pooled_rmse_all_bands():
    obs, imp, masks = _series(3)
    d = np.concatenate([(o.data.astype(np.float64) - i.data)[k.cells == 1].ravel() for o, i, k in zip(obs, imp, masks)])
    assert pooled_rmse(obs, imp, masks) == pytest.approx(np.sqrt(np.mean(d**2)), rel=1e-12)


def test_misaligned():
    obs, imp, masks = _series(4)
    with pytest.raises(DimMismatch):
        evaluate_model(obs, imp[:2], masks)


def _runs(seed, n_runs):
    rng = np.random.default_rng(seed)
    return [[BandMetrics(b, float(rng.uniform(0.01, 0.05)), float(rng.uniform(0.7, 0.99)), 100) for b in range(1, 9)] for _ in range(n_runs)]


def test_summary_mean_std():
    runs = _runs(0, 5)
    rows = summarize_runs(runs)
    for k, row in enumerate(rows):
        vals = [r[k].rmse for r in runs]
        mean = sum(vals) / 5
        assert row["rmse_mean"] == pytest.approx(mean, abs=1e-12)
        assert row["rmse_std"] == pytest.approx(math.sqrt(sum((v - mean) ** 2 for v in vals) / 5), abs=1e-12)
    assert summarize_runs(_runs(1, 1))[0]["rmse_std"] == 0.0


def test_report_layout_and_reparse(tmp_path):
    by_model = {"cnn": _runs(0, 3), "baseline": _runs(1, 1)}
    path = tmp_path / "report.csv"
    write_report(by_model, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 1 + 2 * 8
    rows = read_report(path)
    assert [(r["model"], r["band"]) for r in rows] == [(m, b) for m in ("baseline", "cnn") for b in range(1, 9)]
    expect = {("cnn", r["band"]): r for r in summarize_runs(by_model["cnn"])}
    for r in rows:
        if r["model"] == "cnn":
            for key in ("rmse_mean", "rmse_std", "r_mean", "r_std"):
                assert abs(r[key] - expect[("cnn", r["band"])][key]) <= 1e-9
    assert render_report(by_model) == path.read_text()


def test_report_deterministic_regardless_of_dict_order(tmp_path):
    a = {"cnn": _runs(0, 2), "baseline": _runs(1, 2)}
    b = {"baseline": _runs(1, 2), "cnn": _runs(0, 2)}
    assert render_report(a) == render_report(b)
