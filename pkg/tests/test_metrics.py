import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldtransform import metrics
from fieldtransform.field import FieldSeries, GridSpec


def fs_from(data, mask=None):
    nt, nz, ny, nx, _ = data.shape
    spec = GridSpec(nx=nx, ny=ny, nz=nz, depths_m=tuple(20.0 * k for k in range(nz)))
    return FieldSeries.masked(spec, data, mask)


def jacobi_eig(a, sweeps=100):
    """Cyclic Jacobi rotations; returns (eigenvalues, eigenvectors as columns)."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(a * a) - np.sum(np.diag(a) ** 2))
        if off < 1e-14 * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                r = np.eye(n)
                r[p, p] = r[q, q] = c
                r[p, q], r[q, p] = s, -s
                a = r.T @ a @ r
                v = v @ r
    return np.diag(a), v


# -------------------------------------------------------------------- gain


def test_gain_examples():
    assert metrics.gain([2.0, 2.0], [1.0, 1.0]) == 50.0
    assert metrics.gain([1.0], [1.5]) == 50.0          # absolute value
    assert metrics.signed_change([1.0], [1.5]) == -50.0
    assert metrics.gain([4.0, 2.0], [0.0, 0.0]) == 100.0
    with pytest.raises(metrics.ZeroBaselineError):
        metrics.gain([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(metrics.MisalignedSeriesError):
        metrics.gain([1.0, 2.0], [1.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=20), st.floats(0, 2))
def test_gain_of_scaled_series(mm, f):
    mm = np.array(mm)
    assert metrics.gain(mm, f * mm) == pytest.approx(abs(1 - f) * 100, rel=1e-9, abs=1e-9)


def test_mse_uses_mask_intersection():
    a = np.zeros((2, 1, 4, 4, 2))
    b = np.ones((2, 1, 4, 4, 2))
    m1 = np.ones((4, 4), bool)
    m2 = m1.copy()
    m2[0] = False
    r = metrics.mse_series(fs_from(a, m1), fs_from(b, m2))
    np.testing.assert_array_equal(r, [1.0, 1.0])
    b[:, :, 1, 1, 0] = 3.0
    r = metrics.mse_series(fs_from(a, m1), fs_from(b, m2), component=0)
    assert r[0] == pytest.approx((11 + 9) / 12)


def test_mse_misaligned():
    a = fs_from(np.zeros((2, 1, 4, 4, 2)))
    with pytest.raises(metrics.MisalignedSeriesError):
        metrics.mse_series(a, fs_from(np.zeros((3, 1, 4, 4, 2))))


def test_pearson():
    x = np.arange(10.0)
    assert metrics.pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert metrics.pearson(x, -x) == pytest.approx(-1.0)
    with pytest.raises(metrics.DegenerateVarianceError):
        metrics.pearson(x, np.ones(10))


# --------------------------------------------------------------------- EOF


@pytest.mark.parametrize("nt,seed", [(6, 0), (30, 1)])   # both Gram branches
def test_eof_matches_jacobi(nt, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((nt, 1, 4, 4, 2))
    data[..., 0] += 3 * rng.standard_normal((nt, 1, 1, 1)) * np.linspace(0, 1, 16).reshape(4, 4)
    fs = fs_from(data)
    mode = metrics.eof_mode1(fs, tol=1e-13)
    x = data[:, 0].reshape(nt, -1, 2)
    x = np.concatenate([x[..., 0], x[..., 1]], axis=1)
    x -= x.mean(axis=0)
    w, v = jacobi_eig(x.T @ x)
    k = np.argmax(w)
    ref = v[:, k] * np.sign(v[np.argmax(np.abs(v[:, k])), k])
    np.testing.assert_allclose(mode.pattern, ref, atol=1e-8)
    assert mode.explained == pytest.approx(w[k] / w.sum(), abs=1e-10)
    assert mode.pattern[np.argmax(np.abs(mode.pattern))] > 0


def test_eof_rank_one_explained_is_one():
    rng = np.random.default_rng(5)
    pat = rng.standard_normal((1, 1, 6, 6, 2))
    amp = rng.standard_normal(12)[:, None, None, None, None]
    mode = metrics.eof_mode1(fs_from(amp * pat))
    assert abs(mode.explained - 1.0) <= 1e-10
    p = pat[0, 0].reshape(-1, 2)
    p = np.concatenate([p[:, 0], p[:, 1]])
    assert abs(abs(metrics.pearson(mode.pattern, p)) - 1) < 1e-10


def test_eof_sign_invariance_and_grid():
    rng = np.random.default_rng(6)
    data = rng.standard_normal((8, 1, 4, 4, 2))
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    a = metrics.eof_mode1(fs_from(data, mask))
    b = metrics.eof_mode1(fs_from(-data, mask))
    np.testing.assert_allclose(a.pattern, b.pattern, atol=1e-10)
    assert metrics.pattern_correlation(a, b) == pytest.approx(1.0)
    g = a.as_grid()
    assert g.shape == (4, 4, 2) and np.all(g[0, 0] == 0)


def test_eof_degenerate():
    with pytest.raises(metrics.DegenerateVarianceError):
        metrics.eof_mode1(fs_from(np.ones((5, 1, 4, 4, 2))))
    with pytest.raises(metrics.NonConvergenceError):
        a = np.random.default_rng(0).standard_normal((6, 6))
        metrics.leading_eigvec(a @ a.T, tol=1e-15, max_iter=2)


# ------------------------------------------------------------------ Taylor


@pytest.mark.parametrize("seed", range(100))
def test_taylor_identity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 200))
    r = rng.standard_normal(n) * rng.uniform(0.1, 5) + rng.uniform(-3, 3)
    c = 0.7 * r + rng.standard_normal(n) * rng.uniform(0.1, 2)
    t = metrics.taylor_from_series(r, c)
    lhs = t.crmse ** 2
    rhs = t.std_ref ** 2 + t.std_cand ** 2 - 2 * t.std_ref * t.std_cand * t.cc
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, lhs)


def test_taylor_population_std():
    t = metrics.taylor_from_series([1.0, 3.0], [2.0, 2.5])
    assert t.std_ref == pytest.approx(1.0) and t.std_cand == pytest.approx(0.25)


# --------------------------------------------------------- report and CSVs


def test_evaluate_and_csvs(tmp_path):
    rng = np.random.default_rng(9)
    ref = rng.standard_normal((6, 2, 4, 4, 2))
    model = ref + rng.standard_normal(ref.shape)
    trans = ref + 0.5 * (model - ref)
    rep = metrics.evaluate(fs_from(ref), fs_from(model), fs_from(trans))
    assert rep.gain_pct == pytest.approx(75.0)
    assert rep.signed_pct == pytest.approx(75.0)
    assert len(rep.gains) == 4
    assert rep.eof_cc[(0.0, "reference")] == pytest.approx(1.0)
    metrics.write_csvs(rep, tmp_path, frame_offset=10)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["cc_by_depth.csv", "eof1.csv", "gain.csv", "mse_by_depth.csv",
                     "mse_series.csv", "taylor.csv"]
    rows = list(csv.reader(open(tmp_path / "gain.csv")))
    assert rows[0][:3] == ["depth_m", "component", "gain_pct"]
    assert rows[-1][:2] == ["all", "uv"] and float(rows[-1][2]) == pytest.approx(75.0)
    series = list(csv.reader(open(tmp_path / "mse_series.csv")))
    assert series[1][0] == "10" and len(series) == 7
