"""Skill statistics for a (reference, candidate) pair of field series."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import FieldSeries


class MetricsError(ValueError):
    pass


class MisalignedSeriesError(MetricsError):
    pass


class ZeroBaselineError(MetricsError):
    pass


class DegenerateVarianceError(MetricsError):
    pass


class NonConvergenceError(MetricsError):
    pass


def _check_pair(ref: FieldSeries, cand: FieldSeries):
    if ref.data.shape != cand.data.shape:
        raise MisalignedSeriesError(
            f"shapes differ: {ref.data.shape} vs {cand.data.shape}")
    return ref.mask & cand.mask


def _levels(level):
    return slice(None) if level is None else slice(level, level + 1)


def _components(component):
    return slice(None) if component is None else slice(component, component + 1)


def mse_series(ref: FieldSeries, cand: FieldSeries, level=None, component=None):
    """Per-frame mean squared difference over valid cells.

    ``level=None`` averages over all levels, ``component=None`` over u and v.
    """
    mask = _check_pair(ref, cand)
    if not mask.any():
        raise MisalignedSeriesError("the two series share no valid cell")
    d = (cand.data - ref.data)[:, _levels(level)][:, :, mask][..., _components(component)]
    d = d.reshape(d.shape[0], -1)
    return np.mean(d * d, axis=1)


def gain(mse_model, mse_transformed):
    """Correction gain in percent: ``|M_t - M_m| / M_m * 100``.

    ``M_m`` and ``M_t`` are the time means of the two MSE series.
    """
    a = np.asarray(mse_model, dtype=float)
    b = np.asarray(mse_transformed, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise MisalignedSeriesError("MSE series must be 1-D with equal length >= 1")
    m_model = a.sum() / a.size
    m_trans = b.sum() / b.size
    if m_model == 0:
        raise ZeroBaselineError("model MSE is zero; gain undefined")
    return abs(m_trans - m_model) / m_model * 100.0


def signed_change(mse_model, mse_transformed):
    """Relative MSE reduction in percent; negative when the candidate is worse."""
    a = np.asarray(mse_model, dtype=float)
    b = np.asarray(mse_transformed, dtype=float)
    m_model = a.sum() / a.size
    if m_model == 0:
        raise ZeroBaselineError("model MSE is zero")
    return (m_model - b.sum() / b.size) / m_model * 100.0


def pearson(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size or a.size < 2:
        raise DegenerateVarianceError("need two equal-length samples of size >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise DegenerateVarianceError("zero variance")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def correlation(ref: FieldSeries, cand: FieldSeries, level=0, component=0):
    """Pearson correlation over all (frame, valid cell) pairs of one level and
    velocity component."""
    mask = _check_pair(ref, cand)
    r = ref.data[:, level][:, mask, component]
    c = cand.data[:, level][:, mask, component]
    return pearson(r, c)


# ---------------------------------------------------------------------- EOF


@dataclass
class EofMode:
    pattern: np.ndarray       # unit-norm, over valid cells (u block then v block)
    explained: float
    pc: np.ndarray
    mask: np.ndarray
    components: tuple

    def as_grid(self):
        """Pattern scattered onto ``[ny, nx, 2]`` (zeros elsewhere)."""
        ny, nx = self.mask.shape
        out = np.zeros((ny, nx, 2))
        n = int(self.mask.sum())
        for k, comp in enumerate(self.components):
            out[self.mask, comp] = self.pattern[k * n:(k + 1) * n]
        return out


def leading_eigvec(g, tol=1e-10, max_iter=10_000):
    """Power iteration on a symmetric PSD matrix.

    Starts from the column of ``g`` with the largest norm (deterministic and
    never orthogonal to the range). Stops when the residual
    ``||g v - lam v|| <= tol * lam``.
    """
    norms = np.linalg.norm(g, axis=0)
    if norms.max() == 0:
        raise DegenerateVarianceError("zero matrix has no leading eigenvector")
    v = g[:, np.argmax(norms)].copy()
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = g @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * lam:
            return lam, v
        v = w / np.linalg.norm(w)
    raise NonConvergenceError(f"power iteration did not converge in {max_iter} steps")


def eof_matrix(fs: FieldSeries, level=0, component=None, mask=None):
    """Time x (space*components) anomaly matrix over valid cells."""
    mask = fs.mask if mask is None else mask
    comps = (0, 1) if component is None else (component,)
    x = np.concatenate([fs.data[:, level][:, mask, c] for c in comps], axis=1)
    return x - x.mean(axis=0), comps, mask


def eof_mode1(fs: FieldSeries, level=0, component=None, mask=None, tol=1e-10,
              max_iter=10_000) -> EofMode:
    """Leading EOF of one level.

    u and v are stacked into one state vector unless ``component`` picks one.
    The pattern is sign-fixed so its largest-magnitude entry is positive.
    """
    if fs.nt < 2:
        raise DegenerateVarianceError("EOF needs at least two frames")
    x, comps, mask = eof_matrix(fs, level, component, mask)
    if x.shape[1] == 0:
        raise DegenerateVarianceError("no valid cells")
    total = float(np.sum(x * x))
    if total == 0:
        raise DegenerateVarianceError("field is constant in time")
    nt, p = x.shape
    if nt <= p:
        lam, a = leading_eigvec(x @ x.T, tol, max_iter)
        pattern = x.T @ a
        pattern /= np.linalg.norm(pattern)
    else:
        lam, pattern = leading_eigvec(x.T @ x, tol, max_iter)
    k = np.argmax(np.abs(pattern))
    if pattern[k] < 0:
        pattern = -pattern
    return EofMode(pattern=pattern, explained=min(lam / total, 1.0), pc=x @ pattern,
                   mask=mask, components=comps)


def pattern_correlation(m1: EofMode, m2: EofMode):
    """Pearson correlation of two EOF patterns, sign-aligned (EOFs are only
    defined up to sign)."""
    if not np.array_equal(m1.mask, m2.mask) or m1.components != m2.components:
        raise MisalignedSeriesError("EOF modes computed on different cells")
    return abs(pearson(m1.pattern, m2.pattern))


# -------------------------------------------------------------------- Taylor


@dataclass(frozen=True)
class TaylorStats:
    std_ref: float
    std_cand: float
    cc: float
    crmse: float


def mean_speed_series(fs: FieldSeries, level=None, mask=None):
    """Spatial mean of ``sqrt(u^2 + v^2)`` over valid cells, per frame."""
    mask = fs.mask if mask is None else mask
    d = fs.data[:, _levels(level)][:, :, mask]
    speed = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)
    return speed.reshape(fs.nt, -1).mean(axis=1)


def taylor_from_series(r, c) -> TaylorStats:
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    dr, dc = r - r.mean(), c - c.mean()
    sr = float(np.sqrt(np.mean(dr * dr)))
    sc = float(np.sqrt(np.mean(dc * dc)))
    cc = pearson(r, c)
    crmse = float(np.sqrt(np.mean((dc - dr) ** 2)))
    return TaylorStats(sr, sc, cc, crmse)


def taylor_stats(ref: FieldSeries, cand: FieldSeries, level=None) -> TaylorStats:
    """Std devs, correlation and centered RMS difference of the spatially
    averaged speed time series."""
    mask = _check_pair(ref, cand)
    if ref.nt < 2:
        raise DegenerateVarianceError("Taylor statistics need at least two frames")
    return taylor_from_series(mean_speed_series(ref, level, mask),
                              mean_speed_series(cand, level, mask))


# -------------------------------------------------------------------- report


@dataclass
class EvalReport:
    depths_m: list
    mse_model: np.ndarray                 # per frame, all levels
    mse_transformed: np.ndarray
    mse_by_depth: list = field(default_factory=list)   # (depth, comp, mse_m, mse_t)
    cc_by_depth: list = field(default_factory=list)    # (depth, comp, cc_m, cc_t)
    gains: list = field(default_factory=list)          # (depth, comp, gain, signed)
    taylor: list = field(default_factory=list)         # (depth, which, TaylorStats)
    eof1: dict = field(default_factory=dict)           # (depth, which) -> EofMode
    eof_cc: dict = field(default_factory=dict)         # (depth, which) -> cc vs ref

    @property
    def gain_pct(self):
        return gain(self.mse_model, self.mse_transformed)

    @property
    def signed_pct(self):
        return signed_change(self.mse_model, self.mse_transformed)


COMPONENT_NAMES = ("u", "v")


def evaluate(ref: FieldSeries, model: FieldSeries, transformed: FieldSeries,
             eof=True) -> EvalReport:
    """All statistics comparing the original and transformed fields against
    the reference."""
    _check_pair(ref, model)
    mask = _check_pair(ref, transformed) & model.mask
    depths = list(ref.spec.depths_m)
    rep = EvalReport(depths, mse_series(ref, model), mse_series(ref, transformed))
    for k, depth in enumerate(depths):
        for c, name in enumerate(COMPONENT_NAMES):
            mm = mse_series(ref, model, level=k, component=c)
            mt = mse_series(ref, transformed, level=k, component=c)
            rep.mse_by_depth.append((depth, name, float(mm.mean()), float(mt.mean())))
            rep.gains.append((depth, name, gain(mm, mt), signed_change(mm, mt)))
            rep.cc_by_depth.append((depth, name, _safe(correlation, ref, model, k, c),
                                    _safe(correlation, ref, transformed, k, c)))
        for which, cand in (("model", model), ("transformed", transformed)):
            rep.taylor.append((depth, which, taylor_stats(ref, cand, level=k)))
        if eof:
            modes = {w: eof_mode1(fs, level=k, mask=mask)
                     for w, fs in (("reference", ref), ("model", model),
                                   ("transformed", transformed))}
            for w, m in modes.items():
                rep.eof1[(depth, w)] = m
                rep.eof_cc[(depth, w)] = pattern_correlation(modes["reference"], m)
    return rep


def _safe(fn, *args):
    try:
        return fn(*args)
    except DegenerateVarianceError:
        return float("nan")


def _fmt(x):
    return repr(float(x))


def write_csvs(rep: EvalReport, out_dir, frame_offset=0):
    """mse_series.csv, mse_by_depth.csv, cc_by_depth.csv, gain.csv, taylor.csv
    and eof1.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def write(name, header, rows):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    write("mse_series.csv", ["frame_index", "mse_model", "mse_transformed"],
          [[frame_offset + i, _fmt(a), _fmt(b)]
           for i, (a, b) in enumerate(zip(rep.mse_model, rep.mse_transformed))])
    write("mse_by_depth.csv", ["depth_m", "component", "mse_model", "mse_transformed"],
          [[_fmt(d), c, _fmt(a), _fmt(b)] for d, c, a, b in rep.mse_by_depth])
    write("cc_by_depth.csv", ["depth_m", "component", "cc_model", "cc_transformed"],
          [[_fmt(d), c, _fmt(a), _fmt(b)] for d, c, a, b in rep.cc_by_depth])
    rows = [[_fmt(d), c, _fmt(g), _fmt(s)] for d, c, g, s in rep.gains]
    rows.append(["all", "uv", _fmt(rep.gain_pct), _fmt(rep.signed_pct)])
    write("gain.csv", ["depth_m", "component", "gain_pct", "signed_pct"], rows)
    write("taylor.csv", ["depth_m", "series", "std_ref", "std_cand", "cc", "crmse"],
          [[_fmt(d), w, _fmt(t.std_ref), _fmt(t.std_cand), _fmt(t.cc), _fmt(t.crmse)]
           for d, w, t in rep.taylor])
    write("eof1.csv", ["depth_m", "series", "explained_variance", "pattern_cc_vs_reference"],
          [[_fmt(d), w, _fmt(m.explained), _fmt(rep.eof_cc[(d, w)])]
           for (d, w), m in rep.eof1.items()])
