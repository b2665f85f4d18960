"""Gridded velocity fields: data model, regridding and alignment.

A :class:`FieldSeries` holds ``data[t, z, y, x, c]`` (c = 0 zonal u,
c = 1 meridional v, m/s) and a ``mask[y, x]`` of valid water cells.
Invalid cells always hold exactly 0.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FLD_MAGIC = b"FLD1\0\0\0\0"
AXES = ["t", "z", "y", "x", "c"]
CHANNELS = ["u", "v"]
KEYS_A = -0.5


class FieldError(ValueError):
    """Invalid field contents or arguments."""


class GridTooSmallError(FieldError):
    pass


class ExtrapolationError(FieldError):
    pass


class IncompatibleIntervalError(FieldError):
    pass


class FieldFormatError(FieldError):
    """Unreadable or corrupt FLD1 file."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int = 1
    depths_m: tuple = (0.0,)
    dt_hours: float = 24.0
    t0: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depths_m", tuple(float(d) for d in self.depths_m))
        if self.nx < 4 or self.ny < 4:
            raise GridTooSmallError(f"grid {self.ny}x{self.nx} is smaller than 4x4")
        if len(self.depths_m) != self.nz:
            raise FieldError(f"{len(self.depths_m)} depths given for nz={self.nz}")
        d = np.asarray(self.depths_m)
        if np.any(d < 0) or np.any(np.diff(d) <= 0):
            raise FieldError("depths must be >= 0 and strictly increasing")
        if not self.dt_hours > 0:
            raise FieldError("dt_hours must be > 0")

    def to_json(self) -> dict:
        return dict(nx=self.nx, ny=self.ny, nz=self.nz, depths_m=list(self.depths_m),
                    dt_hours=self.dt_hours, t0=self.t0)

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(nx=int(d["nx"]), ny=int(d["ny"]), nz=int(d["nz"]),
                   depths_m=tuple(d["depths_m"]), dt_hours=float(d["dt_hours"]),
                   t0=int(d["t0"]))


def _readonly(a):
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class FieldSeries:
    spec: GridSpec
    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        s = self.spec
        if data.ndim != 5 or data.shape[1:] != (s.nz, s.ny, s.nx, 2):
            raise FieldError(
                f"data shape {data.shape} does not match [t, {s.nz}, {s.ny}, {s.nx}, 2]")
        if data.shape[0] < 1:
            raise FieldError("a field series needs at least one frame")
        if mask.shape != (s.ny, s.nx):
            raise FieldError(f"mask shape {mask.shape} != {(s.ny, s.nx)}")
        if np.any(data[:, :, ~mask] != 0):
            raise FieldError("masked-out cells must hold exactly 0")
        if not np.all(np.isfinite(data[:, :, mask])):
            raise FieldError("non-finite values at valid cells")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "mask", _readonly(mask))

    @classmethod
    def masked(cls, spec: GridSpec, data, mask=None) -> "FieldSeries":
        """Build a series, zeroing every cell outside ``mask``."""
        data = np.array(data, dtype=np.float64)
        mask = np.ones((spec.ny, spec.nx), bool) if mask is None else np.asarray(mask, bool)
        data[:, :, ~mask] = 0.0
        return cls(spec, data, mask)

    @property
    def nt(self) -> int:
        return self.data.shape[0]

    def frames(self, start, stop) -> "FieldSeries":
        """Sub-series of frames ``start..stop-1``; ``t0`` follows the first frame."""
        if not 0 <= start < stop <= self.nt:
            raise FieldError(f"frame range [{start}, {stop}) outside [0, {self.nt})")
        spec = replace(self.spec, t0=self.spec.t0 + int(start * self.spec.dt_hours // 24))
        return FieldSeries(spec, self.data[start:stop], self.mask)

    def level(self, k) -> "FieldSeries":
        spec = replace(self.spec, nz=1, depths_m=(self.spec.depths_m[k],))
        return FieldSeries(spec, self.data[:, k:k + 1], self.mask)

    def equals(self, other) -> bool:
        return (self.spec == other.spec and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.data, other.data))


# ------------------------------------------------------------------ bicubic


def keys_kernel(s, a=KEYS_A):
    """Keys cubic-convolution kernel evaluated at offset ``s`` (cells)."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    s2, s3 = s * s, s * s * s
    inner = (a + 2) * s3 - (a + 3) * s2 + 1
    outer = a * s3 - 5 * a * s2 + 8 * a * s - 4 * a
    out = np.where(s <= 1, inner, np.where(s < 2, outer, 0.0))
    return float(out) if out.ndim == 0 else out


def keys_weights(n_src, positions, a=KEYS_A):
    """Dense ``[len(positions), n_src]`` interpolation matrix.

    ``positions`` are fractional source indices in ``[0, n_src - 1]``. The
    samples one cell beyond each border are the cubic extrapolations
    ``f[-1] = 3f[0] - 3f[1] + f[2]`` (and mirrored at the far end), folded
    into the matrix, so linear data is reproduced exactly up to the edges.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if n_src < 4:
        raise GridTooSmallError(f"bicubic needs >= 4 samples, got {n_src}")
    if np.any(positions < 0) or np.any(positions > n_src - 1):
        raise FieldError("interpolation positions outside the source grid")
    base = np.minimum(np.floor(positions).astype(int), n_src - 2)
    frac = positions - base
    w = np.zeros((positions.size, n_src))
    rows = np.arange(positions.size)
    ghost_lo = {0: 3.0, 1: -3.0, 2: 1.0}
    ghost_hi = {n_src - 1: 3.0, n_src - 2: -3.0, n_src - 3: 1.0}
    for off in (-1, 0, 1, 2):
        k = keys_kernel(frac - off, a)
        node = base + off
        inside = (node >= 0) & (node < n_src)
        np.add.at(w, (rows[inside], node[inside]), k[inside])
        for sel, ghost in ((node < 0, ghost_lo), (node >= n_src, ghost_hi)):
            if np.any(sel):
                for src, coef in ghost.items():
                    np.add.at(w, (rows[sel], np.full(sel.sum(), src)), coef * k[sel])
    return w


def corner_positions(n_src, n_dst):
    """Source positions of ``n_dst`` points spanning the same extent, first and
    last points coinciding."""
    if n_dst == 1:
        return np.zeros(1)
    # multiply before dividing so the last point is exactly n_src - 1
    return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)


@dataclass(frozen=True, eq=False)
class ResamplePlan:
    """Precomputed weights for moving a series onto another grid.

    ``wy``/``wx`` are the separable horizontal weights (each destination cell
    uses ``outer(wy[j], wx[i])``); ``vertical_map`` lists ``(i0, i1, w)`` per
    destination level; ``temporal_stride`` frames are averaged per output frame.
    """

    src_spec: GridSpec
    dst_spec: GridSpec
    wy: np.ndarray
    wx: np.ndarray
    vertical_map: list = field(default_factory=list)
    temporal_stride: int = 1

    def horizontal_weights(self, j, i):
        return np.outer(self.wy[j], self.wx[i])


def plan_horizontal(src_spec: GridSpec, dst_nx, dst_ny, a=KEYS_A) -> ResamplePlan:
    if dst_nx < 4 or dst_ny < 4:
        raise GridTooSmallError(f"destination grid {dst_ny}x{dst_nx} smaller than 4x4")
    wy = keys_weights(src_spec.ny, corner_positions(src_spec.ny, dst_ny), a)
    wx = keys_weights(src_spec.nx, corner_positions(src_spec.nx, dst_nx), a)
    dst = replace(src_spec, nx=dst_nx, ny=dst_ny)
    vmap = [(k, k, 0.0) for k in range(src_spec.nz)]
    return ResamplePlan(src_spec, dst, wy, wx, vmap, 1)


def _support_valid(wy, wx, mask, rule):
    if rule == "all":
        # valid only if every source cell with a nonzero weight is valid
        bad = (wy != 0).astype(float) @ (~mask).astype(float) @ (wx != 0).astype(float).T
        return bad == 0
    if rule == "nearest":
        ny, nx = mask.shape
        jy = np.rint(corner_positions(ny, wy.shape[0])).astype(int)
        ix = np.rint(corner_positions(nx, wx.shape[0])).astype(int)
        return mask[np.ix_(jy, ix)]
    raise FieldError(f"unknown mask rule {rule!r}")


def apply_horizontal(src: FieldSeries, wy, wx, dst_spec, mask_rule="all"):
    out = np.einsum("jy,tzyxc->tzjxc", wy, src.data, optimize=True)
    out = np.einsum("ix,tzjxc->tzjic", wx, out, optimize=True)
    mask = _support_valid(wy, wx, src.mask, mask_rule)
    out[:, :, ~mask] = 0.0
    return FieldSeries(dst_spec, out, mask)


def regrid_horizontal(src: FieldSeries, dst_nx, dst_ny, a=KEYS_A, mask_rule="all"):
    """Separable Keys bicubic resampling of every frame, level and channel.

    Source and destination grids span the same extent with coincident corner
    points. ``mask_rule="all"`` keeps a destination cell only when all of its
    contributing source cells are valid; ``"nearest"`` copies the validity of
    the nearest source cell instead.
    """
    if src.spec.nx < 4 or src.spec.ny < 4:
        raise GridTooSmallError("source grid smaller than 4x4")
    plan = plan_horizontal(src.spec, dst_nx, dst_ny, a)
    return apply_horizontal(src, plan.wy, plan.wx, plan.dst_spec, mask_rule)


def shift_horizontal(src: FieldSeries, shift_x=0.0, shift_y=0.0, a=KEYS_A):
    """Translate the field by a (fractional) number of cells.

    ``out(x) = src(x - shift)``; positions falling outside the grid are
    clamped to the border cell. The mask is carried over unchanged.
    """
    s = src.spec
    px = np.clip(np.arange(s.nx) - shift_x, 0, s.nx - 1)
    py = np.clip(np.arange(s.ny) - shift_y, 0, s.ny - 1)
    wx = keys_weights(s.nx, px, a)
    wy = keys_weights(s.ny, py, a)
    out = np.einsum("jy,tzyxc->tzjxc", wy, src.data, optimize=True)
    out = np.einsum("ix,tzjxc->tzjic", wx, out, optimize=True)
    out[:, :, ~src.mask] = 0.0
    return FieldSeries(s, out, src.mask)


# ------------------------------------------------------- vertical / temporal


def plan_vertical(src_depths, dst_depths):
    z = np.asarray(src_depths, dtype=np.float64)
    vmap = []
    for d in dst_depths:
        if d < z[0] or d > z[-1]:
            raise ExtrapolationError(f"depth {d} m outside [{z[0]}, {z[-1]}] m")
        if z.size == 1:
            vmap.append((0, 0, 0.0))
            continue
        i0 = min(int(np.searchsorted(z, d, side="right")) - 1, z.size - 2)
        w = (d - z[i0]) / (z[i0 + 1] - z[i0])
        vmap.append((i0, i0 + 1, float(w)))
    return vmap


def align_vertical(src: FieldSeries, dst_depths_m):
    """Linear interpolation in depth, column by column."""
    vmap = plan_vertical(src.spec.depths_m, dst_depths_m)
    out = np.empty((src.nt, len(vmap)) + src.data.shape[2:])
    for k, (i0, i1, w) in enumerate(vmap):
        out[:, k] = (1.0 - w) * src.data[:, i0] + w * src.data[:, i1]
    spec = replace(src.spec, nz=len(vmap), depths_m=tuple(dst_depths_m))
    return FieldSeries(spec, out, src.mask)


def align_temporal(src: FieldSeries, dst_dt_hours):
    """Average non-overlapping blocks of frames down to ``dst_dt_hours``.

    Trailing frames that do not fill a block are dropped.
    """
    ratio = dst_dt_hours / src.spec.dt_hours
    block = int(round(ratio))
    if block < 1 or not math.isclose(ratio, block, rel_tol=0, abs_tol=1e-9):
        raise IncompatibleIntervalError(
            f"{dst_dt_hours} h is not a multiple of {src.spec.dt_hours} h")
    nt = src.nt // block
    if nt < 1:
        raise IncompatibleIntervalError(f"fewer than {block} frames to average")
    acc = src.data[0:nt * block:block].copy()
    for k in range(1, block):  # left-to-right summation
        acc += src.data[k:nt * block:block]
    if block > 1:
        acc /= block
    return FieldSeries(replace(src.spec, dt_hours=float(dst_dt_hours)), acc, src.mask)


def reverse_time(src: FieldSeries):
    """Frames in reverse order. ``t0`` is kept; it then labels the last frame."""
    return FieldSeries(src.spec, src.data[::-1].copy(), src.mask)


# ------------------------------------------------------------------- FLD1 io


def mask_to_rle(mask) -> dict:
    flat = np.asarray(mask, bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    return dict(first=bool(flat[0]), runs=np.diff(bounds).tolist())


def mask_from_rle(rle, shape):
    runs = rle["runs"]
    if sum(runs) != shape[0] * shape[1] or any(r <= 0 for r in runs):
        raise FieldFormatError("mask run lengths do not cover the grid")
    vals = np.zeros(len(runs), bool)
    vals[0::2] = rle["first"]
    vals[1::2] = not rle["first"]
    return np.repeat(vals, runs).reshape(shape)


def field_bytes(fs: FieldSeries) -> bytes:
    header = dict(format="FLD1", grid=fs.spec.to_json(), nt=fs.nt, axes=AXES,
                  channels=CHANNELS, dtype="<f4", mask_rle=mask_to_rle(fs.mask))
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return FLD_MAGIC + struct.pack("<I", len(hb)) + hb + fs.data.astype("<f4").tobytes()


def write_field(path, fs: FieldSeries) -> None:
    Path(path).write_bytes(field_bytes(fs))


def _parse_header(raw: bytes, path):
    if len(raw) < 12 or raw[:8] != FLD_MAGIC:
        raise FieldFormatError(f"{path}: not an FLD1 file (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    hb = raw[12:12 + n]
    if len(hb) != n:
        raise FieldFormatError(f"{path}: truncated header")
    try:
        header = json.loads(hb.decode("utf-8"))
        spec = GridSpec.from_json(header["grid"])
        nt = int(header["nt"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError,
            FieldError) as exc:
        raise FieldFormatError(f"{path}: invalid header ({exc})") from exc
    if header.get("axes") != AXES or header.get("channels") != CHANNELS:
        raise FieldFormatError(f"{path}: unexpected axis order or channels")
    return header, spec, nt, 12 + n


def read_field_header(path) -> dict:
    """Header dictionary of an FLD1 file; the payload is not read."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) == 12 and head[:8] == FLD_MAGIC:
            head += fh.read(struct.unpack("<I", head[8:12])[0])
    header, _, _, _ = _parse_header(head, path)
    return header


def read_field(path) -> FieldSeries:
    raw = Path(path).read_bytes()
    header, spec, nt, off = _parse_header(raw, path)
    shape = (nt, spec.nz, spec.ny, spec.nx, 2)
    expected = 4 * int(np.prod(shape))
    payload = raw[off:]
    if len(payload) != expected:
        raise FieldFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}")
    mask = mask_from_rle(header["mask_rle"], (spec.ny, spec.nx))
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    try:
        return FieldSeries(spec, data, mask)
    except FieldError as exc:
        raise FieldFormatError(f"{path}: {exc}") from exc
