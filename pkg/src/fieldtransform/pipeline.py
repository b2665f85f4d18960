"""Training on the concurrent window and out-of-window transformation.

Backward mode is forward mode on time-reversed series: samples, training and
inference all run on ``reverse_time`` copies, and results are mapped back to
the original frame indices. The two directions are therefore bit-identical up
to the reversal.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import metrics, nn, stunet
from .field import (FieldSeries, align_temporal, align_vertical, read_field,
                    regrid_horizontal, reverse_time, write_field)
from .stunet import BACKWARD, FORWARD, NormStats, StuNetArch, StuNetModel

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid training or experiment configuration."""


class MisalignedGridsError(ValueError):
    pass


class InsufficientHistoryError(ValueError):
    pass


class ArchMismatchError(ValueError):
    pass


class NonFiniteLossError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 5e-4
    minibatch: int = 4
    max_epochs: int = 300
    drop_factor: float = 0.1
    drop_period: int = 100
    early_stop_rmse: Optional[float] = None
    window: int = 1
    direction: str = FORWARD
    seed: int = 42
    train_frames: Optional[tuple] = None   # [start, stop); None = all frames
    shuffle: bool = False
    optimizer: str = "adam"

    def validate(self, nt=None):
        if self.minibatch < 1 or self.max_epochs < 1 or self.window < 1:
            raise ConfigError("minibatch, max_epochs and window must be >= 1")
        if self.direction not in (FORWARD, BACKWARD):
            raise ConfigError(f"direction must be forward or backward, got {self.direction!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.early_stop_rmse is not None and self.early_stop_rmse < 0:
            raise ConfigError("early_stop_rmse must be >= 0")
        try:
            nn.LrSchedule(self.initial_lr, self.drop_factor, self.drop_period)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if nt is not None:
            a, b = self.frame_range(nt)
            if not 0 <= a < b <= nt:
                raise ConfigError(f"train_frames [{a}, {b}) outside [0, {nt})")
            if self.window > b - a:
                raise ConfigError(f"window {self.window} exceeds the training range")
        return self

    def frame_range(self, nt):
        return (0, nt) if self.train_frames is None else tuple(self.train_frames)

    @property
    def schedule(self) -> nn.LrSchedule:
        return nn.LrSchedule(self.initial_lr, self.drop_factor, self.drop_period)


@dataclass
class SamplePair:
    input: np.ndarray     # [2k, h, w]: frames t-k+1..t, (u, v) each
    target: np.ndarray    # [2, h, w]
    t: int                # target frame, original time index


@dataclass
class SampleSet:
    pairs: list
    stats: NormStats
    mask: np.ndarray
    direction: str
    window: int

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    def arrays(self):
        x = np.stack([p.input for p in self.pairs])
        y = np.stack([p.target for p in self.pairs])
        return x, y


def _check_aligned(a: FieldSeries, b: FieldSeries):
    sa, sb = a.spec, b.spec
    if (sa.nx, sa.ny, sa.nz, sa.depths_m, sa.dt_hours) != (sb.nx, sb.ny, sb.nz,
                                                           sb.depths_m, sb.dt_hours):
        raise MisalignedGridsError(f"grids differ: {sa} vs {sb}")
    if a.nt != b.nt:
        raise MisalignedGridsError(f"frame counts differ: {a.nt} vs {b.nt}")


def channel_stats(fs: FieldSeries, level, start, stop):
    """Per-channel mean and population std over valid cells of a frame range."""
    v = fs.data[start:stop, level][:, fs.mask]          # [t, cells, 2]
    v = v.reshape(-1, 2)
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    if np.any(std == 0):
        raise ConfigError("a velocity component has zero variance in the training range")
    return mean, std


def _normalized_frames(fs, level, mean, std):
    x = (fs.data[:, level] - mean) / std                 # [t, h, w, 2]
    x[:, ~fs.mask] = 0.0
    return x.transpose(0, 3, 1, 2)                       # [t, 2, h, w]


def _window_input(frames, t, k):
    return frames[t - k + 1:t + 1].reshape(2 * k, *frames.shape[2:])


def _to_processing_time(fs, direction):
    return reverse_time(fs) if direction == BACKWARD else fs


def _map_range(a, b, nt, direction):
    return (nt - b, nt - a) if direction == BACKWARD else (a, b)


def make_samples(model_fs: FieldSeries, obs_fs: FieldSeries, level: int,
                 cfg: TrainConfig) -> SampleSet:
    """Windowed, normalized (input, target) pairs for one depth level.

    Statistics come from the training range only: the model field for the
    inputs, the observed field for the targets.
    """
    _check_aligned(model_fs, obs_fs)
    nt = model_fs.nt
    cfg.validate(nt)
    a, b = _map_range(*cfg.frame_range(nt), nt, cfg.direction)
    m = _to_processing_time(model_fs, cfg.direction)
    o = _to_processing_time(obs_fs, cfg.direction)
    in_mean, in_std = channel_stats(m, level, a, b)
    tg_mean, tg_std = channel_stats(o, level, a, b)
    stats = NormStats(in_mean, in_std, tg_mean, tg_std)
    xm = _normalized_frames(m, level, in_mean, in_std)
    yo = _normalized_frames(o, level, tg_mean, tg_std)
    k = cfg.window
    pairs = []
    for t in range(a + k - 1, b):
        t_orig = nt - 1 - t if cfg.direction == BACKWARD else t
        pairs.append(SamplePair(_window_input(xm, t, k).copy(), yo[t].copy(), t_orig))
    return SampleSet(pairs, stats, model_fs.mask & obs_fs.mask, cfg.direction, k)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False

    @property
    def epochs(self):
        return len(self.loss)


def train(model: StuNetModel, samples: SampleSet, cfg: TrainConfig,
          progress: Optional[Callable] = None):
    """Mini-batch training. Returns ``(trained_copy, history)``.

    Batches follow sample order unless ``cfg.shuffle``. ``progress`` is
    called as ``progress(epoch, loss, rmse, lr)`` after every epoch.
    """
    cfg.validate()
    if len(samples) == 0:
        raise ConfigError("no training samples")
    x, y = samples.arrays()
    a = model.arch
    if x.shape[1:] != (a.in_channels, a.input_hw, a.input_hw):
        raise ArchMismatchError(
            f"samples {x.shape[1:]} do not fit arch "
            f"({a.in_channels}, {a.input_hw}, {a.input_hw})")
    model = model.copy()
    model.norm_stats = samples.stats
    model.direction = samples.direction
    params = model.arrays()
    state = nn.AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    n = len(samples)
    for epoch in range(cfg.max_epochs):
        lr = nn.lr_at_epoch(cfg.schedule, epoch)
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses, rmses = [], []
        for s in range(0, n, cfg.minibatch):
            idx = order[s:s + cfg.minibatch]
            loss, grads = stunet.loss_and_grads(model, x[idx], y[idx], samples.mask)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"loss became {loss} at epoch {epoch}")
            if cfg.optimizer == "adam":
                nn.adam_step(params, grads, state, lr)
            else:
                nn.sgd_step(params, grads, lr)
            hist.steps += 1
            losses.append(loss)
            rmses.append(math.sqrt(loss))
        hist.loss.append(float(np.mean(losses)))
        hist.rmse.append(float(np.mean(rmses)))
        hist.lr.append(lr)
        model.trained_epochs += 1
        if progress is not None:
            progress(epoch, hist.loss[-1], hist.rmse[-1], lr)
        if cfg.early_stop_rmse is not None and hist.rmse[-1] <= cfg.early_stop_rmse:
            hist.stopped_early = True
            break
    return model, hist


def transform(model: StuNetModel, model_fs: FieldSeries, frames, level=0,
              batch=16) -> FieldSeries:
    """Corrected (u, v) for ``frames`` (a ``(start, stop)`` pair or range) of
    one level, using only the numerical-model field.

    Forward models read frames ``t-k+1..t``; backward models ``t..t+k-1``.
    """
    start, stop = (frames.start, frames.stop) if isinstance(frames, range) else frames
    nt = model_fs.nt
    k = model.arch.in_channels // 2
    if not 0 <= start < stop <= nt:
        raise ConfigError(f"frames [{start}, {stop}) outside [0, {nt})")
    a, b = _map_range(start, stop, nt, model.direction)
    if a < k - 1:
        raise InsufficientHistoryError(
            f"{model.direction} window of {k} frames needs history before frame "
            f"{start if model.direction == FORWARD else stop - 1}")
    m = _to_processing_time(model_fs, model.direction)
    st = model.norm_stats
    xm = _normalized_frames(m, level, st.input_mean, st.input_std)
    out = np.empty((b - a, m.spec.ny, m.spec.nx, 2))
    for s in range(a, b, batch):
        ts = range(s, min(s + batch, b))
        xb = np.stack([_window_input(xm, t, k) for t in ts])
        yb = stunet.forward(model, xb).transpose(0, 2, 3, 1)
        out[s - a:s - a + len(ts)] = yb * st.target_std + st.target_mean
    out[:, ~model_fs.mask] = 0.0
    if model.direction == BACKWARD:
        out = out[::-1]
    spec = replace(model_fs.spec, nz=1, depths_m=(model_fs.spec.depths_m[level],))
    res = FieldSeries(spec, out[:, None], model_fs.mask)
    return res if (start, stop) == (0, nt) else _relabel(res, model_fs, start)


def _relabel(fs, parent, start):
    t0 = parent.spec.t0 + int(start * parent.spec.dt_hours // 24)
    return FieldSeries(replace(fs.spec, t0=t0), fs.data, fs.mask)


def stack_levels(levels):
    """Concatenate single-level series along depth."""
    first = levels[0]
    depths = tuple(fs.spec.depths_m[0] for fs in levels)
    spec = replace(first.spec, nz=len(levels), depths_m=depths)
    return FieldSeries(spec, np.concatenate([fs.data for fs in levels], axis=1), first.mask)


# --------------------------------------------------------------- experiment


@dataclass
class ExperimentSpec:
    model_field: object            # path or FieldSeries
    obs_field: object
    split: dict                    # {"train": [a, b], "test": [c, d]}, half-open
    direction: str = FORWARD
    window: int = 1
    levels: Optional[list] = None  # None = all
    base_channels: int = 16
    grid: Optional[tuple] = (64, 64)   # (nx, ny) after regridding; None = keep
    mask_rule: str = "all"
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Optional[str] = None

    @classmethod
    def from_json(cls, d: dict, base_dir=None) -> "ExperimentSpec":
        base = Path(base_dir) if base_dir is not None else Path(".")
        try:
            t = dict(d.get("train", {}))
            tc = TrainConfig(
                initial_lr=float(t.get("lr", 5e-4)),
                minibatch=int(t.get("minibatch", 4)),
                max_epochs=int(t.get("max_epochs", 300)),
                drop_factor=float(t.get("drop_factor", 0.1)),
                drop_period=int(t.get("drop_period", 100)),
                early_stop_rmse=t.get("early_stop_rmse"),
                seed=int(t.get("seed", 42)),
                shuffle=bool(t.get("shuffle", False)),
                direction=d.get("direction", FORWARD),
                window=int(d.get("window", 1)),
            )
            grid = d.get("grid", {"nx": 64, "ny": 64})
            out = d.get("out_dir")
            return cls(
                model_field=str(base / d["model_field"]),
                obs_field=str(base / d["obs_field"]),
                split={k: tuple(v) for k, v in d["split"].items()},
                direction=tc.direction,
                window=tc.window,
                levels=d.get("levels"),
                base_channels=int(d.get("arch", {}).get("base_channels", 16)),
                grid=None if grid is None else (int(grid["nx"]), int(grid["ny"])),
                mask_rule=d.get("mask_rule", "all"),
                train=tc,
                out_dir=None if out is None else str(base / out),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment spec: {exc!r}") from exc

    def with_overrides(self, **kw) -> "ExperimentSpec":
        spec = replace(self, **{k: v for k, v in kw.items() if k != "seed" and v is not None})
        t = spec.train
        t = replace(t, direction=spec.direction, window=spec.window)
        if kw.get("seed") is not None:
            t = replace(t, seed=int(kw["seed"]))
        return replace(spec, train=t)

    def validate(self, nt):
        try:
            (a, b), (c, d) = self.split["train"], self.split["test"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("split needs train and test [start, stop) pairs") from exc
        if not 0 <= a < b <= nt:
            raise ConfigError(f"train range [{a}, {b}) invalid for {nt} frames")
        if not 0 <= c < d <= nt:
            raise ConfigError(f"test range [{c}, {d}) is empty or outside [0, {nt})")
        if self.direction not in (FORWARD, BACKWARD):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        k = self.window
        if self.direction == FORWARD and c < k - 1:
            raise ConfigError("test range starts before a full input window")
        if self.direction == BACKWARD and d + k - 1 > nt:
            raise ConfigError("test range ends after the last full input window")


def _load(obj):
    return obj if isinstance(obj, FieldSeries) else read_field(obj)


def align_pair(model_fs: FieldSeries, obs_fs: FieldSeries, grid=(64, 64),
               mask_rule="all"):
    """Put both series on a common daily-or-coarser cadence, the observed depth
    levels and the target horizontal grid."""
    dt = max(model_fs.spec.dt_hours, obs_fs.spec.dt_hours)
    if model_fs.spec.dt_hours != dt:
        model_fs = align_temporal(model_fs, dt)
    if obs_fs.spec.dt_hours != dt:
        obs_fs = align_temporal(obs_fs, dt)
    if model_fs.spec.depths_m != obs_fs.spec.depths_m:
        model_fs = align_vertical(model_fs, obs_fs.spec.depths_m)
    if grid is not None:
        nx, ny = grid
        if (model_fs.spec.nx, model_fs.spec.ny) != (nx, ny):
            model_fs = regrid_horizontal(model_fs, nx, ny, mask_rule=mask_rule)
        if (obs_fs.spec.nx, obs_fs.spec.ny) != (nx, ny):
            obs_fs = regrid_horizontal(obs_fs, nx, ny, mask_rule=mask_rule)
    nt = min(model_fs.nt, obs_fs.nt)
    if model_fs.nt != nt:
        model_fs = model_fs.frames(0, nt)
    if obs_fs.nt != nt:
        obs_fs = obs_fs.frames(0, nt)
    mask = model_fs.mask & obs_fs.mask
    model_fs = FieldSeries.masked(model_fs.spec, model_fs.data, mask)
    obs_fs = FieldSeries.masked(obs_fs.spec, obs_fs.data, mask)
    return model_fs, obs_fs


def train_level(model_fs, obs_fs, level, exp: ExperimentSpec, progress=None):
    # the experiment's direction and window win over the copies in exp.train
    cfg = replace(exp.train, train_frames=tuple(exp.split["train"]),
                  direction=exp.direction, window=exp.window)
    samples = make_samples(model_fs, obs_fs, level, cfg)
    ny, nx = model_fs.spec.ny, model_fs.spec.nx
    if nx != ny:
        raise ConfigError(f"the network needs a square grid, got {ny}x{nx}")
    arch = StuNetArch(input_hw=nx, in_channels=2 * cfg.window,
                      base_channels=exp.base_channels)
    try:
        arch.validate()
    except stunet.InvalidArchError as exc:
        raise ConfigError(str(exc)) from exc
    model = stunet.build(arch, cfg.seed)
    return train(model, samples, cfg, progress)


def _train_level_job(args):
    model_fs, obs_fs, level, exp = args
    lines = []
    model, hist = train_level(model_fs, obs_fs, level, exp,
                              lambda e, l, r, lr: lines.append((e, l, r, lr)))
    return model, hist, lines


@dataclass
class ExperimentResult:
    report: metrics.EvalReport
    transformed: FieldSeries
    reference: FieldSeries
    original: FieldSeries
    models: dict
    histories: dict
    out_dir: Optional[Path] = None


def _fmt_epoch(e, loss, rmse, lr):
    return f"{e},{loss!r},{rmse!r},{lr!r}"


def train_bank(model_fs, obs_fs, exp: ExperimentSpec, jobs=1,
               progress: Optional[Callable] = None):
    """Train one model per requested level on aligned series.

    Returns ``(models, histories, logs)`` keyed like :func:`stunet.save_bank`
    (models) and by level index (histories, per-epoch log tuples). ``progress``
    gets ``(level, epoch, loss, rmse, lr)``; with ``jobs > 1`` it is replayed
    in level order after all workers finish, so the stream stays deterministic.
    """
    nz = model_fs.spec.nz
    levels = list(range(nz)) if exp.levels is None else list(exp.levels)
    for lv in levels:
        if not 0 <= lv < nz:
            raise ConfigError(f"level {lv} outside [0, {nz})")
    job_args = [(model_fs, obs_fs, lv, exp) for lv in levels]
    if jobs > 1 and len(levels) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_level_job, job_args))
        if progress is not None:
            for lv, (_, _, lines) in zip(levels, results):
                for line in lines:
                    progress(lv, *line)
    else:
        results = []
        for args in job_args:
            lines = []

            def rec(e, l, r, lr, lv=args[2]):
                lines.append((e, l, r, lr))
                if progress is not None:
                    progress(lv, e, l, r, lr)
            model, hist = train_level(*args, progress=rec)
            results.append((model, hist, lines))
    models, histories, logs = {}, {}, {}
    for lv, (model, hist, lines) in zip(levels, results):
        models[(lv, model_fs.spec.depths_m[lv])] = model
        histories[lv] = hist
        logs[lv] = lines
    return models, histories, logs


def run_experiment(exp: ExperimentSpec, jobs=1, progress: Optional[Callable] = None,
                   write=True) -> ExperimentResult:
    """Align, train one model per level, transform the test range, evaluate,
    and (if ``write``) save every artifact to ``exp.out_dir``.

    Nothing is written unless every level succeeds.
    """
    model_fs, obs_fs = align_pair(_load(exp.model_field), _load(exp.obs_field),
                                  exp.grid, exp.mask_rule)
    exp.validate(model_fs.nt)
    models, histories, logs = train_bank(model_fs, obs_fs, exp, jobs, progress)
    c, d = exp.split["test"]
    levels = [lv for lv, _ in sorted(models)]
    trans = stack_levels([transform(models[key], model_fs, (c, d), level=key[0])
                          for key in sorted(models)])
    ref = stack_levels([obs_fs.frames(c, d).level(lv) for lv in levels])
    orig = stack_levels([model_fs.frames(c, d).level(lv) for lv in levels])
    report = metrics.evaluate(ref, orig, trans)
    result = ExperimentResult(report, trans, ref, orig, models, histories)
    if write and exp.out_dir is not None:
        result.out_dir = write_outputs(result, exp, logs)
    return result


def write_log(path, logs):
    """Per-epoch training log; the only output that carries a wall-clock time."""
    with open(path, "w") as fh:
        fh.write(f"# started {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        fh.write("level,epoch,loss,rmse,lr\n")
        for lv, lines in logs.items():
            for e, l, r, lr in lines:
                fh.write(f"{lv},{_fmt_epoch(e, l, r, lr)}\n")


def write_outputs(result: ExperimentResult, exp: ExperimentSpec, logs) -> Path:
    out = Path(exp.out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))
    try:
        c, _ = exp.split["test"]
        write_field(tmp / "transformed.fld", result.transformed)
        stunet.save_bank(result.models, tmp / "checkpoints")
        metrics.write_csvs(result.report, tmp, frame_offset=c)
        rep = result.report
        for which, suffix in (("transformed", ""), ("reference", "_reference"),
                              ("model", "_model")):
            grids = [rep.eof1[(d, which)].as_grid() for d in rep.depths_m]
            data = np.stack(grids)[None]
            spec = replace(result.transformed.spec)
            write_field(tmp / f"eof1_pattern{suffix}.fld",
                        FieldSeries.masked(spec, data, rep.eof1[(rep.depths_m[0], which)].mask))
        write_log(tmp / "run.log", logs)
        out.mkdir(parents=True, exist_ok=True)
        for p in sorted(tmp.iterdir()):
            dest = out / p.name
            if dest.is_dir():
                shutil.rmtree(dest)
            elif dest.exists():
                dest.unlink()
            shutil.move(str(p), str(dest))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return out


def load_experiment(path) -> ExperimentSpec:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentSpec.from_json(d, base_dir=path.parent)
