"""Command-line entry point: ``fieldtransform <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable, corrupt or mismatched files), 3 numerical failure. Every failure
prints one JSON line ``{"error": ..., "exit_code": ..., "message": ...}`` on
stderr.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from . import field, metrics, pipeline, stunet, synth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

_USAGE_ERRORS = (pipeline.ConfigError, synth.InvalidSynthSpecError,
                 stunet.InvalidArchError)
_DATA_ERRORS = (field.FieldError, stunet.CorruptCheckpointError,
                stunet.CheckpointVersionError, pipeline.MisalignedGridsError,
                pipeline.ArchMismatchError, pipeline.InsufficientHistoryError,
                metrics.MisalignedSeriesError, OSError, json.JSONDecodeError)
_NUMERICAL_ERRORS = (pipeline.NonFiniteLossError, metrics.NonConvergenceError,
                     metrics.DegenerateVarianceError, metrics.ZeroBaselineError,
                     FloatingPointError)


class UsageError(Exception):
    pass


def exit_code_for(exc: BaseException) -> int:
    # data errors first: JSONDecodeError is also a ValueError
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    if isinstance(exc, _NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    if isinstance(exc, (UsageError,) + _USAGE_ERRORS):
        return EXIT_USAGE
    return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_NUMERICAL


def _report_error(exc, code):
    line = json.dumps({"error": type(exc).__name__, "exit_code": code,
                       "message": str(exc)})
    print(line, file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ parsing


def parse_levels(text):
    """``"3"`` or inclusive ``"a..b"`` -> list of level indices."""
    try:
        if ".." in text:
            a, b = (int(s) for s in text.split("..", 1))
        else:
            a = b = int(text)
    except ValueError:
        raise UsageError(f"--levels expects N or A..B, got {text!r}") from None
    if a < 0 or b < a:
        raise UsageError(f"--levels range {text!r} is empty or negative")
    return list(range(a, b + 1))


def parse_frames(text):
    """Half-open ``"start:stop"``."""
    try:
        a, b = (int(s) for s in text.split(":", 1))
    except ValueError:
        raise UsageError(f"--frames expects START:STOP, got {text!r}") from None
    if not 0 <= a < b:
        raise UsageError(f"--frames {text!r} is empty or negative")
    return a, b


def _progress(stream):
    current = [None]

    def emit(level, epoch, loss, rmse, lr):
        if level != current[0]:
            print(f"# level {level}", file=stream)
            print("epoch,loss,rmse,lr", file=stream)
            current[0] = level
        print(pipeline._fmt_epoch(epoch, loss, rmse, lr), file=stream, flush=True)
    return emit


def _quiet(args):
    return None if args.quiet else _progress(sys.stderr)


# ------------------------------------------------------------- subcommands


def _twin_experiment(spec: synth.SynthSpec, out_dir: str) -> dict:
    test = max(1, spec.nt // 7)
    return dict(
        model_field="model.fld", obs_field="truth.fld", direction="forward",
        window=1, split=dict(train=[0, spec.nt - test], test=[spec.nt - test, spec.nt]),
        levels=None, grid=None,
        arch=dict(base_channels=synth.TWIN_BASE_CHANNELS),
        train=dict(lr=5e-4, minibatch=4, max_epochs=synth.TWIN_EPOCHS,
                   drop_factor=0.1, drop_period=synth.TWIN_DROP_PERIOD,
                   early_stop_rmse=None, seed=spec.seed),
        out_dir=out_dir,
    )


def cmd_synth(args):
    spec = synth.TWIN_SPEC if args.config is None else synth.load_spec(args.config)
    if args.seed is not None:
        spec = synth.with_seed(spec, args.seed)
    spec.validate()
    truth, biased = synth.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field.write_field(out / "truth.fld", truth)
    field.write_field(out / "model.fld", biased)
    (out / "synth.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "experiment.json").write_text(
        json.dumps(_twin_experiment(spec, "run"), indent=2) + "\n")
    print(f"wrote {out / 'truth.fld'} and {out / 'model.fld'} "
          f"[t,z,y,x,c]={list(truth.data.shape)}")
    return EXIT_OK


def cmd_regrid(args):
    src = field.read_field(args.input)
    fs = src
    if args.depths is not None:
        fs = field.align_vertical(fs, tuple(float(d) for d in args.depths.split(",")))
    if args.dt_hours is not None:
        fs = field.align_temporal(fs, args.dt_hours)
    if (args.nx, args.ny) != (fs.spec.nx, fs.spec.ny):
        fs = field.regrid_horizontal(fs, args.nx, args.ny, mask_rule=args.mask_rule)
    field.write_field(args.out, fs)
    print(f"wrote {args.out} [t,z,y,x,c]={list(fs.data.shape)}")
    return EXIT_OK


def _experiment(args) -> pipeline.ExperimentSpec:
    exp = pipeline.load_experiment(args.config)
    return exp.with_overrides(direction=args.direction, levels=args.levels,
                              seed=args.seed, out_dir=args.out)


def _atomic_dir(out: Path):
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))


def _publish(tmp: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for p in sorted(tmp.iterdir()):
        dest = out / p.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        shutil.move(str(p), str(dest))


def cmd_train(args):
    exp = _experiment(args)
    if exp.out_dir is None:
        raise UsageError("train needs --out or out_dir in the config")
    model_fs, obs_fs = pipeline.align_pair(field.read_field(exp.model_field),
                                           field.read_field(exp.obs_field),
                                           exp.grid, exp.mask_rule)
    exp.validate(model_fs.nt)
    models, _, logs = pipeline.train_bank(model_fs, obs_fs, exp, args.jobs, _quiet(args))
    out = Path(exp.out_dir)
    tmp = _atomic_dir(out)
    try:
        stunet.save_bank(models, tmp / "checkpoints")
        pipeline.write_log(tmp / "run.log", logs)
        _publish(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"wrote {out / 'checkpoints' / 'manifest.json'}")
    return EXIT_OK


def _load_models(path):
    path = Path(path)
    if path.suffix == ".json":
        return stunet.load_bank(path)
    m = stunet.load(path)
    return {(0, None): m}


def cmd_transform(args):
    frames = None if args.frames is None else parse_frames(args.frames)
    models = _load_models(args.checkpoint)
    fs = field.read_field(args.field)
    hw = next(iter(models.values())).arch.input_hw
    depths = [d for _, d in sorted(models)]
    if None not in depths and tuple(depths) != fs.spec.depths_m:
        fs = field.align_vertical(fs, tuple(depths))
    if (fs.spec.nx, fs.spec.ny) != (hw, hw):
        fs = field.regrid_horizontal(fs, hw, hw, mask_rule=args.mask_rule)
    frames = (0, fs.nt) if frames is None else frames
    keys = sorted(models, key=lambda k: k[0])
    if args.levels is not None:
        keys = [k for k in keys if k[0] in set(args.levels)]
        if not keys:
            raise UsageError("--levels selects no model in the checkpoint bank")
    out = [pipeline.transform(models[k], fs, frames,
                              level=i if None not in depths else k[0])
           for i, k in enumerate(keys)]
    res = pipeline.stack_levels(out)
    field.write_field(args.out, res)
    print(f"wrote {args.out} [t,z,y,x,c]={list(res.data.shape)}")
    return EXIT_OK


def cmd_eval(args):
    frames = None if args.frames is None else parse_frames(args.frames)
    trans = field.read_field(args.transformed)
    ref = field.read_field(args.reference)
    model = field.read_field(args.model)
    grid = (trans.spec.nx, trans.spec.ny)
    model, ref = pipeline.align_pair(model, ref, grid, args.mask_rule)
    a, b = (0, trans.nt) if frames is None else frames
    if b - a != trans.nt:
        raise UsageError(f"--frames covers {b - a} frames, transformed field has {trans.nt}")
    ref, model = ref.frames(a, b), model.frames(a, b)
    if ref.spec.depths_m != trans.spec.depths_m:
        idx = [ref.spec.depths_m.index(d) for d in trans.spec.depths_m
               if d in ref.spec.depths_m]
        if len(idx) != trans.spec.nz:
            raise pipeline.MisalignedGridsError("transformed depths are not in the reference")
        ref = pipeline.stack_levels([ref.level(i) for i in idx])
        model = pipeline.stack_levels([model.level(i) for i in idx])
    rep = metrics.evaluate(ref, model, trans)
    out = Path(args.out)
    tmp = _atomic_dir(out)
    try:
        metrics.write_csvs(rep, tmp, frame_offset=a)
        _publish(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"gain_pct={rep.gain_pct!r} signed_pct={rep.signed_pct!r}")
    return EXIT_OK


def cmd_run(args):
    exp = _experiment(args)
    if exp.out_dir is None:
        raise UsageError("run needs --out or out_dir in the config")
    res = pipeline.run_experiment(exp, jobs=args.jobs, progress=_quiet(args))
    print(f"gain_pct={res.report.gain_pct!r} -> {res.out_dir}")
    return EXIT_OK


def cmd_info(args):
    for path in args.files:
        with open(path, "rb") as fh:
            magic = fh.read(8)
        if magic == field.FLD_MAGIC:
            h = field.read_field_header(path)
            g = h["grid"]
            dims = [h["nt"], g["nz"], g["ny"], g["nx"], 2]
            info = dict(file=str(path), format="FLD1", dims_tzyxc=dims,
                        depths_m=g["depths_m"], dt_hours=g["dt_hours"], t0=g["t0"])
        elif magic[:4] == stunet.CHECKPOINT_MAGIC:
            h = stunet.read_header(path)
            info = dict(file=str(path), format="STU1", **h)
        elif str(path).endswith(".json"):
            info = dict(file=str(path), format="manifest",
                        **json.loads(Path(path).read_text()))
        else:
            raise field.FieldFormatError(f"{path}: unrecognized file type")
        print(json.dumps(info, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------- dispatch


def build_parser():
    p = _Parser(prog="fieldtransform",
                description="Train and apply U-Net corrections of model velocity fields.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="JSON configuration file")
        if out:
            sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="seed for all randomness (default 42)")

    s = sub.add_parser("synth", help="write a synthetic truth/model pair")
    common(s)
    s.set_defaults(func=cmd_synth, out_required=True)

    s = sub.add_parser("regrid", help="resample a field file")
    s.add_argument("input")
    s.add_argument("--nx", type=int, default=64)
    s.add_argument("--ny", type=int, default=64)
    s.add_argument("--depths", help="comma-separated target depths in meters")
    s.add_argument("--dt-hours", type=float, default=None)
    s.add_argument("--mask-rule", choices=("all", "nearest"), default="all")
    common(s, config=False)
    s.set_defaults(func=cmd_regrid, out_required=True)

    for name, func, helptext in (("train", cmd_train, "train a per-level model bank"),
                                 ("run", cmd_run, "end-to-end experiment")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--jobs", type=int, default=1, help="parallel level trainings")
        s.add_argument("--direction", choices=(stunet.FORWARD, stunet.BACKWARD))
        s.add_argument("--levels", type=parse_levels, help="N or inclusive A..B")
        s.add_argument("--quiet", action="store_true", help="no per-epoch lines")
        s.set_defaults(func=func, config_required=True)

    s = sub.add_parser("transform", help="apply a checkpoint or bank to a model field")
    s.add_argument("--checkpoint", required=True, help=".stu file or manifest.json")
    s.add_argument("--field", required=True)
    s.add_argument("--frames", help="half-open START:STOP (default all)")
    s.add_argument("--levels", type=parse_levels)
    s.add_argument("--mask-rule", choices=("all", "nearest"), default="all")
    common(s, config=False)
    s.set_defaults(func=cmd_transform, out_required=True)

    s = sub.add_parser("eval", help="metrics CSVs for a transformed field")
    s.add_argument("--reference", required=True, help="observed/truth field")
    s.add_argument("--model", required=True, help="untransformed model field")
    s.add_argument("--transformed", required=True)
    s.add_argument("--frames", help="frames of reference/model matching the transformed field")
    s.add_argument("--mask-rule", choices=("all", "nearest"), default="all")
    common(s, config=False)
    s.set_defaults(func=cmd_eval, out_required=True)

    s = sub.add_parser("info", help="print file headers")
    s.add_argument("files", nargs="+")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:      # --help
            return int(exc.code or 0)
        if args.command is None:
            raise UsageError("missing subcommand; see --help")
        if getattr(args, "out_required", False) and not args.out:
            raise UsageError(f"{args.command} needs --out")
        if getattr(args, "config_required", False) and not args.config:
            raise UsageError(f"{args.command} needs --config")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        _report_error(exc, code)
        return code


if __name__ == "__main__":
    sys.exit(main())
