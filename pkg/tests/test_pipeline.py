import inspect
import math
from dataclasses import replace

import numpy as np
import pytest

from fieldtransform import field, pipeline, stunet, synth
from fieldtransform.pipeline import ConfigError, TrainConfig
from fieldtransform.stunet import StuNetArch

SPEC = replace(synth.TWIN_SPEC, nt=24, nx=16, ny=16)
TRUTH, BIASED = synth.generate(SPEC)


def tiny_model(k=1, base=2, seed=0):
    return stunet.build(StuNetArch(input_hw=16, in_channels=2 * k, base_channels=base), seed)


# ---------------------------------------------------------------- samples


def test_window_one_sample_count():
    s = pipeline.make_samples(BIASED, TRUTH, 0, TrainConfig(train_frames=(0, 10)))
    assert len(s) == 10 and [p.t for p in s] == list(range(10))
    st_ = s.stats
    want = (BIASED.data[0, 0, :, :, 0] - st_.input_mean[0]) / st_.input_std[0]
    np.testing.assert_allclose(s[0].input[0][BIASED.mask], want[BIASED.mask], atol=1e-14)


def test_window_three():
    s = pipeline.make_samples(BIASED, TRUTH, 0, TrainConfig(train_frames=(0, 10), window=3))
    assert len(s) == 8 and s[0].t == 2
    assert s[0].input.shape == (6, 16, 16)
    # u then v per frame, oldest first
    np.testing.assert_array_equal(s[1].input[:2], s[0].input[2:4])


def test_stats_are_training_range_only():
    s = pipeline.make_samples(BIASED, TRUTH, 0, TrainConfig(train_frames=(0, 10)))
    v = TRUTH.data[:10, 0][:, TRUTH.mask].reshape(-1, 2)
    np.testing.assert_allclose(s.stats.target_mean, v.mean(0), atol=1e-15)
    np.testing.assert_allclose(s.stats.target_std, v.std(0), atol=1e-15)


def test_backward_samples_equal_forward_on_reversed():
    cfg = TrainConfig(train_frames=(4, 20), window=2, direction="backward")
    back = pipeline.make_samples(BIASED, TRUTH, 0, cfg)
    fwd = pipeline.make_samples(field.reverse_time(BIASED), field.reverse_time(TRUTH), 0,
                                replace(cfg, direction="forward", train_frames=(4, 20)))
    assert len(back) == len(fwd) == 15
    for a, b in zip(back, fwd):
        np.testing.assert_array_equal(a.input, b.input)
        np.testing.assert_array_equal(a.target, b.target)
    assert back[0].t == 18 and back[-1].t == 4   # reverse chronological


@pytest.mark.parametrize("cfg", [TrainConfig(max_epochs=0), TrainConfig(minibatch=0),
                                 TrainConfig(window=0), TrainConfig(direction="sideways"),
                                 TrainConfig(train_frames=(0, 99)),
                                 TrainConfig(train_frames=(0, 2), window=3),
                                 TrainConfig(drop_factor=0.0)])
def test_config_validation(cfg):
    with pytest.raises(ConfigError):
        pipeline.make_samples(BIASED, TRUTH, 0, cfg)


def test_misaligned_grids():
    other = field.regrid_horizontal(TRUTH, 20, 20)
    with pytest.raises(pipeline.MisalignedGridsError):
        pipeline.make_samples(BIASED, other, 0, TrainConfig())


def test_normalize_roundtrip():
    s = pipeline.make_samples(BIASED, TRUTH, 0, TrainConfig())
    y = s[3].target.transpose(1, 2, 0) * s.stats.target_std + s.stats.target_mean
    np.testing.assert_allclose(y[TRUTH.mask], TRUTH.data[3, 0][TRUTH.mask], atol=1e-12)


# ------------------------------------------------------------------ train


def test_one_epoch_step_count():
    s = pipeline.make_samples(BIASED, TRUTH, 0, TrainConfig(train_frames=(0, 10)))
    _, h = pipeline.train(tiny_model(), s, TrainConfig(max_epochs=1, minibatch=4))
    assert h.steps == math.ceil(10 / 4) and h.epochs == 1


def test_training_is_deterministic_and_leaves_input_model():
    cfg = TrainConfig(max_epochs=3, train_frames=(0, 8))
    s = pipeline.make_samples(BIASED, TRUTH, 0, cfg)
    m0 = tiny_model()
    before = stunet.checkpoint_bytes(m0)
    a, ha = pipeline.train(m0, s, cfg)
    b, hb = pipeline.train(m0, s, cfg)
    assert ha.loss == hb.loss and ha.rmse == hb.rmse
    assert stunet.checkpoint_bytes(a) == stunet.checkpoint_bytes(b)
    assert stunet.checkpoint_bytes(m0) == before
    assert a.trained_epochs == 3 and a.norm_stats == s.stats


def test_early_stop_and_progress():
    cfg = TrainConfig(max_epochs=50, early_stop_rmse=10.0, train_frames=(0, 8))
    s = pipeline.make_samples(BIASED, TRUTH, 0, cfg)
    seen = []
    _, h = pipeline.train(tiny_model(), s, cfg, lambda *a: seen.append(a))
    assert h.stopped_early and h.epochs == 1 and len(seen) == 1
    assert seen[0][0] == 0 and seen[0][3] == 5e-4


def test_arch_mismatch():
    s = pipeline.make_samples(BIASED, TRUTH, 0, TrainConfig(window=2))
    with pytest.raises(pipeline.ArchMismatchError):
        pipeline.train(tiny_model(k=1), s, TrainConfig())


def test_nonfinite_loss_guard():
    s = pipeline.make_samples(BIASED, TRUTH, 0, TrainConfig(train_frames=(0, 4)))
    m = tiny_model()
    m.head.weights[:] = 1e300
    with pytest.raises(pipeline.NonFiniteLossError):
        with np.errstate(all="ignore"):
            pipeline.train(m, s, TrainConfig(max_epochs=1))


# -------------------------------------------------------------- transform


def test_transform_never_sees_observations():
    params = list(inspect.signature(pipeline.transform).parameters)
    assert params[:3] == ["model", "model_fs", "frames"]
    assert not any("obs" in p for p in params)


def test_zero_head_transform_is_target_mean():
    m = tiny_model()
    m.head.weights[:] = 0
    m.head.bias[:] = 0
    m.norm_stats = stunet.NormStats([0, 0], [1, 1], [0.3, -0.2], [2.0, 2.0])
    out = pipeline.transform(m, BIASED, (5, 9))
    assert out.nt == 4 and np.array_equal(out.mask, BIASED.mask)
    np.testing.assert_array_equal(out.data[..., 0][:, :, BIASED.mask], 0.3)
    np.testing.assert_array_equal(out.data[..., 1][:, :, BIASED.mask], -0.2)
    assert np.all(out.data[:, :, ~BIASED.mask] == 0)


def test_insufficient_history():
    m = tiny_model(k=3)
    with pytest.raises(pipeline.InsufficientHistoryError):
        pipeline.transform(m, BIASED, (1, 5))
    pipeline.transform(m, BIASED, (2, 5))
    m.direction = "backward"
    with pytest.raises(pipeline.InsufficientHistoryError):
        pipeline.transform(m, BIASED, (20, 23))
    assert pipeline.transform(m, BIASED, (20, 22)).nt == 2


def test_identity_toy_converges():
    # independent smooth random frames; identity is the only map that fits them
    spec = replace(SPEC, nt=40, coast="none",
                   bias=synth.BiasSpec(smooth_noise_sigma=1.0, noise_corr_len=1.5))
    fs = field.FieldSeries.masked(field.GridSpec(16, 16), synth.noise_field(spec))
    cfg = TrainConfig(max_epochs=100, minibatch=8, initial_lr=3e-3, train_frames=(0, 32))
    s = pipeline.make_samples(fs, fs, 0, cfg)
    m, h = pipeline.train(tiny_model(base=8, seed=1), s, cfg)
    assert h.rmse[-1] < 0.2 * h.rmse[0]

    def rmse(a, b):
        out = pipeline.transform(m, fs, (a, b))
        d = (out.data - fs.frames(a, b).data)[:, 0] / s.stats.target_std
        return float(np.sqrt(np.mean(d * d)))
    assert rmse(0, 32) <= 1.5 * h.rmse[-1]
    assert rmse(32, 40) <= 0.2


def test_transform_backward_duality():
    cfg = TrainConfig(max_epochs=2, window=2, direction="backward", train_frames=(6, 24))
    s = pipeline.make_samples(BIASED, TRUTH, 0, cfg)
    mb, _ = pipeline.train(tiny_model(k=2), s, cfg)
    fcfg = replace(cfg, direction="forward", train_frames=(0, 18))
    rb, rt = field.reverse_time(BIASED), field.reverse_time(TRUTH)
    mf, _ = pipeline.train(tiny_model(k=2), pipeline.make_samples(rb, rt, 0, fcfg), fcfg)
    a = pipeline.transform(mb, BIASED, (0, 6))
    b = pipeline.transform(mf, rb, (18, 24))
    np.testing.assert_array_equal(a.data, b.data[::-1])


# ------------------------------------------------------------- experiment


def _exp(tmp_path, **kw):
    base = dict(model_field=BIASED, obs_field=TRUTH, split=dict(train=(0, 18), test=(18, 24)),
                base_channels=2, grid=None, train=TrainConfig(max_epochs=2),
                out_dir=str(tmp_path / "out"))
    base.update(kw)
    return pipeline.ExperimentSpec(**base)


def test_run_experiment_outputs(tmp_path):
    res = pipeline.run_experiment(_exp(tmp_path))
    names = sorted(p.name for p in res.out_dir.iterdir())
    assert "transformed.fld" in names and "checkpoints" in names and "run.log" in names
    t = field.read_field(res.out_dir / "transformed.fld")
    assert t.nt == 6
    bank = stunet.load_bank(res.out_dir / "checkpoints" / "manifest.json")
    assert list(bank) == [(0, 0.0)]
    assert not any(p.name.startswith(".partial") for p in tmp_path.iterdir())


def test_experiment_direction_reaches_training(tmp_path):
    exp = _exp(tmp_path, direction="backward", window=2, base_channels=2,
               split=dict(train=(6, 24), test=(0, 6)), train=TrainConfig(max_epochs=1))
    res = pipeline.run_experiment(exp, write=False)
    assert res.models[(0, 0.0)].direction == "backward"
    assert res.models[(0, 0.0)].arch.in_channels == 4


def test_run_experiment_regrids(tmp_path):
    res = pipeline.run_experiment(_exp(tmp_path, grid=(32, 32)), write=False)
    assert res.transformed.spec.nx == 32


@pytest.mark.parametrize("split", [dict(train=(0, 18), test=(18, 18)),
                                   dict(train=(0, 18), test=(20, 30)),
                                   dict(train=(5, 2), test=(18, 24)),
                                   dict(train=(0, 18))])
def test_bad_splits(tmp_path, split):
    with pytest.raises(ConfigError):
        pipeline.run_experiment(_exp(tmp_path, split=split))
    assert not (tmp_path / "out").exists()


def test_failure_writes_nothing(tmp_path):
    with pytest.raises(ConfigError):
        pipeline.run_experiment(_exp(tmp_path, levels=[0, 5]))
    assert not (tmp_path / "out").exists()


def test_experiment_json(tmp_path):
    field.write_field(tmp_path / "m.fld", BIASED)
    field.write_field(tmp_path / "o.fld", TRUTH)
    (tmp_path / "e.json").write_text(
        '{"model_field": "m.fld", "obs_field": "o.fld", "split": {"train": [0, 18], '
        '"test": [18, 24]}, "grid": null, "arch": {"base_channels": 2}, '
        '"train": {"max_epochs": 1, "seed": 3}, "out_dir": "res"}')
    exp = pipeline.load_experiment(tmp_path / "e.json")
    assert exp.train.seed == 3 and exp.base_channels == 2 and exp.grid is None
    assert exp.out_dir == str(tmp_path / "res")
    exp = exp.with_overrides(seed=9, direction="backward")
    assert exp.train.seed == 9 and exp.train.direction == "backward"
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        pipeline.load_experiment(tmp_path / "bad.json")
