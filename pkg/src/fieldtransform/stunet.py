"""Four-stage U-Net with a linear regression head.

Layer inventory (``c = base_channels``):

* encoder k = 1..4: conv3x3 -> relu -> conv3x3 -> relu -> maxpool, width c*2^(k-1)
* bottleneck: conv3x3 -> relu -> conv3x3 -> relu, width c*2^4
* decoder k = 4..1: tconv2x2 -> concat(skip k) -> conv3x3 -> relu -> conv3x3 -> relu
* head: conv1x1 -> 2 channels, no activation
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn

STAGES = 4
OUT_CHANNELS = 2
CHECKPOINT_MAGIC = b"STU1"
CHECKPOINT_VERSION = 1
FORWARD, BACKWARD = "forward", "backward"


class InvalidArchError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass(frozen=True)
class StuNetArch:
    input_hw: int = 64
    in_channels: int = 2
    base_channels: int = 16
    stages: int = STAGES
    out_channels: int = OUT_CHANNELS

    def validate(self):
        if self.stages != STAGES:
            raise InvalidArchError(f"stage count is fixed at {STAGES}")
        if self.out_channels != OUT_CHANNELS:
            raise InvalidArchError(f"output channels are fixed at {OUT_CHANNELS}")
        if self.input_hw < 2 ** STAGES or self.input_hw % 2 ** STAGES:
            raise InvalidArchError(
                f"input_hw {self.input_hw} is not divisible by {2 ** STAGES}"
            )
        if self.base_channels < 1 or self.in_channels < 1:
            raise InvalidArchError("channel counts must be >= 1")
        return self

    def widths(self):
        return [self.base_channels * 2 ** k for k in range(STAGES + 1)]


@dataclass
class NormStats:
    """Per-channel z-score statistics (u, v) for inputs and targets."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def __post_init__(self):
        for name in ("input_mean", "input_std", "target_mean", "target_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.input_std <= 0) or np.any(self.target_std <= 0):
            raise ValueError("normalization std entries must be > 0")

    @classmethod
    def identity(cls):
        return cls(np.zeros(2), np.ones(2), np.zeros(2), np.ones(2))

    def to_json(self):
        return {k: getattr(self, k).tolist()
                for k in ("input_mean", "input_std", "target_mean", "target_std")}

    def __eq__(self, other):
        return isinstance(other, NormStats) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("input_mean", "input_std", "target_mean", "target_std"))


@dataclass
class StuNetModel:
    arch: StuNetArch
    params: list
    norm_stats: NormStats = field(default_factory=NormStats.identity)
    seed: int = 0
    trained_epochs: int = 0
    direction: str = FORWARD

    @property
    def head(self) -> nn.LayerParams:
        return self.params[-1]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def arrays(self):
        """Flat list of parameter arrays (weights, bias per layer), in layer order."""
        out = []
        for p in self.params:
            out += [p.weights, p.bias]
        return out

    def copy(self) -> "StuNetModel":
        params = [replace(p, weights=p.weights.copy(), bias=p.bias.copy())
                  for p in self.params]
        stats = NormStats(**{k: v.copy() for k, v in vars(self.norm_stats).items()})
        return replace(self, params=params, norm_stats=stats)


def layer_shapes(arch: StuNetArch):
    """``(kind, out_ch, in_ch, kernel)`` for every layer, in parameter order."""
    c = arch.widths()
    shapes = []
    prev = arch.in_channels
    for k in range(STAGES):
        shapes += [(nn.CONV2D, c[k], prev, 3), (nn.CONV2D, c[k], c[k], 3)]
        prev = c[k]
    shapes += [(nn.CONV2D, c[4], c[3], 3), (nn.CONV2D, c[4], c[4], 3)]
    for k in reversed(range(STAGES)):
        shapes += [(nn.TRANSPOSED_CONV2D, c[k], c[k + 1], 2),
                   (nn.CONV2D, c[k], 2 * c[k], 3),
                   (nn.CONV2D, c[k], c[k], 3)]
    shapes.append((nn.DENSE_HEAD, arch.out_channels, c[0], 1))
    return shapes


def param_count(in_channels: int, base: int) -> int:
    """Closed-form trainable parameter count."""
    total = 0
    prev = in_channels
    for k in range(STAGES):
        ck = base * 2 ** k
        total += 9 * prev * ck + ck + 9 * ck * ck + ck
        prev = ck
    cb = base * 2 ** STAGES
    total += 9 * prev * cb + cb + 9 * cb * cb + cb
    for k in range(STAGES):
        ck = base * 2 ** k
        total += 4 * 2 * ck * ck + ck            # tconv from 2*ck
        total += 9 * 2 * ck * ck + ck + 9 * ck * ck + ck
    return total + base * OUT_CHANNELS + OUT_CHANNELS


def build(arch: StuNetArch, seed: int = 42) -> StuNetModel:
    arch.validate()
    rng = np.random.default_rng(seed)
    params = [nn.conv_layer(i, o, k, rng, kind) for kind, o, i, k in layer_shapes(arch)]
    return StuNetModel(arch=arch, params=params, seed=seed)


# ------------------------------------------------------------ forward/backward


def _check_input(model, x):
    a = model.arch
    if x.ndim != 4 or x.shape[1] != a.in_channels or x.shape[2:] != (a.input_hw, a.input_hw):
        raise nn.ShapeError(
            f"input shape {x.shape} does not match [b, {a.in_channels}, "
            f"{a.input_hw}, {a.input_hw}]"
        )


def _conv_relu(x, p, tape):
    y, cache = nn.conv_cm_forward(x, p.weights, p.bias, p.padding)
    tape.append((x.shape, cache, y))
    return nn.relu_forward(y)


def forward_tape(model: StuNetModel, x):
    """Forward pass keeping every intermediate needed by :func:`backward`.

    Internally activations are channel-major ``[c, b, h, w]``.
    """
    _check_input(model, x)
    ps = iter(model.params)
    convs, pools, tconvs, skips = [], [], [], []
    h = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=np.float64)
    for _ in range(STAGES):
        h = _conv_relu(h, next(ps), convs)
        h = _conv_relu(h, next(ps), convs)
        skips.append(h)
        h, idx = nn.maxpool2x2_forward(h)
        pools.append(idx)
    h = _conv_relu(h, next(ps), convs)
    h = _conv_relu(h, next(ps), convs)
    for k in reversed(range(STAGES)):
        p = next(ps)
        tconvs.append(h)
        h = nn.tconv_cm_forward(h, p.weights, p.bias)
        h = np.concatenate([h, skips[k]], axis=0)
        h = _conv_relu(h, next(ps), convs)
        h = _conv_relu(h, next(ps), convs)
    head = next(ps)
    out, head_cols = nn.conv_cm_forward(h, head.weights, head.bias, 0)
    tape = dict(convs=convs, pools=pools, tconvs=tconvs,
                head=(h.shape, head_cols))
    return out.transpose(1, 0, 2, 3), tape


def forward(model: StuNetModel, x):
    """Network output ``[b, 2, h, w]`` for a normalized input batch."""
    return np.ascontiguousarray(forward_tape(model, x)[0])


def backward(model: StuNetModel, tape, grad_out):
    """Parameter gradients as a flat list matching :meth:`StuNetModel.arrays`."""
    params = model.params
    grads = [None] * len(params)
    convs = list(tape["convs"])
    pools = list(tape["pools"])
    tconvs = list(tape["tconvs"])
    li = len(params) - 1

    head_shape, head_cols = tape["head"]
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3))
    g, gw, gb = nn.conv_cm_backward(head_shape, params[li].weights, 0, g, head_cols)
    grads[li] = (gw, gb)

    def conv_relu_back(g, li):
        x_shape, cache, y = convs.pop()
        g = nn.relu_backward(y, g)
        p = params[li]
        g, gw, gb = nn.conv_cm_backward(x_shape, p.weights, p.padding, g, cache,
                                        need_dx=li > 0)
        grads[li] = (gw, gb)
        return g

    skip_grads = [None] * STAGES
    for k in range(STAGES):
        li -= 1
        g = conv_relu_back(g, li)
        li -= 1
        g = conv_relu_back(g, li)
        n_up = params[li - 1].out_channels
        g, skip_grads[k] = g[:n_up], g[n_up:]
        li -= 1
        g, gw, gb = nn.tconv_cm_backward(tconvs.pop(), params[li].weights, g)
        grads[li] = (gw, gb)
    for _ in range(2):
        li -= 1
        g = conv_relu_back(g, li)
    for k in reversed(range(STAGES)):
        g = nn.maxpool2x2_backward(pools.pop(), g)
        g += skip_grads[k]
        li -= 1
        g = conv_relu_back(g, li)
        li -= 1
        g = conv_relu_back(g, li)
    assert li == 0 and not convs
    flat = []
    for gw, gb in grads:
        flat += [gw, gb]
    return flat


def loss_and_grads(model: StuNetModel, x, target, mask=None):
    out, tape = forward_tape(model, x)
    loss, g = nn.mse_loss(out, target, mask)
    return loss, backward(model, tape, g)


# ------------------------------------------------------------------ checkpoint


def _arch_json(arch):
    return dict(input_hw=arch.input_hw, in_channels=arch.in_channels,
                base_channels=arch.base_channels, stages=arch.stages,
                out_channels=arch.out_channels)


def checkpoint_bytes(model: StuNetModel) -> bytes:
    payload = b"".join(a.astype("<f4").tobytes() for a in model.arrays())
    meta = dict(
        version=CHECKPOINT_VERSION,
        arch=_arch_json(model.arch),
        norm_stats=model.norm_stats.to_json(),
        seed=int(model.seed),
        direction=model.direction,
        trained_epochs=int(model.trained_epochs),
        n_parameters=model.n_parameters(),
        layers=[p.kind for p in model.params],
        sha256=hashlib.sha256(payload).hexdigest(),
    )
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + payload


def save(model: StuNetModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_header(path) -> dict:
    """Checkpoint metadata, without reading the parameter payload."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != CHECKPOINT_MAGIC:
            raise CorruptCheckpointError(f"{path}: bad checkpoint magic")
        (n,) = struct.unpack("<I", head[4:])
        raw = fh.read(n)
    if len(raw) != n:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc


def load(path) -> StuNetModel:
    data = Path(path).read_bytes()
    meta = read_header(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    (n,) = struct.unpack("<I", data[4:8])
    payload = data[8 + n:]
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise CorruptCheckpointError(f"{path}: payload hash mismatch")
    try:
        arch = StuNetArch(**meta["arch"]).validate()
        stats = NormStats(**meta["norm_stats"])
    except (TypeError, KeyError, InvalidArchError) as exc:
        raise CorruptCheckpointError(f"{path}: invalid metadata") from exc
    expected = param_count(arch.in_channels, arch.base_channels)
    if meta.get("n_parameters") != expected or len(payload) != 4 * expected:
        raise CorruptCheckpointError(f"{path}: parameter count mismatch")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    params, off = [], 0
    for kind, o, i, k in layer_shapes(arch):
        nw = o * i * k * k
        w = flat[off:off + nw].reshape(o, i, k, k).copy()
        b = flat[off + nw:off + nw + o].copy()
        off += nw + o
        stride, pad = (2, 0) if kind == nn.TRANSPOSED_CONV2D else (1, k // 2)
        params.append(nn.LayerParams(kind, w, b, stride, pad))
    return StuNetModel(arch=arch, params=params, norm_stats=stats,
                       seed=meta["seed"], trained_epochs=meta["trained_epochs"],
                       direction=meta["direction"])


def save_bank(models: dict, out_dir, name="level") -> Path:
    """Write one checkpoint per depth level plus ``manifest.json``.

    ``models`` maps ``(level_index, depth_m)`` to a model.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for (level, depth), model in sorted(models.items()):
        fname = f"{name}_{level:03d}.stu"
        save(model, out_dir / fname)
        entries.append(dict(level=level, depth_m=float(depth), checkpoint=fname))
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(dict(levels=entries), indent=2) + "\n")
    return manifest


def load_bank(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())["levels"]
    return {(e["level"], e["depth_m"]): load(manifest_path.parent / e["checkpoint"])
            for e in entries}
