"""Tiny encoder-decoder regressors, the multi-task teacher, EMA and checkpoints.

Images enter as ``(B, C, H, W)`` (or a single ``(C, H, W)`` raster) and are
moved to channels-last internally.  Height outputs are ``(B, H, W)`` in
meters; per-cut probabilities stay channels-last, ``(B, H, W, N-1)``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .engine import Tensor

CHECKPOINT_MAGIC = b"TSEW"
CHECKPOINT_VERSION = 1


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class RegressorNet:
    """Two-stage U-shaped encoder-decoder with a linear height head.

    ``height_scale`` multiplies the head output so that unit-scale features
    map onto tens of meters without large head weights.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int = 3,
        widths: tuple[int, int, int] = (16, 32, 64),
        height_scale: float = 10.0,
    ):
        w1, w2, w3 = widths
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.height_scale = float(height_scale)
        p: OrderedDict[str, Tensor] = OrderedDict()
        for name, cin, cout in [
            ("enc1", in_channels, w1),
            ("enc2", w1, w2),
            ("mid", w2, w3),
            ("dec2", w3 + w2, w2),
            ("dec1", w2 + w1, w1),
        ]:
            p[f"{name}.w"] = _he_uniform(rng, (3, 3, cin, cout), 9 * cin)
            p[f"{name}.b"] = _zeros((cout,))
        p["head.w"] = _he_uniform(rng, (w1, 1), w1)
        p["head.b"] = _zeros((1,))
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def features(self, x: Tensor) -> Tensor:
        p = self.params
        s1 = E.relu(E.conv2d_3x3(x, p["enc1.w"], p["enc1.b"]))
        s2 = E.relu(E.conv2d_3x3(E.avgpool2x(s1), p["enc2.w"], p["enc2.b"]))
        z = E.relu(E.conv2d_3x3(E.avgpool2x(s2), p["mid.w"], p["mid.b"]))
        z = E.concat([E.upsample2x_nearest(z), s2], axis=-1)
        z = E.relu(E.conv2d_3x3(z, p["dec2.w"], p["dec2.b"]))
        z = E.concat([E.upsample2x_nearest(z), s1], axis=-1)
        return E.relu(E.conv2d_3x3(z, p["dec1.w"], p["dec1.b"]))

    def height_head(self, feats: Tensor) -> Tensor:
        out = E.conv1x1(feats, self.params["head.w"], self.params["head.b"])
        b, h, w, _ = out.shape
        return E.reshape(out, (b, h, w)) * self.height_scale

    def __call__(self, image) -> Tensor:
        return regressor_forward(self, image)


class MultiTaskNet(RegressorNet):
    """Regressor trunk plus an ordinal classification branch of ``num_cuts`` sigmoids."""

    def __init__(
        self,
        rng: np.random.Generator,
        num_cuts: int,
        in_channels: int = 3,
        widths: tuple[int, int, int] = (16, 32, 64),
        height_scale: float = 10.0,
    ):
        super().__init__(rng, in_channels, widths, height_scale)
        if num_cuts < 1:
            raise ValueError(f"MultiTaskNet needs at least one cut, got {num_cuts}")
        self.num_cuts = num_cuts
        w1 = widths[0]
        self.params["cls_feat.w"] = _he_uniform(rng, (w1, w1), w1)
        self.params["cls_feat.b"] = _zeros((w1,))
        self.params["cls_head.w"] = _he_uniform(rng, (w1, num_cuts), w1)
        self.params["cls_head.b"] = _zeros((num_cuts,))

    def cut_probabilities(self, feats: Tensor) -> Tensor:
        """Per-cut sigmoid outputs, channels-last ``(B, H, W, N-1)``."""
        p = self.params
        z = E.relu(E.conv1x1(feats, p["cls_feat.w"], p["cls_feat.b"]))
        return E.sigmoid(E.conv1x1(z, p["cls_head.w"], p["cls_head.b"]))

    def __call__(self, image):
        return teacher_forward(self, image)


def to_channels_last(image) -> Tensor:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) or (C, H, W) image, got shape {arr.shape}")
    _, _, h, w = arr.shape
    if h % 4 or w % 4:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by 4")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 2, 3, 1)))


def regressor_forward(net: RegressorNet, image) -> Tensor:
    """Height map ``(B, H, W)`` from an image batch."""
    x = to_channels_last(image)
    if x.shape[-1] != net.in_channels:
        raise ValueError(f"network expects {net.in_channels} channels, image has {x.shape[-1]}")
    return net.height_head(net.features(x))


def teacher_forward(net: MultiTaskNet, image) -> tuple[Tensor, Tensor]:
    """Heights ``(B, H, W)`` and channels-last per-cut probabilities ``(B, H, W, N-1)``."""
    x = to_channels_last(image)
    feats = net.features(x)
    return net.height_head(feats), net.cut_probabilities(feats)


@dataclass(frozen=True)
class EmaSchedule:
    alpha: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.alpha}")


def check_congruent(a: RegressorNet, b: RegressorNet) -> None:
    if list(a.params) != list(b.params):
        raise ValueError("networks have different parameter names")
    for name in a.params:
        if a.params[name].shape != b.params[name].shape:
            raise ValueError(
                f"parameter {name}: shape {a.params[name].shape} vs {b.params[name].shape}"
            )


def ema_update(exam: RegressorNet, student: RegressorNet, schedule: EmaSchedule) -> None:
    """theta_exam <- alpha * theta_exam + (1 - alpha) * theta_student, in place."""
    check_congruent(exam, student)
    a = schedule.alpha
    for name, te in exam.params.items():
        ts = student.params[name].data
        te.data *= a
        te.data += (1.0 - a) * ts


def copy_weights(dst: RegressorNet, src: RegressorNet) -> None:
    check_congruent(dst, src)
    for name, t in dst.params.items():
        t.data[...] = src.params[name].data


def frozen_copy(net: RegressorNet) -> RegressorNet:
    """Structural clone whose parameters never enter a tape."""
    clone = object.__new__(type(net))
    clone.__dict__.update(net.__dict__)
    clone.params = OrderedDict((k, Tensor(v.data.copy())) for k, v in net.params.items())
    return clone


# ----------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path: str | Path, nets: dict[str, RegressorNet]) -> None:
    """Write parameters of several networks under ``<prefix>/<name>`` records."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    for prefix, net in nets.items():
        for name, t in net.params.items():
            key = f"{prefix}/{name}".encode()
            buf += struct.pack("<I", len(key)) + key
            buf += struct.pack("<I", t.data.ndim)
            buf += struct.pack(f"<{t.data.ndim}I", *t.shape)
            buf += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path: str | Path) -> OrderedDict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} at byte 4")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 8
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(raw):
                raise ValueError(f"{path}: record {name!r} truncated at byte {pos}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error:
        raise ValueError(f"{path}: truncated record header at byte {pos}") from None
    return out


def checkpoint_prefixes(records: dict[str, np.ndarray]) -> list[str]:
    return sorted({k.split("/", 1)[0] for k in records})


def load_into(net: RegressorNet, records: dict[str, np.ndarray], prefix: str) -> None:
    available = checkpoint_prefixes(records)
    if prefix not in available:
        raise KeyError(f"checkpoint has no {prefix!r} network; available prefixes: {available}")
    for name, t in net.params.items():
        key = f"{prefix}/{name}"
        if key not in records:
            raise KeyError(f"checkpoint lacks parameter {key}")
        if records[key].shape != t.shape:
            raise ValueError(f"{key}: stored shape {records[key].shape} vs network {t.shape}")
        t.data[...] = records[key]
