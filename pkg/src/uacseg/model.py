"""Small fully convolutional encoder-decoder, written functionally over a parameter dict."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

ParameterSnapshot = "OrderedDict[str, torch.Tensor]"


@dataclass(frozen=True)
class SegModelSpec:
    num_classes: int = 5
    widths: tuple[int, int, int, int] = (12, 16, 24, 32)
    height: int = 64
    width: int = 64
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError(f"widths must be four positive ints, got {self.widths}")
        if self.height % 16 or self.width % 16 or self.height < 16 or self.width < 16:
            raise ValueError(f"input size must be a positive multiple of 16, got {self.height}x{self.width}")


def _layers(spec: SegModelSpec):
    w0, w1, w2, w3 = spec.widths
    # name, in, out, kernel
    return [
        ("down0", 3, w0, 3),
        ("down1", w0, w1, 3),
        ("down2", w1, w2, 3),
        ("down3", w2, w3, 3),
        ("up2", w3, w2, 3),
        ("up1", w2, w1, 3),
        ("up0", w1, w0, 3),
        ("head", w0, spec.num_classes, 1),
    ]


def init_params(spec: SegModelSpec, dtype=torch.float32, zero_head: bool = False):
    gen = torch.Generator().manual_seed(spec.init_seed)
    params = OrderedDict()
    for name, cin, cout, k in _layers(spec):
        std = (2.0 / (cin * k * k)) ** 0.5
        if name == "head":
            std = 0.0 if zero_head else (1.0 / (cin * k * k)) ** 0.5
        params[f"{name}.weight"] = torch.randn(cout, cin, k, k, generator=gen, dtype=dtype) * std
        params[f"{name}.bias"] = torch.zeros(cout, dtype=dtype)
    return params


def count_params(params) -> int:
    return sum(p.numel() for p in params.values())


def _conv(x, params, name, stride=1):
    w = params[f"{name}.weight"]
    return F.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)


def _forward_nchw(params, spec: SegModelSpec, image):
    x = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image))
    if x.shape[-3:] != (spec.height, spec.width, 3):
        raise ValueError(
            f"image shape {tuple(x.shape)} does not match model input {spec.height}x{spec.width}x3"
        )
    lead = x.shape[:-3]
    x = x.reshape(-1, spec.height, spec.width, 3).permute(0, 3, 1, 2)
    x = x.to(params["head.weight"].dtype)

    s0 = F.relu(_conv(x, params, "down0", 2))
    s1 = F.relu(_conv(s0, params, "down1", 2))
    s2 = F.relu(_conv(s1, params, "down2", 2))
    y = F.relu(_conv(s2, params, "down3", 2))
    y = F.relu(_conv(F.interpolate(y, scale_factor=2.0), params, "up2")) + s2
    y = F.relu(_conv(F.interpolate(y, scale_factor=2.0), params, "up1")) + s1
    y = F.relu(_conv(F.interpolate(y, scale_factor=2.0), params, "up0")) + s0
    y = _conv(y, params, "head")
    return F.interpolate(y, scale_factor=2.0, mode="bilinear", align_corners=False), lead


def _channel_last(y, lead, spec):
    return y.permute(0, 2, 3, 1).reshape(*lead, spec.height, spec.width, spec.num_classes)


def model_forward(params, spec: SegModelSpec, image) -> torch.Tensor:
    """Logits ``(..., H, W, C)`` for channel-last images ``(..., H, W, 3)``."""
    y, lead = _forward_nchw(params, spec, image)
    return _channel_last(y, lead, spec)


def predict_probs(params, spec: SegModelSpec, image) -> torch.Tensor:
    """Softmax of :func:`model_forward`, normalised before the layout change (much faster)."""
    y, lead = _forward_nchw(params, spec, image)
    return _channel_last(torch.softmax(y, dim=1), lead, spec)


def clone_params(params, requires_grad: bool = False):
    return OrderedDict(
        (k, v.detach().clone().requires_grad_(requires_grad)) for k, v in params.items()
    )


def check_compatible(a, b) -> None:
    if list(a) != list(b):
        raise ValueError("parameter snapshots have different names")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"parameter {k}: shape {tuple(a[k].shape)} vs {tuple(b[k].shape)}")


# Flat binary snapshot format, little-endian:
#   magic b"UACP", u32 count, then per array:
#   u32 name_len, name (utf-8), u32 ndim, u32 dims[ndim], float32 data[prod(dims)]
_MAGIC = b"UACP"


def save_snapshot(path, params) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            arr = t.detach().cpu().numpy().astype("<f4")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_snapshot(path):
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    params = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        params[name] = torch.from_numpy(arr.astype(np.float32))
    return params
