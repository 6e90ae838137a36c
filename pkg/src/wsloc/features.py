"""Feature-map production: a small trainable conv stack and tensor file IO.

The conv stack is a stand-in feature extractor: 3x3 same-padding convolutions
with ReLU, strides chosen so the overall stride matches the FeatureGeometry
used by pooling. Feature maps may instead be ingested from `.cltf` files
(single little-endian float32 tensor; containers hold named tensors and back
the checkpoint format).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import FeatureGeometry
from .pooling import FeatureMap

CLTF_MAGIC = b"CLTF"
CLTF_VERSION = 1


@dataclass(frozen=True)
class ConvConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)

    def __post_init__(self) -> None:
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have the same length")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError("conv strides must be 1 or 2")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


def init_conv_params(
    cfg: ConvConfig, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Glorot-uniform 3x3 kernels and zero biases, one pair per layer."""
    params = []
    c_in = cfg.in_channels
    for c_out in cfg.channels:
        a = math.sqrt(6.0 / (c_in * 9 + c_out * 9))
        w = rng.uniform(-a, a, size=(c_out, c_in, 3, 3))
        params.append((w, np.zeros(c_out)))
        c_in = c_out
    return params


def _im2col(x_padded: np.ndarray, stride: int) -> np.ndarray:
    # (C, Hp, Wp) -> (Ho*Wo, C*9) with column order (channel, kr, kc)
    win = np.lib.stride_tricks.sliding_window_view(x_padded, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * 9), ho, wo


@lru_cache(maxsize=64)
def _col_indices(c_in: int, hp: int, wp: int, ho: int, wo: int, stride: int) -> np.ndarray:
    # Flat index into the padded (C, Hp, Wp) input for every im2col column.
    # Cached per shape; callers must treat the result as read-only.
    rows = (np.arange(ho) * stride)[:, None, None, None] + np.arange(3)[None, None, :, None]
    cols = (np.arange(wo) * stride)[None, :, None, None] + np.arange(3)[None, None, None, :]
    pos = rows * wp + cols  # (ho, wo, 3, 3)
    chan = np.arange(c_in)[None, None, :, None, None] * (hp * wp)
    return (chan + pos[:, :, None, :, :]).reshape(ho * wo, c_in * 9)


def conv_forward(
    image: np.ndarray,
    params: list[tuple[np.ndarray, np.ndarray]],
    cfg: ConvConfig,
) -> tuple[FeatureMap, list[dict]]:
    """Run the conv stack; returns the feature map and a cache for backward.

    The input is zero-extended on the bottom/right to a multiple of the total
    stride so every layer halves (or keeps) dimensions exactly.
    """
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ValueError(
            f"expected {cfg.in_channels} x H x W input, got shape {image.shape}"
        )
    s_total = cfg.total_stride
    _, h, w = image.shape
    h_pad = math.ceil(h / s_total) * s_total
    w_pad = math.ceil(w / s_total) * s_total
    x = np.zeros((cfg.in_channels, h_pad, w_pad), dtype=np.float64)
    x[:, :h, :w] = image

    cache: list[dict] = [{"orig_hw": (h, w)}]
    for (weight, bias), stride in zip(params, cfg.strides):
        c_out = weight.shape[0]
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        cols, ho, wo = _im2col(xp, stride)
        w_mat = weight.reshape(c_out, -1).T
        pre = cols @ w_mat + bias
        out = np.maximum(pre, 0.0)
        cache.append(
            {
                "cols": cols,
                "mask": pre > 0.0,
                "stride": stride,
                "in_shape": x.shape,
                "out_hw": (ho, wo),
            }
        )
        x = out.reshape(ho, wo, c_out).transpose(2, 0, 1)

    c_f, h_f, w_f = x.shape
    geom = FeatureGeometry(stride=s_total, fmap_h=h_f, fmap_w=w_f)
    return FeatureMap(x, geom), cache


def conv_backward(
    d_fmap: np.ndarray,
    params: list[tuple[np.ndarray, np.ndarray]],
    cache: list[dict],
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact gradients for the conv stack: per-layer (dW, db) and the input grad."""
    d_out = d_fmap
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)
    for li in range(len(params) - 1, -1, -1):
        weight, _ = params[li]
        layer = cache[li + 1]
        c_out = weight.shape[0]
        ho, wo = layer["out_hw"]
        d_flat = d_out.transpose(1, 2, 0).reshape(ho * wo, c_out)
        d_flat = d_flat * layer["mask"]
        cols = layer["cols"]
        d_w = (cols.T @ d_flat).T.reshape(weight.shape)
        d_b = d_flat.sum(axis=0)
        grads[li] = (d_w, d_b)

        c_in, h_in, w_in = layer["in_shape"]
        hp, wp = h_in + 2, w_in + 2
        d_cols = d_flat @ weight.reshape(c_out, -1)
        idx = _col_indices(c_in, hp, wp, ho, wo, layer["stride"])
        d_padded = np.bincount(
            idx.ravel(), weights=d_cols.ravel(), minlength=c_in * hp * wp
        ).reshape(c_in, hp, wp)
        d_out = d_padded[:, 1:-1, 1:-1]

    h, w = cache[0]["orig_hw"]
    return grads, d_out[:, :h, :w]


def _write_tensor(fh, arr: np.ndarray) -> None:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr32.ndim))
    fh.write(struct.pack(f"<{arr32.ndim}Q", *arr32.shape))
    fh.write(arr32.tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated tensor file while reading {what}")
    return data


def _read_tensor(fh) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims"))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def _read_header(fh, path) -> None:
    magic = fh.read(4)
    if magic != CLTF_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != CLTF_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(CLTF_MAGIC)
        fh.write(struct.pack("<I", CLTF_VERSION))
        _write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _read_header(fh, path)
        arr = _read_tensor(fh)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after tensor payload")
        return arr


def save_container(path, named: dict[str, np.ndarray]) -> None:
    """Write named tensors in insertion order (names must be unique)."""
    with open(path, "wb") as fh:
        fh.write(CLTF_MAGIC)
        fh.write(struct.pack("<I", CLTF_VERSION))
        for name, arr in named.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            _write_tensor(fh, arr)


def load_container(path) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _read_header(fh, path)
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise ValueError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            if name in named:
                raise ValueError(f"{path}: duplicate record name {name!r}")
            named[name] = _read_tensor(fh)
    return named


def save_feature_map(fm: FeatureMap, path) -> None:
    save_tensor(path, fm.values)


def load_feature_map(path, stride: int = 8) -> FeatureMap:
    arr = load_tensor(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: feature map must have rank 3, got {arr.ndim}")
    _, h, w = arr.shape
    return FeatureMap(arr, FeatureGeometry(stride=stride, fmap_h=h, fmap_w=w))
