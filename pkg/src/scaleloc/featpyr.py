"""Multi-layer feature pyramid and RoI pooling.

A pyramid holds one feature grid per layer (ids 3..5 by convention) at
strictly increasing strides. The default provider computes block
statistics of the grayscale image; a file provider replays precomputed
tensors so externally produced features can be plugged in.

RoI pooling maps a pixel-space box onto a layer grid and resamples it to
a fixed ``roi_size`` x ``roi_size`` window. Regions smaller than the
window are symmetrically expanded first, pulling in surrounding context
instead of upsampling a couple of cells.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox

__all__ = [
    "LayerSpec",
    "PyramidConfig",
    "FeaturePyramid",
    "FeatureShapeError",
    "build_pyramid",
    "roi_pool",
    "roi_pool_many",
    "write_features",
    "read_features",
    "SyntheticProvider",
    "FileFeatureProvider",
]

_MAGIC = b"SLFT"
_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    stride: int
    channels: int


@dataclass(frozen=True)
class PyramidConfig:
    """Layer layout. Desk-scale channel counts by default; pass
    channels (256, 512, 1024) for the full-size setting."""

    layers: tuple[LayerSpec, ...] = (
        LayerSpec(3, 8, 8),
        LayerSpec(4, 16, 16),
        LayerSpec(5, 32, 32),
    )
    roi_size: int = 4

    def __post_init__(self):
        if self.roi_size < 1:
            raise ValueError("roi_size must be at least 1")
        ids = [l.layer_id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("layer ids must be unique")
        strides = [l.stride for l in self.layers]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError("strides must be strictly increasing")
        if any(l.channels < 1 or l.stride < 1 for l in self.layers):
            raise ValueError("strides and channel counts must be positive")

    def layer(self, layer_id: int) -> LayerSpec:
        for spec in self.layers:
            if spec.layer_id == layer_id:
                return spec
        raise KeyError(f"no layer {layer_id} in pyramid config")

    def layer_ids(self) -> tuple[int, ...]:
        return tuple(l.layer_id for l in self.layers)

    def flat_dim(self, layer_id: int) -> int:
        """Length of a flattened pooled block for one layer."""
        return self.roi_size * self.roi_size * self.layer(layer_id).channels

    def flat_dims(self) -> dict[int, int]:
        return {l.layer_id: self.flat_dim(l.layer_id) for l in self.layers}


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-layer (channels, H, W) grids plus the source image extent."""

    extent: tuple[int, int]
    strides: dict[int, int]
    grids: dict[int, np.ndarray]
    roi_size: int = 4

    def __post_init__(self):
        width, height = self.extent
        for layer_id, grid in self.grids.items():
            stride = self.strides[layer_id]
            want = (-(-height // stride), -(-width // stride))
            if grid.ndim != 3 or grid.shape[1:] != want:
                raise FeatureShapeError(
                    f"layer {layer_id}: expected spatial shape {want}, got {grid.shape[1:]}"
                )
            if not np.all(np.isfinite(grid)):
                raise ValueError(f"layer {layer_id}: non-finite feature values")

    def layer_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.grids))


class FeatureShapeError(ValueError):
    """Feature tensor does not match the expected pyramid geometry."""


def _block_reduce(img: np.ndarray, stride: int, reducer) -> np.ndarray:
    """Apply ``reducer`` over stride x stride blocks, padding edges by
    replication so partial blocks are still full windows."""
    rows, cols = img.shape
    out_r = -(-rows // stride)
    out_c = -(-cols // stride)
    pad_r = out_r * stride - rows
    pad_c = out_c * stride - cols
    padded = np.pad(img, ((0, pad_r), (0, pad_c)), mode="edge")
    blocks = padded.reshape(out_r, stride, out_c, stride)
    return reducer(blocks, axis=(1, 3))


def _base_channels(img: np.ndarray, stride: int) -> list[np.ndarray]:
    """The eight block statistics the synthetic provider cycles through."""
    gy, gx = np.gradient(img)
    g45 = (gx + gy) / np.sqrt(2.0)
    g135 = (gx - gy) / np.sqrt(2.0)
    mean = _block_reduce(img, stride, np.mean)
    stats = [
        mean,
        _block_reduce(np.abs(gx), stride, np.mean),
        _block_reduce(np.abs(gy), stride, np.mean),
        _block_reduce(np.abs(g45), stride, np.mean),
        _block_reduce(np.abs(g135), stride, np.mean),
        _block_reduce(img, stride, np.std),
        _block_reduce(img, stride, np.max) - _block_reduce(img, stride, np.min),
        _block_reduce(np.hypot(gx, gy), stride, np.mean),
    ]
    return stats


def build_pyramid(image: np.ndarray, cfg: PyramidConfig) -> FeaturePyramid:
    """Compute the synthetic block-statistics pyramid for a grayscale image.

    Channel 0 of every layer is the block mean; the remaining channels
    cycle through oriented gradient energies and local-contrast stats.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2-d grayscale image")
    height, width = image.shape
    grids = {}
    strides = {}
    for spec in cfg.layers:
        base = _base_channels(image, spec.stride)
        chans = [base[c % len(base)] for c in range(spec.channels)]
        grids[spec.layer_id] = np.stack(chans, axis=0)
        strides[spec.layer_id] = spec.stride
    return FeaturePyramid(
        extent=(width, height), strides=strides, grids=grids, roi_size=cfg.roi_size
    )


def _sample_axis(lo: np.ndarray, hi: np.ndarray, roi: int) -> np.ndarray:
    """Sample coordinates along one axis, expanding regions narrower than
    the roi window symmetrically about their center."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    length = hi - lo
    narrow = length < roi
    center = (lo + hi) / 2.0
    lo = np.where(narrow, center - roi / 2.0, lo)
    hi = np.where(narrow, center + roi / 2.0, hi)
    offsets = (np.arange(roi) + 0.5) / roi
    return lo[:, None] + offsets[None, :] * (hi - lo)[:, None]


def _bilinear_axis(coords: np.ndarray, size: int):
    """Indices and fractions for bilinear sampling at cell centers, with
    edge replication outside the grid."""
    u = np.clip(coords - 0.5, 0.0, size - 1.0)
    i0 = np.floor(u).astype(np.int64)
    i0 = np.minimum(i0, size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = u - i0
    return i0, i1, frac


def roi_pool_many(
    pyramid: FeaturePyramid, layer_id: int, boxes: np.ndarray
) -> np.ndarray:
    """Pool many (x, y, w, h) boxes at once; returns (N, roi, roi, C)."""
    if layer_id not in pyramid.grids:
        raise KeyError(f"pyramid has no layer {layer_id}")
    grid = pyramid.grids[layer_id]
    stride = pyramid.strides[layer_id]
    roi = pyramid.roi_size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)

    xs = _sample_axis(boxes[:, 0] / stride, (boxes[:, 0] + boxes[:, 2]) / stride, roi)
    ys = _sample_axis(boxes[:, 1] / stride, (boxes[:, 1] + boxes[:, 3]) / stride, roi)

    _, grid_h, grid_w = grid.shape
    x0, x1, fx = _bilinear_axis(xs, grid_w)
    y0, y1, fy = _bilinear_axis(ys, grid_h)

    n = boxes.shape[0]
    rows = np.arange(n)[:, None, None]
    y0b = y0[:, :, None]
    y1b = y1[:, :, None]
    x0b = x0[:, None, :]
    x1b = x1[:, None, :]
    fyb = fy[:, :, None, None]
    fxb = fx[:, None, :, None]

    g = np.moveaxis(grid, 0, -1)  # (H, W, C)
    v00 = g[y0b, x0b]
    v01 = g[y0b, x1b]
    v10 = g[y1b, x0b]
    v11 = g[y1b, x1b]
    del rows
    top = v00 * (1 - fxb) + v01 * fxb
    bot = v10 * (1 - fxb) + v11 * fxb
    return top * (1 - fyb) + bot * fyb


def roi_pool(pyramid: FeaturePyramid, layer_id: int, box: BBox) -> np.ndarray:
    """Pool one box to a (roi, roi, C) block; flatten for the policy nets."""
    out = roi_pool_many(pyramid, layer_id, np.array([box.as_tuple()]))
    return out[0]


def write_features(path, pyramid: FeaturePyramid) -> None:
    """Serialize a pyramid: header + row-major float32 grids + crc32."""
    payload = bytearray()
    layer_ids = pyramid.layer_ids()
    header = struct.pack("<4sHHii", _MAGIC, _VERSION, len(layer_ids), *pyramid.extent)
    payload += header
    payload += struct.pack("<H", pyramid.roi_size)
    body = bytearray()
    for layer_id in layer_ids:
        grid = pyramid.grids[layer_id].astype(np.float32)
        c, h, w = grid.shape
        payload += struct.pack("<iiiii", layer_id, pyramid.strides[layer_id], c, h, w)
        body += grid.tobytes(order="C")
    payload += struct.pack("<I", zlib.crc32(bytes(body)))
    payload += body
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def read_features(path) -> FeaturePyramid:
    """Load a serialized pyramid, validating magic, version, and checksum."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise FeatureShapeError("not a feature tensor file (bad magic)")
    _, version, n_layers, width, height = struct.unpack_from("<4sHHii", raw, 0)
    if version != _VERSION:
        raise FeatureShapeError(f"unsupported feature file version {version}")
    offset = struct.calcsize("<4sHHii")
    (roi_size,) = struct.unpack_from("<H", raw, offset)
    offset += 2
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<iiiii", raw, offset))
        offset += struct.calcsize("<iiiii")
    (crc,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    body = raw[offset:]
    if zlib.crc32(body) != crc:
        raise FeatureShapeError("feature file checksum mismatch")

    grids = {}
    strides = {}
    pos = 0
    for layer_id, stride, c, h, w in shapes:
        count = c * h * w
        grid = np.frombuffer(body, dtype="<f4", count=count, offset=pos * 4)
        pos += count
        grids[layer_id] = grid.reshape(c, h, w).astype(np.float64)
        strides[layer_id] = stride
    return FeaturePyramid(
        extent=(width, height), strides=strides, grids=grids, roi_size=roi_size
    )


def _check_matches_config(pyramid: FeaturePyramid, cfg: PyramidConfig, extent) -> None:
    width, height = extent
    if pyramid.extent != (width, height):
        raise FeatureShapeError(
            f"extent mismatch: expected {(width, height)}, got {pyramid.extent}"
        )
    for spec in cfg.layers:
        if spec.layer_id not in pyramid.grids:
            raise FeatureShapeError(f"missing layer {spec.layer_id} in feature file")
        grid = pyramid.grids[spec.layer_id]
        want = (
            spec.channels,
            -(-height // spec.stride),
            -(-width // spec.stride),
        )
        if grid.shape != want:
            raise FeatureShapeError(
                f"layer {spec.layer_id}: expected shape {want}, got {grid.shape}"
            )


class SyntheticProvider:
    """Default provider: block statistics computed from the image."""

    def __init__(self, cfg: PyramidConfig):
        self.cfg = cfg

    def provide(self, image: np.ndarray) -> FeaturePyramid:
        return build_pyramid(image, self.cfg)


class FileFeatureProvider:
    """Replays one precomputed tensor file, validating its geometry."""

    def __init__(self, cfg: PyramidConfig, path):
        self.cfg = cfg
        self.path = path

    def provide(self, image: np.ndarray) -> FeaturePyramid:
        pyramid = read_features(self.path)
        height, width = np.asarray(image).shape
        _check_matches_config(pyramid, self.cfg, (width, height))
        return pyramid
