"""Sequential conv/ReLU/pool backbones, stereo fusion, and weight files.

A backbone is declared (not hard-coded) as an ordered layer list; shapes are
simulated ahead of execution so invalid geometry is caught before any math
runs.  Both stereo channels run the same backbone with the same weights; the
fused vector is left-channel flattening followed by right-channel flattening.

Weight file layout (little-endian):
    magic  4 bytes   b"DARE"
    u16              format version (1)
    u16 + utf-8      name
    u32              record count
    per record:      u32 layer index, u8 kind, u8 ndim, u32 dims..., f32 payload
    u32              CRC32 over every record's payload bytes, in file order
Kinds: 0 conv weights (c_out, v, v, c_in), 1 conv biases (c_out,),
2 dense weights (out, in), 3 dense biases (out,).
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CorruptFile, InvalidGeometry, ShapeMismatch, WeightMismatch
from .layers import (
    ConvSpec,
    PoolSpec,
    conv_forward,
    conv_output_side,
    maxpool_forward,
    pool_output_side,
    relu_forward,
)
from .tensor import FeatureMap3, Vector1, flatten

KIND_CONV_W = 0
KIND_CONV_B = 1
KIND_DENSE_W = 2
KIND_DENSE_B = 3

_MAGIC = b"DARE"
_VERSION = 1


# ---------------------------------------------------------------------------
# declarative configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    v: int
    s: int
    p: int
    c_out: int


@dataclass(frozen=True)
class ReluLayer:
    pass


@dataclass(frozen=True)
class PoolLayer:
    q: int
    s: int


LayerSpec = Union[ConvLayer, ReluLayer, PoolLayer]


@dataclass(frozen=True)
class BackboneConfig:
    name: str
    input_size: int
    input_channels: int
    layers: tuple[LayerSpec, ...]


def validate_config(cfg: BackboneConfig) -> list[tuple[int, int]]:
    """Simulate (side, depth) through every layer.

    Returns the shape trace starting with the input shape; raises
    InvalidGeometry naming the first offending layer.
    """
    n, c = cfg.input_size, cfg.input_channels
    if n < 1 or c < 1:
        raise InvalidGeometry(f"input shape ({n}, {c}) must be positive")
    trace = [(n, c)]
    for idx, layer in enumerate(cfg.layers):
        try:
            if isinstance(layer, ConvLayer):
                n = conv_output_side(n, layer.v, layer.s, layer.p)
                c = layer.c_out
            elif isinstance(layer, PoolLayer):
                n = pool_output_side(n, layer.q, layer.s)
            elif isinstance(layer, ReluLayer):
                pass
            else:
                raise InvalidGeometry(f"unknown layer type {type(layer).__name__}")
        except InvalidGeometry as exc:
            raise InvalidGeometry(f"layer {idx}: {exc}") from None
        trace.append((n, c))
    return trace


def output_shape(cfg: BackboneConfig) -> tuple[int, int]:
    return validate_config(cfg)[-1]


def multi_fm_length(cfg: BackboneConfig) -> int:
    """Length of the fused stereo vector: 2 * N_L^2 * C_L."""
    n, c = output_shape(cfg)
    return 2 * n * n * c


def config_to_json(cfg: BackboneConfig) -> dict:
    layers = []
    for layer in cfg.layers:
        if isinstance(layer, ConvLayer):
            layers.append({"kind": "conv", "v": layer.v, "s": layer.s,
                           "p": layer.p, "c_out": layer.c_out})
        elif isinstance(layer, ReluLayer):
            layers.append({"kind": "relu"})
        else:
            layers.append({"kind": "maxpool", "q": layer.q, "s": layer.s})
    return {"name": cfg.name, "input_size": cfg.input_size,
            "input_channels": cfg.input_channels, "layers": layers}


def config_from_json(obj: dict) -> BackboneConfig:
    layers: list[LayerSpec] = []
    for entry in obj["layers"]:
        kind = entry["kind"]
        if kind == "conv":
            layers.append(ConvLayer(int(entry["v"]), int(entry["s"]),
                                    int(entry["p"]), int(entry["c_out"])))
        elif kind == "relu":
            layers.append(ReluLayer())
        elif kind == "maxpool":
            layers.append(PoolLayer(int(entry["q"]), int(entry["s"])))
        else:
            raise InvalidGeometry(f"unknown layer kind {kind!r}")
    return BackboneConfig(str(obj["name"]), int(obj["input_size"]),
                          int(obj.get("input_channels", 3)), tuple(layers))


def load_config(path) -> BackboneConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(json.load(fh))


def save_config(cfg: BackboneConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_json(cfg), fh, indent=2)
        fh.write("\n")


def builtin_config(name: str) -> BackboneConfig:
    """Load a packaged backbone config ("mininet" or "alexconv")."""
    path = Path(__file__).parent / "configs" / f"{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"no builtin backbone named {name!r}")
    return load_config(path)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass
class BackboneWeights:
    """Per-layer (weights, biases) for conv layers; None for weightless layers."""

    entries: list[Optional[tuple[np.ndarray, np.ndarray]]]


def init_weights(cfg: BackboneConfig, seed: int) -> BackboneWeights:
    """Seeded uniform +-sqrt(6/(fan_in + fan_out)) filters, zero biases."""
    rng = np.random.default_rng(seed)
    trace = validate_config(cfg)
    entries: list[Optional[tuple[np.ndarray, np.ndarray]]] = []
    for idx, layer in enumerate(cfg.layers):
        if isinstance(layer, ConvLayer):
            c_in = trace[idx][1]
            fan_in = layer.v * layer.v * c_in
            fan_out = layer.v * layer.v * layer.c_out
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(layer.c_out, layer.v, layer.v, c_in))
            entries.append((w, np.zeros(layer.c_out)))
        else:
            entries.append(None)
    return BackboneWeights(entries)


def _check_weights(cfg: BackboneConfig, weights: BackboneWeights) -> None:
    trace = validate_config(cfg)
    if len(weights.entries) != len(cfg.layers):
        raise WeightMismatch(
            f"{len(weights.entries)} weight entries for {len(cfg.layers)} layers")
    for idx, layer in enumerate(cfg.layers):
        entry = weights.entries[idx]
        if isinstance(layer, ConvLayer):
            if entry is None:
                raise WeightMismatch(f"layer {idx}: conv layer has no weights")
            w, b = entry
            expect = (layer.c_out, layer.v, layer.v, trace[idx][1])
            if w.shape != expect:
                raise WeightMismatch(
                    f"layer {idx}: weight shape {w.shape}, expected {expect}")
            if b.shape != (layer.c_out,):
                raise WeightMismatch(
                    f"layer {idx}: bias shape {b.shape}, expected ({layer.c_out},)")
        elif entry is not None:
            raise WeightMismatch(f"layer {idx}: weights given for a weightless layer")


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def extract_channel(
    image: FeatureMap3, cfg: BackboneConfig, weights: BackboneWeights,
) -> FeatureMap3:
    """Run one image through the backbone layer by layer."""
    if image.side != cfg.input_size or image.depth != cfg.input_channels:
        raise ShapeMismatch(
            f"image is {image.side}x{image.side}x{image.depth}, backbone wants "
            f"{cfg.input_size}x{cfg.input_size}x{cfg.input_channels}")
    _check_weights(cfg, weights)
    fm = image
    for layer, entry in zip(cfg.layers, weights.entries):
        if isinstance(layer, ConvLayer):
            w, b = entry
            fm = conv_forward(fm, ConvSpec(w, b, stride=layer.s, padding=layer.p))
        elif isinstance(layer, ReluLayer):
            fm = relu_forward(fm)
        else:
            fm = maxpool_forward(fm, PoolSpec(layer.q, layer.s))
    return fm


def fuse_stereo(
    left: FeatureMap3, right: FeatureMap3,
    cfg: BackboneConfig, weights: BackboneWeights,
) -> Vector1:
    """Extract both channels with the same backbone and concatenate.

    Elements 0..N^2*C-1 are the flattened left features, the rest the right.
    """
    left_features = flatten(extract_channel(left, cfg, weights))
    right_features = flatten(extract_channel(right, cfg, weights))
    return np.concatenate([left_features, right_features])


# ---------------------------------------------------------------------------
# binary weight files
# ---------------------------------------------------------------------------

def write_records(path, name: str, records: list[tuple[int, int, np.ndarray]]) -> None:
    """Write (layer_index, kind, array) records in the checksummed format."""
    name_bytes = name.encode("utf-8")
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<H", _VERSION)
    out += struct.pack("<H", len(name_bytes))
    out += name_bytes
    out += struct.pack("<I", len(records))
    crc = 0
    for layer_index, kind, arr in records:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<IBB", layer_index, kind, arr32.ndim)
        out += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
        payload = arr32.tobytes()
        crc = zlib.crc32(payload, crc)
        out += payload
    out += struct.pack("<I", crc & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(out)


def read_records(path) -> tuple[str, list[tuple[int, int, np.ndarray]]]:
    """Read and checksum-verify a weight file; values come back as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CorruptFile(f"{path}: truncated at byte {pos}")
        chunk = view[pos:pos + n].tobytes()
        pos += n
        return chunk

    if take(4) != _MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    (version,) = struct.unpack("<H", take(2))
    if version != _VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    (name_len,) = struct.unpack("<H", take(2))
    name = take(name_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    records = []
    crc = 0
    for _ in range(count):
        layer_index, kind, ndim = struct.unpack("<IBB", take(6))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * size)
        crc = zlib.crc32(payload, crc)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
        records.append((layer_index, kind, arr))
    (stored_crc,) = struct.unpack("<I", take(4))
    if stored_crc != (crc & 0xFFFFFFFF):
        raise CorruptFile(f"{path}: CRC mismatch")
    return name, records


def save_weights(cfg: BackboneConfig, weights: BackboneWeights, path) -> None:
    """Serialize backbone weights; shapes are validated against cfg first."""
    _check_weights(cfg, weights)
    records = []
    for idx, entry in enumerate(weights.entries):
        if entry is None:
            continue
        w, b = entry
        records.append((idx, KIND_CONV_W, w))
        records.append((idx, KIND_CONV_B, b))
    write_records(path, cfg.name, records)


def load_weights(cfg: BackboneConfig, path) -> BackboneWeights:
    """Load and validate stored weights against cfg.

    Values round-trip within float32 quantization of each element.
    """
    _, records = read_records(path)
    entries: list[Optional[tuple[np.ndarray, np.ndarray]]] = [None] * len(cfg.layers)
    partial: dict[int, dict[int, np.ndarray]] = {}
    for layer_index, kind, arr in records:
        if layer_index >= len(cfg.layers):
            raise WeightMismatch(f"record for layer {layer_index} beyond config")
        if kind not in (KIND_CONV_W, KIND_CONV_B):
            raise WeightMismatch(f"layer {layer_index}: unexpected record kind {kind}")
        partial.setdefault(layer_index, {})[kind] = arr
    for layer_index, parts in partial.items():
        if KIND_CONV_W not in parts or KIND_CONV_B not in parts:
            raise WeightMismatch(f"layer {layer_index}: incomplete conv record pair")
        entries[layer_index] = (parts[KIND_CONV_W], parts[KIND_CONV_B])
    weights = BackboneWeights(entries)
    try:
        _check_weights(cfg, weights)
    except WeightMismatch:
        raise
    return weights
