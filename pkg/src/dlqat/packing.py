"""Bit-exact pack files for quantized weights.

Layout (all integers little-endian)::

    magic      b"DLQT"
    version    u16
    bits       u8
    granularity u8          0 = per-channel, 1 = group
    group_size u32          0 for per-channel
    records, each:
        name_len u16, name (UTF-8)
        n_dims u8, dims u32 * n_dims
        grid     ceil(numel * bits / 8) bytes
        s, b, m  float32 * n_groups each
    crc32      u32 over every preceding byte

Grid values v are stored as v + 2**(bits-1), packed LSB-first, row-major.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .layer import DLQATLinear
from .quant import QuantSpec, dequantize, fake_quantize_activation, quantize_ints
from .tensor import Tensor, no_grad

MAGIC = b"DLQT"
VERSION = 1
_HEADER = struct.Struct("<4sHBBI")


class PackFormatError(ValueError):
    pass


class BadMagicError(PackFormatError):
    pass


class UnsupportedVersionError(PackFormatError):
    pass


class TruncatedError(PackFormatError):
    pass


class ChecksumError(PackFormatError):
    pass


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack unsigned ``values`` (< 2**bits) densely, LSB-first."""
    values = np.asarray(values, dtype=np.uint16).reshape(-1)
    if values.size and values.max() >= 2**bits:
        raise ValueError(f"value does not fit in {bits} bits")
    stream = ((values[:, None] >> np.arange(bits, dtype=np.uint16)) & 1).astype(np.uint8)
    return np.packbits(stream.reshape(-1), bitorder="little").tobytes()


def unpack_bits(raw: bytes, count: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    stream = stream[: count * bits].reshape(count, bits).astype(np.uint16)
    return (stream << np.arange(bits, dtype=np.uint16)).sum(axis=1).astype(np.uint16)


def packed_size(numel: int, bits: int) -> int:
    return -(-numel * bits // 8)


@dataclass
class PackedTensor:
    name: str
    grid: np.ndarray  # signed integer grid, (C_out, C_in)
    s: np.ndarray
    b: np.ndarray
    m: np.ndarray

    def dequantize(self) -> np.ndarray:
        return dequantize(self.grid.astype(np.float64), self.s, self.b, self.m)


@dataclass
class PackFile:
    spec: QuantSpec
    tensors: dict[str, PackedTensor]
    version: int = VERSION

    def __getitem__(self, name: str) -> PackedTensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"no tensor named {name!r} in pack file") from None


def encode(pack: PackFile) -> bytes:
    spec = pack.spec
    out = bytearray(
        _HEADER.pack(MAGIC, pack.version, spec.bits, 0 if spec.per_channel else 1, spec.group_size or 0)
    )
    offset = 2 ** (spec.bits - 1)
    for name, t in pack.tensors.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", t.grid.ndim) + struct.pack(f"<{t.grid.ndim}I", *t.grid.shape)
        out += pack_bits(t.grid.astype(np.int64) + offset, spec.bits)
        for arr in (t.s, t.b, t.m):
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite metadata in {name}")
            out += np.asarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode(raw: bytes) -> PackFile:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError("not a DLQT pack file")
    if len(raw) < _HEADER.size + 4:
        raise TruncatedError("file ends inside the header")
    _, version, bits, tag, group_size = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported pack format version {version}")
    if tag not in (0, 1):
        raise PackFormatError(f"unknown granularity tag {tag}")
    spec = QuantSpec(bits, None if tag == 0 else group_size)
    end = len(raw) - 4
    pos = _HEADER.size

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise TruncatedError("payload ends inside a record")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    tensors = {}
    offset = 2 ** (bits - 1)
    while pos < end:
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (n_dims,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims))
        if n_dims != 2:
            raise PackFormatError(f"{name}: expected a 2-d weight, got {n_dims} dims")
        numel = dims[0] * dims[1]
        values = unpack_bits(take(packed_size(numel, bits)), numel, bits)
        grid = (values.astype(np.int16) - offset).astype(np.int8).reshape(dims)
        n_groups = spec.n_groups(*dims)
        shape = spec.param_shape(*dims)
        meta = [
            np.frombuffer(take(4 * n_groups), dtype="<f4").astype(np.float64).reshape(shape)
            for _ in range(3)
        ]
        tensors[name] = PackedTensor(name, grid, *meta)
    (crc,) = struct.unpack("<I", raw[end:])
    if zlib.crc32(raw[:end]) != crc:
        raise ChecksumError("CRC32 mismatch")
    return PackFile(spec, tensors, version)


def pack_model(model) -> bytes:
    """Serialize every DL-QAT projection of ``model``.

    Layers are finalized first: s, b, m are rounded to binary32 (and MinMax
    scales snapshotted), so the in-memory forward afterwards matches the
    packed weights bit for bit.
    """
    layers = {n: l for n, l in model.linears().items() if isinstance(l, DLQATLinear)}
    if not layers:
        raise ValueError("model has no quantized layers to pack")
    specs = {l.spec for l in layers.values()}
    if len(specs) != 1:
        raise ValueError("all layers must share one quantization spec")
    spec = specs.pop()
    for name, layer in layers.items():
        if not all(np.isfinite(t.data).all() for t in layer.parameters().values()):
            raise ValueError(f"non-finite parameters in {name}")
    tensors = {}
    with no_grad():
        for name, layer in layers.items():
            layer.finalize_for_export()
            q = layer.qparams
            w = layer.effective_weight().data
            grid = quantize_ints(w, q.s.data, q.b.data, spec.bits).astype(np.int8)
            m = q.m.data if layer.setting.magnitude_enabled else np.ones_like(q.m.data)
            tensors[name] = PackedTensor(name, grid, q.s.data.copy(), q.b.data.copy(), m.copy())
    return encode(PackFile(spec, tensors))


def unpack_model(raw: bytes) -> PackFile:
    return decode(raw)


class PackedLinear:
    """Inference-only projection backed by a dequantized packed weight."""

    def __init__(self, packed: PackedTensor, activation_bits: int | None = None):
        self.name = packed.name
        self.weight = Tensor(packed.dequantize())
        self.activation_bits = activation_bits

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def __call__(self, x: Tensor) -> Tensor:
        if self.activation_bits is not None:
            x = fake_quantize_activation(x, self.activation_bits)
        return F.linear(x, self.weight)


def packed_linear_forward(pack: PackFile, name: str, x, activation_bits: int | None = None) -> Tensor:
    """(..., C_in) -> (..., C_out) through the packed weight ``name``."""
    layer = PackedLinear(pack[name], activation_bits)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != layer.weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match C_in={layer.weight.shape[1]}")
    return layer(x)


def load_packed_weights(model, pack: PackFile) -> None:
    """Swap every quantized projection of ``model`` for its packed counterpart."""
    for i, block in enumerate(model.blocks):
        for kind, layer in list(block.layers.items()):
            name = f"layers.{i}.{kind}"
            if isinstance(layer, DLQATLinear):
                block.layers[kind] = PackedLinear(pack[name], layer.activation_bits)
