"""Parameter storage: float32 tensors, bit-level access, checksums, NAPM files.

A tensor is a C-contiguous ``numpy.float32`` array. Every element is
addressable as a 32-bit word (bit 0 is the least-significant bit of the
IEEE-754 encoding), which is what fault injection, comparison and
checksumming operate on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import kernels
from .errors import AddressingError, ContractError, FormatError

NAPM_MAGIC = b"NAPM"
NAPM_VERSION = 1
KIND_DENSE = 0


def as_tensor(data, shape=None) -> np.ndarray:
    t = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        t = t.reshape(shape)
    return t


def words(t: np.ndarray) -> np.ndarray:
    """Flat uint32 view sharing memory with ``t``."""
    if t.dtype != np.float32 and t.dtype != np.uint32:
        raise ContractError(f"expected a 32-bit tensor, got {t.dtype}")
    if not t.flags.c_contiguous:
        raise ContractError("tensor must be C-contiguous")
    return t.reshape(-1).view(np.uint32)


def _flat(t: np.ndarray) -> np.ndarray:
    return words(t).view(np.float32)


@dataclass
class LayerParams:
    weights: np.ndarray  # (inputs, outputs)
    bias: np.ndarray  # (outputs,)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ContractError("dense layer needs 2-D weights and 1-D bias")
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ContractError(
                f"bias length {self.bias.shape[0]} != weight cols {self.weights.shape[1]}"
            )

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> LayerParams:
        return LayerParams(self.weights.copy(), self.bias.copy())

    def parts(self) -> tuple[tuple[str, np.ndarray], tuple[str, np.ndarray]]:
        return ("weights", self.weights), ("bias", self.bias)


@dataclass
class ModelParams:
    layers: list[LayerParams]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("a model needs at least one layer")
        for n in range(len(self.layers) - 1):
            cols = self.layers[n].weights.shape[1]
            rows = self.layers[n + 1].weights.shape[0]
            if cols != rows:
                raise ContractError(f"layer {n} outputs {cols} but layer {n + 1} expects {rows}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].weights.shape[0]] + [l.weights.shape[1] for l in self.layers]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    @property
    def nbytes(self) -> int:
        return 4 * self.n_params

    def copy(self) -> ModelParams:
        return ModelParams([l.copy() for l in self.layers])

    def same_shape(self, other: ModelParams) -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.weights.shape == b.weights.shape and a.bias.shape == b.bias.shape
            for a, b in zip(self.layers, other.layers)
        )

    def tensors(self) -> Iterator[tuple[int, str, np.ndarray]]:
        for n, layer in enumerate(self.layers):
            for part, t in layer.parts():
                yield n, part, t


@dataclass(frozen=True)
class BitLocation:
    store: str
    elem: int
    bit: int


class Checksum(NamedTuple):
    int_sum: int
    value_sum: float


class BitCompare(NamedTuple):
    equal: bool
    first_mismatch: int | None


def flip_bit(t: np.ndarray, elem_index: int, bit_index: int) -> np.ndarray:
    w = words(t)
    if not 0 <= elem_index < w.size:
        raise AddressingError(f"element {elem_index} out of range for {w.size} elements")
    if not 0 <= bit_index <= 31:
        raise AddressingError(f"bit {bit_index} out of range [0, 31]")
    w[elem_index] ^= np.uint32(1 << bit_index)
    return t


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")


def bit_equal(a: np.ndarray, b: np.ndarray) -> BitCompare:
    _check_same_shape(a, b)
    i = kernels.first_mismatch(words(a), words(b))
    return BitCompare(i < 0, None if i < 0 else int(i))


def tensor_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    with np.errstate(all="ignore"):
        return np.add(a, b, dtype=np.float32)


def tensor_sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    with np.errstate(all="ignore"):
        return np.subtract(a, b, dtype=np.float32)


def checksum(t: np.ndarray, start: Checksum = Checksum(0, 0.0)) -> Checksum:
    """Bit-pattern sum (mod 2**64) and sequential float64 value sum.

    ``start`` lets several tensors be folded into one checksum in order.
    """
    i, v = kernels.checksum(words(t), _flat(t), start.int_sum, start.value_sum)
    return Checksum(int(i), float(v))


def layer_checksum(layer: LayerParams) -> Checksum:
    # weights then bias, the same order they are stored on disk
    return checksum(layer.bias, checksum(layer.weights))


# ---------------------------------------------------------------- NAPM I/O

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated file: need {n} bytes for {what}, {len(self.buf) - self.pos} left",
                self.pos,
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, count: int, what: str) -> np.ndarray:
        if count * 4 > len(self.buf) - self.pos:
            raise FormatError(
                f"{what} declares {count} floats but only {len(self.buf) - self.pos} bytes remain",
                self.pos,
            )
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<u4").astype(np.uint32).view(np.float32)

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def _tensor_bytes(t: np.ndarray) -> bytes:
    return words(t).astype("<u4").tobytes()


def encode_layer(layer: LayerParams) -> bytes:
    rows, cols = layer.weights.shape
    head = struct.pack("<BIII", KIND_DENSE, rows, cols, layer.bias.size)
    return head + _tensor_bytes(layer.weights) + _tensor_bytes(layer.bias)


def decode_layer(r: _Reader, label: str) -> LayerParams:
    start = r.pos
    kind, rows, cols, bias_len = r.unpack("<BIII", f"{label} header")
    if kind != KIND_DENSE:
        raise FormatError(f"{label}: unsupported layer kind {kind}", start)
    if bias_len != cols:
        raise FormatError(f"{label}: bias length {bias_len} != cols {cols}", start)
    w = r.tensor(rows * cols, f"{label} weights").reshape(rows, cols)
    b = r.tensor(bias_len, f"{label} bias")
    return LayerParams(w, b)


def encode_model(m: ModelParams) -> bytes:
    out = [NAPM_MAGIC, struct.pack("<HH", NAPM_VERSION, m.n_layers)]
    out.extend(encode_layer(l) for l in m.layers)
    return b"".join(out)


def decode_model(buf: bytes) -> ModelParams:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != NAPM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NAPM_MAGIC!r}", 0)
    version, n_layers = r.unpack("<HH", "header")
    if version != NAPM_VERSION:
        raise FormatError(f"unsupported NAPM version {version}", 4)
    if n_layers < 1:
        raise FormatError("model has no layers", 6)
    layers = [decode_layer(r, f"layer {n}") for n in range(n_layers)]
    if not r.at_end():
        raise FormatError("trailing bytes after last layer", r.pos)
    try:
        return ModelParams(layers)
    except ContractError as e:
        raise FormatError(str(e)) from e


def save_model(m: ModelParams, path) -> None:
    Path(path).write_bytes(encode_model(m))


def load_model(path) -> ModelParams:
    return decode_model(Path(path).read_bytes())
