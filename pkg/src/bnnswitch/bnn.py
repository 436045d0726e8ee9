"""Two-layer binary neural network: packed fast path, scalar reference, file format.

A model scores a d-bit payload x (bits read as +1/-1) with h hidden units:

    pre_n = dot(w1_row_n, x) + b1[n]         w1 rows are +1/-1, packed one
                                             bit per weight (bit 1 -> +1)
    h_n   = +1 if pre_n >= 0 else -1         sign(0) = +1
    y     = sum_n w2[n] * h_n + b2           accumulated in float64,
                                             ascending n

The fast path never unpacks: dot(w_row, x) = 2*matches - d where matches
is the popcount of XNOR(w_row, x), so h_n = +1 exactly when the XOR
mismatch count is at most floor((d + b1[n]) / 2). The reference path
unpacks to explicit +1/-1 vectors and multiplies bit by bit; the two are
required to agree bit-exactly, including the output accumulation order.

Weight files carry no header. Layout for declared (d, h), little-endian:
packed w1 rows 0..h-1, b1 as h signed bytes, w2 as h float32, b2 as one
float32 -- h*d/8 + h + 4*h + 4 bytes total (32932 for d=8192, h=32).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .packet_format import PAYLOAD_BITS, PayloadView

DEFAULT_INPUT_BITS = PAYLOAD_BITS
DEFAULT_HIDDEN = 32

Score = float


class DimensionMismatch(ValueError):
    """Payload or weight dimensions disagree."""


class SizeMismatch(ValueError):
    """Weight file length inconsistent with the declared (d, h)."""


def serialized_size(d: int, h: int) -> int:
    """On-disk size of one model: packed w1 + b1 bytes + w2 floats + b2."""
    return h * (d // 8) + h + 4 * h + 4


def _pack_rows_to_words(packed_rows: np.ndarray) -> np.ndarray:
    """View (h, d/8) packed uint8 rows as uint64 words, zero-padding each
    row to a word boundary so XOR popcounts see no phantom mismatches."""
    h, row_bytes = packed_rows.shape
    pad = (-row_bytes) % 8
    if pad:
        padded = np.zeros((h, row_bytes + pad), dtype=np.uint8)
        padded[:, :row_bytes] = packed_rows
        packed_rows = padded
    return np.ascontiguousarray(packed_rows).view(np.uint64)


class ModelWeights:
    """One resident weight set. Immutable after construction; inference
    only reads, so a single instance is safe under concurrent use."""

    __slots__ = ("d", "h", "w1_packed", "b1", "w2", "b2",
                 "_w_words", "_mism_thr", "_w2_f64", "_b2_f64")

    def __init__(self, d: int, h: int, w1_packed, b1, w2, b2):
        if d <= 0 or h <= 0:
            raise DimensionMismatch(f"d={d}, h={h} must be positive")
        if d % 8 != 0:
            raise DimensionMismatch(f"d={d} must be a multiple of 8")
        w1_packed = np.ascontiguousarray(w1_packed, dtype=np.uint8)
        if w1_packed.shape != (h, d // 8):
            raise DimensionMismatch(
                f"w1_packed shape {w1_packed.shape}, expected {(h, d // 8)}")
        b1 = np.ascontiguousarray(b1, dtype=np.int8)
        if b1.shape != (h,):
            raise DimensionMismatch(f"b1 shape {b1.shape}, expected ({h},)")
        w2 = np.ascontiguousarray(w2, dtype=np.float32)
        if w2.shape != (h,):
            raise DimensionMismatch(f"w2 shape {w2.shape}, expected ({h},)")
        b2 = np.float32(b2)
        if not np.all(np.isfinite(w2)) or not np.isfinite(b2):
            raise ValueError("w2/b2 must be finite")
        self.d = d
        self.h = h
        self.w1_packed = w1_packed
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        # runtime views for the packed path
        self._w_words = _pack_rows_to_words(w1_packed)
        # h_n = +1  <=>  mismatches <= floor((d + b1[n]) / 2)
        self._mism_thr = (d + b1.astype(np.int64)) // 2
        self._w2_f64 = w2.astype(np.float64)
        self._b2_f64 = float(b2)
        for arr in (self.w1_packed, self.b1, self.w2,
                    self._w_words, self._mism_thr, self._w2_f64):
            arr.setflags(write=False)

    @property
    def serialized_size(self) -> int:
        return serialized_size(self.d, self.h)

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return (self.d == other.d and self.h == other.h
                and np.array_equal(self.w1_packed, other.w1_packed)
                and np.array_equal(self.b1, other.b1)
                and self.w2.tobytes() == other.w2.tobytes()
                and np.float32(self.b2).tobytes() == np.float32(other.b2).tobytes())

    def __repr__(self):
        return f"ModelWeights(d={self.d}, h={self.h})"


# ---------------------------------------------------------------------------
# packed scoring kernels

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def _score_words_numpy(w_words, x_words, mism_thr, w2_f64, b2_f64):
    """Vectorized fallback: XOR + popcount per row, then the ordered
    float64 output accumulation via cumsum (sequential by definition)."""
    mism = np.bitwise_count(w_words ^ x_words).sum(axis=1, dtype=np.int64)
    signed = np.where(mism <= mism_thr, w2_f64, -w2_f64)
    return float(np.cumsum(signed)[-1]) + b2_f64


try:
    from numba import njit as _njit

    @_njit(cache=True)
    def _score_words_numba(w_words, x_words, mism_thr, w2_f64, b2_f64):  # pragma: no cover - jitted
        acc = 0.0
        for n in range(w_words.shape[0]):
            mism = 0
            for c in range(w_words.shape[1]):
                v = w_words[n, c] ^ x_words[c]
                v = v - ((v >> np.uint64(1)) & _M1)
                v = (v & _M2) + ((v >> np.uint64(2)) & _M2)
                v = (v + (v >> np.uint64(4))) & _M4
                mism += int((v * _H01) >> np.uint64(56))
            if mism <= mism_thr[n]:
                acc += w2_f64[n]
            else:
                acc -= w2_f64[n]
        return acc + b2_f64

    _score_words = _score_words_numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _score_words = _score_words_numpy
    HAVE_NUMBA = False


def infer_fast(model: ModelWeights, payload: PayloadView) -> Score:
    """Score a payload on the packed path (XOR + popcount per hidden row).

    Bit-identical to infer_reference on the same inputs.
    """
    if payload.nbits != model.d:
        raise DimensionMismatch(
            f"payload has {payload.nbits} bits, model expects {model.d}")
    return _score_words(model._w_words, payload.words(),
                        model._mism_thr, model._w2_f64, model._b2_f64)


def infer_reference(model: ModelWeights, payload: PayloadView) -> Score:
    """Scalar oracle: unpack weights and payload to explicit +1/-1 vectors,
    multiply bit by bit, accumulate in integers, then run the float64
    output sum in ascending unit order. No packed operations."""
    if payload.nbits != model.d:
        raise DimensionMismatch(
            f"payload has {payload.nbits} bits, model expects {model.d}")
    x_signs = payload.signs().astype(np.int64)
    d = model.d
    acc = 0.0
    for n in range(model.h):
        row_bits = np.unpackbits(model.w1_packed[n], bitorder="little")
        w_signs = row_bits.astype(np.int64) * 2 - 1
        dot = int((w_signs * x_signs).sum())
        pre = dot + int(model.b1[n])
        assert -d + int(model.b1[n]) <= pre <= d + int(model.b1[n])
        h_n = 1.0 if pre >= 0 else -1.0
        acc += float(model._w2_f64[n]) * h_n
    y = acc + model._b2_f64
    assert math.isfinite(y)
    return y


# ---------------------------------------------------------------------------
# weight file format

def save_model(model: ModelWeights, path_or_file) -> None:
    """Write the headerless weight file (see module docstring for layout)."""
    if hasattr(path_or_file, "write"):
        _write_model(path_or_file, model)
    else:
        with open(path_or_file, "wb") as fh:
            _write_model(fh, model)


def _write_model(fh, model: ModelWeights) -> None:
    fh.write(model.w1_packed.tobytes())
    fh.write(model.b1.tobytes())
    fh.write(model.w2.astype("<f4").tobytes())
    fh.write(struct.pack("<f", float(model.b2)))


def model_to_bytes(model: ModelWeights) -> bytes:
    buf = io.BytesIO()
    _write_model(buf, model)
    return buf.getvalue()


def load_model(path_or_file, *, d: int = DEFAULT_INPUT_BITS,
               h: int = DEFAULT_HIDDEN) -> ModelWeights:
    """Load a weight file for the declared (d, h); the format is headerless
    so the dimensions come from configuration."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    return model_from_bytes(data, d=d, h=h)


def model_from_bytes(data: bytes, *, d: int = DEFAULT_INPUT_BITS,
                     h: int = DEFAULT_HIDDEN) -> ModelWeights:
    expected = serialized_size(d, h)
    if len(data) != expected:
        raise SizeMismatch(
            f"file is {len(data)} bytes, (d={d}, h={h}) needs {expected}")
    row_bytes = d // 8
    pos = 0
    w1 = np.frombuffer(data, dtype=np.uint8, count=h * row_bytes).reshape(h, row_bytes)
    pos += h * row_bytes
    b1 = np.frombuffer(data, dtype=np.int8, count=h, offset=pos)
    pos += h
    w2 = np.frombuffer(data, dtype="<f4", count=h, offset=pos)
    pos += 4 * h
    (b2,) = struct.unpack_from("<f", data, pos)
    return ModelWeights(d, h, w1.copy(), b1.copy(), w2.copy(), b2)


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Structural per-packet operation counts for harness reporting."""
    selection_ops: int
    hidden_ops: int
    output_ops: int


def cost_model(model: ModelWeights) -> CostModel:
    """One slot lookup, one d*h binary hidden pass, one h output pass."""
    return CostModel(selection_ops=1,
                     hidden_ops=model.d * model.h,
                     output_ops=model.h)


def random_model(rng: np.random.Generator, *, d: int = DEFAULT_INPUT_BITS,
                 h: int = DEFAULT_HIDDEN) -> ModelWeights:
    """Uniformly random weights, mainly for tests and benchmarks."""
    return ModelWeights(
        d, h,
        rng.integers(0, 256, size=(h, d // 8), dtype=np.uint8),
        rng.integers(-128, 128, size=h, dtype=np.int64).astype(np.int8),
        rng.normal(scale=1.0, size=h).astype(np.float32),
        float(rng.normal(scale=0.5)))
