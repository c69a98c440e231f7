"""Chunk codecs that shrink the bytes the fetch side has to move.

``quant8`` is a real per-chunk min/max affine quantizer over fp16 values.
``factor:<r>`` is NOT a codec: it stands in for an external compressor
(e.g. CacheGen at r = 8.6) purely as a size reduction.  Its decode only
restores the length; the values it returns carry no meaning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = ["Codec", "CodecError", "IDENTITY", "QUANT8", "get_codec"]

_SCALE_BYTES = 4  # two fp16 scale values: min, max


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Codec:
    kind: str
    ratio: Fraction | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "quant8", "factor"):
            raise CodecError(f"unknown codec kind {self.kind!r}")
        if self.kind == "factor" and (self.ratio is None or self.ratio <= 1):
            raise CodecError("factor codec needs a reduction ratio > 1")

    @property
    def id(self) -> str:
        if self.kind == "factor":
            return f"factor:{float(self.ratio):g}"
        return self.kind

    def __str__(self) -> str:
        return self.id

    def encoded_size(self, n: int) -> int:
        if self.kind == "identity":
            return n
        if self.kind == "quant8":
            if n % 2:
                raise CodecError("quant8 payload length must be even")
            return n // 2 + _SCALE_BYTES
        return math.ceil(Fraction(n) / self.ratio)

    def encode(self, payload: bytes) -> bytes:
        if self.kind == "identity":
            return bytes(payload)
        if self.kind == "quant8":
            return _quant8_encode(payload)
        # Deterministic stand-in: keep a strided sample of the input.
        n = len(payload)
        out_len = self.encoded_size(n)
        if n == 0:
            return b""
        src = np.frombuffer(payload, dtype=np.uint8)
        idx = (np.arange(out_len, dtype=np.int64) * n) // out_len
        return src[idx].tobytes()

    def decode(self, encoded: bytes, original_len: int) -> bytes:
        expected = self.encoded_size(original_len)
        if len(encoded) != expected:
            raise CodecError(
                f"{self.id}: encoded length {len(encoded)} does not match {expected} "
                f"for original length {original_len}"
            )
        if self.kind == "identity":
            return bytes(encoded)
        if self.kind == "quant8":
            return _quant8_decode(encoded, original_len)
        if original_len == 0:
            return b""
        reps = -(-original_len // len(encoded))
        return (bytes(encoded) * reps)[:original_len]


IDENTITY = Codec("identity")
QUANT8 = Codec("quant8")


def get_codec(spec: str | Codec) -> Codec:
    """Parse ``identity``, ``quant8`` or ``factor:<ratio>`` (also ``cachegen``)."""
    if isinstance(spec, Codec):
        return spec
    s = spec.strip().lower()
    if s in ("identity", "none", "raw"):
        return IDENTITY
    if s in ("quant8", "int8", "q8"):
        return QUANT8
    if s == "cachegen":
        return Codec("factor", Fraction("8.6"))
    if s.startswith("factor"):
        _, _, r = s.partition(":")
        if not r:
            _, _, r = s.partition("(")
            r = r.rstrip(")")
        try:
            return Codec("factor", Fraction(r.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise CodecError(f"bad factor ratio in {spec!r}") from exc
    raise CodecError(f"unknown codec {spec!r}")


def _quant8_encode(payload: bytes) -> bytes:
    if len(payload) % 2:
        raise CodecError("quant8 payload length must be even")
    x = np.frombuffer(payload, dtype="<f2")
    if x.size == 0:
        return np.zeros(2, dtype="<f2").tobytes()
    if not np.all(np.isfinite(x)):
        raise CodecError("quant8 input must be finite")
    lo, hi = x.min(), x.max()
    span = float(hi) - float(lo)
    if span == 0.0:
        levels = np.zeros(x.size, dtype=np.uint8)
    else:
        scaled = (x.astype(np.float64) - float(lo)) * (255.0 / span)
        levels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    header = np.array([lo, hi], dtype="<f2").tobytes()
    return header + levels.tobytes()


def _quant8_decode(encoded: bytes, original_len: int) -> bytes:
    lo, hi = np.frombuffer(encoded[:_SCALE_BYTES], dtype="<f2").astype(np.float64)
    levels = np.frombuffer(encoded[_SCALE_BYTES:], dtype=np.uint8)
    step = (hi - lo) / 255.0
    out = (lo + levels.astype(np.float64) * step).astype("<f2")
    return out.tobytes()
