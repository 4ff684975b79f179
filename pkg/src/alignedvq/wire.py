"""Payload encoding of quantized indices and the the size/rate calculators.

Payload layout (all multi-byte integers little-endian):

    magic   "AVQP"                     4 bytes
    version u8                         = 1
    B, N    u32, u32                   batch size, tokens
    n, g, m u8, u8, u8                 stages, groups, bits per index
    hashes  n*g x u64                  codebook content hashes, stage-major
    body    ceil(B*N*n*g*m / 8) bytes  indices packed MSB-first in
                                       (batch, stage, token, group) order,
                                       zero-padded to a byte boundary

Size arithmetic uses exact rational numbers; the "theoretical" figures follow
the headerless bits-only convention (KB = 1024 bytes) so reference size
tables can be matched digit for digit, while on-wire numbers include padding
and the header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .vq import Codebook, VQConfig, dequantize_indices

MAGIC = b"AVQP"
VERSION = 1
_FIXED_HEADER = struct.Struct("<4sBIIBBB")


class WireError(ValueError):
    """Malformed payload (bad magic/version, truncation, overflow)."""


class CodebookDesyncError(WireError):
    """Payload hashes disagree with the decoder's codebooks."""


def pack_indices(values: np.ndarray, bits: int) -> bytes:
    """Pack integers into an MSB-first bit stream, zero-padded to a byte."""
    values = np.asarray(values, dtype=np.uint64).ravel()
    if bits < 1 or bits > 16:
        raise WireError(f"index width must be 1..16 bits, got {bits}")
    if values.size and int(values.max()) >= (1 << bits):
        raise WireError(f"index overflow: {int(values.max())} needs more than {bits} bits")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint64)
    bit_rows = (values[:, None] >> shifts[None, :]) & np.uint64(1)
    return np.packbits(bit_rows.astype(np.uint8).ravel()).tobytes()


def unpack_indices(body: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of pack_indices; rejects truncated bodies and non-zero padding."""
    need = (count * bits + 7) // 8
    if len(body) < need:
        raise WireError(f"truncated body: {len(body)} bytes, need {need}")
    if len(body) > need:
        raise WireError(f"oversized body: {len(body)} bytes, expected {need}")
    flat = np.unpackbits(np.frombuffer(body, dtype=np.uint8))
    used = count * bits
    if np.any(flat[used:]):
        raise WireError("non-zero padding bits")
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.uint64))
    return (flat[:used].reshape(count, bits).astype(np.uint64) * weights).sum(axis=1).astype(np.int64)


def encode_payload(indices: np.ndarray, m: int, hashes: list[int]) -> bytes:
    """Serialize an index grid [B, N, n, g] into payload bytes."""
    indices = np.asarray(indices)
    if indices.ndim != 4:
        raise WireError(f"index grid must be [B, N, n, g], got shape {indices.shape}")
    b, n_tok, n, g = indices.shape
    if len(hashes) != n * g:
        raise WireError(f"expected {n * g} codebook hashes, got {len(hashes)}")
    header = _FIXED_HEADER.pack(MAGIC, VERSION, b, n_tok, n, g, m)
    header += struct.pack(f"<{n * g}Q", *hashes)
    # transmission order: batch, stage, token, group
    ordered = np.transpose(indices, (0, 2, 1, 3))
    return header + pack_indices(ordered, m)


def parse_header(payload: bytes):
    if len(payload) < _FIXED_HEADER.size:
        raise WireError("payload shorter than fixed header")
    magic, version, b, n_tok, n, g, m = _FIXED_HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    hash_end = _FIXED_HEADER.size + 8 * n * g
    if len(payload) < hash_end:
        raise WireError("payload truncated inside hash list")
    hashes = list(struct.unpack_from(f"<{n * g}Q", payload, _FIXED_HEADER.size))
    return (b, n_tok, n, g, m), hashes, payload[hash_end:]


def decode_indices(payload: bytes, expected_hashes: list[int] | None = None) -> tuple[np.ndarray, int]:
    """Recover the index grid. Hash validation happens before any body decode
    so a codebook desync can never produce partial output."""
    (b, n_tok, n, g, m), hashes, body = parse_header(payload)
    if expected_hashes is not None:
        if len(expected_hashes) != len(hashes):
            raise CodebookDesyncError(
                f"codebook count mismatch: payload {len(hashes)}, local {len(expected_hashes)}")
        for pos, (got, want) in enumerate(zip(hashes, expected_hashes)):
            if got != want:
                stage, group = divmod(pos, g)
                raise CodebookDesyncError(
                    f"codebook desync at stage {stage}, group {group}: "
                    f"payload {got:#018x} != local {want:#018x}")
    ordered = unpack_indices(body, b * n_tok * n * g, m).reshape(b, n, n_tok, g)
    return np.transpose(ordered, (0, 2, 1, 3)), m


def decode_payload(payload: bytes, config: VQConfig, codebooks: list[Codebook]) -> np.ndarray:
    """Validate, recover indices, and dequantize to [B, N, C] features."""
    grid, m = decode_indices(payload, expected_hashes=[cb.content_hash for cb in codebooks])
    if m != config.index_bits:
        raise WireError(f"payload index width {m} != config {config.index_bits}")
    shape = grid.shape
    if shape[2] != config.num_codebooks or shape[3] != config.num_groups:
        raise WireError(f"payload grid {shape} does not match config")
    return dequantize_indices(grid, config, codebooks)


def header_bytes(n: int, g: int) -> int:
    return _FIXED_HEADER.size + 8 * n * g


# ---------------------------------------------------------------------------
# size and compression-rate arithmetic (exact rationals)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SizeModel:
    """Inputs of the payload arithmetic. `precision_bits` is the bit width of
    one raw feature value (distinct from the codebook entry count, which only
    enters through the index width m = log2(entries))."""

    channels: int            # C
    precision_bits: int      # bits per raw value
    num_codebooks: int = 1   # n
    num_groups: int = 1      # g
    index_bits: int = 12     # m
    tokens: int = 577        # N
    batch: int = 1           # B

    def __post_init__(self):
        for name in ("channels", "precision_bits", "num_codebooks", "num_groups",
                     "index_bits", "tokens", "batch"):
            if getattr(self, name) < 1:
                raise WireError(f"{name} must be positive")
        if self.index_bits > 16:
            raise WireError("index width above 16 bits is not supported")


def payload_bits(model: SizeModel) -> int:
    """Bits of index data per batch: B * N * n * g * m."""
    return model.batch * model.tokens * model.num_codebooks * model.num_groups * model.index_bits


def payload_size(model: SizeModel) -> dict:
    """Theoretical KB (headerless, KB = 1024 bytes) and honest on-wire bytes."""
    bits = payload_bits(model)
    return {
        "theoretical_kb": Fraction(bits, 8 * 1024),
        "on_wire_bytes": header_bytes(model.num_codebooks, model.num_groups) + (bits + 7) // 8,
    }


def raw_feature_kb(model: SizeModel) -> Fraction:
    """KB of the uncompressed feature block: B * N * C * precision bits."""
    return Fraction(model.batch * model.tokens * model.channels * model.precision_bits, 8 * 1024)


def raw_image_kb(height: int, width: int, channels: int, bytes_per_value: int = 1) -> Fraction:
    return Fraction(height * width * channels * bytes_per_value, 1024)


def compression_rate(model: SizeModel) -> Fraction:
    """Raw bits over payload bits: C * precision / (n * g * m)."""
    return Fraction(model.channels * model.precision_bits,
                    model.num_codebooks * model.num_groups * model.index_bits)
