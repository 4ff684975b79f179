from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignedvq import vq, wire

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name: str) -> bytes:
    text = (FIXTURES / name).read_text()
    hexdigits = "".join(line.split("#")[0] for line in text.splitlines())
    return bytes.fromhex("".join(hexdigits.split()))


def grid(values, b, n_tok, n, g):
    return np.asarray(values, dtype=np.int64).reshape(b, n_tok, n, g)


# ---------------------------------------------------------------------------
# golden fixtures
# ---------------------------------------------------------------------------

def test_single_byte_index_matches_golden_bytes():
    payload = wire.encode_payload(grid([0xAB], 1, 1, 1, 1), 8, [0x1122334455667788])
    assert payload == load_fixture("payload_single_byte_index.hex")
    assert payload[-1:] == b"\xab"


def test_two_token_12bit_matches_golden_bytes():
    payload = wire.encode_payload(grid([0xABC, 0x123], 1, 2, 1, 1), 12,
                                  [0xDEADBEEFCAFEF00D])
    assert payload == load_fixture("payload_two_tokens_12bit.hex")
    assert payload[-3:] == bytes.fromhex("ABC123")


def test_two_stage_transmission_order_matches_golden_bytes():
    g = np.zeros((1, 2, 2, 1), dtype=np.int64)
    g[0, 0, 0, 0], g[0, 0, 1, 0] = 1, 2
    g[0, 1, 0, 0], g[0, 1, 1, 0] = 3, 4
    payload = wire.encode_payload(g, 4, [0x0101010101010101, 0x0202020202020202])
    assert payload == load_fixture("payload_two_stage_4bit.hex")
    assert payload[-2:] == bytes.fromhex("1324")


@pytest.mark.parametrize("name,hashes", [
    ("payload_single_byte_index.hex", [0x1122334455667788]),
    ("payload_two_tokens_12bit.hex", [0xDEADBEEFCAFEF00D]),
    ("payload_two_stage_4bit.hex", [0x0101010101010101, 0x0202020202020202]),
])
def test_fixtures_decode_and_reencode_identically(name, hashes):
    payload = load_fixture(name)
    indices, m = wire.decode_indices(payload, expected_hashes=hashes)
    assert wire.encode_payload(indices, m, hashes) == payload


# ---------------------------------------------------------------------------
# round trips
# ---------------------------------------------------------------------------

def test_thousand_random_grids_round_trip_exactly():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b = int(rng.integers(1, 3))
        n_tok = int(rng.integers(1, 9))
        n = int(rng.integers(1, 4))
        g = int(rng.integers(1, 4))
        m = int(rng.integers(1, 17))
        values = rng.integers(0, 1 << m, size=(b, n_tok, n, g))
        hashes = [int(h) for h in rng.integers(0, 2 ** 63, size=n * g)]
        payload = wire.encode_payload(values, m, hashes)
        decoded, m2 = wire.decode_indices(payload, expected_hashes=hashes)
        assert m2 == m
        np.testing.assert_array_equal(decoded, values)
        assert wire.encode_payload(decoded, m2, hashes) == payload


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.integers(1, 16), st.integers(1, 40), st.integers(0, 2 ** 32))
def test_pack_unpack_property(bits, count, seed):
    rng = np.random.default_rng(seed)
    values = rng.integers(0, 1 << bits, size=count)
    body = wire.pack_indices(values, bits)
    assert len(body) == (count * bits + 7) // 8
    np.testing.assert_array_equal(wire.unpack_indices(body, count, bits), values)


# ---------------------------------------------------------------------------
# validation & corruption
# ---------------------------------------------------------------------------

def test_corrupt_magic_is_rejected():
    payload = bytearray(wire.encode_payload(grid([5], 1, 1, 1, 1), 8, [1]))
    payload[0] ^= 0xFF
    with pytest.raises(wire.WireError, match="magic"):
        wire.decode_indices(bytes(payload))


def test_wrong_version_is_rejected():
    payload = bytearray(wire.encode_payload(grid([5], 1, 1, 1, 1), 8, [1]))
    payload[4] = 9
    with pytest.raises(wire.WireError, match="version"):
        wire.decode_indices(bytes(payload))


def test_hash_mismatch_names_the_offending_stage():
    g = np.zeros((1, 2, 2, 2), dtype=np.int64)
    hashes = [10, 11, 12, 13]
    payload = wire.encode_payload(g, 4, hashes)
    local = [10, 11, 99, 13]
    with pytest.raises(wire.CodebookDesyncError, match="stage 1, group 0"):
        wire.decode_indices(payload, expected_hashes=local)


def test_truncated_body_is_rejected():
    payload = wire.encode_payload(grid([1, 2, 3, 4], 1, 4, 1, 1), 8, [7])
    with pytest.raises(wire.WireError, match="body"):
        wire.decode_indices(payload[:-1])


def test_index_overflow_rejected_at_encode():
    with pytest.raises(wire.WireError, match="overflow"):
        wire.encode_payload(grid([256], 1, 1, 1, 1), 8, [1])


def test_single_bit_corruption_changes_an_index_or_errors():
    rng = np.random.default_rng(5)
    values = rng.integers(0, 1 << 11, size=(1, 7, 1, 1))
    hashes = [123]
    payload = wire.encode_payload(values, 11, hashes)
    body_start = wire.header_bytes(1, 1)
    for byte_pos in range(body_start, len(payload)):
        for bit in range(8):
            corrupt = bytearray(payload)
            corrupt[byte_pos] ^= 1 << bit
            try:
                decoded, _ = wire.decode_indices(bytes(corrupt), expected_hashes=hashes)
            except wire.WireError:
                continue  # padding-bit corruption is detected and rejected
            assert not np.array_equal(decoded, values)


def test_hash_validated_before_body():
    payload = wire.encode_payload(grid([1], 1, 1, 1, 1), 8, [42])
    truncated = payload[:-1]  # body missing entirely
    with pytest.raises(wire.CodebookDesyncError):
        wire.decode_indices(truncated, expected_hashes=[43])


def test_decode_payload_dequantizes_via_codebooks():
    rng = np.random.default_rng(9)
    cfg = vq.VQConfig(2, 2, 8, 6)
    cbs = [vq.Codebook(rng.normal(size=(8, 3)).astype(np.float32))
           for _ in range(cfg.total_codebooks)]
    feats = rng.normal(size=(2, 4, 6)).astype(np.float32)
    g, deq = vq.quantize(feats, cfg, cbs)
    payload = wire.encode_payload(g, cfg.index_bits, [cb.content_hash for cb in cbs])
    out = wire.decode_payload(payload, cfg, cbs)
    assert out.tobytes() == deq.tobytes()
    with pytest.raises(wire.CodebookDesyncError):
        wrong = [vq.Codebook(rng.normal(size=(8, 3)).astype(np.float32))
                 for _ in range(cfg.total_codebooks)]
        wire.decode_payload(payload, cfg, wrong)


# ---------------------------------------------------------------------------
# size arithmetic
# ---------------------------------------------------------------------------

def vit_large_model(**kw):
    defaults = dict(channels=1024, precision_bits=16, index_bits=12, tokens=577, batch=1)
    defaults.update(kw)
    return wire.SizeModel(**defaults)


def test_vq_payload_of_reference_configuration():
    size = wire.payload_size(vit_large_model())
    assert size["theoretical_kb"] == Fraction(577 * 12, 8 * 1024) == Fraction(1731, 2048)
    assert round(float(size["theoretical_kb"]), 3) == 0.845
    assert size["on_wire_bytes"] == wire.header_bytes(1, 1) + 866


def test_one_bit_feature_quantization_size():
    kb = wire.raw_feature_kb(vit_large_model(precision_bits=1))
    assert kb == Fraction(577, 8)
    assert float(kb) == 72.125


def test_raw_feature_block_size():
    assert wire.raw_feature_kb(vit_large_model()) == 1154


def test_single_channel_bottleneck_size():
    kb = wire.raw_feature_kb(vit_large_model(channels=1))
    assert round(float(kb), 3) == 1.127


def test_raw_image_size():
    assert wire.raw_image_kb(336, 336, 3) == Fraction(338688, 1024) == Fraction(1323, 4)
    assert float(wire.raw_image_kb(336, 336, 3)) == 330.75


def test_compression_rate_of_reference_configuration():
    rate = wire.compression_rate(vit_large_model())
    assert rate == Fraction(4096, 3)
    assert round(float(rate), 2) == 1365.33


def test_rate_divides_by_stage_and_group_count():
    base = wire.compression_rate(vit_large_model())
    combined = wire.compression_rate(vit_large_model(num_codebooks=3, num_groups=8))
    assert combined == base / 24


def test_degenerate_rate_of_one():
    assert wire.compression_rate(wire.SizeModel(channels=1, precision_bits=16,
                                                index_bits=16)) == 1


def test_payload_scaling_is_exactly_n_times_g():
    base = wire.payload_bits(vit_large_model())
    scaled = wire.payload_bits(vit_large_model(num_codebooks=3, num_groups=8))
    assert scaled == 24 * base


def test_rate_consistency_with_raw_over_payload():
    for n, g, m in [(1, 1, 12), (3, 8, 12), (2, 4, 7)]:
        model = vit_large_model(num_codebooks=n, num_groups=g, index_bits=m)
        raw_bits = model.batch * model.tokens * model.channels * model.precision_bits
        assert Fraction(raw_bits, wire.payload_bits(model)) == wire.compression_rate(model)


def test_size_model_validation():
    with pytest.raises(wire.WireError):
        wire.SizeModel(channels=0, precision_bits=16)
    with pytest.raises(wire.WireError):
        wire.SizeModel(channels=1, precision_bits=16, index_bits=17)
