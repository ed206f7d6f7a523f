import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flearn.arith import (
    ForgettingRate,
    TaskVector,
    apply_forgetting,
    checkpoint_kind,
    crc64,
    decode_checkpoint,
    encode_checkpoint,
    extract_delta,
    layer_distances,
    load_checkpoint,
    save_checkpoint,
    tensor_family,
)
from flearn.errors import ConfigError, FormatError
from flearn.lora import LoraConfig, init_adapters
from flearn.model import ModelConfig, ParamSet, init_model, param_shapes, zeros_like_layout

# d_model = 2 makes every norm gain a length-2 vector
TWO = ModelConfig(vocab_size=8, d_model=2, n_layers=1, n_heads=1, d_ff=4, max_seq_len=4)
NORM = "layers.0.attn_norm"


def with_tensor(cfg, name, values, base=None):
    t = dict(base.items()) if base is not None else zeros_like_layout(cfg)
    t[name] = np.asarray(values, np.float32)
    return ParamSet(cfg, t)


def test_delta_worked_example():
    theta = with_tensor(TWO, NORM, [1, 2])
    ft = with_tensor(TWO, NORM, [3, 0])
    delta = extract_delta(ft, theta)
    np.testing.assert_array_equal(delta[NORM], [2, -2])
    assert not any(delta[n].any() for n in delta if n != NORM)


def test_forgetting_worked_example():
    theta = with_tensor(TWO, NORM, [1, 2])
    delta = extract_delta(with_tensor(TWO, NORM, [3, 0]), theta)
    np.testing.assert_array_equal(apply_forgetting(theta, delta, ForgettingRate(0.5))[NORM], [0, 3])


def test_self_delta_is_zero():
    P = init_model(TWO)
    assert not any(v.any() for v in extract_delta(P, P).values())


def _pair(seed=0):
    cfg = ModelConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=6, seed=seed)
    theta = init_model(cfg)
    rng = np.random.default_rng(seed + 100)
    ft = ParamSet(cfg, {n: (v + rng.normal(0, 0.05, v.shape)).astype(np.float32) for n, v in theta.items()})
    return theta, ft


def test_lambda_zero_is_bit_identity():
    theta, ft = _pair()
    out = apply_forgetting(theta, extract_delta(ft, theta), ForgettingRate(0.0))
    assert out.bit_equal(theta)
    neg = with_tensor(TWO, NORM, [-0.0, 1.0])
    d = TaskVector(TWO, {n: np.full(s, -1.0, np.float32) for n, s in param_shapes(TWO).items()})
    assert apply_forgetting(neg, d, 0.0).bit_equal(neg)


def test_negative_one_round_trip():
    theta, ft = _pair(1)
    back = apply_forgetting(theta, extract_delta(ft, theta), -1.0)
    for n in ft:
        ref = ft[n].astype(np.float64)
        assert np.abs(back[n] - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1e-30), n


def test_lambda_one_gives_reflection():
    theta, ft = _pair(2)
    out = apply_forgetting(theta, extract_delta(ft, theta), ForgettingRate(1.0))
    for n in theta:
        expect = 2 * theta[n].astype(np.float64) - ft[n].astype(np.float64)
        np.testing.assert_allclose(out[n], expect, rtol=1e-6, atol=1e-6)


def test_rate_must_be_non_negative():
    with pytest.raises(ConfigError):
        ForgettingRate(-0.1)
    assert float(ForgettingRate(3.0)) == 3.0


def test_layout_mismatch():
    theta, _ = _pair()
    with pytest.raises(ConfigError):
        extract_delta(theta, init_model(TWO))
    with pytest.raises(ConfigError):
        layer_distances(theta, init_model(TWO))


def test_three_four_five():
    a = with_tensor(TWO, NORM, [0, 0])
    b = with_tensor(TWO, NORM, [3, 4])
    rep = layer_distances(a, b)
    dist = {name: d for _, _, name, d in rep.rows}
    assert dist[NORM] == 5.0
    assert sum(dist.values()) == 5.0
    assert rep.nonzero_families() == {"norm"}


def test_distance_report_covers_every_tensor_once():
    theta, ft = _pair()
    rep = layer_distances(theta, ft)
    assert sorted(r[2] for r in rep.rows) == sorted(theta)
    assert rep.to_csv().splitlines()[0] == "layer,family,tensor,distance"
    assert len(rep.to_csv().splitlines()) == len(theta) + 1


def test_tensor_families():
    assert tensor_family("layers.3.attn.q") == (3, "query")
    assert tensor_family("layers.0.attn.v") == (0, "value")
    assert tensor_family("layers.1.mlp.up_bias") == (1, "mlp_up")
    assert tensor_family("layers.1.mlp.down") == (1, "mlp_down")
    assert tensor_family("embed.pos") == (None, "embedding")
    assert tensor_family("head") == (None, "head")


# ---------------------------------------------------------------------------
# checkpoints


def bitwise_crc64_xz(data: bytes) -> int:
    """Reference CRC-64/XZ computed bit by bit (no table)."""
    poly = 0xC96C5795D7870F42
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


def test_crc_check_value():
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA
    blob = bytes(range(256)) * 3
    assert crc64(blob) == bitwise_crc64_xz(blob)


def test_container_layout():
    P = init_model(TWO)
    data = encode_checkpoint(P)
    assert data[:4] == b"FLRN"
    version, kind, count = struct.unpack_from("<BBI", data, 4)
    assert (version, kind, count) == (1, 0, len(P) + 1)
    (name_len,) = struct.unpack_from("<H", data, 10)
    assert data[12 : 12 + name_len].startswith(b"__meta__")
    assert struct.unpack("<Q", data[-8:])[0] == crc64(data[:-8])
    # the last tensor (head, 8x2) ends just before the trailer
    tail = np.frombuffer(data[-8 - 64 : -8], dtype="<f4").reshape(8, 2)
    np.testing.assert_array_equal(tail, P["head"])


def test_checkpoint_round_trips(tmp_path):
    theta, ft = _pair()
    for obj, kind in (
        (theta, "params"),
        (extract_delta(ft, theta, source="unit"), "delta"),
        (init_adapters(theta.config, LoraConfig(rank=2, seed=4)), "adapters"),
    ):
        path = tmp_path / f"{kind}.flrn"
        save_checkpoint(obj, path)
        back = load_checkpoint(path)
        assert type(back) is type(obj)
        assert back.bit_equal(obj)
        assert checkpoint_kind(path) == kind
    assert load_checkpoint(tmp_path / "delta.flrn").source == "unit"
    assert load_checkpoint(tmp_path / "adapters.flrn").config == LoraConfig(rank=2, seed=4)


def test_corrupt_checkpoints_raise_format_error():
    data = encode_checkpoint(init_model(TWO))
    for cut in (0, 3, 7, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            decode_checkpoint(data[:cut])
    with pytest.raises(FormatError) as info:
        decode_checkpoint(b"FLRX" + data[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError):
        decode_checkpoint(data[:4] + b"\x02" + data[5:])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(FormatError):
        decode_checkpoint(data + b"\x00")


def test_duplicate_names_rejected():
    P = init_model(TWO)
    data = bytearray(encode_checkpoint(P)[:-8])
    # bump the entry count and append a copy of the final entry
    count = struct.unpack_from("<I", data, 6)[0]
    struct.pack_into("<I", data, 6, count + 1)
    name = b"head"
    entry = struct.pack("<H", len(name)) + name + struct.pack("<BII", 2, 8, 2) + np.zeros(16, "<f4").tobytes()
    body = bytes(data) + entry
    with pytest.raises(FormatError):
        decode_checkpoint(body + struct.pack("<Q", crc64(body)))


# ---------------------------------------------------------------------------
# properties

finite32 = st.floats(-1e3, 1e3, width=32, allow_subnormal=True)
vec2 = arrays(np.float32, 2, elements=finite32)


@given(vec2, vec2)
def test_prop_lambda_zero_identity(a, b):
    theta = with_tensor(TWO, NORM, a)
    ft = with_tensor(TWO, NORM, b)
    assert apply_forgetting(theta, extract_delta(ft, theta), 0.0).bit_equal(theta)


@given(vec2, vec2)
def test_prop_distance_symmetric_and_zero_iff_equal(a, b):
    A, B = with_tensor(TWO, NORM, a), with_tensor(TWO, NORM, b)
    dab = {r[2]: r[3] for r in layer_distances(A, B).rows}
    dba = {r[2]: r[3] for r in layer_distances(B, A).rows}
    assert dab == dba
    assert (dab[NORM] == 0) == bool(np.all(a == b))


@settings(suppress_health_check=[HealthCheck.too_slow], max_examples=50)
@given(arrays(np.float32, (8, 2), elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_prop_checkpoint_bit_exact(head):
    P = with_tensor(TWO, "head", head)
    back = decode_checkpoint(encode_checkpoint(P))
    assert back["head"].tobytes() == P["head"].tobytes()


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.integers(0, 255))
def test_prop_single_byte_corruption_is_detected(pos, value):
    data = bytearray(encode_checkpoint(init_model(TWO)))
    pos %= len(data)
    if data[pos] == value:
        return
    data[pos] = value
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(data))
