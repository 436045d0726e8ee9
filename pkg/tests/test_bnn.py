"""BNN executor tests: forced-value cases, a hand-enumerated toy, oracle
equivalence sweeps, and the weight file format."""

import numpy as np
import pytest

from bnnswitch.bnn import (
    CostModel,
    DimensionMismatch,
    ModelWeights,
    SizeMismatch,
    _score_words_numpy,
    cost_model,
    infer_fast,
    infer_reference,
    load_model,
    model_from_bytes,
    model_to_bytes,
    random_model,
    save_model,
    serialized_size,
)
from bnnswitch.packet_format import PAYLOAD_BITS, PayloadView


def view_of(raw: bytes) -> PayloadView:
    return PayloadView(raw)


def all_minus_one_model(d=PAYLOAD_BITS, h=32):
    # every weight bit 0 (-1), zero biases, output weights +1
    return ModelWeights(d, h,
                        np.zeros((h, d // 8), dtype=np.uint8),
                        np.zeros(h, dtype=np.int8),
                        np.ones(h, dtype=np.float32),
                        0.0)


def test_all_agree_payload_scores_plus_h():
    m = all_minus_one_model()
    # payload bits all 0 -> inputs all -1 -> every unit matches on all d bits
    y = infer_fast(m, view_of(b"\x00" * 1024))
    assert y == 32.0
    assert infer_reference(m, view_of(b"\x00" * 1024)) == 32.0


def test_all_disagree_payload_scores_minus_h():
    m = all_minus_one_model()
    y = infer_fast(m, view_of(b"\xff" * 1024))
    assert y == -32.0
    assert infer_reference(m, view_of(b"\xff" * 1024)) == -32.0


def test_tie_rule_sign_of_zero_is_positive():
    # one unit agreeing on exactly d/2 bits: pre = 0, h must be +1
    d = 16
    w_row = np.array([0b11110000, 0b00000000], dtype=np.uint8)  # bits 4..7 set
    payload = bytes([0b11111111, 0b00001111])
    # agreements: byte0 bits4-7 match (1==1), byte1 bits4-7 match (0==0) -> 8 of 16
    m = ModelWeights(d, 1, w_row.reshape(1, 2),
                     np.zeros(1, dtype=np.int8),
                     np.array([1.0], dtype=np.float32), 0.0)
    assert infer_reference(m, view_of(payload)) == 1.0
    assert infer_fast(m, view_of(payload)) == 1.0


def test_hand_enumerated_toy_d16_h2():
    # weights and inputs written out bit by bit
    # unit 0 row bits (LSB-first per byte): 1,0,1,0,1,0,1,0 | 1,1,1,1,0,0,0,0
    # unit 1 row bits:                      0,0,0,0,0,0,0,0 | 1,1,1,1,1,1,1,1
    w1 = np.array([[0b01010101, 0b00001111],
                   [0b00000000, 0b11111111]], dtype=np.uint8)
    # payload bits: 1,1,0,0,1,1,0,0 | 1,0,1,0,1,0,1,0
    x = bytes([0b00110011, 0b01010101])
    # unit 0 matches, counted by hand:
    #  byte0: w 1,0,1,0,1,0,1,0 vs x 1,1,0,0,1,1,0,0 -> matches at j=0,4 and j=3,7? no:
    #  j: w/x 1/1 0/1 1/0 0/0 1/1 0/1 1/0 0/0 -> match j0, j3, j4, j7 -> 4
    #  byte1: w 1,1,1,1,0,0,0,0 vs x 1,0,1,0,1,0,1,0 -> match j0, j2, j5, j7 -> 4
    # total matches unit0 = 8 -> dot = 2*8-16 = 0 -> pre = 0 + b1 -> +1 if b1 >= 0
    #  unit 1: byte0: w all 0 vs x 1,1,0,0,1,1,0,0 -> matches where x=0 -> 4
    #  byte1: w all 1 vs x 1,0,1,0,1,0,1,0 -> matches where x=1 -> 4
    # total matches unit1 = 8 -> dot = 0
    for b1_0, b1_1, expect0, expect1 in [(0, 0, 1.0, 1.0), (-1, 0, -1.0, 1.0),
                                         (1, -3, 1.0, -1.0)]:
        m = ModelWeights(16, 2, w1, np.array([b1_0, b1_1], dtype=np.int8),
                         np.array([1.0, 2.0], dtype=np.float32), 0.5)
        expected = 1.0 * expect0 + 2.0 * expect1 + 0.5
        assert infer_reference(m, view_of(x)) == expected
        assert infer_fast(m, view_of(x)) == expected


@pytest.mark.parametrize("d,h,cases", [(PAYLOAD_BITS, 32, 300), (64, 4, 300)])
def test_oracle_equivalence_random_sweep(d, h, cases):
    rng = np.random.default_rng(1234 + d)
    for _ in range(cases):
        m = random_model(rng, d=d, h=h)
        payload = rng.integers(0, 256, size=d // 8, dtype=np.uint8).tobytes()
        v = view_of(payload)
        assert infer_fast(m, v) == infer_reference(m, v)


def test_oracle_equivalence_adversarial_payloads():
    rng = np.random.default_rng(99)
    for d, h in [(PAYLOAD_BITS, 32), (64, 4)]:
        for _ in range(20):
            m = random_model(rng, d=d, h=h)
            for payload in (b"\x00" * (d // 8), b"\xff" * (d // 8),
                            b"\xaa" * (d // 8), b"\x55" * (d // 8)):
                v = view_of(payload)
                assert infer_fast(m, v) == infer_reference(m, v)


def test_numpy_kernel_matches_reference():
    rng = np.random.default_rng(55)
    for _ in range(50):
        m = random_model(rng)
        payload = rng.integers(0, 256, size=1024, dtype=np.uint8).tobytes()
        v = view_of(payload)
        y = _score_words_numpy(m._w_words, v.words(), m._mism_thr,
                               m._w2_f64, m._b2_f64)
        assert y == infer_reference(m, v)


def test_flip_antisymmetry_with_zero_hidden_bias():
    # flipping every payload bit negates every pre-activation when b1 = 0
    rng = np.random.default_rng(17)
    for _ in range(20):
        h = 8
        m = ModelWeights(PAYLOAD_BITS, h,
                         rng.integers(0, 256, size=(h, 1024), dtype=np.uint8),
                         np.zeros(h, dtype=np.int8),
                         rng.normal(size=h).astype(np.float32), 0.0)
        payload = rng.integers(0, 256, size=1024, dtype=np.uint8)
        flipped = (payload ^ 0xFF).astype(np.uint8)
        y = infer_fast(m, view_of(payload.tobytes()))
        y_flipped = infer_fast(m, view_of(flipped.tobytes()))
        # pre of 0 cannot happen here (d even, matches != d/2 would be needed);
        # allow it anyway by checking against the reference rather than strict -y
        assert y_flipped == infer_reference(m, view_of(flipped.tobytes()))
        # the matching layer itself is antisymmetric: recompute dots directly
        xs = view_of(payload.tobytes()).signs().astype(np.int64)
        for n in range(h):
            ws = np.unpackbits(m.w1_packed[n], bitorder="little").astype(np.int64) * 2 - 1
            assert np.dot(ws, -xs) == -np.dot(ws, xs)


def test_determinism():
    rng = np.random.default_rng(2)
    m = random_model(rng)
    payload = rng.integers(0, 256, size=1024, dtype=np.uint8).tobytes()
    scores = {infer_fast(m, view_of(payload)) for _ in range(50)}
    assert len(scores) == 1


def test_dimension_mismatch():
    rng = np.random.default_rng(4)
    m = random_model(rng, d=64, h=4)
    with pytest.raises(DimensionMismatch):
        infer_fast(m, view_of(b"\x00" * 1024))
    with pytest.raises(DimensionMismatch):
        infer_reference(m, view_of(b"\x00" * 1024))


def test_serialized_size_values():
    assert serialized_size(8192, 32) == 32932
    assert serialized_size(64, 4) == 4 * 8 + 4 + 16 + 4 == 56


def test_save_h32_is_32932_bytes(tmp_path):
    rng = np.random.default_rng(21)
    path = tmp_path / "m.bin"
    save_model(random_model(rng), path)
    assert path.stat().st_size == 32932


def test_save_load_round_trip_bit_patterns(tmp_path):
    rng = np.random.default_rng(31)
    for d, h in [(8192, 32), (64, 4)]:
        m = random_model(rng, d=d, h=h)
        path = tmp_path / f"m_{d}_{h}.bin"
        save_model(m, path)
        loaded = load_model(path, d=d, h=h)
        assert loaded == m
        assert loaded.w2.tobytes() == m.w2.tobytes()
        assert model_to_bytes(loaded) == model_to_bytes(m)


def test_round_trip_randomized_bytes():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        blob = (rng.integers(0, 256, size=36, dtype=np.uint8).tobytes()
                + rng.normal(size=5).astype("<f4").tobytes())
        m = model_from_bytes(blob, d=64, h=4)
        assert model_to_bytes(m) == blob


def test_truncated_file_size_mismatch(tmp_path):
    rng = np.random.default_rng(41)
    path = tmp_path / "m.bin"
    save_model(random_model(rng), path)
    path.write_bytes(path.read_bytes()[:-1])
    assert path.stat().st_size == 32931
    with pytest.raises(SizeMismatch):
        load_model(path)


def test_cost_model():
    rng = np.random.default_rng(51)
    assert cost_model(random_model(rng)) == CostModel(1, 8192 * 32, 32)
    toy = random_model(rng, d=8, h=1)
    assert cost_model(toy).hidden_ops == 8
    big = random_model(rng, d=64, h=4)
    assert cost_model(big).selection_ops == cost_model(toy).selection_ops == 1


def test_model_validation():
    with pytest.raises(DimensionMismatch):
        ModelWeights(12, 1, np.zeros((1, 1), np.uint8), np.zeros(1, np.int8),
                     np.zeros(1, np.float32), 0.0)
    with pytest.raises(DimensionMismatch):
        ModelWeights(16, 2, np.zeros((1, 2), np.uint8), np.zeros(2, np.int8),
                     np.zeros(2, np.float32), 0.0)
    with pytest.raises(ValueError):
        ModelWeights(16, 1, np.zeros((1, 2), np.uint8), np.zeros(1, np.int8),
                     np.array([np.inf], np.float32), 0.0)


def test_scores_finite_over_random_models():
    rng = np.random.default_rng(61)
    for _ in range(100):
        m = random_model(rng, d=64, h=4)
        payload = rng.integers(0, 256, size=8, dtype=np.uint8).tobytes()
        assert np.isfinite(infer_fast(m, view_of(payload)))
