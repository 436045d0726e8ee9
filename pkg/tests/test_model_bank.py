"""Resident bank tests: loading, resolution, footprints, and swap safety."""

import os
import threading

import numpy as np
import pytest

from bnnswitch.bnn import DimensionMismatch, infer_fast, random_model, save_model
from bnnswitch.model_bank import EmptyBank, ModelBank, SlotOutOfRange, load_bank
from bnnswitch.packet_format import PayloadView, Reg0Metadata


def write_models(tmp_path, count, *, d=8192, h=32, seed=0):
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = tmp_path / f"slot{i}_{d}_{h}.bin"
        save_model(random_model(rng, d=d, h=h), path)
        paths.append(str(path))
    return paths


def meta(slot_id):
    return Reg0Metadata(slot_id, 1)


def test_two_slot_footprint(tmp_path):
    bank = load_bank(write_models(tmp_path, 2))
    assert bank.footprint_bytes == 65864
    assert len(bank) == 2


def test_sixteen_slot_footprint(tmp_path):
    bank = load_bank(write_models(tmp_path, 16))
    assert bank.footprint_bytes == 526912


def test_footprint_equals_disk_usage(tmp_path):
    paths = write_models(tmp_path, 3)
    bank = load_bank(paths)
    assert bank.footprint_bytes == sum(os.path.getsize(p) for p in paths)


def test_mixed_hidden_width_rejected(tmp_path):
    rng = np.random.default_rng(1)
    p32 = tmp_path / "h32.bin"
    p16 = tmp_path / "h16.bin"
    save_model(random_model(rng, h=32), p32)
    save_model(random_model(rng, h=16), p16)
    with pytest.raises(DimensionMismatch):
        load_bank([str(p32), str(p16)])


def test_empty_bank_rejected(tmp_path):
    with pytest.raises(EmptyBank):
        load_bank([])
    with pytest.raises(EmptyBank):
        ModelBank([])


def test_generation_starts_at_zero(tmp_path):
    bank = load_bank(write_models(tmp_path, 2))
    assert bank.generation == 0


@pytest.mark.parametrize("k", [1, 2, 16])
def test_resolution_total_over_valid_and_rejects_invalid(k):
    rng = np.random.default_rng(10 + k)
    bank = ModelBank([random_model(rng, d=64, h=4) for _ in range(k)])
    for slot_id in range(2 * k):
        if slot_id < k:
            assert bank.resolve(meta(slot_id)) == slot_id
        else:
            with pytest.raises(SlotOutOfRange):
                bank.resolve(meta(slot_id))


def test_resolve_identity_all_16(tmp_path):
    bank = load_bank(write_models(tmp_path, 16))
    assert [bank.resolve(meta(i)) for i in range(16)] == list(range(16))


def test_swap_changes_scores_and_bumps_generation():
    rng = np.random.default_rng(3)
    m_old = random_model(rng)
    m_new = random_model(rng)
    bank = ModelBank([m_old, random_model(rng)])
    payload = PayloadView(rng.integers(0, 256, 1024, np.uint8).tobytes())
    before = infer_fast(bank.slots[bank.resolve(meta(0))], payload)
    bank.swap_slot(0, m_new)
    after = infer_fast(bank.slots[bank.resolve(meta(0))], payload)
    assert before == infer_fast(m_old, payload)
    assert after == infer_fast(m_new, payload)
    assert bank.generation == 1


def test_swap_with_identical_weights_is_idempotent():
    rng = np.random.default_rng(4)
    m = random_model(rng)
    bank = ModelBank([m])
    payload = PayloadView(rng.integers(0, 256, 1024, np.uint8).tobytes())
    before = infer_fast(bank.slots[0], payload)
    bank.swap_slot(0, m)
    assert infer_fast(bank.slots[0], payload) == before


def test_swap_guards():
    rng = np.random.default_rng(5)
    bank = ModelBank([random_model(rng, h=32)])
    with pytest.raises(DimensionMismatch):
        bank.swap_slot(0, random_model(rng, h=16))
    with pytest.raises(SlotOutOfRange):
        bank.swap_slot(1, random_model(rng, h=32))


def test_concurrent_swap_and_inference_sees_single_coherent_model():
    # every concurrently observed score must equal the score of exactly one
    # of the two models; a torn read would produce a third value
    rng = np.random.default_rng(6)
    m_a = random_model(rng, d=64, h=4)
    m_b = random_model(rng, d=64, h=4)
    bank = ModelBank([m_a])
    payloads = [PayloadView(rng.integers(0, 256, 8, np.uint8).tobytes())
                for _ in range(8)]
    allowed = [{infer_fast(m_a, p), infer_fast(m_b, p)} for p in payloads]

    stop = threading.Event()
    bad: list[float] = []

    def swapper():
        toggle = False
        while not stop.is_set():
            bank.swap_slot(0, m_b if toggle else m_a)
            toggle = not toggle

    def reader():
        while not stop.is_set():
            for j, p in enumerate(payloads):
                y = infer_fast(bank.slots[bank.resolve(meta(0))], p)
                if y not in allowed[j]:
                    bad.append(y)
                    return

    threads = [threading.Thread(target=swapper)] + \
              [threading.Thread(target=reader) for _ in range(2)]
    for t in threads:
        t.start()
    import time
    time.sleep(0.5)
    stop.set()
    for t in threads:
        t.join()
    assert bad == []
    assert bank.generation > 0


def test_bank_info(tmp_path):
    bank = load_bank(write_models(tmp_path, 2))
    info = bank.info()
    assert info == {"slots": 2, "d": 8192, "h": 32, "generation": 0,
                    "footprint_bytes": 65864}
