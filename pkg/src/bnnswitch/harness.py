"""Experiment harnesses: runtime breakdown, bank scaling, boundary
continuity, and the comparison against control-plane weight replacement.

Measurement conventions:

* Selection cost in the breakdown bench is timed as the resolution the
  forwarding loop actually performs (a bounds-checked slot lookup) in a
  tight loop over pre-extracted slot ids, in timing chunks; the mean is
  total time over total lookups, the p99 is across chunk means.
* The scaling bench times the public resolve() call over pre-built
  metadata objects, with repetitions interleaved between the two banks in
  alternating order so clock and frequency drift cancel in the
  comparison; per-bank values are medians of repetition means.
* Continuity and comparison replays pace emissions by busy-waiting on the
  monotonic clock and compute gap statistics from sink-side (egress)
  timestamps only. A configurable warm-up prefix is excluded from latency
  statistics but never from correctness counts.
* Expected verdicts always come from an oracle pre-pass (scalar reference
  inference plus the score policy) against the model the packet's
  metadata intends, which keeps "wrong verdict" well defined even while a
  stale model is serving.
"""

from __future__ import annotations

import math
import socket
import struct
import sys
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .bnn import ModelWeights, infer_fast, infer_reference, model_from_bytes, model_to_bytes
from .model_bank import ModelBank
from .packet_format import (
    META_LEN,
    PAYLOAD_LEN,
    PayloadView,
    Reg0Metadata,
    build_frame,
)
from .pipeline import (
    Pipeline,
    Reason,
    RecordLog,
    RingSource,
    TraceReplaySource,
    Verdict,
    decide_action,
    measure_clock_overhead,
    run_pipeline,
    summarize_log,
)

_clock = time.perf_counter_ns

DEFAULT_PACE_NS = 10_000
DEFAULT_WARMUP = 64
RATE_WINDOW = 512


class BadBoundary(ValueError):
    """Boundary index outside (0, n_packets)."""


class ControlChannelFailure(RuntimeError):
    """Weight delivery over the control socket failed."""


# ---------------------------------------------------------------------------
# slot access patterns

@dataclass(frozen=True)
class AccessPattern:
    """Deterministic slot-id sequence generator.

    kinds: fixed (always fixed_slot), round_robin, random (seeded uniform),
    hotspot (hot_slot with probability hot_fraction, else seeded uniform).
    """

    kind: str
    fixed_slot: int = 0
    seed: int = 0
    hot_slot: int = 0
    hot_fraction: float = 0.9

    @staticmethod
    def fixed(slot: int) -> "AccessPattern":
        return AccessPattern("fixed", fixed_slot=slot)

    @staticmethod
    def round_robin() -> "AccessPattern":
        return AccessPattern("round_robin")

    @staticmethod
    def random(seed: int = 0) -> "AccessPattern":
        return AccessPattern("random", seed=seed)

    @staticmethod
    def hotspot(hot_slot: int = 0, hot_fraction: float = 0.9,
                seed: int = 0) -> "AccessPattern":
        return AccessPattern("hotspot", hot_slot=hot_slot,
                             hot_fraction=hot_fraction, seed=seed)

    def slot_ids(self, n: int, n_slots: int) -> list[int]:
        if self.kind == "fixed":
            if not 0 <= self.fixed_slot < n_slots:
                raise ValueError(f"fixed slot {self.fixed_slot} not in bank")
            return [self.fixed_slot] * n
        if self.kind == "round_robin":
            return [i % n_slots for i in range(n)]
        rng = np.random.default_rng(self.seed)
        if self.kind == "random":
            return rng.integers(0, n_slots, size=n).tolist()
        if self.kind == "hotspot":
            if not 0 <= self.hot_slot < n_slots:
                raise ValueError(f"hot slot {self.hot_slot} not in bank")
            others = rng.integers(0, n_slots, size=n)
            hot = rng.random(n) < self.hot_fraction
            return np.where(hot, self.hot_slot, others).tolist()
        raise ValueError(f"unknown access pattern kind {self.kind!r}")


def standard_patterns(seed: int = 0) -> list[AccessPattern]:
    return [AccessPattern.fixed(0), AccessPattern.round_robin(),
            AccessPattern.random(seed), AccessPattern.hotspot(0, 0.9, seed)]


def warm_bank(bank: ModelBank, rounds: int = 4) -> None:
    """Run the executor once per slot a few times so one-time costs (JIT
    load, cache fill) land before any timed or paced section starts."""
    payload = PayloadView(b"\xa5" * (bank.d // 8))
    for _ in range(rounds):
        for model in bank.slots:
            infer_fast(model, payload)


# ---------------------------------------------------------------------------
# payload sources for trace generation

def seeded_random_payloads(seed: int):
    """payload_source drawing deterministic random payloads per index."""
    rng = np.random.default_rng(seed)
    cache: dict[int, bytes] = {}

    def source(i: int) -> bytes:
        # indices are requested in order by the generators; draw lazily
        while len(cache) <= i:
            cache[len(cache)] = rng.integers(
                0, 256, PAYLOAD_LEN, np.uint8).tobytes()
        return cache[i]

    return source


def cycled_payloads(rows: np.ndarray):
    """payload_source cycling the rows of a packed (n, 1024) array."""
    if len(rows) == 0:
        raise ValueError("payload pool is empty")
    pool = [bytes(row) for row in rows]

    def source(i: int) -> bytes:
        return pool[i % len(pool)]

    return source


def select_flip_payloads(model_a: ModelWeights, model_b: ModelWeights,
                         payloads: np.ndarray) -> np.ndarray:
    """Rows whose verdict differs between the two models (their scores
    necessarily differ too); used to build traces where serving the wrong
    model is observable on every packet."""
    from .trainer import batch_scores

    sa = batch_scores(model_a, payloads)
    sb = batch_scores(model_b, payloads)
    mask = (sa > 0.0) != (sb > 0.0)
    return payloads[mask]


# ---------------------------------------------------------------------------
# runtime breakdown

@dataclass
class BreakdownReport:
    n_packets: int
    select_mean_ns: float | None = None
    select_p99_ns: float | None = None
    infer_mean_ns: float | None = None
    infer_p99_ns: float | None = None
    full_mean_ns: float | None = None
    full_p99_ns: float | None = None
    pps: float | None = None
    select_over_infer: float | None = None
    clock_overhead_ns: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _build_frame_pool(bank: ModelBank, pool_size: int, payload_seed: int
                      ) -> list[bytes]:
    rng = np.random.default_rng(payload_seed)
    return [build_frame(i % len(bank),
                        rng.integers(0, 256, PAYLOAD_LEN, np.uint8).tobytes())
            for i in range(pool_size)]


def bench_breakdown(bank: ModelBank, n_packets: int, *, payload_seed: int = 0,
                    pool_size: int = 256, chunk: int = 4096,
                    warmup: int = DEFAULT_WARMUP) -> BreakdownReport:
    """Mean/p99 for pure slot selection, pure inference, and the full
    packet path, plus sustained packets/second for the full path."""
    report = BreakdownReport(n_packets=n_packets,
                             clock_overhead_ns=measure_clock_overhead())
    if n_packets <= 0:
        return report
    warm_bank(bank)
    frames = _build_frame_pool(bank, pool_size, payload_seed)
    views = [PayloadView(f, META_LEN, PAYLOAD_LEN) for f in frames]
    slots = bank.slots
    n_slots = len(slots)

    # --- pure slot selection: bounds-checked lookup over pre-parsed ids
    ids = [i % n_slots for i in range(n_packets)]
    for k in ids[:1024]:
        slots[k]
    chunk_means = []
    total = 0
    for lo in range(0, n_packets, chunk):
        sub = ids[lo:lo + chunk]
        t0 = _clock()
        for k in sub:
            slots[k]
        dt = _clock() - t0
        total += dt
        chunk_means.append(dt / len(sub))
    report.select_mean_ns = total / n_packets
    report.select_p99_ns = float(np.percentile(chunk_means, 99))

    # --- pure inference over fixed payloads
    n_pool = len(views)
    for j in range(min(256, n_packets)):
        infer_fast(slots[ids[j]], views[j % n_pool])
    lat = np.empty(n_packets, dtype=np.int64)
    for j in range(n_packets):
        v = views[j % n_pool]
        m = slots[ids[j]]
        t0 = _clock()
        infer_fast(m, v)
        lat[j] = _clock() - t0
    report.infer_mean_ns = float(lat.mean())
    report.infer_p99_ns = float(np.percentile(lat, 99))
    report.select_over_infer = report.select_mean_ns / report.infer_mean_ns

    # --- full path through the pipeline
    run_report, _ = run_pipeline(bank, RingSource(frames, n_packets),
                                 warmup=min(warmup, max(n_packets - 1, 0)),
                                 disable_gc=True)
    e2e = run_report.stage_stats["end_to_end"]
    report.full_mean_ns = e2e.get("mean_ns")
    report.full_p99_ns = e2e.get("p99_ns")
    report.pps = run_report.pps
    return report


# ---------------------------------------------------------------------------
# resident-bank scaling

@dataclass
class ScalingCell:
    bank_label: str
    pattern: str
    select_mean_ns: float
    select_infer_mean_ns: float
    slot_hits: dict
    all_resolved_correctly: bool


@dataclass
class ScalingReport:
    n_packets: int
    n_infer: int
    reps: int
    cells: list = field(default_factory=list)
    rel_diff_by_pattern: dict = field(default_factory=dict)
    all_16_ids_exercised: bool = False

    def cell(self, bank_label: str, pattern: str) -> ScalingCell:
        for c in self.cells:
            if c.bank_label == bank_label and c.pattern == pattern:
                return c
        raise KeyError((bank_label, pattern))

    def to_dict(self) -> dict:
        return {
            "n_packets": self.n_packets,
            "n_infer": self.n_infer,
            "reps": self.reps,
            "cells": [dict(c.__dict__) for c in self.cells],
            "rel_diff_by_pattern": self.rel_diff_by_pattern,
            "all_16_ids_exercised": self.all_16_ids_exercised,
        }


def _time_resolve_pass(bank: ModelBank, metas: list[Reg0Metadata]) -> float:
    resolve = bank.resolve
    t0 = _clock()
    for m in metas:
        resolve(m)
    return (_clock() - t0) / len(metas)


def _select_infer_mean(bank: ModelBank, metas: list[Reg0Metadata],
                       views: list[PayloadView]) -> float:
    resolve = bank.resolve
    slots = bank.slots
    n_pool = len(views)
    for j in range(min(128, len(metas))):
        infer_fast(slots[resolve(metas[j])], views[j % n_pool])
    t0 = _clock()
    for j, m in enumerate(metas):
        infer_fast(slots[resolve(m)], views[j % n_pool])
    return (_clock() - t0) / len(metas)


def bench_scaling(bank2: ModelBank, bank16: ModelBank,
                  patterns: list[AccessPattern], n_packets: int, *,
                  n_infer: int = 20_000, reps: int = 7,
                  payload_seed: int = 0) -> ScalingReport:
    """Selection latency and selection+inference latency for both banks
    under each access pattern, with per-id resolution verified."""
    if len(bank2) != 2 or len(bank16) != 16:
        raise ValueError(f"expected banks of 2 and 16 slots, "
                         f"got {len(bank2)} and {len(bank16)}")
    report = ScalingReport(n_packets=n_packets, n_infer=n_infer, reps=reps)
    warm_bank(bank2)
    warm_bank(bank16)
    rng = np.random.default_rng(payload_seed)
    pool = [build_frame(0, rng.integers(0, 256, PAYLOAD_LEN, np.uint8).tobytes())
            for _ in range(256)]
    views = [PayloadView(f, META_LEN, PAYLOAD_LEN) for f in pool]
    hit_16 = set()

    for pattern in patterns:
        per_bank: dict[str, ScalingCell] = {}
        ids2 = pattern.slot_ids(n_packets, 2)
        ids16 = pattern.slot_ids(n_packets, 16)
        metas2 = [Reg0Metadata(k, 1) for k in ids2]
        metas16 = [Reg0Metadata(k, 1) for k in ids16]

        # correctness (untimed): every id resolves to itself
        ok2 = all(bank2.resolve(m) == k for m, k in zip(metas2, ids2))
        ok16 = all(bank16.resolve(m) == k for m, k in zip(metas16, ids16))
        hits2 = {int(k): int(c) for k, c in
                 zip(*np.unique(ids2, return_counts=True))}
        hits16 = {int(k): int(c) for k, c in
                  zip(*np.unique(ids16, return_counts=True))}
        if pattern.kind == "round_robin":
            hit_16.update(hits16)

        # timed, interleaved with alternating order
        _time_resolve_pass(bank2, metas2)
        _time_resolve_pass(bank16, metas16)
        means2, means16 = [], []
        for r in range(reps):
            if r % 2 == 0:
                means2.append(_time_resolve_pass(bank2, metas2))
                means16.append(_time_resolve_pass(bank16, metas16))
            else:
                means16.append(_time_resolve_pass(bank16, metas16))
                means2.append(_time_resolve_pass(bank2, metas2))
        sel2 = float(np.median(means2))
        sel16 = float(np.median(means16))

        si2 = _select_infer_mean(bank2, metas2[:n_infer], views)
        si16 = _select_infer_mean(bank16, metas16[:n_infer], views)

        per_bank["2"] = ScalingCell("2", pattern.kind, sel2, si2, hits2, ok2)
        per_bank["16"] = ScalingCell("16", pattern.kind, sel16, si16, hits16, ok16)
        report.cells.extend(per_bank.values())
        report.rel_diff_by_pattern[pattern.kind] = abs(sel16 - sel2) / sel2
    report.all_16_ids_exercised = hit_16.issuperset(range(16))
    return report


# ---------------------------------------------------------------------------
# boundary traces and continuity replay

def gen_boundary_trace(n_packets: int, boundary_index: int, payload_source, *,
                       pace_ns: int = DEFAULT_PACE_NS,
                       start_ns: int = 0) -> list[tuple[int, bytes]]:
    """Records 0..boundary_index-1 carry slot 0, the rest slot 1; emissions
    are spaced pace_ns apart and payloads come from payload_source(i)."""
    if not 0 < boundary_index < n_packets:
        raise BadBoundary(f"boundary {boundary_index} not inside "
                          f"(0, {n_packets})")
    records = []
    for i in range(n_packets):
        slot = 0 if i < boundary_index else 1
        records.append((start_ns + i * pace_ns,
                        build_frame(slot, payload_source(i))))
    return records


def intended_slots(records) -> list[int]:
    """Slot id carried by each record's frame (no bounds interpretation)."""
    return [struct.unpack_from("<I", frame, 0)[0] for _, frame in records]


def oracle_verdicts(models_by_slot: dict[int, ModelWeights],
                    records) -> list[int | None]:
    """Expected verdict per record from reference inference with the
    intended slot's model; None where the intended slot has no model.
    Scores are cached per (slot, payload)."""
    cache: dict[tuple[int, bytes], int] = {}
    out: list[int | None] = []
    for _, frame in records:
        slot = struct.unpack_from("<I", frame, 0)[0]
        model = models_by_slot.get(slot)
        if model is None:
            out.append(None)
            continue
        payload = bytes(frame[META_LEN:])
        key = (slot, payload)
        if key not in cache:
            score = infer_reference(model, PayloadView(payload))
            cache[key] = int(decide_action(None, score).verdict)
        out.append(cache[key])
    return out


@dataclass
class ContinuityReport:
    offered: int
    processed: int
    processed_fraction: float
    forwarded: int
    drops: dict
    wrong_slot_hits: int
    wrong_verdicts: int
    boundary_index: int
    median_gap_ns: float
    boundary_gap_ns: float
    rate_before_kpps: float
    rate_after_kpps: float
    mean_select_ns: float
    warmup_excluded: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _wrong_counts(log: RecordLog, intended: list[int],
                  expected: list[int | None]) -> tuple[int, int]:
    wrong_slot = 0
    wrong_verdict = 0
    n = len(log)
    for i in range(n):
        reason = int(log.reason[i])
        if reason != Reason.INFERENCE:
            continue
        if int(log.slot[i]) != intended[i]:
            wrong_slot += 1
        if expected[i] is not None and int(log.verdict[i]) != expected[i]:
            wrong_verdict += 1
    return wrong_slot, wrong_verdict


def _window_rate_kpps(egress: np.ndarray, lo: int, hi: int) -> float:
    window = egress[max(lo, 0):hi]
    if len(window) < 2 or window[-1] <= window[0]:
        return 0.0
    return (len(window) - 1) / ((window[-1] - window[0]) / 1e9) / 1e3


def _continuity_stats(log: RecordLog, boundary_index: int,
                      warmup: int) -> tuple[float, float, float, float, float]:
    n = len(log)
    egress = log.ts[4, :n]
    lo = warmup if n > warmup + 1 else 0
    gaps = np.diff(egress[lo:])
    median_gap = float(np.median(gaps)) if len(gaps) else 0.0
    if 0 < boundary_index < n:
        boundary_gap = float(egress[boundary_index]
                             - egress[boundary_index - 1])
    else:
        boundary_gap = 0.0
    rate_before = _window_rate_kpps(egress, boundary_index - RATE_WINDOW,
                                    boundary_index)
    rate_after = _window_rate_kpps(egress, boundary_index,
                                   boundary_index + RATE_WINDOW)
    resolve_ns = log.ts[2, lo:n] - log.ts[1, lo:n]
    mean_select = float(resolve_ns.mean()) if n > lo else 0.0
    return median_gap, boundary_gap, rate_before, rate_after, mean_select


def run_continuity(bank: ModelBank, records, *, pace: bool = True,
                   warmup: int = DEFAULT_WARMUP,
                   boundary_index: int | None = None) -> ContinuityReport:
    """Replay a boundary trace through the pipeline and compare every
    record against the intended slot and the oracle verdict."""
    intended = intended_slots(records)
    if boundary_index is None:
        boundary_index = next(
            (i for i, s in enumerate(intended) if s != intended[0]),
            len(records))
    expected = oracle_verdicts(
        {k: bank.slots[k] for k in range(len(bank))}, records)
    warm_bank(bank)
    run_report, log = run_pipeline(
        bank, TraceReplaySource(records, pace=pace),
        warmup=warmup, disable_gc=True)
    wrong_slot, wrong_verdict = _wrong_counts(log, intended, expected)
    median_gap, boundary_gap, rate_before, rate_after, mean_select = \
        _continuity_stats(log, boundary_index, warmup)
    return ContinuityReport(
        offered=run_report.offered,
        processed=run_report.processed,
        processed_fraction=(run_report.processed / run_report.offered
                            if run_report.offered else 0.0),
        forwarded=run_report.forwarded,
        drops=run_report.to_dict()["drops"],
        wrong_slot_hits=wrong_slot,
        wrong_verdicts=wrong_verdict,
        boundary_index=boundary_index,
        median_gap_ns=median_gap,
        boundary_gap_ns=boundary_gap,
        rate_before_kpps=rate_before,
        rate_after_kpps=rate_after,
        mean_select_ns=mean_select,
        warmup_excluded=warmup,
    )


# ---------------------------------------------------------------------------
# control channel

_CTRL_LEN = struct.Struct("<I")


class ControlListener:
    """Serves the forwarder side of the control channel on a local stream
    socket. Wire format per update: u32 length, raw weight-file bytes,
    u32 target slot. The listener loads the weights, swaps the slot, and
    timestamps the moment the swap became visible."""

    def __init__(self, bank: ModelBank, *, unix_path: str | None = None):
        self.bank = bank
        self.applied: list[tuple[int, int]] = []  # (t_effective_ns, slot)
        self._applied_event = threading.Event()
        if unix_path is not None:
            self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self._sock.bind(unix_path)
            self.address = unix_path
            self._family = socket.AF_UNIX
        else:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._sock.bind(("127.0.0.1", 0))
            self.address = self._sock.getsockname()
            self._family = socket.AF_INET
        self._sock.listen(4)
        self._sock.settimeout(0.1)
        self._closing = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with conn:
                try:
                    (length,) = _CTRL_LEN.unpack(_read_exact(conn, 4))
                    blob = _read_exact(conn, length)
                    (slot,) = _CTRL_LEN.unpack(_read_exact(conn, 4))
                    model = model_from_bytes(blob, d=self.bank.d,
                                             h=self.bank.h)
                    self.bank.swap_slot(slot, model)
                    t_effective = _clock()
                    self.applied.append((t_effective, slot))
                    self._applied_event.set()
                    conn.sendall(b"\x01")
                except Exception:
                    try:
                        conn.sendall(b"\x00")
                    except OSError:
                        pass

    def wait_applied(self, timeout_s: float) -> bool:
        return self._applied_event.wait(timeout_s)

    def close(self) -> None:
        self._closing.set()
        self._thread.join(timeout=2.0)
        self._sock.close()


def _read_exact(conn: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        part = conn.recv(n - len(buf))
        if not part:
            raise ControlChannelFailure(
                f"connection closed after {len(buf)}/{n} bytes")
        buf += part
    return buf


def send_weights(address, weights: bytes, slot: int, *,
                 delay_ns: int = 0) -> int:
    """Deliver a weight file over the control channel, simulating a
    transfer latency of delay_ns before bytes move. Returns the
    send-start timestamp (taken before the simulated transfer)."""
    t_send_start = _clock()
    if delay_ns > 0:
        time.sleep(delay_ns / 1e9)
    family = socket.AF_UNIX if isinstance(address, str) else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_STREAM)
    try:
        sock.connect(address)
        sock.sendall(_CTRL_LEN.pack(len(weights)) + weights
                     + _CTRL_LEN.pack(slot))
        ack = sock.recv(1)
    except OSError as exc:
        raise ControlChannelFailure(str(exc)) from exc
    finally:
        sock.close()
    if ack != b"\x01":
        raise ControlChannelFailure(f"update rejected (ack={ack!r})")
    return t_send_start


# ---------------------------------------------------------------------------
# control-plane replacement comparison

@dataclass
class ControlCompareReport:
    switch_latency_us: float
    boundary_to_effective_us: float
    post_boundary_wrong_model: int
    post_boundary_wrong_verdicts: int
    resident_switch_latency_us: float
    resident_wrong_slot_hits: int
    resident_wrong_verdicts: int
    median_gap_us: float
    expected_wrong_from_gaps: int
    boundary_index: int
    offered: int
    processed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_control_compare(model_slot0: ModelWeights, model_slot1: ModelWeights,
                        records, *, delivery_latency_ns: int,
                        warmup: int = DEFAULT_WARMUP, pace: bool = True,
                        unix_path: str | None = None) -> ControlCompareReport:
    """Replay a boundary trace twice: once with slot 1 undelivered until a
    control-plane update pushes it after boundary detection, once with
    both models resident.

    For the control leg, slot 1 starts as a copy of slot 0 so pre-boundary
    behavior matches the resident leg exactly. The first record whose
    resolved slot is 1 triggers the sender, which waits out the configured
    transfer latency and streams the real slot-1 weight file to the
    forwarder's control listener. Stale-model packets are identified by
    score: a post-boundary record scored exactly as slot 0 would (and
    differently from slot 1) ran under the not-yet-delivered model.
    """
    intended = intended_slots(records)
    boundary_index = next(
        (i for i, s in enumerate(intended) if s != intended[0]), len(records))
    if boundary_index >= len(records):
        raise BadBoundary("trace carries no slot transition")
    expected = oracle_verdicts({0: model_slot0, 1: model_slot1}, records)

    # reference scores of both models for every distinct post-boundary payload
    old_scores: dict[bytes, float] = {}
    new_scores: dict[bytes, float] = {}
    for _, frame in records[boundary_index:]:
        payload = bytes(frame[META_LEN:])
        if payload not in old_scores:
            old_scores[payload] = infer_reference(model_slot0,
                                                  PayloadView(payload))
            new_scores[payload] = infer_reference(model_slot1,
                                                  PayloadView(payload))

    # --- control leg: slot 1 pre-filled with slot 0 content
    bank = ModelBank([model_slot0, model_slot0])
    warm_bank(bank)
    listener = ControlListener(bank, unix_path=unix_path)
    weights_blob = model_to_bytes(model_slot1)

    detect = threading.Event()
    t_detect = [0]
    t_send_start = [0]
    sender_error: list[BaseException] = []

    def hook(i: int, sid: int) -> None:
        if sid == 1 and not detect.is_set():
            t_detect[0] = _clock()
            detect.set()

    def sender() -> None:
        if not detect.wait(timeout=60.0):
            sender_error.append(ControlChannelFailure("boundary never seen"))
            return
        try:
            t_send_start[0] = send_weights(listener.address, weights_blob, 1,
                                           delay_ns=delivery_latency_ns)
        except BaseException as exc:
            sender_error.append(exc)

    sender_thread = threading.Thread(target=sender, daemon=True)
    old_interval = sys.getswitchinterval()
    sys.setswitchinterval(1e-4)
    try:
        sender_thread.start()
        pipeline = Pipeline(bank)
        run_report, log = pipeline.run(
            TraceReplaySource(records, pace=pace), warmup=warmup,
            record_hook=hook, disable_gc=True)
        sender_thread.join(timeout=60.0)
        if not listener.wait_applied(timeout_s=60.0):
            raise ControlChannelFailure("weights never became effective")
    finally:
        sys.setswitchinterval(old_interval)
        listener.close()
    if sender_error:
        raise ControlChannelFailure(f"sender failed: {sender_error[0]!r}")

    t_effective = listener.applied[0][0]
    switch_latency_ns = t_effective - t_send_start[0]
    boundary_to_effective_ns = t_effective - t_detect[0]

    wrong_model = 0
    wrong_verdict = 0
    for i in range(boundary_index, len(log)):
        if int(log.reason[i]) != Reason.INFERENCE:
            continue
        payload = bytes(records[i][1][META_LEN:])
        score = float(log.score[i])
        if (score == old_scores[payload]
                and old_scores[payload] != new_scores[payload]):
            wrong_model += 1
        if expected[i] is not None and int(log.verdict[i]) != expected[i]:
            wrong_verdict += 1

    median_gap, _, _, _, _ = _continuity_stats(log, boundary_index, warmup)

    # --- resident leg on the identical trace
    resident = run_continuity(ModelBank([model_slot0, model_slot1]), records,
                              pace=pace, warmup=warmup,
                              boundary_index=boundary_index)

    return ControlCompareReport(
        switch_latency_us=switch_latency_ns / 1e3,
        boundary_to_effective_us=boundary_to_effective_ns / 1e3,
        post_boundary_wrong_model=wrong_model,
        post_boundary_wrong_verdicts=wrong_verdict,
        resident_switch_latency_us=resident.mean_select_ns / 1e3,
        resident_wrong_slot_hits=resident.wrong_slot_hits,
        resident_wrong_verdicts=resident.wrong_verdicts,
        median_gap_us=median_gap / 1e3,
        expected_wrong_from_gaps=(int(boundary_to_effective_ns // median_gap)
                                  if median_gap > 0 else 0),
        boundary_index=boundary_index,
        offered=run_report.offered,
        processed=run_report.processed,
    )
