"""The shared forwarding path: parse reg0, resolve the slot, score, act.

One parser, one executor, and one action-logic instance serve every
packet in a run; the only thing that changes per packet is which resident
slot the metadata resolves to. Failures never escape the loop: a
malformed or unroutable packet becomes a Drop with a counted reason so
the path cannot stall.

Per packet the loop reads a monotonic clock at five fixed points
(ingress, post-parse, post-resolve, post-infer, egress); stage costs are
differences of adjacent readings. Clock-read overhead is measured once
per run and reported, never subtracted.
"""

from __future__ import annotations

import csv
import gc
import socket
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Iterator

import numpy as np

from .bnn import DimensionMismatch, ModelWeights, infer_fast
from .model_bank import ModelBank
from .packet_format import (
    EXPECTED_FORMAT_VERSION,
    FRAME_LEN,
    PAYLOAD_BITS,
    Reg0Metadata,
    VersionMismatch,
    WrongLength,
    parse_frame,
    read_trace,
    write_trace,
)

REPORT_SCHEMA_VERSION = "1"

_clock = time.perf_counter_ns


class Verdict(IntEnum):
    FORWARD = 0
    DROP = 1


class Reason(IntEnum):
    INFERENCE = 0
    SLOT_OUT_OF_RANGE = 1
    VERSION_MISMATCH = 2
    WRONG_LENGTH = 3


@dataclass(frozen=True)
class Action:
    """Forwarding decision; reason is INFERENCE exactly when the verdict
    came from the score policy rather than an input failure."""
    verdict: Verdict
    reason: Reason


_FORWARD_INFERENCE = Action(Verdict.FORWARD, Reason.INFERENCE)
_DROP_INFERENCE = Action(Verdict.DROP, Reason.INFERENCE)
_DROP_SLOT = Action(Verdict.DROP, Reason.SLOT_OUT_OF_RANGE)
_DROP_VERSION = Action(Verdict.DROP, Reason.VERSION_MISMATCH)
_DROP_LENGTH = Action(Verdict.DROP, Reason.WRONG_LENGTH)

_ERROR_ACTIONS = {
    Reason.SLOT_OUT_OF_RANGE: _DROP_SLOT,
    Reason.VERSION_MISMATCH: _DROP_VERSION,
    Reason.WRONG_LENGTH: _DROP_LENGTH,
}


def decide_action(meta: Reg0Metadata | None, score: float) -> Action:
    """Score policy: positive score means malicious, so Drop; anything
    else (ties included) Forwards. Metadata is accepted for policy use but
    the default policy ignores it."""
    return _DROP_INFERENCE if score > 0.0 else _FORWARD_INFERENCE


@dataclass(frozen=True)
class StageTimes:
    ingress: int
    post_parse: int
    post_resolve: int
    post_infer: int
    egress: int


@dataclass(frozen=True)
class PacketRecord:
    sequence_no: int
    slot_used: int | None
    score: float | None
    action: Action
    timestamps: StageTimes


class RecordLog:
    """Columnar store of per-packet records; cheap to append in the hot
    loop, materializes PacketRecord objects on demand."""

    def __init__(self, capacity: int = 1024):
        capacity = max(capacity, 16)
        self.n = 0
        self.slot = np.empty(capacity, dtype=np.int32)
        self.score = np.empty(capacity, dtype=np.float64)
        self.verdict = np.empty(capacity, dtype=np.uint8)
        self.reason = np.empty(capacity, dtype=np.uint8)
        self.ts = np.empty((5, capacity), dtype=np.int64)

    def _grow(self) -> None:
        cap = self.slot.shape[0] * 2
        self.slot = np.resize(self.slot, cap)
        self.score = np.resize(self.score, cap)
        self.verdict = np.resize(self.verdict, cap)
        self.reason = np.resize(self.reason, cap)
        ts = np.empty((5, cap), dtype=np.int64)
        ts[:, :self.n] = self.ts[:, :self.n]
        self.ts = ts

    def __len__(self) -> int:
        return self.n

    def record(self, i: int) -> PacketRecord:
        if not 0 <= i < self.n:
            raise IndexError(i)
        slot = int(self.slot[i])
        score = float(self.score[i])
        reason = Reason(int(self.reason[i]))
        action = (_ERROR_ACTIONS[reason] if reason != Reason.INFERENCE
                  else (_DROP_INFERENCE if self.verdict[i] else _FORWARD_INFERENCE))
        return PacketRecord(
            sequence_no=i,
            slot_used=slot if slot >= 0 else None,
            score=score if reason == Reason.INFERENCE else None,
            action=action,
            timestamps=StageTimes(*(int(self.ts[k, i]) for k in range(5))))

    def __iter__(self) -> Iterator[PacketRecord]:
        return (self.record(i) for i in range(self.n))

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(["sequence_no", "slot_used", "score", "verdict",
                         "reason", "ingress_ns", "post_parse_ns",
                         "post_resolve_ns", "post_infer_ns", "egress_ns"])
        for i in range(self.n):
            rec = self.record(i)
            ts = rec.timestamps
            writer.writerow([
                rec.sequence_no,
                "" if rec.slot_used is None else rec.slot_used,
                "" if rec.score is None else repr(rec.score),
                rec.action.verdict.name,
                rec.action.reason.name,
                ts.ingress, ts.post_parse, ts.post_resolve, ts.post_infer,
                ts.egress,
            ])


# ---------------------------------------------------------------------------
# sources and sinks

class RingSource:
    """In-memory ring of preloaded frames, cycled up to a packet limit."""

    def __init__(self, frames: list[bytes], limit: int):
        if not frames:
            raise ValueError("ring needs at least one frame")
        self.frames = frames
        self.limit = limit

    def __len__(self) -> int:
        return self.limit

    def __iter__(self):
        frames = self.frames
        nf = len(frames)
        for i in range(self.limit):
            yield 0, frames[i % nf]


class TraceReplaySource:
    """Replays (emit_time_ns, frame) records, busy-waiting on the
    monotonic clock when pacing is on so microsecond-scale gaps are
    honored. The spin yields the interpreter periodically so control
    threads stay responsive."""

    def __init__(self, records, pace: bool = True):
        self.records = records
        self.pace = pace

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        if not self.pace:
            for emit_ns, frame in self.records:
                yield emit_ns, frame
            return
        clock = _clock
        sleep = time.sleep
        base = clock()
        for emit_ns, frame in self.records:
            target = base + emit_ns
            while True:
                now = clock()
                if now >= target:
                    break
                if target - now > 200_000:
                    sleep(0)
            yield target, frame


class UdpSource:
    """Datagram source: one 1088-byte datagram per frame."""

    def __init__(self, bind_addr: tuple[str, int], limit: int,
                 timeout_s: float = 1.0):
        self.bind_addr = bind_addr
        self.limit = limit
        self.timeout_s = timeout_s
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind_addr)
        self.port = self.sock.getsockname()[1]

    def close(self) -> None:
        self.sock.close()

    def __iter__(self):
        self.sock.settimeout(self.timeout_s)
        try:
            for _ in range(self.limit):
                try:
                    data, _ = self.sock.recvfrom(4096)
                except socket.timeout:
                    return
                yield _clock(), data
        finally:
            self.close()


class NullSink:
    def emit(self, frame: bytes, action: Action) -> None:
        pass


class CollectSink:
    """Keeps (frame, action) pairs; test and report plumbing."""

    def __init__(self):
        self.items: list[tuple[bytes, Action]] = []

    def emit(self, frame: bytes, action: Action) -> None:
        self.items.append((frame, action))


class UdpSink:
    """Sends forwarded frames as raw 1088-byte datagrams; drops stay local."""

    def __init__(self, addr: tuple[str, int]):
        self.addr = addr
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def emit(self, frame: bytes, action: Action) -> None:
        if action.verdict == Verdict.FORWARD:
            self.sock.sendto(frame, self.addr)

    def close(self) -> None:
        self.sock.close()


class TraceWriterSink:
    """Collects forwarded frames with egress-relative timestamps and writes
    them back out as a trace file."""

    def __init__(self, path: str):
        self.path = path
        self._records: list[tuple[int, bytes]] = []
        self._base: int | None = None

    def emit(self, frame: bytes, action: Action) -> None:
        if action.verdict == Verdict.FORWARD:
            now = _clock()
            if self._base is None:
                self._base = now
            self._records.append((now - self._base, frame))

    def close(self) -> None:
        write_trace(self.path, self._records)


# ---------------------------------------------------------------------------

def _distribution(values: np.ndarray) -> dict:
    if values.size == 0:
        return {}
    return {
        "min_ns": float(values.min()),
        "mean_ns": float(values.mean()),
        "median_ns": float(np.median(values)),
        "p99_ns": float(np.percentile(values, 99)),
    }


def measure_clock_overhead(samples: int = 4096) -> float:
    """Mean cost of one monotonic clock read, in nanoseconds."""
    t0 = _clock()
    for _ in range(samples):
        _clock()
    return (_clock() - t0) / samples


@dataclass
class RunReport:
    """Aggregate of one pipeline run. Latency distributions exclude the
    warm-up prefix; counts never do."""

    schema_version: str = REPORT_SCHEMA_VERSION
    offered: int = 0
    processed: int = 0
    forwarded: int = 0
    dropped_inference: int = 0
    dropped_slot_out_of_range: int = 0
    dropped_version_mismatch: int = 0
    dropped_wrong_length: int = 0
    stage_stats: dict = field(default_factory=dict)
    pps: float = 0.0
    clock_overhead_ns: float = 0.0
    warmup_excluded: int = 0
    incomplete: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "offered": self.offered,
            "processed": self.processed,
            "forwarded": self.forwarded,
            "drops": {
                "inference": self.dropped_inference,
                "slot_out_of_range": self.dropped_slot_out_of_range,
                "version_mismatch": self.dropped_version_mismatch,
                "wrong_length": self.dropped_wrong_length,
            },
            "stage_stats": self.stage_stats,
            "pps": self.pps,
            "clock_overhead_ns": self.clock_overhead_ns,
            "warmup_excluded": self.warmup_excluded,
            "incomplete": self.incomplete,
            "error": self.error,
        }


def summarize_log(log: RecordLog, warmup: int = 0,
                  clock_overhead_ns: float = 0.0,
                  incomplete: bool = False, error: str | None = None) -> RunReport:
    n = len(log)
    reasons = log.reason[:n]
    verdicts = log.verdict[:n]
    report = RunReport(
        offered=n,
        processed=int((reasons == Reason.INFERENCE).sum()),
        forwarded=int(((reasons == Reason.INFERENCE)
                       & (verdicts == Verdict.FORWARD)).sum()),
        dropped_inference=int(((reasons == Reason.INFERENCE)
                               & (verdicts == Verdict.DROP)).sum()),
        dropped_slot_out_of_range=int((reasons == Reason.SLOT_OUT_OF_RANGE).sum()),
        dropped_version_mismatch=int((reasons == Reason.VERSION_MISMATCH).sum()),
        dropped_wrong_length=int((reasons == Reason.WRONG_LENGTH).sum()),
        clock_overhead_ns=clock_overhead_ns,
        incomplete=incomplete,
        error=error,
    )
    lo = warmup if n > warmup else 0
    report.warmup_excluded = lo
    ts = log.ts[:, lo:n]
    if ts.shape[1] > 0:
        report.stage_stats = {
            "parse": _distribution(ts[1] - ts[0]),
            "resolve": _distribution(ts[2] - ts[1]),
            "infer": _distribution(ts[3] - ts[2]),
            "action_emit": _distribution(ts[4] - ts[3]),
            "end_to_end": _distribution(ts[4] - ts[0]),
        }
    else:
        report.stage_stats = {k: {} for k in
                              ("parse", "resolve", "infer", "action_emit",
                               "end_to_end")}
    full = log.ts[:, :n]
    if n >= 2 and full[4, n - 1] > full[0, 0]:
        report.pps = n / ((full[4, n - 1] - full[0, 0]) / 1e9)
    return report


class Pipeline:
    """Single shared forwarding path over a resident bank.

    The parser, executor, and action logic are bound once at construction
    and reused for every packet; a run never builds a second execution
    path regardless of how often the resolved slot changes.
    """

    def __init__(self, bank: ModelBank, *,
                 expected_version: int = EXPECTED_FORMAT_VERSION,
                 parser: Callable = parse_frame,
                 executor: Callable = infer_fast,
                 action_logic: Callable = decide_action):
        if bank.d != PAYLOAD_BITS:
            raise DimensionMismatch(
                f"bank is d={bank.d}, frames carry {PAYLOAD_BITS} payload bits")
        self.bank = bank
        self.expected_version = expected_version
        self.parser = parser
        self.executor = executor
        self.action_logic = action_logic

    def process_packet(self, frame: bytes, sequence_no: int = 0) -> PacketRecord:
        """Run the six-step path on one frame. Failures become Drops with
        the matching reason; nothing is raised."""
        log = RecordLog(1)
        self._run_core(iter([(0, frame)]), NullSink(), log, None)
        rec = log.record(0)
        if rec.sequence_no != sequence_no:
            rec = PacketRecord(sequence_no, rec.slot_used, rec.score,
                               rec.action, rec.timestamps)
        return rec

    def run(self, source: Iterable[tuple[int, bytes]], sink=None, *,
            limit: int | None = None, warmup: int = 0,
            record_hook: Callable[[int, int], None] | None = None,
            disable_gc: bool = False,
            collect_log: bool = True) -> tuple[RunReport, RecordLog]:
        """Process frames until the source is exhausted (or limit packets),
        returning the aggregate report and the per-packet log.

        record_hook(index, slot_id) fires after each record is appended;
        slot_id is -1 for packets that failed before resolution.
        """
        sink = sink if sink is not None else NullSink()
        if limit is not None:
            capacity = limit
        else:
            # size the log up front when the source knows its length, so
            # growth stalls cannot land inside a paced run
            try:
                capacity = len(source)
            except TypeError:
                capacity = 4096
        log = RecordLog(capacity)
        overhead = measure_clock_overhead()
        it = iter(source)
        if limit is not None:
            it = _take(it, limit)
        gc_was_enabled = gc.isenabled()
        if disable_gc:
            gc.disable()
        try:
            incomplete, error = self._run_core(it, sink, log, record_hook)
        finally:
            if disable_gc and gc_was_enabled:
                gc.enable()
        report = summarize_log(log, warmup=warmup, clock_overhead_ns=overhead,
                               incomplete=incomplete, error=error)
        return report, log

    def _run_core(self, it, sink, log: RecordLog, record_hook) -> tuple[bool, str | None]:
        # Hot loop: locals bound once, stage callables shared across packets.
        clock = _clock
        parser = self.parser
        executor = self.executor
        action_logic = self.action_logic
        slots = self.bank.slots
        n_slots = len(slots)
        emit = sink.emit
        nan = np.nan
        ts0, ts1, ts2, ts3, ts4 = log.ts
        slot_col = log.slot
        score_col = log.score
        verdict_col = log.verdict
        reason_col = log.reason
        for _, frame in it:
            i = log.n
            if i >= slot_col.shape[0]:
                log._grow()
                ts0, ts1, ts2, ts3, ts4 = log.ts
                slot_col = log.slot
                score_col = log.score
                verdict_col = log.verdict
                reason_col = log.reason
            t0 = clock()
            sid = -1
            score = nan
            try:
                meta, view = parser(frame)
            except WrongLength:
                t1 = t2 = t3 = clock()
                action = _DROP_LENGTH
            except VersionMismatch:
                t1 = t2 = t3 = clock()
                action = _DROP_VERSION
            else:
                t1 = clock()
                k = meta.slot_id
                if k < n_slots:
                    model = slots[k]
                    sid = k
                    t2 = clock()
                    score = executor(model, view)
                    t3 = clock()
                    action = action_logic(meta, score)
                else:
                    t2 = t3 = clock()
                    action = _DROP_SLOT
            try:
                emit(frame, action)
            except Exception as exc:  # sink failure: abort with partial log
                t4 = clock()
                ts0[i] = t0
                ts1[i] = t1
                ts2[i] = t2
                ts3[i] = t3
                ts4[i] = t4
                slot_col[i] = sid
                score_col[i] = score
                verdict_col[i] = action.verdict
                reason_col[i] = action.reason
                log.n = i + 1
                return True, f"sink failure: {exc!r}"
            t4 = clock()
            ts0[i] = t0
            ts1[i] = t1
            ts2[i] = t2
            ts3[i] = t3
            ts4[i] = t4
            slot_col[i] = sid
            score_col[i] = score
            verdict_col[i] = action.verdict
            reason_col[i] = action.reason
            log.n = i + 1
            if record_hook is not None:
                record_hook(i, sid)
        return False, None


def _take(it, limit):
    for _ in range(limit):
        try:
            yield next(it)
        except StopIteration:
            return


def process_packet(bank: ModelBank, frame: bytes,
                   sequence_no: int = 0) -> PacketRecord:
    """One-shot convenience wrapper over Pipeline.process_packet."""
    return Pipeline(bank).process_packet(frame, sequence_no)


def run_pipeline(bank: ModelBank, source, sink=None, *,
                 limit: int | None = None, warmup: int = 0,
                 disable_gc: bool = False) -> tuple[RunReport, RecordLog]:
    """Build a pipeline over the bank and drain the source into the sink."""
    return Pipeline(bank).run(source, sink, limit=limit, warmup=warmup,
                              disable_gc=disable_gc)


def load_ring_frames(trace_path: str) -> list[bytes]:
    """Frames of a trace file, for preloading a RingSource."""
    return [frame for _, frame in read_trace(trace_path)]
