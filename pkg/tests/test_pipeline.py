"""Forwarding-path tests: the six-step flow, drop accounting, timing
invariants, and the single-pipeline property."""

import socket

import numpy as np
import pytest

from bnnswitch.bnn import infer_fast, infer_reference, random_model
from bnnswitch.model_bank import ModelBank
from bnnswitch.packet_format import PAYLOAD_LEN, PayloadView, build_frame
from bnnswitch.pipeline import (
    Action,
    CollectSink,
    NullSink,
    Pipeline,
    Reason,
    RingSource,
    TraceReplaySource,
    UdpSink,
    UdpSource,
    Verdict,
    decide_action,
    process_packet,
    run_pipeline,
)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def bank(rng):
    return ModelBank([random_model(rng), random_model(rng)])


def frame_for(rng, slot_id):
    return build_frame(slot_id, rng.integers(0, 256, PAYLOAD_LEN, np.uint8).tobytes())


def test_decide_action_threshold():
    # scores observed for one payload under two differently trained models
    assert decide_action(None, 1.98715).verdict == Verdict.DROP
    assert decide_action(None, -0.0181384).verdict == Verdict.FORWARD
    assert decide_action(None, 0.0).verdict == Verdict.FORWARD
    assert decide_action(None, 5.0).reason == Reason.INFERENCE


def test_slot_conditioned_scores_differ(rng, bank):
    payload = rng.integers(0, 256, PAYLOAD_LEN, np.uint8).tobytes()
    rec0 = process_packet(bank, build_frame(0, payload))
    rec1 = process_packet(bank, build_frame(1, payload))
    assert rec0.slot_used == 0 and rec1.slot_used == 1
    assert rec0.score != rec1.score
    view = PayloadView(payload)
    assert rec0.score == infer_fast(bank.slots[0], view)
    assert rec1.score == infer_fast(bank.slots[1], view)


def test_out_of_range_slot_drops_with_reason(rng, bank):
    rec = process_packet(bank, frame_for(rng, 7))
    assert rec.action.verdict == Verdict.DROP
    assert rec.action.reason == Reason.SLOT_OUT_OF_RANGE
    assert rec.slot_used is None and rec.score is None


def test_wrong_length_and_version_drop(rng, bank):
    rec = process_packet(bank, b"\x00" * 100)
    assert rec.action.reason == Reason.WRONG_LENGTH
    bad_version = build_frame(0, b"\x00" * PAYLOAD_LEN, format_version=9)
    rec = process_packet(bank, bad_version)
    assert rec.action.reason == Reason.VERSION_MISMATCH


def test_processing_is_deterministic(rng, bank):
    frame = frame_for(rng, 1)
    a = process_packet(bank, frame)
    b = process_packet(bank, frame)
    assert (a.slot_used, a.score, a.action) == (b.slot_used, b.score, b.action)


def test_record_timestamps_nondecreasing(rng, bank):
    for slot in (0, 1, 9):
        rec = process_packet(bank, frame_for(rng, slot))
        ts = rec.timestamps
        seq = [ts.ingress, ts.post_parse, ts.post_resolve, ts.post_infer,
               ts.egress]
        assert seq == sorted(seq)


def test_stage_additivity(rng, bank):
    rec = process_packet(bank, frame_for(rng, 0))
    ts = rec.timestamps
    assert (ts.egress - ts.ingress) >= ((ts.post_infer - ts.post_resolve)
                                        + (ts.post_resolve - ts.post_parse))


def test_run_over_ring(rng, bank):
    frames = [frame_for(rng, i % 2) for i in range(64)]
    report, log = run_pipeline(bank, RingSource(frames, 64))
    assert report.offered == 64
    assert report.processed == 64
    assert report.processed == report.forwarded + report.dropped_inference
    assert len(log) == 64
    assert report.pps > 0
    assert report.stage_stats["end_to_end"]["mean_ns"] >= \
        report.stage_stats["infer"]["mean_ns"]


def test_empty_source(bank):
    report, log = run_pipeline(bank, [])
    assert report.offered == 0 and report.processed == 0
    assert report.stage_stats["end_to_end"] == {}
    assert report.pps == 0.0
    assert len(log) == 0


def test_verdicts_match_oracle_recompute(rng, bank):
    from bnnswitch.packet_format import parse_frame

    frames = [frame_for(rng, int(rng.integers(0, 2))) for _ in range(200)]
    report, log = run_pipeline(bank, RingSource(frames, 200))
    assert report.processed == 200
    for i, rec in enumerate(log):
        _, view = parse_frame(frames[i])
        expected = infer_reference(bank.slots[rec.slot_used], view)
        assert rec.score == expected
        assert rec.action.verdict == (Verdict.DROP if expected > 0
                                      else Verdict.FORWARD)


def test_drops_only_where_scores_positive(rng, bank):
    frames = [frame_for(rng, int(rng.integers(0, 2))) for _ in range(500)]
    report, log = run_pipeline(bank, RingSource(frames, 500))
    for rec in log:
        assert rec.action.reason == Reason.INFERENCE
        assert (rec.action.verdict == Verdict.DROP) == (rec.score > 0)


def test_single_pipeline_instances_serve_all_packets(rng, bank):
    calls = {"parse": 0, "infer": 0, "act": 0}
    from bnnswitch.packet_format import parse_frame

    def counting_parser(frame):
        calls["parse"] += 1
        return parse_frame(frame)

    def counting_executor(model, view):
        calls["infer"] += 1
        return infer_fast(model, view)

    def counting_action(meta, score):
        calls["act"] += 1
        return decide_action(meta, score)

    p = Pipeline(bank, parser=counting_parser, executor=counting_executor,
                 action_logic=counting_action)
    frames = [frame_for(rng, i % 2) for i in range(32)]
    p.run(RingSource(frames, 32))
    assert calls == {"parse": 32, "infer": 32, "act": 32}
    # stage callables are single shared objects across the whole run
    assert p.parser is counting_parser
    assert p.executor is counting_executor
    assert p.action_logic is counting_action


def test_metadata_only_switching_same_code_path(rng, bank):
    # two frames differing only in the reg0 slot byte run the same stages
    payload = rng.integers(0, 256, PAYLOAD_LEN, np.uint8).tobytes()
    rec0 = process_packet(bank, build_frame(0, payload))
    rec1 = process_packet(bank, build_frame(1, payload))
    assert rec0.slot_used != rec1.slot_used
    assert rec0.action.reason == rec1.action.reason == Reason.INFERENCE
    # both records carry the full five-stage timeline
    for rec in (rec0, rec1):
        ts = rec.timestamps
        assert ts.post_parse >= ts.ingress and ts.egress >= ts.post_infer


def test_sink_failure_flags_incomplete(rng, bank):
    class FailingSink:
        def __init__(self):
            self.calls = 0

        def emit(self, frame, action):
            self.calls += 1
            if self.calls >= 3:
                raise IOError("downstream gone")

    frames = [frame_for(rng, 0) for _ in range(10)]
    report, log = run_pipeline(bank, RingSource(frames, 10), FailingSink())
    assert report.incomplete
    assert "sink failure" in report.error
    assert report.offered == 3
    assert len(log) == 3


def test_collect_sink_receives_actions(rng, bank):
    frames = [frame_for(rng, 0), frame_for(rng, 9)]
    sink = CollectSink()
    run_pipeline(bank, RingSource(frames, 2), sink)
    assert len(sink.items) == 2
    assert sink.items[1][1].reason == Reason.SLOT_OUT_OF_RANGE


def test_trace_replay_source_paces(rng, bank):
    frames = [frame_for(rng, 0) for _ in range(8)]
    gap_ns = 2_000_000
    records = [(i * gap_ns, f) for i, f in enumerate(frames)]
    report, log = run_pipeline(bank, TraceReplaySource(records))
    egress = [log.record(i).timestamps.egress for i in range(len(log))]
    gaps = np.diff(egress)
    assert gaps.min() > 0.5 * gap_ns


def test_udp_source_and_sink_loopback(rng, bank):
    src = UdpSource(("127.0.0.1", 0), limit=4, timeout_s=2.0)
    out_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    out_sock.bind(("127.0.0.1", 0))
    out_sock.settimeout(2.0)
    sink = UdpSink(("127.0.0.1", out_sock.getsockname()[1]))

    frames = [frame_for(rng, 0) for _ in range(4)]
    tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    for f in frames:
        tx.sendto(f, ("127.0.0.1", src.port))
    report, log = run_pipeline(bank, src, sink)
    assert report.offered == 4
    assert report.processed == 4
    # forwarded frames arrive as raw 1088-byte datagrams
    for _ in range(report.forwarded):
        data, _ = out_sock.recvfrom(4096)
        assert len(data) == 1088
    tx.close()
    out_sock.close()
    sink.close()


def test_csv_dump(rng, bank, tmp_path):
    frames = [frame_for(rng, i % 2) for i in range(4)]
    _, log = run_pipeline(bank, RingSource(frames, 4))
    out = tmp_path / "records.csv"
    with open(out, "w", newline="") as fh:
        log.write_csv(fh)
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 5
    assert lines[0].startswith("sequence_no,slot_used,score")
