"""Command-line entry point: every operation as a subcommand.

Parameters resolve in three layers: built-in defaults, then a plain-text
key=value config file (--config), then explicit command-line flags. The
full effective configuration and a schema version are embedded in every
emitted JSON report so runs can be reproduced from their reports alone.

Exit codes: 0 success, 1 operational error (single-line structured
message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import bnn, harness, model_bank, packet_format, pipeline, trainer

log = logging.getLogger("bnnswitch")

SCHEMA_VERSION = "1"

DEFAULTS: dict[str, dict] = {
    "train": {"seed": 1, "samples": 4096, "prior": 0.5, "pos_weight": 4.0,
              "epochs": 20, "learning_rate": 0.025, "select_by": "recall",
              "train_seed": 11, "hidden": 32, "batch_size": 128},
    "gen-data": {"seed": 1, "samples": 4096, "prior": 0.5},
    "gen-trace": {"packets": 64, "boundary": 32, "pace_ns": 10_000,
                  "payload_seed": 0},
    "run": {"source": "ring", "limit": 1024, "pace": True, "warmup": 64,
            "udp_port": 47031, "udp_timeout_s": 2.0},
    "inspect-model": {"d": 8192, "h": 32},
    "bank-info": {"d": 8192},
    "bench-breakdown": {"packets": 100_000, "payload_seed": 0, "warmup": 64},
    "bench-scaling": {"packets": 100_000, "n_infer": 20_000, "reps": 7,
                      "pattern_seed": 0, "payload_seed": 0},
    "replay-continuity": {"warmup": 64, "pace": True},
    "compare-control": {"delivery_us": 4000.0, "warmup": 64, "pace": True},
}


def load_config_file(path: str) -> dict[str, str]:
    """key = value lines; '#' starts a comment; keys use underscores."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(raw: str, like) -> object:
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit CLI flags."""
    merged = dict(DEFAULTS[command])
    file_values = load_config_file(args.config) if args.config else {}
    for key, default in merged.items():
        if key in file_values:
            merged[key] = _coerce(file_values[key], default)
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
    return merged


def emit_report(command: str, config: dict, results: dict,
                path: str | None) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "command": command,
           "config": config, **results}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
        log.info("report written to %s", path)
    else:
        print(text)


def _dump_csv(log_obj, path: str | None) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            log_obj.write_csv(fh)
        log.info("per-packet records written to %s", path)


# ---------------------------------------------------------------------------
# subcommand implementations

def cmd_train(args) -> int:
    cfg = effective_config("train", args)
    if args.data:
        dataset = trainer.load_dataset(args.data)
    else:
        dataset = trainer.generate_dataset(trainer.GeneratorParams.default(
            seed=cfg["seed"], n_samples=cfg["samples"],
            class_prior=cfg["prior"]))
    train_cfg = trainer.TrainConfig(
        pos_weight=cfg["pos_weight"], epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"], seed=cfg["train_seed"],
        selection_metric=cfg["select_by"], hidden=cfg["hidden"],
        batch_size=cfg["batch_size"])
    model = trainer.train_bnn(dataset, train_cfg)
    bnn.save_model(model, args.out)
    log.info("model written to %s (%d bytes)", args.out,
             model.serialized_size)
    _, val = trainer.split_dataset(dataset, train_cfg.val_fraction,
                                   train_cfg.seed)
    metrics = trainer.evaluate(model, val)
    metrics_path = args.metrics_out or args.out + ".metrics.json"
    emit_report("train", cfg,
                {"model_path": args.out, "size_bytes": model.serialized_size,
                 "validation": metrics.to_dict()}, metrics_path)
    return 0


def cmd_gen_data(args) -> int:
    cfg = effective_config("gen-data", args)
    dataset = trainer.generate_dataset(trainer.GeneratorParams.default(
        seed=cfg["seed"], n_samples=cfg["samples"], class_prior=cfg["prior"]))
    trainer.save_dataset(args.out, dataset)
    log.info("dataset written to %s (%d samples, %d malicious)", args.out,
             len(dataset), int(dataset.labels.sum()))
    return 0


def cmd_gen_trace(args) -> int:
    cfg = effective_config("gen-trace", args)
    if args.data:
        payload_source = harness.cycled_payloads(
            trainer.load_dataset(args.data).payloads)
    else:
        payload_source = harness.seeded_random_payloads(cfg["payload_seed"])
    records = harness.gen_boundary_trace(
        cfg["packets"], cfg["boundary"], payload_source,
        pace_ns=cfg["pace_ns"])
    packet_format.write_trace(args.out, records)
    log.info("trace written to %s (%d records)", args.out, len(records))
    return 0


def _load_bank(paths, d=8192):
    return model_bank.load_bank(paths, d=d)


def cmd_run(args) -> int:
    cfg = effective_config("run", args)
    bank = _load_bank(args.bank)
    harness.warm_bank(bank)
    source_kind = cfg["source"]
    if source_kind == "ring":
        frames = pipeline.load_ring_frames(args.trace)
        source = pipeline.RingSource(frames, cfg["limit"])
    elif source_kind == "trace":
        records = packet_format.read_trace(args.trace)
        source = pipeline.TraceReplaySource(records, pace=cfg["pace"])
    elif source_kind == "udp":
        source = pipeline.UdpSource(("127.0.0.1", cfg["udp_port"]),
                                    limit=cfg["limit"],
                                    timeout_s=cfg["udp_timeout_s"])
        log.info("listening for frames on udp port %d", source.port)
    else:
        raise ValueError(f"unknown source {source_kind!r}")
    report, rec_log = pipeline.run_pipeline(bank, source,
                                            warmup=cfg["warmup"],
                                            disable_gc=True)
    emit_report("run", cfg, {"results": report.to_dict()}, args.report)
    _dump_csv(rec_log, args.csv)
    return 0


def cmd_inspect_model(args) -> int:
    cfg = effective_config("inspect-model", args)
    model = bnn.load_model(args.model, d=cfg["d"], h=cfg["h"])
    results = {
        "d": model.d,
        "h": model.h,
        "size_bytes": model.serialized_size,
        "b1": {"min": int(model.b1.min()), "max": int(model.b1.max()),
               "mean": float(model.b1.mean())},
        "w2": {"min": float(model.w2.min()), "max": float(model.w2.max()),
               "mean": float(model.w2.mean())},
        "b2": float(model.b2),
    }
    emit_report("inspect-model", cfg, results, args.report)
    return 0


def cmd_bank_info(args) -> int:
    cfg = effective_config("bank-info", args)
    bank = _load_bank(args.bank, d=cfg["d"])
    emit_report("bank-info", cfg, bank.info(), args.report)
    return 0


def cmd_bench_breakdown(args) -> int:
    cfg = effective_config("bench-breakdown", args)
    bank = _load_bank(args.bank)
    report = harness.bench_breakdown(bank, cfg["packets"],
                                     payload_seed=cfg["payload_seed"],
                                     warmup=cfg["warmup"])
    emit_report("bench-breakdown", cfg, {"results": report.to_dict()},
                args.report)
    return 0


def cmd_bench_scaling(args) -> int:
    cfg = effective_config("bench-scaling", args)
    model_a = bnn.load_model(args.model_a)
    model_b = bnn.load_model(args.model_b)
    bank2 = model_bank.ModelBank([model_a, model_b])
    bank16 = model_bank.ModelBank([model_a, model_b] * 8)
    report = harness.bench_scaling(
        bank2, bank16, harness.standard_patterns(cfg["pattern_seed"]),
        cfg["packets"], n_infer=cfg["n_infer"], reps=cfg["reps"],
        payload_seed=cfg["payload_seed"])
    emit_report("bench-scaling", cfg, {"results": report.to_dict()},
                args.report)
    return 0


def cmd_replay_continuity(args) -> int:
    cfg = effective_config("replay-continuity", args)
    bank = _load_bank(args.bank)
    records = packet_format.read_trace(args.trace)
    report = harness.run_continuity(bank, records, pace=cfg["pace"],
                                    warmup=cfg["warmup"])
    emit_report("replay-continuity", cfg, {"results": report.to_dict()},
                args.report)
    return 0


def cmd_compare_control(args) -> int:
    cfg = effective_config("compare-control", args)
    model_a = bnn.load_model(args.model_a)
    model_b = bnn.load_model(args.model_b)
    records = packet_format.read_trace(args.trace)
    report = harness.run_control_compare(
        model_a, model_b, records,
        delivery_latency_ns=int(cfg["delivery_us"] * 1000),
        warmup=cfg["warmup"], pace=cfg["pace"],
        unix_path=args.unix_socket)
    emit_report("compare-control", cfg, {"results": report.to_dict()},
                args.report)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bnnswitch",
        description="Per-packet switching between resident BNN models.")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on synthetic traffic")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--samples", type=int)
    p.add_argument("--prior", type=float, help="malicious class prior")
    p.add_argument("--pos-weight", type=float, dest="pos_weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--select-by", choices=["recall", "precision"],
                   dest="select_by")
    p.add_argument("--train-seed", type=int, dest="train_seed")
    p.add_argument("--hidden", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--data", help="dataset file instead of generating")
    p.add_argument("--out", required=True, help="weight file path")
    p.add_argument("--metrics-out", dest="metrics_out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--prior", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-trace", help="write a boundary trace file")
    p.add_argument("--packets", type=int)
    p.add_argument("--boundary", type=int)
    p.add_argument("--pace-ns", type=int, dest="pace_ns")
    p.add_argument("--payload-seed", type=int, dest="payload_seed")
    p.add_argument("--data", help="draw payloads from a dataset file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("run", help="run the forwarding pipeline")
    p.add_argument("--bank", nargs="+", required=True, help="weight files")
    p.add_argument("--source", choices=["ring", "trace", "udp"])
    p.add_argument("--trace", help="trace file (ring and trace sources)")
    p.add_argument("--limit", type=int)
    pace = p.add_mutually_exclusive_group()
    pace.add_argument("--pace", dest="pace", action="store_true",
                      default=None)
    pace.add_argument("--no-pace", dest="pace", action="store_false",
                      default=None)
    p.add_argument("--warmup", type=int)
    p.add_argument("--udp-port", type=int, dest="udp_port")
    p.add_argument("--report")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("inspect-model", help="print model facts as JSON")
    p.add_argument("model")
    p.add_argument("--d", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_inspect_model)

    p = sub.add_parser("bank-info", help="print bank facts as JSON")
    p.add_argument("bank", nargs="+", help="weight files")
    p.add_argument("--d", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bank_info)

    p = sub.add_parser("bench-breakdown",
                       help="selection / inference / full-path latency")
    p.add_argument("--bank", nargs="+", required=True)
    p.add_argument("--packets", type=int)
    p.add_argument("--payload-seed", type=int, dest="payload_seed")
    p.add_argument("--warmup", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench_breakdown)

    p = sub.add_parser("bench-scaling",
                       help="2-slot vs 16-slot selection latency")
    p.add_argument("--model-a", required=True, dest="model_a")
    p.add_argument("--model-b", required=True, dest="model_b")
    p.add_argument("--packets", type=int)
    p.add_argument("--n-infer", type=int, dest="n_infer")
    p.add_argument("--reps", type=int)
    p.add_argument("--pattern-seed", type=int, dest="pattern_seed")
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench_scaling)

    p = sub.add_parser("replay-continuity",
                       help="replay a boundary trace and count mismatches")
    p.add_argument("--bank", nargs="+", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--warmup", type=int)
    pace = p.add_mutually_exclusive_group()
    pace.add_argument("--pace", dest="pace", action="store_true",
                      default=None)
    pace.add_argument("--no-pace", dest="pace", action="store_false",
                      default=None)
    p.add_argument("--report")
    p.set_defaults(func=cmd_replay_continuity)

    p = sub.add_parser("compare-control",
                       help="resident switching vs control-plane replacement")
    p.add_argument("--model-a", required=True, dest="model_a",
                   help="slot 0 weights (active from start)")
    p.add_argument("--model-b", required=True, dest="model_b",
                   help="slot 1 weights (delivered over the control channel)")
    p.add_argument("--trace", required=True)
    p.add_argument("--delivery-us", type=float, dest="delivery_us")
    p.add_argument("--warmup", type=int)
    pace = p.add_mutually_exclusive_group()
    pace.add_argument("--pace", dest="pace", action="store_true",
                      default=None)
    pace.add_argument("--no-pace", dest="pace", action="store_false",
                      default=None)
    p.add_argument("--unix-socket", dest="unix_socket")
    p.add_argument("--report")
    p.set_defaults(func=cmd_compare_control)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
