"""Operator command line: ingest, query, stats, inspect, bench.

Exit codes: 0 success, 2 usage, 3 decode failure, 4 validation failure,
5 store integrity failure. Configuration comes from --config (or the
MUKV_CONFIG environment variable), with flags winning over the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .config import EngineConfig
from .core import BlockId
from .dcp import compress_segment
from .errors import (
    DecodeError,
    EngineError,
    StoreIntegrityError,
    ValidationError,
)
from .granularity import validate_record
from .retrieval import assemble_context, retrieve
from .simbench import SyntheticScenario, render_csv, render_table, run_bench
from .store import MANIFEST_NAME, Store
from .wire import decode_question, decode_segment, encode_context, scan_record_length

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DECODE = 3
EXIT_VALIDATION = 4
EXIT_INTEGRITY = 5


def _load_config(args) -> EngineConfig:
    path = getattr(args, "config", None) or os.environ.get("MUKV_CONFIG")
    cfg = EngineConfig.from_file(path) if path else EngineConfig()
    k = None
    if getattr(args, "k", None):
        k = tuple(int(x) for x in _triple(args.k))
    return cfg.with_overrides(
        store_path=getattr(args, "store", None),
        mode=getattr(args, "mode", None),
        rho=_triple(args.rho) if getattr(args, "rho", None) else None,
        alpha=_triple(args.alpha) if getattr(args, "alpha", None) else None,
        k=k,
        coherence=_triple(getattr(args, "coherence", None)) if getattr(args, "coherence", None) else None,
        indicator_mode=getattr(args, "indicator_mode", None),
        fps=getattr(args, "fps", None),
        seed=getattr(args, "seed", None),
        levels=getattr(args, "levels", None).split(",") if getattr(args, "levels", None) else None,
    )


def _triple(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) == 1:
        v = float(parts[0])
        return (v, v, v)
    if len(parts) == 3:
        return tuple(float(x) for x in parts)  # type: ignore[return-value]
    raise ValueError(f"expected VALUE or PATCH:FRAME:SEGMENT, got {text!r}")


def _load_store(path) -> Store:
    try:
        return Store.load(path)
    except (DecodeError, StoreIntegrityError) as exc:
        raise StoreIntegrityError(f"store at {path}: {exc}") from exc


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    plan = cfg.plan()
    store_path = Path(cfg.store_path)
    if (store_path / MANIFEST_NAME).exists():
        store = _load_store(store_path)
        if store.geometry != cfg.geometry:
            raise ValidationError(
                f"store geometry {store.geometry} does not match config {cfg.geometry}"
            )
    else:
        store = Store(cfg.geometry, cfg.policy_snapshot())
    skipped = 0
    for input_path in args.inputs:
        data = Path(input_path).read_bytes()
        offset = 0
        while offset < len(data):
            try:
                record, next_offset = decode_segment(data, offset)
            except DecodeError as exc:
                if not args.skip_bad:
                    raise
                declared = scan_record_length(data, offset)
                if declared is None or offset + declared > len(data):
                    logger.warning("cannot resync after bad record in %s: %s", input_path, exc)
                    skipped += 1
                    break
                logger.warning("skipping undecodable record at offset %d: %s", offset, exc)
                skipped += 1
                offset += declared
                continue
            offset = next_offset
            validate_record(record, plan)
            blocks = compress_segment(record, cfg.retention)
            tokens_in = sum(b.token_count for b in record.blocks)
            retained = sum(b.kappa for b in blocks)
            store.append_segment(blocks, record.segment_index)
            print(
                f"segment={record.segment_index} tokens_in={tokens_in} "
                f"retained={retained} total={store.total_tokens}"
            )
    store.persist(store_path)
    if skipped:
        print(f"skipped={skipped} undecodable records", file=sys.stderr)
    if cfg.byte_budget_warning is not None:
        estimated = store.stats().estimated_bytes
        if estimated > cfg.byte_budget_warning:
            logger.warning(
                "store estimate %d bytes exceeds the %d-byte budget (nothing evicted)",
                estimated,
                cfg.byte_budget_warning,
            )
    print(f"stored={store.total_tokens:,} tokens")
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = _load_config(args)
    store = _load_store(cfg.store_path)
    question = decode_question(Path(args.question).read_bytes())
    result = retrieve(question, store, cfg.retrieval)
    selected = result.all_blocks()
    context_rows = None
    if args.emit_context:
        context = assemble_context(result, store)
        Path(args.emit_context).write_bytes(encode_context(context))
        context_rows = context.rows
    if args.json:
        payload = {
            "mode": result.mode.value,
            "asked_at": question.asked_at,
            "selected": {
                level.label: [
                    {
                        "block": str(sb.block_id),
                        "timestamp": sb.block.timestamp,
                        "stage1": sb.stage1,
                        "stage2": sb.stage2,
                    }
                    for sb in result.level(level)
                ]
                for level in cfg.retrieval.levels
            },
        }
        if context_rows is not None:
            payload["context_rows"] = context_rows
            payload["context_path"] = args.emit_context
        print(json.dumps(payload, indent=2))
        return EXIT_OK
    print(f"mode={result.mode.value} asked_at={question.asked_at}")
    for level in cfg.retrieval.levels:
        rows = result.level(level)
        print(f"granularity={level.label} selected={len(rows)}")
        for rank, sb in enumerate(rows, 1):
            print(
                f"  {rank}. {sb.block_id} t={sb.block.timestamp:.2f}s "
                f"s={sb.stage1:.4f} s~={sb.stage2:.4f}"
            )
    print(f"{len(selected)} blocks selected")
    if context_rows is not None:
        print(f"context rows per layer: {context_rows} -> {args.emit_context}")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _load_config(args)
    store = _load_store(cfg.store_path)
    report = store.stats()
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
        return EXIT_OK
    print(f"segments={report.segments} frames={report.frames}")
    for level, count in report.block_counts.items():
        print(f"{level.label}: blocks={count} tokens={report.token_counts[level]}")
    print(f"total tokens={report.total_tokens:,}")
    print(f"tokens per 300 frames={report.tokens_per_300_frames:,.1f}")
    print(f"estimated bytes={report.estimated_bytes:,}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _load_config(args)
    block_id = BlockId.parse(args.block)
    try:
        block = Store.load_block(cfg.store_path, block_id)
    except (DecodeError, StoreIntegrityError) as exc:
        raise StoreIntegrityError(f"store at {cfg.store_path}: {exc}") from exc
    scores = block.fused_scores
    payload = {
        "block": str(block.block_id),
        "timestamp": block.timestamp,
        "kappa": block.kappa,
        "retained_indices": [int(i) for i in block.retained_indices],
        "scores": {
            "min": float(scores.min()),
            "mean": float(scores.mean()),
            "max": float(scores.max()),
        },
        "summary_sha256": hashlib.sha256(block.summary.tobytes()).hexdigest(),
        "layer_checksums": [
            {
                "keys_sha256": hashlib.sha256(k.tobytes()).hexdigest(),
                "values_sha256": hashlib.sha256(v.tobytes()).hexdigest(),
            }
            for k, v in zip(block.layer_keys, block.layer_values)
        ],
    }
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(f"block {payload['block']} t={block.timestamp:.2f}s kappa={block.kappa}")
        print(f"retained: {payload['retained_indices']}")
        print(
            f"scores: min={payload['scores']['min']:.4f} "
            f"mean={payload['scores']['mean']:.4f} max={payload['scores']['max']:.4f}"
        )
        print(f"summary sha256: {payload['summary_sha256']}")
        for layer, sums in enumerate(payload["layer_checksums"]):
            print(f"layer {layer}: K {sums['keys_sha256'][:16]} V {sums['values_sha256'][:16]}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    scenario = SyntheticScenario.from_file(args.scenario)
    rows = run_bench(cfg, scenario, args.sweep)
    print(render_table(rows))
    if args.out:
        Path(args.out).write_text(render_csv(rows))
        print(f"csv written to {args.out}", file=sys.stderr)
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="engine config JSON (default: $MUKV_CONFIG)")
    parser.add_argument("--store", help="store directory (overrides config)")
    parser.add_argument("--seed", type=int, help="stream seed override")
    parser.add_argument("--fps", type=float, help="frames per second override")
    parser.add_argument("--rho", help="retention ratio, VALUE or PATCH:FRAME:SEGMENT")
    parser.add_argument("--alpha", help="attention weight, VALUE or PATCH:FRAME:SEGMENT")
    parser.add_argument("--k", help="retrieval budget, VALUE or PATCH:FRAME:SEGMENT")
    parser.add_argument(
        "--lambda", dest="coherence", help="coherence factor, VALUE or PATCH:FRAME:SEGMENT"
    )
    parser.add_argument(
        "--indicator-mode",
        dest="indicator_mode",
        choices=["dual", "attention_only", "frequency_only", "random"],
    )
    parser.add_argument("--levels", help="comma list of enabled levels, e.g. frame")
    parser.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mukv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="decode, compress, and append segment records")
    _add_common(p)
    p.add_argument("inputs", nargs="*", help=".muks files (concatenated records allowed)")
    p.add_argument("--skip-bad", action="store_true", help="continue past decode failures")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="retrieve blocks for a question record")
    _add_common(p)
    p.add_argument("question", help=".mukq question record")
    p.add_argument("--mode", choices=["parallel", "hierarchical", "semi_hierarchical"])
    p.add_argument("--emit-context", help="write the assembled .mukc context here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("stats", help="memory accounting report")
    _add_common(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("inspect", help="dump one block's metadata and checksums")
    _add_common(p)
    p.add_argument("block", help="block id, e.g. frame:3:0")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="sweep benchmark over a synthetic scenario")
    _add_common(p)
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--sweep", default="", help="e.g. rho=1.0,0.5,0.25 or mode=parallel,semi_hierarchical")
    p.add_argument("--mode", choices=["parallel", "hierarchical", "semi_hierarchical"])
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except StoreIntegrityError as exc:
        print(f"store integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DecodeError as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
