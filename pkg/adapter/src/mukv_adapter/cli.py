"""Adapter script: build the tiny checkpoint, then run segments end to end
through the engine's CLI and decode a question against the emitted context.
"""

from __future__ import annotations

import argparse
import json
import shutil
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from mukv.config import EngineConfig
from mukv.core import ALL_LEVELS
from mukv.store import MANIFEST_NAME, Store
from mukv.wire import decode_context, encode_question, encode_segment

from .config import AdapterConfig
from .decode import decode_with_context
from .extract import extract_question, extract_segment
from .model import build_checkpoint, check_geometry, load_model


def _engine_config(config: AdapterConfig, out_dir: Path) -> tuple[EngineConfig, Path]:
    engine = replace(
        EngineConfig(),
        geometry=config.geometry,
        fps=config.fps,
        store_path=str(out_dir / "store"),
        seed=config.seed,
    )
    path = out_dir / "engine.json"
    engine.save(path)
    return engine, path


def _run_engine(args: list[str]) -> None:
    result = subprocess.run(
        [sys.executable, "-m", "mukv", *args], capture_output=True, text=True
    )
    if result.returncode != 0:
        raise RuntimeError(
            f"engine command {' '.join(args)} exited {result.returncode}: {result.stderr.strip()}"
        )


def run_pipeline(config: AdapterConfig, segments: int, question: str) -> str:
    """Ingest N segments end to end, query, and decode the answer.

    Each invocation is a fresh pipeline: the store this adapter created
    under out_dir on a previous run is discarded first.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(config.model_dir)
    check_geometry(model, config.geometry)
    engine, engine_cfg_path = _engine_config(config, out_dir)
    plan = engine.plan()
    store_dir = Path(engine.store_path)
    if store_dir.exists():
        shutil.rmtree(store_dir)

    for t in range(segments):
        if (store_dir / MANIFEST_NAME).exists():
            store = Store.load(store_dir)
            rolling = {level: store.rolling_context(level, t) for level in ALL_LEVELS}
        else:
            rolling = {}
        record = extract_segment(model, config, plan, t, rolling, engine.time_span(t))
        segment_path = out_dir / f"segment_{t:04d}.muks"
        segment_path.write_bytes(encode_segment(record))
        _run_engine(["ingest", "--config", str(engine_cfg_path), str(segment_path)])

    asked_at = segments * engine.segment_seconds + 1.0
    question_record = extract_question(model, config, question, asked_at)
    question_path = out_dir / "question.mukq"
    question_path.write_bytes(encode_question(question_record))
    context_path = out_dir / "context.mukc"
    _run_engine(
        [
            "query",
            "--config",
            str(engine_cfg_path),
            str(question_path),
            "--emit-context",
            str(context_path),
        ]
    )
    context = decode_context(context_path.read_bytes())
    answer = decode_with_context(model, question, context, config.max_new_tokens)
    (out_dir / "answer.txt").write_text(answer + "\n")
    return answer


def cmd_init_model(args) -> int:
    config = AdapterConfig.from_file(args.config)
    build_checkpoint(config.model_dir, config.geometry, config.seed, config.n_positions)
    print(f"checkpoint written to {config.model_dir}")
    return 0


def cmd_run(args) -> int:
    config = AdapterConfig.from_file(args.config)
    answer = run_pipeline(config, args.segments, args.question)
    print(json.dumps({"question": args.question, "answer": answer}))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mukv-adapter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="build the deterministic tiny checkpoint")
    p.add_argument("--config", required=True, help="adapter config JSON")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("run", help="ingest segments end to end and answer a question")
    p.add_argument("--config", required=True, help="adapter config JSON")
    p.add_argument("--segments", type=int, default=5)
    p.add_argument("--question", default="what happened in the stream?")
    p.set_defaults(func=cmd_run)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
