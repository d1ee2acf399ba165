"""Acceptance suite: one test per criterion, each printing a pass line.

Run as: pytest tests/test_acceptance.py -v -s
Token-accounting criteria run on synthetic 75-segment streams with the
reference token grid (P=196, F=4, S=4) at desk-scale layers (L=2, H=2, D=8).
"""

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from mukv.cli import main
from mukv.config import EngineConfig
from mukv.core import GranularityLevel, PerLevel
from mukv.dcp import frequency_indicator, fuse_scores, select_topk
from mukv.errors import DecodeError, ValidationError
from mukv.granularity import validate_record
from mukv.retrieval import (
    RetrievalConfig,
    RetrievalMode,
    assemble_context,
    retrieve,
    stage2_rerank,
)
from mukv.simbench import DistractorSpec, SyntheticScenario, eval_recall, gen_stream, write_stream
from mukv.store import Store
from mukv.wire import decode_segment, encode_question, encode_segment

from conftest import (
    DESK,
    SMALL,
    TINY,
    dft_magnitude_mean_oracle,
    ingest_records,
    random_record,
    topk_oracle,
)
from test_retrieval import make_block, question, random_summary_store

STREAM_SCENARIO = SyntheticScenario(
    seed=75, num_segments=75, geometry=DESK, relevant_segments=frozenset({37})
)


def _pass(num: int, text: str) -> None:
    print(f"\n[PASS] criterion {num:02d}: {text}")


@pytest.fixture(scope="module")
def desk_cfg():
    return replace(EngineConfig(), geometry=DESK)


@pytest.fixture(scope="module")
def stream75(desk_cfg):
    records, questions, labels = gen_stream(STREAM_SCENARIO, desk_cfg)
    return records, questions, labels


def test_criterion_01_uncompressed_memory_accounting(desk_cfg, stream75):
    records, _, _ = stream75
    cfg = replace(desk_cfg, retention=replace(desk_cfg.retention, rho=PerLevel(1.0, 1.0, 1.0)))
    started = time.monotonic()
    store = ingest_records(records, cfg)
    elapsed = time.monotonic() - started
    stats = store.stats()
    assert stats.total_tokens == 176_400
    assert abs(stats.total_tokens - 177_000) / 177_000 < 0.005
    assert stats.tokens_per_300_frames == pytest.approx(176_400)  # 75 segments = 300 frames
    assert elapsed < 60.0
    _pass(1, f"uncompressed store holds 176,400 tokens (~177K) in {elapsed:.1f}s")


def test_criterion_02_compressed_memory_accounting(desk_cfg, stream75, tmp_path, capsys):
    records, _, _ = stream75
    store = ingest_records(records, desk_cfg)  # default rho (0.1, 0.1, 0.8)
    assert store.total_tokens == 57_525
    assert store.stats().tokens_per_300_frames == pytest.approx(57_525)
    assert abs(store.total_tokens - 59_000) / 59_000 < 0.03
    sweep_expect = {0.5: 89_000, 0.25: 44_000}
    observed = {}
    for rho, anchor in sweep_expect.items():
        cfg = replace(desk_cfg, retention=replace(desk_cfg.retention, rho=PerLevel(rho, rho, rho)))
        tokens = ingest_records(records, cfg).total_tokens
        observed[rho] = tokens
        assert abs(tokens - anchor) / anchor < 0.03

    # same accounting through the operator CLI, per-segment log included
    cli_cfg = replace(desk_cfg, store_path=str(tmp_path / "store"))
    cfg_path = tmp_path / "config.json"
    cli_cfg.save(cfg_path)
    stream_path = tmp_path / "stream.muks"
    write_stream(records, stream_path)
    assert main(["ingest", "--config", str(cfg_path), str(stream_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("segment=") == 75
    assert out.splitlines()[-1] == "stored=57,525 tokens"
    _pass(
        2,
        "compressed accounting: 57,525 (~59K), "
        f"rho=0.5 -> {observed[0.5]:,} (~89K), rho=0.25 -> {observed[0.25]:,} (~44K)",
    )


def test_criterion_03_inference_token_accounting(desk_cfg, stream75):
    records, questions, _ = stream75
    store = ingest_records(records, desk_cfg)
    config = replace(desk_cfg.retrieval, mode=RetrievalMode.PARALLEL)
    assert config.k.as_tuple() == (20, 32, 12)
    context = assemble_context(retrieve(questions[0], store, config), store)
    assert context.rows == 8_212  # 20*4 + 32*19 + 12*627
    assert abs(context.rows - 8_300) / 8_300 < 0.02

    # per-frame baseline: frame granularity only, full retention, 64 blocks
    base_cfg = replace(desk_cfg, levels=(GranularityLevel.FRAME,)).with_overrides(
        rho=(1.0, 1.0, 1.0), k=(64, 64, 64)
    )
    base_records, base_questions, _ = gen_stream(STREAM_SCENARIO, base_cfg)
    base_store = ingest_records(base_records, base_cfg)
    assert base_store.total_tokens == 58_800  # 196 * 300
    base_context = assemble_context(
        retrieve(base_questions[0], base_store, base_cfg.retrieval), base_store
    )
    assert base_context.rows == 12_544  # 64 * 196
    _pass(3, "context rows: multi-grained 8,212 (~8.3K); per-frame baseline 12,544 (~12.5K)")


def test_criterion_04_frequency_oracle():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 257))
        d = int(rng.integers(1, 65))
        keys = rng.normal(size=(n, d)).astype(np.float32)
        got = frequency_indicator(keys)
        want = dft_magnitude_mean_oracle(keys)
        assert np.allclose(got, want, rtol=1e-5, atol=1e-9)
    # constant input: every coefficient lands in the DC bin
    for n in (8, 64, 256):  # power-of-two lengths cancel exactly
        scores = frequency_indicator(np.full((n, 5), -2.5, dtype=np.float32))
        assert scores[0] == 2.5 * n
        assert np.all(scores[1:] == 0.0)
    for n in (49, 196):  # composite lengths: nothing beyond numerical dust
        scores = frequency_indicator(np.full((n, 5), -2.5, dtype=np.float32))
        assert scores[0] == pytest.approx(2.5 * n, rel=1e-12)
        assert np.all(scores[1:] <= 1e-9)
    _pass(4, "frequency indicator matches the naive DFT oracle on 1,000 cases")


def test_criterion_05_selection_oracle():
    rng = np.random.default_rng(5)
    for trial in range(10_000):
        n = int(rng.integers(1, 65))
        if trial % 2:
            scores = rng.normal(size=n)
        else:
            scores = rng.integers(0, 6, size=n).astype(np.float64) / 5.0  # force ties
        rho = float(rng.uniform(0.02, 1.0))
        assert select_topk(scores, rho).tolist() == topk_oracle(scores.tolist(), rho)
    # fused-score argsort is invariant under positive affine transforms
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        att = rng.normal(size=n)
        fft = rng.normal(size=n)
        alpha = float(rng.uniform(0, 1))
        scale = float(rng.uniform(0.1, 10.0))
        shift = float(rng.uniform(-5.0, 5.0))
        base = fuse_scores(att, fft, alpha)
        att_t = fuse_scores(scale * att + shift, fft, alpha)
        fft_t = fuse_scores(att, scale * fft + shift, alpha)
        assert np.array_equal(np.argsort(base, kind="stable"), np.argsort(att_t, kind="stable"))
        assert np.array_equal(np.argsort(base, kind="stable"), np.argsort(fft_t, kind="stable"))
    _pass(5, "top-k selection matches the full-sort oracle on 10,000 vectors")


def test_criterion_06_retrieval_oracle():
    from conftest import parallel_retrieval_oracle

    rng = np.random.default_rng(6)
    stores = [
        random_summary_store(rng, 84, with_ties=True),   # 504 blocks
        random_summary_store(rng, 160, with_ties=True),  # 960 blocks
        random_summary_store(rng, 40, with_ties=False),  # 240 blocks
    ]
    config = RetrievalConfig(mode=RetrievalMode.PARALLEL, k=PerLevel(9, 11, 7))
    for store in stores:
        for _ in range(5):
            q = question(rng.normal(size=4))
            result = retrieve(q, store, config)
            for level in GranularityLevel:
                want = parallel_retrieval_oracle(
                    np.asarray(q.query_tokens[0], dtype=np.float64),
                    store,
                    q.asked_at,
                    int(config.k.get(level)),
                    level,
                )
                assert result.block_ids(level) == want
    # causality over 1,000 random (store, asked_at) pairs
    checked = 0
    for i in range(1000):
        store = stores[i % len(stores)]
        asked_at = float(rng.uniform(-10, 1500))
        q = question(rng.normal(size=4), asked_at=asked_at)
        result = retrieve(q, store, config)
        assert all(sb.block.timestamp <= asked_at for sb in result.all_blocks())
        checked += 1
    assert checked == 1000
    _pass(6, "parallel retrieval equals the exhaustive oracle; causality holds on 1,000 pairs")


def test_criterion_07_semi_hierarchical_demotion(small_config):
    # exact arithmetic on the constructed candidates (stage-1 scores injected)
    distractor = make_block(GranularityLevel.PATCH, 5, 1, [0.0, 1.0, 0.0, 0.0], 44.0)
    consistent = make_block(
        GranularityLevel.PATCH, 2, 0, [0.9, math.sqrt(0.19), 0.0, 0.0], 20.0
    )
    candidates = {GranularityLevel.PATCH: [(distractor, 0.9), (consistent, 0.8)]}
    config = RetrievalConfig(coherence=PerLevel(0.3, 0.3, 0.0))
    reranked = stage2_rerank(candidates, [1.0, 0.0, 0.0, 0.0], config).level(GranularityLevel.PATCH)
    scores = {sb.block_id.segment_index: sb.stage2 for sb in reranked}
    assert abs(scores[5] - 0.63) < 1e-9
    assert abs(scores[2] - 0.83) < 1e-6
    assert scores[2] > scores[5]
    assert reranked[0].block_id.segment_index == 2

    # end-to-end: a planted store flips the first patch between modes
    scenario = SyntheticScenario(
        seed=7,
        num_segments=8,
        geometry=SMALL,
        relevant_segments=frozenset({2}),
        distractor=DistractorSpec(host_segment=5, host_sub_index=1, target_sub_index=0),
    )
    records, questions, labels = gen_stream(scenario, small_config)
    store = ingest_records(records, small_config)
    para = retrieve(questions[0], store, replace(small_config.retrieval, mode=RetrievalMode.PARALLEL))
    semi = retrieve(
        questions[0], store, replace(small_config.retrieval, mode=RetrievalMode.SEMI_HIERARCHICAL)
    )
    assert para.block_ids(GranularityLevel.PATCH)[0].segment_index == 5  # distractor wins stage 1
    assert semi.block_ids(GranularityLevel.PATCH)[0].segment_index == 2  # demoted by stage 2
    _pass(7, "stage-2 demotes the distractor (0.83 > 0.63); parallel ranks it first")


def test_criterion_08_mode_identities():
    rng = np.random.default_rng(8)
    zero_lambda = RetrievalConfig(
        mode=RetrievalMode.SEMI_HIERARCHICAL, coherence=PerLevel(0.0, 0.0, 0.0)
    )
    parallel = RetrievalConfig(mode=RetrievalMode.PARALLEL)
    default_semi = RetrievalConfig(mode=RetrievalMode.SEMI_HIERARCHICAL)
    scenarios = 0
    for _ in range(10):
        store = random_summary_store(rng, int(rng.integers(5, 40)))
        for _ in range(10):
            q = question(rng.normal(size=4), asked_at=float(rng.uniform(0, 400)))
            semi = retrieve(q, store, zero_lambda)
            para = retrieve(q, store, parallel)
            for level in GranularityLevel:
                assert semi.block_ids(level) == para.block_ids(level)
            # segment level is identical even under the default coherence
            semi_default = retrieve(q, store, default_semi)
            assert semi_default.block_ids(GranularityLevel.SEGMENT) == para.block_ids(
                GranularityLevel.SEGMENT
            )
            scenarios += 1
    assert scenarios == 100
    _pass(8, "semi-hierarchical with zero coherence matches parallel on 100 scenarios")


def test_criterion_09_persistence_and_wire_robustness(desk_cfg, stream75, tmp_path, tiny_config):
    records, _, _ = stream75
    store = ingest_records(records, desk_cfg)
    store.persist(tmp_path / "a")
    Store.load(tmp_path / "a").persist(tmp_path / "b")
    bytes_a = sorted((p.name, p.read_bytes()) for p in (tmp_path / "a").iterdir())
    bytes_b = sorted((p.name, p.read_bytes()) for p in (tmp_path / "b").iterdir())
    assert bytes_a == bytes_b

    rng = np.random.default_rng(9)
    record = random_record(rng, tiny_config, 0, raw_attention=True)
    plan = tiny_config.plan()
    encoded = bytearray(encode_segment(record))
    outcomes = {"decode_error": 0, "validation_error": 0, "valid": 0}
    for _ in range(10_000):
        pos = int(rng.integers(len(encoded)))
        old = encoded[pos]
        encoded[pos] = int((old + 1 + rng.integers(255)) % 256)
        try:
            mutated, _ = decode_segment(bytes(encoded))
        except DecodeError:
            outcomes["decode_error"] += 1
        else:
            try:
                validate_record(mutated, plan)
            except ValidationError:
                outcomes["validation_error"] += 1
            else:
                outcomes["valid"] += 1
        finally:
            encoded[pos] = old
    assert sum(outcomes.values()) == 10_000
    assert outcomes["decode_error"] > 0 and outcomes["validation_error"] > 0
    _pass(
        9,
        "75-segment store round-trips byte-exactly; 10,000-mutation fuzz all structured "
        f"({outcomes})",
    )


def test_criterion_10_end_to_end_determinism(tmp_path):
    scenario = SyntheticScenario(
        seed=10, num_segments=20, geometry=SMALL, relevant_segments=frozenset({11})
    )
    outputs = []
    for run in ("a", "b"):
        run_dir = tmp_path / run
        run_dir.mkdir()
        cfg = replace(EngineConfig(), geometry=SMALL, store_path=str(run_dir / "store"), seed=10)
        cfg_path = run_dir / "config.json"
        cfg.save(cfg_path)
        records, questions, _ = gen_stream(scenario, cfg)
        stream_path = run_dir / "stream.muks"
        write_stream(records, stream_path)
        question_path = run_dir / "question.mukq"
        question_path.write_bytes(encode_question(questions[0]))
        assert main(["ingest", "--config", str(cfg_path), str(stream_path)]) == 0
        context_path = run_dir / "context.mukc"
        assert (
            main(
                [
                    "query",
                    "--config",
                    str(cfg_path),
                    str(question_path),
                    "--emit-context",
                    str(context_path),
                ]
            )
            == 0
        )
        store_dir = run_dir / "store"
        outputs.append(
            (
                sorted((p.name, p.read_bytes()) for p in store_dir.iterdir()),
                context_path.read_bytes(),
            )
        )
    assert outputs[0][0] == outputs[1][0]
    assert outputs[0][1] == outputs[1][1]
    _pass(10, "repeat ingest+query runs produce byte-identical stores and context exports")
