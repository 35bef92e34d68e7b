"""Ensemble loading, probe classification, and session logging."""

import json

import numpy as np
import pytest

from domainsim import encoder as enc
from domainsim import tokenizer as tok
from domainsim.encoder import Checkpoint, EncoderConfig
from domainsim.probe import (
    ProbeError,
    SessionClosedError,
    SessionStore,
    UnknownSessionError,
    classify_probe,
    consistency_status,
    load_ensemble,
)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("ensemble")
    vocab = tok.build_vocab(["alpha beta gamma delta epsilon zeta"], min_count=1)
    vocab.save(directory / "vocab.txt")
    cfg = EncoderConfig(layers=1, heads=2, hidden=16, ff_dim=32,
                        vocab_size=vocab.size, max_positions=32, dropout=0.1)
    for i in range(5):
        ckpt = Checkpoint(cfg, enc.init_weights(cfg, seed=i),
                          [{"stage": "final", "chain": "x"}], i, vocab.content_hash())
        enc.save_checkpoint(ckpt, directory / f"split_{i}.ckpt")
    return directory


class TestLoadEnsemble:
    def test_valid_run_dir(self, run_dir):
        handle = load_ensemble(run_dir, condition="demo")
        assert handle.k == 5
        assert handle.consistency_threshold == 4
        assert len(handle.provenance_summaries()) == 5

    def test_missing_split_named_in_error(self, run_dir, tmp_path):
        partial = tmp_path / "partial"
        partial.mkdir()
        (partial / "vocab.txt").write_bytes((run_dir / "vocab.txt").read_bytes())
        for i in range(4):
            (partial / f"split_{i}.ckpt").write_bytes(
                (run_dir / f"split_{i}.ckpt").read_bytes()
            )
        with pytest.raises(ProbeError, match="split_4"):
            load_ensemble(partial)

    def test_configurable_k(self, run_dir, tmp_path):
        three = tmp_path / "three"
        three.mkdir()
        (three / "vocab.txt").write_bytes((run_dir / "vocab.txt").read_bytes())
        for i in range(3):
            (three / f"split_{i}.ckpt").write_bytes(
                (run_dir / f"split_{i}.ckpt").read_bytes()
            )
        handle = load_ensemble(three, expected_k=3)
        assert handle.k == 3
        assert handle.consistency_threshold == 3

    def test_mixed_configs_rejected(self, run_dir, tmp_path):
        mixed = tmp_path / "mixed"
        mixed.mkdir()
        (mixed / "vocab.txt").write_bytes((run_dir / "vocab.txt").read_bytes())
        for i in range(4):
            (mixed / f"split_{i}.ckpt").write_bytes(
                (run_dir / f"split_{i}.ckpt").read_bytes()
            )
        vocab = tok.Vocabulary.load(run_dir / "vocab.txt")
        other_cfg = EncoderConfig(layers=2, heads=2, hidden=16, ff_dim=32,
                                  vocab_size=vocab.size, max_positions=32)
        ckpt = Checkpoint(other_cfg, enc.init_weights(other_cfg, 9), [], 9,
                          vocab.content_hash())
        enc.save_checkpoint(ckpt, mixed / "split_4.ckpt")
        with pytest.raises(ProbeError, match="config"):
            load_ensemble(mixed)

    def test_vocab_hash_mismatch_rejected(self, run_dir, tmp_path):
        bad = tmp_path / "bad_vocab"
        bad.mkdir()
        for i in range(5):
            (bad / f"split_{i}.ckpt").write_bytes(
                (run_dir / f"split_{i}.ckpt").read_bytes()
            )
        tok.build_vocab(["other words entirely"], min_count=1).save(bad / "vocab.txt")
        with pytest.raises(ProbeError, match="vocabulary"):
            load_ensemble(bad)


class TestClassifyProbe:
    def test_result_shape_and_determinism(self, run_dir):
        handle = load_ensemble(run_dir)
        r1 = classify_probe(handle, "alpha beta", "gamma delta")
        r2 = classify_probe(handle, "alpha beta", "gamma delta")
        assert len(r1.per_model) == 5
        assert r1.to_dict() == r2.to_dict()
        for verdict in r1.per_model:
            assert 0.0 <= verdict["probability"] <= 1.0
            assert verdict["label"] == (1 if verdict["probability"] > 0.5 else 0)

    def test_majority_label(self, run_dir):
        handle = load_ensemble(run_dir)
        result = classify_probe(handle, "alpha", "beta")
        votes = [v["label"] for v in result.per_model]
        assert result.majority_label == (1 if sum(votes) >= 3 else 0)

    def test_status_requires_expected(self, run_dir):
        handle = load_ensemble(run_dir)
        assert classify_probe(handle, "alpha", "beta").status is None
        result = classify_probe(handle, "alpha", "beta", expected=1)
        assert result.status in {"consistent-error-candidate",
                                 "consistent-correct-candidate", "mixed"}

    def test_status_rule(self):
        assert consistency_status([0, 0, 0, 0, 1], expected=1, threshold=4) \
            == "consistent-error-candidate"
        assert consistency_status([1, 1, 1, 1, 0], expected=1, threshold=4) \
            == "consistent-correct-candidate"
        assert consistency_status([0, 0, 0, 1, 1], expected=1, threshold=4) == "mixed"

    def test_empty_question_rejected(self, run_dir):
        handle = load_ensemble(run_dir)
        with pytest.raises(ProbeError):
            classify_probe(handle, " ", "beta")

    def test_bad_expected_rejected(self, run_dir):
        handle = load_ensemble(run_dir)
        with pytest.raises(ProbeError):
            classify_probe(handle, "alpha", "beta", expected=2)


class TestSessionStore:
    def test_append_and_replay(self, run_dir, tmp_path):
        handle = load_ensemble(run_dir)
        store = SessionStore(tmp_path / "sessions")
        session = store.create()
        inputs = [("alpha", "beta"), ("alpha gamma", "beta"), ("delta", "epsilon")]
        for q1, q2 in inputs:
            store.append(session.session_id, classify_probe(handle, q1, q2, 1),
                         note="edit")
        loaded = store.get(session.session_id)
        assert len(loaded.steps) == 3
        times = [s.timestamp for s in loaded.steps]
        assert times == sorted(times) and len(set(times)) == 3
        # replaying the logged inputs reproduces identical verdicts
        for step in loaded.steps:
            replay = classify_probe(handle, step.q1, step.q2, step.expected)
            assert replay.to_dict() == step.result.to_dict()

    def test_file_is_jsonl_of_steps(self, run_dir, tmp_path):
        handle = load_ensemble(run_dir)
        store = SessionStore(tmp_path / "s2")
        session = store.create()
        store.append(session.session_id, classify_probe(handle, "alpha", "beta"))
        raw = store.raw_bytes(session.session_id).decode()
        lines = [json.loads(line) for line in raw.splitlines()]
        assert len(lines) == 1
        assert lines[0]["type"] == "step"

    def test_unknown_session_rejected(self, tmp_path):
        store = SessionStore(tmp_path / "s3")
        with pytest.raises(UnknownSessionError):
            store.get("nope")

    def test_append_to_closed_session_rejected(self, run_dir, tmp_path):
        handle = load_ensemble(run_dir)
        store = SessionStore(tmp_path / "s4")
        session = store.create()
        store.append(session.session_id, classify_probe(handle, "alpha", "beta"))
        store.close(session.session_id)
        with pytest.raises(SessionClosedError):
            store.append(session.session_id, classify_probe(handle, "alpha", "beta"))

    def test_reload_from_disk(self, run_dir, tmp_path):
        handle = load_ensemble(run_dir)
        directory = tmp_path / "s5"
        store = SessionStore(directory)
        session = store.create()
        store.append(session.session_id, classify_probe(handle, "alpha", "beta", 1),
                     note="first")
        store.close(session.session_id)

        fresh = SessionStore(directory)
        loaded = fresh.get(session.session_id)
        assert loaded.closed
        assert loaded.steps[0].note == "first"
