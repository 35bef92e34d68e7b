"""Encoder forward/backward behavior, checkpoints, and the hand-rolled oracle."""

import math

import numpy as np
import pytest

from domainsim import autograd as ag
from domainsim import encoder as enc
from domainsim import tokenizer as tok
from domainsim.encoder import (
    Batch,
    Checkpoint,
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointVersionError,
    EncoderConfig,
    EncoderWeights,
)


@pytest.fixture()
def vocab():
    return tok.build_vocab(["alpha beta gamma delta epsilon zeta eta theta"], min_count=1)


def small_config(vocab, **overrides):
    defaults = dict(layers=1, heads=1, hidden=4, ff_dim=8,
                    vocab_size=vocab.size, max_positions=16, dropout=0.0)
    defaults.update(overrides)
    return EncoderConfig(**defaults)


class TestInitWeights:
    def test_deterministic_per_seed(self, vocab):
        cfg = small_config(vocab)
        w1 = enc.init_weights(cfg, seed=3)
        w2 = enc.init_weights(cfg, seed=3)
        for name in w1.tensors:
            assert np.array_equal(w1[name].values, w2[name].values)

    def test_gains_ones_biases_zeros(self, vocab):
        w = enc.init_weights(small_config(vocab), seed=0)
        assert np.all(w["emb.ln.gain"].values == 1.0)
        assert np.all(w["layer0.ln2.gain"].values == 1.0)
        assert np.all(w["layer0.attn.bq"].values == 0.0)
        assert np.all(w["pair_head.b"].values == 0.0)

    def test_matrix_means_near_zero(self, vocab):
        # sample mean within 3*sigma/sqrt(n) of zero for every weight matrix
        cfg = small_config(vocab, hidden=64, heads=4, ff_dim=128)
        w = enc.init_weights(cfg, seed=11)
        for name, t in w.tensors.items():
            if name.endswith((".gain", ".bias")) or t.values.ndim == 1:
                continue
            bound = 3 * enc.INIT_STD / math.sqrt(t.values.size)
            assert abs(t.values.mean()) < bound, name

    def test_truncation_bounds(self, vocab):
        w = enc.init_weights(small_config(vocab, hidden=64, heads=4), seed=5)
        assert np.abs(w["emb.tok"].values).max() <= 2 * enc.INIT_STD

    def test_invalid_head_split_rejected(self, vocab):
        with pytest.raises(ValueError):
            EncoderConfig(layers=1, heads=3, hidden=4, ff_dim=8, vocab_size=vocab.size)


def _make_batch(vocab, texts, max_len=16):
    pairs = [tok.encode_pair(vocab, a, b, max_len=max_len) for a, b in texts]
    return enc.collate(pairs, vocab.pad_id)


class TestEncode:
    def test_output_shape(self, vocab):
        cfg = small_config(vocab)
        w = enc.init_weights(cfg, seed=1)
        batch = _make_batch(vocab, [("alpha beta", "gamma")])
        out = enc.encode(w, batch)
        assert out.shape == (1, batch.length, cfg.hidden)
        ag.tape().clear()

    @pytest.mark.parametrize("layers", [1, 2, 4])
    def test_padding_invariance(self, vocab, layers):
        cfg = small_config(vocab, layers=layers)
        w = enc.init_weights(cfg, seed=2)
        pair = tok.encode_pair(vocab, "alpha beta gamma", "delta epsilon")
        plain = enc.collate([pair], vocab.pad_id)
        padded = enc.collate([tok.pad_to_length(pair, len(pair) + 3, vocab.pad_id)],
                             vocab.pad_id)
        h1 = enc.encode(w, plain).values
        h2 = enc.encode(w, padded).values
        assert np.abs(h1 - h2[:, : plain.length]).max() < 1e-6
        ag.tape().clear()

    def test_attention_rows_sum_to_one(self, vocab):
        cfg = small_config(vocab, layers=2)
        w = enc.init_weights(cfg, seed=4)
        pair = tok.encode_pair(vocab, "alpha beta", "gamma delta epsilon")
        batch = enc.collate([tok.pad_to_length(pair, len(pair) + 4, vocab.pad_id)],
                            vocab.pad_id)
        sink: list[np.ndarray] = []
        enc.encode(w, batch, attn_sink=sink)
        assert len(sink) == 2
        for attn in sink:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
        ag.tape().clear()

    def test_too_long_rejected(self, vocab):
        cfg = small_config(vocab, max_positions=8)
        w = enc.init_weights(cfg, seed=1)
        pair = tok.encode_pair(vocab, "alpha beta gamma delta", "epsilon zeta eta", max_len=12)
        batch = enc.collate([pair], vocab.pad_id)
        with pytest.raises(ValueError, match="max_positions"):
            enc.encode(w, batch)

    def test_matches_hand_rolled_forward_oracle(self, vocab):
        cfg = small_config(vocab)  # 1 layer, 1 head, hidden 4
        w = enc.init_weights(cfg, seed=9)
        ids = np.array([[vocab.cls_id, vocab.id_of("alpha"), vocab.sep_id]])
        batch = Batch(ids=ids,
                      segments=np.array([[0, 0, 0]]),
                      mask=np.array([[1.0, 1.0, 1.0]]))
        got = enc.encode(w, batch).values[0]
        ag.tape().clear()

        # independent plain-numpy forward, written against the stated
        # architecture rather than the encoder implementation
        def ln(x, gain, bias, eps=1e-5):
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            return gain * (x - mu) / np.sqrt(var + eps) + bias

        def gelu(x):
            return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

        v = {k: t.values for k, t in w.tensors.items()}
        x = v["emb.tok"][ids[0]] + v["emb.pos"][:3] + v["emb.seg"][[0, 0, 0]]
        x = ln(x, v["emb.ln.gain"], v["emb.ln.bias"])
        q = x @ v["layer0.attn.wq"] + v["layer0.attn.bq"]
        k = x @ v["layer0.attn.wk"] + v["layer0.attn.bk"]
        val = x @ v["layer0.attn.wv"] + v["layer0.attn.bv"]
        scores = q @ k.T / math.sqrt(cfg.hidden)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        proj = (attn @ val) @ v["layer0.attn.wo"] + v["layer0.attn.bo"]
        x = ln(x + proj, v["layer0.ln1.gain"], v["layer0.ln1.bias"])
        ff = gelu(x @ v["layer0.ff.w1"] + v["layer0.ff.b1"]) @ v["layer0.ff.w2"] + v["layer0.ff.b2"]
        expected = ln(x + ff, v["layer0.ln2.gain"], v["layer0.ln2.bias"])

        np.testing.assert_allclose(got, expected, atol=1e-9)


class TestClassifyPair:
    def test_logit_shape(self, vocab):
        cfg = small_config(vocab)
        w = enc.init_weights(cfg, seed=1)
        batch = _make_batch(vocab, [("alpha", "beta"), ("gamma delta", "epsilon")])
        logits = enc.classify_pair(w, batch)
        assert logits.shape == (2, 2)
        ag.tape().clear()

    def test_padding_invariance(self, vocab):
        cfg = small_config(vocab, layers=2)
        w = enc.init_weights(cfg, seed=6)
        pair = tok.encode_pair(vocab, "alpha beta", "gamma")
        base = enc.collate([pair], vocab.pad_id)
        padded = enc.collate([tok.pad_to_length(pair, len(pair) + 5, vocab.pad_id)],
                             vocab.pad_id)
        l1 = enc.classify_pair(w, base).values
        l2 = enc.classify_pair(w, padded).values
        assert np.abs(l1 - l2).max() < 1e-6
        ag.tape().clear()

    def test_swap_is_well_defined_but_not_symmetric(self, vocab):
        cfg = small_config(vocab)
        w = enc.init_weights(cfg, seed=7)
        ab = _make_batch(vocab, [("alpha beta", "gamma")])
        ba = _make_batch(vocab, [("gamma", "alpha beta")])
        la = enc.classify_pair(w, ab).values
        lb = enc.classify_pair(w, ba).values
        assert np.all(np.isfinite(la)) and np.all(np.isfinite(lb))
        # segments differ under the swap, so equality is not expected
        assert not np.allclose(la, lb)
        ag.tape().clear()

    def test_gradients_check_on_small_model(self, vocab):
        cfg = small_config(vocab, layers=1, hidden=8, heads=2, ff_dim=16)
        w = enc.init_weights(cfg, seed=8)
        batch = _make_batch(vocab, [("alpha beta", "gamma delta")])
        labels = [1]

        def f():
            return ag.cross_entropy_loss(enc.classify_pair(w, batch), labels)

        report = ag.grad_check(f, w.parameters(), h=1e-3, max_coords_per_param=12)
        assert report.max_rel_error < 1e-3


class TestPredictMasked:
    def test_no_masked_positions_loss_zero(self, vocab):
        cfg = small_config(vocab)
        w = enc.init_weights(cfg, seed=1)
        batch = _make_batch(vocab, [("alpha", "beta")])
        loss = enc.masked_token_loss(w, batch)
        assert loss.item() == 0.0
        ag.tape().clear()

    def test_single_masked_position_is_plain_cross_entropy(self):
        vocab = tok.build_vocab(["a"], min_count=1)  # specials + "a": size 5
        assert vocab.size == 5
        cfg = EncoderConfig(layers=1, heads=1, hidden=4, ff_dim=8,
                            vocab_size=5, max_positions=8, dropout=0.0)
        w = enc.init_weights(cfg, seed=2)
        pair = tok.encode_single(vocab, "a a a", max_len=8)
        pair.masked_positions = [2]
        pair.masked_targets = [pair.token_ids[2]]
        batch = enc.collate([pair], vocab.pad_id)

        loss = enc.masked_token_loss(w, batch).item()
        ag.tape().clear()
        logits = enc.predict_masked(w, batch).values[0, 2]
        ag.tape().clear()
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        assert loss == pytest.approx(-math.log(probs[pair.masked_targets[0]]), abs=1e-9)

    def test_logit_shape(self, vocab):
        cfg = small_config(vocab)
        w = enc.init_weights(cfg, seed=1)
        batch = _make_batch(vocab, [("alpha", "beta gamma")])
        out = enc.predict_masked(w, batch)
        assert out.shape == (1, batch.length, vocab.size)
        ag.tape().clear()


class TestCheckpoint:
    def _ckpt(self, vocab, seed=3):
        cfg = small_config(vocab, layers=2)
        w = enc.init_weights(cfg, seed=seed)
        prov = [{"stage": "mlm"}, {"stage": "qa-intermediate"}, {"stage": "final"}]
        return Checkpoint(cfg, w, prov, seed=seed, vocab_hash=vocab.content_hash())

    def test_roundtrip_bit_identical(self, vocab, tmp_path):
        ckpt = self._ckpt(vocab)
        path = tmp_path / "a.ckpt"
        enc.save_checkpoint(ckpt, path)
        loaded = enc.load_checkpoint(path)
        for name in ckpt.weights.tensors:
            assert np.array_equal(loaded.weights[name].values, ckpt.weights[name].values)
        assert loaded.provenance == ckpt.provenance
        assert loaded.seed == ckpt.seed
        assert loaded.vocab_hash == ckpt.vocab_hash
        # re-saving the loaded checkpoint is byte-identical
        path2 = tmp_path / "b.ckpt"
        enc.save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_stage_names(self, vocab, tmp_path):
        ckpt = self._ckpt(vocab)
        assert ckpt.stage_names == ["mlm", "qa-intermediate", "final"]

    def test_truncated_file_is_corrupt_not_crash(self, vocab, tmp_path):
        path = tmp_path / "c.ckpt"
        enc.save_checkpoint(self._ckpt(vocab), path)
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(CheckpointCorruptError):
            enc.load_checkpoint(path)

    def test_bad_magic_is_corrupt(self, vocab, tmp_path):
        path = tmp_path / "d.ckpt"
        enc.save_checkpoint(self._ckpt(vocab), path)
        data = bytearray(path.read_bytes())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointCorruptError):
            enc.load_checkpoint(path)

    def test_version_mismatch_distinct_error(self, vocab, tmp_path):
        path = tmp_path / "e.ckpt"
        enc.save_checkpoint(self._ckpt(vocab), path)
        data = bytearray(path.read_bytes())
        data[8] = 99  # version field follows the 8-byte magic
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError):
            enc.load_checkpoint(path)

    def test_shape_audit_failure_distinct_error(self, vocab, tmp_path):
        ckpt = self._ckpt(vocab)
        path = tmp_path / "f.ckpt"
        enc.save_checkpoint(ckpt, path)
        raw = path.read_bytes()
        # rewrite the header with a wrong shape for one buffer
        import json

        header_len = int.from_bytes(raw[12:20], "little")
        header = json.loads(raw[20 : 20 + header_len].decode())
        entry = next(e for e in header["manifest"] if e["name"] == "pooler.w")
        entry["shape"] = [4, 5]
        bad = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(raw[:12] + len(bad).to_bytes(8, "little")
                         + bad + raw[20 + header_len:])
        with pytest.raises(CheckpointShapeError):
            enc.load_checkpoint(path)


class TestWeightsCopy:
    def test_copy_is_deep(self, vocab):
        w = enc.init_weights(small_config(vocab), seed=0)
        w2 = w.copy()
        w2["pooler.w"].values[0, 0] += 1.0
        assert w["pooler.w"].values[0, 0] != w2["pooler.w"].values[0, 0]
