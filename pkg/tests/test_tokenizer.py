"""Vocabulary construction and pair-encoding behavior."""

import random
from collections import Counter

import pytest

from domainsim import tokenizer as tok
from domainsim.synthetic import SyntheticSpec, generate


class TestBuildVocab:
    def test_min_count_filters(self):
        vocab = tok.build_vocab(["a b", "a c"], min_count=2)
        assert "a" in vocab
        assert "b" not in vocab and "c" not in vocab
        assert vocab.size == 5

    def test_single_token_corpus(self):
        vocab = tok.build_vocab(["x"], min_count=1)
        assert vocab.size == 5
        assert vocab.id_to_token[:4] == list(tok.SPECIAL_TOKENS)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            tok.build_vocab([], min_count=1)

    def test_specials_present_and_distinct(self):
        vocab = tok.build_vocab(["hello world"], min_count=1)
        ids = {vocab.pad_id, vocab.unk_id, vocab.cls_id, vocab.sep_id}
        assert len(ids) == 4
        assert ids == {0, 1, 2, 3}

    def test_ids_dense_and_invertible(self):
        vocab = tok.build_vocab(["the cat sat on the mat"], min_count=1)
        assert sorted(vocab.token_to_id.values()) == list(range(vocab.size))
        for token, i in vocab.token_to_id.items():
            assert vocab.id_to_token[i] == token

    def test_first_occurrence_order(self):
        v1 = tok.build_vocab(["b a", "c"], min_count=1)
        assert v1.id_to_token[4:] == ["b", "a", "c"]

    def test_deterministic_given_same_corpus(self):
        corpus = ["u v w", "w v x"]
        assert tok.build_vocab(corpus, 1).id_to_token == tok.build_vocab(corpus, 1).id_to_token

    def test_extra_tokens_appended(self):
        vocab = tok.build_vocab(["x"], min_count=1, extra_tokens=("[MASK]",))
        assert vocab.id_of("[MASK]") == 4
        assert vocab.size == 6

    def test_size_matches_brute_force_count_on_generated_corpus(self):
        # independent word-count pass over a generator corpus of 1,000 lines
        spec = SyntheticSpec.default()
        lines = generate(spec).all_text_lines()[:1000]
        assert len(lines) == 1000
        min_count = 3
        counts = Counter(t for line in lines for t in line.lower().split())
        expected = sum(1 for c in counts.values() if c >= min_count) + 4
        vocab = tok.build_vocab(lines, min_count=min_count)
        assert vocab.size == expected


class TestEncodePair:
    @pytest.fixture()
    def vocab(self):
        return tok.build_vocab(["a b c d e f g h i j"], min_count=1)

    def test_layout_segments_mask(self, vocab):
        pair = tok.encode_pair(vocab, "a", "b", max_len=10)
        assert pair.token_ids == [vocab.cls_id, vocab.id_of("a"), vocab.sep_id,
                                  vocab.id_of("b"), vocab.sep_id]
        assert pair.segment_ids == [0, 0, 0, 1, 1]
        assert pair.attention_mask == [1, 1, 1, 1, 1]

    def test_unknown_token_maps_to_unk(self, vocab):
        pair = tok.encode_pair(vocab, "a zzz", "b", max_len=10)
        assert pair.token_ids[2] == vocab.unk_id

    def test_empty_question_rejected(self, vocab):
        with pytest.raises(ValueError):
            tok.encode_pair(vocab, "", "b")
        with pytest.raises(ValueError):
            tok.encode_pair(vocab, "a", "   ")

    def test_max_len_lower_bound(self, vocab):
        with pytest.raises(ValueError):
            tok.encode_pair(vocab, "a", "b", max_len=4)

    def test_truncation_trims_longer_segment(self, vocab):
        # length-arithmetic oracle: total fits max_len exactly, and the
        # shorter segment is untouched
        q1 = " ".join(["a"] * 300)
        q2 = " ".join(["b"] * 10)
        pair = tok.encode_pair(vocab, q1, q2, max_len=200)
        assert len(pair) == 200
        sep_positions = [i for i, t in enumerate(pair.token_ids) if t == vocab.sep_id]
        q1_len = sep_positions[0] - 1
        q2_len = sep_positions[1] - sep_positions[0] - 1
        assert q2_len == 10
        assert q1_len == 200 - 3 - 10  # 187: CLS + q1 + SEP + q2 + SEP == 200
        assert pair.segment_ids[sep_positions[0]] == 0
        assert pair.segment_ids[sep_positions[0] + 1] == 1

    def test_label_passthrough_and_validation(self, vocab):
        assert tok.encode_pair(vocab, "a", "b", label=1).label == 1
        assert tok.encode_pair(vocab, "a", "b").label is None
        with pytest.raises(ValueError):
            tok.encode_pair(vocab, "a", "b", label=2)

    def test_sep_count_and_pad_layout(self, vocab):
        pair = tok.encode_pair(vocab, "a b c", "d e")
        padded = tok.pad_to_length(pair, len(pair) + 4, vocab.pad_id)
        seps = sum(
            1 for t, m in zip(padded.token_ids, padded.attention_mask)
            if t == vocab.sep_id and m == 1
        )
        assert seps == 2
        # no PAD precedes a masked-in position
        seen_pad = False
        for t, m in zip(padded.token_ids, padded.attention_mask):
            if m == 0:
                seen_pad = True
            assert not (seen_pad and m == 1)


class TestDecode:
    @pytest.fixture()
    def vocab(self):
        return tok.build_vocab(["red green blue cyan magenta yellow"], min_count=1)

    def test_round_trip_in_vocab(self, vocab):
        sentence = "red blue green"
        ids = [vocab.id_of(t) for t in tok.tokenize(sentence)]
        assert tok.decode(vocab, ids) == sentence

    def test_decode_special(self, vocab):
        assert tok.decode(vocab, [vocab.cls_id]) == "[CLS]"

    def test_out_of_range_rejected(self, vocab):
        with pytest.raises(ValueError):
            tok.decode(vocab, [vocab.size])

    def test_randomized_round_trip(self, vocab):
        # 1,000 random in-vocab sentences survive encode/decode exactly
        words = vocab.id_to_token[4:]
        rng = random.Random(0)
        for _ in range(1000):
            sentence = " ".join(rng.choices(words, k=rng.randint(1, 12)))
            ids = [vocab.id_of(t) for t in tok.tokenize(sentence)]
            assert tok.decode(vocab, ids) == sentence


class TestVocabularyFile:
    def test_save_load_round_trip(self, tmp_path):
        vocab = tok.build_vocab(["one two three"], min_count=1)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        lines = path.read_text().splitlines()
        assert lines[:4] == list(tok.SPECIAL_TOKENS)
        loaded = tok.Vocabulary.load(path)
        assert loaded.id_to_token == vocab.id_to_token
        assert loaded.content_hash() == vocab.content_hash()

    def test_load_rejects_missing_specials(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("foo\nbar\n")
        with pytest.raises(ValueError):
            tok.Vocabulary.load(path)
