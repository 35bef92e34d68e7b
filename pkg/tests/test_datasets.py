"""Ingestion, intermediate-pair construction, splits, and subset rules."""

import json
import random
from collections import Counter

import pytest

from domainsim import datasets as ds
from domainsim.datasets import DatasetError, PairRecord, QARecord


def _write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")


class TestIngestQACorpus:
    def test_valid_rows(self, tmp_path):
        p = tmp_path / "c.jsonl"
        _write_jsonl(p, [
            {"question": "q1", "answer": "a1", "category": "c"},
            {"question": "q2", "answer": "a2", "category": "c"},
            {"question": "q3", "answer": "a3", "category": "d"},
        ])
        records, report = ds.ingest_qa_corpus(p)
        assert len(records) == 3
        assert report.valid == 3 and not report.rejected

    def test_missing_category_reports_line_number(self, tmp_path):
        p = tmp_path / "c.jsonl"
        _write_jsonl(p, [
            {"question": "q1", "answer": "a1", "category": "c"},
            {"question": "q2", "answer": "a2"},
        ])
        records, report = ds.ingest_qa_corpus(p)
        assert len(records) == 1
        assert report.rejected == [(2, "missing field 'category'")]

    def test_duplicates_dropped_with_count(self, tmp_path):
        # 1,000 generated rows with 10 exact duplicates -> 990 records,
        # cross-checked by an independent set-based pass
        rng = random.Random(3)
        rows = [
            {"question": f"q{i}", "answer": f"a{i}", "category": f"c{i % 7}"}
            for i in range(990)
        ]
        for i in rng.sample(range(990), 10):
            rows.append(dict(rows[i]))
        rng.shuffle(rows)
        p = tmp_path / "big.jsonl"
        _write_jsonl(p, rows)
        records, report = ds.ingest_qa_corpus(p)
        distinct = {(r["question"], r["answer"]) for r in rows}
        assert len(records) == len(distinct) == 990
        assert report.duplicates_dropped == 10

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(DatasetError):
            ds.ingest_qa_corpus(tmp_path / "missing.jsonl")

    def test_zero_valid_rows(self, tmp_path):
        p = tmp_path / "c.jsonl"
        _write_jsonl(p, [{"question": "", "answer": "a", "category": "c"}])
        with pytest.raises(DatasetError):
            ds.ingest_qa_corpus(p)


class TestLoadPairDataset:
    def test_basic_row(self, tmp_path):
        p = tmp_path / "p.jsonl"
        _write_jsonl(p, [{"q1": "a", "q2": "b", "label": 1}])
        records, _ = ds.load_pair_dataset(p, "qq")
        assert records == [PairRecord("a", "b", 1, "qq")]

    def test_label_out_of_domain_rejected(self, tmp_path):
        p = tmp_path / "p.jsonl"
        _write_jsonl(p, [{"q1": "a", "q2": "b", "label": 2},
                         {"q1": "c", "q2": "d", "label": 0}])
        records, report = ds.load_pair_dataset(p, "qq")
        assert len(records) == 1
        assert report.rejected[0][0] == 1

    def test_cap_limits_rows(self, tmp_path):
        p = tmp_path / "p.jsonl"
        _write_jsonl(p, [{"q1": f"a{i}", "q2": f"b{i}", "label": i % 2} for i in range(10)])
        records, report = ds.load_pair_dataset(p, "qq", cap=4)
        assert len(records) == 4
        assert report.capped == 6


class TestBuildQAIntermediatePairs:
    def test_two_record_category_is_fully_determined(self):
        # brute-force enumeration: with two records in one category there is
        # exactly one valid output set
        records = [QARecord("q1", "a1", "C"), QARecord("q2", "a2", "C")]
        pairs, report = ds.build_qa_intermediate_pairs(records, seed=0)
        got = {(p.q1, p.q2, p.label) for p in pairs}
        assert got == {("q1", "a1", 1), ("q2", "a2", 1), ("q1", "a2", 0), ("q2", "a1", 0)}
        assert report.total_skipped == 0

    def test_singleton_category_skipped(self):
        pairs, report = ds.build_qa_intermediate_pairs(
            [QARecord("q", "a", "solo"), QARecord("x", "y", "C"), QARecord("z", "w", "C")],
            seed=0,
        )
        assert report.singleton_category == 1
        assert len(pairs) == 4

    def test_exclusion_drops_whole_record(self):
        records = [QARecord("q1", "a1", "C"), QARecord("q2", "a2", "C")]
        pairs, report = ds.build_qa_intermediate_pairs(records, exclusion={"q1"}, seed=0)
        assert {(p.q1, p.q2, p.label) for p in pairs} == {("q2", "a2", 1), ("q2", "a1", 0)}
        assert report.excluded == 1

    def test_negative_never_equals_true_answer(self):
        records = [QARecord(f"q{i}", "same-answer" if i < 3 else f"a{i}", "C")
                   for i in range(6)]
        pairs, report = ds.build_qa_intermediate_pairs(records, seed=1)
        for p in pairs:
            if p.label == 0:
                true_answer = next(r.answer for r in records if r.question == p.q1)
                assert p.q2 != true_answer

    def test_no_distinct_negative_skipped(self):
        records = [QARecord("q1", "a", "C"), QARecord("q2", "a", "C")]
        pairs, report = ds.build_qa_intermediate_pairs(records, seed=0)
        assert pairs == []
        assert report.no_distinct_negative == 2

    def test_invariants_on_random_corpora(self):
        # independent pass over the raw corpus: exact balance, same-category
        # negatives that differ from the true answer, no excluded question
        rng = random.Random(42)
        for trial in range(25):
            n = rng.randint(5, 60)
            records = [
                QARecord(f"q{trial}-{i}", f"a{trial}-{rng.randint(0, n // 2)}",
                         f"cat{rng.randint(0, 3)}")
                for i in range(n)
            ]
            exclusion = {r.question for r in records if rng.random() < 0.2}
            pairs, report = ds.build_qa_intermediate_pairs(records, exclusion, seed=trial)

            labels = Counter(p.label for p in pairs)
            assert labels[0] == labels[1]
            answers_by_cat = {}
            truth = {}
            for r in records:
                answers_by_cat.setdefault(r.category, set()).add(r.answer)
                truth[r.question] = (r.answer, r.category)
            for p in pairs:
                assert p.q1 not in exclusion
                answer, category = truth[p.q1]
                if p.label == 0:
                    assert p.q2 in answers_by_cat[category]
                    assert p.q2 != answer
                else:
                    assert p.q2 == answer


class TestMakeSplits:
    def _pairs(self, n, seed=0):
        rng = random.Random(seed)
        labels = [0] * (n // 2) + [1] * (n - n // 2)
        rng.shuffle(labels)
        return [PairRecord(f"q{i}", f"r{i}", labels[i]) for i in range(n)]

    def test_shared_test_and_disjoint_train_val(self):
        pairs = self._pairs(1000)
        splits = ds.make_splits(pairs, k=5, fractions=(0.7, 0.15, 0.15), seed=11)
        assert len(splits) == 5
        test_sets = [tuple((p.q1, p.q2) for p in s.test) for s in splits]
        assert len(set(test_sets)) == 1
        assert len(splits[0].test) == 150
        for s in splits:
            assert len(s.train) == 700
            train_keys = {(p.q1, p.q2) for p in s.train}
            val_keys = {(p.q1, p.q2) for p in s.validation}
            assert not train_keys & val_keys

    def test_k_one(self):
        splits = ds.make_splits(self._pairs(100), k=1, fractions=(0.6, 0.2, 0.2), seed=0)
        assert len(splits) == 1

    def test_partitions_differ_across_splits(self):
        splits = ds.make_splits(self._pairs(200), k=5, fractions=(0.6, 0.2, 0.2), seed=3)
        train_sets = {tuple((p.q1, p.q2) for p in s.train) for s in splits}
        assert len(train_sets) == 5

    def test_unbalanced_input_rejected(self):
        pairs = [PairRecord(f"q{i}", f"r{i}", 1) for i in range(50)]
        with pytest.raises(DatasetError, match="balanced"):
            ds.make_splits(pairs, k=2, fractions=(0.6, 0.2, 0.2), seed=0)

    def test_property_oracle_random_configurations(self):
        # 100 random configurations checked by an independent verifier
        rng = random.Random(99)
        for trial in range(100):
            n = rng.randint(40, 300)
            pairs = self._pairs(n, seed=trial)
            k = rng.randint(1, 5)
            f_test = rng.uniform(0.1, 0.3)
            f_train = rng.uniform(0.4, 0.8) * (1 - f_test)
            fractions = (f_train, 1 - f_test - f_train, f_test)
            try:
                splits = ds.make_splits(pairs, k, fractions, seed=trial)
            except DatasetError:
                continue
            for s in splits:
                test_labels = Counter(p.label for p in s.test)
                assert test_labels[0] == test_labels[1]
                parts = [
                    Counter((p.q1, p.q2) for p in part)
                    for part in (s.train, s.validation, s.test)
                ]
                for i in range(3):
                    for j in range(i + 1, 3):
                        assert not (parts[i] & parts[j])
                assert len(s.train) + len(s.validation) + len(s.test) == n


class TestLearningCurveSubsets:
    def _train(self, n_ones, n_zeros):
        return ([PairRecord(f"p{i}", f"x{i}", 1) for i in range(n_ones)]
                + [PairRecord(f"n{i}", f"y{i}", 0) for i in range(n_zeros)])

    def test_three_nested_subsets(self):
        subsets = ds.learning_curve_subsets(self._train(400, 400), [32, 128, 512], seed=0)
        assert [len(s) for s in subsets] == [32, 128, 512]
        keys = [{(p.q1, p.q2) for p in s} for s in subsets]
        assert keys[0] <= keys[1] <= keys[2]

    def test_full_set_identity(self):
        train = self._train(10, 10)
        (subset,) = ds.learning_curve_subsets(train, [20], seed=0)
        assert {(p.q1, p.q2) for p in subset} == {(p.q1, p.q2) for p in train}

    def test_size_too_large_rejected(self):
        with pytest.raises(DatasetError):
            ds.learning_curve_subsets(self._train(5, 5), [11], seed=0)

    def test_nested_and_balanced_over_random_draws(self):
        rng = random.Random(5)
        for trial in range(50):
            n = rng.randint(10, 100)
            train = self._train(n, n)
            sizes = sorted(rng.sample(range(1, 2 * n + 1), k=min(4, 2 * n)))
            subsets = ds.learning_curve_subsets(train, sizes, seed=trial)
            prev: set = set()
            for s, size in zip(subsets, sizes):
                assert len(s) == size
                keys = {(p.q1, p.q2) for p in s}
                assert prev <= keys
                prev = keys
                labels = Counter(p.label for p in s)
                assert abs(labels[0] - labels[1]) <= 1

    def test_deterministic_per_seed(self):
        train = self._train(50, 50)
        a = ds.learning_curve_subsets(train, [16, 64], seed=9)
        b = ds.learning_curve_subsets(train, [16, 64], seed=9)
        assert a == b
