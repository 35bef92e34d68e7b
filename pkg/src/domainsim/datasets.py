"""Corpus ingestion, intermediate-pair construction, and split management.

The intermediate question-answer dataset pairs each question with its true
answer (label 1) and with one random other answer from the same category
(label 0), drops every question named in an exclusion set, and reports
records it had to skip.  Splits keep one fixed, exactly label-balanced
test set while reshuffling train/validation per split seed.
"""

from __future__ import annotations

import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class QARecord:
    question: str
    answer: str
    category: str


@dataclass(frozen=True)
class PairRecord:
    q1: str
    q2: str
    label: int
    source: str = "synthetic"


@dataclass
class IngestReport:
    total_lines: int = 0
    valid: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)
    duplicates_dropped: int = 0
    capped: int = 0


@dataclass
class PairBuildReport:
    """Records skipped while building intermediate pairs, by reason."""

    excluded: int = 0
    singleton_category: int = 0
    no_distinct_negative: int = 0

    @property
    def total_skipped(self) -> int:
        return self.excluded + self.singleton_category + self.no_distinct_negative


@dataclass
class DatasetSplit:
    train: list[PairRecord]
    validation: list[PairRecord]
    test: list[PairRecord]
    seed: int


def _read_jsonl(path: str | Path):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {p}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            yield line_no, line


def ingest_qa_corpus(path: str | Path) -> tuple[list[QARecord], IngestReport]:
    """Load question/answer/category JSONL; reject malformed rows by line
    number and drop exact (question, answer) duplicates."""
    report = IngestReport()
    records: list[QARecord] = []
    seen: set[tuple[str, str]] = set()
    for line_no, line in _read_jsonl(path):
        report.total_lines += 1
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            report.rejected.append((line_no, "invalid JSON"))
            continue
        problem = _qa_row_problem(row)
        if problem:
            report.rejected.append((line_no, problem))
            continue
        key = (row["question"], row["answer"])
        if key in seen:
            report.duplicates_dropped += 1
            continue
        seen.add(key)
        records.append(QARecord(row["question"], row["answer"], row["category"]))
    if not records:
        raise DatasetError(f"{path}: no valid rows")
    report.valid = len(records)
    return records, report


def _qa_row_problem(row) -> str | None:
    if not isinstance(row, dict):
        return "row is not an object"
    for key in ("question", "answer", "category"):
        if key not in row:
            return f"missing field {key!r}"
        if not isinstance(row[key], str) or not row[key].strip():
            return f"field {key!r} is empty or not a string"
    return None


def load_pair_dataset(
    path: str | Path, source_tag: str, cap: int | None = None
) -> tuple[list[PairRecord], IngestReport]:
    """Load q1/q2/label JSONL; rows with labels outside {0, 1} are rejected.

    ``cap`` keeps only the first N valid rows (dataset-size control when
    comparing intermediate tasks)."""
    report = IngestReport()
    records: list[PairRecord] = []
    for line_no, line in _read_jsonl(path):
        report.total_lines += 1
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            report.rejected.append((line_no, "invalid JSON"))
            continue
        if not isinstance(row, dict) or not isinstance(row.get("q1"), str) \
                or not isinstance(row.get("q2"), str):
            report.rejected.append((line_no, "missing or non-string q1/q2"))
            continue
        if not row["q1"].strip() or not row["q2"].strip():
            report.rejected.append((line_no, "empty question"))
            continue
        if row.get("label") not in (0, 1):
            report.rejected.append((line_no, f"label {row.get('label')!r} not in {{0, 1}}"))
            continue
        if cap is not None and len(records) >= cap:
            report.capped += 1
            continue
        records.append(PairRecord(row["q1"], row["q2"], int(row["label"]), source_tag))
    if not records:
        raise DatasetError(f"{path}: no valid rows")
    report.valid = len(records)
    return records, report


def write_pairs(pairs: list[PairRecord], path: str | Path) -> None:
    lines = [
        json.dumps({"label": p.label, "q1": p.q1, "q2": p.q2}, sort_keys=True)
        for p in pairs
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_qa_corpus(records: list[QARecord], path: str | Path) -> None:
    lines = [
        json.dumps(
            {"answer": r.answer, "category": r.category, "question": r.question},
            sort_keys=True,
        )
        for r in records
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_qa_intermediate_pairs(
    records: list[QARecord],
    exclusion: set[str] | frozenset[str] = frozenset(),
    seed: int = 0,
) -> tuple[list[PairRecord], PairBuildReport]:
    """One positive (true answer) and one negative (random other same-category
    answer) per record.

    Questions in ``exclusion`` emit nothing.  The sampled negative answer
    always differs from the record's own answer; records with no such
    candidate (singleton categories, or categories whose answers all match)
    are skipped and counted.
    """
    if not records:
        raise DatasetError("no records to build pairs from")
    rng = random.Random(seed)
    by_category: dict[str, list[QARecord]] = defaultdict(list)
    for r in records:
        by_category[r.category].append(r)

    pairs: list[PairRecord] = []
    report = PairBuildReport()
    for r in records:
        if r.question in exclusion:
            report.excluded += 1
            continue
        others = [o for o in by_category[r.category] if o is not r]
        if not others:
            report.singleton_category += 1
            continue
        candidates = [o.answer for o in others if o.answer != r.answer]
        if not candidates:
            report.no_distinct_negative += 1
            continue
        pairs.append(PairRecord(r.question, r.answer, 1, "qa-pos"))
        pairs.append(PairRecord(r.question, rng.choice(candidates), 0, "qa-neg"))
    return pairs, report


def _derived_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2**31 - 1)


def make_splits(
    pairs: list[PairRecord],
    k: int,
    fractions: tuple[float, float, float],
    seed: int,
) -> list[DatasetSplit]:
    """k splits sharing one fixed, exactly label-balanced test set; only the
    train/validation partition reshuffles per split."""
    if k < 1:
        raise DatasetError(f"k must be >= 1, got {k}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1, got {fractions}")
    f_train, f_val, f_test = fractions
    if min(fractions) < 0:
        raise DatasetError("fractions must be non-negative")

    n = len(pairs)
    per_label = int(round(f_test * n)) // 2
    rng = random.Random(seed)
    order = list(range(n))
    rng.shuffle(order)

    test_idx: list[int] = []
    remaining: list[int] = []
    need = {0: per_label, 1: per_label}
    for i in order:
        label = pairs[i].label
        if need[label] > 0:
            test_idx.append(i)
            need[label] -= 1
        else:
            remaining.append(i)
    if need[0] > 0 or need[1] > 0:
        raise DatasetError(
            f"not enough pairs of each label for a balanced test set of "
            f"{2 * per_label}: short {need}"
        )
    test = [pairs[i] for i in test_idx]

    n_train = int(round(f_train * n))
    if n_train > len(remaining):
        raise DatasetError("train fraction leaves no room for validation")

    splits = []
    for split_index in range(k):
        split_seed = _derived_seed(seed, split_index)
        order_i = list(remaining)
        random.Random(split_seed).shuffle(order_i)
        train = [pairs[i] for i in order_i[:n_train]]
        validation = [pairs[i] for i in order_i[n_train:]]
        split = DatasetSplit(train, validation, test, split_seed)
        _check_disjoint(split)
        splits.append(split)
    return splits


def _check_disjoint(split: DatasetSplit) -> None:
    counts = [Counter((p.q1, p.q2) for p in part)
              for part in (split.train, split.validation, split.test)]
    for i in range(3):
        for j in range(i + 1, 3):
            overlap = counts[i] & counts[j]
            if overlap:
                example = next(iter(overlap))
                raise DatasetError(
                    f"duplicate pair straddles split parts (e.g. {example}); "
                    "dedupe the input pairs first"
                )


def learning_curve_subsets(
    train: list[PairRecord], sizes: list[int], seed: int
) -> list[list[PairRecord]]:
    """Nested, label-balanced (within one) subsets of the training set.

    Subsets are prefixes of one seeded label-interleaved ordering, so any
    smaller subset is contained in every larger one.
    """
    for s in sizes:
        if s > len(train):
            raise DatasetError(f"subset size {s} exceeds training set of {len(train)}")
        if s < 1:
            raise DatasetError(f"subset size must be positive, got {s}")
    rng = random.Random(seed)
    ones = [p for p in train if p.label == 1]
    zeros = [p for p in train if p.label == 0]
    rng.shuffle(ones)
    rng.shuffle(zeros)
    interleaved: list[PairRecord] = []
    for a, b in zip(ones, zeros):
        interleaved.extend((a, b))
    longer = ones if len(ones) > len(zeros) else zeros
    interleaved.extend(longer[min(len(ones), len(zeros)):])
    return [interleaved[:s] for s in sizes]
