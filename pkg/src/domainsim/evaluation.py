"""Measurement protocol: per-split accuracy, k-split aggregation with
population mean/std, consistent-error analysis, condition comparison
tables, and learning curves.

A pair counts as a consistent error when at least ``threshold`` of the k
split-models mislabel it (default 4 of 5), and consistent-correct when at
least ``threshold`` label it right.  All reports carry a fingerprint of
the test set so cross-condition comparisons can refuse mismatched tests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import PairRecord
from .encoder import Checkpoint
from .pipeline import predict_pairs
from .tokenizer import Vocabulary, encode_pair

REPORT_SCHEMA_VERSION = 1


class EvaluationError(Exception):
    pass


def test_fingerprint(pairs: Sequence[PairRecord]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(f"{p.label}\t{p.q1}\t{p.q2}\n".encode("utf-8"))
    return h.hexdigest()[:16]


@dataclass
class SplitResult:
    split_index: int
    seed: int
    test_accuracy: float
    per_example_predictions: list[dict]
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "split_index": self.split_index,
            "seed": self.seed,
            "test_accuracy": self.test_accuracy,
            "per_example_predictions": self.per_example_predictions,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitResult":
        return cls(d["split_index"], d["seed"], d["test_accuracy"],
                   d["per_example_predictions"], d["fingerprint"])


def evaluate(
    ckpt: Checkpoint,
    vocab: Vocabulary,
    test: list[PairRecord],
    split_index: int = 0,
    seed: int | None = None,
    max_len: int = 200,
    batch_size: int = 64,
) -> SplitResult:
    """Inference-mode accuracy over a balanced test set.

    Predictions take the argmax of the two logits; an exact tie counts as
    label 0.
    """
    if not test:
        raise EvaluationError("test set is empty")
    n_pos = sum(p.label for p in test)
    if 2 * n_pos != len(test):
        raise EvaluationError(
            f"test set is not label-balanced: {n_pos} positive of {len(test)}"
        )
    if ckpt.vocab_hash is not None and ckpt.vocab_hash != vocab.content_hash():
        raise EvaluationError(
            "vocabulary does not match the checkpoint's recorded vocabulary hash"
        )
    encoded = [encode_pair(vocab, p.q1, p.q2, max_len=max_len) for p in test]
    labels, probs = predict_pairs(ckpt.weights, encoded, vocab.pad_id, batch_size)
    gold = np.asarray([p.label for p in test])
    predictions = [
        {"pair_id": i, "predicted": int(labels[i]), "probability": float(probs[i])}
        for i in range(len(test))
    ]
    return SplitResult(
        split_index=split_index,
        seed=ckpt.seed if seed is None else seed,
        test_accuracy=float((labels == gold).mean()),
        per_example_predictions=predictions,
        fingerprint=test_fingerprint(test),
    )


def render_mean_std(mean: float, std: float) -> str:
    """Accuracy fractions as e.g. ``81.6% ± 0.8%``."""
    return f"{mean * 100:.1f}% ± {std * 100:.1f}%"


@dataclass
class EnsembleReport:
    condition: str
    splits: list[SplitResult]
    mean_accuracy: float
    std_accuracy: float
    vote_matrix: list[list[int]]
    fingerprint: str
    std_kind: str = "population"

    @property
    def k(self) -> int:
        return len(self.splits)

    @property
    def rendered(self) -> str:
        return render_mean_std(self.mean_accuracy, self.std_accuracy)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "condition": self.condition,
            "k": self.k,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "std_kind": self.std_kind,
            "rendered": self.rendered,
            "fingerprint": self.fingerprint,
            "vote_matrix": self.vote_matrix,
            "splits": [s.to_dict() for s in self.splits],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise EvaluationError(
                f"unsupported report schema version {d.get('schema_version')!r}"
            )
        return cls(
            condition=d["condition"],
            splits=[SplitResult.from_dict(s) for s in d["splits"]],
            mean_accuracy=d["mean_accuracy"],
            std_accuracy=d["std_accuracy"],
            vote_matrix=[list(row) for row in d["vote_matrix"]],
            fingerprint=d["fingerprint"],
            std_kind=d.get("std_kind", "population"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate(results: list[SplitResult], condition: str = "") -> EnsembleReport:
    """Mean and population standard deviation over split accuracies, plus
    the per-pair vote matrix."""
    if not results:
        raise EvaluationError("no split results to aggregate")
    fingerprints = {r.fingerprint for r in results}
    if len(fingerprints) != 1:
        raise EvaluationError("split results cover different test sets")
    sizes = {len(r.per_example_predictions) for r in results}
    if len(sizes) != 1:
        raise EvaluationError("split results have inconsistent prediction counts")
    accs = np.asarray([r.test_accuracy for r in results])
    n = sizes.pop()
    vote_matrix = [
        [int(r.per_example_predictions[i]["predicted"]) for r in results]
        for i in range(n)
    ]
    return EnsembleReport(
        condition=condition,
        splits=list(results),
        mean_accuracy=float(accs.mean()),
        std_accuracy=float(accs.std()),
        vote_matrix=vote_matrix,
        fingerprint=results[0].fingerprint,
    )


# ---------------------------------------------------------------------------
# consistency analysis
# ---------------------------------------------------------------------------


@dataclass
class ConsistencyReport:
    consistent_errors: set[int]
    consistent_correct: set[int]
    threshold: int
    k: int
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "consistent_errors": sorted(self.consistent_errors),
            "consistent_correct": sorted(self.consistent_correct),
            "threshold": self.threshold,
            "k": self.k,
            "fingerprint": self.fingerprint,
        }


def consistent_sets(
    vote_matrix: Sequence[Sequence[int]],
    gold: Sequence[int],
    threshold: int,
) -> tuple[set[int], set[int]]:
    """Pair ids mislabeled by >= threshold models, and ids labeled correctly
    by >= threshold models."""
    errors: set[int] = set()
    correct: set[int] = set()
    for i, votes in enumerate(vote_matrix):
        wrong = sum(1 for v in votes if v != gold[i])
        if wrong >= threshold:
            errors.add(i)
        if len(votes) - wrong >= threshold:
            correct.add(i)
    return errors, correct


def consistency(
    vote_matrix: Sequence[Sequence[int]],
    gold: Sequence[int],
    threshold: int = 4,
    fingerprint: str = "",
) -> ConsistencyReport:
    if not vote_matrix:
        raise EvaluationError("empty vote matrix")
    k = len(vote_matrix[0])
    if any(len(row) != k for row in vote_matrix):
        raise EvaluationError("ragged vote matrix")
    if len(gold) != len(vote_matrix):
        raise EvaluationError(
            f"{len(gold)} gold labels for {len(vote_matrix)} vote rows"
        )
    if threshold > k:
        raise EvaluationError(f"threshold {threshold} exceeds k={k}")
    if 2 * threshold <= k:
        raise EvaluationError(
            f"threshold {threshold} of k={k} would let the error and correct "
            "sets overlap; use a strict majority"
        )
    errors, correct = consistent_sets(vote_matrix, gold, threshold)
    return ConsistencyReport(errors, correct, threshold, k, fingerprint)


def diff_consistency(a: ConsistencyReport, b: ConsistencyReport) -> dict[str, set[int]]:
    """Pairs consistently wrong under one condition but consistently right
    under the other."""
    if a.fingerprint != b.fingerprint:
        raise EvaluationError("consistency reports cover different test sets")
    return {
        "a_wrong_b_right": a.consistent_errors & b.consistent_correct,
        "b_wrong_a_right": b.consistent_errors & a.consistent_correct,
    }


# ---------------------------------------------------------------------------
# condition comparison and learning curves
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    rows: list[dict]
    gaps: list[dict]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "gaps": self.gaps}

    def render_text(self) -> str:
        width = max(len(r["condition"]) for r in self.rows) + 2
        lines = [f"{'Condition':<{width}}Accuracy"]
        for r in self.rows:
            lines.append(f"{r['condition']:<{width}}{r['rendered']}")
        if self.gaps:
            lines.append("")
            lines.append("Pairwise gaps (percentage points):")
            for g in self.gaps:
                lines.append(f"  {g['a']} - {g['b']}: {g['gap_points']:+.1f}")
        return "\n".join(lines)


def compare_conditions(reports: list[EnsembleReport]) -> ComparisonTable:
    """Condition table plus pairwise mean gaps in percentage points."""
    if not reports:
        raise EvaluationError("no reports to compare")
    fingerprints = {r.fingerprint for r in reports}
    if len(fingerprints) != 1:
        raise EvaluationError("reports cover different test sets")
    ks = {r.k for r in reports}
    if len(ks) != 1:
        raise EvaluationError("reports use different split counts")
    rows = [
        {
            "condition": r.condition,
            "mean_accuracy": r.mean_accuracy,
            "std_accuracy": r.std_accuracy,
            "rendered": r.rendered,
        }
        for r in reports
    ]
    gaps = [
        {
            "a": ra.condition,
            "b": rb.condition,
            "gap_points": (ra.mean_accuracy - rb.mean_accuracy) * 100.0,
        }
        for ra in reports
        for rb in reports
        if ra is not rb
    ]
    return ComparisonTable(rows, gaps)


@dataclass
class CurveTable:
    rows: list[dict]
    gaps: dict

    def to_dict(self) -> dict:
        return {"rows": self.rows, "gaps": self.gaps}

    def render_text(self) -> str:
        lines = [f"{'Condition':<18}{'Train size':>10}  Accuracy"]
        for r in self.rows:
            acc = r["rendered"] if not r["incomplete"] else "(incomplete)"
            lines.append(f"{r['condition']:<18}{r['train_size']:>10}  {acc}")
        per_size = self.gaps.get("per_size", [])
        if per_size:
            lines.append("")
            lines.append("Gaps (percentage points):")
            for g in per_size:
                lines.append(
                    f"  size {g['train_size']}: {g['a']} - {g['b']} = {g['gap_points']:+.1f}"
                )
            for g in self.gaps.get("average", []):
                lines.append(f"  average: {g['a']} - {g['b']} = {g['gap_points']:+.1f}")
        return "\n".join(lines)


def learning_curve(
    cells: dict[tuple[str, int], EnsembleReport | None],
) -> CurveTable:
    """One row per (condition, train size); missing runs are flagged
    incomplete rather than dropped.  Gap analysis covers every condition
    pair at each size, plus the across-size average."""
    if not cells:
        raise EvaluationError("no cells in the learning-curve grid")
    conditions = sorted({c for c, _ in cells}, key=str)
    sizes = sorted({s for _, s in cells})
    fingerprints = {
        r.fingerprint for r in cells.values() if r is not None
    }
    if len(fingerprints) > 1:
        raise EvaluationError("learning-curve cells cover different test sets")

    rows = []
    for condition in conditions:
        for size in sizes:
            report = cells.get((condition, size))
            if report is None:
                rows.append({
                    "condition": condition, "train_size": size,
                    "mean_accuracy": None, "std_accuracy": None,
                    "rendered": None, "incomplete": True,
                })
            else:
                rows.append({
                    "condition": condition, "train_size": size,
                    "mean_accuracy": report.mean_accuracy,
                    "std_accuracy": report.std_accuracy,
                    "rendered": report.rendered, "incomplete": False,
                })

    per_size = []
    averages: dict[tuple[str, str], list[float]] = {}
    for size in sizes:
        for a in conditions:
            for b in conditions:
                if a >= b:
                    continue
                ra, rb = cells.get((a, size)), cells.get((b, size))
                if ra is None or rb is None:
                    continue
                gap = (ra.mean_accuracy - rb.mean_accuracy) * 100.0
                per_size.append({
                    "train_size": size, "a": a, "b": b, "gap_points": gap,
                })
                averages.setdefault((a, b), []).append(gap)
    average = [
        {"a": a, "b": b, "gap_points": float(np.mean(values))}
        for (a, b), values in sorted(averages.items())
    ]
    return CurveTable(rows, {"per_size": per_size, "average": average})


def render_curve_svg(curve: CurveTable, width: int = 640, height: int = 400) -> str:
    """Minimal deterministic SVG line chart of accuracy vs train size."""
    complete = [r for r in curve.rows if not r["incomplete"]]
    if not complete:
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}"><text x="10" y="20">no data</text></svg>'
        )
    sizes = sorted({r["train_size"] for r in complete})
    conditions = sorted({r["condition"] for r in complete})
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    margin = 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    lo = min(r["mean_accuracy"] for r in complete)
    hi = max(r["mean_accuracy"] for r in complete)
    lo, hi = max(0.0, lo - 0.05), min(1.0, hi + 0.05)

    def x_of(size):
        i = sizes.index(size)
        return margin + (plot_w * i / max(1, len(sizes) - 1))

    def y_of(acc):
        frac = (acc - lo) / (hi - lo) if hi > lo else 0.5
        return margin + plot_h * (1 - frac)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{margin + plot_h}" x2="{margin + plot_w}" '
        f'y2="{margin + plot_h}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{margin + plot_h}" '
        f'stroke="black"/>',
    ]
    for size in sizes:
        parts.append(
            f'<text x="{x_of(size):.1f}" y="{height - margin + 20}" '
            f'text-anchor="middle" font-size="12">{size}</text>'
        )
    for frac in (lo, (lo + hi) / 2, hi):
        parts.append(
            f'<text x="{margin - 8}" y="{y_of(frac):.1f}" text-anchor="end" '
            f'font-size="12">{frac * 100:.0f}%</text>'
        )
    for ci, condition in enumerate(conditions):
        color = palette[ci % len(palette)]
        points = []
        for size in sizes:
            row = next(
                (r for r in complete
                 if r["condition"] == condition and r["train_size"] == size),
                None,
            )
            if row:
                points.append(f"{x_of(size):.1f},{y_of(row['mean_accuracy']):.1f}")
        if points:
            parts.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                f'points="{" ".join(points)}"/>'
            )
        parts.append(
            f'<text x="{margin + plot_w - 140}" y="{margin + 16 + 18 * ci}" '
            f'font-size="13" fill="{color}">{condition}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
