"""Condition-comparison experiment: {no intermediate, out-of-domain pairs,
in-domain question-answer} x final-task train sizes x k splits.

All conditions share one random initialization, one vocabulary, one fixed
test set, and equal-size intermediate datasets, so measured differences
isolate the intermediate task.  The driver persists per-condition
ensembles (k final checkpoints plus the vocabulary) for the probe
service, per-cell reports, and a single deterministic trend report.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import encoder as enc
from . import pipeline as pl
from .datasets import (
    DatasetSplit,
    PairRecord,
    build_qa_intermediate_pairs,
    learning_curve_subsets,
    make_splits,
)
from .evaluation import (
    EnsembleReport,
    SplitResult,
    aggregate,
    evaluate,
    learning_curve,
    render_curve_svg,
)
from .encoder import Checkpoint, EncoderConfig
from .pipeline import Stage, StageData, TrainConfig
from .synthetic import SyntheticBundle, SyntheticSpec, generate
from .tokenizer import Vocabulary, build_vocab

CONDITION_NONE = "none"
CONDITION_QQ = "qq"
CONDITION_QA = "qa"
KNOWN_CONDITIONS = (CONDITION_NONE, CONDITION_QQ, CONDITION_QA)

TREND_REPORT_NAME = "trend_report.json"


class ExperimentError(Exception):
    pass


def _derived_seed(seed: int, tag: str) -> int:
    import hashlib

    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class GridConfig:
    seed: int = 13
    conditions: tuple[str, ...] = KNOWN_CONDITIONS
    sizes: tuple[int, ...] = (32, 128, 512)
    splits: int = 5
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    intermediate_val_fraction: float = 0.15
    encoder: dict = field(default_factory=dict)
    intermediate_train: dict = field(default_factory=dict)
    final_train: dict = field(default_factory=dict)
    workers: int = 1
    synthetic_spec: SyntheticSpec | None = None

    def __post_init__(self):
        unknown = set(self.conditions) - set(KNOWN_CONDITIONS)
        if unknown:
            raise ExperimentError(f"unknown conditions: {sorted(unknown)}")
        if self.splits < 1:
            raise ExperimentError("splits must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path) -> "GridConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        spec_ref = doc.pop("synthetic_spec", "default")
        if spec_ref == "default":
            spec = SyntheticSpec.default()
        else:
            spec_path = Path(spec_ref)
            if not spec_path.is_absolute():
                spec_path = Path(path).parent / spec_path
            spec = SyntheticSpec.from_file(spec_path)
        return cls(
            seed=doc.get("seed", 13),
            conditions=tuple(doc.get("conditions", KNOWN_CONDITIONS)),
            sizes=tuple(doc.get("sizes", (32, 128, 512))),
            splits=doc.get("splits", 5),
            fractions=tuple(doc.get("fractions", (0.6, 0.2, 0.2))),
            intermediate_val_fraction=doc.get("intermediate_val_fraction", 0.15),
            encoder=doc.get("encoder", {}),
            intermediate_train=doc.get("intermediate_train", {}),
            final_train=doc.get("final_train", {}),
            workers=doc.get("workers", 1),
            synthetic_spec=spec,
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        base = dict(layers=2, heads=4, hidden=64, ff_dim=256,
                    max_positions=200, dropout=0.1)
        base.update(self.encoder)
        return EncoderConfig(vocab_size=vocab_size, **base)

    def intermediate_config(self, seed: int) -> TrainConfig:
        base = dict(learning_rate=1e-3, batch_size=16, max_len=200,
                    max_epochs=15, patience=3)
        base.update(self.intermediate_train)
        return TrainConfig(seed=seed, **base)

    def final_config(self, seed: int) -> TrainConfig:
        base = dict(learning_rate=1e-3, batch_size=16, max_len=200,
                    max_epochs=30, patience=5)
        base.update(self.final_train)
        return TrainConfig(seed=seed, **base)

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "conditions": list(self.conditions),
            "sizes": list(self.sizes),
            "splits": self.splits,
            "fractions": list(self.fractions),
            "encoder": self.encoder,
            "intermediate_train": self.intermediate_train,
            "final_train": self.final_train,
        }


def _split_train_val(pairs: list[PairRecord], val_fraction: float, seed: int):
    (split,) = make_splits(pairs, k=1, fractions=(1 - val_fraction, val_fraction, 0.0),
                           seed=seed)
    return split.train, split.validation


def _final_cell(
    base_ckpt_path: str,
    vocab_path: str,
    train_pairs: list[PairRecord],
    val_pairs: list[PairRecord],
    test_pairs: list[PairRecord],
    config: TrainConfig,
    split_index: int,
    split_seed: int,
    out_ckpt_path: str,
) -> dict:
    """Train one (condition, size, split) final stage and evaluate it."""
    vocab = Vocabulary.load(vocab_path)
    base = enc.load_checkpoint(base_ckpt_path)
    stage = Stage("final", pl.PAIR_CLASSIFICATION, config)
    data = StageData(train_pairs=train_pairs, val_pairs=val_pairs)
    ckpt = pl.train_stage(base, stage, data, vocab)
    enc.save_checkpoint(ckpt, out_ckpt_path)
    result = evaluate(ckpt, vocab, test_pairs, split_index=split_index, seed=split_seed)
    return result.to_dict()


@dataclass
class TrendResult:
    report: dict
    cells: dict[tuple[str, int], EnsembleReport]
    out_dir: Path

    @property
    def curve(self):
        return self.report["curve"]


def run_trend_experiment(grid: GridConfig, out_dir: str | Path) -> TrendResult:
    """Run the full grid and write ensembles, reports, curve files, and the
    deterministic trend report."""
    if grid.synthetic_spec is None:
        grid.synthetic_spec = SyntheticSpec.default()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    bundle = generate(grid.synthetic_spec)
    vocab = build_vocab(bundle.all_text_lines(), min_count=1,
                        extra_tokens=(pl.MASK_TOKEN,))
    vocab_path = out_dir / "vocab.txt"
    vocab.save(vocab_path)

    final_questions = {p.q1 for p in bundle.final_pairs} | {
        p.q2 for p in bundle.final_pairs
    }
    qa_pairs, _ = build_qa_intermediate_pairs(
        bundle.qa_records, exclusion=final_questions,
        seed=_derived_seed(grid.seed, "qa-pairs"),
    )
    qq_pairs = bundle.qq_pairs
    pl.check_equal_intermediate_sizes(qa_pairs, qq_pairs)

    splits = make_splits(bundle.final_pairs, k=grid.splits, fractions=grid.fractions,
                         seed=_derived_seed(grid.seed, "final-splits"))

    # the leakage gate runs once, before any training, over the full final set
    gate_stages = []
    dummy_cfg = TrainConfig(seed=0)
    for name, pairs in (("qa-intermediate", qa_pairs), ("qq-intermediate", qq_pairs)):
        gate_stages.append(
            (Stage(name, pl.PAIR_CLASSIFICATION, dummy_cfg), StageData(train_pairs=pairs))
        )
    gate_stages.append(
        (Stage("final", pl.PAIR_CLASSIFICATION, dummy_cfg),
         StageData(train_pairs=bundle.final_pairs))
    )
    pl.leakage_gate(gate_stages)

    cfg = grid.encoder_config(vocab.size)
    initial = Checkpoint(cfg, enc.init_weights(cfg, _derived_seed(grid.seed, "init")),
                         [], grid.seed, vocab.content_hash())
    initial_path = out_dir / "initial.ckpt"
    enc.save_checkpoint(initial, initial_path)

    # one intermediate model per condition, shared across sizes and splits
    base_paths: dict[str, Path] = {CONDITION_NONE: initial_path}
    inter_dir = out_dir / "intermediate"
    inter_dir.mkdir(exist_ok=True)
    for condition, pairs in ((CONDITION_QA, qa_pairs), (CONDITION_QQ, qq_pairs)):
        if condition not in grid.conditions:
            continue
        seed = _derived_seed(grid.seed, f"intermediate-{condition}")
        train, val = _split_train_val(pairs, grid.intermediate_val_fraction, seed)
        stage = Stage(f"{condition}-intermediate", pl.PAIR_CLASSIFICATION,
                      grid.intermediate_config(seed))
        ckpt = pl.train_stage(initial, stage, StageData(train_pairs=train, val_pairs=val),
                              vocab)
        path = inter_dir / f"{condition}.ckpt"
        enc.save_checkpoint(ckpt, path)
        base_paths[condition] = path

    # per-split nested subsets, shared by all conditions at a given size
    subsets: dict[tuple[int, int], list[PairRecord]] = {}
    sorted_sizes = sorted(grid.sizes)
    for i, split in enumerate(splits):
        per_split = learning_curve_subsets(
            split.train, sorted_sizes, seed=_derived_seed(grid.seed, f"subset-{i}")
        )
        for size, subset in zip(sorted_sizes, per_split):
            subsets[(i, size)] = subset

    tasks = []
    for condition in grid.conditions:
        for size in grid.sizes:
            ens_dir = out_dir / "ensembles" / f"{condition}-size{size}"
            ens_dir.mkdir(parents=True, exist_ok=True)
            vocab.save(ens_dir / "vocab.txt")
            for i, split in enumerate(splits):
                cell_seed = _derived_seed(grid.seed, f"final-{condition}-{size}-{i}")
                tasks.append({
                    "key": (condition, size, i),
                    "args": (
                        str(base_paths[condition]),
                        str(vocab_path),
                        subsets[(i, size)],
                        split.validation,
                        split.test,
                        grid.final_config(cell_seed),
                        i,
                        split.seed,
                        str(ens_dir / f"split_{i}.ckpt"),
                    ),
                })

    results: dict[tuple[str, int, int], SplitResult] = {}
    if grid.workers > 1:
        with ProcessPoolExecutor(max_workers=grid.workers) as pool:
            for task, result in zip(
                tasks, pool.map(_run_cell, [t["args"] for t in tasks])
            ):
                results[task["key"]] = SplitResult.from_dict(result)
    else:
        for task in tasks:
            results[task["key"]] = SplitResult.from_dict(_run_cell(task["args"]))

    reports_dir = out_dir / "reports"
    reports_dir.mkdir(exist_ok=True)
    cells: dict[tuple[str, int], EnsembleReport] = {}
    for condition in grid.conditions:
        for size in grid.sizes:
            split_results = [results[(condition, size, i)] for i in range(grid.splits)]
            report = aggregate(split_results, condition=condition)
            report.save(reports_dir / f"{condition}-size{size}.json")
            report.save(out_dir / "ensembles" / f"{condition}-size{size}" / "report.json")
            cells[(condition, size)] = report

    curve = learning_curve({key: report for key, report in cells.items()})
    (out_dir / "curve.txt").write_text(curve.render_text() + "\n", encoding="utf-8")
    (out_dir / "curve.svg").write_text(render_curve_svg(curve) + "\n", encoding="utf-8")

    trend_report = {
        "schema_version": 1,
        "grid": grid.describe(),
        "dataset": {
            "final_pairs": len(bundle.final_pairs),
            "qa_intermediate_pairs": len(qa_pairs),
            "qq_intermediate_pairs": len(qq_pairs),
            "test_size": len(splits[0].test),
            "vocab_size": vocab.size,
        },
        "conditions": {
            f"{condition}-size{size}": {
                "mean_accuracy": report.mean_accuracy,
                "std_accuracy": report.std_accuracy,
                "rendered": report.rendered,
                "split_accuracies": [s.test_accuracy for s in report.splits],
            }
            for (condition, size), report in sorted(cells.items())
        },
        "curve": curve.to_dict(),
    }
    report_path = out_dir / TREND_REPORT_NAME
    report_path.write_text(
        json.dumps(trend_report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return TrendResult(trend_report, cells, out_dir)


def _run_cell(args) -> dict:
    return _final_cell(*args)
