"""Command-line interface.

Dataset construction, training plans, evaluation, the condition-comparison
grid, and the probe service.  ``probe ask`` is a thin client of a running
service; pass ``--run-dir`` instead to answer in-process.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import encoder as enc
from . import pipeline as pl
from .datasets import (
    DatasetError,
    build_qa_intermediate_pairs,
    ingest_qa_corpus,
    load_pair_dataset,
    make_splits,
    write_pairs,
    write_qa_corpus,
)
from .encoder import Checkpoint, EncoderConfig
from .evaluation import (
    EnsembleReport,
    aggregate,
    compare_conditions,
    evaluate,
)
from .experiment import GridConfig, run_trend_experiment
from .pipeline import Stage, StageData, TrainConfig
from .probe import SessionStore, classify_probe, load_ensemble
from .synthetic import SyntheticSpec, generate
from .tokenizer import Vocabulary, build_vocab


@click.group()
def main():
    """Desk-scale lab for intermediate-task transfer on question similarity."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@main.group()
def data():
    """Dataset construction and splitting."""


@data.command("make-qa")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="QA corpus JSONL: {question, answer, category} per line.")
@click.option("--exclude", "exclude_path", type=click.Path(exists=True),
              help="Pair JSONL whose questions are removed from the corpus.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def make_qa(in_path, exclude_path, seed, out_path):
    """Build the intermediate question-answer pair dataset."""
    records, report = ingest_qa_corpus(in_path)
    for line_no, reason in report.rejected:
        click.echo(f"rejected line {line_no}: {reason}", err=True)
    if report.duplicates_dropped:
        click.echo(f"dropped {report.duplicates_dropped} duplicate rows", err=True)
    exclusion: set[str] = set()
    if exclude_path:
        pairs, _ = load_pair_dataset(exclude_path, "exclusion")
        exclusion = {p.q1 for p in pairs} | {p.q2 for p in pairs}
    built, skip = build_qa_intermediate_pairs(records, exclusion, seed)
    write_pairs(built, out_path)
    click.echo(
        f"wrote {len(built)} pairs to {out_path} "
        f"(excluded {skip.excluded}, skipped {skip.singleton_category} singleton, "
        f"{skip.no_distinct_negative} without distinct negative)"
    )


@data.command("synth")
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              help="SyntheticSpec JSON; omit for the shipped default.")
@click.option("--out-dir", required=True, type=click.Path())
def synth(spec_path, out_dir):
    """Generate the synthetic two-domain corpora."""
    spec = SyntheticSpec.from_file(spec_path) if spec_path else SyntheticSpec.default()
    bundle = generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_qa_corpus(bundle.qa_records, out / "qa_corpus.jsonl")
    write_pairs(bundle.qq_pairs, out / "qq_pairs.jsonl")
    write_pairs(bundle.final_pairs, out / "final_pairs.jsonl")
    (out / "mlm_corpus.txt").write_text("\n".join(bundle.mlm_lines) + "\n",
                                        encoding="utf-8")
    click.echo(
        f"wrote {len(bundle.qa_records)} qa records, {len(bundle.qq_pairs)} qq pairs, "
        f"{len(bundle.final_pairs)} final pairs, {len(bundle.mlm_lines)} corpus lines "
        f"to {out}"
    )


@data.command("split")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=5, show_default=True)
@click.option("--fractions", default="0.6,0.2,0.2", show_default=True,
              help="train,validation,test fractions.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
def split_cmd(pairs_path, k, fractions, seed, out_dir):
    """Split pairs into k train/validation sets over one fixed test set."""
    pairs, _ = load_pair_dataset(pairs_path, "synthetic")
    fracs = tuple(float(x) for x in fractions.split(","))
    if len(fracs) != 3:
        raise click.UsageError("fractions must be three comma-separated numbers")
    splits = make_splits(pairs, k, fracs, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pairs(splits[0].test, out / "test.jsonl")
    for i, s in enumerate(splits):
        write_pairs(s.train, out / f"train_{i}.jsonl")
        write_pairs(s.validation, out / f"validation_{i}.jsonl")
    click.echo(
        f"wrote {k} splits to {out} (train {len(splits[0].train)}, "
        f"validation {len(splits[0].validation)}, shared test {len(splits[0].test)})"
    )


@data.command("vocab")
@click.option("--corpus", "corpora", multiple=True, required=True,
              type=click.Path(exists=True),
              help="Text or JSONL files; JSONL rows contribute string fields.")
@click.option("--min-count", default=1, show_default=True)
@click.option("--mask-token/--no-mask-token", default=True, show_default=True,
              help="Reserve a masked-token id for pretraining.")
@click.option("--out", "out_path", required=True, type=click.Path())
def vocab_cmd(corpora, min_count, mask_token, out_path):
    """Build a vocabulary file from corpora."""
    lines: list[str] = []
    for path in corpora:
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            raw = raw.strip()
            if not raw:
                continue
            if raw.startswith("{"):
                try:
                    row = json.loads(raw)
                    lines.extend(v for v in row.values() if isinstance(v, str))
                    continue
                except json.JSONDecodeError:
                    pass
            lines.append(raw)
    extra = (pl.MASK_TOKEN,) if mask_token else ()
    vocab = build_vocab(lines, min_count=min_count, extra_tokens=extra)
    vocab.save(out_path)
    click.echo(f"wrote vocabulary of {vocab.size} tokens to {out_path}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _load_stage_data(doc: dict, base: Path, objective: str) -> StageData:
    if objective == pl.MASKED_TOKEN:
        lines = (base / doc["corpus"]).read_text(encoding="utf-8").splitlines()
        lines = [l for l in lines if l.strip()]
        n_val = max(1, int(len(lines) * doc.get("val_fraction", 0.1)))
        return StageData(train_lines=lines[n_val:], val_lines=lines[:n_val])
    train, _ = load_pair_dataset(base / doc["train"], "synthetic")
    val, _ = load_pair_dataset(base / doc["validation"], "synthetic")
    return StageData(train_pairs=train, val_pairs=val)


@main.command("train")
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True),
              help="Plan JSON: vocab, encoder, seed, stages with datasets.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--resume", is_flag=True, help="Skip stages with existing checkpoints.")
def train_cmd(plan_path, out_dir, resume):
    """Run a staged training plan."""
    plan_path = Path(plan_path)
    doc = json.loads(plan_path.read_text(encoding="utf-8"))
    base = plan_path.parent
    vocab = Vocabulary.load(base / doc["vocab"])
    seed = doc.get("seed", 0)

    encoder_doc = dict(layers=2, heads=4, hidden=64, ff_dim=256,
                       max_positions=200, dropout=0.1)
    encoder_doc.update(doc.get("encoder", {}))
    cfg = EncoderConfig(vocab_size=vocab.size, **encoder_doc)
    init_std = doc.get("init_std", enc.INIT_STD)
    initial = Checkpoint(cfg, enc.init_weights(cfg, seed, std=init_std), [], seed,
                         vocab.content_hash())

    stages = []
    for stage_doc in doc["stages"]:
        objective = stage_doc.get("objective", pl.PAIR_CLASSIFICATION)
        config = TrainConfig(seed=stage_doc.get("seed", seed),
                             **stage_doc.get("config", {}))
        stage = Stage(stage_doc["name"], objective, config,
                      head_policy=stage_doc.get("head_policy", "reuse"))
        stages.append((stage, _load_stage_data(stage_doc, base, objective)))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with log_path.open("a", encoding="utf-8") as log:
        def sink(event: dict) -> None:
            log.write(json.dumps(event, sort_keys=True) + "\n")
            log.flush()
            if "train_loss" in event:
                click.echo(
                    f"[{event['stage']}] epoch {event['epoch']}: "
                    f"loss {event['train_loss']:.4f} val {event['val_acc']:.3f}",
                    err=True,
                )

        ckpts = pl.run_plan(initial, stages, out, vocab, resume=resume,
                            event_sink=sink)
    click.echo(f"completed {len(ckpts)} stages; checkpoints in {out}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@main.command("eval")
@click.option("--run-dir", required=True, type=click.Path(exists=True),
              help="Directory with split_*.ckpt and vocab.txt.")
@click.option("--test", "test_path", required=True, type=click.Path(exists=True))
@click.option("--condition", default=None, help="Condition name for the report.")
@click.option("--k", default=5, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_cmd(run_dir, test_path, condition, k, out_path):
    """Evaluate a run directory's ensemble on a test set."""
    run = Path(run_dir)
    vocab = Vocabulary.load(run / "vocab.txt")
    test, _ = load_pair_dataset(test_path, "synthetic")
    results = []
    for i in range(k):
        ckpt_path = run / f"split_{i}.ckpt"
        if not ckpt_path.exists():
            raise click.ClickException(f"missing {ckpt_path}")
        ckpt = enc.load_checkpoint(ckpt_path)
        results.append(evaluate(ckpt, vocab, test, split_index=i))
    report = aggregate(results, condition=condition or run.name)
    report.save(out_path)
    click.echo(f"{report.condition}: {report.rendered} -> {out_path}")


@main.command("compare")
@click.option("--reports", "report_paths", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path())
def compare_cmd(report_paths, out_path):
    """Compare condition reports over one test set."""
    reports = [EnsembleReport.load(p) for p in report_paths]
    table = compare_conditions(reports)
    click.echo(table.render_text())
    if out_path:
        Path(out_path).write_text(
            json.dumps(table.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


@main.command("curve")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True),
              help="Grid JSON: seed, conditions, sizes, splits, train overrides.")
@click.option("--out-dir", required=True, type=click.Path())
def curve_cmd(grid_path, out_dir):
    """Run the full condition-comparison grid and emit curve reports."""
    grid = GridConfig.from_file(grid_path)
    result = run_trend_experiment(grid, out_dir)
    click.echo((Path(out_dir) / "curve.txt").read_text(), nl=False)
    click.echo(f"trend report: {Path(out_dir) / 'trend_report.json'}")


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


@main.group()
def probe():
    """Interactive ensemble probing."""


@probe.command("serve")
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=7340, show_default=True)
@click.option("--sessions-dir", default=None, type=click.Path(),
              help="Defaults to <run-dir>/sessions.")
@click.option("--static-dir", default=None, type=click.Path(exists=True),
              help="Console build to serve at /.")
@click.option("--k", default=5, show_default=True)
def probe_serve(run_dir, host, port, sessions_dir, static_dir, k):
    """Serve the probe HTTP API over a run directory."""
    import uvicorn

    from .service import create_app

    handle = load_ensemble(run_dir, expected_k=k)
    store = SessionStore(sessions_dir or Path(run_dir) / "sessions")
    default_static = Path(__file__).parent / "console"
    if static_dir is None and default_static.is_dir():
        static_dir = default_static
    app = create_app(handle, store, static_dir)
    click.echo(f"serving {handle.condition} ensemble on http://{host}:{port}", err=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@probe.command("ask")
@click.option("--q1", required=True)
@click.option("--q2", required=True)
@click.option("--expected", type=int, default=None)
@click.option("--url", default="http://127.0.0.1:7340", show_default=True,
              help="Probe service to query.")
@click.option("--run-dir", type=click.Path(exists=True),
              help="Answer in-process from this run directory instead.")
@click.option("--k", default=5, show_default=True)
def probe_ask(q1, q2, expected, url, run_dir, k):
    """Classify one pair against the ensemble."""
    if run_dir:
        handle = load_ensemble(run_dir, expected_k=k)
        body = classify_probe(handle, q1, q2, expected).to_dict()
    else:
        import httpx

        payload = {"q1": q1, "q2": q2}
        if expected is not None:
            payload["expected"] = expected
        try:
            resp = httpx.post(f"{url}/api/probe", json=payload, timeout=60.0)
        except httpx.HTTPError as exc:
            raise click.ClickException(f"cannot reach probe service at {url}: {exc}")
        if resp.status_code != 200:
            raise click.ClickException(f"service error: {resp.text}")
        body = resp.json()
    click.echo(json.dumps(body, sort_keys=True, indent=2))


if __name__ == "__main__":
    main()
