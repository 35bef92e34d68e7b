"""Multi-stage training: masked-token pretraining, intermediate-task
fine-tuning, and final-task fine-tuning over one shared encoder.

Each stage trains with Adam until its validation metric stops improving
for ``patience`` epochs (or ``max_epochs``), keeps the best-epoch
weights, and appends a provenance entry with a chain hash so interrupted
plans can be resumed and verified.  A leakage gate refuses to train any
plan whose intermediate-stage text contains a final-task question.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import encoder as enc
from .datasets import PairRecord
from .encoder import Batch, Checkpoint, EncoderWeights
from .tokenizer import EncodedPair, Vocabulary, encode_pair, encode_single

MASK_TOKEN = "[MASK]"

PAIR_CLASSIFICATION = "pair-classification"
MASKED_TOKEN = "masked-token"

EventSink = Callable[[dict], None]


class PlanError(Exception):
    pass


class LeakageError(PlanError):
    pass


class DivergenceError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    max_len: int = 200
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_len": self.max_len,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }


@dataclass(frozen=True)
class Stage:
    name: str
    objective: str
    config: TrainConfig
    head_policy: str = "reuse"

    def __post_init__(self):
        if self.objective not in (PAIR_CLASSIFICATION, MASKED_TOKEN):
            raise PlanError(f"unknown objective {self.objective!r}")
        if self.head_policy not in ("reuse", "reinit"):
            raise PlanError(f"unknown head policy {self.head_policy!r}")


@dataclass
class StageData:
    """Resolved training material for one stage."""

    train_pairs: list[PairRecord] = field(default_factory=list)
    val_pairs: list[PairRecord] = field(default_factory=list)
    train_lines: list[str] = field(default_factory=list)
    val_lines: list[str] = field(default_factory=list)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.train_pairs + self.val_pairs:
            h.update(f"{p.label}\t{p.q1}\t{p.q2}\n".encode("utf-8"))
        for line in self.train_lines + self.val_lines:
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()[:16]

    def text_fields(self) -> list[str]:
        out = []
        for p in self.train_pairs + self.val_pairs:
            out.extend((p.q1, p.q2))
        out.extend(self.train_lines)
        out.extend(self.val_lines)
        return out


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise PlanError(f"stage names must be unique, got {names}")
        if not self.stages:
            raise PlanError("plan has no stages")
        if self.stages[-1].objective != PAIR_CLASSIFICATION:
            raise PlanError("final stage objective must be pair-classification")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, ag.Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.values) for k, p in params.items()},
            v={k: np.zeros_like(p.values) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, ag.Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
) -> None:
    """In-place bias-corrected Adam update; missing gradients count as zero."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        elif g.shape != p.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name} "
                f"shape {p.values.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class EarlyStopper:
    """Strict-improvement early stopping counted in epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.bad_epochs = 0

    def update(self, metric: float) -> bool:
        """Record an epoch metric; returns True when it improved the best."""
        if self.best is None or metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def predict_pairs(
    weights: EncoderWeights,
    encoded: Sequence[EncodedPair],
    pad_id: int,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Labels and match probabilities in inference mode.

    Ties in the two logits resolve to label 0.
    """
    labels = np.empty(len(encoded), dtype=np.int64)
    probs = np.empty(len(encoded), dtype=np.float64)
    with ag.no_grad():
        for start in range(0, len(encoded), batch_size):
            chunk = list(encoded[start : start + batch_size])
            batch = enc.collate(chunk, pad_id)
            logits = enc.classify_pair(weights, batch).values
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            p1 = e[:, 1] / e.sum(axis=1)
            labels[start : start + len(chunk)] = (logits[:, 1] > logits[:, 0]).astype(np.int64)
            probs[start : start + len(chunk)] = p1
    return labels, probs


def pair_accuracy(
    weights: EncoderWeights,
    encoded: Sequence[EncodedPair],
    gold: Sequence[int],
    pad_id: int,
    batch_size: int = 64,
) -> float:
    labels, _ = predict_pairs(weights, encoded, pad_id, batch_size)
    return float((labels == np.asarray(gold)).mean())


# ---------------------------------------------------------------------------
# masked-token machinery
# ---------------------------------------------------------------------------


def apply_mlm_masking(
    pair: EncodedPair,
    vocab: Vocabulary,
    rng: np.random.Generator,
    mask_prob: float = 0.15,
) -> EncodedPair:
    """BERT-style dynamic masking over non-special positions.

    Each eligible position is masked with ``mask_prob``; a masked position
    becomes the mask id 80% of the time, a random non-special id 10%, and
    stays unchanged 10%.  Original ids are retained as targets.
    """
    if MASK_TOKEN not in vocab:
        raise PlanError(
            f"vocabulary lacks {MASK_TOKEN}; build it with extra_tokens=('{MASK_TOKEN}',)"
        )
    mask_id = vocab.id_of(MASK_TOKEN)
    specials = {vocab.pad_id, vocab.cls_id, vocab.sep_id}
    ids = list(pair.token_ids)
    positions: list[int] = []
    targets: list[int] = []
    candidates = [i for i in range(4, vocab.size) if i != mask_id]
    for i, token_id in enumerate(ids):
        if token_id in specials:
            continue
        if rng.random() >= mask_prob:
            continue
        positions.append(i)
        targets.append(token_id)
        roll = rng.random()
        if roll < 0.8:
            ids[i] = mask_id
        elif roll < 0.9:
            ids[i] = int(candidates[rng.integers(len(candidates))])
        # else: keep the original id
    return EncodedPair(
        token_ids=ids,
        segment_ids=list(pair.segment_ids),
        attention_mask=list(pair.attention_mask),
        label=pair.label,
        masked_positions=positions,
        masked_targets=targets,
    )


def masked_accuracy(
    weights: EncoderWeights,
    masked: Sequence[EncodedPair],
    pad_id: int,
    batch_size: int = 64,
) -> float:
    """Fraction of masked positions whose argmax prediction is the original id."""
    correct = 0
    total = 0
    with ag.no_grad():
        for start in range(0, len(masked), batch_size):
            chunk = list(masked[start : start + batch_size])
            batch = enc.collate(chunk, pad_id)
            if not batch.masked_positions:
                continue
            logits = enc.predict_masked(weights, batch).values
            for (row, col), target in zip(batch.masked_positions, batch.masked_targets):
                total += 1
                correct += int(np.argmax(logits[row, col]) == target)
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# stage training
# ---------------------------------------------------------------------------


def _reinit_head(weights: EncoderWeights, objective: str, seed: int) -> None:
    rng = np.random.default_rng(seed)
    names = ("pair_head.w", "pair_head.b") if objective == PAIR_CLASSIFICATION \
        else ("mlm_head.w", "mlm_head.b")
    for name in names:
        t = weights[name]
        if name.endswith(".b"):
            t.values = np.zeros_like(t.values)
        else:
            t.values = enc._truncated_normal(rng, t.shape, enc.INIT_STD)


def _chain_hash(prev: str, stage: Stage, data_fingerprint: str) -> str:
    payload = json.dumps(
        {
            "prev": prev,
            "stage": stage.name,
            "objective": stage.objective,
            "head_policy": stage.head_policy,
            "config": stage.config.to_dict(),
            "data": data_fingerprint,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _encode_stage_pairs(pairs, vocab, max_len):
    return [encode_pair(vocab, p.q1, p.q2, max_len=max_len, label=p.label) for p in pairs]


def _encode_corpus_pairs(lines: list[str], vocab: Vocabulary, max_len: int):
    """Two corpus lines per masked-token sequence, so both segment positions
    see every kind of text during pretraining."""
    if len(lines) == 1:
        return [encode_single(vocab, lines[0], max_len)]
    encoded = []
    for i in range(0, len(lines) - 1, 2):
        encoded.append(encode_pair(vocab, lines[i], lines[i + 1], max_len=max_len))
    if len(lines) % 2 == 1:
        encoded.append(encode_pair(vocab, lines[-1], lines[0], max_len=max_len))
    return encoded


def train_stage(
    ckpt_in: Checkpoint,
    stage: Stage,
    data: StageData,
    vocab: Vocabulary,
    event_sink: EventSink | None = None,
) -> Checkpoint:
    """Train one stage and return the best-validation checkpoint.

    Training stops when the validation metric has not strictly improved
    for ``patience`` consecutive epochs, or at ``max_epochs``.  The
    returned checkpoint carries the best epoch's weights and an appended
    provenance entry; the input checkpoint is never mutated.
    """
    cfg = stage.config
    prev_chain = ckpt_in.provenance[-1]["chain"] if ckpt_in.provenance else ""
    chain = _chain_hash(prev_chain, stage, data.fingerprint())

    if stage.objective == PAIR_CLASSIFICATION:
        if not data.train_pairs or not data.val_pairs:
            raise PlanError(f"stage {stage.name}: empty pair dataset")
        train_encoded = _encode_stage_pairs(data.train_pairs, vocab, cfg.max_len)
        val_encoded = _encode_stage_pairs(data.val_pairs, vocab, cfg.max_len)
        val_gold = [p.label for p in data.val_pairs]
    else:
        if not data.train_lines or not data.val_lines:
            raise PlanError(f"stage {stage.name}: empty corpus")
        train_encoded = _encode_corpus_pairs(data.train_lines, vocab, cfg.max_len)
        val_encoded = _encode_corpus_pairs(data.val_lines, vocab, cfg.max_len)

    weights = ckpt_in.weights.copy()
    if stage.head_policy == "reinit":
        _reinit_head(weights, stage.objective, seed=cfg.seed + 104729)

    provenance_entry = {
        "stage": stage.name,
        "objective": stage.objective,
        "head_policy": stage.head_policy,
        "chain": chain,
        "epochs_run": 0,
        "best_epoch": 0,
        "best_val_metric": None,
    }
    if cfg.max_epochs == 0:
        return Checkpoint(
            ckpt_in.config,
            weights,
            ckpt_in.provenance + [provenance_entry],
            ckpt_in.seed,
            ckpt_in.vocab_hash,
        )

    rng_np = np.random.default_rng(cfg.seed)
    rng_py = random.Random(cfg.seed)
    params = weights.parameters()
    state = AdamState.for_params(params)
    stopper = EarlyStopper(cfg.patience)
    best_weights = weights.copy()
    best_epoch = 0

    # fixed, deterministically masked validation set for the mlm objective
    if stage.objective == MASKED_TOKEN:
        val_rng = np.random.default_rng(cfg.seed + 7919)
        val_masked = [apply_mlm_masking(p, vocab, val_rng) for p in val_encoded]

    def validate() -> float:
        if stage.objective == PAIR_CLASSIFICATION:
            return pair_accuracy(weights, val_encoded, val_gold, vocab.pad_id)
        return masked_accuracy(weights, val_masked, vocab.pad_id)

    epochs_run = 0
    global_step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        order = list(range(len(train_encoded)))
        rng_py.shuffle(order)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_encoded[i] for i in order[start : start + cfg.batch_size]]
            if stage.objective == MASKED_TOKEN:
                chunk = [apply_mlm_masking(p, vocab, rng_np) for p in chunk]
            batch = enc.collate(chunk, vocab.pad_id)
            if stage.objective == PAIR_CLASSIFICATION:
                logits = enc.classify_pair(weights, batch, training=True, rng=rng_np)
                loss = ag.cross_entropy_loss(logits, list(batch.labels))
            else:
                loss = enc.masked_token_loss(weights, batch, training=True, rng=rng_np)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"stage {stage.name}: non-finite loss at epoch {epoch}, "
                    f"step {global_step}"
                )
            for p in params.values():
                p.zero_grad()
            ag.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state,
                      cfg.learning_rate)
            losses.append(loss_value)
            global_step += 1
            if cfg.eval_every and global_step % cfg.eval_every == 0 and event_sink:
                event_sink({"stage": stage.name, "epoch": epoch, "step": global_step,
                            "val_acc": validate()})

        val_metric = validate()
        if event_sink:
            event_sink({
                "stage": stage.name,
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else 0.0,
                "val_acc": val_metric,
            })
        if stopper.update(val_metric):
            best_weights = weights.copy()
            best_epoch = epoch
        if stopper.should_stop:
            break

    provenance_entry.update(
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        best_val_metric=stopper.best,
    )
    return Checkpoint(
        ckpt_in.config,
        best_weights,
        ckpt_in.provenance + [provenance_entry],
        ckpt_in.seed,
        ckpt_in.vocab_hash,
    )


def mlm_pretrain(
    ckpt: Checkpoint,
    corpus_lines: list[str],
    config: TrainConfig,
    vocab: Vocabulary,
    val_fraction: float = 0.1,
    event_sink: EventSink | None = None,
    stage_name: str = "mlm",
) -> Checkpoint:
    """Masked-token pretraining stage over raw corpus lines.

    Adjacent corpus lines form one two-segment sequence (document-style
    pairing), so the train/validation split keeps line pairs together.
    """
    if not corpus_lines:
        raise PlanError("mlm_pretrain: empty corpus")
    chunks = [corpus_lines[i : i + 2] for i in range(0, len(corpus_lines), 2)]
    random.Random(config.seed).shuffle(chunks)
    n_val = max(1, int(len(chunks) * val_fraction))
    val_lines = [line for chunk in chunks[:n_val] for line in chunk]
    train_lines = [line for chunk in chunks[n_val:] for line in chunk]
    stage = Stage(stage_name, MASKED_TOKEN, config)
    data = StageData(train_lines=train_lines, val_lines=val_lines)
    return train_stage(ckpt, stage, data, vocab, event_sink)


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


def leakage_gate(stages: Sequence[tuple[Stage, StageData]]) -> None:
    """Refuse to train when any intermediate-stage text contains a
    final-task question string."""
    if not stages:
        raise PlanError("plan has no stages")
    final_stage, final_data = stages[-1]
    final_questions = set(final_data.text_fields())
    for stage, data in stages[:-1]:
        overlap = final_questions & set(data.text_fields())
        if overlap:
            example = sorted(overlap)[:3]
            raise LeakageError(
                f"stage {stage.name} shares {len(overlap)} text string(s) with the "
                f"final task, e.g. {example}"
            )


def check_equal_intermediate_sizes(a: list[PairRecord], b: list[PairRecord]) -> None:
    """Comparing intermediate tasks requires equal-size training sets."""
    if len(a) != len(b):
        raise PlanError(
            f"intermediate datasets differ in size: {len(a)} vs {len(b)}; "
            "cap them to a common size before comparing conditions"
        )


def run_plan(
    initial: Checkpoint,
    stages: Sequence[tuple[Stage, StageData]],
    out_dir: str | Path,
    vocab: Vocabulary,
    resume: bool = False,
    event_sink: EventSink | None = None,
) -> list[Checkpoint]:
    """Execute stages in order, persisting one checkpoint per stage.

    With ``resume``, stages whose checkpoint files exist are loaded instead
    of retrained, after their provenance chain hash is verified against the
    requested plan.
    """
    StagePlan(tuple(stage for stage, _ in stages))
    leakage_gate(stages)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ckpts: list[Checkpoint] = []
    ckpt = initial
    chain = initial.provenance[-1]["chain"] if initial.provenance else ""
    for idx, (stage, data) in enumerate(stages):
        chain = _chain_hash(chain, stage, data.fingerprint())
        path = out_dir / f"stage{idx}_{stage.name}.ckpt"
        if resume and path.exists():
            loaded = enc.load_checkpoint(path)
            got = loaded.provenance[-1]["chain"] if loaded.provenance else ""
            if got != chain:
                raise PlanError(
                    f"resume: {path} provenance chain {got!r} does not match the "
                    f"requested plan ({chain!r})"
                )
            ckpt = loaded
            ckpts.append(ckpt)
            continue
        ckpt = train_stage(ckpt, stage, data, vocab, event_sink)
        enc.save_checkpoint(ckpt, path)
        ckpts.append(ckpt)
    return ckpts
