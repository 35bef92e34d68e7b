"""Interactive error-analysis core: load a condition's split-model
ensemble, classify arbitrary question pairs with per-model verdicts, and
record append-only probe sessions for the edit-one-aspect-at-a-time
workflow.

A probe's consistency status relative to a user-supplied expected label
follows the same at-least-4-of-5 rule the offline analysis uses.
"""

from __future__ import annotations

import json
import math
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock

from . import encoder as enc
from .encoder import Checkpoint
from .evaluation import EnsembleReport
from .pipeline import predict_pairs
from .tokenizer import Vocabulary, encode_pair

STATUS_CONSISTENT_ERROR = "consistent-error-candidate"
STATUS_CONSISTENT_CORRECT = "consistent-correct-candidate"
STATUS_MIXED = "mixed"


class ProbeError(Exception):
    pass


class UnknownSessionError(ProbeError):
    pass


class SessionClosedError(ProbeError):
    pass


@dataclass
class EnsembleHandle:
    """A condition's split models plus their shared vocabulary."""

    condition: str
    run_dir: Path
    checkpoints: list[Checkpoint]
    vocab: Vocabulary
    report: EnsembleReport | None = None

    @property
    def k(self) -> int:
        return len(self.checkpoints)

    @property
    def consistency_threshold(self) -> int:
        return math.ceil(0.8 * self.k)

    def provenance_summaries(self) -> list[dict]:
        return [
            {"model_id": i, "stages": c.stage_names, "seed": c.seed}
            for i, c in enumerate(self.checkpoints)
        ]


def load_ensemble(
    run_dir: str | Path,
    expected_k: int = 5,
    condition: str | None = None,
) -> EnsembleHandle:
    """Load ``split_*.ckpt`` models and ``vocab.txt`` from a run directory.

    A member count other than ``expected_k`` is an error unless the caller
    relaxes ``expected_k``; mixed configs or vocabulary hashes always are.
    When the directory carries an eval report, each model's stored split
    accuracy is cross-checked against it.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ProbeError(f"{run_dir} is not a directory")
    vocab_path = run_dir / "vocab.txt"
    if not vocab_path.exists():
        raise ProbeError(f"{run_dir} lacks vocab.txt")
    vocab = Vocabulary.load(vocab_path)

    paths = sorted(run_dir.glob("split_*.ckpt"))
    if len(paths) != expected_k:
        present = [p.name for p in paths]
        missing = [
            f"split_{i}.ckpt" for i in range(expected_k)
            if run_dir / f"split_{i}.ckpt" not in paths
        ]
        raise ProbeError(
            f"{run_dir} holds {len(paths)} split checkpoints, expected "
            f"{expected_k}; present={present} missing={missing}"
        )
    checkpoints = [enc.load_checkpoint(p) for p in paths]

    configs = {json.dumps(c.config.to_dict(), sort_keys=True) for c in checkpoints}
    if len(configs) != 1:
        raise ProbeError(f"{run_dir}: split checkpoints disagree on encoder config")
    vocab_hash = vocab.content_hash()
    for i, c in enumerate(checkpoints):
        if c.vocab_hash is not None and c.vocab_hash != vocab_hash:
            raise ProbeError(
                f"{run_dir}: split_{i}.ckpt was trained with a different vocabulary"
            )

    report = None
    report_path = run_dir / "report.json"
    if report_path.exists():
        report = EnsembleReport.load(report_path)
        if report.k != len(checkpoints):
            raise ProbeError(
                f"{run_dir}: report covers {report.k} splits, directory has "
                f"{len(checkpoints)}"
            )

    name = condition or (report.condition if report else run_dir.name)
    return EnsembleHandle(name, run_dir, checkpoints, vocab, report)


@dataclass
class ProbeResult:
    q1: str
    q2: str
    per_model: list[dict]
    majority_label: int
    expected: int | None
    status: str | None

    def to_dict(self) -> dict:
        return {
            "q1": self.q1,
            "q2": self.q2,
            "per_model": self.per_model,
            "majority_label": self.majority_label,
            "expected": self.expected,
            "status": self.status,
        }


def consistency_status(votes: list[int], expected: int, threshold: int) -> str:
    wrong = sum(1 for v in votes if v != expected)
    if wrong >= threshold:
        return STATUS_CONSISTENT_ERROR
    if len(votes) - wrong >= threshold:
        return STATUS_CONSISTENT_CORRECT
    return STATUS_MIXED


def classify_probe(
    handle: EnsembleHandle,
    q1: str,
    q2: str,
    expected: int | None = None,
    max_len: int = 200,
) -> ProbeResult:
    """Per-model verdicts for one pair, in inference mode.

    The majority label breaks ties toward 0 (relevant only for even k, which
    is flagged at load time by the default k=5).
    """
    if not q1.strip() or not q2.strip():
        raise ProbeError("both questions must be non-empty")
    if expected is not None and expected not in (0, 1):
        raise ProbeError(f"expected label must be 0 or 1, got {expected!r}")
    encoded = [encode_pair(handle.vocab, q1, q2, max_len=max_len)]
    per_model = []
    votes = []
    for i, ckpt in enumerate(handle.checkpoints):
        labels, probs = predict_pairs(ckpt.weights, encoded, handle.vocab.pad_id)
        per_model.append({
            "model_id": i,
            "label": int(labels[0]),
            "probability": float(probs[0]),
        })
        votes.append(int(labels[0]))
    ones = sum(votes)
    majority = 1 if ones > len(votes) - ones else 0
    status = None
    if expected is not None:
        status = consistency_status(votes, expected, handle.consistency_threshold)
    return ProbeResult(q1, q2, per_model, majority, expected, status)


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------


@dataclass
class SessionStep:
    timestamp: float
    q1: str
    q2: str
    expected: int | None
    note: str
    result: ProbeResult

    def to_dict(self) -> dict:
        return {
            "type": "step",
            "timestamp": self.timestamp,
            "q1": self.q1,
            "q2": self.q2,
            "expected": self.expected,
            "note": self.note,
            "result": self.result.to_dict(),
        }


@dataclass
class ProbeSession:
    session_id: str
    steps: list[SessionStep] = field(default_factory=list)
    closed: bool = False

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "closed": self.closed,
            "steps": [s.to_dict() for s in self.steps],
        }


class SessionStore:
    """Append-only JSONL session logs under one directory.

    Appends are serialized per store; prior steps are never rewritten, so a
    session file is a replayable audit trail of the analysis.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = Lock()
        self._sessions: dict[str, ProbeSession] = {}
        self._load_existing()

    def _path(self, session_id: str) -> Path:
        return self.directory / f"{session_id}.jsonl"

    def _load_existing(self) -> None:
        for path in sorted(self.directory.glob("*.jsonl")):
            session = ProbeSession(path.stem)
            for line in path.read_text(encoding="utf-8").splitlines():
                row = json.loads(line)
                if row["type"] == "step":
                    result = ProbeResult(
                        q1=row["result"]["q1"],
                        q2=row["result"]["q2"],
                        per_model=row["result"]["per_model"],
                        majority_label=row["result"]["majority_label"],
                        expected=row["result"]["expected"],
                        status=row["result"]["status"],
                    )
                    session.steps.append(SessionStep(
                        row["timestamp"], row["q1"], row["q2"], row["expected"],
                        row["note"], result,
                    ))
                elif row["type"] == "closed":
                    session.closed = True
            self._sessions[session.session_id] = session

    def create(self) -> ProbeSession:
        with self._lock:
            session_id = uuid.uuid4().hex[:12]
            session = ProbeSession(session_id)
            self._sessions[session_id] = session
            self._path(session_id).write_text("", encoding="utf-8")
            return session

    def get(self, session_id: str) -> ProbeSession:
        session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSessionError(f"unknown session {session_id!r}")
        return session

    def raw_bytes(self, session_id: str) -> bytes:
        self.get(session_id)
        return self._path(session_id).read_bytes()

    def append(
        self,
        session_id: str,
        result: ProbeResult,
        note: str = "",
    ) -> SessionStep:
        with self._lock:
            session = self.get(session_id)
            if session.closed:
                raise SessionClosedError(f"session {session_id} is closed")
            now = time.time()
            if session.steps:
                now = max(now, session.steps[-1].timestamp + 1e-6)
            step = SessionStep(now, result.q1, result.q2, result.expected,
                               note, result)
            session.steps.append(step)
            with self._path(session_id).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(step.to_dict(), sort_keys=True) + "\n")
            return step

    def close(self, session_id: str) -> ProbeSession:
        with self._lock:
            session = self.get(session_id)
            if not session.closed:
                session.closed = True
                with self._path(session_id).open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"type": "closed", "timestamp": time.time()})
                             + "\n")
            return session
