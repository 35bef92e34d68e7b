"""Two-domain synthetic corpus generator.

One domain supplies the question-answer matching task and the final
question-pair task; the other supplies a question-pair task over a
disjoint content vocabulary.  Pair construction mirrors the rules the
final task is built on: positives rewrite a question (template change,
synonym swap, free detail changes) while negatives substitute a
critical term or flip the question's intent, keeping surface overlap
high.  Generation is deterministic per seed, and final-task questions
never appear in the question-answer records or pretraining lines.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources as importlib_resources
from pathlib import Path

from .datasets import PairRecord, QARecord

_MAX_ATTEMPT_FACTOR = 400


class SyntheticSpecError(Exception):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    terms: tuple[str, ...]
    aids: tuple[str, ...]


@dataclass(frozen=True)
class CategorySpec:
    name: str
    clusters: tuple[ClusterSpec, ...]
    critical_pairs: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class DomainSpec:
    name: str
    categories: tuple[CategorySpec, ...]
    question_templates: dict[str, tuple[str, ...]]
    answer_templates: dict[str, dict[str, tuple[str, ...]]]
    fillers: dict[str, tuple[str, ...]]

    @property
    def intents(self) -> tuple[str, ...]:
        return tuple(self.question_templates)

    def term_lexicon(self) -> set[str]:
        """The domain's distinguishing content words: cluster terms and aids."""
        words: set[str] = set()
        for cat in self.categories:
            for cluster in cat.clusters:
                words.update(cluster.terms)
                words.update(cluster.aids)
        return words

    def cluster_of(self, term: str) -> tuple[CategorySpec, ClusterSpec] | None:
        for cat in self.categories:
            for cluster in cat.clusters:
                if term in cluster.terms:
                    return cat, cluster
        return None


@dataclass(frozen=True)
class SyntheticSpec:
    in_domain: DomainSpec
    out_domain: DomainSpec
    sizes: dict[str, int]
    mixes: dict[str, float]
    seed: int

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        try:
            spec = cls(
                in_domain=_parse_domain(doc["in_domain"]),
                out_domain=_parse_domain(doc["out_domain"]),
                sizes={k: int(v) for k, v in doc["sizes"].items()},
                mixes={k: float(v) for k, v in doc.get("mixes", {}).items()},
                seed=int(doc["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SyntheticSpecError(f"malformed synthetic spec: {exc}") from exc
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "SyntheticSpec":
        ref = importlib_resources.files("domainsim.resources") / "default_synth_spec.json"
        return cls.from_dict(json.loads(ref.read_text(encoding="utf-8")))

    def validate(self) -> None:
        for key in ("qa_records", "qq_pairs", "final_pairs", "mlm_lines"):
            if self.sizes.get(key, 0) < 1:
                raise SyntheticSpecError(f"sizes.{key} must be a positive integer")
        for key, value in self.mixes.items():
            if not 0.0 <= value <= 1.0:
                raise SyntheticSpecError(f"mixes.{key} must be in [0, 1]")
        for domain in (self.in_domain, self.out_domain):
            _validate_domain(domain)
        shared = self.in_domain.term_lexicon() & self.out_domain.term_lexicon()
        if shared:
            raise SyntheticSpecError(
                f"in/out content vocabularies must be disjoint; shared: {sorted(shared)}"
            )


def _parse_domain(doc: dict) -> DomainSpec:
    categories = []
    for cat_name, cat in doc["categories"].items():
        clusters = tuple(
            ClusterSpec(tuple(c["terms"]), tuple(c.get("aids", ()))) for c in cat["clusters"]
        )
        pairs = tuple((a, b) for a, b in cat.get("critical_pairs", []))
        categories.append(CategorySpec(cat_name, clusters, pairs))
    return DomainSpec(
        name=doc["name"],
        categories=tuple(categories),
        question_templates={k: tuple(v) for k, v in doc["question_templates"].items()},
        answer_templates={
            cat: {intent: tuple(ts) for intent, ts in by_intent.items()}
            for cat, by_intent in doc["answer_templates"].items()
        },
        fillers={k: tuple(v) for k, v in doc.get("fillers", {}).items()},
    )


def _validate_domain(domain: DomainSpec) -> None:
    seen_terms: set[str] = set()
    for cat in domain.categories:
        if len(cat.clusters) < 2:
            raise SyntheticSpecError(
                f"{domain.name}/{cat.name}: need at least 2 synonym clusters"
            )
        for cluster in cat.clusters:
            if not cluster.terms:
                raise SyntheticSpecError(f"{domain.name}/{cat.name}: empty cluster")
            for term in cluster.terms:
                if term in seen_terms:
                    raise SyntheticSpecError(f"{domain.name}: duplicate term {term!r}")
                seen_terms.add(term)
        cluster_sets = [set(c.terms) for c in cat.clusters]
        for a, b in cat.critical_pairs:
            homes = [s for s in cluster_sets if a in s or b in s]
            if not any(a in s for s in cluster_sets) or not any(b in s for s in cluster_sets):
                raise SyntheticSpecError(
                    f"{domain.name}/{cat.name}: critical pair ({a}, {b}) uses unknown terms"
                )
            if any(a in s and b in s for s in homes):
                raise SyntheticSpecError(
                    f"{domain.name}/{cat.name}: critical pair ({a}, {b}) sits inside "
                    "one synonym cluster"
                )
        if cat.name not in domain.answer_templates:
            raise SyntheticSpecError(f"{domain.name}: no answer templates for {cat.name}")
        if set(domain.answer_templates[cat.name]) != set(domain.question_templates):
            raise SyntheticSpecError(
                f"{domain.name}/{cat.name}: answer templates must cover every intent"
            )


@dataclass
class SyntheticBundle:
    qa_records: list[QARecord]
    qq_pairs: list[PairRecord]
    final_pairs: list[PairRecord]
    mlm_lines: list[str]

    def all_text_lines(self) -> list[str]:
        """Every generated sentence, for vocabulary construction."""
        lines: list[str] = []
        for r in self.qa_records:
            lines.append(r.question)
            lines.append(r.answer)
        for p in self.qq_pairs + self.final_pairs:
            lines.append(p.q1)
            lines.append(p.q2)
        lines.extend(self.mlm_lines)
        return lines


def _fill(template: str, entity: str, fillers: dict, rng: random.Random) -> str:
    s = template.replace("{entity}", entity)
    if "{person}" in s:
        s = s.replace("{person}", rng.choice(fillers["person"]))
    if "{time}" in s:
        s = s.replace("{time}", rng.choice(fillers["time"]))
    return s


def _atoms(domain: DomainSpec) -> list[tuple[CategorySpec, ClusterSpec]]:
    return [(cat, cluster) for cat in domain.categories for cluster in cat.clusters]


def _realize_question(
    domain: DomainSpec,
    cluster: ClusterSpec,
    intent: str,
    rng: random.Random,
    template: str | None = None,
    term: str | None = None,
) -> str:
    template = template or rng.choice(domain.question_templates[intent])
    term = term or rng.choice(cluster.terms)
    return _fill(template, term, domain.fillers, rng)


def generate_question_pairs(
    domain: DomainSpec,
    n: int,
    rng: random.Random,
    mixes: dict[str, float],
    source: str,
) -> list[PairRecord]:
    """Exactly balanced pair set; one global dedupe across both labels."""
    p_critical = mixes.get("negative_critical", 0.7)
    p_syn_only = mixes.get("positive_synonym_only", 0.3)
    atoms = _atoms(domain)
    criticals = [
        (cat, a, b) for cat in domain.categories for a, b in cat.critical_pairs
    ]
    intents = domain.intents
    seen: set[tuple[str, str]] = set()
    pairs: list[PairRecord] = []

    n_pos = n // 2
    attempts = 0
    while len(pairs) < n_pos:
        attempts += 1
        if attempts > n * _MAX_ATTEMPT_FACTOR:
            raise SyntheticSpecError("question space too small for requested final pairs")
        cat, cluster = rng.choice(atoms)
        intent = rng.choice(intents)
        q1 = _realize_question(domain, cluster, intent, rng)
        if len(cluster.terms) >= 2 and rng.random() < p_syn_only:
            # same-template rewrite that swaps in a synonym: high-overlap positive
            template = rng.choice(domain.question_templates[intent])
            t1, t2 = rng.sample(cluster.terms, 2)
            q1 = _fill(template, t1, domain.fillers, rng)
            q2 = _fill(template, t2, domain.fillers, rng)
        else:
            q2 = _realize_question(domain, cluster, intent, rng)
        if q1 == q2 or (q1, q2) in seen:
            continue
        seen.add((q1, q2))
        pairs.append(PairRecord(q1, q2, 1, source))

    while len(pairs) < n:
        attempts += 1
        if attempts > n * _MAX_ATTEMPT_FACTOR:
            raise SyntheticSpecError("question space too small for requested final pairs")
        if criticals and rng.random() < p_critical:
            # near-miss negative: identical surface except the critical term
            cat, a, b = rng.choice(criticals)
            intent = rng.choice(intents)
            template = rng.choice(domain.question_templates[intent])
            filler_choice = {
                "person": rng.choice(domain.fillers["person"]),
                "time": rng.choice(domain.fillers["time"]),
            }
            q1 = template.replace("{entity}", a)
            q2 = template.replace("{entity}", b)
            for slot, value in filler_choice.items():
                q1 = q1.replace("{" + slot + "}", value)
                q2 = q2.replace("{" + slot + "}", value)
        else:
            # intent flip: same term, related question with a different point
            cat, cluster = rng.choice(atoms)
            term = rng.choice(cluster.terms)
            intent1, intent2 = rng.sample(intents, 2)
            q1 = _realize_question(domain, cluster, intent1, rng, term=term)
            q2 = _realize_question(domain, cluster, intent2, rng, term=term)
        if q1 == q2 or (q1, q2) in seen:
            continue
        seen.add((q1, q2))
        pairs.append(PairRecord(q1, q2, 0, source))

    rng.shuffle(pairs)
    return pairs


def generate_qa_records(
    domain: DomainSpec,
    n: int,
    rng: random.Random,
    avoid: set[str],
    answer_echo: float = 0.7,
) -> list[QARecord]:
    """Unique questions outside ``avoid``; each answer names a cluster term
    plus the cluster's aid words.

    With probability ``answer_echo`` the answer repeats the question's own
    surface form of the term; otherwise it uses another synonym from the
    cluster, which is what teaches the cluster equivalences.
    """
    atoms = _atoms(domain)
    used: set[str] = set()
    records: list[QARecord] = []
    attempts = 0
    while len(records) < n:
        attempts += 1
        if attempts > n * _MAX_ATTEMPT_FACTOR:
            raise SyntheticSpecError(
                "question space too small for requested qa records outside the "
                "final-task questions"
            )
        cat, cluster = rng.choice(atoms)
        intent = rng.choice(domain.intents)
        q_term = rng.choice(cluster.terms)
        question = _realize_question(domain, cluster, intent, rng, term=q_term)
        if question in avoid or question in used:
            continue
        others = [t for t in cluster.terms if t != q_term]
        if others and rng.random() >= answer_echo:
            a_term = rng.choice(others)
        else:
            a_term = q_term
        template = rng.choice(domain.answer_templates[cat.name][intent])
        answer = template.replace("{entity}", a_term)
        if cluster.aids:
            answer = answer.replace("{aid0}", cluster.aids[0])
            if len(cluster.aids) > 1:
                answer = answer.replace("{aid1}", cluster.aids[1])
        used.add(question)
        records.append(QARecord(question, answer, cat.name))
    return records


def generate_mlm_lines(
    spec: SyntheticSpec, n: int, rng: random.Random, avoid: set[str]
) -> list[str]:
    """Thread-style pretraining corpus from the out-of-domain side only.

    Adjacent lines form one topic thread (question and its answer, in
    either order), the stand-in for general-text pretraining: it builds
    token-matching machinery without exposing the in-domain lexicon.  No
    line matches a final-task question."""
    domain = spec.out_domain
    atoms = _atoms(domain)
    lines: list[str] = []
    attempts = 0
    while len(lines) < n:
        attempts += 1
        if attempts > n * _MAX_ATTEMPT_FACTOR:
            raise SyntheticSpecError("unable to sample enough pretraining lines")
        cat, cluster = rng.choice(atoms)
        intent = rng.choice(domain.intents)
        question = _realize_question(domain, cluster, intent, rng)
        if question in avoid:
            continue
        template = rng.choice(domain.answer_templates[cat.name][intent])
        answer = template.replace("{entity}", rng.choice(cluster.terms))
        if cluster.aids:
            answer = answer.replace("{aid0}", cluster.aids[0])
            if len(cluster.aids) > 1:
                answer = answer.replace("{aid1}", cluster.aids[1])
        # alternate thread order so both segment slots see both text kinds
        thread = (question, answer) if (len(lines) // 2) % 2 == 0 else (answer, question)
        lines.append(thread[0])
        if len(lines) < n:
            lines.append(thread[1])
    return lines


def generate(spec: SyntheticSpec) -> SyntheticBundle:
    """Full bundle: QA records and final pairs share the in-domain lexicon,
    question-question pairs use the out-domain one, and no final-task
    question string leaks into QA records or pretraining lines."""
    rng = random.Random(spec.seed)
    final_pairs = generate_question_pairs(
        spec.in_domain, spec.sizes["final_pairs"], rng, spec.mixes, source="synthetic"
    )
    final_questions = {p.q1 for p in final_pairs} | {p.q2 for p in final_pairs}
    qa_records = generate_qa_records(
        spec.in_domain, spec.sizes["qa_records"], rng, avoid=final_questions,
        answer_echo=spec.mixes.get("answer_echo", 0.7),
    )
    qq_pairs = generate_question_pairs(
        spec.out_domain, spec.sizes["qq_pairs"], rng, spec.mixes, source="qq"
    )
    mlm_lines = generate_mlm_lines(spec, spec.sizes["mlm_lines"], rng, avoid=final_questions)
    return SyntheticBundle(qa_records, qq_pairs, final_pairs, mlm_lines)
