"""Word-level tokenizer and sentence-pair encoding.

A vocabulary maps tokens to dense integer ids with four fixed special
tokens on ids 0..3.  Sentence pairs are encoded in the fixed layout
``[CLS] q1 [SEP] q2 [SEP]`` with segment ids and an attention mask.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)

DEFAULT_MAX_LEN = 200

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token <-> id mapping with fixed specials on ids 0..3."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS_TOKEN]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP_TOKEN]

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.token_to_id[UNK_TOKEN])

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def content_hash(self) -> str:
        """Hash of the full id ordering; identifies a vocabulary exactly."""
        h = hashlib.sha256()
        for token in self.id_to_token:
            h.update(token.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        """One token per line; line number equals id, specials on lines 0-3."""
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != SPECIAL_TOKENS:
            raise ValueError(
                f"vocabulary file {path} does not start with the special tokens "
                f"{SPECIAL_TOKENS}"
            )
        return cls._from_ordered_tokens(lines)

    @classmethod
    def _from_ordered_tokens(cls, tokens: list[str]) -> "Vocabulary":
        token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(token_to_id) != len(tokens):
            raise ValueError("duplicate token in vocabulary listing")
        return cls(token_to_id=token_to_id, id_to_token=list(tokens))


def build_vocab(
    corpus_lines: list[str],
    min_count: int = 1,
    extra_tokens: tuple[str, ...] = (),
) -> Vocabulary:
    """Build a vocabulary from raw corpus lines.

    Tokens occurring at least ``min_count`` times get an id, assigned in
    first-occurrence order after the four specials.  ``extra_tokens`` are
    appended unconditionally (used e.g. for a masked-token marker) before
    corpus tokens.
    """
    if not corpus_lines:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")

    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    position = 0
    for line in corpus_lines:
        for token in tokenize(line):
            counts[token] += 1
            if token not in first_seen:
                first_seen[token] = position
                position += 1

    ordered = list(SPECIAL_TOKENS)
    for token in extra_tokens:
        if token not in ordered:
            ordered.append(token)
    seen = set(ordered)
    for token in sorted(first_seen, key=first_seen.__getitem__):
        if counts[token] >= min_count and token not in seen:
            ordered.append(token)
            seen.add(token)
    return Vocabulary._from_ordered_tokens(ordered)


@dataclass
class EncodedPair:
    """Tokenized sentence pair: ``[CLS] q1 [SEP] q2 [SEP]`` plus padding.

    ``segment_ids`` are 0 through the first ``[SEP]`` inclusive and 1 after;
    ``attention_mask`` is 1 exactly on non-PAD positions.
    """

    token_ids: list[int]
    segment_ids: list[int]
    attention_mask: list[int]
    label: int | None = None
    masked_positions: list[int] = field(default_factory=list)
    masked_targets: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


def _trim_to_fit(q1_tokens: list[str], q2_tokens: list[str], max_len: int) -> None:
    # Trim the longer segment token-by-token from its tail until the pair
    # plus the three specials fits in max_len.
    while len(q1_tokens) + len(q2_tokens) + 3 > max_len:
        if len(q1_tokens) >= len(q2_tokens):
            q1_tokens.pop()
        else:
            q2_tokens.pop()


def encode_pair(
    vocab: Vocabulary,
    q1: str,
    q2: str,
    max_len: int = DEFAULT_MAX_LEN,
    label: int | None = None,
) -> EncodedPair:
    """Encode a sentence pair; unknown tokens map to UNK, overlong pairs are
    truncated by trimming the longer segment from its end."""
    if max_len < 5:
        raise ValueError(f"max_len must be >= 5, got {max_len}")
    if label is not None and label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    q1_tokens = tokenize(q1)
    q2_tokens = tokenize(q2)
    if not q1_tokens:
        raise ValueError("q1 is empty after tokenization")
    if not q2_tokens:
        raise ValueError("q2 is empty after tokenization")
    _trim_to_fit(q1_tokens, q2_tokens, max_len)

    ids = [vocab.cls_id]
    ids.extend(vocab.id_of(t) for t in q1_tokens)
    ids.append(vocab.sep_id)
    first_seg_len = len(ids)
    ids.extend(vocab.id_of(t) for t in q2_tokens)
    ids.append(vocab.sep_id)

    segment_ids = [0] * first_seg_len + [1] * (len(ids) - first_seg_len)
    attention_mask = [1] * len(ids)
    return EncodedPair(ids, segment_ids, attention_mask, label)


def encode_single(
    vocab: Vocabulary, text: str, max_len: int = DEFAULT_MAX_LEN
) -> EncodedPair:
    """Encode one sentence as ``[CLS] tokens [SEP]`` (segment 0 throughout)."""
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("text is empty after tokenization")
    tokens = tokens[: max_len - 2]
    ids = [vocab.cls_id] + [vocab.id_of(t) for t in tokens] + [vocab.sep_id]
    return EncodedPair(ids, [0] * len(ids), [1] * len(ids))


def pad_to_length(pair: EncodedPair, length: int, pad_id: int) -> EncodedPair:
    """Right-pad a pair with PAD ids, mask 0, segment 1 on padding."""
    if length < len(pair):
        raise ValueError(f"cannot pad length-{len(pair)} pair down to {length}")
    extra = length - len(pair)
    return EncodedPair(
        token_ids=pair.token_ids + [pad_id] * extra,
        segment_ids=pair.segment_ids + [1] * extra,
        attention_mask=pair.attention_mask + [0] * extra,
        label=pair.label,
        masked_positions=list(pair.masked_positions),
        masked_targets=list(pair.masked_targets),
    )


def decode(vocab: Vocabulary, ids: list[int]) -> str:
    """Map ids back to a space-joined token string."""
    out = []
    for i in ids:
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} out of range for vocabulary of size {vocab.size}")
        out.append(vocab.id_to_token[i])
    return " ".join(out)
