"""Mini bidirectional-transformer encoder for sentence pairs.

Token + position + segment embeddings feed a stack of self-attention
blocks with additive key masking; the pooled first-token state drives a
two-way pair-classification head, and a parallel head predicts original
token ids for masked-token training.  Both heads always exist in the
weight set; a stage simply trains the one its objective needs.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .tokenizer import EncodedPair

CHECKPOINT_MAGIC = b"DSIMCKPT"
CHECKPOINT_VERSION = 1

INIT_STD = 0.02
NEG_INF_MASK = -1e9


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ff_dim: int = 256
    vocab_size: int = 0
    max_positions: int = 200
    segment_types: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover at least the special tokens")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def expected_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical buffer names and shapes, fully determined by the config."""
    h, f, v = config.hidden, config.ff_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (v, h),
        "emb.pos": (config.max_positions, h),
        "emb.seg": (config.segment_types, h),
        "emb.ln.gain": (h,),
        "emb.ln.bias": (h,),
    }
    for i in range(config.layers):
        p = f"layer{i}"
        shapes[f"{p}.attn.wq"] = (h, h)
        shapes[f"{p}.attn.bq"] = (h,)
        shapes[f"{p}.attn.wk"] = (h, h)
        shapes[f"{p}.attn.bk"] = (h,)
        shapes[f"{p}.attn.wv"] = (h, h)
        shapes[f"{p}.attn.bv"] = (h,)
        shapes[f"{p}.attn.wo"] = (h, h)
        shapes[f"{p}.attn.bo"] = (h,)
        shapes[f"{p}.ln1.gain"] = (h,)
        shapes[f"{p}.ln1.bias"] = (h,)
        shapes[f"{p}.ff.w1"] = (h, f)
        shapes[f"{p}.ff.b1"] = (f,)
        shapes[f"{p}.ff.w2"] = (f, h)
        shapes[f"{p}.ff.b2"] = (h,)
        shapes[f"{p}.ln2.gain"] = (h,)
        shapes[f"{p}.ln2.bias"] = (h,)
    shapes["pooler.w"] = (h, h)
    shapes["pooler.b"] = (h,)
    shapes["pair_head.w"] = (h, 2)
    shapes["pair_head.b"] = (2,)
    shapes["mlm_head.w"] = (h, v)
    shapes["mlm_head.b"] = (v,)
    return shapes


class EncoderWeights:
    """All learnable buffers, addressed by canonical name."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.shape_audit()

    def shape_audit(self) -> None:
        expected = expected_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise CheckpointShapeError(
                f"buffer name mismatch: missing={missing} extra={extra}"
            )
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if got != shape:
                raise CheckpointShapeError(
                    f"buffer {name} has shape {got}, expected {shape}"
                )

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.config,
            {k: Tensor(v.values.copy(), requires_grad=v.requires_grad)
             for k, v in self.tensors.items()},
        )


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with resampling outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_weights(config: EncoderConfig, seed: int, std: float = INIT_STD) -> EncoderWeights:
    """Truncated-normal matrices, zero biases, unit layer-norm gains.

    ``std`` defaults to the conventional 0.02; desk-scale experiments may
    widen it, since that value presumes a much larger hidden size.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif name.endswith((".bias", ".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            values = np.zeros(shape)
        else:
            values = _truncated_normal(rng, shape, std)
        tensors[name] = Tensor(values, requires_grad=True)
    return EncoderWeights(config, tensors)


@dataclass
class Batch:
    """Arrays for a padded batch of encoded pairs."""

    ids: np.ndarray        # [B, L] int64
    segments: np.ndarray   # [B, L] int64
    mask: np.ndarray       # [B, L] float64, 1.0 on real tokens
    labels: np.ndarray | None = None
    masked_positions: list[tuple[int, int]] = field(default_factory=list)
    masked_targets: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def collate(pairs: list[EncodedPair], pad_id: int) -> Batch:
    """Pad pairs to the longest sequence in the batch and stack arrays."""
    if not pairs:
        raise ValueError("cannot collate an empty batch")
    length = max(len(p) for p in pairs)
    ids = np.full((len(pairs), length), pad_id, dtype=np.int64)
    segments = np.ones((len(pairs), length), dtype=np.int64)
    mask = np.zeros((len(pairs), length), dtype=np.float64)
    labels = []
    masked_positions: list[tuple[int, int]] = []
    masked_targets: list[int] = []
    for i, p in enumerate(pairs):
        ids[i, : len(p)] = p.token_ids
        segments[i, : len(p)] = p.segment_ids
        mask[i, : len(p)] = p.attention_mask
        labels.append(p.label)
        for pos, target in zip(p.masked_positions, p.masked_targets):
            masked_positions.append((i, pos))
            masked_targets.append(target)
    batch_labels = None
    if all(l is not None for l in labels):
        batch_labels = np.asarray(labels, dtype=np.int64)
    return Batch(ids, segments, mask, batch_labels, masked_positions, masked_targets)


def encode(
    weights: EncoderWeights,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attn_sink: list[np.ndarray] | None = None,
) -> Tensor:
    """Per-token hidden states ``[batch, length, hidden]``.

    PAD key positions receive an additive ``-1e9`` attention logit before
    the softmax, so masked-in states are independent of trailing padding.
    ``attn_sink``, when given, collects each layer's post-softmax attention
    weights ``[batch, heads, length, length]``.
    """
    cfg = weights.config
    b, length = batch.ids.shape
    if length > cfg.max_positions:
        raise ValueError(
            f"sequence length {length} exceeds max_positions {cfg.max_positions}"
        )
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training mode with dropout requires an rng")
    p = cfg.dropout

    pos_ids = np.broadcast_to(np.arange(length), (b, length))
    x = ag.add(
        ag.add(ag.embedding(weights["emb.tok"], batch.ids),
               ag.embedding(weights["emb.pos"], pos_ids)),
        ag.embedding(weights["emb.seg"], batch.segments),
    )
    x = ag.layer_norm(x, weights["emb.ln.gain"], weights["emb.ln.bias"])
    x = ag.dropout(x, p, rng, training)

    mask_add = Tensor(((1.0 - batch.mask) * NEG_INF_MASK)[:, None, None, :])
    inv_sqrt_dh = 1.0 / math.sqrt(cfg.head_dim)

    for i in range(cfg.layers):
        pre = f"layer{i}"

        def heads_view(t: Tensor) -> Tensor:
            t = ag.reshape(t, (b, length, cfg.heads, cfg.head_dim))
            return ag.transpose(t, (0, 2, 1, 3))

        q = heads_view(ag.add(ag.matmul(x, weights[f"{pre}.attn.wq"]), weights[f"{pre}.attn.bq"]))
        k = heads_view(ag.add(ag.matmul(x, weights[f"{pre}.attn.wk"]), weights[f"{pre}.attn.bk"]))
        v = heads_view(ag.add(ag.matmul(x, weights[f"{pre}.attn.wv"]), weights[f"{pre}.attn.bv"]))

        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
        scores = ag.add(scores, mask_add)
        attn = ag.softmax(scores, axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.values.copy())
        attn = ag.dropout(attn, p, rng, training)

        ctx = ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3))
        ctx = ag.reshape(ctx, (b, length, cfg.hidden))
        proj = ag.add(ag.matmul(ctx, weights[f"{pre}.attn.wo"]), weights[f"{pre}.attn.bo"])
        proj = ag.dropout(proj, p, rng, training)
        x = ag.layer_norm(ag.add(x, proj), weights[f"{pre}.ln1.gain"], weights[f"{pre}.ln1.bias"])

        ff = ag.add(ag.matmul(x, weights[f"{pre}.ff.w1"]), weights[f"{pre}.ff.b1"])
        ff = ag.add(ag.matmul(ag.gelu(ff), weights[f"{pre}.ff.w2"]), weights[f"{pre}.ff.b2"])
        ff = ag.dropout(ff, p, rng, training)
        x = ag.layer_norm(ag.add(x, ff), weights[f"{pre}.ln2.gain"], weights[f"{pre}.ln2.bias"])

    return x


def pooled_state(weights: EncoderWeights, hidden: Tensor, batch: Batch) -> Tensor:
    """tanh-projected first-token state, ``[batch, hidden]``."""
    b, length = batch.ids.shape
    flat = ag.reshape(hidden, (b * length, weights.config.hidden))
    cls = ag.take_rows(flat, np.arange(b) * length)
    return ag.tanh(ag.add(ag.matmul(cls, weights["pooler.w"]), weights["pooler.b"]))


def classify_pair(
    weights: EncoderWeights,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Match/mismatch logits ``[batch, 2]`` from the pooled state."""
    hidden = encode(weights, batch, training=training, rng=rng)
    pooled = pooled_state(weights, hidden, batch)
    pooled = ag.dropout(pooled, weights.config.dropout, rng, training)
    return ag.add(ag.matmul(pooled, weights["pair_head.w"]), weights["pair_head.b"])


def predict_masked(
    weights: EncoderWeights,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Vocabulary logits at every position, ``[batch, length, vocab]``."""
    hidden = encode(weights, batch, training=training, rng=rng)
    b, length = batch.ids.shape
    flat = ag.reshape(hidden, (b * length, weights.config.hidden))
    logits = ag.add(ag.matmul(flat, weights["mlm_head.w"]), weights["mlm_head.b"])
    return ag.reshape(logits, (b, length, weights.config.vocab_size))


def masked_token_loss(
    weights: EncoderWeights,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy at masked positions only; zero when nothing is masked."""
    if not batch.masked_positions:
        return ag.sum_all(ag.mul(Tensor(np.zeros(1)), Tensor(np.zeros(1))))
    logits = predict_masked(weights, batch, training=training, rng=rng)
    b, length = batch.ids.shape
    flat = ag.reshape(logits, (b * length, weights.config.vocab_size))
    rows = np.array([r * length + c for r, c in batch.masked_positions], dtype=np.int64)
    picked = ag.take_rows(flat, rows)
    return ag.cross_entropy_loss(picked, batch.masked_targets)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Config + weights + the ordered record of completed training stages."""

    config: EncoderConfig
    weights: EncoderWeights
    provenance: list[dict]
    seed: int
    vocab_hash: str | None = None

    @property
    def stage_names(self) -> list[str]:
        return [entry["stage"] for entry in self.provenance]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Magic, version, JSON header with a buffer manifest, then raw
    little-endian float64 buffers in manifest order."""
    names = sorted(expected_shapes(ckpt.config))
    manifest = []
    offset = 0
    for name in names:
        t = ckpt.weights[name]
        nbytes = t.values.size * 8
        manifest.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes
    header = {
        "config": ckpt.config.to_dict(),
        "provenance": ckpt.provenance,
        "seed": ckpt.seed,
        "vocab_hash": ckpt.vocab_hash,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for name in names:
        buf.write(ckpt.weights[name].values.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    fixed = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(raw) < fixed:
        raise CheckpointCorruptError(f"{path}: file shorter than fixed header")
    if bytes(view[: len(CHECKPOINT_MAGIC)]) != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic string")
    (version,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC) + 4)
    if len(raw) < fixed + header_len:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(bytes(view[fixed : fixed + header_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unparsable header: {exc}") from exc

    try:
        config = EncoderConfig.from_dict(header["config"])
        manifest = header["manifest"]
        provenance = header["provenance"]
        seed = header["seed"]
        vocab_hash = header.get("vocab_hash")
    except (KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: incomplete header: {exc}") from exc

    body = view[fixed + header_len :]
    expected = expected_shapes(config)
    tensors: dict[str, Tensor] = {}
    total = 0
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unexpected buffer {name}")
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"{path}: buffer {name} has shape {shape}, expected {expected[name]}"
            )
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != int(np.prod(shape)) * 8:
            raise CheckpointCorruptError(f"{path}: manifest nbytes mismatch for {name}")
        if start + nbytes > len(body):
            raise CheckpointCorruptError(f"{path}: truncated buffer {name}")
        values = np.frombuffer(body[start : start + nbytes], dtype="<f8").reshape(shape)
        tensors[name] = Tensor(values.copy(), requires_grad=True)
        total += nbytes
    if set(e["name"] for e in manifest) != set(expected):
        raise CheckpointShapeError(f"{path}: manifest does not cover all buffers")
    if total != len(body):
        raise CheckpointCorruptError(
            f"{path}: body has {len(body)} bytes, manifest expects {total}"
        )
    weights = EncoderWeights(config, tensors)
    return Checkpoint(config, weights, provenance, seed, vocab_hash)
