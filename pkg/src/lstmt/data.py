"""File formats, vocabulary, synthetic corpus and checkpoints.

Feature files and caption files are JSON Lines::

    {"video_id": "v0", "stream": "rgb", "features": [[0.1, 0.2], [0.3, 0.4]]}
    {"video_id": "v0", "caption": "a man rides a horse"}

A checkpoint is one binary file: the magic prefix ``b"LSTMT\\x01"``, an
unsigned 64-bit little-endian manifest length, the JSON manifest, then each
tensor as raw little-endian float64 in manifest order.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    DataError,
    SchemaError,
)
from .model import BOS, EOS, PAD, STREAMS, UNK, CaptionerParams, FeatureSequence, ModelConfig, param_shapes

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
UNK_TOKEN = RESERVED[UNK]

_PUNCT = re.compile(r"[^\w\s]", flags=re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation characters, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


class Vocabulary:
    """Token list with ids 0-3 reserved for PAD, BOS, EOS and UNK."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, sentence: str, add_markers: bool = True) -> list[int]:
        ids = [self.index.get(w, UNK) for w in tokenize(sentence)]
        return [BOS] + ids + [EOS] if add_markers else ids

    def decode(self, ids) -> str:
        """Render ids as text, skipping PAD/BOS and stopping at EOS."""
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i])
        return " ".join(words)


def build_vocab(captions, min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ContractError("min_count must be >= 1")
    captions = list(captions)
    if not captions:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for c in captions for w in tokenize(c))
    kept = sorted((w for w, n in counts.items() if n >= min_count and w not in RESERVED),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept)


# ------------------------------------------------------------- JSON Lines

def read_jsonl(path):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"invalid JSON: {e.msg}", path, lineno) from None


def load_features(path) -> list[FeatureSequence]:
    out = []
    d_v = None
    for lineno, rec in read_jsonl(path):
        if not isinstance(rec, dict) or not {"video_id", "stream", "features"} <= rec.keys():
            raise DataError("record needs video_id, stream and features", path, lineno)
        if rec["stream"] not in STREAMS:
            raise DataError(f"unknown stream {rec['stream']!r}", path, lineno)
        rows = rec["features"]
        if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
            raise DataError("features must be a non-empty list of rows", path, lineno)
        try:
            feats = np.array(rows, dtype=np.float64)
        except (TypeError, ValueError):
            raise DataError("features must be a rectangular numeric matrix", path, lineno) from None
        if feats.ndim != 2 or feats.shape[1] == 0:
            raise DataError("features must be a rectangular numeric matrix", path, lineno)
        if not np.all(np.isfinite(feats)):
            r, c = np.argwhere(~np.isfinite(feats))[0]
            raise DataError(f"non-finite value at row {r}, column {c}", path, lineno)
        if d_v is None:
            d_v = feats.shape[1]
        elif feats.shape[1] != d_v:
            raise SchemaError(f"feature width {feats.shape[1]} differs from {d_v} earlier in file", path, lineno)
        out.append(FeatureSequence(str(rec["video_id"]), rec["stream"], feats))
    return out


def save_features(path, sequences) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in sequences:
            rec = {"video_id": s.video_id, "stream": s.stream, "features": s.features.tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_captions(path) -> dict[str, list[str]]:
    """Map video id to its captions (several lines per id = multi-reference)."""
    out: dict[str, list[str]] = {}
    for lineno, rec in read_jsonl(path):
        if not isinstance(rec, dict) or not isinstance(rec.get("caption"), str) or "video_id" not in rec:
            raise DataError("record needs video_id and a string caption", path, lineno)
        out.setdefault(str(rec["video_id"]), []).append(rec["caption"])
    return out


def save_captions(path, captions: dict[str, list[str]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for vid, caps in captions.items():
            for c in caps:
                fh.write(json.dumps({"video_id": vid, "caption": c}) + "\n")


# ------------------------------------------------------------ toy corpus

WORDS = (
    "a man woman person dog cat horse ball car boat is are the on in with and "
    "runs walks jumps plays rides throws holds opens stands sits street field water "
    "table stage guitar piano bike kitchen river snow grass small large red blue green "
    "young old two three then while near under over into through"
).split()


@dataclass
class ToyCorpus:
    """Synthetic videos whose captions are planted in feature column 0.

    Row ``i`` of every stream carries ``(u_i + 0.5) / n_words`` plus a small
    jitter in column 0, where ``u_i`` indexes ``words``; the caption is the
    sequence ``words[u_1] ... words[u_K]``.  Column 1 holds the row position
    ``(i + 0.5) / K`` and the remaining columns are stream-specific noise.
    """

    words: list[str]
    features: dict[str, list[FeatureSequence]]
    captions: dict[str, str]
    latent: dict[str, list[int]] = field(repr=False)

    @property
    def video_ids(self) -> list[str]:
        return list(self.captions)


def gen_toy_corpus(seed: int, n_videos: int, vocab_size: int = 30, K_range=(4, 8), d_v: int = 8) -> ToyCorpus:
    if n_videos < 0 or vocab_size < 5 or d_v < 2 or K_range[0] < 1 or K_range[1] < K_range[0]:
        raise ContractError("gen_toy_corpus: invalid sizes")
    n_words = vocab_size - len(RESERVED)
    if n_words > len(WORDS):
        raise ContractError(f"vocab_size too large for the toy word list (max {len(WORDS) + 4})")
    words = WORDS[:n_words]
    rng = np.random.default_rng(seed)
    feats = {s: [] for s in STREAMS}
    captions, latent = {}, {}
    jitter = 0.2 / n_words
    for v in range(n_videos):
        vid = f"video{v:04d}"
        K = int(rng.integers(K_range[0], K_range[1] + 1))
        u = rng.integers(0, n_words, size=K)
        for stream in STREAMS:
            x = rng.normal(0.0, 0.5, size=(K, d_v))
            x[:, 0] = (u + 0.5) / n_words + rng.uniform(-jitter, jitter, size=K)
            x[:, 1] = (np.arange(K) + 0.5) / K
            feats[stream].append(FeatureSequence(vid, stream, x))
        captions[vid] = " ".join(words[i] for i in u)
        latent[vid] = [int(i) for i in u]
    return ToyCorpus(words=list(words), features=feats, captions=captions, latent=latent)


def read_planted_caption(seq: FeatureSequence, words) -> str:
    """Recover a toy caption from feature column 0 alone."""
    n = len(words)
    return " ".join(words[min(n - 1, int(math.floor(x * n)))] for x in seq.features[:, 0])


# ------------------------------------------------------------ checkpoints

MAGIC = b"LSTMT\x01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    meta: dict = field(default_factory=dict)

    def captioner_params(self) -> CaptionerParams:
        return CaptionerParams.from_arrays(self.params)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    shapes = param_shapes(ckpt.config)
    tensors, payload, offset = [], [], 0
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        if arr.shape != shape:
            raise CheckpointShapeError(f"{name}: shape {arr.shape} does not match config {shape}")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(shape), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "tensors": tensors,
        "vocab": ckpt.vocab.tokens,
        "meta": ckpt.meta,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8:
        if MAGIC.startswith(blob[:len(MAGIC)]):
            raise CheckpointTruncatedError(f"{path}: file ends inside the header")
        raise CheckpointError(f"{path}: not a checkpoint file")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (n,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    if len(blob) < start + n:
        raise CheckpointTruncatedError(f"{path}: file ends inside the manifest")
    try:
        manifest = json.loads(blob[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt manifest") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {manifest.get('version')!r}, this build reads {FORMAT_VERSION}"
        )
    config = ModelConfig(**manifest["config"])
    if expect is not None and expect != config:
        raise CheckpointShapeError(f"{path}: checkpoint config {config} does not match expected {expect}")
    shapes = param_shapes(config)
    base = start + n
    params = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shapes.get(name) != shape:
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {shape}, config implies {shapes.get(name)}")
        count = int(np.prod(shape))
        lo = base + entry["offset"]
        hi = lo + 8 * count
        if hi > len(blob):
            raise CheckpointTruncatedError(f"{path}: payload for {name} is truncated")
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=lo).reshape(shape).astype(np.float64)
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensors {sorted(missing)}")
    vocab = Vocabulary(manifest["vocab"])
    if len(vocab) != config.vocab_size:
        raise CheckpointShapeError(f"{path}: vocabulary has {len(vocab)} tokens, config says {config.vocab_size}")
    return Checkpoint(config=config, params=params, vocab=vocab, meta=manifest.get("meta", {}))
