"""Cross-entropy training and self-critical policy-gradient fine-tuning."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, no_grad_value
from .data import Vocabulary
from .decoding import DecodeConfig, greedy_decode
from .errors import ConfigError, ContractError, NumericalError, VocabularyError
from .metrics import CiderD, sentence_bleu, sentence_meteor_lite
from .model import BOS, EOS, PAD, Captioner, CaptionerParams, FeatureSequence, decode_step, init_state

REWARDS = ("cider_d", "bleu4", "meteor_lite")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 10
    grad_clip_norm: float = 5.0
    seed: int = 0
    scst_enabled: bool = False
    scst_reward: str = "cider_d"
    scst_epochs: int = 0
    scst_learning_rate: float = 5e-5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.scst_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.scst_reward not in REWARDS:
            raise ConfigError(f"scst_reward must be one of {REWARDS}, got {self.scst_reward!r}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainingExample:
    video_id: str
    features: dict[str, FeatureSequence]
    caption: list[int]
    references: list[str] = field(default_factory=list)

    def validate(self, vocab_size: int):
        if len(self.caption) < 2:
            raise ContractError(f"{self.video_id}: caption needs at least BOS and EOS")
        if any(not 0 <= t < vocab_size for t in self.caption):
            raise VocabularyError(f"{self.video_id}: caption id outside vocabulary of size {vocab_size}")


def build_examples(sequences, captions: dict, vocab: Vocabulary) -> list[TrainingExample]:
    """Pair feature sequences with their captions, in first-seen video order.

    ``sequences`` may mix streams; the first reference of each video is the
    training target and all references are kept for rewards.
    """
    by_video: dict[str, dict[str, FeatureSequence]] = {}
    for seq in sequences:
        by_video.setdefault(seq.video_id, {})[seq.stream] = seq
    out = []
    for vid, feats in by_video.items():
        refs = captions.get(vid)
        if not refs:
            raise ContractError(f"video {vid!r} has features but no caption")
        out.append(TrainingExample(vid, feats, vocab.encode(refs[0]), list(refs)))
    return out


# ------------------------------------------------------------ XE loss

def xe_loss(params: CaptionerParams, example: TrainingExample, stream: str) -> Tensor:
    """Teacher-forced mean negative log-likelihood over non-PAD targets."""
    caption = list(example.caption)
    if len(caption) < 2:
        raise ContractError(f"{example.video_id}: caption needs at least BOS and EOS")
    feats = example.features[stream]
    state = init_state(feats, params)
    terms = []
    for tok, target in zip(caption[:-1], caption[1:]):
        if target == PAD:
            break
        state, logp, _ = decode_step(state, int(tok), feats, params)
        terms.append(ad.pick(logp, int(target)))
    if not terms:
        raise ContractError(f"{example.video_id}: caption has no non-PAD targets")
    return ad.neg(ad.mean(ad.stack(terms)))


def batch_xe_loss(params, examples, stream) -> Tensor:
    return ad.mean(ad.stack([xe_loss(params, ex, stream) for ex in examples]))


def pad_captions(captions) -> np.ndarray:
    """Right-pad id lists with PAD into a 2-D integer array."""
    width = max(len(c) for c in captions)
    out = np.full((len(captions), width), PAD, dtype=np.int64)
    for i, c in enumerate(captions):
        out[i, :len(c)] = c
    return out


# ---------------------------------------------------------- optimizers

def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads, max_norm: float):
    if not max_norm > 0:
        raise ContractError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads]
    return list(grads)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p.data = p.data - self.lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def make_optimizer(config: TrainConfig, lr: float | None = None):
    lr = config.learning_rate if lr is None else lr
    if config.optimizer == "sgd":
        return SGD(lr)
    return Adam(lr, config.beta1, config.beta2, config.eps)


def apply_gradients(params: CaptionerParams, optimizer, clip: float):
    tensors = params.tensors()
    grads = clip_gradients([np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors], clip)
    optimizer.step(tensors, grads)


# ------------------------------------------------------------- XE train

@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    wall_time: float

    def line(self) -> str:
        return f"epoch={self.epoch} split={self.split} loss={self.loss:.6f} time={self.wall_time:.2f}"


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(params: CaptionerParams, corpus, config: TrainConfig, stream: str = "rgb", log=None):
    """Teacher-forced XE training; returns ``(params, history)``.

    ``params`` is updated in place.  ``log`` receives each
    :class:`EpochRecord` as it is produced.
    """
    corpus = list(corpus)
    if not corpus:
        raise ContractError("cannot train on an empty corpus")
    vocab_size = params.W_s.shape[1]
    for ex in corpus:
        ex.validate(vocab_size)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config)
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in _batches(len(corpus), config.batch_size, rng):
            with Tape() as tape:
                try:
                    loss = batch_xe_loss(params, [corpus[i] for i in idx], stream)
                    backward(tape, loss)
                except NumericalError as e:
                    raise NumericalError(f"epoch {epoch}: {e}") from None
            apply_gradients(params, opt, config.grad_clip_norm)
            total += loss.item() * len(idx)
        rec = EpochRecord(epoch, "train", total / len(corpus), time.perf_counter() - t0)
        history.append(rec)
        if log is not None:
            log(rec)
    return params, history


def corpus_loss(params, corpus, stream) -> float:
    with no_grad_value():
        return float(np.mean([xe_loss(params, ex, stream).item() for ex in corpus]))


# ------------------------------------------------------------------ SCST

def make_reward(name: str, vocab: Vocabulary, reference_corpus=None):
    """Sentence reward ``fn(candidate_ids, reference_strings) -> float``.

    ``reference_corpus`` (list of reference lists) supplies CIDEr-D document
    frequencies.
    """
    from .data import tokenize

    def words(ids):
        return vocab.decode(ids).split()

    if name == "cider_d":
        if not reference_corpus:
            raise ConfigError("cider_d reward needs a reference corpus for document frequencies")
        scorer = CiderD([[tokenize(r) for r in refs] for refs in reference_corpus])
        return lambda ids, refs: scorer.score(words(ids), [tokenize(r) for r in refs])
    if name == "bleu4":
        return lambda ids, refs: sentence_bleu(words(ids), [tokenize(r) for r in refs], 4)
    if name == "meteor_lite":
        return lambda ids, refs: sentence_meteor_lite(words(ids), [tokenize(r) for r in refs])
    raise ConfigError(f"unknown reward {name!r}")


def _draw(logp: np.ndarray, u: float) -> int:
    cdf = np.cumsum(np.exp(logp))
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), cdf.size - 1))


def sample_captions(params: CaptionerParams, features: FeatureSequence, rng, max_len: int, n: int):
    """``n`` independent multinomial samples sharing one prefix cache.

    The next-word distribution depends only on the prefix, so each one is
    computed once.  Draws consume ``rng.random()`` exactly as repeated calls
    to :func:`sample_caption` would.
    """
    cache: dict[tuple[int, ...], tuple] = {}
    with no_grad_value():
        root = init_state(features, params)
        samples = []
        for _ in range(n):
            state, token, out = root, BOS, []
            for _ in range(max_len):
                key = tuple(out)
                if key not in cache:
                    new_state, logp, _ = decode_step(state, token, features, params)
                    cache[key] = (new_state, logp.data)
                state, logp = cache[key]
                token = _draw(logp, rng.random())
                out.append(token)
                if token == EOS:
                    break
            samples.append(out)
    return samples


def sample_caption(params: CaptionerParams, features: FeatureSequence, rng, max_len: int) -> list[int]:
    """Multinomial sample; ids exclude BOS and end with EOS if it was drawn."""
    return sample_captions(params, features, rng, max_len, 1)[0]


def sequence_log_prob(params: CaptionerParams, features: FeatureSequence, tokens) -> Tensor:
    """Sum of log p(token_t | previous tokens), starting from BOS."""
    state = init_state(features, params)
    terms, prev = [], BOS
    for tok in tokens:
        state, logp, _ = decode_step(state, prev, features, params)
        terms.append(ad.pick(logp, int(tok)))
        prev = int(tok)
    return ad.sum_(ad.stack(terms))


def scst_step(params, example: TrainingExample, stream: str, reward, rng, max_len: int):
    """Self-critical pseudo-loss for one example.

    Returns ``(loss, sample_reward, greedy_reward)``.  ``loss`` is
    ``-(r(sample) - r(greedy)) * log p(sample)``; call it under a tape and
    backpropagate to get the REINFORCE estimate with the greedy baseline.
    """
    feats = example.features[stream]
    sample = sample_caption(params, feats, rng, max_len)
    greedy = greedy_decode(Captioner(None, params), feats, DecodeConfig(beam_width=1, max_len=max_len)).tokens
    r_s = reward(sample, example.references)
    r_g = reward(greedy, example.references)
    logp = sequence_log_prob(params, feats, sample)
    return ad.scale(logp, -(r_s - r_g)), r_s, r_g


def scst_finetune(params, corpus, config: TrainConfig, reward, stream="rgb", max_len=30, log=None):
    """Policy-gradient fine-tuning; history records mean sample reward."""
    corpus = list(corpus)
    if not corpus:
        raise ContractError("cannot fine-tune on an empty corpus")
    rng = np.random.default_rng(config.seed + 1)
    opt = make_optimizer(config, lr=config.scst_learning_rate)
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, config.scst_epochs + 1):
        rewards = []
        for idx in _batches(len(corpus), config.batch_size, rng):
            with Tape() as tape:
                losses = []
                for i in idx:
                    loss, r_s, _ = scst_step(params, corpus[i], stream, reward, rng, max_len)
                    losses.append(loss)
                    rewards.append(r_s)
                backward(tape, ad.mean(ad.stack(losses)))
            apply_gradients(params, opt, config.grad_clip_norm)
        rec = EpochRecord(epoch, "scst", float(np.mean(rewards)), time.perf_counter() - t0)
        history.append(rec)
        if log is not None:
            log(rec)
    return params, history
