"""Greedy, beam and late-fusion decoding.

Several captioners (typically an RGB-stream and a flow-stream model) decode
in lockstep.  Each attends over its own stream's features; at every step
their next-word log-probabilities are averaged (``fusion="logprob_mean"``,
a renormalised geometric mean of the distributions) or, optionally, their
probabilities are averaged (``fusion="prob_mean"``).  The chosen token is fed
back to every model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad_value
from .errors import ConfigError, ContractError, EmptySequenceError
from .model import BOS, EOS, Captioner, DecoderState, FeatureSequence

FUSIONS = ("logprob_mean", "prob_mean")


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 3
    max_len: int = 30
    length_norm: str = "by_length"
    fusion: str = "logprob_mean"

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.length_norm not in ("none", "by_length"):
            raise ConfigError(f"length_norm must be 'none' or 'by_length', got {self.length_norm!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")


def fuse(log_probs, fusion: str = "logprob_mean") -> np.ndarray:
    """Combine per-model log-probability vectors into one."""
    if fusion == "logprob_mean":
        out = log_probs[0]
        for lp in log_probs[1:]:
            out = out + lp
        return out / len(log_probs)
    if fusion == "prob_mean":
        stacked = np.stack(log_probs)
        top = stacked.max(axis=0)
        return top + np.log(np.mean(np.exp(stacked - top), axis=0))
    raise ConfigError(f"unknown fusion {fusion!r}")


def _as_models(models, features):
    if isinstance(models, Captioner):
        models = [models]
    if isinstance(features, FeatureSequence):
        features = [features]
    models, features = list(models), list(features)
    if not 1 <= len(models) <= 2:
        raise ConfigError(f"late fusion takes one or two models, got {len(models)}")
    if len(models) != len(features):
        raise ConfigError(f"{len(models)} models but {len(features)} feature sequences")
    vocab = {m.params.W_s.shape[1] for m in models}
    if len(vocab) != 1:
        raise ConfigError("fused models must share a vocabulary")
    return models, features


def _step_all(models, states, token):
    new_states, logps, lams = [], [], []
    for m, s in zip(models, states):
        ns, lp, lam = m.step(s, token)
        new_states.append(ns)
        logps.append(lp.data)
        lams.append(lam.data)
    return new_states, logps, lams


@dataclass
class GreedyResult:
    tokens: list[int]
    log_probs: list[np.ndarray]
    attention: list[list[np.ndarray]]


def greedy_decode(models, features, config: DecodeConfig = DecodeConfig()) -> GreedyResult:
    """Argmax decoding; ``tokens`` excludes BOS and includes EOS if emitted."""
    models, features = _as_models(models, features)
    with no_grad_value():
        states = [m.start(f) for m, f in zip(models, features)]
        token, tokens, fused_steps, attn = BOS, [], [], []
        for _ in range(config.max_len):
            states, logps, lams = _step_all(models, states, token)
            fused = fuse(logps, config.fusion)
            token = int(np.argmax(fused))
            tokens.append(token)
            fused_steps.append(fused)
            attn.append(lams)
            if token == EOS:
                break
    return GreedyResult(tokens, fused_steps, attn)


@dataclass
class Hypothesis:
    tokens: list[int]
    cum_log_prob: float
    states: list[DecoderState] = field(repr=False)
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def score(self, length_norm: str) -> float:
        if length_norm == "by_length" and self.length > 0:
            return self.cum_log_prob / self.length
        return self.cum_log_prob


def _rank_key(h: Hypothesis, length_norm: str):
    return (-h.score(length_norm), h.tokens)


def beam_decode(models, features, config: DecodeConfig = DecodeConfig()) -> list[Hypothesis]:
    """Beam search over fused log-probabilities.

    The beam is pruned on cumulative log-probability; the returned list is
    ranked with ``config.length_norm``.  Ties go to the lower token ids.
    """
    models, features = _as_models(models, features)
    B = config.beam_width
    with no_grad_value():
        start = [m.start(f) for m, f in zip(models, features)]
        alive = [Hypothesis([BOS], 0.0, start)]
        done: list[Hypothesis] = []
        for _ in range(config.max_len):
            pool = []
            for h in alive:
                states, logps, _ = _step_all(models, h.states, h.tokens[-1])
                fused = fuse(logps, config.fusion)
                for tok in range(fused.shape[0]):
                    pool.append((h.cum_log_prob + float(fused[tok]), h.tokens + [tok], states))
            pool.sort(key=lambda e: (-e[0], e[1]))
            alive = []
            for cum, toks, states in pool[:B]:
                h = Hypothesis(toks, cum, states, finished=toks[-1] == EOS)
                (done if h.finished else alive).append(h)
            if not alive:
                break
        final = done + alive
    final.sort(key=lambda h: _rank_key(h, config.length_norm))
    return final


def decode_tokens(models, features, config: DecodeConfig = DecodeConfig()) -> list[int]:
    """Best caption ids (no BOS, trailing EOS removed)."""
    if config.beam_width == 1:
        toks = greedy_decode(models, features, config).tokens
    else:
        toks = beam_decode(models, features, config)[0].tokens[1:]
    return toks[:-1] if toks and toks[-1] == EOS else toks


# ---------------------------------------------------------------- events

@dataclass
class Proposal:
    t_start: float
    t_end: float
    features: list[FeatureSequence]


def slice_event(seq: FeatureSequence, t_start: float, t_end: float, duration: float | None = None):
    """Rows whose time centre lies in ``[t_start, t_end]``.

    Row ``i`` of ``K`` spans ``[i, i+1) * duration / K``; ``duration``
    defaults to ``K`` so times can be given in row units.
    """
    K = seq.K
    duration = float(K) if duration is None else float(duration)
    centres = (np.arange(K) + 0.5) * duration / K
    idx = np.nonzero((centres >= t_start) & (centres <= t_end))[0]
    if idx.size == 0:
        return None
    return seq.rows(int(idx[0]), int(idx[-1]) + 1)


def caption_events(models, proposals, config: DecodeConfig = DecodeConfig(), vocab=None) -> list[dict]:
    """Decode each proposal independently, preserving input order.

    A proposal whose slice is empty (``None`` in its feature list) yields an
    entry with ``caption`` set to ``None`` and an ``error`` message.
    """
    out = []
    for p in proposals:
        entry = {"t_start": p.t_start, "t_end": p.t_end}
        try:
            if any(f is None for f in p.features):
                raise ContractError("proposal covers no feature rows")
            ids = decode_tokens(models, p.features, config)
            entry["caption"] = vocab.decode(ids) if vocab is not None else ids
        except (ContractError, EmptySequenceError) as e:
            entry["caption"] = None
            entry["error"] = str(e)
        out.append(entry)
    return out
