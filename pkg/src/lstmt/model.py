"""Two-layer attention LSTM captioner.

One decoding step:

1. the first LSTM reads ``[h2_prev, W_s[:, token], v_bar]``;
2. attention scores ``W_a tanh(W_f v_i + W_h h1)`` over the K feature rows
   are softmax-normalised and used to average the rows into ``v_hat``;
3. the second LSTM reads ``[v_hat, h1]``;
4. ``W_out h2 + b_out`` gives the next-word logits.

All functions take and return :class:`~lstmt.autodiff.Tensor` values, so the
same code serves training (under a tape) and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, EmptySequenceError, VocabularyError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
STREAMS = ("rgb", "flow")


@dataclass(frozen=True)
class ModelConfig:
    d_v: int = 2048
    d_h: int = 1000
    d_a: int = 512
    d_e: int = 300
    vocab_size: int = 10000
    max_caption_len: int = 30

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"ModelConfig.{f.name} must be a positive integer, got {value!r}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be at least 4 (PAD, BOS, EOS, UNK)")

    def to_dict(self) -> dict:
        return {f.name: int(getattr(self, f.name)) for f in fields(self)}


@dataclass
class LstmCellParams:
    """Gate rows are stacked in the order input, forget, candidate, output."""

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]


@dataclass
class CaptionerParams:
    W_s: Tensor
    W_a: Tensor
    W_f: Tensor
    W_h: Tensor
    lstm1: LstmCellParams
    lstm2: LstmCellParams
    W_out: Tensor
    b_out: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        """Parameters in a fixed canonical order."""
        return [
            ("W_s", self.W_s), ("W_a", self.W_a), ("W_f", self.W_f), ("W_h", self.W_h),
            ("lstm1.w_x", self.lstm1.w_x), ("lstm1.w_h", self.lstm1.w_h), ("lstm1.b", self.lstm1.b),
            ("lstm2.w_x", self.lstm2.w_x), ("lstm2.w_h", self.lstm2.w_h), ("lstm2.b", self.lstm2.b),
            ("W_out", self.W_out), ("b_out", self.b_out),
        ]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "CaptionerParams":
        def p(name):
            return Tensor(arrays[name], requires_grad=True, name=name)

        return cls(
            W_s=p("W_s"), W_a=p("W_a"), W_f=p("W_f"), W_h=p("W_h"),
            lstm1=LstmCellParams(p("lstm1.w_x"), p("lstm1.w_h"), p("lstm1.b")),
            lstm2=LstmCellParams(p("lstm2.w_x"), p("lstm2.w_h"), p("lstm2.b")),
            W_out=p("W_out"), b_out=p("b_out"),
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    return {
        "W_s": (c.d_e, c.vocab_size),
        "W_a": (1, c.d_a),
        "W_f": (c.d_a, c.d_v),
        "W_h": (c.d_a, c.d_h),
        "lstm1.w_x": (4 * c.d_h, c.d_h + c.d_e + c.d_v),
        "lstm1.w_h": (4 * c.d_h, c.d_h),
        "lstm1.b": (4 * c.d_h,),
        "lstm2.w_x": (4 * c.d_h, c.d_v + c.d_h),
        "lstm2.w_h": (4 * c.d_h, c.d_h),
        "lstm2.b": (4 * c.d_h,),
        "W_out": (c.vocab_size, c.d_h),
        "b_out": (c.vocab_size,),
    }


def init_params(config: ModelConfig, seed: int = 0, scale: float = 0.08) -> CaptionerParams:
    """Uniform(-scale, scale) weights; forget-gate biases start at 1.0."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        arrays[name] = rng.uniform(-scale, scale, size=shape)
    d = config.d_h
    for cell in ("lstm1.b", "lstm2.b"):
        arrays[cell][d:2 * d] = 1.0
    return CaptionerParams.from_arrays(arrays)


def zero_params(config: ModelConfig) -> CaptionerParams:
    return CaptionerParams.from_arrays({k: np.zeros(s) for k, s in param_shapes(config).items()})


def check_params(params: CaptionerParams, config: ModelConfig) -> None:
    for name, shape in param_shapes(config).items():
        got = dict(params.named())[name].shape
        if got != shape:
            raise DimensionError(f"parameter {name} has shape {got}, config expects {shape}")


@dataclass(frozen=True)
class FeatureSequence:
    video_id: str
    stream: str
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionError(f"features must be K x d_v, got shape {feats.shape}")
        if feats.shape[0] == 0:
            raise EmptySequenceError(f"video {self.video_id!r} has no feature rows")
        if not np.all(np.isfinite(feats)):
            raise DimensionError(f"video {self.video_id!r} has non-finite features")
        if self.stream not in STREAMS:
            raise ConfigError(f"unknown stream {self.stream!r}; expected one of {STREAMS}")
        object.__setattr__(self, "features", feats)

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def d_v(self) -> int:
        return self.features.shape[1]

    def rows(self, start: int, stop: int) -> "FeatureSequence":
        return FeatureSequence(self.video_id, self.stream, self.features[start:stop])


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    v_bar: Tensor
    # per-video attention cache: feature rows, and W_f applied to every row
    feats: Tensor = field(repr=False)
    keys: Tensor = field(repr=False)


def mean_pool(features) -> Tensor:
    feats = features.features if isinstance(features, FeatureSequence) else features
    feats = ad._as_tensor(feats)
    if feats.data.ndim != 2 or feats.shape[0] == 0:
        raise EmptySequenceError("mean_pool needs at least one feature row")
    return ad.mean(feats, axis=0)


def init_state(features: FeatureSequence, params: CaptionerParams) -> DecoderState:
    if features.d_v != params.W_f.shape[1]:
        raise DimensionError(f"features have d_v={features.d_v}, model expects {params.W_f.shape[1]}")
    d_h = params.W_h.shape[1]
    feats = Tensor(features.features)
    zero = Tensor(np.zeros(d_h))
    return DecoderState(
        h1=zero, c1=zero, h2=zero, c2=zero,
        v_bar=mean_pool(feats),
        feats=feats,
        keys=ad.matmul(params.W_f, Tensor(features.features.T)),
    )


def lstm_cell(cell: LstmCellParams, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    d = cell.hidden_size
    z = ad.add(ad.add(ad.matmul(cell.w_x, x), ad.matmul(cell.w_h, h)), cell.b)
    i = ad.sigmoid(ad.slice_(z, 0, d))
    f = ad.sigmoid(ad.slice_(z, d, 2 * d))
    g = ad.tanh(ad.slice_(z, 2 * d, 3 * d))
    o = ad.sigmoid(ad.slice_(z, 3 * d, 4 * d))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def embed(token: int, params: CaptionerParams) -> Tensor:
    vocab = params.W_s.shape[1]
    if not 0 <= int(token) < vocab:
        raise VocabularyError(f"token id {token} outside vocabulary of size {vocab}")
    return ad.take_column(params.W_s, int(token))


def lstm1_step(state: DecoderState, token: int, params: CaptionerParams, config=None):
    x = ad.concat([state.h2, embed(token, params), state.v_bar])
    return lstm_cell(params.lstm1, x, state.h1, state.c1)


def attention(features, h1: Tensor, params: CaptionerParams, keys: Tensor | None = None):
    """Return ``(lambda, v_hat)`` for one step.

    ``keys`` is ``W_f`` applied to every feature row (d_a x K); pass it to
    avoid recomputing it at each step.
    """
    if isinstance(features, FeatureSequence):
        feats = Tensor(features.features)
    else:
        feats = ad._as_tensor(features)
    if feats.data.ndim != 2 or feats.shape[0] == 0:
        raise EmptySequenceError("attention needs at least one feature row")
    if keys is None:
        keys = ad.matmul(params.W_f, Tensor(feats.data.T))
    hidden = ad.tanh(ad.add_col(keys, ad.matmul(params.W_h, h1)))
    scores = ad.reshape(ad.matmul(params.W_a, hidden), (feats.shape[0],))
    lam = ad.softmax(scores)
    v_hat = ad.matmul(lam, feats)
    return lam, v_hat


def lstm2_step(state: DecoderState, v_hat: Tensor, params: CaptionerParams, h1: Tensor | None = None):
    """Second LSTM update from ``[v_hat, h1]``.

    ``h1`` defaults to ``state.h1``; during a full step the caller passes the
    freshly computed first-layer output.
    """
    h1 = state.h1 if h1 is None else h1
    x = ad.concat([v_hat, h1])
    return lstm_cell(params.lstm2, x, state.h2, state.c2)


def word_logits(h2: Tensor, params: CaptionerParams) -> Tensor:
    return ad.add(ad.matmul(params.W_out, h2), params.b_out)


def decode_step(state: DecoderState, token: int, features, params: CaptionerParams, config=None):
    """One full decoding step; returns ``(new_state, log_probs, lambda)``."""
    h1, c1 = lstm1_step(state, token, params)
    lam, v_hat = attention(state.feats, h1, params, keys=state.keys)
    mid = DecoderState(h1, c1, state.h2, state.c2, state.v_bar, state.feats, state.keys)
    h2, c2 = lstm2_step(mid, v_hat, params)
    log_probs = ad.log_softmax(word_logits(h2, params))
    new_state = DecoderState(h1, c1, h2, c2, state.v_bar, state.feats, state.keys)
    return new_state, log_probs, lam


def teacher_forced(params: CaptionerParams, features: FeatureSequence, inputs) -> list[Tensor]:
    """Feed ``inputs`` token by token; return one log-prob vector per input."""
    state = init_state(features, params)
    out = []
    for tok in inputs:
        state, logp, _ = decode_step(state, int(tok), features, params)
        out.append(logp)
    return out


@dataclass
class Captioner:
    """A parameter set bound to its configuration and (optionally) its stream."""

    config: ModelConfig | None
    params: CaptionerParams
    stream: str | None = None

    def start(self, features: FeatureSequence) -> DecoderState:
        if self.stream is not None and features.stream != self.stream:
            raise ConfigError(
                f"model trained on stream {self.stream!r} was given {features.stream!r} features"
            )
        return init_state(features, self.params)

    def step(self, state: DecoderState, token: int):
        return decode_step(state, token, None, self.params)
