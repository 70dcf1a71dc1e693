"""Image-conditioned LSTM captioner (the policy).

The image feature is projected to the embedding width and fed as the
step-0 input; BOS follows, and each later input is the previous word.
All methods work on batches: features are (B, F) arrays and sentences
are (B, T) id arrays padded with PAD after EOS. Sentences here never
contain BOS; they are ``[y_1, ..., y_T]`` with ``y_T == EOS`` unless
truncated at ``t_max``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import BOS, EOS, PAD


@dataclass
class CaptionerConfig:
    vocab_size: int
    feature_dim: int
    embed_dim: int = 32
    hidden_dim: int = 64
    t_max: int = 20
    dropout_rate: float = 0.1
    # reference value for the full-size model; not used at desk scale
    full_size_hidden_dim: int = 512

    def __post_init__(self):
        for name in ("vocab_size", "feature_dim", "embed_dim", "hidden_dim", "t_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.t_max < 2:
            raise ValueError("t_max must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    t: int = 0


@dataclass
class SampledSentence:
    tokens: list[int]
    log_probs: list[float]

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class SampleBatch:
    """Sentences sampled for a batch of images, plus the decoder trace.

    ``states_h[t]``/``states_c[t]``/``probs[t]`` describe the decoder after it
    has consumed ``tokens[:, t-1]`` (``t == 0``: after BOS), i.e. the state from
    which ``tokens[:, t]`` was drawn.
    """
    tokens: np.ndarray          # (B, t_max) padded with PAD
    lengths: np.ndarray         # (B,)
    log_probs: np.ndarray       # (B, t_max), 0 past the end
    states_h: list[np.ndarray] = field(default_factory=list)
    states_c: list[np.ndarray] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)


def pad_sentences(sentences, t_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Pack id sequences (no BOS) into a (B, t_max) PAD-filled array.

    A leading BOS is stripped; anything after the first EOS is dropped;
    sequences longer than ``t_max`` are truncated.
    """
    out = np.full((len(sentences), t_max), PAD, dtype=np.int64)
    lengths = np.zeros(len(sentences), dtype=np.int64)
    for i, s in enumerate(sentences):
        s = list(s)
        if s and s[0] == BOS:
            s = s[1:]
        if EOS in s:
            s = s[:s.index(EOS) + 1]
        s = s[:t_max]
        out[i, :len(s)] = s
        lengths[i] = len(s)
    return out, lengths


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    cum /= cum[:, -1:]
    u = rng.random(probs.shape[0])
    idx = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


class Captioner:
    def __init__(self, config: CaptionerConfig, seed: int = 0, params: ParamStore | None = None,
                 masked_ids=(PAD, BOS)):
        self.config = config
        self.masked_ids = tuple(masked_ids)
        if params is None:
            params = self._init_params(seed)
        self.params = params
        self.logit_mask = np.zeros(config.vocab_size)
        self.logit_mask[list(self.masked_ids)] = -np.inf

    def _init_params(self, seed: int) -> ParamStore:
        c = self.config
        p = ParamStore(seed)
        p.xavier("img_w", (c.feature_dim, c.embed_dim))
        p.zeros("img_b", (c.embed_dim,))
        p.uniform("embed", (c.vocab_size, c.embed_dim))
        p.uniform("lstm_wx", (c.embed_dim, 4 * c.hidden_dim))
        p.uniform("lstm_wh", (c.hidden_dim, 4 * c.hidden_dim))
        p.lstm_bias("lstm_b", c.hidden_dim)
        p.xavier("out_w", (c.hidden_dim, c.vocab_size))
        p.zeros("out_b", (c.vocab_size,))
        return p

    def manifest_config(self) -> dict:
        d = asdict(self.config)
        d["masked_ids"] = ",".join(str(i) for i in self.masked_ids)
        return d

    def copy(self) -> "Captioner":
        return Captioner(self.config, params=self.params.copy(), masked_ids=self.masked_ids)

    # -- core recurrences ---------------------------------------------------

    def _lstm(self, inp: Tensor, h: Tensor, c: Tensor, keep=None):
        p = self.params
        return ad.lstm_cell(inp, h, c, p["lstm_wx"], p["lstm_wh"], p["lstm_b"], keep)

    def _logits(self, h: Tensor, train: bool, rng) -> Tensor:
        p = self.params
        h = ad.dropout(h, self.config.dropout_rate, rng, train)
        return ad.add(ad.linear(h, p["out_w"], p["out_b"]), self.logit_mask)

    def _embed(self, ids, train: bool, rng) -> Tensor:
        return ad.dropout(ad.embedding(self.params["embed"], ids), self.config.dropout_rate, rng, train)

    def init_state(self, x, train: bool = False, rng=None) -> DecoderState:
        """Consume the projected image feature; the returned state expects BOS next."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.config.feature_dim:
            raise ad.ShapeError("init_state", x.shape, (self.config.feature_dim,))
        p = self.params
        v = ad.linear(x, p["img_w"], p["img_b"])
        H = self.config.hidden_dim
        zeros = Tensor(np.zeros((x.shape[0], H)))
        h, c = self._lstm(v, zeros, zeros)
        return DecoderState(h, c, 0)

    def step(self, state: DecoderState, token_ids, train: bool = False, rng=None):
        """Feed one token per row; return the advanced state and next-word probabilities."""
        if state.t >= self.config.t_max:
            raise ValueError(f"step beyond t_max={self.config.t_max}")
        ids = np.atleast_1d(np.asarray(token_ids, dtype=np.int64))
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of range")
        h, c = self._lstm(self._embed(ids, train, rng), state.h, state.c)
        logits = self._logits(h, train, rng)
        return DecoderState(h, c, state.t + 1), ad.softmax_array(logits.data)

    # -- training objective -------------------------------------------------

    def xent_loss(self, features, sentences, scheduled_sampling_prob: float = 0.0,
                  rng: np.random.Generator | None = None, train: bool = False,
                  label_smoothing: float = 0.0) -> Tensor:
        """Summed per-word negative log-likelihood of the ground-truth sentences.

        With probability ``scheduled_sampling_prob`` each input word (after BOS)
        is replaced by a word sampled from the model's previous distribution.
        """
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if len(sentences) == 0:
            raise ValueError("empty batch")
        tokens, lengths = (sentences if isinstance(sentences, tuple) else
                           pad_sentences(sentences, self.config.t_max))
        if features.shape[0] != tokens.shape[0]:
            raise ad.ShapeError("xent_loss", features.shape, tokens.shape)
        if rng is None and (train or scheduled_sampling_prob > 0):
            raise ValueError("rng required for dropout or scheduled sampling")
        T = int(lengths.max())
        state = self.init_state(features, train, rng)
        h, c = state.h, state.c
        inp = np.full(tokens.shape[0], BOS)
        step_logits = []
        for t in range(T):
            h, c = self._lstm(self._embed(inp, train, rng), h, c)
            logits = self._logits(h, train, rng)
            step_logits.append(logits)
            inp = tokens[:, t].copy()
            if scheduled_sampling_prob > 0 and t + 1 < T:
                swap = rng.random(inp.shape[0]) < scheduled_sampling_prob
                if swap.any():
                    drawn = sample_categorical(ad.softmax_array(logits.data[swap]), rng)
                    inp[swap] = drawn
        all_logits = ad.stack_time(step_logits)
        targets = tokens[:, :T]
        weights = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
        return ad.nll(all_logits, np.where(weights > 0, targets, EOS), weights, label_smoothing)

    def sequence_log_probs(self, features, tokens: np.ndarray, lengths: np.ndarray,
                           train: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
        """Teacher-forced logits for given sentences: returns ((B, T, V) logits, T-mask)."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        T = int(lengths.max())
        state = self.init_state(features, train, rng)
        h, c = state.h, state.c
        inp = np.full(tokens.shape[0], BOS)
        step_logits = []
        for t in range(T):
            h, c = self._lstm(self._embed(inp, train, rng), h, c)
            step_logits.append(self._logits(h, train, rng))
            inp = tokens[:, t]
        mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
        return ad.stack_time(step_logits), mask

    # -- generation ---------------------------------------------------------

    def sample(self, features, rng: np.random.Generator, greedy: bool = False,
               keep_trace: bool = False) -> SampleBatch:
        """Draw one sentence per feature row, without recording a graph."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        B = features.shape[0]
        t_max = self.config.t_max
        tokens = np.full((B, t_max), PAD, dtype=np.int64)
        logp = np.zeros((B, t_max))
        lengths = np.full(B, t_max, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = SampleBatch(tokens, lengths, logp)
        with ad.no_grad():
            state = self.init_state(features)
            inp = np.full(B, BOS)
            for t in range(t_max):
                state, probs = self.step(state, inp)
                if keep_trace:
                    out.states_h.append(state.h.data)
                    out.states_c.append(state.c.data)
                    out.probs.append(probs)
                if greedy:
                    y = np.argmax(probs, axis=1)
                else:
                    y = sample_categorical(probs, rng)
                y = np.where(done, PAD, y)
                tokens[:, t] = y
                live = ~done
                logp[live, t] = np.log(probs[live, y[live]])
                ended = live & (y == EOS)
                lengths[ended] = t + 1
                done |= ended
                if done.all():
                    break
                inp = np.where(done, EOS, y)
        return out

    def continue_from(self, h: np.ndarray, c: np.ndarray, probs: np.ndarray, start: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Sample continuations from decoder states positioned to emit word ``start``.

        Returns (tokens, lengths) where tokens is (N, t_max - start) padded
        with PAD and lengths counts emitted words (including EOS).
        """
        t_max = self.config.t_max
        N = h.shape[0]
        span = t_max - start
        tokens = np.full((N, span), PAD, dtype=np.int64)
        lengths = np.full(N, span, dtype=np.int64)
        if span <= 0:
            return tokens, np.zeros(N, dtype=np.int64)
        done = np.zeros(N, dtype=bool)
        with ad.no_grad():
            state = DecoderState(Tensor(h), Tensor(c), start)
            for k in range(span):
                y = sample_categorical(probs, rng)
                y = np.where(done, PAD, y)
                tokens[:, k] = y
                ended = ~done & (y == EOS)
                lengths[ended] = k + 1
                done |= ended
                if done.all() or k + 1 == span:
                    break
                state, probs = self.step(DecoderState(state.h, state.c, 0), np.where(done, EOS, y))
        return tokens, lengths

    def sample_sentence(self, x, seed: int) -> SampledSentence:
        batch = self.sample(np.atleast_2d(x), np.random.default_rng(seed))
        n = int(batch.lengths[0])
        return SampledSentence([int(v) for v in batch.tokens[0, :n]], [float(v) for v in batch.log_probs[0, :n]])

    def greedy(self, features) -> SampleBatch:
        return self.sample(features, np.random.default_rng(0), greedy=True)
