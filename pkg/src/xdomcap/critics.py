"""Domain critic, multi-modal critic, their losses and the sentence reward."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .captioner import pad_sentences
from .data import PAD

DC_LABELS = ("source", "target", "generated")
MC_LABELS = ("paired", "unpaired", "generated")
SOURCE, TARGET, GENERATED = 0, 1, 2
PAIRED, UNPAIRED = 0, 1


@dataclass
class DomainCriticConfig:
    vocab_size: int
    embed_dim: int = 32
    widths: tuple[int, ...] = (2, 3, 4)
    filters: int = 32
    t_max: int = 20

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1 or max(self.widths) > self.t_max:
            raise ValueError("conv widths must lie in [1, t_max]")


@dataclass
class MultiModalCriticConfig:
    vocab_size: int
    feature_dim: int
    embed_dim: int = 32
    hidden_dim: int = 64
    fusion_dim: int = 64
    t_max: int = 20


@dataclass
class CriticVerdict:
    dc_probs: np.ndarray
    mc_probs: np.ndarray

    @property
    def reward(self):
        return self.dc_probs[..., TARGET] * self.mc_probs[..., PAIRED]


def _batch(sentences, t_max):
    if isinstance(sentences, tuple):
        return sentences
    return pad_sentences(sentences, t_max)


class DomainCritic:
    """Kim-style text CNN with one highway layer, classifying source/target/generated."""

    def __init__(self, config: DomainCriticConfig, seed: int = 0, params: ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed):
        c = self.config
        p = ParamStore(seed)
        p.uniform("embed", (c.vocab_size, c.embed_dim))
        for w in c.widths:
            p.xavier(f"conv{w}_w", (w, c.embed_dim, c.filters), fan_in=w * c.embed_dim, fan_out=c.filters)
            p.zeros(f"conv{w}_b", (c.filters,))
        d = c.filters * len(c.widths)
        p.xavier("hw_t_w", (d, d))
        p.zeros("hw_t_b", (d,))
        p.xavier("hw_h_w", (d, d))
        p.zeros("hw_h_b", (d,))
        p.xavier("out_w", (d, 3))
        p.zeros("out_b", (3,))
        return p

    def manifest_config(self) -> dict:
        d = asdict(self.config)
        d["widths"] = ",".join(str(w) for w in self.config.widths)
        return d

    def encode(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        p = self.params
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary")
        B, T = tokens.shape
        pos = np.arange(T)[None, :]
        present = pos < lengths[:, None]
        # anything after the sentence end is forced to a zero embedding
        emb = ad.mul(ad.embedding(p["embed"], np.where(present, tokens, PAD)),
                     present[:, :, None].astype(np.float64))
        pooled = []
        for w in self.config.widths:
            conv = ad.relu(ad.conv1d(emb, p[f"conv{w}_w"], p[f"conv{w}_b"]))
            L = T - w + 1
            starts = np.arange(L)[None, :]
            valid = starts + w <= np.maximum(lengths, w)[:, None]
            pooled.append(ad.masked_max_over_time(conv, valid))
        z = ad.concat(pooled, axis=-1)
        return self.highway(z)

    def highway(self, z: Tensor, gate_override=None) -> Tensor:
        """g = t*h + (1-t)*z with t = sigmoid(W_t z + b_t), h = relu(W_h z + b_h)."""
        p = self.params
        t = ad.sigmoid(ad.linear(z, p["hw_t_w"], p["hw_t_b"])) if gate_override is None \
            else Tensor(np.broadcast_to(gate_override, z.shape).copy())
        h = ad.relu(ad.linear(z, p["hw_h_w"], p["hw_h_b"]))
        return ad.add(ad.mul(t, h), ad.mul(ad.sub(1.0, t), z))

    def logits(self, sentences) -> Tensor:
        tokens, lengths = _batch(sentences, self.config.t_max)
        return ad.linear(self.encode(tokens, lengths), self.params["out_w"], self.params["out_b"])

    def forward(self, sentences) -> np.ndarray:
        """(B, 3) probabilities over (source, target, generated)."""
        with ad.no_grad():
            return ad.softmax_array(self.logits(sentences).data)

    def loss(self, sentences, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("empty batch")
        if labels.min() < 0 or labels.max() > 2:
            raise ValueError("labels must be source/target/generated")
        return ad.nll(self.logits(sentences), labels)


class MultiModalCritic:
    """LSTM sentence encoder fused with the image by elementwise product."""

    def __init__(self, config: MultiModalCriticConfig, seed: int = 0, params: ParamStore | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed):
        c = self.config
        p = ParamStore(seed)
        # rho: the sentence encoder
        p.uniform("rho_embed", (c.vocab_size, c.embed_dim))
        p.uniform("rho_wx", (c.embed_dim, 4 * c.hidden_dim))
        p.uniform("rho_wh", (c.hidden_dim, 4 * c.hidden_dim))
        p.lstm_bias("rho_b", c.hidden_dim)
        p.xavier("W_x", (c.feature_dim, c.fusion_dim))
        p.zeros("b_x", (c.fusion_dim,))
        p.xavier("W_c", (c.hidden_dim, c.fusion_dim))
        p.zeros("b_c", (c.fusion_dim,))
        p.xavier("W_m", (c.fusion_dim, 3))
        p.zeros("b_m", (3,))
        return p

    def manifest_config(self) -> dict:
        return asdict(self.config)

    def encode_sentence(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        p = self.params
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary")
        B, T = tokens.shape
        H = self.config.hidden_dim
        h = c = Tensor(np.zeros((B, H)))
        for t in range(int(lengths.max())):
            keep = (t < lengths).astype(np.float64)
            x = ad.embedding(p["rho_embed"], tokens[:, t])
            h, c = ad.lstm_cell(x, h, c, p["rho_wx"], p["rho_wh"], p["rho_b"], keep)
        return h

    def fuse(self, features, sentence_code: Tensor) -> Tensor:
        p = self.params
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.config.feature_dim:
            raise ad.ShapeError("mc_forward", features.shape, (self.config.feature_dim,))
        img = ad.tanh(ad.linear(features, p["W_x"], p["b_x"]))
        txt = ad.tanh(ad.linear(sentence_code, p["W_c"], p["b_c"]))
        return ad.mul(img, txt)

    def logits(self, features, sentences) -> Tensor:
        tokens, lengths = _batch(sentences, self.config.t_max)
        f = self.fuse(features, self.encode_sentence(tokens, lengths))
        return ad.linear(f, self.params["W_m"], self.params["b_m"])

    def forward(self, features, sentences) -> np.ndarray:
        """(B, 3) probabilities over (paired, unpaired, generated)."""
        with ad.no_grad():
            return ad.softmax_array(self.logits(features, sentences).data)

    def loss(self, features, sentences, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("empty batch")
        if labels.min() < 0 or labels.max() > 2:
            raise ValueError("labels must be paired/unpaired/generated")
        return ad.nll(self.logits(features, sentences), labels)


def sentence_reward(dc_target, mc_paired):
    return np.asarray(dc_target) * np.asarray(mc_paired)


class Critics:
    """Both critics plus the reward they jointly assign.

    ``mode`` selects which factors enter the reward: "both", "dc" or "mc";
    a missing factor is replaced by 1.
    """

    def __init__(self, dc: DomainCritic, mc: MultiModalCritic, mode: str = "both"):
        if mode not in ("both", "dc", "mc"):
            raise ValueError(f"unknown critic mode {mode!r}")
        self.dc = dc
        self.mc = mc
        self.mode = mode

    def verdict(self, features, sentences) -> CriticVerdict:
        batch = _batch(sentences, self.dc.config.t_max)
        return CriticVerdict(self.dc.forward(batch), self.mc.forward(features, batch))

    def reward(self, features, sentences) -> np.ndarray:
        batch = _batch(sentences, self.dc.config.t_max)
        n = batch[0].shape[0]
        d = self.dc.forward(batch)[:, TARGET] if self.mode in ("both", "dc") else np.ones(n)
        m = self.mc.forward(features, batch)[:, PAIRED] if self.mode in ("both", "mc") else np.ones(n)
        return sentence_reward(d, m)

    __call__ = reward
