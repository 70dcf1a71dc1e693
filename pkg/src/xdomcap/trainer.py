"""Pretraining, Monte Carlo rollouts, policy gradient and the adversarial loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Adam
from .captioner import Captioner, SampleBatch, pad_sentences
from .critics import Critics, GENERATED, PAIRED, SOURCE, TARGET, UNPAIRED
from .data import BOS, EOS, DatasetBundle

log = logging.getLogger(__name__)

RewardFn = Callable[[np.ndarray, tuple[np.ndarray, np.ndarray]], np.ndarray]


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 50
    learning_rate: float = 5e-4
    lr_decay: float = 0.8
    decay_every: int = 3
    scheduled_sampling_max: float = 0.25
    dropout: bool = True
    label_smoothing: float = 0.0
    seed: int = 0


@dataclass
class TrainConfig:
    n_critic: int = 5
    n_gen: int = 1
    K: int = 3
    M: int = 8
    image_batch: int = 16
    critic_batch: int = 48
    lr_captioner: float = 5e-5
    lr_critic: float = 5e-5
    iterations: int = 500
    seed: int = 0
    baseline: bool = False
    baseline_decay: float = 0.9
    dropout: bool = True
    rollout_dropout: bool = False
    critic_mode: str = "both"
    checkpoint_every: int = 0
    # critic-only rounds before the first captioner update; the initial critics
    # are untrained and their reward is noise
    warmup_rounds: int = 0
    lr_warmup: float = 1e-3

    def __post_init__(self):
        if self.warmup_rounds < 0:
            raise ValueError("warmup_rounds must be non-negative")
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be at least 1")
        if self.n_gen > 0 and self.n_gen >= self.n_critic:
            raise ValueError("critics must be updated more often than the captioner (n_gen < n_critic)")
        if self.critic_batch % 3:
            raise ValueError("critic_batch must be divisible by 3 for balanced classes")


@dataclass
class IterationRecord:
    iteration: int
    dc_loss: float
    mc_loss: float
    mean_reward: float
    mean_len: float
    grad_norm: float


@dataclass
class TrainLog:
    records: list[IterationRecord] = field(default_factory=list)

    def append(self, rec: IterationRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration indices must strictly increase")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        cols = ("iteration", "dc_loss", "mc_loss", "mean_reward", "mean_len", "grad_norm")
        lines = [",".join(cols)]
        for r in self.records:
            lines.append(",".join(repr(getattr(r, c)) if c != "iteration" else str(r.iteration) for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")


class TrainingAborted(RuntimeError):
    def __init__(self, msg, captioner=None, critics=None, log=None):
        super().__init__(msg)
        self.captioner = captioner
        self.critics = critics
        self.log = log


@dataclass
class PackedData:
    """Dataset splits as dense arrays ready for minibatching."""
    src_feat: np.ndarray
    src_tok: np.ndarray
    src_len: np.ndarray
    unpaired_feat: np.ndarray
    unpaired_sent: np.ndarray
    tgt_img_feat: np.ndarray
    tgt_tok: np.ndarray
    tgt_len: np.ndarray

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle, t_max: int) -> "PackedData":
        if not bundle.source_paired or not bundle.target_images or not bundle.target_sentences \
                or not bundle.source_unpaired:
            raise ValueError("dataset bundle is missing a required split")
        index = {r.id: i for i, r in enumerate(bundle.source_paired)}
        src_tok, src_len = pad_sentences([r.tokens for r in bundle.source_paired], t_max)
        tgt_tok, tgt_len = pad_sentences([r.tokens for r in bundle.target_sentences], t_max)
        return cls(
            src_feat=np.stack([r.feature for r in bundle.source_paired]),
            src_tok=src_tok, src_len=src_len,
            unpaired_feat=np.array([index[a.id] for a, _ in bundle.source_unpaired]),
            unpaired_sent=np.array([index[b.id] for _, b in bundle.source_unpaired]),
            tgt_img_feat=np.stack([r.feature for r in bundle.target_images]),
            tgt_tok=tgt_tok, tgt_len=tgt_len,
        )


# ---------------------------------------------------------------------------
# pretraining


def pretrain(captioner: Captioner, features: np.ndarray, sentences, cfg: PretrainConfig | None = None,
             val: tuple[np.ndarray, list] | None = None) -> list[float]:
    """Cross-entropy training with scheduled sampling; returns mean per-word loss per epoch.

    The learning rate decays by ``lr_decay`` every ``decay_every`` epochs and the
    scheduled-sampling probability ramps linearly from 0 to its maximum.
    """
    cfg = cfg or PretrainConfig()
    rng = np.random.default_rng(cfg.seed)
    tokens, lengths = pad_sentences(sentences, captioner.config.t_max)
    opt = Adam(captioner.params, cfg.learning_rate)
    n = len(features)
    history = []
    for epoch in range(cfg.epochs):
        opt.learning_rate = cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.decay_every)
        ss = cfg.scheduled_sampling_max * (epoch / max(cfg.epochs - 1, 1))
        order = rng.permutation(n)
        total, words = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = captioner.xent_loss(features[idx], (tokens[idx], lengths[idx]), ss, rng, train=cfg.dropout,
                                      label_smoothing=cfg.label_smoothing)
            loss.backward()
            opt.step()
            total += loss.item()
            words += int(lengths[idx].sum())
        captioner.params.check_finite()
        history.append(total / words)
        log.info("pretrain epoch %d loss %.4f ss %.3f", epoch, history[-1], ss)
    return history


def per_word_loss(captioner: Captioner, features, sentences) -> float:
    tokens, lengths = pad_sentences(sentences, captioner.config.t_max)
    with ad.no_grad():
        return captioner.xent_loss(features, (tokens, lengths)).item() / float(lengths.sum())


# ---------------------------------------------------------------------------
# Q estimation


def _state_after(captioner: Captioner, x: np.ndarray, prefix: list[int]):
    """Decoder state and next-word distribution after consuming BOS + prefix."""
    with ad.no_grad():
        state = captioner.init_state(np.atleast_2d(x))
        state, probs = captioner.step(state, [BOS])
        for tok in prefix:
            state, probs = captioner.step(state, [tok])
    return state, probs


def estimate_q(x, prefix, candidate: int, captioner: Captioner, reward_fn: RewardFn, K: int,
               seed: int = 0) -> float:
    """Mean reward of K completions of ``prefix + [candidate]`` sampled from the policy.

    A candidate that finishes the sentence (EOS, or the last allowed slot)
    needs no rollout: its value is the reward of the finished sentence.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    prefix = [int(t) for t in prefix if t != BOS]
    head = prefix + [int(candidate)]
    t_max = captioner.config.t_max
    if candidate == EOS or len(head) >= t_max:
        tokens, lengths = pad_sentences([head], t_max)
        return float(reward_fn(x, (tokens, lengths))[0])
    state, probs = _state_after(captioner, x, head)
    rng = np.random.default_rng(seed)
    h = np.repeat(state.h.data, K, axis=0)
    c = np.repeat(state.c.data, K, axis=0)
    cont, clen = captioner.continue_from(h, c, np.repeat(probs, K, axis=0), len(head), rng)
    tokens = np.zeros((K, t_max), dtype=np.int64)
    tokens[:, :len(head)] = head
    tokens[:, len(head):] = cont
    lengths = len(head) + clen
    return float(np.mean(reward_fn(np.repeat(x, K, axis=0), (tokens, lengths))))


def rollout_q(captioner: Captioner, features: np.ndarray, batch: SampleBatch, reward_fn: RewardFn,
              K: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Q for every sampled word of every sentence in ``batch``.

    ``batch`` must have been drawn with ``keep_trace=True``. Returns ``(Q, R)``
    where ``Q`` is (N, t_max), zero past each sentence end, and ``R`` holds the
    rewards of the sampled sentences themselves.
    """
    tokens, lengths = batch.tokens, batch.lengths
    N, t_max = tokens.shape
    R = np.asarray(reward_fn(features, (tokens, lengths)), dtype=np.float64)
    Q = np.zeros((N, t_max))
    Q[np.arange(N), lengths - 1] = R

    all_tok, all_len, all_feat, where = [], [], [], []
    for t in range(t_max - 1):
        rows = np.nonzero(lengths > t + 1)[0]
        if rows.size == 0:
            break
        rows_k = np.repeat(rows, K)
        h = batch.states_h[t + 1][rows_k]
        c = batch.states_c[t + 1][rows_k]
        probs = batch.probs[t + 1][rows_k]
        cont, clen = captioner.continue_from(h, c, probs, t + 1, rng)
        full = np.zeros((rows_k.size, t_max), dtype=np.int64)
        full[:, :t + 1] = tokens[rows_k, :t + 1]
        full[:, t + 1:] = cont
        all_tok.append(full)
        all_len.append(t + 1 + clen)
        all_feat.append(features[rows_k])
        where.append((rows, t))
    if all_tok:
        rewards = _dedup_reward(reward_fn, np.concatenate(all_feat), np.concatenate(all_tok),
                                np.concatenate(all_len))
        pos = 0
        for rows, t in where:
            n = rows.size * K
            Q[rows, t] = rewards[pos:pos + n].reshape(rows.size, K).mean(axis=1)
            pos += n
    return Q, R


def _dedup_reward(reward_fn: RewardFn, features: np.ndarray, tokens: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Score each distinct (feature, sentence) row once; rollouts repeat a lot."""
    _, feat_id = np.unique(features, axis=0, return_inverse=True)
    key = np.concatenate([feat_id.reshape(-1, 1), tokens], axis=1)
    uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    r = np.asarray(reward_fn(features[first], (tokens[first], lengths[first])), dtype=np.float64)
    return r[inverse.reshape(-1)]


# ---------------------------------------------------------------------------
# policy gradient


def reinforce_loss(captioner: Captioner, features: np.ndarray, batch: SampleBatch, Q: np.ndarray,
                   baseline: float = 0.0, train: bool = False, rng=None) -> ad.Tensor:
    """Surrogate whose gradient is -(1/N) sum_n sum_t grad log pi(y_t) (Q_t - b)."""
    logits, mask = captioner.sequence_log_probs(features, batch.tokens, batch.lengths, train, rng)
    T = mask.shape[1]
    adv = (Q[:, :T] - baseline) * mask / batch.tokens.shape[0]
    return ad.nll(logits, np.where(mask > 0, batch.tokens[:, :T], EOS), adv)


def policy_gradient(captioner: Captioner, images: np.ndarray, reward_fn: RewardFn, cfg: TrainConfig,
                    rng: np.random.Generator, baseline: float = 0.0):
    """Sample M sentences per image, estimate Q by rollout and accumulate the
    policy gradient into ``captioner.params`` (no optimizer step).

    Returns the sampled batch and the sentence rewards.
    """
    features = np.repeat(images, cfg.M, axis=0)
    batch = captioner.sample(features, rng, keep_trace=True)
    Q, R = rollout_q(captioner, features, batch, reward_fn, cfg.K, rng)
    if np.all(batch.lengths == 1):
        log.warning("every sampled sentence is empty (immediate EOS)")
    loss = reinforce_loss(captioner, features, batch, Q, baseline, cfg.dropout, rng)
    if loss.requires_grad:
        loss.backward()
    return batch, R


def policy_gradient_step(images: np.ndarray, captioner: Captioner, reward_fn: RewardFn, cfg: TrainConfig,
                         opt: Adam, rng: np.random.Generator, baseline: float = 0.0):
    captioner.params.zero_grad()
    batch, R = policy_gradient(captioner, images, reward_fn, cfg, rng, baseline)
    grad_norm = captioner.params.grad_norm()
    opt.step()
    captioner.params.check_finite()
    return batch, R, grad_norm


# ---------------------------------------------------------------------------
# critic updates


def _third(n: int) -> int:
    return n // 3


def critic_update_round(data: PackedData, captioner: Captioner, critics: Critics, cfg: TrainConfig,
                        dc_opt: Adam, mc_opt: Adam, rng: np.random.Generator) -> tuple[float, float]:
    """One Adam update of each critic on class-balanced minibatches.

    Returns the mean per-example losses. DC sees source sentences, target
    sentences and captions of target images; MC sees source pairs, shuffled
    source pairs and captions paired with the source images they describe.
    """
    k = _third(cfg.critic_batch)
    t_max = captioner.config.t_max

    # domain critic
    src = rng.integers(0, len(data.src_len), k)
    tgt = rng.integers(0, len(data.tgt_len), k)
    img = rng.integers(0, len(data.tgt_img_feat), k)
    gen = captioner.sample(data.tgt_img_feat[img], rng)
    toks = np.concatenate([data.src_tok[src], data.tgt_tok[tgt], gen.tokens])
    lens = np.concatenate([data.src_len[src], data.tgt_len[tgt], gen.lengths])
    labels = np.repeat([SOURCE, TARGET, GENERATED], k)
    critics.dc.params.zero_grad()
    dc_loss = critics.dc.loss((toks[:, :t_max], lens), labels)
    dc_loss.backward()
    dc_opt.step()

    # multi-modal critic
    paired = rng.integers(0, len(data.src_len), k)
    unp = rng.integers(0, len(data.unpaired_feat), k)
    gsrc = rng.integers(0, len(data.src_len), k)
    gen = captioner.sample(data.src_feat[gsrc], rng)
    feats = np.concatenate([data.src_feat[paired], data.src_feat[data.unpaired_feat[unp]], data.src_feat[gsrc]])
    toks = np.concatenate([data.src_tok[paired], data.src_tok[data.unpaired_sent[unp]], gen.tokens])
    lens = np.concatenate([data.src_len[paired], data.src_len[data.unpaired_sent[unp]], gen.lengths])
    labels = np.repeat([PAIRED, UNPAIRED, GENERATED], k)
    critics.mc.params.zero_grad()
    mc_loss = critics.mc.loss(feats, (toks, lens), labels)
    mc_loss.backward()
    mc_opt.step()
    critics.dc.params.check_finite()
    critics.mc.params.check_finite()
    return dc_loss.item() / (3 * k), mc_loss.item() / (3 * k)


# ---------------------------------------------------------------------------
# the alternation


@dataclass
class AdversarialState:
    captioner: Captioner
    critics: Critics
    cap_opt: Adam
    dc_opt: Adam
    mc_opt: Adam
    rng: np.random.Generator
    baseline: float = 0.0
    log: TrainLog = field(default_factory=TrainLog)
    iteration: int = 0


def init_adversarial(captioner: Captioner, critics: Critics, cfg: TrainConfig) -> AdversarialState:
    return AdversarialState(
        captioner=captioner, critics=critics,
        cap_opt=Adam(captioner.params, cfg.lr_captioner),
        dc_opt=Adam(critics.dc.params, cfg.lr_critic),
        mc_opt=Adam(critics.mc.params, cfg.lr_critic),
        rng=np.random.default_rng(cfg.seed),
    )


def adversarial_iteration(state: AdversarialState, data: PackedData, cfg: TrainConfig) -> IterationRecord:
    """N_c critic rounds followed by N_g captioner updates."""
    dc_losses, mc_losses = [], []
    for _ in range(cfg.n_critic):
        d, m = critic_update_round(data, state.captioner, state.critics, cfg, state.dc_opt, state.mc_opt, state.rng)
        dc_losses.append(d)
        mc_losses.append(m)
    rewards, lens, norms = [], [], []
    for _ in range(cfg.n_gen):
        img = data.tgt_img_feat[state.rng.integers(0, len(data.tgt_img_feat), cfg.image_batch)]
        b = state.baseline if cfg.baseline else 0.0
        batch, R, gnorm = policy_gradient_step(img, state.captioner, state.critics, cfg, state.cap_opt,
                                               state.rng, b)
        if cfg.baseline:
            state.baseline = cfg.baseline_decay * state.baseline + (1 - cfg.baseline_decay) * float(R.mean())
        rewards.append(R.mean())
        lens.append(batch.lengths.mean())
        norms.append(gnorm)
    if cfg.n_gen == 0:
        img = data.tgt_img_feat[state.rng.integers(0, len(data.tgt_img_feat), cfg.image_batch)]
        gen = state.captioner.sample(img, state.rng)
        rewards.append(state.critics(img, (gen.tokens, gen.lengths)).mean())
        lens.append(gen.lengths.mean())
        norms.append(0.0)
    state.iteration += 1
    rec = IterationRecord(state.iteration, float(np.mean(dc_losses)) if dc_losses else float("nan"),
                          float(np.mean(mc_losses)) if mc_losses else float("nan"),
                          float(np.mean(rewards)), float(np.mean(lens)), float(np.mean(norms)))
    state.log.append(rec)
    return rec


def save_models(out_dir, captioner: Captioner, critics: Critics):
    out = Path(out_dir)
    checkpoint.save(out / "captioner", captioner.params, "captioner", captioner.manifest_config())
    checkpoint.save(out / "dc", critics.dc.params, "dc", critics.dc.manifest_config())
    checkpoint.save(out / "mc", critics.mc.params, "mc", critics.mc.manifest_config())


def adversarial_train(data: PackedData, captioner: Captioner, critics: Critics, cfg: TrainConfig,
                      out_dir=None, progress: Callable[[IterationRecord], None] | None = None):
    """Run the critic/captioner alternation for ``cfg.iterations`` outer steps.

    Returns ``(captioner, critics, TrainLog)``; the models are updated in place.
    """
    if cfg.warmup_rounds:
        train_critics_only(data, captioner, critics, replace(cfg, lr_critic=cfg.lr_warmup), cfg.warmup_rounds)
    state = init_adversarial(captioner, critics, cfg)
    good = (captioner.params.snapshot(), critics.dc.params.snapshot(), critics.mc.params.snapshot())
    for it in range(cfg.iterations):
        try:
            rec = adversarial_iteration(state, data, cfg)
        except ad.NonFiniteError as exc:
            captioner.params.restore(good[0])
            critics.dc.params.restore(good[1])
            critics.mc.params.restore(good[2])
            raise TrainingAborted(f"non-finite values at iteration {it + 1}: {exc}",
                                  captioner, critics, state.log) from exc
        if progress is not None:
            progress(rec)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            good = (captioner.params.snapshot(), critics.dc.params.snapshot(), critics.mc.params.snapshot())
            if out_dir is not None:
                save_models(Path(out_dir) / f"iter{it + 1:05d}", captioner, critics)
    return captioner, critics, state.log


def train_critics_only(data: PackedData, captioner: Captioner, critics: Critics, cfg: TrainConfig,
                       rounds: int) -> list[tuple[float, float]]:
    rng = np.random.default_rng(cfg.seed)
    dc_opt = Adam(critics.dc.params, cfg.lr_critic)
    mc_opt = Adam(critics.mc.params, cfg.lr_critic)
    return [critic_update_round(data, captioner, critics, cfg, dc_opt, mc_opt, rng) for _ in range(rounds)]


def train_config_dict(cfg) -> dict:
    return asdict(cfg)
