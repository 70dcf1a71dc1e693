"""
Policy gradients on a toy captioner
===================================

A captioner with six ids that can only say "a", "b" or stop, at most two
words long. There are few enough sentences to list them all, so the exact
gradient of expected reward is available and the sampled REINFORCE estimate
can be held against it.
"""
import itertools

import numpy as np

from xdomcap import autodiff as ad
from xdomcap.captioner import Captioner, CaptionerConfig, pad_sentences
from xdomcap.data import EOS, UNK
from xdomcap.trainer import reinforce_loss, rollout_q

A, B = 4, 5
cfg = CaptionerConfig(vocab_size=6, feature_dim=2, embed_dim=2, hidden_dim=2, t_max=2, dropout_rate=0.0)
cap = Captioner(cfg, seed=5, masked_ids=(0, 1, UNK))
x = np.array([0.7, -0.4])

# every sentence: "eos", "a eos", "b eos", "a a", "a b", "b a", "b b"
sents = [[EOS]] + [[w, EOS] for w in (A, B)] + [list(p) for p in itertools.product((A, B), repeat=2)]
reward_table = {tuple(s): r for s, r in zip(sents, np.random.default_rng(0).uniform(0, 1, len(sents)))}


def reward(features, batch):
    tokens, lengths = batch
    return np.array([reward_table[tuple(tokens[i, :lengths[i]])] for i in range(len(lengths))])


def expected_reward():
    toks, lens = pad_sentences(sents, cfg.t_max)
    with ad.no_grad():
        logits, mask = cap.sequence_log_probs(np.repeat(x[None], len(sents), 0), toks, lens)
    logp = ad.log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, np.where(mask > 0, toks[:, :mask.shape[1]], EOS)[..., None], -1)[..., 0]
    p = np.exp((picked * mask).sum(1))
    return float(p @ [reward_table[tuple(s)] for s in sents])


print("expected reward %.4f" % expected_reward())
exact = ad.numerical_grad(expected_reward, cap.params["out_b"].data, 1e-6)

# Monte Carlo: sample, estimate Q by one rollout per prefix, backprop the surrogate
rng = np.random.default_rng(1)
for n in (100, 1000, 10000):
    feats = np.repeat(x[None], n, 0)
    batch = cap.sample(feats, rng, keep_trace=True)
    Q, _ = rollout_q(cap, feats, batch, reward, 1, rng)
    cap.params.zero_grad()
    reinforce_loss(cap, feats, batch, Q).backward()
    est = -cap.params["out_b"].grad   # the surrogate already averages over samples
    print("n=%5d  output-bias gradient error %.4f" % (n, np.abs(est - exact).max()))

print("exact output-bias gradient", np.round(exact, 4))
