"""Inference-time decoders: greedy, beam search and critic-based planning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .captioner import Captioner, DecoderState
from .data import BOS, EOS
from .trainer import RewardFn, estimate_q


@dataclass
class PlanningConfig:
    gamma: float = 0.15
    J: int = 2
    K: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.gamma > 0 and self.J < 2:
            raise ValueError("J must be at least 2 when gamma > 0")


@dataclass
class DecodeTrace:
    tokens: list[int] = field(default_factory=list)
    critic_decided: list[bool] = field(default_factory=list)
    candidate_q: list[list[float] | None] = field(default_factory=list)

    @property
    def critic_fraction(self) -> float:
        return sum(self.critic_decided) / len(self.critic_decided) if self.critic_decided else 0.0

    def summary(self) -> str:
        return f"critic_steps={sum(self.critic_decided)}/{len(self.critic_decided)}"


def _start(captioner: Captioner, x) -> tuple[DecoderState, np.ndarray]:
    state = captioner.init_state(np.atleast_2d(x))
    return captioner.step(state, [BOS])


def greedy_decode(x, captioner: Captioner) -> list[int]:
    """Argmax word per step (lowest id on ties) until EOS or t_max."""
    out = []
    with ad.no_grad():
        state, probs = _start(captioner, x)
        for t in range(captioner.config.t_max):
            y = int(np.argmax(probs[0]))
            out.append(y)
            if y == EOS or t + 1 == captioner.config.t_max:
                break
            state, probs = captioner.step(state, [y])
    return out


def greedy_decode_batch(features, captioner: Captioner) -> list[list[int]]:
    batch = captioner.greedy(features)
    return [[int(v) for v in batch.tokens[i, :batch.lengths[i]]] for i in range(len(batch.lengths))]


def beam_decode(x, captioner: Captioner, beam_size: int = 2) -> list[int]:
    """Beam search ranked by length-normalized log-probability.

    With ``beam_size == 1`` this is exactly greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    if beam_size == 1:
        return greedy_decode(x, captioner)
    t_max = captioner.config.t_max
    with ad.no_grad():
        state, probs = _start(captioner, x)
        # each live hypothesis: (tokens, logp, h, c, probs)
        live = [([], 0.0, state.h.data, state.c.data, probs[0])]
        done: list[tuple[list[int], float]] = []
        for t in range(t_max):
            cands = []
            for toks, lp, h, c, p in live:
                with np.errstate(divide="ignore"):
                    logp = np.log(p)
                order = np.argsort(-logp, kind="stable")[:beam_size]
                for y in order:
                    if np.isfinite(logp[y]):
                        cands.append((toks + [int(y)], lp + float(logp[y]), h, c))
            # keep the beam_size best extensions by cumulative log-prob
            cands.sort(key=lambda e: -e[1])
            live = []
            for toks, lp, h, c in cands[:beam_size]:
                if toks[-1] == EOS or len(toks) == t_max:
                    done.append((toks, lp))
                else:
                    st, p = captioner.step(DecoderState(ad.Tensor(h), ad.Tensor(c), 0), [toks[-1]])
                    live.append((toks, lp, st.h.data, st.c.data, p[0]))
            if not live:
                break
    best = max(done, key=lambda e: (e[1] / len(e[0])))
    return best[0]


def planning_decode(x, captioner: Captioner, reward_fn: RewardFn, config: PlanningConfig | None = None):
    """Greedy decoding that defers to critic Q estimates when the policy is unsure.

    At each step, if the top-two probability gap is below ``gamma``, the top-J
    words are scored by Monte Carlo rollout and the highest-Q word wins
    (ties go to the more probable word).
    """
    config = config or PlanningConfig()
    trace = DecodeTrace()
    t_max = captioner.config.t_max
    rng_seed = config.seed
    with ad.no_grad():
        state, probs = _start(captioner, x)
        for t in range(t_max):
            p = probs[0]
            order = np.argsort(-p, kind="stable")
            gap = p[order[0]] - p[order[1]]
            if config.gamma > 0 and gap < config.gamma:
                cands = [int(v) for v in order[:config.J]]
                qs = [estimate_q(x, trace.tokens, y, captioner, reward_fn, config.K, seed=rng_seed + 1000 * t + j)
                      for j, y in enumerate(cands)]
                best = max(range(len(cands)), key=lambda j: (qs[j], -j))
                y = cands[best]
                trace.critic_decided.append(True)
                trace.candidate_q.append(qs)
            else:
                y = int(order[0])
                trace.critic_decided.append(False)
                trace.candidate_q.append(None)
            trace.tokens.append(y)
            if y == EOS or t + 1 == t_max:
                break
            state, probs = captioner.step(state, [y])
    return list(trace.tokens), trace
