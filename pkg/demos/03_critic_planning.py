"""
Letting the critics break ties at decode time
=============================================

Planning decodes greedily, except when the top two words are within Gamma
of each other; then the top J words are scored by rolling out K completions
and asking the critics. Gamma = 0 is plain greedy decoding.

Run 02_adapt_synthetic_world.py first and pass the directory it prints.
"""
import sys
from pathlib import Path

import numpy as np

from xdomcap import pipeline as pl
from xdomcap.decoding import PlanningConfig, greedy_decode, planning_decode

root = Path(sys.argv[1])
bundle = pl.load_dataset(root / "data")
cap = pl.load_captioner(root / "adapt" / "captioner")
critics = pl.load_critics(root / "adapt")
records = bundle.target_eval[:200]
feats = np.stack([r.feature for r in records])

greedy = [greedy_decode(r.feature, cap) for r in records]
print("greedy  reward %.3e" % critics(feats, greedy).mean())

for gamma in (0.0, 0.05, 0.15, 0.3):
    out, decided, steps = [], 0, 0
    for i, r in enumerate(records):
        toks, trace = planning_decode(r.feature, cap, critics, PlanningConfig(gamma=gamma, J=2, K=3, seed=i))
        out.append(toks)
        decided += sum(trace.critic_decided)
        steps += len(trace.critic_decided)
    same = sum(a == b for a, b in zip(out, greedy))
    print(f"gamma {gamma:.2f}  reward {critics(feats, out).mean():.3e}  "
          f"critic-decided words {decided / steps:.3f}  same as greedy {same}/{len(records)}")

# a caption where the critics changed something, if any
for r, g, toks in zip(records, greedy, out):
    if g != toks:
        print("\ngreedy :", bundle.vocab.detokenize(g))
        print("planned:", bundle.vocab.detokenize(toks))
        break
