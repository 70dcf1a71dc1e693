"""
Adapting a captioner to a new caption style
===========================================

Source captions read "a small red circle on the left"; target captions read
"this small red circle sits left" and friends. The captioner only ever sees
paired source data, plus unpaired target images and target sentences, and
the two critics have to pull it toward the target style.

Takes a couple of minutes on one core.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from xdomcap import pipeline as pl
from xdomcap.config import desk_config
from xdomcap.decoding import greedy_decode

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = desk_config(seed=seed)
root = Path(tempfile.mkdtemp(prefix="xdomcap-demo-"))

bundle = pl.gen_data(cfg, root / "data")
print("vocabulary:", len(bundle.vocab), "words")
print("source:", bundle.source_paired[0].sentence)
print("target:", bundle.target_sentences[0].sentence)

base = pl.pretrain_stage(cfg, bundle, root / "pretrain")


def show(cap, title):
    sents = {r.id: bundle.vocab.detokenize(greedy_decode(r.feature, cap)) for r in bundle.target_eval}
    rep = pl.evaluate_records(sents, bundle.target_eval)
    print(f"\n{title}: style {rep.style_match_rate:.3f}  fidelity {rep.content_fidelity:.3f}  "
          f"CIDEr-D {rep.ciderD:.3f}")
    for r in bundle.target_eval[:4]:
        print(f"  {sents[r.id]:45s} | ref: {r.sentence}")


show(base, "source pretrained")


# reward and critic losses every 25 iterations
def progress(rec):
    if rec.iteration % 25 == 0:
        print(f"  iter {rec.iteration:4d}  reward {rec.mean_reward:.2e}  dc {rec.dc_loss:.3f}  "
              f"mc {rec.mc_loss:.3f}  length {rec.mean_len:.2f}")


cap, critics, log = pl.adapt_stage(cfg, bundle, base, root / "adapt", "both", progress)
show(cap, "adapted")

# the reward both critics give the adapted greedy captions
feats = np.stack([r.feature for r in bundle.target_eval])
print("\nmean critic reward of greedy captions: %.3e" %
      critics(feats, [greedy_decode(r.feature, cap) for r in bundle.target_eval]).mean())
print("artifacts in", root)
