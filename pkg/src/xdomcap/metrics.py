"""Corpus caption metrics (BLEU, ROUGE-L, CIDEr-D) and synthetic-world diagnostics."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import ATTRIBUTES, AttributeScene, TARGET_TEMPLATES, template_skeleton

METRIC_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "ciderD", "style_match_rate", "content_fidelity")


class MetricError(ValueError):
    pass


@dataclass
class EvalCorpus:
    candidates: dict[str, str]
    references: dict[str, list[str]]

    def __post_init__(self):
        if not self.candidates:
            raise MetricError("empty corpus")
        missing = set(self.candidates) - set(self.references)
        if missing:
            raise MetricError(f"candidates without references: {sorted(missing)[:5]}")
        if any(len(v) == 0 for v in self.references.values()):
            raise MetricError("empty reference list")

    def ids(self) -> list[str]:
        return sorted(self.candidates)


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rougeL: float
    ciderD: float
    style_match_rate: float
    content_fidelity: float
    size: int

    def row(self) -> list[float]:
        return [getattr(self, c) for c in METRIC_COLUMNS]

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(corpus: EvalCorpus, n: int = 4) -> float:
    """Corpus BLEU-n with clipped counts and the closest-reference brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise MetricError("n must be 1..4")
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for key in corpus.ids():
        cand = corpus.candidates[key].split()
        refs = [r.split() for r in corpus.references[key]]
        cand_len += len(cand)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            c = ngrams(cand, k)
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, k)
            matched[k - 1] += sum(min(v, best[g]) for g, v in c.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len) if cand_len else 0.0
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(candidate: str, references: Iterable[str], beta: float = 1.2) -> float:
    cand = candidate.split()
    best = 0.0
    for ref in references:
        r = ref.split()
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        rec = lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    ids = corpus.ids()
    return float(np.mean([rouge_l_sentence(corpus.candidates[k], corpus.references[k], beta) for k in ids]))


def _tfidf(words: Sequence[str], df: list[Counter], log_n: float):
    vecs, norms = [], []
    for k in range(1, 5):
        v = {g: c * (log_n - math.log(max(1.0, df[k - 1][g]))) for g, c in ngrams(words, k).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider_d(corpus: EvalCorpus, sigma: float = 6.0) -> float:
    """CIDEr-D: clipped tf-idf cosine over 1..4-grams with a length penalty, x10."""
    ids = corpus.ids()
    if len(ids) < 2:
        raise MetricError("CIDEr-D needs at least two images for document frequencies")
    df = [Counter() for _ in range(4)]
    for key in ids:
        for k in range(1, 5):
            seen = set()
            for r in corpus.references[key]:
                seen.update(ngrams(r.split(), k))
            df[k - 1].update(seen)
    log_n = math.log(float(len(ids)))
    scores = []
    for key in ids:
        cand = corpus.candidates[key].split()
        cv, cn = _tfidf(cand, df, log_n)
        per_ref = []
        for ref in corpus.references[key]:
            r = ref.split()
            rv, rn = _tfidf(r, df, log_n)
            delta = len(cand) - len(r)
            vals = []
            for k in range(4):
                val = sum(min(x, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, x in cv[k].items())
                if cn[k] != 0 and rn[k] != 0:
                    val /= cn[k] * rn[k]
                vals.append(val * math.exp(-(delta ** 2) / (2 * sigma ** 2)))
            per_ref.append(np.mean(vals))
        scores.append(np.mean(per_ref) * 10.0)
    return float(np.mean(scores))


def target_skeletons(templates: Sequence[str] = TARGET_TEMPLATES) -> list[re.Pattern]:
    return [template_skeleton(t) for t in templates]


def style_match_rate(candidates: Iterable[str], skeletons: Sequence[re.Pattern]) -> float:
    if not skeletons:
        raise MetricError("no skeletons")
    cands = list(candidates)
    if not cands:
        return 0.0
    return sum(any(s.match(c) for s in skeletons) for c in cands) / len(cands)


_ATTR_OF = {w: k for k, vals in ATTRIBUTES.items() for w in vals}


def content_fidelity_sentence(candidate: str, scene: AttributeScene) -> float:
    mentioned = [w for w in candidate.split() if w in _ATTR_OF]
    if not mentioned:
        return 0.0
    return sum(getattr(scene, _ATTR_OF[w]) == w for w in mentioned) / len(mentioned)


def content_fidelity(candidates: Mapping[str, str], scenes: Mapping[str, AttributeScene]) -> float:
    if not candidates:
        return 0.0
    return float(np.mean([content_fidelity_sentence(candidates[k], scenes[k]) for k in sorted(candidates)]))


def evaluate(corpus: EvalCorpus, scenes: Mapping[str, AttributeScene] | None = None,
             skeletons: Sequence[re.Pattern] | None = None) -> MetricReport:
    skeletons = skeletons if skeletons is not None else target_skeletons()
    ids = corpus.ids()
    return MetricReport(
        bleu1=bleu(corpus, 1), bleu2=bleu(corpus, 2), bleu3=bleu(corpus, 3), bleu4=bleu(corpus, 4),
        rougeL=rouge_l(corpus), ciderD=cider_d(corpus),
        style_match_rate=style_match_rate([corpus.candidates[k] for k in ids], skeletons),
        content_fidelity=content_fidelity(corpus.candidates, scenes) if scenes is not None else float("nan"),
        size=len(ids),
    )
