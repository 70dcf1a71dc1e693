"""Brute-force reference implementations used to freeze expected values.

These deliberately share no code with the package: n-grams are counted with
plain loops, LCS is found by enumerating subsequences, and arithmetic uses
fractions where it can. They are slow and only meant for tiny inputs.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction


def grams(words, n):
    out = {}
    for i in range(len(words) - n + 1):
        g = " ".join(words[i:i + n])
        out[g] = out.get(g, 0) + 1
    return out


def bleu(items, n):
    """items: list of (candidate, [references]) strings."""
    hits = [0] * n
    totals = [0] * n
    c_len = 0
    r_len = 0
    for cand, refs in items:
        c = cand.split()
        c_len += len(c)
        best = None
        for r in refs:
            rl = len(r.split())
            if best is None or abs(rl - len(c)) < abs(best - len(c)) or \
                    (abs(rl - len(c)) == abs(best - len(c)) and rl < best):
                best = rl
        r_len += best
        for k in range(1, n + 1):
            cg = grams(c, k)
            for g, cnt in cg.items():
                cap = 0
                for r in refs:
                    cap = max(cap, grams(r.split(), k).get(g, 0))
                hits[k - 1] += min(cnt, cap)
            totals[k - 1] += max(0, len(c) - k + 1)
    if any(h == 0 for h in hits):
        return 0.0
    log_sum = sum(math.log(Fraction(h, t)) for h, t in zip(hits, totals))
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_sum / n)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_brute(a, b):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subsequence([short[i] for i in idx], long_):
                return size
    return 0


def rouge_l(items, beta=1.2):
    scores = []
    for cand, refs in items:
        c = cand.split()
        best = 0.0
        for r in refs:
            rw = r.split()
            lcs = lcs_brute(c, rw)
            if lcs == 0:
                continue
            prec = Fraction(lcs, len(c))
            rec = Fraction(lcs, len(rw))
            b2 = Fraction(beta).limit_denominator(1000) ** 2
            f = (1 + b2) * prec * rec / (rec + b2 * prec)
            best = max(best, float(f))
        scores.append(best)
    return sum(scores) / len(scores)


def cider_d(items, sigma=6.0):
    n_docs = len(items)
    doc_freq = [dict() for _ in range(4)]
    for _, refs in items:
        for k in range(1, 5):
            seen = set()
            for r in refs:
                seen |= set(grams(r.split(), k))
            for g in seen:
                doc_freq[k - 1][g] = doc_freq[k - 1].get(g, 0) + 1

    def vec(words, k):
        v = {}
        for g, tf in grams(words, k).items():
            df = doc_freq[k - 1].get(g, 0)
            v[g] = tf * (math.log(n_docs) - math.log(max(1.0, df)))
        return v

    total = 0.0
    for cand, refs in items:
        c = cand.split()
        ref_scores = []
        for r in refs:
            rw = r.split()
            per_n = []
            for k in range(1, 5):
                vc = vec(c, k)
                vr = vec(rw, k)
                num = 0.0
                for g in vc:
                    if g in vr:
                        num += min(vc[g], vr[g]) * vr[g]
                nc = math.sqrt(sum(x * x for x in vc.values()))
                nr = math.sqrt(sum(x * x for x in vr.values()))
                if nc != 0 and nr != 0:
                    num = num / (nc * nr)
                num *= math.exp(-((len(c) - len(rw)) ** 2) / (2 * sigma * sigma))
                per_n.append(num)
            ref_scores.append(sum(per_n) / 4)
        total += 10.0 * sum(ref_scores) / len(ref_scores)
    return total / n_docs
