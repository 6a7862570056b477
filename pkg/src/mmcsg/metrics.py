"""Generation metrics and the two significance/agreement statistics.

All scores are single-reference and live in [0, 1]; reports multiply by 100.
Composite BLEU smooths a zero n-gram precision to ``1 / (2 * c)`` where ``c``
is the candidate's n-gram count (taken as at least 1), floored at 1e-9.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

BLEU_SMOOTH_FLOOR = 1e-9

# Two-sided 5% critical values of Student's t for df = 1..30 (standard tables).
T_CRITICAL_05 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)
T_CRITICAL_05_LARGE_DF = 1.960


class DegenerateInputError(ValueError):
    pass


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_overlap(cand: Counter, ref: Counter) -> int:
    return sum(min(c, ref[g]) for g, c in cand.items())


def bleu_n(candidate: Sequence, reference: Sequence, n: int) -> float:
    """Clipped (modified) n-gram precision."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = ngrams(candidate, n)
    total = sum(cand.values())
    if total == 0:
        return 0.0
    return _clipped_overlap(cand, ngrams(reference, n)) / total


def bleu_composite(candidate: Sequence, reference: Sequence, max_n: int = 4) -> float:
    c, r = len(candidate), len(reference)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        p = bleu_n(candidate, reference, n)
        if p == 0.0:
            count = max(c - n + 1, 1)
            p = max(1.0 / (2 * count), BLEU_SMOOTH_FLOOR)
        log_sum += math.log(p)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / max_n)


def _prf(overlap: float, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def rouge_n(candidate: Sequence, reference: Sequence, n: int) -> tuple[float, float, float]:
    """(precision, recall, F1) of clipped n-gram overlap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    return _prf(_clipped_overlap(cand, ref), sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> tuple[float, float, float]:
    if not candidate or not reference:
        return 0.0, 0.0, 0.0
    return _prf(lcs_length(candidate, reference), len(candidate), len(reference))


def token_f1(candidate: Sequence, reference: Sequence) -> float:
    """Bag-of-tokens F1 (clipped unigram overlap)."""
    return rouge_n(candidate, reference, 1)[2]


@dataclass
class MetricsReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    bleu: float
    rouge_1: float
    rouge_2: float
    rouge_l: float
    rouge_1_p: float = 0.0
    rouge_1_r: float = 0.0
    rouge_2_p: float = 0.0
    rouge_2_r: float = 0.0
    rouge_l_p: float = 0.0
    rouge_l_r: float = 0.0

    def scaled(self, digits: int = 4) -> dict[str, float]:
        return {k: round(v * 100.0, digits) for k, v in asdict(self).items()}


def sentence_scores(candidate: Sequence, reference: Sequence) -> dict[str, float]:
    r1, r2, rl = rouge_n(candidate, reference, 1), rouge_n(candidate, reference, 2), \
        rouge_l(candidate, reference)
    return {
        "bleu_1": bleu_n(candidate, reference, 1),
        "bleu_2": bleu_n(candidate, reference, 2),
        "bleu_3": bleu_n(candidate, reference, 3),
        "bleu_4": bleu_n(candidate, reference, 4),
        "bleu": bleu_composite(candidate, reference),
        "rouge_1": r1[2], "rouge_1_p": r1[0], "rouge_1_r": r1[1],
        "rouge_2": r2[2], "rouge_2_p": r2[0], "rouge_2_r": r2[1],
        "rouge_l": rl[2], "rouge_l_p": rl[0], "rouge_l_r": rl[1],
    }


def corpus_report(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> MetricsReport:
    """Mean of sentence-level scores."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("need equally many, non-zero candidates and references")
    rows = [sentence_scores(c, r) for c, r in zip(candidates, references)]
    return MetricsReport(**{k: float(np.mean([row[k] for row in rows])) for k in rows[0]})


def fleiss_kappa(ratings) -> float:
    """Fleiss' kappa for an items x categories matrix of rater counts."""
    table = np.asarray(ratings, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] == 0:
        raise ValueError("ratings must be a non-empty items x categories matrix")
    per_item = table.sum(axis=1)
    n = per_item[0]
    if not np.all(per_item == n):
        raise ValueError("every item must be rated by the same number of raters")
    if n < 2:
        raise ValueError("need at least two raters per item")
    p_j = table.sum(axis=0) / table.sum()
    P_i = ((table * table).sum(axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    P_e = float((p_j * p_j).sum())
    if P_e == 1.0:
        if P_bar == 1.0:
            return 1.0
        raise DegenerateInputError("chance agreement is 1; kappa undefined")
    return float((P_bar - P_e) / (1.0 - P_e))


def welch_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Welch's t statistic and Welch-Satterthwaite degrees of freedom."""
    x, y = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    if va == 0.0 and vb == 0.0:
        raise DegenerateInputError("both samples have zero variance")
    t = (x.mean() - y.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va * va / (x.size - 1) + vb * vb / (y.size - 1))
    return float(t), float(df)


def t_critical_05(df: float) -> float:
    """Two-sided 5% threshold; fractional df round down (conservative)."""
    k = int(math.floor(df))
    if k < 1:
        raise ValueError("df must be >= 1")
    return T_CRITICAL_05[k - 1] if k <= len(T_CRITICAL_05) else T_CRITICAL_05_LARGE_DF


def welch_significant(a: Sequence[float], b: Sequence[float]) -> dict:
    t, df = welch_t(a, b)
    crit = t_critical_05(df)
    return {"t": t, "df": df, "critical_05": crit, "significant_05": abs(t) > crit}
