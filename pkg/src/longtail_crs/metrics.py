"""Ranking, long-tail, diversity and text-generation metrics.

Ranking metrics take a sequence of :class:`RankedList`. Queries with an
empty relevant set are skipped by every per-query average; :func:`evaluate`
reports how many were skipped.
"""

from __future__ import annotations

import math
from collections import Counter
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class RankedList:
    query_id: str
    ranking: tuple
    relevant: frozenset

    def __post_init__(self):
        object.__setattr__(self, "ranking", tuple(self.ranking))
        object.__setattr__(self, "relevant", frozenset(self.relevant))
        if len(set(self.ranking)) != len(self.ranking):
            raise ValueError(f"query {self.query_id!r}: duplicate items in ranking")

    def top(self, k: int) -> tuple:
        return self.ranking[:k]


def _check_k(k: int):
    if k < 1:
        raise ValueError("k must be >= 1")


def _scored(lists: Iterable[RankedList]) -> list[RankedList]:
    return [rl for rl in lists if rl.relevant]


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def _exact_mean(values: list[Fraction]) -> float:
    # count-based metrics are averaged as rationals, so the result is the correctly rounded float
    return float(sum(values, Fraction(0)) / len(values)) if values else 0.0


def recall_at_k(lists: Sequence[RankedList], k: int) -> float:
    _check_k(k)
    vals = [Fraction(len(set(rl.top(k)) & rl.relevant), len(rl.relevant)) for rl in _scored(lists)]
    return _exact_mean(vals)


def ndcg_at_k(lists: Sequence[RankedList], k: int) -> float:
    _check_k(k)
    vals = []
    for rl in _scored(lists):
        dcg = math.fsum(1.0 / math.log2(1 + r) for r, item in enumerate(rl.top(k), start=1)
                        if item in rl.relevant)
        idcg = math.fsum(1.0 / math.log2(1 + r) for r in range(1, min(k, len(rl.relevant)) + 1))
        vals.append(dcg / idcg)
    return _mean(vals)


def mrr_at_k(lists: Sequence[RankedList], k: int) -> float:
    _check_k(k)
    vals = []
    for rl in _scored(lists):
        rr = Fraction(0)
        for r, item in enumerate(rl.top(k), start=1):
            if item in rl.relevant:
                rr = Fraction(1, r)
                break
        vals.append(rr)
    return _exact_mean(vals)


def tail_recall_at_k(lists: Sequence[RankedList], k: int, tail: Iterable) -> float | None:
    """Recall over tail relevants only, for queries that have any. ``None`` if there are none."""
    _check_k(k)
    tail = frozenset(tail)
    vals = []
    for rl in lists:
        rel = rl.relevant & tail
        if rel:
            vals.append(Fraction(len(set(rl.top(k)) & rel), len(rel)))
    return _exact_mean(vals) if vals else None


def coverage_at_k(lists: Sequence[RankedList], k: int, catalog_size: int) -> float:
    _check_k(k)
    if not lists or catalog_size <= 0:
        return 0.0
    seen = set()
    for rl in lists:
        seen.update(rl.top(k))
    return len(seen) / catalog_size


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def ild_at_k(lists: Sequence[RankedList], k: int, item_vectors: Mapping) -> float | None:
    """Mean pairwise ``(1 - cos) / 2`` within each top-k list; ``None`` when no list has 2 items."""
    _check_k(k)
    vals = []
    for rl in lists:
        items = rl.top(k)
        n = len(items)
        if n < 2:
            continue
        vecs = [np.asarray(item_vectors[i], dtype=float) for i in items]
        dist = [(1.0 - _cos(vecs[i], vecs[j])) / 2.0 for i in range(n) for j in range(i + 1, n)]
        vals.append(2.0 * math.fsum(dist) / (n * (n - 1)))
    return _mean(vals) if vals else None


def pwp_weight(pop: float) -> float:
    return 1.0 / math.log2(2.0 + pop)


def pwp(lists: Sequence[RankedList], k: int, pop: Mapping) -> float:
    """Popularity-weighted precision: hits weighted by ``1 / log2(2 + pop)``."""
    _check_k(k)
    vals = []
    for rl in _scored(lists):
        items = rl.top(k)
        if not items:
            vals.append(0.0)
            continue
        w = [pwp_weight(pop.get(i, 0)) for i in items]
        hit = math.fsum(wi for wi, i in zip(w, items) if i in rl.relevant)
        vals.append(hit / math.fsum(w))
    return _mean(vals)


@dataclass
class MetricReport:
    values: dict[str, float | None]
    k_values: tuple[int, ...]
    catalog_size: int
    n_queries: int
    n_skipped: int
    n_tail_queries: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metrics": self.values,
            "k_values": list(self.k_values),
            "catalog_size": self.catalog_size,
            "n_queries": self.n_queries,
            "n_skipped_empty_relevant": self.n_skipped,
            "n_tail_queries": self.n_tail_queries,
            **self.extra,
        }

    def to_markdown(self) -> str:
        cols = [name for name in self.values]
        head = "| " + " | ".join(cols) + " |"
        sep = "|" + "---:|" * len(cols)
        row = "| " + " | ".join("n/a" if self.values[c] is None else f"{self.values[c]:.4f}"
                                for c in cols) + " |"
        return "\n".join([head, sep, row]) + "\n"


def evaluate(lists: Sequence[RankedList], k_values: Sequence[int], catalog_size: int,
             tail: Iterable = (), pop: Mapping | None = None,
             item_vectors: Mapping | None = None) -> MetricReport:
    """Full recommendation metric table (column order follows the usual results tables)."""
    ks = tuple(sorted(set(k_values)))
    tail = frozenset(tail)
    vals: dict[str, float | None] = {}
    for k in ks:
        vals[f"Recall@{k}"] = recall_at_k(lists, k)
    for k in ks:
        if k > 1:
            vals[f"NDCG@{k}"] = ndcg_at_k(lists, k)
    for k in ks:
        if k > 1:
            vals[f"MRR@{k}"] = mrr_at_k(lists, k)
    for k in ks:
        vals[f"TailRecall@{k}"] = tail_recall_at_k(lists, k, tail)
        vals[f"Coverage@{k}"] = coverage_at_k(lists, k, catalog_size)
        if item_vectors is not None:
            vals[f"ILD@{k}"] = ild_at_k(lists, k, item_vectors)
        if pop is not None:
            vals[f"PWP@{k}"] = pwp(lists, k, pop)
    skipped = sum(1 for rl in lists if not rl.relevant)
    n_tail = sum(1 for rl in lists if rl.relevant & tail)
    return MetricReport(vals, ks, catalog_size, len(lists), skipped, n_tail)


# --------------------------------------------------------------------------
# text generation


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(texts: Iterable[str] | str, n: int) -> float:
    """Unique / total n-grams across all texts (n-grams do not cross text boundaries)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(texts, str):
        texts = [texts]
    grams = [g for t in texts for g in _ngrams(tokenize(t), n)]
    return len(set(grams)) / len(grams) if grams else 0.0


def bleu_n(hypotheses, references, n: int = 2) -> float:
    """Corpus BLEU with uniform weights over orders ``1..n``.

    ``hypotheses`` is a string or list of strings; ``references`` a string,
    a list of strings (one reference per hypothesis) or a list of lists.
    Orders above 1 use add-one smoothing; the brevity penalty uses the
    closest reference length.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(hypotheses, str):
        hypotheses = [hypotheses]
        references = [references]
    refs_all = [[r] if isinstance(r, str) else list(r) for r in references]
    if len(refs_all) != len(hypotheses):
        raise ValueError("need one reference set per hypothesis")

    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, refs_all):
        h = tokenize(hyp)
        rs = [tokenize(r) for r in refs]
        hyp_len += len(h)
        if rs:
            ref_len += min((abs(len(r) - len(h)), len(r)) for r in rs)[1]
        for order in range(1, n + 1):
            counts = Counter(_ngrams(h, order))
            max_ref: Counter = Counter()
            for r in rs:
                for g, c in Counter(_ngrams(r, order)).items():
                    max_ref[g] = max(max_ref[g], c)
            matches[order - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[order - 1] += sum(counts.values())
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for order in range(1, n + 1):
        m, t = matches[order - 1], totals[order - 1]
        if order > 1:
            m, t = m + 1, t + 1
        log_p += math.log(m / t) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


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


def rouge_l(hypothesis: str, reference: str, beta: float = 1.2) -> float:
    """Token-level ROUGE-L F-measure ``(1 + b^2) P R / (R + b^2 P)``."""
    h, r = tokenize(hypothesis), tokenize(reference)
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    b2 = beta * beta
    return (1 + b2) * p * rec / (rec + b2 * p)
