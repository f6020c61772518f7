"""Privacy metrics: token-level Levenshtein distances, minimum-distance
distributions between samples, delta-cutoff tables, Q-Q comparisons, and
the stochastic-dominance privacy criterion.

Distances are computed over trajectory bodies only (labels excluded).
The pairwise scan uses a running-minimum cutoff with a banded DP kernel
plus a token-count lower bound; both are pure optimizations validated
against the naive full-DP implementation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .errors import DomainError, MetricError
from .trajectory import LabeledTrajectory

MODE_S_VS_D = "s_vs_d"
MODE_SPRIME_VS_D = "sprime_vs_d"
MODE_SDOUBLEPRIME_VS_SPRIME = "sdoubleprime_vs_sprime"
_MODES = (MODE_S_VS_D, MODE_SPRIME_VS_D, MODE_SDOUBLEPRIME_VS_SPRIME)

DEFAULT_DELTAS = (0.01, 0.05, 0.10, 0.25)


def naive_edit_distance(s1: Sequence, s2: Sequence) -> int:
    """Reference Levenshtein distance via the full DP table."""
    n, m = len(s1), len(s2)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        c1 = s1[i - 1]
        for j in range(1, m + 1):
            cost = 0 if c1 == s2[j - 1] else 1
            cur[j] = min(prev[j - 1] + cost, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


@njit(cache=True)
def _lev_banded(a, b, cutoff):
    """Banded Levenshtein on int32 arrays.

    Returns the exact distance when it is <= cutoff, otherwise some
    value > cutoff (the band may early-exit).
    """
    n, m = a.shape[0], b.shape[0]
    if m > n:
        a, b = b, a
        n, m = m, n
    if n - m > cutoff:
        return cutoff + 1
    big = cutoff + 1
    prev = np.empty(m + 1, np.int64)
    cur = np.empty(m + 1, np.int64)
    for j in range(m + 1):
        prev[j] = j
    for i in range(1, n + 1):
        lo = i - cutoff
        if lo < 1:
            lo = 1
        hi = i + cutoff
        if hi > m:
            hi = m
        cur[lo - 1] = i if lo == 1 else big
        rowmin = cur[lo - 1]
        ai = a[i - 1]
        for j in range(lo, hi + 1):
            sub = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            dele = prev[j] + 1
            ins = cur[j - 1] + 1
            v = sub if sub < dele else dele
            if ins < v:
                v = ins
            cur[j] = v
            if v < rowmin:
                rowmin = v
        if hi < m:
            cur[hi + 1] = big
        if rowmin > cutoff:
            return big
        tmp = prev
        prev = cur
        cur = tmp
    return prev[m] if prev[m] <= cutoff else big


@njit(cache=True)
def _min_dist_scan(q, qcounts, corpus, ccounts, init_best):
    """Minimum banded distance from q to any corpus row.

    qcounts/ccounts are per-token occurrence counts used as a cheap
    Levenshtein lower bound (lev >= ceil(L1/2) and >= length gap).
    """
    best = init_best
    n_tok = qcounts.shape[0]
    for ci in range(corpus.shape[0]):
        l1 = 0
        for v in range(n_tok):
            d = qcounts[v] - ccounts[ci, v]
            l1 += d if d >= 0 else -d
        lb = (l1 + 1) // 2
        if lb >= best:
            continue
        d = _lev_banded(q, corpus[ci], best - 1)
        if d < best:
            best = d
            if best == 0:
                break
    return best


def edit_distance(s1: Sequence, s2: Sequence, cutoff: Optional[int] = None) -> int:
    """Levenshtein distance between two token sequences.

    With a cutoff, any true distance above it is reported as some value
    > cutoff. Null tokens are ordinary tokens.
    """
    index: dict = {}
    a = _encode_tokens(s1, index)
    b = _encode_tokens(s2, index)
    if cutoff is None:
        cutoff = max(a.shape[0], b.shape[0])
    if cutoff < 0:
        raise DomainError("cutoff must be non-negative")
    return int(_lev_banded(a, b, cutoff))


def _encode_tokens(tokens: Sequence, index: dict) -> np.ndarray:
    out = np.empty(len(tokens), dtype=np.int32)
    for i, tok in enumerate(tokens):
        code = index.get(tok)
        if code is None:
            code = len(index)
            index[tok] = code
        out[i] = code
    return out


@dataclass(frozen=True)
class MinDistDistribution:
    """Sorted per-trajectory minimum distances plus provenance."""

    values: np.ndarray
    mode: str
    n_queries_used: int
    n_filtered_unique_pair: int = 0

    @property
    def minimum(self) -> int:
        return int(self.values[0])

    def prob_at_most(self, m: int) -> float:
        return float(np.searchsorted(self.values, m, side="right")) / self.values.size


def _non_unique_pair_filter(
    sample: Sequence[LabeledTrajectory],
) -> tuple[list[LabeledTrajectory], int]:
    pair_counts = Counter((lt.home, lt.work) for lt in sample)
    kept = [lt for lt in sample if pair_counts[(lt.home, lt.work)] > 1]
    return kept, len(sample) - len(kept)


def min_dist_distribution(
    query: Sequence[LabeledTrajectory],
    corpus: Sequence[LabeledTrajectory],
    mode: str,
) -> MinDistDistribution:
    """Distribution of min edit distance from each query body to the corpus.

    Mode s_vs_d removes each query body from the corpus multiset exactly
    once (duplicates within the corpus remain) and, like sprime_vs_d,
    drops queries whose home/work pair is unique within the query
    sample. Mode sdoubleprime_vs_sprime uses every trajectory as-is.
    """
    if mode not in _MODES:
        raise DomainError(f"unknown mode {mode!r}")
    if not query:
        raise MetricError("empty query sample")

    n_filtered = 0
    if mode in (MODE_S_VS_D, MODE_SPRIME_VS_D):
        kept, n_filtered = _non_unique_pair_filter(query)
        if not kept:
            raise MetricError("all queries dropped by unique-pair filtering")
    else:
        kept = list(query)

    corpus_bodies = Counter(lt.tokens for lt in corpus)
    if mode == MODE_S_VS_D:
        for lt in query:  # removal uses the full query sample, once each
            if corpus_bodies[lt.tokens] > 0:
                corpus_bodies[lt.tokens] -= 1
    support = [body for body, cnt in corpus_bodies.items() if cnt > 0]
    if not support:
        raise MetricError("corpus empty after removal")

    index: dict = {}
    queries_arr = [_encode_tokens(lt.tokens, index) for lt in kept]
    corpus_arr = np.stack([_encode_tokens(body, index) for body in support])
    n_tok = len(index)
    ccounts = np.zeros((corpus_arr.shape[0], n_tok), dtype=np.int32)
    for ci in range(corpus_arr.shape[0]):
        for v in corpus_arr[ci]:
            ccounts[ci, v] += 1

    values = np.empty(len(kept), dtype=np.int64)
    width = corpus_arr.shape[1]
    for qi, q in enumerate(queries_arr):
        qcounts = np.zeros(n_tok, dtype=np.int32)
        for v in q:
            qcounts[v] += 1
        init = max(q.shape[0], width) + 1
        values[qi] = _min_dist_scan(q, qcounts, corpus_arr, ccounts, init)
    values.sort()
    return MinDistDistribution(values, mode, len(kept), n_filtered)


def delta_cutoff(dist: MinDistDistribution, delta: float) -> int:
    """Largest integer m with Pr[min-dist <= m] <= delta, or -1 if none."""
    if not (0.0 < delta < 1.0):
        raise DomainError("delta must lie in (0, 1)")
    vals = dist.values
    n = vals.size
    if n == 0:
        raise MetricError("empty distribution")
    k = int(delta * n + 1e-9)  # max count allowed at or below the cutoff
    if k >= n:
        return int(vals[-1])
    return int(vals[k]) - 1


def qq_points(dist_a: MinDistDistribution, dist_b: MinDistDistribution) -> list[tuple[int, int]]:
    """Paired order statistics at matching empirical quantiles.

    x comes from dist_a (the real-sample distribution), y from dist_b.
    The longer sample is reduced to the shorter one's length by
    nearest-rank interpolation; equal sizes pair sorted values directly.
    """
    a, b = dist_a.values, dist_b.values
    if a.size == 0 or b.size == 0:
        raise MetricError("empty distribution")
    n = min(a.size, b.size)

    def pick(vals: np.ndarray, i: int) -> int:
        if n == 1:
            return int(vals[(vals.size - 1) // 2])
        j = round(i * (vals.size - 1) / (n - 1))
        return int(vals[j])

    return [(pick(a, i), pick(b, i)) for i in range(n)]


@dataclass
class PrivacyReport:
    deltas: tuple
    s_vs_d: MinDistDistribution
    sprime_vs_d: MinDistDistribution
    sdoubleprime_vs_sprime: MinDistDistribution
    cutoffs: dict = field(default_factory=dict)
    minima: dict = field(default_factory=dict)
    criterion_sprime: dict = field(default_factory=dict)
    criterion_sdoubleprime: dict = field(default_factory=dict)
    zero_min_dist_alarm: dict = field(default_factory=dict)
    qq_sprime: list = field(default_factory=list)
    qq_sdoubleprime: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "deltas": list(self.deltas),
            "minima": self.minima,
            "cutoffs": {k: dict(v) for k, v in self.cutoffs.items()},
            "criterion_sprime_satisfied": self.criterion_sprime,
            "criterion_sdoubleprime_satisfied": self.criterion_sdoubleprime,
            "zero_min_dist_alarm": self.zero_min_dist_alarm,
            "n_queries": {
                "s_vs_d": self.s_vs_d.n_queries_used,
                "sprime_vs_d": self.sprime_vs_d.n_queries_used,
                "sdoubleprime_vs_sprime": self.sdoubleprime_vs_sprime.n_queries_used,
            },
            "n_filtered_unique_pair": {
                "s_vs_d": self.s_vs_d.n_filtered_unique_pair,
                "sprime_vs_d": self.sprime_vs_d.n_filtered_unique_pair,
            },
            "qq_sprime": [list(p) for p in self.qq_sprime],
            "qq_sdoubleprime": [list(p) for p in self.qq_sdoubleprime],
        }


def privacy_criterion_check(
    s_vs_d: MinDistDistribution,
    sprime_vs_d: MinDistDistribution,
    sdoubleprime_vs_sprime: MinDistDistribution,
    deltas: Sequence[float] = DEFAULT_DELTAS,
) -> PrivacyReport:
    """Delta-cutoff table plus the per-delta privacy criterion checks.

    The criterion holds at delta when the evaluated distribution's
    cutoff is at least the real sample's; a minimum distance of zero in
    any distribution raises the corresponding alarm flag.
    """
    report = PrivacyReport(
        deltas=tuple(deltas),
        s_vs_d=s_vs_d,
        sprime_vs_d=sprime_vs_d,
        sdoubleprime_vs_sprime=sdoubleprime_vs_sprime,
    )
    names = {
        "s_vs_d": s_vs_d,
        "sprime_vs_d": sprime_vs_d,
        "sdoubleprime_vs_sprime": sdoubleprime_vs_sprime,
    }
    for name, dist in names.items():
        report.minima[name] = dist.minimum
        report.zero_min_dist_alarm[name] = dist.minimum == 0
        report.cutoffs[name] = {str(d): delta_cutoff(dist, d) for d in deltas}
    for d in deltas:
        base = delta_cutoff(s_vs_d, d)
        report.criterion_sprime[str(d)] = delta_cutoff(sprime_vs_d, d) >= base
        report.criterion_sdoubleprime[str(d)] = delta_cutoff(sdoubleprime_vs_sprime, d) >= base
    report.qq_sprime = qq_points(s_vs_d, sprime_vs_d)
    report.qq_sdoubleprime = qq_points(s_vs_d, sdoubleprime_vs_sprime)
    return report
