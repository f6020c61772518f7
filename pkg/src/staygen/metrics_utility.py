"""Utility metrics comparing a trajectory sample against real data:
trip-distance and locations-per-user distributions (KL divergence and a
chi-squared homogeneity test), aggregate time share per area (Pearson
correlation and KL), home/work label error rates, and the two baseline
samples used for context.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, MetricError, NoHomeInferableError, NoWorkInferableError
from .geo import NULL_AREA, AreaMap, centroid_distance_km
from .ingest import Panel
from .stats import chi2_sf, pearson_r_pvalue
from .trajectory import (
    LabeledTrajectory,
    StayTrajectory,
    TokenVocab,
    build_stay_trajectories,
    infer_home,
    infer_work,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Pmf:
    """Discrete probability distribution over ordered bins."""

    labels: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DomainError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return len(self.labels)


def kl_divergence(p: Pmf, q: Pmf, smoothing: float = 1e-9) -> float:
    """D_KL(p || q) in nats after epsilon-smoothing and renormalizing both."""
    if p.labels != q.labels:
        raise DomainError("KL divergence requires identical bin structure")
    ps = p.probs + smoothing
    qs = q.probs + smoothing
    ps = ps / ps.sum()
    qs = qs / qs.sum()
    return float(np.sum(ps * np.log(ps / qs)))


def trip_distances(sample: Sequence[LabeledTrajectory], amap: AreaMap) -> np.ndarray:
    """Centroid distances of every adjacent differing non-null pair."""
    out = []
    for traj in sample:
        toks = traj.tokens
        for a, b in zip(toks, toks[1:]):
            if a != b and a != NULL_AREA and b != NULL_AREA:
                out.append(centroid_distance_km(a, b, amap))
    return np.array(out, dtype=np.float64)


def trip_distance_pmf(
    sample: Sequence[LabeledTrajectory],
    amap: AreaMap,
    n_bins: int = 20,
    d_max: Optional[float] = None,
) -> Pmf:
    """Histogram PMF of trip distances over equal-width bins on [0, d_max].

    d_max should come from the reference dataset so all samples share a
    bin structure; distances above d_max clamp into the last bin.
    """
    dists = trip_distances(sample, amap)
    if dists.size == 0:
        raise MetricError("sample contains no trips")
    if d_max is None:
        d_max = float(dists.max())
    if d_max <= 0:
        raise MetricError("degenerate distance range")
    edges = np.linspace(0.0, d_max, n_bins + 1)
    idx = np.minimum(np.searchsorted(edges, dists, side="right") - 1, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    labels = tuple(round(float(e), 9) for e in edges[:-1])
    return Pmf(labels, counts / counts.sum())


def locations_per_user(sample: Sequence[LabeledTrajectory]) -> np.ndarray:
    """Distinct non-null area count per trajectory."""
    return np.array(
        [len({a for a in t.tokens if a != NULL_AREA}) for t in sample], dtype=np.int64
    )


def locations_per_user_pmf(
    sample: Sequence[LabeledTrajectory], max_count: Optional[int] = None
) -> Pmf:
    """PMF over integer location counts 1..max_count (values clamp into
    the end bins; max_count should come from the reference dataset)."""
    counts = locations_per_user(sample)
    if counts.size == 0:
        raise MetricError("empty sample")
    if max_count is None:
        max_count = int(counts.max())
    clipped = np.clip(counts, 1, max_count)
    hist = np.bincount(clipped, minlength=max_count + 1)[1:].astype(np.float64)
    return Pmf(tuple(range(1, max_count + 1)), hist / hist.sum())


@dataclass(frozen=True)
class ChiSquaredResult:
    statistic: float
    p_value: float
    reject: bool
    df: int
    bin_edges: tuple
    low_expected_warning: bool


def quantile_bin_edges(values: np.ndarray, n_quantiles: int) -> list:
    """Upper edges of n equal-quantile bins (duplicates merged)."""
    qs = [np.quantile(values, k / n_quantiles) for k in range(1, n_quantiles)]
    edges = []
    for q in qs:
        if not edges or q > edges[-1]:
            edges.append(float(q))
    return edges


def _bin_by_edges(values: np.ndarray, edges: list) -> np.ndarray:
    # bin i = (edges[i-1], edges[i]], last bin open above
    return np.searchsorted(np.array(edges), values, side="left")


def chi_squared_from_values(
    sample_values: np.ndarray,
    reference_values: np.ndarray,
    n_quantiles: int = 6,
    alpha: float = 0.05,
) -> ChiSquaredResult:
    """Pearson chi-squared homogeneity test of a sample against reference
    proportions, with categories cut at the reference's quantiles."""
    sample_values = np.asarray(sample_values)
    reference_values = np.asarray(reference_values)
    if sample_values.size < 30:
        raise MetricError("need at least 30 sample values")
    edges = quantile_bin_edges(reference_values, n_quantiles)
    # the bin above the top edge can be empty when the edge hits the max;
    # merge such bins so every expected count is positive
    while edges:
        counts = np.bincount(_bin_by_edges(reference_values, edges), minlength=len(edges) + 1)
        if np.all(counts > 0):
            break
        edges.pop(int(np.argmin(counts)) - 1 if np.argmin(counts) > 0 else 0)
    n_bins = len(edges) + 1
    if n_bins < 2:
        raise MetricError("reference distribution is degenerate")
    ref_counts = np.bincount(_bin_by_edges(reference_values, edges), minlength=n_bins)
    obs = np.bincount(_bin_by_edges(sample_values, edges), minlength=n_bins)
    expected = sample_values.size * ref_counts / ref_counts.sum()
    stat = float(np.sum((obs - expected) ** 2 / expected))
    df = n_bins - 1
    p = chi2_sf(stat, df)
    return ChiSquaredResult(
        statistic=stat,
        p_value=p,
        reject=bool(p < alpha),
        df=df,
        bin_edges=tuple(edges),
        low_expected_warning=bool(np.any(expected < 5)),
    )


def chi_squared_homogeneity(
    sample: Sequence[LabeledTrajectory],
    reference: Sequence[LabeledTrajectory],
    n_quantiles: int = 6,
    alpha: float = 0.05,
) -> ChiSquaredResult:
    """Homogeneity test on the locations-per-user distributions."""
    return chi_squared_from_values(
        locations_per_user(sample), locations_per_user(reference), n_quantiles, alpha
    )


def aggregate_time_share(sample: Sequence[LabeledTrajectory], vocab: TokenVocab) -> np.ndarray:
    """Share of all non-null intervals spent in each area (token order)."""
    counts = np.zeros(vocab.size - 1, dtype=np.float64)
    for traj in sample:
        for area in traj.tokens:
            if area != NULL_AREA:
                counts[vocab.encode(area) - 1] += 1.0
    total = counts.sum()
    if total == 0:
        raise MetricError("sample has no non-null intervals")
    return counts / total


def aggregate_time_comparison(
    sample_share: np.ndarray, reference_share: np.ndarray
) -> tuple[float, float, float]:
    """(Pearson r, two-sided p-value, KL divergence) between share vectors."""
    if sample_share.shape != reference_share.shape:
        raise DomainError("share vectors must cover the same areas")
    r, p = pearson_r_pvalue(sample_share, reference_share)
    labels = tuple(range(sample_share.size))
    kl = kl_divergence(Pmf(labels, sample_share), Pmf(labels, reference_share))
    return r, p, kl


def label_error_rate(sample: Sequence[LabeledTrajectory]) -> tuple[float, float]:
    """Fraction of trajectories whose inferred home (resp. work) differs
    from the attached label; uninferable trajectories count as errors."""
    if not sample:
        raise MetricError("empty sample")
    home_err = work_err = 0
    for lt in sample:
        st = StayTrajectory(lt.device_id, lt.tokens)
        try:
            if infer_home(st) != lt.home:
                home_err += 1
        except NoHomeInferableError:
            home_err += 1
        try:
            if infer_work(st) != lt.work:
                work_err += 1
        except NoWorkInferableError:
            work_err += 1
    n = len(sample)
    return home_err / n, work_err / n


def week_change_baseline(
    panel_week1: Panel, panel_week2: Panel, amap: AreaMap
) -> tuple[float, float, float]:
    """Label churn between two panels of the same population.

    Returns (home_change_rate, work_change_rate, overlap_fraction) over
    devices present in both panels; devices whose labels cannot be
    inferred in one of the weeks count as changed.
    """
    labels = {}
    for which, panel in (("w1", panel_week1), ("w2", panel_week2)):
        for traj in build_stay_trajectories(panel, amap):
            try:
                home = infer_home(traj)
                work = infer_work(traj)
            except (NoHomeInferableError, NoWorkInferableError):
                home = work = None
            labels.setdefault(traj.device_id, {})[which] = (home, work)
    common = [d for d, ws in labels.items() if len(ws) == 2]
    if not common:
        raise MetricError("no devices common to both panels")
    home_changes = sum(
        1
        for d in common
        if labels[d]["w1"][0] != labels[d]["w2"][0] or labels[d]["w1"][0] is None
    )
    work_changes = sum(
        1
        for d in common
        if labels[d]["w1"][1] != labels[d]["w2"][1] or labels[d]["w1"][1] is None
    )
    overlap = len(common) / panel_week1.n_devices
    return home_changes / len(common), work_changes / len(common), overlap


def make_baselines(
    d_sample: Sequence[LabeledTrajectory],
    s_labels: Sequence[tuple[str, str]],
    vocab: TokenVocab,
    seed: int,
    body_length: Optional[int] = None,
) -> tuple[list[LabeledTrajectory], list[LabeledTrajectory]]:
    """The two comparison baselines for a requested label multiset.

    Secondary real sample: for each label pair, a uniformly chosen (with
    replacement) trajectory from the real data having that inferred
    pair. Random sample: bodies drawn i.i.d. uniform over the whole
    token vocabulary (null included).
    """
    rng = np.random.default_rng(seed)
    by_pair: dict[tuple[str, str], list[LabeledTrajectory]] = {}
    for lt in d_sample:
        by_pair.setdefault((lt.home, lt.work), []).append(lt)
    missing = sorted({pair for pair in s_labels if pair not in by_pair})
    if missing:
        raise MetricError(f"label pairs missing from reference data: {missing}")
    if body_length is None:
        body_length = len(d_sample[0].tokens) if d_sample else 0

    secondary = []
    for i, pair in enumerate(s_labels):
        pool = by_pair[pair]
        pick = pool[int(rng.integers(len(pool)))]
        secondary.append(LabeledTrajectory(f"sec{i:05d}", pair[0], pair[1], pick.tokens))

    random_sample = []
    for i, (home, work) in enumerate(s_labels):
        toks = rng.integers(0, vocab.size, size=body_length)
        body = tuple(vocab.decode(int(t)) for t in toks)
        random_sample.append(LabeledTrajectory(f"rnd{i:05d}", home, work, body))
    return secondary, random_sample


def utility_report(
    d_sample: Sequence[LabeledTrajectory],
    s_sample: Sequence[LabeledTrajectory],
    synthetic: Sequence[LabeledTrajectory],
    secondary: Sequence[LabeledTrajectory],
    random_sample: Sequence[LabeledTrajectory],
    amap: AreaMap,
    vocab: TokenVocab,
    n_bins: int = 20,
    n_quantiles: int = 6,
    alpha: float = 0.05,
) -> dict:
    """Assemble the full utility table: one column per evaluated sample."""
    d_trips = trip_distances(d_sample, amap)
    if d_trips.size == 0:
        raise MetricError("reference data contains no trips")
    d_max = float(d_trips.max())
    trip_ref = trip_distance_pmf(d_sample, amap, n_bins, d_max)
    max_l = int(locations_per_user(d_sample).max())
    loc_ref = locations_per_user_pmf(d_sample, max_l)
    share_ref = aggregate_time_share(s_sample, vocab)

    report: dict = {
        "reference": {"n_trajectories": len(d_sample), "trip_d_max_km": d_max},
        "samples": {},
    }
    for name, sample in (
        ("synthetic", synthetic),
        ("secondary_real", secondary),
        ("random", random_sample),
    ):
        col: dict = {"n_trajectories": len(sample)}
        col["trip_distance_kl"] = kl_divergence(
            trip_distance_pmf(sample, amap, n_bins, d_max), trip_ref
        )
        col["locations_per_user_kl"] = kl_divergence(
            locations_per_user_pmf(sample, max_l), loc_ref
        )
        chi = chi_squared_homogeneity(sample, d_sample, n_quantiles, alpha)
        col["locations_chi2_statistic"] = chi.statistic
        col["locations_chi2_p_value"] = chi.p_value
        col["locations_chi2_reject"] = chi.reject
        col["locations_chi2_low_expected"] = chi.low_expected_warning
        r, p, kl = aggregate_time_comparison(aggregate_time_share(sample, vocab), share_ref)
        col["aggregate_time_pearson_r"] = r
        col["aggregate_time_pearson_p"] = p
        col["aggregate_time_kl"] = kl
        home_err, work_err = label_error_rate(sample)
        col["home_label_error_rate"] = home_err
        col["work_label_error_rate"] = work_err
        report["samples"][name] = col
    return report
