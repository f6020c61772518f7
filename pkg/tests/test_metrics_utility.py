from datetime import timedelta

import numpy as np
import pytest

from staygen.errors import DomainError, MetricError
from staygen.geo import NULL_AREA, centroid_distance_km
from staygen.ingest import LbsRecord, Panel
from staygen.metrics_utility import (
    Pmf,
    aggregate_time_comparison,
    aggregate_time_share,
    chi_squared_from_values,
    chi_squared_homogeneity,
    kl_divergence,
    label_error_rate,
    locations_per_user,
    locations_per_user_pmf,
    make_baselines,
    trip_distance_pmf,
    trip_distances,
    utility_report,
    week_change_baseline,
)
from staygen.trajectory import LabeledTrajectory, TokenVocab

from conftest import MONDAY


def lt(tokens, home="a0000", work="a0001", device="d"):
    return LabeledTrajectory(device, home, work, tuple(tokens))


def test_kl_worked_example():
    p = Pmf(("x", "y"), np.array([0.5, 0.5]))
    q = Pmf(("x", "y"), np.array([0.25, 0.75]))
    assert abs(kl_divergence(p, q) - 0.1438) < 1e-3
    assert abs(kl_divergence(q, p) - 0.1308) < 1e-3
    assert kl_divergence(p, p) == 0.0


def test_kl_requires_matching_bins():
    p = Pmf(("x", "y"), np.array([0.5, 0.5]))
    q = Pmf(("x", "z"), np.array([0.5, 0.5]))
    with pytest.raises(DomainError):
        kl_divergence(p, q)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(0)
    labels = tuple(range(8))
    for _ in range(200):
        a = rng.random(8)
        b = rng.random(8)
        pa = Pmf(labels, a / a.sum())
        pb = Pmf(labels, b / b.sum())
        assert kl_divergence(pa, pb) >= 0.0


def test_pmf_validation():
    with pytest.raises(DomainError):
        Pmf(("a",), np.array([0.9]))
    with pytest.raises(DomainError):
        Pmf(("a", "b"), np.array([1.5, -0.5]))


def test_trip_rules(small_map):
    null_break = lt(["a0000", "a0000", NULL_AREA, "a0001"])
    assert trip_distances([null_break], small_map).size == 0
    one = lt(["a0000", "a0001"])
    d = trip_distances([one], small_map)
    assert d.size == 1
    assert d[0] == centroid_distance_km("a0000", "a0001", small_map)
    back_and_forth = lt(["a0000", "a0001", "a0000"])
    d = trip_distances([back_and_forth], small_map)
    assert d.size == 2 and d[0] == d[1]


def test_trip_pmf_clamps_to_range(small_map):
    near = lt(["a0000", "a0001"] * 3)
    far = lt(["a0000", "a0005"] * 3)
    pmf = trip_distance_pmf([far], small_map, n_bins=5, d_max=1.0)
    assert pmf.probs[-1] == 1.0  # everything beyond the range lands in the last bin
    pmf2 = trip_distance_pmf([near, far], small_map, n_bins=5)
    assert abs(pmf2.probs.sum() - 1.0) < 1e-12


def test_trip_pmf_requires_trips(small_map):
    with pytest.raises(MetricError):
        trip_distance_pmf([lt(["a0000"] * 10)], small_map)


def test_locations_per_user_counts():
    assert locations_per_user([lt(["a0000"] * 120)])[0] == 1
    mixed = lt(["a0000", "a0001", "a0000", NULL_AREA, "a0002"])
    assert locations_per_user([mixed])[0] == 3


def test_locations_pmf_clamps():
    sample = [lt(["a0000"] * 5), lt(["a0000", "a0001", "a0002", "a0003", "a0004"])]
    pmf = locations_per_user_pmf(sample, max_count=3)
    assert pmf.labels == (1, 2, 3)
    assert pmf.probs[0] == 0.5 and pmf.probs[2] == 0.5


def test_random_baseline_has_more_locations(small_map):
    vocab = TokenVocab(small_map.area_ids())
    rng = np.random.default_rng(1)
    real = [lt(["a0000"] * 60 + ["a0001"] * 60) for _ in range(50)]
    random_sample = [
        lt([vocab.decode(int(t)) for t in rng.integers(0, vocab.size, 120)])
        for _ in range(50)
    ]
    assert locations_per_user(random_sample).mean() > locations_per_user(real).mean() + 2


def test_chi_squared_exact_match_gives_p_one():
    reference = np.repeat(np.arange(1, 7), 100)
    sample = np.repeat(np.arange(1, 7), 10)
    res = chi_squared_from_values(sample, reference, n_quantiles=6)
    assert res.statistic == 0.0
    assert res.p_value == 1.0
    assert not res.reject


def test_chi_squared_oracle_point():
    # p-value machinery matches the df=5 boundary case
    from staygen.stats import chi2_sf

    assert abs(chi2_sf(11.0705, 5) - 0.05) < 5e-4


def test_chi_squared_detects_shift():
    rng = np.random.default_rng(0)
    reference = rng.integers(1, 10, size=4000)
    shifted = reference[:500] + 3
    res = chi_squared_from_values(shifted, reference)
    assert res.reject


def test_chi_squared_needs_sample_size():
    with pytest.raises(MetricError):
        chi_squared_from_values(np.arange(10), np.arange(100))


def test_chi_squared_false_reject_rate_quick():
    rng = np.random.default_rng(7)
    reference = rng.poisson(4, size=5000) + 1
    rejects = 0
    trials = 300
    for t in range(trials):
        sub = rng.choice(reference, size=400, replace=True)
        rejects += chi_squared_from_values(sub, reference).reject
    rate = rejects / trials
    assert abs(rate - 0.05) < 0.04


def test_aggregate_time_share_examples(small_map):
    vocab = TokenVocab(small_map.area_ids())
    sample = [lt(["a0000"] * 120) for _ in range(4)]
    share = aggregate_time_share(sample, vocab)
    assert share[vocab.encode("a0000") - 1] == 1.0
    assert share.sum() == 1.0
    r, p, kl = aggregate_time_comparison(share, share)
    assert r == 1.0 and kl == 0.0
    with pytest.raises(MetricError):
        aggregate_time_share([lt([NULL_AREA] * 120)], vocab)


def test_label_error_rates():
    good = [lt(["a0000"] * 120, home="a0000", work="a0000")]
    assert label_error_rate(good) == (0.0, 0.0)
    # all hours at home, but the label claims a different work area:
    # inferred work is the home area, so every row is a work error
    off = [lt(["a0000"] * 120, home="a0000", work="a0001") for _ in range(3)]
    home_err, work_err = label_error_rate(off)
    assert home_err == 0.0 and work_err == 1.0
    # all-null trajectory counts as an error on both labels
    nul = [lt([NULL_AREA] * 120)]
    assert label_error_rate(nul) == (1.0, 1.0)


def _panel_from_tokens(device_tokens, amap):
    devices = {}
    for device, tokens in sorted(device_tokens.items()):
        recs = []
        for h, area in enumerate(tokens):
            if area == NULL_AREA:
                continue
            lat, lon = amap.centroid(area)
            recs.append(LbsRecord(device, lat, lon, MONDAY + timedelta(hours=h), 50.0))
        devices[device] = recs
    return Panel(MONDAY, 120, devices)


def _routine_tokens(home, work):
    return [home if (h % 24 >= 20 or h % 24 < 9) else work for h in range(120)]


def test_week_change_identical_panels(small_map):
    tokens = {f"d{i}": _routine_tokens("a0000", "a0001") for i in range(5)}
    p1 = _panel_from_tokens(tokens, small_map)
    p2 = _panel_from_tokens(tokens, small_map)
    assert week_change_baseline(p1, p2, small_map) == (0.0, 0.0, 1.0)


def test_week_change_single_perturbation(small_map):
    tokens = {f"d{i}": _routine_tokens("a0000", "a0001") for i in range(5)}
    moved = dict(tokens)
    moved["d0"] = _routine_tokens("a0002", "a0001")  # new home for one device
    p1 = _panel_from_tokens(tokens, small_map)
    p2 = _panel_from_tokens(moved, small_map)
    home_rate, work_rate, overlap = week_change_baseline(p1, p2, small_map)
    assert home_rate == 1 / 5 and work_rate == 0.0 and overlap == 1.0


def test_week_change_overlap_fraction(small_map):
    tokens1 = {f"d{i}": _routine_tokens("a0000", "a0001") for i in range(4)}
    tokens2 = {k: v for k, v in tokens1.items() if k != "d3"}
    p1 = _panel_from_tokens(tokens1, small_map)
    p2 = _panel_from_tokens(tokens2, small_map)
    assert week_change_baseline(p1, p2, small_map)[2] == 0.75
    with pytest.raises(MetricError):
        week_change_baseline(p1, _panel_from_tokens({"x": _routine_tokens("a0000", "a0001")}, small_map), small_map)


def test_make_baselines_contract(small_map):
    vocab = TokenVocab(small_map.area_ids())
    d_sample = [
        lt(_routine_tokens("a0000", "a0001"), home="a0000", work="a0001", device="dA"),
        lt(_routine_tokens("a0002", "a0001"), home="a0002", work="a0001", device="dB"),
    ]
    labels = [("a0000", "a0001")] * 3
    secondary, random_sample = make_baselines(d_sample, labels, vocab, seed=0)
    assert len(secondary) == len(random_sample) == 3
    # only one matching trajectory exists: the secondary sample repeats it
    for s in secondary:
        assert s.tokens == d_sample[0].tokens
        assert (s.home, s.work) == ("a0000", "a0001")
    for r in random_sample:
        assert (r.home, r.work) == ("a0000", "a0001")
        assert len(r.tokens) == 120


def test_make_baselines_missing_pair(small_map):
    vocab = TokenVocab(small_map.area_ids())
    d_sample = [lt(_routine_tokens("a0000", "a0001"), home="a0000", work="a0001")]
    with pytest.raises(MetricError) as err:
        make_baselines(d_sample, [("a0003", "a0004")], vocab, seed=0)
    assert "a0003" in str(err.value)


def test_random_baseline_occupancy(small_map):
    # expected distinct non-null areas of a uniform random trajectory:
    # (V-1) * (1 - (1 - 1/V)^T)
    vocab = TokenVocab(small_map.area_ids())
    V, T = vocab.size, 120
    d_sample = [lt(_routine_tokens("a0000", "a0001"), home="a0000", work="a0001")]
    labels = [("a0000", "a0001")] * 400
    _, random_sample = make_baselines(d_sample, labels, vocab, seed=3)
    expected = (V - 1) * (1 - (1 - 1 / V) ** T)
    observed = locations_per_user(random_sample).mean()
    assert abs(observed - expected) < 0.15


def test_utility_report_shape(small_map):
    vocab = TokenVocab(small_map.area_ids())
    rng = np.random.default_rng(0)
    areas = small_map.area_ids()

    def make(device):
        home, work = rng.choice(areas, 2)
        toks = _routine_tokens(home, work)
        for i in range(0, 120, 7):
            toks[i] = NULL_AREA
        return LabeledTrajectory(device, home, work, tuple(toks))

    d_sample = [make(f"d{i}") for i in range(80)]
    s_sample = d_sample[:40]
    synthetic = [
        LabeledTrajectory(f"s{i}", lt0.home, lt0.work, lt0.tokens)
        for i, lt0 in enumerate(s_sample)
    ]
    secondary, random_sample = make_baselines(
        d_sample, [(x.home, x.work) for x in s_sample], vocab, seed=1
    )
    report = utility_report(
        d_sample, s_sample, synthetic, secondary, random_sample, small_map, vocab
    )
    samples = report["samples"]
    assert set(samples) == {"synthetic", "secondary_real", "random"}
    for col in samples.values():
        assert col["trip_distance_kl"] >= 0
        assert 0 <= col["home_label_error_rate"] <= 1
        assert 0 <= col["locations_chi2_p_value"] <= 1
    # perfect synthetic copies of S: label errors zero, random baseline far off
    assert samples["synthetic"]["home_label_error_rate"] == 0.0
    assert samples["random"]["home_label_error_rate"] > 0.5
    assert samples["synthetic"]["aggregate_time_pearson_r"] > 0.99


def test_baselines_deterministic(small_map):
    vocab = TokenVocab(small_map.area_ids())
    d_sample = [
        lt(_routine_tokens("a0000", "a0001"), home="a0000", work="a0001", device="dA"),
        lt(_routine_tokens("a0000", "a0001"), home="a0000", work="a0001", device="dB"),
    ]
    labels = [("a0000", "a0001")] * 5
    s1 = make_baselines(d_sample, labels, vocab, seed=11)
    s2 = make_baselines(d_sample, labels, vocab, seed=11)
    assert [x.tokens for x in s1[0]] == [x.tokens for x in s2[0]]
    assert [x.tokens for x in s1[1]] == [x.tokens for x in s2[1]]
    s3 = make_baselines(d_sample, labels, vocab, seed=12)
    assert [x.tokens for x in s3[1]] != [x.tokens for x in s1[1]]
