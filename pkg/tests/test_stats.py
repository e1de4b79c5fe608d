import math

import numpy as np
import pandas as pd
import pytest
from scipy.stats import kstwobign, linregress, norm

from src.characteristics import make_indicator_characteristic, make_table_characteristic
from src.constants import compute_constants
from src.errors import StatsError
from src.simulator import CSV_COLUMNS, run_batch
from src.stats import (
    VerificationOptions,
    bootstrap,
    critical_flatness,
    critical_growth,
    direction_angles,
    kolmogorov_sf,
    ks_test,
    lln_check,
    pearson_ci,
    residual_histogram,
    verify_dichotomy,
    verify_frame,
)

OPTIONS = VerificationOptions(bootstrap_draws=400)


def synthetic_frame(t, w):
    m = len(w)
    t = np.asarray(t, dtype=complex)
    return pd.DataFrame(
        {
            "index": np.arange(m),
            "survived": 1,
            "aborted": 0,
            "w_hat": w,
            "re_z_phi": 0.0,
            "im_z_phi": 0.0,
            "re_t": t.real,
            "im_t": t.imag,
        },
        columns=CSV_COLUMNS,
    )


@pytest.fixture
def s1_constants(s1, s1_spectral):
    return compute_constants(make_indicator_characteristic([1]), s1_spectral, s1)


@pytest.fixture
def s2_constants(s2, s2_spectral):
    return compute_constants(make_indicator_characteristic([1, -1]), s2_spectral, s2)


@pytest.mark.parametrize("lam", [0.3, 0.6, 0.9, 1.17, 1.19, 1.5, 2.2, 3.0])
def test_kolmogorov_sf_matches_scipy(lam):
    assert kolmogorov_sf(lam) == pytest.approx(kstwobign.sf(lam), abs=1e-12)
    assert kolmogorov_sf(0.0) == 1.0


def test_ks_constant_sample():
    result = ks_test(np.zeros(100))
    assert result.statistic == pytest.approx(0.5)
    assert result.pvalue < 1e-12


def test_ks_quantile_sample():
    m = 200
    sample = norm.ppf((np.arange(1, m + 1) - 0.5) / m)
    result = ks_test(sample)
    assert result.statistic <= 1 / (2 * m) + 1e-12
    assert result.pvalue > 0.999


def test_ks_rejects_small_or_invalid_samples():
    with pytest.raises(StatsError):
        ks_test(np.zeros(10))
    with pytest.raises(StatsError):
        ks_test(np.r_[np.zeros(60), np.nan])


def test_bootstrap_is_reproducible(rng):
    values = rng.normal(size=300)
    first = bootstrap(values, np.var, draws=200, seed=3)
    assert bootstrap(values, np.var, draws=200, seed=3) == first
    assert bootstrap(values, np.var, draws=200, seed=4) != first
    assert first.low <= first.estimate <= first.high


def test_pearson_without_variance_is_not_applicable():
    result = pearson_ci(np.ones(50), np.arange(50.0), 0.99)
    assert not result.applicable
    assert result.covers_zero


def test_synthetic_mixture_passes(s1_constants, rng):
    m = 2000
    w = rng.gamma(4.0, 0.25, size=m)
    t = math.sqrt(0.5) * np.sqrt(w) * rng.normal(size=m)
    report = verify_frame(synthetic_frame(t, w), s1_constants, OPTIONS)
    assert report.sample_size == m
    assert report.status == "PASS", report.to_dict()["verdicts"]
    assert report.residuals.shape == (m,)


def test_wrong_scale_fails(s1_constants, rng):
    m = 2000
    w = rng.gamma(4.0, 0.25, size=m)
    t = 2 * math.sqrt(0.5) * np.sqrt(w) * rng.normal(size=m)
    report = verify_frame(synthetic_frame(t, w), s1_constants, OPTIONS)
    assert not report.verdicts["variance"]
    assert report.status == "FAIL"


def test_dependence_on_w_is_detected(s1_constants, rng):
    m = 2000
    w = rng.gamma(4.0, 0.25, size=m)
    t = math.sqrt(0.5) * w * rng.normal(size=m)
    report = verify_frame(synthetic_frame(t, w), s1_constants, OPTIONS)
    assert not report.corr_square.covers_zero
    assert not report.verdicts["independence"]


def test_survivor_filter(s1_constants, rng):
    m = 200
    w = np.r_[np.full(m, 1e-4), rng.gamma(4.0, 0.25, size=10)]
    with pytest.raises(StatsError):
        verify_frame(synthetic_frame(np.zeros(m + 10), w), s1_constants, OPTIONS)


def test_case_override_is_checked(s1_constants, s2_constants, rng):
    frame = synthetic_frame(np.zeros(60), np.ones(60))
    with pytest.raises(StatsError):
        verify_frame(frame, s1_constants, VerificationOptions(case="ii"))
    with pytest.raises(StatsError):
        verify_frame(frame, s2_constants, VerificationOptions(case="i"))


def test_complex_characteristic_is_informational(s1_constants, rng):
    m = 300
    w = rng.gamma(4.0, 0.25, size=m)
    t = np.sqrt(w) * (rng.normal(size=m) + 1j * rng.normal(size=m))
    report = verify_frame(synthetic_frame(t, w), s1_constants, OPTIONS, is_real=False)
    assert report.status == "INFORMATIONAL"
    assert set(report.marginals) == {"real", "imag"}
    assert report.ks is None


def test_degenerate_branch(deterministic):
    batch = run_batch(deterministic, make_indicator_characteristic([1]), 8, 12, 5, master_seed=0, times=[4, 5, 6, 7])
    report = verify_dichotomy(batch)
    assert report.case == "case i, sigma=0"
    assert report.verdicts == {"monotone_decay": True, "vanishing": True}
    assert report.status == "PASS"


def test_lln_check_s1(s1, s1_spectral):
    phi = make_indicator_characteristic([1])
    batch = run_batch(s1, phi, 10, 16, 200, master_seed=5)
    report = lln_check(batch, phi, s1_spectral)
    assert not report.absolute
    assert report.passed
    assert report.median == pytest.approx(1.0, abs=0.05)


def test_lln_check_vanishing_constant(s2, s2_spectral):
    phi = make_indicator_characteristic([1, -1])
    batch = run_batch(s2, phi, 10, 12, 100, master_seed=6)
    report = lln_check(batch, phi, s2_spectral)
    assert report.absolute
    assert report.passed


def test_lln_check_needs_deterministic_characteristic(s1, s1_spectral):
    phi = make_table_characteristic(1, coeff={0: [1]})
    batch = run_batch(s1, phi, 4, 6, 10, master_seed=0)
    with pytest.raises(StatsError):
        lln_check(batch, phi, s1_spectral)


def test_direction_angles_shrink(s2, s2_spectral):
    batch = run_batch(s2, make_indicator_characteristic([1, 1]), 10, 10, 200, master_seed=8)
    angles = direction_angles(batch, s2_spectral, [2, 10])
    assert angles[10] < 0.01
    assert angles[10] < angles[2]
    with pytest.raises(StatsError):
        direction_angles(batch, s2_spectral, [11])


def test_critical_growth_frame(s2, s2_spectral, s2_constants):
    batch = run_batch(s2, make_indicator_characteristic([1, -1]), 8, 8, 100, master_seed=11)
    frame = critical_growth(batch, s2_constants, s2_spectral, s2, [4, 8], draws=100)
    assert list(frame.columns) == ["n", "empirical", "se", "exact", "limit"]
    np.testing.assert_allclose(frame["exact"], 1.0, rtol=1e-10)
    np.testing.assert_allclose(frame["limit"], 1.0, rtol=1e-10)


def test_critical_flatness():
    frame = pd.DataFrame({"n": [8, 10, 12], "empirical": [1.02, 0.97, 1.05], "se": [0.03, 0.03, 0.03], "exact": 1.0, "limit": 1.0})
    assert critical_flatness(frame)
    frame.loc[2, "empirical"] = 1.5
    assert not critical_flatness(frame)
    with pytest.raises(StatsError):
        critical_flatness(frame.iloc[:0])


def test_critical_growth_requires_l_star(s1, s1_spectral, s1_constants):
    batch = run_batch(s1, make_indicator_characteristic([1]), 4, 4, 10, master_seed=0)
    with pytest.raises(StatsError):
        critical_growth(batch, s1_constants, s1_spectral, s1, [4])


def test_residual_histogram(rng):
    residuals = rng.normal(size=5000)
    frame = residual_histogram(residuals)
    assert len(frame) == 40
    assert frame["count"].sum() == np.sum(np.abs(residuals) <= 5)
    width = frame["bin_right"][0] - frame["bin_left"][0]
    assert (frame["density"] * width).sum() == pytest.approx(1.0, abs=1e-3)
    assert frame["normal_density"].max() == pytest.approx(norm.pdf(0.125), rel=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("fixture, row", [("s1", [1]), ("s2", [1, -1])])
def test_dichotomy_on_simulated_batches(fixture, row, request):
    model = request.getfixturevalue(fixture)
    batch = run_batch(model, make_indicator_characteristic(row), 12, 18, 2000, master_seed=20240101)
    report = verify_dichotomy(batch, options=OPTIONS)
    assert report.status == "PASS", report.to_dict()["verdicts"]


@pytest.mark.slow
def test_critical_growth_matches_exact_profile(s2, s2_spectral, s2_constants):
    batch = run_batch(s2, make_indicator_characteristic([1, -1]), 12, 12, 2000, master_seed=13)
    frame = critical_growth(batch, s2_constants, s2_spectral, s2, [8, 10, 12], draws=300)
    assert np.all(np.abs(frame["empirical"] - frame["exact"]) < 5 * frame["se"])


@pytest.mark.slow
def test_lln_at_depth(s1, s1_spectral):
    phi = make_indicator_characteristic([1])
    batch = run_batch(s1, phi, 20, 26, 400, master_seed=17)
    report = lln_check(batch, phi, s1_spectral)
    assert 0.95 <= report.median <= 1.05


@pytest.mark.slow
def test_jordan_block_growth_is_cubic(jordan, jordan_spectral):
    constants = compute_constants(make_indicator_characteristic([1, -1, 0]), jordan_spectral, jordan)
    assert constants.l_star == 1
    batch = run_batch(jordan, make_indicator_characteristic([1, -1, 0]), 12, 12, 2000, master_seed=19)
    frame = critical_growth(batch, constants, jordan_spectral, jordan, [8, 10, 12], draws=300)
    assert np.all(np.abs(frame["empirical"] - frame["exact"]) < 3 * frame["se"] + 1e-12)


@pytest.mark.slow
def test_verifier_passes_limit_law_samples(s1, s1_constants):
    # Ŵ empírico de S1 y T = sigma·sqrt(W)·G exactamente
    pool = np.array([r.w_hat for r in run_batch(s1, make_indicator_characteristic([1]), 6, 12, 500, master_seed=3).replicates])
    rng = np.random.default_rng(2718)
    trials, m = 400, 1000
    passed = 0
    for _ in range(trials):
        w = rng.choice(pool, size=m)
        t = math.sqrt(s1_constants.sigma2) * np.sqrt(w) * rng.normal(size=m)
        passed += verify_frame(synthetic_frame(t, w), s1_constants, OPTIONS).status == "PASS"
    assert passed / trials >= 0.95


@pytest.mark.slow
def test_ks_pvalue_is_calibrated():
    rng = np.random.default_rng(31415)
    pvalues = np.array([ks_test(rng.normal(size=10_000)).pvalue for _ in range(1000)])
    assert np.mean(pvalues > 0.001) >= 0.995
    # p-valores aproximadamente uniformes
    assert np.mean(pvalues < 0.5) == pytest.approx(0.5, abs=0.06)


@pytest.mark.slow
def test_ks_statistic_does_not_grow_with_n(s1):
    phi = make_indicator_characteristic([1])
    ns, statistics = [], []
    for n in (8, 10, 12, 14):
        for meta in range(10):
            batch = run_batch(s1, phi, n, n + 6, 500, master_seed=1000 * n + meta)
            ns.append(n)
            statistics.append(verify_dichotomy(batch, options=OPTIONS).ks.statistic)
    trend = linregress(ns, statistics)
    assert trend.slope <= 3 * trend.stderr
