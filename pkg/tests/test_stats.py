import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sva.stats import (EstimatorReport, LogMoments, accumulate, bootstrap_ci, fit_decay_order, loglog_slope,
                       read_reports_csv, report, write_reports_csv, REPORT_COLUMNS)

finite = st.floats(-50, 50, allow_nan=False)


def test_two_zeros():
    m = accumulate(np.zeros(2))
    assert m.n == 2 and m.log_sum_w == pytest.approx(math.log(2)) and m.log_sum_2w == pytest.approx(math.log(2))


def test_negative_infinity_contributes_nothing():
    m = accumulate(np.array([1.5, -np.inf]))
    assert m.log_sum_w == 1.5 and m.log_sum_2w == 3.0 and m.max_w == 1.5


def test_large_log_values_do_not_overflow():
    w = np.array([1e4, 1e4 + math.log(3.0)])
    r = report(accumulate(w), epsilon=0.01)
    assert r.log_A_hat == pytest.approx(1e4 + math.log(2.0))
    # second moment (1 + 9)/2 over squared mean 4
    assert r.rho_hat == pytest.approx(1.25) and math.isfinite(r.Z_hat)


def test_lognormal_mean_within_three_standard_errors(rng):
    s = 0.5
    r = report(accumulate(rng.normal(0.0, s, 200_000)), epsilon=1.0)
    assert abs(r.log_A_hat - s * s / 2) <= 3 * r.se_log_A
    assert r.R_hat == pytest.approx(s * s, abs=0.01)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=1, max_size=40), st.lists(finite, min_size=1, max_size=40))
def test_merge_equals_concatenation(a, b):
    merged = accumulate(np.array(a)) + accumulate(np.array(b))
    whole = accumulate(np.array(a + b))
    assert merged.n == whole.n and merged.max_w == whole.max_w
    assert merged.log_sum_w == pytest.approx(whole.log_sum_w, rel=1e-12, abs=1e-12)
    assert merged.log_sum_2w == pytest.approx(whole.log_sum_2w, rel=1e-12, abs=1e-12)
    if merged.n >= 2:
        r1, r2 = report(merged, 0.5), report(whole, 0.5)
        assert r1.Z_hat == pytest.approx(r2.Z_hat, rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=2, max_size=60))
def test_self_normalised_ratio_at_least_one(w):
    r = report(accumulate(np.array(w)), 0.3)
    assert r.log_rho_hat >= -1e-12 and r.R_hat >= -1e-12


def test_merge_is_commutative_and_associative(rng):
    parts = [accumulate(rng.normal(size=k)) for k in (3, 10, 7)]
    a = (parts[0] + parts[1]) + parts[2]
    b = parts[2] + (parts[1] + parts[0])
    assert a.n == b.n
    assert a.log_sum_w == pytest.approx(b.log_sum_w, rel=1e-14)


def test_constant_samples_have_unit_ratio():
    r = report(accumulate(np.full(10, 3.7)), 0.2)
    assert r.rho_hat == pytest.approx(1.0, abs=1e-12) and r.R_hat == pytest.approx(0.0, abs=1e-12)
    assert bootstrap_ci(np.full(10, 3.7), 0.2) == (0.0, 0.0)


def test_accumulate_inputs():
    w = np.arange(6.0)
    ref = accumulate(w)
    chunks = accumulate([w[:2], w[2:5], w[5]])
    assert chunks.n == 6 and chunks.log_sum_w == pytest.approx(ref.log_sum_w, rel=1e-15)

    class S:
        def __init__(self, v):
            self.log_payoff = v
    assert accumulate(S(v) for v in w).log_sum_2w == pytest.approx(ref.log_sum_2w, rel=1e-15)
    with pytest.raises(ValueError):
        accumulate(np.array([]))
    with pytest.raises(ValueError):
        report(accumulate(np.array([1.0])), 0.5)


def test_reference_run_ratio(rng):
    w = rng.normal(0, 0.3, 1000)
    ref = accumulate(w + 0.1)
    r = report(accumulate(w), 0.5, reference=ref)
    own = report(accumulate(w), 0.5)
    assert r.log_rho_hat == pytest.approx(own.log_rho_hat - 0.2)


def test_bootstrap_interval(rng):
    w = rng.normal(0, 0.5, 2000)
    lo, hi = bootstrap_ci(w, 1.0, n_resample=300, seed=1)
    assert lo < report(accumulate(w), 1.0).R_hat < hi
    assert bootstrap_ci(w, 1.0, n_resample=300, seed=1) == (lo, hi)
    lo4, hi4 = bootstrap_ci(rng.normal(0, 0.5, 8000), 1.0, n_resample=300, seed=1)
    assert (hi4 - lo4) / (hi - lo) == pytest.approx(0.5, rel=0.3)
    with pytest.raises(ValueError):
        bootstrap_ci(w, 1.0, n_resample=50)


def test_bootstrap_coverage(rng):
    # log-normal weights: R = eps log(E e^{2w} / (E e^w)^2) = sigma^2 exactly for eps = 1
    s, hits, reps = 0.4, 0, 100
    for k in range(reps):
        lo, hi = bootstrap_ci(rng.normal(0, s, 1000), 1.0, n_resample=200, seed=k)
        hits += lo <= s * s <= hi
    assert 0.85 <= hits / reps <= 1.0


def test_decay_fit_recovers_power():
    eps = [0.5, 0.25, 0.125, 0.0625]
    fit = fit_decay_order([(e, 2 * e ** 3) for e in eps])
    assert fit.slope == pytest.approx(3.0, abs=1e-12) and fit.excluded == ()


def test_decay_fit_drops_nonpositive_points():
    eps = [0.5, 0.25, 0.125, 0.0625, 0.03125]
    pts = [(e, e ** 2) for e in eps[:4]] + [(eps[4], -1e-6)]
    fit = fit_decay_order(pts)
    assert fit.slope == pytest.approx(2.0) and fit.excluded == (0.03125,)


def test_decay_fit_needs_four_eps():
    with pytest.raises(ValueError, match="four"):
        fit_decay_order([(0.5, 1.0), (0.25, 0.5), (0.125, 0.25)])
    with pytest.raises(ValueError, match="too few"):
        fit_decay_order([(0.5, 1.0), (0.25, 0.0), (0.125, -1.0), (0.0625, 0.0)])


def test_decay_fit_filters_by_control():
    reps = [EstimatorReport(e, c, 0, 0, 1, R, 0, 10) for e in (0.5, 0.25, 0.125, 0.0625)
            for c, R in (("order1", e), ("order2", e * e))]
    assert fit_decay_order(reps, "order1").slope == pytest.approx(1.0)
    assert fit_decay_order(reps, "order2").slope == pytest.approx(2.0)


def test_two_point_slope():
    assert loglog_slope([1.0, 2.0], [3.0, 12.0]).slope == pytest.approx(2.0)


def test_report_csv_round_trip(tmp_path, rng):
    reps = [report(accumulate(rng.normal(size=50)), e, "order1", seed=3, ci=(0.1, 0.2)) for e in (0.5, 0.25)]
    p = tmp_path / "eff.csv"
    write_reports_csv(p, reps, comment="generated now")
    lines = p.read_text().splitlines()
    assert lines[0] == "# generated now" and lines[1] == ",".join(REPORT_COLUMNS)
    back = read_reports_csv(p)
    for a, b in zip(reps, back):
        assert (a.epsilon, a.control_kind, a.n, a.seed, a.Z_hat, a.R_hat, a.ci_R, a.rel_var) == \
               (b.epsilon, b.control_kind, b.n, b.seed, b.Z_hat, b.R_hat, b.ci_R, b.rel_var)
