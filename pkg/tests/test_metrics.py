import math

import hypothesis.strategies as st
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings

from pipeline.Metrics import (
    ComparisonRow,
    ExclusionLedger,
    coverage,
    exclusion_accounting,
    log_rel_abs_bias,
    log_rel_length,
    mean_ratio,
    metric_frame,
    prob_best,
    proportion_with_ci,
    rank_draws,
    regress_metric,
    relative_length_curve,
    sucra,
)
from pipeline.errors import ConsistencyError, DomainError, NumericalError


def row(mu=0.0, est_m=0.2, est_u=0.1, ci_m=(-0.42, 0.42), ci_u=(-0.5, 0.5), meta_id="m1", variate_id="v01",
        n_estimates=10, n_variates=5):
    return ComparisonRow(meta_id, variate_id, mu, est_m, est_u, ci_m, ci_u, n_estimates, n_variates)


def _planted_frame(n_clusters=40, rows_per_cluster=3, noise=0.01, seed=0):
    rng = np.random.Generator(np.random.Philox(seed))
    records = []
    for c in range(n_clusters):
        n_estimates = int(rng.integers(10, 80))
        n_variates = int(rng.integers(5, 25))
        for k in range(rows_per_cluster):
            records.append({
                "meta_id": f"rep_{c:04d}",
                "variate_id": f"v{k:02d}",
                "n_estimates": n_estimates,
                "n_variates": n_variates,
                "log_rel_length": 0.5 - 0.02 * n_estimates + 0.01 * n_variates + rng.normal(0, noise),
                "log_rel_bias": rng.normal(0, 0.3),
            })
    return pd.DataFrame(records)


def test_coverage_of_four_rows():
    rows = [row(mu=0.0), row(mu=0.3), row(mu=-0.4), row(mu=0.45)]
    result = coverage(rows, "m")
    assert (result.covered, result.total) == (3, 4)
    assert result.proportion == 0.75
    assert result.ci_low == pytest.approx(0.3006, abs=1e-3)
    assert result.ci_high == pytest.approx(0.9544, abs=1e-3)
    assert coverage(rows, "u").proportion == 1.0


def test_coverage_needs_rows_and_side():
    with pytest.raises(DomainError):
        coverage([], "m")
    with pytest.raises(DomainError):
        coverage([row()], "x")


def test_interval_endpoints_count_as_covered():
    assert coverage([row(mu=0.42)], "m").covered == 1


def test_coverage_unchanged_by_monotone_transform():
    rng = np.random.Generator(np.random.Philox(5))
    rows, squashed = [], []
    for k in range(200):
        mu = float(rng.uniform(-1.5, 1.5))
        centre_m, centre_u = rng.normal(mu, 0.3, size=2)
        half_m, half_u = rng.uniform(0.05, 0.6, size=2)
        ci_m = (centre_m - half_m, centre_m + half_m)
        ci_u = (centre_u - half_u, centre_u + half_u)
        rows.append(row(mu=mu, est_m=centre_m, est_u=centre_u, ci_m=ci_m, ci_u=ci_u, variate_id=f"v{k}"))
        squashed.append(row(mu=math.tanh(mu), est_m=math.tanh(centre_m), est_u=math.tanh(centre_u),
                            ci_m=tuple(np.tanh(ci_m)), ci_u=tuple(np.tanh(ci_u)), variate_id=f"v{k}"))
    for side in ("m", "u"):
        assert coverage(squashed, side).covered == coverage(rows, side).covered


def test_proportion_with_ci_extremes():
    none = proportion_with_ci(0, 20)
    assert none.ci_low == pytest.approx(0.0, abs=1e-12) and none.ci_high > 0
    every = proportion_with_ci(20, 20)
    assert every.ci_high == pytest.approx(1.0) and every.ci_low < 1


def test_log_relative_metrics():
    assert log_rel_abs_bias(row()) == pytest.approx(math.log(2.0))
    assert log_rel_length(row()) == pytest.approx(math.log(0.84))


def test_log_relative_metrics_exclusions():
    assert log_rel_abs_bias(row(mu=0.1)) is None
    assert log_rel_abs_bias(row(mu=0.2)) is None
    assert log_rel_length(row(ci_u=(0.1, 0.1))) is None


def test_log_rel_length_is_antisymmetric():
    forward = row(est_m=0.2, est_u=0.1, ci_m=(-0.3, 0.5), ci_u=(-0.6, 0.7))
    swapped = row(est_m=0.1, est_u=0.2, ci_m=(-0.6, 0.7), ci_u=(-0.3, 0.5))
    assert log_rel_length(swapped) == pytest.approx(-log_rel_length(forward))


def test_comparison_row_rejects_reversed_interval():
    with pytest.raises(ConsistencyError):
        row(ci_m=(0.5, -0.5))


def test_metric_frame_sorts_and_flags():
    frame = metric_frame([
        row(meta_id="m2", variate_id="v01"),
        row(meta_id="m1", variate_id="v02", mu=0.1),
        row(meta_id="m1", variate_id="v01"),
    ])
    assert list(zip(frame["meta_id"], frame["variate_id"])) == [("m1", "v01"), ("m1", "v02"), ("m2", "v01")]
    assert list(frame["bias_excluded"]) == [False, True, False]
    assert frame["log_rel_bias"].isna().sum() == 1
    assert frame["covered_m"].all()


def test_mean_ratio_of_constant_log_metric():
    result = mean_ratio([math.log(2.0)] * 6, ["a", "a", "b", "b", "c", "c"], n_boot=50)
    assert result["estimate"] == pytest.approx(2.0)
    assert result["ci_low"] == pytest.approx(2.0)
    assert result["ci_high"] == pytest.approx(2.0)
    assert result["n"] == 6


def test_mean_ratio_interval_brackets_estimate():
    rng = np.random.Generator(np.random.Philox(4))
    values = rng.normal(-0.2, 0.3, size=120)
    clusters = np.repeat(np.arange(40), 3)
    result = mean_ratio(values, clusters, n_boot=300, seed=1)
    assert result["ci_low"] < result["estimate"] < result["ci_high"]


def test_regression_recovers_planted_slopes():
    result = regress_metric(_planted_frame(), "length", n_boot=200, seed=3)
    coef = result.coefficients.set_index("term")
    assert coef.loc["n_estimates", "estimate"] == pytest.approx(-0.02, abs=1e-3)
    assert coef.loc["n_variates", "estimate"] == pytest.approx(0.01, abs=2e-3)
    low, high = coef.loc["n_estimates", "ci_low"], coef.loc["n_estimates", "ci_high"]
    assert low < coef.loc["n_estimates", "estimate"] < high
    assert high - low < 1e-3
    assert coef.loc["n_estimates", "exp_per_10"] == pytest.approx(math.exp(-0.2), rel=0.02)
    assert (result.n_rows, result.n_clusters, result.n_boot_used) == (120, 40, 200)


def test_regression_handles_single_row_clusters():
    result = regress_metric(_planted_frame(rows_per_cluster=1), "bias", n_boot=100)
    assert result.n_clusters == 40
    assert result.to_dict()["response"] == "log_rel_bias"


def test_regression_drops_excluded_rows():
    frame = _planted_frame()
    frame.loc[0, "log_rel_length"] = np.nan
    assert regress_metric(frame, "length", n_boot=50).n_rows == 119


def test_regression_needs_enough_clusters():
    with pytest.raises(DomainError):
        regress_metric(_planted_frame(n_clusters=29), "length", n_boot=10)
    with pytest.raises(DomainError):
        regress_metric(_planted_frame(), "coverage", n_boot=10)


def test_regression_rejects_constant_predictor():
    frame = _planted_frame()
    frame["n_variates"] = 7
    with pytest.raises(NumericalError):
        regress_metric(frame, "length", n_boot=10)


def test_relative_length_curve_follows_slope():
    result = regress_metric(_planted_frame(), "length", n_boot=200, seed=5)
    curve = relative_length_curve(result, "n_estimates", [10, 20, 30])
    assert list(curve.columns) == ["predictor", "value", "estimate", "band_low", "band_high"]
    assert curve["estimate"].is_monotonic_decreasing
    assert curve["estimate"].iloc[1] / curve["estimate"].iloc[0] == pytest.approx(math.exp(-0.2), rel=0.02)
    assert (curve["band_low"] <= curve["band_high"]).all()
    with pytest.raises(DomainError):
        relative_length_curve(result, "n_studies", [1.0])


def test_rank_draws_by_magnitude():
    ranks = rank_draws(np.array([[0.1, -0.5, 0.3], [0.9, 0.0, -0.2]]))
    np.testing.assert_array_equal(ranks, [[3, 1, 2], [1, 3, 2]])
    np.testing.assert_allclose(prob_best(ranks), [0.5, 0.5, 0.0])
    np.testing.assert_allclose(sucra(ranks), [0.5, 0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=1, max_value=30),
       st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_sucra_sums_to_half_p(p, draws, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    ranks = np.array([rng.permutation(p) + 1 for _ in range(draws)])
    scores = sucra(ranks)
    assert scores.sum() == pytest.approx(p / 2)
    assert np.all((scores >= 0) & (scores <= 1))


def test_sucra_rejects_invalid_ranks():
    with pytest.raises(ConsistencyError):
        sucra(np.array([[1], [1]]))
    with pytest.raises(ConsistencyError):
        sucra(np.array([[1, 1, 3]]))


def test_exclusion_accounting_adds_up():
    frame = metric_frame([row(meta_id="m1"), row(meta_id="m1", variate_id="v02", mu=0.1),
                          row(meta_id="m3", ci_u=(0.1, 0.1))])
    ledger = exclusion_accounting(["m1", "m2", "m3", "m4"], missing=["m2"], nonconverged=["m4"],
                                  univariate_unusable=[], pairs_total=4, pairs_zero_width=1, frame=frame)
    assert ledger.replicates_analysed == 2
    assert (ledger.pairs_analysed, ledger.pairs_zero_width) == (3, 1)
    assert (ledger.bias_excluded, ledger.length_excluded) == (1, 1)
    usability = ledger.usability()
    assert usability["multivariate"]["proportion"] == 0.5
    assert usability["univariate"]["proportion"] == 0.75
    assert ledger.to_dict()["replicates_missing"] == ["m2"]


def test_ledger_check_catches_mismatch():
    with pytest.raises(ConsistencyError):
        ExclusionLedger(pairs_total=5, pairs_analysed=3, pairs_zero_width=1).check()


def test_exclusion_accounting_rejects_unexplained_pairs():
    frame = metric_frame([row(meta_id="m1"), row(meta_id="m1", variate_id="v02")])
    with pytest.raises(ConsistencyError):
        exclusion_accounting(["m1"], missing=[], nonconverged=[], univariate_unusable=[],
                             pairs_total=4, pairs_zero_width=1, frame=frame)
