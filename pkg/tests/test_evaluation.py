"""Ensembling, agreement statistics, baselines, and report assembly."""

import math
from datetime import date, timedelta

import numpy as np
import pytest
from scipy import stats as sstats

from hvfcast.domain import RIGHT, mask_cells, valid_mask_array
from hvfcast.evaluation import (
    DegenerateDataError,
    EvaluationError,
    baseline_forecast,
    bland_altman,
    ensemble_predict,
    evaluate_testset,
    pearson_adj_r2,
    report_csv_rows,
)
from hvfcast.models import ModelSpec, build_model
from hvfcast.pipeline import FeatureCombo, FieldPair, bin_pairs, make_pairs, years_between
from hvfcast.synthsim import normative_surface

from conftest import make_field, make_series


def constant_model(value: float, in_channels: int = 1):
    """A model whose forward output is `value` everywhere."""
    m = build_model(ModelSpec(family="FullBN", depth_k=1, widths=(2, 3, 4), in_channels=in_channels))
    for _, p in m.params.items():
        p.data[...] = 0.0
    m.params["head.b"].data[...] = value
    return m


class TestEnsemble:
    def test_single_model_is_identity(self):
        m = constant_model(17.0)
        x = np.zeros((1, 1, 8, 9))
        forecast = ensemble_predict([m], x)
        np.testing.assert_array_equal(forecast.raw, m.forward(x).data[0, 0])
        assert forecast.n_models == 1

    def test_two_models_average(self):
        forecast = ensemble_predict([constant_model(20.0), constant_model(30.0)], np.zeros((1, 1, 8, 9)))
        np.testing.assert_allclose(forecast.raw, 25.0, atol=1e-12)

    def test_clamp_on_export_only(self):
        forecast = ensemble_predict([constant_model(-1.2)], np.zeros((1, 1, 8, 9)))
        np.testing.assert_allclose(forecast.raw, -1.2, atol=1e-12)
        exported = forecast.exported_values()
        assert all(v == 0.0 for v in exported.values())

    def test_exported_grid_zero_off_mask(self):
        forecast = ensemble_predict([constant_model(55.0)], np.zeros((1, 1, 8, 9)))
        grid = forecast.exported_grid()
        mask = valid_mask_array()
        assert np.all(grid[mask] == 50.0)
        assert np.all(grid[~mask] == 0.0)

    def test_order_invariant_bit_exact(self):
        rng = np.random.default_rng(1)
        ms = []
        for seed in (3, 4, 5):
            m = build_model(ModelSpec(family="FullBN", depth_k=1, widths=(2, 3, 4), seed=seed))
            m.forward(rng.normal(size=(4, 1, 8, 9)), mode="train")
            ms.append(m)
        x = rng.normal(size=(1, 1, 8, 9))
        a = ensemble_predict(ms, x).raw
        b = ensemble_predict(ms[::-1], x).raw
        c = ensemble_predict([ms[1], ms[2], ms[0]], x).raw
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)

    def test_spec_mismatch_rejected(self):
        a = constant_model(1.0)
        b = build_model(ModelSpec(family="FullBN", depth_k=2, widths=(2, 3, 4)))
        with pytest.raises(EvaluationError, match="disagree"):
            ensemble_predict([a, b], np.zeros((1, 1, 8, 9)))

    def test_no_models_rejected(self):
        with pytest.raises(EvaluationError):
            ensemble_predict([], np.zeros((1, 1, 8, 9)))


class TestPearson:
    def test_exact_line(self):
        r, adj, p = pearson_adj_r2([(x, 2 * x + 1) for x in range(5)])
        assert r == pytest.approx(1.0, abs=1e-12)
        assert p < 1e-20

    def test_hand_example(self):
        r, adj, p = pearson_adj_r2([(0, 0), (1, 2), (2, 1), (3, 3)])
        assert r == pytest.approx(0.8, abs=1e-10)
        assert adj == pytest.approx(1 - (1 - 0.64) * 3 / 2, abs=1e-10)
        ref = sstats.pearsonr([0, 1, 2, 3], [0, 2, 1, 3])
        assert r == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=40)
        y = 0.7 * x + rng.normal(size=40)
        r1, _, _ = pearson_adj_r2(list(zip(x, y)))
        r2, _, _ = pearson_adj_r2(list(zip(3.5 * x + 11.0, 0.25 * y - 4.0)))
        assert r1 == pytest.approx(r2, abs=1e-12)

    def test_large_n_adjustment_vanishes(self):
        # sample correlation forced to exactly 0.92 by construction
        n = 10_000
        rng = np.random.default_rng(3)
        x = rng.normal(size=n)
        z = rng.normal(size=n)
        xc = (x - x.mean()) / np.linalg.norm(x - x.mean())
        zc = z - z.mean()
        zc -= (zc @ xc) * xc
        zc /= np.linalg.norm(zc)
        r_target = 0.92
        y = r_target * xc + math.sqrt(1 - r_target**2) * zc
        r, adj, p = pearson_adj_r2(list(zip(x, y)))
        assert r == pytest.approx(0.92, abs=1e-9)
        assert adj == pytest.approx(0.92**2, abs=1e-4)  # (n-1)/(n-2) shift ~1.5e-5
        assert abs(adj - 0.84) < 0.01
        assert p < 2.2e-16

    def test_needs_three_points(self):
        with pytest.raises(EvaluationError, match="n >= 3"):
            pearson_adj_r2([(0, 0), (1, 1)])

    def test_zero_variance_degenerate(self):
        with pytest.raises(DegenerateDataError, match="degenerate"):
            pearson_adj_r2([(1, 0), (1, 1), (1, 2)])


class TestBlandAltman:
    def test_identical_series(self):
        assert bland_altman([(1.0, 1.0), (2.0, 2.0)]) == (0.0, 0.0, 0.0)

    def test_hand_example(self):
        mean, lo, hi = bland_altman([(1.0, 0.0), (3.0, 0.0)])
        assert mean == pytest.approx(2.0, abs=1e-12)
        assert lo == pytest.approx(2.0 - 1.96 * math.sqrt(2), abs=1e-10)
        assert hi == pytest.approx(2.0 + 1.96 * math.sqrt(2), abs=1e-10)

    def test_translation_shifts_mean_only(self):
        rng = np.random.default_rng(4)
        pairs = [(float(a), float(b)) for a, b in rng.normal(size=(20, 2))]
        mean0, lo0, hi0 = bland_altman(pairs)
        c = 1.7
        mean1, lo1, hi1 = bland_altman([(a + c, b) for a, b in pairs])
        assert mean1 == pytest.approx(mean0 + c, abs=1e-12)
        assert hi1 - lo1 == pytest.approx(hi0 - lo0, abs=1e-10)

    def test_needs_two_points(self):
        with pytest.raises(EvaluationError):
            bland_altman([(1.0, 1.0)])


class TestBaselines:
    def test_copy_returns_last_field(self):
        rng = np.random.default_rng(5)
        series = make_series(rng, "P1", RIGHT, [0.0, 1.0])
        pred = baseline_forecast("copy", series, 2.0)
        assert pred == series[-1].values

    def test_two_point_ols_hand_example(self):
        values_a = {c: 30.0 for c in mask_cells()}
        values_b = {c: 28.0 for c in mask_cells()}
        a = make_field(values=values_a, test_date=date(2015, 1, 1), test_index=1)
        b = make_field(values=values_b, test_date=date(2015, 1, 1) + timedelta(days=365), test_index=2)
        delta = years_between(a.test_date, b.test_date)  # ~1 year
        horizon = 2.0 * delta  # extrapolate to "year 3" on the same clock
        pred = baseline_forecast("pointwise_ols", [a, b], horizon)
        for c in mask_cells():
            assert pred[c] == pytest.approx(24.0, abs=1e-9)

    def test_ols_exact_on_linear_series(self):
        rng = np.random.default_rng(6)
        base = date(2014, 6, 1)
        slopes = {c: float(rng.uniform(-2.0, 0.0)) for c in mask_cells()}
        start = {c: float(rng.uniform(20.0, 33.0)) for c in mask_cells()}
        fields = []
        offsets = [0.0, 0.8, 1.7, 2.5, 3.9]
        for i, off in enumerate(offsets, start=1):
            d = base + timedelta(days=int(round(off * 365.25)))
            t = years_between(base, d)
            fields.append(
                make_field(
                    values={c: start[c] + slopes[c] * t for c in mask_cells()},
                    test_date=d,
                    test_index=i,
                )
            )
        horizon = 1.3
        pred = baseline_forecast("pointwise_ols", fields, horizon)
        t_target = years_between(base, fields[-1].test_date) + horizon
        for c in mask_cells():
            assert pred[c] == pytest.approx(start[c] + slopes[c] * t_target, abs=1e-9)

    def test_ols_matches_two_point_closed_form(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            v0 = {c: float(rng.uniform(5, 35)) for c in mask_cells()}
            v1 = {c: float(rng.uniform(5, 35)) for c in mask_cells()}
            d0 = date(2013, 3, 1)
            d1 = d0 + timedelta(days=int(rng.integers(200, 900)))
            a = make_field(values=v0, test_date=d0, test_index=1)
            b = make_field(values=v1, test_date=d1, test_index=2)
            horizon = float(rng.uniform(0.5, 3.0))
            pred = baseline_forecast("pointwise_ols", [a, b], horizon)
            dt = years_between(d0, d1)
            t_target = dt + horizon
            for c in list(mask_cells())[::11]:
                slope = (v1[c] - v0[c]) / dt
                expect = np.clip(v0[c] + slope * t_target, 0.0, 50.0)
                assert pred[c] == pytest.approx(expect, abs=1e-10)

    def test_exp_exact_on_exponential_series(self):
        base = date(2014, 6, 1)
        fields = []
        a0, k = 3.2, -0.3
        for i, off_days in enumerate([0, 400, 800, 1300], start=1):
            d = base + timedelta(days=off_days)
            t = years_between(base, d)
            value = math.exp(a0 + k * t) - 1.0
            fields.append(
                make_field(values={c: value for c in mask_cells()}, test_date=d, test_index=i)
            )
        pred = baseline_forecast("pointwise_exp", fields, 1.0)
        t_target = years_between(base, fields[-1].test_date) + 1.0
        expect = math.exp(a0 + k * t_target) - 1.0
        for c in mask_cells():
            assert pred[c] == pytest.approx(expect, abs=1e-9)

    def test_predictions_clamped(self):
        values_a = {c: 2.0 for c in mask_cells()}
        values_b = {c: 1.0 for c in mask_cells()}
        a = make_field(values=values_a, test_date=date(2015, 1, 1), test_index=1)
        b = make_field(values=values_b, test_date=date(2016, 1, 1), test_index=2)
        pred = baseline_forecast("pointwise_ols", [a, b], 10.0)
        assert all(v == 0.0 for v in pred.values())

    def test_insufficient_history_names_minimum(self):
        f = make_field(np.random.default_rng(8))
        with pytest.raises(EvaluationError, match="at least 2"):
            baseline_forecast("pointwise_ols", [f], 1.0)
        with pytest.raises(EvaluationError, match="at least 1"):
            baseline_forecast("copy", [], 1.0)

    def test_unknown_method(self):
        with pytest.raises(EvaluationError, match="unknown baseline"):
            baseline_forecast("kalman", [], 1.0)


class TestEvaluateTestset:
    def _two_pair_fixture(self):
        rng = np.random.default_rng(9)
        t1 = {c: 25.0 for c in mask_cells()}
        t2 = {c: 31.0 for c in mask_cells()}
        base = date(2015, 1, 1)
        pairs = []
        for pid, tvals in (("P1", t1), ("P2", t2)):
            f0 = make_field(rng, patient_id=pid, test_date=base, test_index=1)
            f1 = make_field(
                patient_id=pid,
                values=tvals,
                test_date=base + timedelta(days=365),
                test_index=2,
            )
            pairs.append(FieldPair(input=f0, target=f1, delta_years=years_between(base, f1.test_date)))
        return pairs

    def test_hand_computed_ensemble_mae(self):
        pairs = self._two_pair_fixture()
        models = [constant_model(20.0), constant_model(30.0)]  # ensemble -> 25
        report = evaluate_testset({1.0: models}, {1.0: pairs}, FeatureCombo(), n_bootstrap=50)
        # targets are constant 25 and 31 -> per-pair MAE 0 and 6, mean 3
        assert report.overall["mae"] == pytest.approx(3.0, abs=1e-12)
        assert report.overall["rmse"] == pytest.approx(math.sqrt((0 + 36) / 2), abs=1e-12)
        assert report.n_pairs == 2 and report.n_skipped == 0

    def test_perfect_forecast_zeroes_everything(self):
        pairs = self._two_pair_fixture()
        pairs = [pairs[0]]
        models = [constant_model(25.0)]
        report = evaluate_testset({1.0: models}, {1.0: pairs + pairs}, FeatureCombo(), n_bootstrap=50)
        assert report.overall["mae"] == 0.0
        assert report.overall["rmse"] == 0.0
        assert report.bland_altman["mean_difference"] == pytest.approx(0.0, abs=1e-12)

    def test_skipped_pairs_counted(self):
        pairs = self._two_pair_fixture()
        far = [FieldPair(input=p.input, target=p.target, delta_years=3.0) for p in pairs]
        report = evaluate_testset(
            {1.0: [constant_model(25.0)]},
            {1.0: pairs, 3.0: far},
            FeatureCombo(),
            n_bootstrap=50,
        )
        assert report.n_skipped == 2
        by_bin = {e["bin"]: e for e in report.per_bin}
        assert by_bin[3.0]["n_skipped"] == 2

    def test_bootstrap_deterministic_and_contains_point(self):
        pairs = self._two_pair_fixture()
        models = [constant_model(22.0)]
        r1 = evaluate_testset({1.0: models}, {1.0: pairs}, FeatureCombo(), bootstrap_seed=5, n_bootstrap=200)
        r2 = evaluate_testset({1.0: models}, {1.0: pairs}, FeatureCombo(), bootstrap_seed=5, n_bootstrap=200)
        assert r1.overall == r2.overall
        lo, hi = r1.overall["mae_ci"]
        assert lo <= r1.overall["mae"] <= hi
        assert r1.overall["rmse"] >= r1.overall["mae"]

    def test_copy_baseline_rows(self, small_cohort):
        _, fields, _ = small_cohort
        binned, _ = bin_pairs(make_pairs(fields))
        test_binned = {1.0: binned[1.0][:6]}
        report = evaluate_testset(
            {1.0: [constant_model(25.0)]},
            test_binned,
            FeatureCombo(),
            fields=fields,
            n_bootstrap=50,
        )
        rows = {r["method"]: r for r in report.baselines}
        assert rows["copy"]["n_pairs"] == 6
        assert rows["copy"]["mae"] is not None
        assert rows["copy"]["rmse"] >= rows["copy"]["mae"]
        # least-squares rows only use pairs whose input has >= 2 earlier tests
        assert rows["pointwise_ols"]["n_pairs"] <= 6

    def test_csv_rows_cover_all_tables(self):
        pairs = self._two_pair_fixture()
        report = evaluate_testset({1.0: [constant_model(24.0)]}, {1.0: pairs}, FeatureCombo(), n_bootstrap=50)
        rows = report_csv_rows(report)
        tables = {r[0] for r in rows[1:]}
        assert tables == {"md_scatter", "bland_altman", "bin_mae"}

    def test_no_models_anywhere_errors(self):
        pairs = self._two_pair_fixture()
        with pytest.raises(EvaluationError, match="no test pairs"):
            evaluate_testset({}, {1.0: pairs}, FeatureCombo(), n_bootstrap=10)
