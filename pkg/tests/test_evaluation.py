import csv
import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from vesseltraj.data.trajectory import NormStats
from vesseltraj.errors import ContractError
from vesseltraj.evaluation import (
    NMI,
    REPORT_SCHEMA,
    ade,
    ape,
    chi2_2dof,
    coverage,
    distance_binned_ape,
    evaluate_predictions,
    horizon_steps,
    mahalanobis_sq,
    ncv_baseline,
    write_bins_csv,
)


def arr(*rows):
    return np.asarray(rows, dtype=np.float64)


class TestApeAde:
    def test_exact(self):
        y = np.random.default_rng(0).normal(size=(4, 3, 2))
        assert ape(y, y, 2) == 0.0 and ade(y, y) == 0.0

    def test_three_four_five(self):
        assert ape(np.zeros((1, 1, 2)), np.array([[[3000.0, 4000.0]]]), 1) == 5000.0

    def test_average(self):
        pred = np.zeros((2, 1, 2))
        truth = np.array([[[2000.0, 0.0]], [[0.0, 4000.0]]])
        assert ape(pred, truth, 1) == 3000.0

    def test_ade_hand(self):
        assert ade(np.zeros((1, 2, 2)), np.array([[[1000.0, 0.0], [0.0, 3000.0]]])) == 2000.0

    def test_horizon_out_of_range(self):
        y = np.zeros((1, 3, 2))
        for k in (0, 4):
            with pytest.raises(ContractError):
                ape(y, y, k)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            ade(np.zeros((1, 3, 2)), np.zeros((1, 2, 2)))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), N=st.integers(1, 6), h=st.integers(1, 12))
    def test_ade_is_mean_of_apes(self, seed, N, h):
        rng = np.random.default_rng(seed)
        p, t = rng.normal(size=(N, h, 2)), rng.normal(size=(N, h, 2))
        apes = [ape(p, t, k) for k in range(1, h + 1)]
        assert ade(p, t) == pytest.approx(np.mean(apes), rel=1e-12)
        assert min(apes) - 1e-12 <= ade(p, t) <= max(apes) + 1e-12

    def test_invariant_to_normalization(self):
        rng = np.random.default_rng(3)
        truth = rng.normal(size=(5, 4, 2)) * 1e4 + 5e5
        pred = truth + rng.normal(size=truth.shape) * 300
        for s in (NormStats([5e5, 5e5], [1e4, 2e4]), NormStats([0, 1e6], [3.0, 7e3])):
            back = s.denormalize(s.normalize(pred)), s.denormalize(s.normalize(truth))
            assert ape(*back, 4) == pytest.approx(ape(pred, truth, 4), rel=1e-9)


class TestCoverage:
    def test_chi2_oracle(self):
        assert chi2_2dof(0.95) == pytest.approx(5.991465, abs=1e-6)
        for lv in (0.05, 0.5, 0.68, 0.95, 0.99):
            assert chi2_2dof(lv) == pytest.approx(sps.chi2.ppf(lv, 2), rel=1e-12)

    def test_truth_at_mean(self):
        m = np.random.default_rng(1).normal(size=(3, 2, 2))
        cov = np.broadcast_to(np.eye(2), (3, 2, 2, 2))
        for lv in (0.05, 0.68, 0.95):
            assert coverage(m, cov, m, lv) == (1.0, 0)

    def test_monte_carlo_calibrated(self):
        rng = np.random.default_rng(0)
        n = 100_000
        A = rng.normal(size=(n, 2, 2))
        cov = A @ np.swapaxes(A, 1, 2) + 0.1 * np.eye(2)
        mean = rng.normal(size=(n, 2)) * 10
        L = np.linalg.cholesky(cov)
        truth = mean + np.einsum("nij,nj->ni", L, rng.normal(size=(n, 2)))
        for lv in (0.68, 0.95):
            frac, bad = coverage(mean[:, None], cov[:, None], truth[:, None], lv)
            assert bad == 0 and abs(frac - lv) < 0.01

    def test_monotone_in_scale(self):
        rng = np.random.default_rng(2)
        mean, truth = rng.normal(size=(200, 3, 2)), rng.normal(size=(200, 3, 2)) * 2
        cov = np.broadcast_to(np.eye(2), (200, 3, 2, 2))
        for lv in (0.68, 0.95):
            assert coverage(mean, 4 * cov, truth, lv)[0] >= coverage(mean, cov, truth, lv)[0]

    def test_singular_excluded(self):
        mean = np.zeros((2, 1, 2))
        cov = np.array([[[[1.0, 0.0], [0.0, 0.0]]], [[[1.0, 0.0], [0.0, 1.0]]]])
        frac, bad = coverage(mean, cov, np.zeros((2, 1, 2)), 0.95)
        assert bad == 1 and frac == 1.0
        assert np.isnan(mahalanobis_sq(mean, cov, mean)[0, 0])

    def test_mahalanobis_matches_solve(self):
        rng = np.random.default_rng(4)
        A = rng.normal(size=(2, 2))
        cov = A @ A.T + np.eye(2)
        r = rng.normal(size=2)
        assert mahalanobis_sq(np.zeros(2), cov, r) == pytest.approx(r @ np.linalg.solve(cov, r), rel=1e-12)


class TestNcv:
    def test_constant_velocity(self):
        np.testing.assert_array_equal(ncv_baseline(arr([0, 0], [1, 0]), 3), arr([2, 0], [3, 0], [4, 0]))

    def test_stationary(self):
        x = np.tile([5.0, -2.0], (4, 1))
        np.testing.assert_array_equal(ncv_baseline(x, 6), np.tile([5.0, -2.0], (6, 1)))

    def test_exact_on_constant_speed_lines(self):
        t = np.arange(24)[:, None] * 900.0
        track = np.array([560000.0, 6.2e6]) + t * np.array([4.0, -3.0])
        pred = ncv_baseline(track[None, :12], 12, 900.0)
        for k in range(1, 13):
            assert ape(pred, track[None, 12:], k) < 1e-6

    def test_delta_cancels(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 2))
        np.testing.assert_allclose(ncv_baseline(x, 4, 900.0), ncv_baseline(x, 4, 1.0), rtol=1e-14)

    def test_needs_two_points(self):
        with pytest.raises(ContractError):
            ncv_baseline(np.zeros((1, 2)), 3)


class TestBins:
    def test_single_bin_equals_ape(self):
        rng = np.random.default_rng(0)
        p, t = rng.normal(size=(10, 4, 2)) * 100, rng.normal(size=(10, 4, 2)) * 100
        last = rng.uniform(0, 1000, size=(10, 2))
        (row,) = distance_binned_ape(p, t, last, (0.0, 0.0), bin_width=1e6)
        assert row.count == 10 and row.ape_m == pytest.approx(ape(p, t, 4), rel=1e-14)

    def test_empty_bins_and_csv(self, tmp_path):
        p = np.zeros((2, 1, 2))
        t = np.array([[[3.0, 4.0]], [[0.0, 1.0]]])
        last = np.array([[1.0 * NMI, 0.0], [16.0 * NMI, 0.0]])
        rows = distance_binned_ape(p, t, last, (0.0, 0.0))
        assert [r.count for r in rows] == [1, 0, 0, 1]
        assert rows[0].ape_m == 5.0 and math.isnan(rows[1].ape_m)
        path = tmp_path / "b.csv"
        write_bins_csv(path, rows)
        lines = list(csv.reader(path.open()))
        assert lines[0][:3] == ["lo_nmi", "hi_nmi", "count"] and len(lines) == 5
        assert lines[2][3] == ""


class TestReport:
    def test_horizon_steps(self):
        assert horizon_steps(900.0, 12) == {"1h": 4, "2h": 8, "3h": 12}
        assert horizon_steps(900.0, 6) == {"1h": 4}

    def test_schema_and_units(self):
        rng = np.random.default_rng(0)
        N, h = 20, 12
        truth = rng.normal(size=(N, h, 2)) * 5000 + 5e5
        mean = truth + rng.normal(size=truth.shape) * 800
        cov = np.broadcast_to(np.eye(2) * 800.0**2, (N, h, 2, 2))
        rep = evaluate_predictions(mean, cov, truth, truth[:, 0], (5e5, 5e5))
        doc = json.loads(rep.to_json())
        jsonschema.validate(doc, REPORT_SCHEMA)
        assert doc["n_windows"] == N and doc["coverage_pairs"] == N * h
        assert doc["ape_km"]["3h"] == pytest.approx(doc["ape_m"]["3h"] / 1000)
        assert doc["ape_nmi"]["1h"] == pytest.approx(doc["ape_m"]["1h"] / 1852)
        assert doc["ape_m"]["2h"] == pytest.approx(ape(mean, truth, 8))
        assert sum(b["count"] for b in doc["bins"]) == N
        assert 0.5 < doc["coverage"]["0.95"] <= 1.0

    def test_empty_report_valid(self):
        e = np.zeros((0, 12, 2))
        rep = evaluate_predictions(e, np.zeros((0, 12, 2, 2)), e, np.zeros((0, 2)), (0.0, 0.0))
        jsonschema.validate(json.loads(rep.to_json()), REPORT_SCHEMA)
