"""Metric contracts checked against textbook scalar-loop oracles."""

import math

import numpy as np
import pytest
from conftest import checksum

from bgtriplex.data import synth_dataset
from bgtriplex.errors import ShapeError, UndefinedMetricError
from bgtriplex.metrics import (evaluate_predictions, export_prediction_map,
                               mse_metric, pcc_h, pcc_m, pcc_per_gene,
                               rank_predictive_genes)

EXPORT_PGM_GOLDEN = "d23be3c4b74a8792"


def mse_oracle(pred, truth):
    total = 0.0
    n, k = pred.shape
    for i in range(n):
        for j in range(k):
            total += (pred[i][j] - truth[i][j]) ** 2
    return total / (n * k)


def pcc_oracle(x, y):
    """Two-pass covariance Pearson correlation of two vectors."""
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((x[i] - mx) * (y[i] - my) for i in range(n))
    vx = sum((x[i] - mx) ** 2 for i in range(n))
    vy = sum((y[i] - my) ** 2 for i in range(n))
    return cov / math.sqrt(vx * vy)


class TestMse:
    def test_equal_is_zero(self):
        x = np.arange(12.0).reshape(3, 4)
        assert mse_metric(x, x) == 0.0

    def test_constant_offset(self):
        x = np.zeros((3, 4))
        assert mse_metric(x + 2.0, x) == 4.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(55)
        pred = rng.normal(size=(5, 7))
        truth = rng.normal(size=(5, 7))
        assert abs(mse_metric(pred, truth) - mse_oracle(pred, truth)) <= 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_metric(np.ones((2, 3)), np.ones((3, 2)))

    def test_consistent_with_fused_loss(self):
        from bgtriplex.training import loss_fused

        rng = np.random.default_rng(56)
        pred = rng.normal(size=(6, 4))
        truth = rng.normal(size=(6, 4))
        per_spot = np.mean([loss_fused(pred[i:i + 1], truth[i:i + 1]).item()
                            for i in range(6)])
        assert abs(mse_metric(pred, truth) - per_spot) <= 1e-14


class TestPccPerGene:
    def test_perfect_correlation(self):
        rng = np.random.default_rng(60)
        truth = rng.normal(size=(10, 4))
        np.testing.assert_allclose(pcc_per_gene(truth, truth), 1.0, atol=1e-12)

    def test_exact_anticorrelation(self):
        rng = np.random.default_rng(61)
        truth = rng.normal(size=(10, 4))
        mean = truth.mean(axis=0, keepdims=True)
        flipped = -(truth - mean) + mean
        np.testing.assert_allclose(pcc_per_gene(flipped, truth), -1.0, atol=1e-12)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(62)
        pred = rng.normal(size=(20, 6))
        truth = rng.normal(size=(20, 6))
        got = pcc_per_gene(pred, truth)
        for j in range(6):
            expected = pcc_oracle(list(pred[:, j]), list(truth[:, j]))
            assert abs(got[j] - expected) <= 1e-12

    def test_affine_invariance(self):
        rng = np.random.default_rng(63)
        pred = rng.normal(size=(15, 5))
        truth = rng.normal(size=(15, 5))
        base = pcc_per_gene(pred, truth)
        scaled = pcc_per_gene(3.7 * pred + 11.0, truth)
        np.testing.assert_allclose(scaled, base, rtol=0, atol=1e-12)
        negated = pcc_per_gene(-2.0 * pred + 1.0, truth)
        np.testing.assert_allclose(negated, -base, rtol=0, atol=1e-12)

    def test_constant_column_is_undefined(self):
        pred = np.array([[1.0, 1.0], [1.0, 2.0], [1.0, 3.0]])
        truth = np.array([[0.0, 3.0], [1.0, 2.0], [2.0, 1.0]])
        out = pcc_per_gene(pred, truth)
        assert np.isnan(out[0])
        assert np.isfinite(out[1])

    def test_needs_two_spots(self):
        with pytest.raises(ValueError):
            pcc_per_gene(np.ones((1, 3)), np.ones((1, 3)))


class TestPccAverages:
    def test_all_ones(self):
        vec = np.ones(6)
        assert pcc_m(vec) == 1.0
        assert pcc_h(vec, [0, 1, 2]) == 1.0

    def test_half_and_half(self):
        vec = np.array([1.0, -1.0, 1.0, -1.0])
        assert pcc_m(vec) == 0.0

    def test_undefined_entries_excluded(self):
        vec = np.array([1.0, np.nan, 0.0])
        assert pcc_m(vec) == 0.5

    def test_empty_defined_set_raises(self):
        with pytest.raises(UndefinedMetricError):
            pcc_m(np.array([np.nan, np.nan]))
        with pytest.raises(UndefinedMetricError):
            pcc_h(np.array([1.0, np.nan]), [1])


class TestRankPredictiveGenes:
    def test_full_ranking(self):
        vec = np.array([0.1, 0.9, 0.5])
        names = ["a", "b", "c"]
        assert rank_predictive_genes(vec, names, n=3) == [1, 2, 0]

    def test_tie_breaks_by_name(self):
        vec = np.array([0.5, 0.5])
        assert rank_predictive_genes(vec, ["zz", "aa"], n=1) == [1]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(70)
        vec = rng.uniform(-1, 1, size=30)
        names = [f"G{j:02d}" for j in range(30)]
        got = rank_predictive_genes(vec, names, n=10)
        oracle = sorted(range(30), key=lambda j: (-vec[j], names[j]))[:10]
        assert got == oracle

    def test_n_too_large(self):
        with pytest.raises(ValueError):
            rank_predictive_genes(np.array([0.5, np.nan]), ["a", "b"], n=2)

    def test_order_independent_of_input_permutation(self):
        rng = np.random.default_rng(71)
        vec = rng.uniform(-1, 1, size=12)
        names = [f"G{j}" for j in range(12)]
        base = {names[i] for i in rank_predictive_genes(vec, names, n=5)}
        perm = rng.permutation(12)
        permuted = {names[perm[i]] for i in
                    rank_predictive_genes(vec[perm], [names[j] for j in perm], n=5)}
        assert base == permuted


class TestEvaluatePredictions:
    def test_selector_switch(self):
        rng = np.random.default_rng(80)
        truth = rng.normal(size=(12, 6)) + 5.0
        pred = truth + rng.normal(scale=0.5, size=(12, 6))
        names = [f"G{j}" for j in range(6)]
        predictive = evaluate_predictions(pred, truth, names, n_top=2, selector="predictive")
        expressed = evaluate_predictions(pred, truth, names, n_top=2, selector="expressed")
        vec = pcc_per_gene(pred, truth)
        assert predictive.top_gene_indices == rank_predictive_genes(vec, names, n=2)
        means = truth.mean(axis=0)
        assert expressed.top_gene_indices == sorted(range(6), key=lambda j: (-means[j], names[j]))[:2]

    def test_json_round_trip_handles_undefined(self):
        pred = np.array([[1.0, 0.5], [1.0, 0.7], [1.0, 0.1]])
        truth = np.array([[0.1, 0.5], [0.5, 0.9], [0.9, 0.2]])
        report = evaluate_predictions(pred, truth, ["const", "ok"], n_top=1)
        doc = report.to_json_dict()
        assert doc["pcc_per_gene"][0] is None
        assert doc["excluded_genes"] == 1
        assert doc["top_genes"] == ["ok"]


class TestExportPredictionMap:
    def test_constant_values_single_gray_level(self, tmp_path):
        ds, _ = synth_dataset(2, 3, 4, 0.0, seed=5)
        export_prediction_map(ds, np.full(6, 2.5), tmp_path / "m.csv", tmp_path / "m.pgm")
        blob = (tmp_path / "m.pgm").read_bytes()
        header, pixels = blob.split(b"255\n", 1)
        assert header == b"P5\n3 2\n"
        assert set(pixels) == {255}

    def test_min_max_quantization(self, tmp_path):
        ds, _ = synth_dataset(2, 2, 4, 0.0, seed=5)
        values = np.array([0.0, 1 / 3, 2 / 3, 1.0])
        export_prediction_map(ds, values, tmp_path / "m.csv", tmp_path / "m.pgm")
        pixels = (tmp_path / "m.pgm").read_bytes().split(b"255\n", 1)[1]
        assert list(pixels) == [0, 85, 170, 255]

    def test_csv_layout(self, tmp_path):
        ds, _ = synth_dataset(1, 2, 4, 0.0, seed=5)
        export_prediction_map(ds, np.array([1.5, -2.0]), tmp_path / "m.csv", tmp_path / "m.pgm")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "spot_id,px_x,px_y,value"
        assert lines[1] == "s0x0,50.0,50.0,1.5"
        assert lines[2] == "s0x1,150.0,50.0,-2.0"

    def test_golden_bytes(self, tmp_path):
        ds, _ = synth_dataset(3, 3, 4, 0.05, seed=23)
        values = np.log1p(ds.expr.values[:, 0])
        export_prediction_map(ds, values, tmp_path / "m.csv", tmp_path / "m.pgm")
        digest = checksum(np.frombuffer((tmp_path / "m.pgm").read_bytes(), dtype=np.uint8))
        assert digest == EXPORT_PGM_GOLDEN
