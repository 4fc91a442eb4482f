"""Dataset ingestion, preprocessing and the synthetic slide generator."""

import hashlib
import math

import numpy as np
import pytest

from bgtriplex.data import (ExpressionMatrix, SpotRecord, context_window,
                            load_dataset, load_expression_matrix, load_spot_table,
                            log1p_normalize, save_dataset, select_top_k_genes,
                            synth_dataset, write_expression_matrix, write_spot_table)
from bgtriplex.errors import ParseError

SYNTH_COUNTS_SHA256 = "0f878f06ecb22ae9b77126447b72bff45edf5c39cf02afd213c608d46ccf65ea"


def grid_records(rows, cols):
    return [SpotRecord(f"s{r}x{c}", r, c, c * 10.0, r * 10.0)
            for r in range(rows) for c in range(cols)]


class TestSpotTable:
    def test_single_record(self, tmp_path):
        path = tmp_path / "spots.tsv"
        path.write_text("spot_id\tarray_row\tarray_col\tpx_x\tpx_y\nA\t0\t1\t5.5\t7.25\n")
        records = load_spot_table(path)
        assert records == [SpotRecord("A", 0, 1, 5.5, 7.25)]

    def test_duplicate_grid_names_both_lines(self, tmp_path):
        path = tmp_path / "spots.tsv"
        path.write_text("spot_id\tarray_row\tarray_col\tpx_x\tpx_y\n"
                        "A\t0\t0\t0\t0\nB\t1\t0\t0\t0\nC\t0\t0\t9\t9\n")
        with pytest.raises(ParseError, match=r"line 4.*line 2"):
            load_spot_table(path)

    def test_round_trip(self, tmp_path):
        records = grid_records(3, 3)
        path = tmp_path / "spots.tsv"
        write_spot_table(path, records)
        assert load_spot_table(path) == records

    def test_bad_header(self, tmp_path):
        path = tmp_path / "spots.tsv"
        path.write_text("spot\trow\tcol\tx\ty\n")
        with pytest.raises(ParseError, match="line 1"):
            load_spot_table(path)

    def test_non_integer_grid_index(self, tmp_path):
        path = tmp_path / "spots.tsv"
        path.write_text("spot_id\tarray_row\tarray_col\tpx_x\tpx_y\nA\t0.5\t1\t0\t0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_spot_table(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "spots.tsv"
        path.write_text("spot_id\tarray_row\tarray_col\tpx_x\tpx_y\nA\t0\t1\t0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_spot_table(path)


class TestExpressionMatrix:
    def test_single_cell(self, tmp_path):
        path = tmp_path / "expr.tsv"
        path.write_text("spot_id\tG1\nA\t5\n")
        expr = load_expression_matrix(path)
        assert expr.genes == ["G1"]
        np.testing.assert_array_equal(expr.values, [[5.0]])

    def test_negative_count_rejected(self, tmp_path):
        path = tmp_path / "expr.tsv"
        path.write_text("spot_id\tG1\nA\t-2\n")
        with pytest.raises(ParseError, match="line 2"):
            load_expression_matrix(path)

    def test_round_trip_and_join_order(self, tmp_path):
        rng = np.random.default_rng(11)
        genes = [f"G{j:02d}" for j in range(20)]
        values = np.floor(rng.uniform(0, 40, size=(9, 20)))
        ids = [f"s{i}" for i in range(9)]
        path = tmp_path / "expr.tsv"
        write_expression_matrix(path, ExpressionMatrix(genes, values), ids)
        back = load_expression_matrix(path, spot_ids=ids)
        np.testing.assert_array_equal(back.values, values)
        # join reorders rows to the spot table order
        shuffled = list(reversed(ids))
        reordered = load_expression_matrix(path, spot_ids=shuffled)
        np.testing.assert_array_equal(reordered.values, values[::-1])

    def test_unknown_spot_id(self, tmp_path):
        path = tmp_path / "expr.tsv"
        path.write_text("spot_id\tG1\nA\t1\nB\t2\n")
        with pytest.raises(ParseError, match="unknown spot_id"):
            load_expression_matrix(path, spot_ids=["A"])

    def test_missing_spot_row(self, tmp_path):
        path = tmp_path / "expr.tsv"
        path.write_text("spot_id\tG1\nA\t1\n")
        with pytest.raises(ParseError, match="no expression row"):
            load_expression_matrix(path, spot_ids=["A", "B"])

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "expr.tsv"
        path.write_text("spot_id\tG1\tG2\nA\t1\n")
        with pytest.raises(ParseError, match="line 2"):
            load_expression_matrix(path)


class TestLog1pNormalize:
    def test_zero_maps_to_zero_exactly(self):
        expr = ExpressionMatrix(["G"], np.array([[0.0]]))
        assert log1p_normalize(expr)[0, 0] == 0.0

    def test_e_minus_one_maps_to_one_exactly(self):
        expr = ExpressionMatrix(["G"], np.array([[math.e - 1.0]]))
        assert log1p_normalize(expr)[0, 0] == 1.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(11)
        counts = np.floor(rng.uniform(0, 500, size=(6, 9)))
        out = log1p_normalize(ExpressionMatrix([f"G{j}" for j in range(9)], counts))
        for i in range(6):
            for j in range(9):
                assert abs(out[i, j] - math.log(counts[i, j] + 1.0)) <= 1e-15

    def test_monotone_per_entry(self):
        counts = np.arange(0.0, 50.0)[:, None]
        out = log1p_normalize(ExpressionMatrix(["G"], counts))
        assert (np.diff(out[:, 0]) > 0).all()


class TestSelectTopK:
    def test_full_selection_sorted_descending(self):
        norm = np.array([[1.0, 3.0, 2.0], [1.0, 3.0, 2.0]])
        indices, names = select_top_k_genes(norm, ["a", "b", "c"], 3)
        assert names == ["b", "c", "a"]
        assert indices == [1, 2, 0]

    def test_tie_breaks_lexicographically(self):
        norm = np.array([[2.0, 2.0]])
        _, names = select_top_k_genes(norm, ["zz", "aa"], 1)
        assert names == ["aa"]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(200)
        norm = rng.uniform(0, 5, size=(9, 20))
        names = [f"G{j:02d}" for j in range(20)]
        indices, _ = select_top_k_genes(norm, names, 5)
        means = [(norm[:, j].sum() / 9, names[j], j) for j in range(20)]
        oracle = [j for _, _, j in sorted(means, key=lambda t: (-t[0], t[1]))][:5]
        assert indices == oracle

    def test_permutation_independent(self):
        rng = np.random.default_rng(77)
        norm = rng.uniform(0, 5, size=(6, 12))
        names = [f"G{j}" for j in range(12)]
        _, base = select_top_k_genes(norm, names, 4)
        perm = rng.permutation(12)
        _, shuffled = select_top_k_genes(norm[:, perm], [names[j] for j in perm], 4)
        assert base == shuffled

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            select_top_k_genes(np.ones((2, 3)), ["a", "b", "c"], 0)
        with pytest.raises(ValueError):
            select_top_k_genes(np.ones((2, 3)), ["a", "b", "c"], 4)


class TestContextWindow:
    def test_degenerate_window(self):
        spots = grid_records(2, 2)
        win = context_window(spots, 3, 1)
        assert win.member_indices == [[3]]
        assert win.mask.all()

    def test_corner_of_3x3(self):
        spots = grid_records(3, 3)
        win = context_window(spots, 0, 3)
        assert int(win.mask.sum()) == 4
        assert win.member_indices[1][1] == 0
        assert win.member_indices[1][2] == 1
        assert win.member_indices[2][1] == 3
        assert win.member_indices[2][2] == 4
        assert win.member_indices[0] == [None, None, None]

    def test_interior_of_5x5(self):
        spots = grid_records(5, 5)
        center = 12
        win = context_window(spots, center, 3)
        assert int(win.mask.sum()) == 9
        assert win.member_indices[1][1] == center

    def test_even_d_rejected(self):
        with pytest.raises(ValueError):
            context_window(grid_records(2, 2), 0, 2)

    def test_mask_count_exhaustive(self):
        for rows in range(1, 7):
            for cols in range(1, 7):
                spots = grid_records(rows, cols)
                for d in (1, 3, 5):
                    half = d // 2
                    for idx, spot in enumerate(spots):
                        win = context_window(spots, idx, d)
                        in_grid = sum(
                            1
                            for dr in range(-half, half + 1)
                            for dc in range(-half, half + 1)
                            if 0 <= spot.array_row + dr < rows and 0 <= spot.array_col + dc < cols
                        )
                        assert int(win.mask.sum()) == in_grid


class TestSynthDataset:
    def test_noiseless_counts_recover_linear_target(self):
        ds, weights = synth_dataset(4, 4, 8, 0.0, seed=3)
        pooled = np.array([b.pooled_vector() for b in ds.features])
        target = pooled @ weights
        err = np.abs(np.log1p(ds.expr.values) - target)
        bound = np.log1p(0.5 / np.maximum(1.0, ds.expr.values))
        assert (err <= bound + 1e-12).all()

    def test_same_seed_bit_identical(self):
        a, wa = synth_dataset(3, 4, 6, 0.1, seed=9)
        b, wb = synth_dataset(3, 4, 6, 0.1, seed=9)
        np.testing.assert_array_equal(a.expr.values, b.expr.values)
        np.testing.assert_array_equal(wa, wb)
        for ba, bb in zip(a.features, b.features):
            np.testing.assert_array_equal(ba.image_tokens, bb.image_tokens)

    def test_golden_checksum(self):
        ds, _ = synth_dataset(6, 6, 32, 0.05, seed=13)
        digest = hashlib.sha256(ds.expr.values.tobytes()).hexdigest()
        assert digest == SYNTH_COUNTS_SHA256

    def test_weights_shared_across_slides(self):
        _, wa = synth_dataset(3, 3, 6, 0.05, seed=5, slide_id="A")
        _, wb = synth_dataset(3, 3, 6, 0.05, seed=5, slide_id="B")
        np.testing.assert_array_equal(wa, wb)
        a, _ = synth_dataset(3, 3, 6, 0.05, seed=5, slide_id="A")
        b, _ = synth_dataset(3, 3, 6, 0.05, seed=5, slide_id="B")
        assert (a.expr.values != b.expr.values).any()

    def test_counts_are_nonnegative_integers(self):
        ds, _ = synth_dataset(4, 4, 10, 0.3, seed=2)
        assert (ds.expr.values >= 0).all()
        np.testing.assert_array_equal(ds.expr.values, np.round(ds.expr.values))


class TestManifestRoundTrip:
    def test_save_then_load(self, tmp_path):
        ds, _ = synth_dataset(3, 3, 6, 0.05, seed=21)
        manifest = save_dataset(ds, tmp_path / "slide")
        back = load_dataset(manifest)
        assert back.slide_id == ds.slide_id
        assert [s.spot_id for s in back.spots] == [s.spot_id for s in ds.spots]
        np.testing.assert_array_equal(back.expr.values, ds.expr.values)
        for ba, bb in zip(back.features, ds.features):
            np.testing.assert_array_equal(ba.image_tokens, bb.image_tokens)
            np.testing.assert_array_equal(ba.edge_tokens, bb.edge_tokens)
            np.testing.assert_array_equal(ba.nuclei_tokens, bb.nuclei_tokens)

    def test_toy_provider_matches_files(self, tmp_path):
        from bgtriplex.seeding import derive_seed

        ds, _ = synth_dataset(2, 2, 4, 0.05, seed=31, slide_id="t")
        toy = {"dataset_seed": derive_seed(31, "features", "t"), "grid_tokens": 4,
               "stream_dims": {"img": 10, "edge": 6, "nuc": 8}}
        manifest = save_dataset(ds, tmp_path / "slide", toy_meta=toy)
        from_files = load_dataset(manifest, provider="precomputed")
        from_toy = load_dataset(manifest, provider="toy")
        for ba, bb in zip(from_files.features, from_toy.features):
            np.testing.assert_array_equal(ba.image_tokens, bb.image_tokens)
