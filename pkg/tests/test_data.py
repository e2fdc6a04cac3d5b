"""Dataset loading, blob generation, partitioners, k-shot sampling."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.data import (
    DataError,
    Dataset,
    Shard,
    gen_blobs,
    label_histogram,
    load_csv,
    partition_dirichlet,
    partition_iid,
    partition_label_shards,
    sample_kshot,
    save_csv,
    split_public_private,
    stratified_split,
)
from fedsim.models import Logistic, init_params, predict, sgd_epoch


def assert_disjoint_cover(shards, universe):
    seen = []
    for shard in shards:
        seen.extend(shard.indices.tolist())
    assert len(seen) == len(set(seen)), "shards overlap"
    assert set(seen) == set(universe.tolist()), "shards do not cover the input"


class TestLoadCsv:
    def test_sorted_dense_label_mapping(self, tmp_path):
        path = tmp_path / "tiny.csv"
        path.write_text("x0,x1,label\n1.0,2.0,a\n3.0,4.0,b\n5.0,6.0,a\n")
        ds = load_csv(str(path), "label")
        assert ds.classes == 2
        assert ds.labels.tolist() == [0, 1, 0]
        assert ds.features.tolist() == [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,x1,label\n1.0,2.0,a\n1.0,oops,b\n")
        with pytest.raises(DataError, match=r"row 3, column 'x1'"):
            load_csv(str(path), "label")

    def test_missing_file_and_column_and_empty_body(self, tmp_path):
        with pytest.raises(DataError, match="cannot open"):
            load_csv(str(tmp_path / "absent.csv"), "label")
        path = tmp_path / "nolabel.csv"
        path.write_text("x0,x1\n1,2\n")
        with pytest.raises(DataError, match="label column 'label'"):
            load_csv(str(path), "label")
        path2 = tmp_path / "headeronly.csv"
        path2.write_text("x0,label\n")
        with pytest.raises(DataError, match="no data rows"):
            load_csv(str(path2), "label")

    def test_round_trip(self, tmp_path):
        ds = gen_blobs(classes=12, per_class=5, d=3, separation=2.0,
                       noise_sd=0.3, seed=1)
        path = tmp_path / "round.csv"
        save_csv(ds, str(path))
        back = load_csv(str(path), "label")
        assert back.classes == ds.classes
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.features, ds.features)


class TestGenBlobs:
    def test_zero_noise_collapses_to_centers(self):
        ds = gen_blobs(classes=3, per_class=4, d=5, separation=2.0,
                       noise_sd=0.0, seed=0)
        for c in range(3):
            rows = ds.features[ds.labels == c]
            assert np.all(rows == rows[0])
            assert np.linalg.norm(rows[0]) == pytest.approx(2.0)

    def test_deterministic_in_seed(self):
        a = gen_blobs(4, 10, 8, 10.0, 0.5, seed=3)
        b = gen_blobs(4, 10, 8, 10.0, 0.5, seed=3)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        c = gen_blobs(4, 10, 8, 10.0, 0.5, seed=4)
        assert not np.array_equal(a.features, c.features)

    def test_wide_margin_blobs_are_learnable(self):
        ds = gen_blobs(classes=4, per_class=40, d=8, separation=10.0,
                       noise_sd=0.5, seed=2)
        spec = Logistic(d=8, classes=4)
        w = init_params(spec, 0)
        batch = ds.full_shard().batch()
        for epoch in range(60):
            w = sgd_epoch(spec, w, batch, lr=0.5, batch_size=len(batch), seed=epoch)
        hits = sum(
            predict(spec, w, ds.features[i]) == ds.labels[i]
            for i in range(ds.n_rows)
        )
        assert hits / ds.n_rows >= 0.99


class TestSplitPublicPrivate:
    def test_two_disjoint_covering_shards(self):
        ds = gen_blobs(2, 20, 3, 3.0, 0.5, seed=0)
        plan = split_public_private(ds, 1, "iid", seed=9)
        assert_disjoint_cover(
            [plan.public, *plan.private], np.arange(ds.n_rows)
        )

    def test_equal_sizing_c10_1100_rows(self):
        ds = gen_blobs(classes=2, per_class=550, d=2, separation=3.0,
                       noise_sd=0.5, seed=1)
        plan = split_public_private(ds, 10, "iid", seed=4)
        assert len(plan.public) == 100
        assert [len(s) for s in plan.private] == [100] * 10

    def test_public_shard_is_stratified(self):
        ds = gen_blobs(classes=4, per_class=250, d=4, separation=3.0,
                       noise_sd=0.5, seed=2)
        plan = split_public_private(ds, 4, "dirichlet", seed=5, alpha=0.3)
        hist = label_histogram(plan.public)
        assert hist.sum() == len(plan.public)
        assert np.all(np.abs(hist - hist.mean()) <= 1)

    def test_infeasible_split_rejected(self):
        ds = gen_blobs(2, 2, 2, 3.0, 0.5, seed=0)
        with pytest.raises(DataError):
            split_public_private(ds, 5, "iid", seed=0)

    @settings(deadline=None, max_examples=25)
    @given(
        clients=st.integers(1, 8),
        scheme=st.sampled_from(["iid", "label_shard", "dirichlet"]),
        seed=st.integers(0, 10_000),
    )
    def test_disjointness_and_coverage_always(self, clients, scheme, seed):
        ds = gen_blobs(classes=3, per_class=40, d=2, separation=3.0,
                       noise_sd=0.5, seed=7)
        kwargs = {"shards_per_part": 1} if scheme == "label_shard" else {}
        plan = split_public_private(ds, clients, scheme, seed=seed, **kwargs)
        assert_disjoint_cover([plan.public, *plan.private], np.arange(ds.n_rows))
        assert all(len(s) >= 1 for s in plan.private)


class TestPartitionIid:
    def test_single_part_identity(self):
        ds = gen_blobs(2, 10, 2, 3.0, 0.5, seed=0)
        parts = partition_iid(ds, 1, seed=0)
        assert len(parts) == 1
        assert np.array_equal(parts[0].indices, np.arange(ds.n_rows))

    def test_sizes_differ_by_at_most_one(self):
        ds = gen_blobs(2, 5, 2, 3.0, 0.5, seed=0)
        sizes = sorted(len(s) for s in partition_iid(ds, 3, seed=1))
        assert sizes == [3, 3, 4]

    def test_label_mix_close_to_global(self):
        ds = gen_blobs(classes=2, per_class=5000, d=2, separation=3.0,
                       noise_sd=0.5, seed=3)
        parts = partition_iid(ds, 2, seed=11)
        from scipy import stats
        for part in parts:
            hist = label_histogram(part)
            expected = np.full(2, hist.sum() / 2)
            _, p_value = stats.chisquare(hist, expected)
            assert p_value > 0.01


class TestPartitionLabelShards:
    def test_single_label_parts(self):
        ds = gen_blobs(classes=2, per_class=30, d=2, separation=3.0,
                       noise_sd=0.5, seed=0)
        parts = partition_label_shards(ds, 2, 1, seed=6)
        for part in parts:
            assert np.unique(part.labels).size == 1

    def test_parts_one_identity(self):
        ds = gen_blobs(2, 8, 2, 3.0, 0.5, seed=0)
        parts = partition_label_shards(ds, 1, 1, seed=0)
        assert np.array_equal(parts[0].indices, np.arange(ds.n_rows))

    @settings(deadline=None, max_examples=25)
    @given(parts=st.integers(1, 6), spp=st.integers(1, 3), seed=st.integers(0, 999))
    def test_disjoint_cover(self, parts, spp, seed):
        ds = gen_blobs(classes=3, per_class=30, d=2, separation=3.0,
                       noise_sd=0.5, seed=1)
        shards = partition_label_shards(ds, parts, spp, seed=seed)
        assert_disjoint_cover(shards, np.arange(ds.n_rows))


class TestPartitionDirichlet:
    def test_huge_alpha_is_nearly_uniform(self):
        ds = gen_blobs(classes=4, per_class=5000, d=2, separation=3.0,
                       noise_sd=0.5, seed=0)
        parts = partition_dirichlet(ds, 4, alpha=1e6, seed=8)
        global_share = 0.25
        for part in parts:
            hist = label_histogram(part)
            shares = hist / hist.sum()
            assert np.all(np.abs(shares - global_share) < 0.02)

    def test_small_alpha_concentrates_labels(self):
        ds = gen_blobs(classes=4, per_class=500, d=2, separation=3.0,
                       noise_sd=0.5, seed=0)
        skewed_seeds = 0
        for seed in range(5):
            parts = partition_dirichlet(ds, 4, alpha=0.1, seed=seed)
            top_share = max(
                (label_histogram(p) / max(len(p), 1)).max() for p in parts
            )
            skewed_seeds += top_share > 0.6
        assert skewed_seeds >= 3

    @settings(deadline=None, max_examples=25)
    @given(parts=st.integers(1, 8), alpha=st.floats(0.05, 10.0),
           seed=st.integers(0, 999))
    def test_disjoint_cover_and_no_empty_parts(self, parts, alpha, seed):
        ds = gen_blobs(classes=3, per_class=25, d=2, separation=3.0,
                       noise_sd=0.5, seed=2)
        shards = partition_dirichlet(ds, parts, alpha=alpha, seed=seed)
        assert_disjoint_cover(shards, np.arange(ds.n_rows))
        assert all(len(s) >= 1 for s in shards)


class TestSampleKshot:
    def test_saturation_returns_whole_shard_ascending(self):
        ds = gen_blobs(classes=2, per_class=5, d=2, separation=3.0,
                       noise_sd=0.5, seed=0)
        shard = ds.full_shard()
        out = sample_kshot(shard, 100, seed=0)
        assert np.array_equal(out.indices, np.sort(shard.indices))

    def test_32_shot_takes_32_per_class(self):
        ds = gen_blobs(classes=2, per_class=50, d=2, separation=3.0,
                       noise_sd=0.5, seed=1)
        out = sample_kshot(ds.full_shard(), 32, seed=3)
        assert len(out) == 64
        assert label_histogram(out).tolist() == [32, 32]

    def test_deterministic_and_idempotent(self):
        ds = gen_blobs(classes=3, per_class=40, d=2, separation=3.0,
                       noise_sd=0.5, seed=2)
        a = sample_kshot(ds.full_shard(), 7, seed=5)
        b = sample_kshot(ds.full_shard(), 7, seed=5)
        assert np.array_equal(a.indices, b.indices)
        again = sample_kshot(a, 7, seed=99)
        assert np.array_equal(again.indices, a.indices)

    @settings(deadline=None, max_examples=25)
    @given(k=st.integers(1, 60), seed=st.integers(0, 999))
    def test_per_class_counts(self, k, seed):
        ds = gen_blobs(classes=3, per_class=35, d=2, separation=3.0,
                       noise_sd=0.5, seed=3)
        shard = partition_dirichlet(ds, 2, alpha=0.4, seed=seed)[0]
        out = sample_kshot(shard, k, seed=seed)
        before = label_histogram(shard)
        after = label_histogram(out)
        assert np.array_equal(after, np.minimum(before, k))

    def test_empty_shard_rejected(self):
        ds = gen_blobs(2, 3, 2, 3.0, 0.5, seed=0)
        empty = Shard(ds, np.array([], dtype=np.int64))
        with pytest.raises(DataError):
            sample_kshot(empty, 3, seed=0)


class TestLabelHistogram:
    def test_empty_and_single_label(self):
        ds = gen_blobs(classes=3, per_class=4, d=2, separation=3.0,
                       noise_sd=0.5, seed=0)
        empty = Shard(ds, np.array([], dtype=np.int64))
        assert label_histogram(empty).tolist() == [0, 0, 0]
        single = Shard(ds, np.where(ds.labels == 1)[0])
        hist = label_histogram(single)
        assert hist[1] == 4 and hist[0] == 0 and hist[2] == 0

    def test_matches_brute_force_count(self):
        rng = np.random.default_rng(4)
        ds = gen_blobs(classes=5, per_class=30, d=2, separation=3.0,
                       noise_sd=0.5, seed=1)
        idx = rng.choice(ds.n_rows, size=40, replace=False)
        shard = Shard(ds, idx)
        hist = label_histogram(shard)
        for c in range(5):
            assert hist[c] == sum(1 for i in idx if ds.labels[i] == c)


class TestStratifiedSplit:
    def test_fraction_and_balance(self):
        ds = gen_blobs(classes=4, per_class=100, d=2, separation=3.0,
                       noise_sd=0.5, seed=0)
        taken, rest = stratified_split(ds, 0.25, seed=3)
        assert len(taken) == 100
        assert len(rest) == 300
        assert np.all(label_histogram(taken) == 25)

    def test_deterministic(self):
        ds = gen_blobs(classes=2, per_class=50, d=2, separation=3.0,
                       noise_sd=0.5, seed=0)
        a, _ = stratified_split(ds, 0.3, seed=7)
        b, _ = stratified_split(ds, 0.3, seed=7)
        assert np.array_equal(a.indices, b.indices)
