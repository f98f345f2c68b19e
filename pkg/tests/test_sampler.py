import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bankadapt.encoder import FrozenEmbedder
from bankadapt.sampler import (
    DegenerateRowError,
    PrecisionUndefinedError,
    SampleResult,
    SimilarityChunkPlan,
    default_k1,
    default_k2,
    load_sample_csv,
    sampler_precision,
    save_sample_csv,
    select_topk_streamed,
    similarity_matrix,
    stage1_sample,
    stage2_sample,
    topk_per_column_dedup,
)
from bankadapt.synth import SynthSpec, generate_downstream, generate_pretrain_bank

from conftest import random_bank, random_dataset


def brute_force_select(v, f, k):
    """Independent oracle: plain matmul scores, pure-Python per-column sort."""
    vn = np.asarray(v, np.float64)
    vn = vn / np.linalg.norm(vn, axis=1, keepdims=True)
    fn = np.asarray(f, np.float64)
    fn = fn / np.linalg.norm(fn, axis=1, keepdims=True)
    s = vn @ fn.T
    assigned = s.argmax(axis=1)
    out = {}
    for j in range(fn.shape[0]):
        pool = [int(r) for r in np.flatnonzero(assigned == j)]
        pool.sort(key=lambda r: (-s[r, j], r))
        out[j] = pool[:k]
    return out, s


class TestSimilarityMatrix:
    def test_chunk_size_never_changes_the_matrix(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((1000, 12))
        f = rng.standard_normal((7, 12))
        full = similarity_matrix(v, f, SimilarityChunkPlan(chunk_rows=1000))
        for rows in (1, 64, 1000):
            chunked = similarity_matrix(v, f, SimilarityChunkPlan(chunk_rows=rows))
            np.testing.assert_array_equal(chunked, full)

    def test_scores_match_plain_matmul(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal((50, 8))
        f = rng.standard_normal((5, 8))
        s = similarity_matrix(v, f)
        _, oracle = brute_force_select(v, f, 1)
        np.testing.assert_allclose(s, oracle, atol=1e-12)

    def test_rows_are_normalized_internally(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((20, 6))
        f = rng.standard_normal((3, 6))
        scaled = similarity_matrix(v * 7.5, f * 0.01)
        plain = similarity_matrix(v, f)
        np.testing.assert_allclose(scaled, plain, atol=1e-12)

    def test_zero_norm_row_names_its_index(self):
        v = np.ones((4, 3))
        v[2] = 0.0
        with pytest.raises(DegenerateRowError, match="bank row 2"):
            similarity_matrix(v, np.ones((2, 3)))
        with pytest.raises(DegenerateRowError, match="query row 1"):
            similarity_matrix(np.ones((2, 3)), np.vstack([np.ones(3), np.zeros(3)]))

    def test_cosine_bounds(self):
        rng = np.random.default_rng(3)
        s = similarity_matrix(rng.standard_normal((30, 5)),
                              rng.standard_normal((4, 5)))
        assert s.max() <= 1.0 + 1e-12 and s.min() >= -1.0 - 1e-12


class TestTopkSelection:
    def test_engineered_two_column_example(self):
        s = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3],
                      [0.2, 0.9], [0.1, 0.8], [0.3, 0.6]])
        r = topk_per_column_dedup(s, k=2)
        col0 = set(r.selected_ids[r.assigned_column == 0].tolist())
        col1 = set(r.selected_ids[r.assigned_column == 1].tolist())
        assert col0 == {0, 1} and col1 == {3, 4}
        assert r.deficits.tolist() == [0, 0]

    def test_assignment_tie_goes_to_lowest_column(self):
        s = np.array([[0.5, 0.5, 0.2]])
        r = topk_per_column_dedup(s, k=1)
        assert r.assigned_column.tolist() == [0, ]
        assert r.deficits.tolist() == [0, 1, 1]

    def test_score_tie_goes_to_lowest_record_id(self):
        s = np.array([[0.7], [0.7], [0.7]])
        r = topk_per_column_dedup(s, k=2)
        assert r.selected_ids.tolist() == [0, 1]

    def test_deficit_reported_without_backfill(self):
        # column 1 attracts a single row; column 0 has plenty but must not
        # donate its surplus
        s = np.array([[0.9, 0.0], [0.8, 0.1], [0.85, 0.2], [0.1, 0.9]])
        r = topk_per_column_dedup(s, k=3)
        assert r.deficits.tolist() == [0, 2]
        assert sorted(r.selected_ids[r.assigned_column == 1].tolist()) == [3]
        assert r.n_selected == 4

    def test_streamed_equals_full_matrix_bitwise(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal((500, 10))
        f = rng.standard_normal((6, 10))
        full = topk_per_column_dedup(similarity_matrix(v, f), 3)
        for rows in (1, 17, 100, 500, 4096):
            stream = select_topk_streamed(v, f, 3, SimilarityChunkPlan(chunk_rows=rows))
            np.testing.assert_array_equal(stream.selected_ids, full.selected_ids)
            np.testing.assert_array_equal(stream.assigned_column, full.assigned_column)
            np.testing.assert_array_equal(stream.score, full.score)
            np.testing.assert_array_equal(stream.deficits, full.deficits)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 300),
           q=st.integers(1, 9), k=st.integers(1, 6),
           rows=st.integers(1, 128))
    def test_matches_brute_force_oracle(self, seed, m, q, k, rows):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((m, 5))
        f = rng.standard_normal((q, 5))
        r = select_topk_streamed(v, f, k, SimilarityChunkPlan(chunk_rows=rows))
        oracle, _ = brute_force_select(v, f, k)
        for j in range(q):
            got = r.selected_ids[r.assigned_column == j].tolist()
            assert got == oracle[j]
        assert len(set(r.selected_ids.tolist())) == r.n_selected

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
    def test_growing_k_only_adds_records(self, seed, k):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((80, 6))
        f = rng.standard_normal((4, 6))
        small = topk_per_column_dedup(similarity_matrix(v, f), k)
        large = topk_per_column_dedup(similarity_matrix(v, f), k + 1)
        for j in range(4):
            a = set(small.selected_ids[small.assigned_column == j].tolist())
            b = set(large.selected_ids[large.assigned_column == j].tolist())
            assert a <= b


class TestChunkPlan:
    def test_budget_inversion(self):
        plan = SimilarityChunkPlan.from_budget(1 << 20, feat_dim=64, n_columns=10)
        assert plan.block_bytes(64, 10) <= 1 << 20
        assert plan.chunk_rows >= 1

    def test_tiny_budget_still_makes_progress(self):
        plan = SimilarityChunkPlan.from_budget(16, feat_dim=64, n_columns=10)
        assert plan.chunk_rows == 1

    def test_invalid_chunk_rows(self):
        with pytest.raises(ValueError, match="chunk_rows"):
            SimilarityChunkPlan(chunk_rows=0)


def make_world(seed, m=8000, rho=0.25, noise=0.8, n_classes=10, npc=20):
    spec = SynthSpec(seed=seed, n_classes=n_classes, n_per_class=npc, bank_size=m,
                     in_dist_fraction=rho, weak_pair_rate=0.3, noise_sigma=noise)
    ds = generate_downstream(spec)
    bank = generate_pretrain_bank(spec, ds)
    emb = FrozenEmbedder.from_seed("image", spec.seed, spec.feat_dim, spec.image_dim)
    return spec, ds, bank, emb


class TestStages:
    def test_prototype_only_bank_retrieves_each_class(self):
        # bank holding exactly the two class prototype images must map one
        # record to each class at k1 = 1
        from bankadapt.embank import EmbeddingBank
        from bankadapt.synth import prototypes

        spec = SynthSpec(seed=0, n_classes=2, n_per_class=3, bank_size=2,
                         noise_sigma=0.0)
        ds = generate_downstream(spec)
        protos, _ = prototypes(spec)
        emb = FrozenEmbedder.from_seed("image", spec.seed, spec.feat_dim,
                                       spec.image_dim)
        feats = emb.embed_rows(protos).astype(np.float32)
        bank = EmbeddingBank(
            images=protos.astype(np.float32), feats=feats, caption_feats=feats,
            captions=["a photo of class-00.", "a photo of class-01."],
            latent_class=np.array([0, 1], dtype=np.int32))
        r = stage1_sample(bank, ds, k1=1)
        assert r.n_selected == 2
        assert r.deficits.tolist() == [0, 0]
        picked_classes = sorted(bank.latent_class[r.selected_ids].tolist())
        assert picked_classes == [0, 1]

    def test_default_sizes_label_bank_at_eight_times_downstream(self):
        _, ds, bank, _ = make_world(0)
        r = stage1_sample(bank, ds)
        assert r.k == default_k1(ds.size, ds.n_classes) == 8 * ds.size // ds.n_classes
        assert r.n_selected + int(r.deficits.sum()) == 8 * ds.size

    def test_stage2_keeps_half_and_returns_bank_ids(self):
        _, ds, bank, emb = make_world(1)
        s1 = stage1_sample(bank, ds)
        s2 = stage2_sample(s1, bank, ds, emb)
        assert s2.k == default_k2(s1.n_selected, ds.size) == 4
        assert s2.n_selected <= s1.n_selected // 2
        assert set(s2.selected_ids.tolist()) <= set(s1.selected_ids.tolist())
        assert len(set(s2.selected_ids.tolist())) == s2.n_selected

    def test_stage1_precision_beats_base_rate(self):
        for seed in range(5):
            _, ds, bank, _ = make_world(seed, rho=0.5)
            p = sampler_precision(stage1_sample(bank, ds), bank, ds)
            assert p > 0.5

    def test_stage2_refines_stage1_precision(self):
        for seed in range(5):
            _, ds, bank, emb = make_world(seed)
            s1 = stage1_sample(bank, ds)
            s2 = stage2_sample(s1, bank, ds, emb)
            assert sampler_precision(s2, bank, ds) >= sampler_precision(s1, bank, ds)

    def test_stage_outputs_are_chunk_independent(self):
        _, ds, bank, emb = make_world(2, m=2000)
        base = None
        for rows in (64, 999, 4096):
            plan = SimilarityChunkPlan(chunk_rows=rows)
            s1 = stage1_sample(bank, ds, plan=plan)
            s2 = stage2_sample(s1, bank, ds, emb, plan=plan)
            key = (s2.selected_ids.tolist(), s2.assigned_column.tolist(),
                   s2.score.tolist())
            if base is None:
                base = key
            else:
                assert key == base

    def test_feat_dim_mismatch_rejected(self):
        bank = random_bank(d=4)
        ds = random_dataset(d=5)
        with pytest.raises(ValueError, match="feat_dim"):
            stage1_sample(bank, ds)

    def test_empty_label_bank_rejected_by_stage2(self):
        _, ds, bank, emb = make_world(3, m=100)
        empty = SampleResult(
            selected_ids=np.zeros(0, np.int64),
            assigned_column=np.zeros(0, np.int64),
            score=np.zeros(0), deficits=np.zeros(ds.n_classes, np.int64), k=1)
        with pytest.raises(ValueError, match="label bank"):
            stage2_sample(empty, bank, ds, emb)


class TestPrecision:
    def test_all_unknown_bank_is_undefined(self):
        bank = random_bank(seed=0)
        bank.latent_class[:] = -1
        ds = random_dataset(seed=0)
        r = SampleResult(selected_ids=np.array([0, 1]),
                         assigned_column=np.array([0, 0]),
                         score=np.zeros(2), deficits=np.zeros(3, np.int64), k=2)
        with pytest.raises(PrecisionUndefinedError):
            sampler_precision(r, bank, ds)

    def test_no_in_distribution_selection_scores_zero(self):
        bank = random_bank(seed=1)
        bank.latent_class[:] = -1
        bank.latent_class[5] = 1  # ground truth exists, selection misses it
        ds = random_dataset(seed=1)
        r = SampleResult(selected_ids=np.array([0, 2]),
                         assigned_column=np.array([0, 1]),
                         score=np.zeros(2), deficits=np.zeros(3, np.int64), k=1)
        assert sampler_precision(r, bank, ds) == 0.0


class TestCsv:
    def test_round_trip(self, tmp_path):
        _, ds, bank, _ = make_world(4, m=500)
        r = stage1_sample(bank, ds, k1=3)
        path = tmp_path / "samples.csv"
        dpath = tmp_path / "deficits.csv"
        save_sample_csv(r, path, dpath)
        back = load_sample_csv(path)
        np.testing.assert_array_equal(back.selected_ids, r.selected_ids)
        np.testing.assert_array_equal(back.assigned_column, r.assigned_column)
        np.testing.assert_array_equal(back.score, r.score)
        assert dpath.read_text().startswith("column,deficit")

    def test_header_is_stable(self, tmp_path):
        _, ds, bank, _ = make_world(5, m=200)
        r = stage1_sample(bank, ds, k1=2)
        path = tmp_path / "s.csv"
        save_sample_csv(r, path)
        assert path.read_text().splitlines()[0] == "record_id,assigned_column,score"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            load_sample_csv(path)
