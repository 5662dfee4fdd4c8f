import numpy as np
import pytest

from ccgl import autodiff as ad
from ccgl.cohort import RoiTimeSeries, SynthSpec, split_cohort, synth_cohort
from ccgl.config import EncoderSettings, RunConfig, TrainSettings
from ccgl.connectivity import EdgePolicy, ViewGraph, build_fc_graph
from ccgl.encoder import (
    AttractionMatrix,
    PreparedView,
    _contrastive_loss_t,
    _encode_t,
    chebyshev_conv,
    contrastive_loss,
    contrastive_pair_loss,
    encode,
    init_encoder_params,
    prepare_view,
    prepare_views,
    similarity_matrix,
    topk_pool,
    train_cgl,
)
from ccgl.spectral import normalized_laplacian


def small_graph(seed=0, rois=6, top=3):
    rng = np.random.default_rng(seed)
    series = RoiTimeSeries(rng.standard_normal((180, rois)))
    return build_fc_graph(series, rng.standard_normal(7) * 0.05, EdgePolicy(per_node_top=top))


def tiny_config(**overrides):
    defaults = dict(
        synth=SynthSpec(n_patients=8, n_rois=8, n_timepoints=160),
        encoder=EncoderSettings(hidden1=10, hidden2=8, embed_dim=6),
        train=TrainSettings(batch_size=100, cgl_epochs=3, dgc_epochs=3),
        seeds=(0,),
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


class TestChebyshevConv:
    def test_matches_dense_polynomial_oracle(self):
        rng = np.random.default_rng(0)
        for seed in range(8):
            graph = small_graph(seed, rois=6)
            lap = normalized_laplacian(graph)
            lt = lap.scaled.toarray()
            v = rng.standard_normal((6, graph.feature_dim))
            thetas = [rng.standard_normal((graph.feature_dim, 4)) for _ in range(3)]
            polys = [np.eye(6), lt, 2.0 * lt @ lt - np.eye(6)]
            oracle = sum(polys[k] @ v @ thetas[k] for k in range(3))
            assert np.abs(chebyshev_conv(v, lap, thetas) - oracle).max() < 1e-10

    def test_identity_filter(self):
        graph = small_graph(1)
        lap = normalized_laplacian(graph)
        f = graph.feature_dim
        v = np.random.default_rng(1).standard_normal((6, f))
        thetas = [np.eye(f), np.zeros((f, f)), np.zeros((f, f))]
        assert np.allclose(chebyshev_conv(v, lap, thetas), v)

    def test_edgeless_graph_sums_filters(self):
        graph = ViewGraph(node_features=np.zeros((5, 12)), edges=(), roi_count=5)
        lap = normalized_laplacian(graph)
        rng = np.random.default_rng(2)
        v = rng.standard_normal((5, 12))
        thetas = [rng.standard_normal((12, 3)) for _ in range(3)]
        expected = v @ (thetas[0] + thetas[1] + thetas[2])
        assert np.abs(chebyshev_conv(v, lap, thetas) - expected).max() < 1e-12


class TestTopkPool:
    def test_keeps_highest_scores(self):
        graph = small_graph(3, rois=4)
        lap = normalized_laplacian(graph)
        v = np.diag([3.0, 1.0, 2.0, 0.0]) @ np.ones((4, 5))
        p = np.ones(5)
        pooled, sub_lap, kept = topk_pool(v, lap, p, ratio=0.5)
        assert kept.tolist() == [0, 2]
        assert sub_lap.n_nodes == 2

    def test_full_ratio_keeps_all_but_gates(self):
        graph = small_graph(4, rois=4)
        lap = normalized_laplacian(graph)
        rng = np.random.default_rng(4)
        v = rng.standard_normal((4, 5))
        p = rng.standard_normal(5)
        pooled, _, kept = topk_pool(v, lap, p, ratio=1.0)
        assert kept.tolist() == [0, 1, 2, 3]
        scores = v @ (p / np.linalg.norm(p))
        assert np.allclose(pooled, v * np.tanh(scores)[:, None])

    def test_equal_scores_keep_lowest_indices(self):
        graph = small_graph(5, rois=4)
        lap = normalized_laplacian(graph)
        v = np.ones((4, 3))
        pooled, _, kept = topk_pool(v, lap, np.ones(3), ratio=0.5)
        assert kept.tolist() == [0, 1]

    def test_ratio_validation(self):
        graph = small_graph(6, rois=4)
        lap = normalized_laplacian(graph)
        with pytest.raises(ValueError, match="ratio"):
            topk_pool(np.ones((4, 3)), lap, np.ones(3), ratio=0.0)


class TestEncode:
    def test_unit_norm_and_deterministic(self):
        graph = small_graph(7)
        settings = EncoderSettings(hidden1=9, hidden2=7, embed_dim=5)
        params = init_encoder_params(graph.feature_dim, settings, seed=0)
        a = encode(graph, params, settings)
        b = encode(graph, params, settings)
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
        assert a.shape == (5,)

    def test_permutation_invariance(self):
        # relabelling nodes (rows and edge indices) must not move the embedding
        settings = EncoderSettings(hidden1=9, hidden2=7, embed_dim=5)
        g1 = small_graph(8, rois=7)
        params = init_encoder_params(g1.feature_dim, settings, seed=3)
        base = encode(g1, params, settings)
        for trial in range(3):
            perm = np.random.default_rng(trial).permutation(7)
            inverse = np.argsort(perm)
            edges = tuple(
                (min(inverse[i], inverse[j]), max(inverse[i], inverse[j]), w)
                for i, j, w in g1.edges
            )
            g2 = ViewGraph(node_features=g1.node_features[perm], edges=edges, roi_count=7)
            permuted = encode(g2, params, settings)
            assert np.allclose(base, permuted, atol=1e-7)


class TestConcurrentEncode:
    def test_parallel_calls_match_serial(self):
        from concurrent.futures import ThreadPoolExecutor

        settings = EncoderSettings(hidden1=9, hidden2=7, embed_dim=5)
        graphs = [small_graph(seed, rois=6) for seed in range(12)]
        params = init_encoder_params(graphs[0].feature_dim, settings, seed=0)
        serial = [encode(g, params, settings) for g in graphs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(lambda g: encode(g, params, settings), graphs))
        for a, b in zip(serial, parallel):
            assert np.array_equal(a, b)


class TestSimilarityMatrix:
    def test_identical_rows_give_one(self):
        e = np.tile(np.array([[0.6, 0.8]]), (4, 1))
        m = similarity_matrix(e)
        assert np.allclose(m.values, 1.0)

    def test_orthogonal_rows_give_zero(self):
        e = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert similarity_matrix(e).values[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_known_angle(self):
        e = np.array([[1.0, 0.0], [1.0, 1.0]])
        assert similarity_matrix(e).values[0, 1] == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            similarity_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_pairing_layout(self):
        e = np.random.default_rng(9).standard_normal((6, 4))
        m = similarity_matrix(e)
        assert m.pairing == ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1))
        assert m.partner_index().tolist() == [1, 0, 3, 2, 5, 4]


class TestContrastiveLoss:
    def test_single_patient_is_zero(self):
        m = similarity_matrix(np.array([[1.0, 0.0], [0.8, 0.6]]))
        assert contrastive_loss(m, 0.1) == pytest.approx(0.0, abs=1e-12)

    def test_identical_embeddings_log3(self):
        m = similarity_matrix(np.tile(np.array([[1.0, 0.0, 0.0]]), (4, 1)))
        assert contrastive_loss(m, 0.1) == pytest.approx(np.log(3.0), abs=1e-9)

    def test_separated_limit_vanishes(self):
        values = -np.ones((4, 4))
        for a, b in ((0, 1), (2, 3)):
            values[a, b] = values[b, a] = 1.0
        np.fill_diagonal(values, 1.0)
        m = AttractionMatrix(values=values, pairing=((0, 0), (0, 1), (1, 0), (1, 1)))
        # denominator adds two cross terms of exp(-20): loss ~ 2e^-20
        assert contrastive_loss(m, 0.1) == pytest.approx(2.0 * np.exp(-20.0), rel=1e-6)

    def test_each_pair_loss_nonnegative(self):
        rng = np.random.default_rng(10)
        e = rng.standard_normal((8, 5))
        m = similarity_matrix(e)
        for row in range(8):
            partner = row ^ 1
            assert contrastive_pair_loss(m, row, partner, 0.1) >= 0.0

    def test_not_commutative(self):
        values = np.eye(4)
        values[0, 1] = values[1, 0] = 0.9
        values[2, 3] = values[3, 2] = 0.9
        values[0, 2] = values[2, 0] = 0.7
        values[0, 3] = values[3, 0] = -0.2
        values[1, 2] = values[2, 1] = 0.1
        values[1, 3] = values[3, 1] = 0.3
        np.fill_diagonal(values, 1.0)
        m = AttractionMatrix(values=values, pairing=((0, 0), (0, 1), (1, 0), (1, 1)))
        assert contrastive_pair_loss(m, 0, 1, 0.1) != pytest.approx(
            contrastive_pair_loss(m, 1, 0, 0.1), abs=1e-9
        )

    def test_scale_invariance_through_cosine(self):
        rng = np.random.default_rng(11)
        e = rng.standard_normal((6, 4))
        base = contrastive_loss(similarity_matrix(e), 0.2)
        scaled = contrastive_loss(similarity_matrix(3.7 * e), 0.2)
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_tape_version_matches_numeric(self):
        rng = np.random.default_rng(12)
        e = rng.standard_normal((6, 5))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        loss_t, m_values = _contrastive_loss_t(ad.Tensor(e), 0.1)
        numeric = contrastive_loss(similarity_matrix(e), 0.1)
        assert loss_t.data.item() == pytest.approx(numeric, abs=1e-12)
        assert np.allclose(m_values, similarity_matrix(e).values, atol=1e-12)

    def test_tau_validation(self):
        m = similarity_matrix(np.eye(2))
        with pytest.raises(ValueError, match="tau"):
            contrastive_loss(m, 0.0)


class TestEncoderGradients:
    def test_full_loss_grad_check(self):
        cfg = tiny_config(synth=SynthSpec(n_patients=4, n_rois=8, n_timepoints=160))
        cohort = split_cohort(synth_cohort(cfg.synth, 2), (1.0, 0.0, 0.0), 0)
        prepared = prepare_views(cohort, cfg)
        params = init_encoder_params(prepared[0][0].features.shape[1], cfg.encoder, seed=0)

        def f(leaves):
            rows = []
            for views in prepared:
                rows.append(_encode_t(views[0], leaves, cfg.encoder))
                rows.append(_encode_t(views[1], leaves, cfg.encoder))
            loss, _ = _contrastive_loss_t(ad.concat(rows, axis=0), cfg.encoder.tau)
            return loss

        assert ad.grad_check(f, params, eps=1e-5, samples=30, seed=3) < 1e-4


class TestTrainCgl:
    def test_zero_lr_constant_history(self):
        cfg = tiny_config(train=TrainSettings(cgl_epochs=3, dgc_epochs=1, cgl_lr=0.0))
        cohort = split_cohort(synth_cohort(cfg.synth, 1), (0.7, 0.1, 0.2), 1)
        _, history = train_cgl(cohort, cfg, seed=0)
        losses = [h["loss"] for h in history]
        assert losses[0] == pytest.approx(losses[-1], abs=1e-12)

    def test_deterministic_history(self):
        cfg = tiny_config()
        cohort = split_cohort(synth_cohort(cfg.synth, 1), (0.7, 0.1, 0.2), 1)
        _, h1 = train_cgl(cohort, cfg, seed=5)
        _, h2 = train_cgl(cohort, cfg, seed=5)
        assert h1 == h2

    def test_needs_two_training_patients(self):
        cfg = tiny_config()
        cohort = synth_cohort(cfg.synth, 1)  # all unassigned
        with pytest.raises(ValueError, match="training patients"):
            train_cgl(cohort, cfg, seed=0)

    def test_more_than_two_views_samples_pairs(self):
        cfg = tiny_config(
            synth=SynthSpec(n_patients=6, n_rois=8, n_timepoints=200),
            n_views=3,
            min_window_length=20,
        )
        cohort = split_cohort(synth_cohort(cfg.synth, 4), (0.7, 0.1, 0.2), 4)
        _, h1 = train_cgl(cohort, cfg, seed=2)
        _, h2 = train_cgl(cohort, cfg, seed=2)
        assert h1 == h2
        assert all(np.isfinite(h["loss"]) for h in h1)

    def test_separable_cohort_separates(self):
        cfg = RunConfig(
            synth=SynthSpec(n_patients=40, n_rois=16, n_timepoints=240),
            encoder=EncoderSettings(hidden1=24, hidden2=24, embed_dim=16),
            train=TrainSettings(batch_size=100, cgl_epochs=50, dgc_epochs=1, cgl_lr=0.003),
            seeds=(0,),
        )
        cohort = split_cohort(synth_cohort(cfg.synth, 3), (0.7, 0.1, 0.2), 3)
        _, history = train_cgl(cohort, cfg, seed=3)
        last = history[-1]
        assert last["mean_homo"] - last["mean_heter"] >= 0.3
