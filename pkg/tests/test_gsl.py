import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gslmpp import tensor as T
from gslmpp.chem import parse_smiles
from gslmpp.encoder import GinParams, batch_graphs, encode_all
from gslmpp.fingerprint import ecfp, tanimoto
from gslmpp.gsl import (AnchorSet, GslParams, anchor_gsl_iterate, anchor_message_passing, anchor_pair_adjacency,
                        anchor_propagate, anchor_similarity, build_msg, build_msg_sparse, combine_adjacency,
                        gcn_forward, gsl_iterate, metric_similarity)
from gslmpp.tensor import Tensor

from oracles import algorithm_transcription, anchor_recovered, dense_gcn, weighted_cosine_loop

FIVE = ["CCO", "CCN", "c1ccccc1O", "CC(=O)Oc1ccccc1C(=O)O", "CCCCCl"]


def _fps(smiles):
    return [ecfp(parse_smiles(s)) for s in smiles]


class TestBuildMsg:
    def test_three_molecules_match_pairwise_tanimoto(self):
        fps = _fps(["CCO", "CCN", "c1ccccc1"])
        a0 = build_msg(fps, 0.0)
        for i in range(3):
            for j in range(3):
                expected = 1.0 if i == j else tanimoto(fps[i], fps[j])
                assert a0[i, j] == pytest.approx(expected, abs=1e-7)

    def test_duplicates_get_unit_weight(self):
        a0 = build_msg(_fps(["CCO", "OCC", "CCN"]), 0.3)
        assert a0[0, 1] == 1.0

    def test_threshold_zeroes_weak_pairs(self):
        fps = _fps(FIVE)
        a0 = build_msg(fps, 0.3)
        raw = build_msg(fps, 0.0)
        weak = (raw < 0.3) & ~np.eye(5, dtype=bool)
        assert weak.any()
        assert np.all(a0[weak] == 0)
        np.testing.assert_array_equal(np.diag(a0), 1.0)

    def test_sparse_equals_dense(self):
        fps = _fps(FIVE)
        for eps in (0.0, 0.2, 0.5):
            dense = build_msg(fps, eps)
            np.testing.assert_array_equal(build_msg_sparse(fps, eps, block=2).toarray(), dense)


class TestMetricSimilarity:
    def test_identical_rows_give_one(self):
        h = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
        s = metric_similarity(h, Tensor(np.ones((1, 2))), 0.0).data
        np.testing.assert_allclose(s, np.ones((2, 2)), atol=1e-15)

    def test_orthogonal_rows_give_zero(self):
        h = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        s = metric_similarity(h, Tensor(np.ones((1, 2))), 0.0).data
        assert s[0, 1] == 0.0

    def test_two_perspectives_by_hand(self):
        h = np.array([[1.0, 2.0], [3.0, -1.0]])
        w = np.array([[1.0, 1.0], [2.0, 0.5]])

        def cos(a, b):
            return a @ b / np.linalg.norm(a) / np.linalg.norm(b)

        expected = 0.5 * (cos(w[0] * h[0], w[0] * h[1]) + cos(w[1] * h[0], w[1] * h[1]))
        s = metric_similarity(Tensor(h), Tensor(w), -1.0).data
        assert s[0, 1] == pytest.approx(max(expected, 0.0), abs=1e-14)

    def test_zero_row_is_isolated(self):
        h = Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
        s = metric_similarity(h, Tensor(np.ones((2, 2))), 0.0).data
        np.testing.assert_array_equal(s[0], 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 7), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 10_000),
           st.sampled_from([0.0, 0.1, 0.5]))
    def test_matches_pairwise_loop(self, n, d, m, seed, eps):
        rng = np.random.default_rng(seed)
        h, w = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        s = metric_similarity(Tensor(h), Tensor(w), eps).data
        np.testing.assert_allclose(s, weighted_cosine_loop(h, w, eps), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000))
    def test_symmetry_range_and_row_scaling(self, n, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.normal(size=(n, 3)), rng.normal(size=(4, 3))
        s = metric_similarity(Tensor(h), Tensor(w), 0.0).data
        np.testing.assert_allclose(s, s.T, atol=1e-15)
        assert s.min() >= 0 and s.max() <= 1 + 1e-12
        scaled = h * rng.uniform(0.1, 10.0, size=(n, 1))
        np.testing.assert_allclose(metric_similarity(Tensor(scaled), Tensor(w), 0.0).data, s, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        h, w = rng.normal(size=(6, 3)), rng.normal(size=(2, 3))
        perm = rng.permutation(6)
        s = metric_similarity(Tensor(h), Tensor(w), 0.0).data
        sp_ = metric_similarity(Tensor(h[perm]), Tensor(w), 0.0).data
        np.testing.assert_allclose(sp_, s[np.ix_(perm, perm)], atol=1e-15)


class TestCombineAdjacency:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.a0, self.at, self.a1 = (rng.uniform(size=(4, 4)) for _ in range(3))

    def test_lambda_one_returns_a0(self):
        out = combine_adjacency(self.a0, Tensor(self.at), Tensor(self.a1), 1.0, 0.6).data
        np.testing.assert_array_equal(out, self.a0)

    def test_lambda_zero_eta_one_returns_at(self):
        out = combine_adjacency(self.a0, Tensor(self.at), Tensor(self.a1), 0.0, 1.0).data
        np.testing.assert_array_equal(out, self.at)

    @pytest.mark.parametrize("eta", [0.1, 0.3, 0.6, 0.8, 1.0])
    def test_first_round_does_not_depend_on_eta(self, eta):
        a1 = Tensor(self.a1)
        out = combine_adjacency(self.a0, a1, a1, 0.3, eta).data
        np.testing.assert_allclose(out, 0.3 * self.a0 + 0.7 * self.a1, rtol=1e-15, atol=1e-16)

    def test_nonnegative(self):
        out = combine_adjacency(self.a0, Tensor(self.at), Tensor(self.a1), 0.5, 0.5).data
        assert out.min() >= 0


class TestGcnForward:
    def test_identity_graph_identity_weights(self):
        x = np.array([[1.0, -2.0], [-3.0, 4.0]])
        out = gcn_forward(np.eye(2), Tensor(x), [Tensor(np.eye(2))], adj_norm="none", final_relu=True).data
        np.testing.assert_array_equal(out, np.maximum(x, 0))

    def test_swap_graph(self):
        x = np.array([[1.0, -2.0], [3.0, 4.0]])
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = gcn_forward(a, Tensor(x), [Tensor(np.eye(2))], adj_norm="none", final_relu=True).data
        np.testing.assert_array_equal(out, np.maximum(x[::-1], 0))

    @pytest.mark.parametrize("norm", ["none", "row", "sym"])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_oracle(self, norm, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(4, 4))
        a[rng.uniform(size=(4, 4)) < 0.3] = 0
        x = rng.normal(size=(4, 3))
        ws = [rng.normal(size=(3, 5)), rng.normal(size=(5, 2))]
        out = gcn_forward(a, Tensor(x), [Tensor(w) for w in ws], adj_norm=norm).data
        np.testing.assert_allclose(out, dense_gcn(a, x, ws, norm), rtol=0, atol=1e-12)


def _params(d_mol, seed=0, **hyper):
    return GslParams.init(d_mol, 6, 2, 4, np.random.default_rng(seed), **hyper)


class TestGslIterate:
    def setup_method(self):
        graphs = [parse_smiles(s) for s in FIVE]
        batch = batch_graphs(graphs)
        gin = GinParams.init(batch.features.shape[1], 8, 2, np.random.default_rng(1))
        self.x_r = encode_all(batch, gin)
        self.a0 = build_msg([ecfp(g) for g in graphs], 0.2)

    def test_matches_literal_transcription(self):
        p = _params(self.x_r.shape[1], skip_conn=0.7, update_ratio=0.6, epsilon=0.1, n_iter=3)
        h, a_tilde = gsl_iterate(self.x_r, self.a0, p)
        h_ref, a_ref = algorithm_transcription(self.x_r.data, self.a0, p.w_mol.data, p.w_hid.data,
                                               [w.data for w in p.gcn], 0.7, 0.6, 0.1, 3)
        np.testing.assert_array_equal(a_tilde.data, a_ref)
        np.testing.assert_array_equal(h.data, h_ref)

    def test_separate_normalization_matches_transcription(self):
        p = _params(self.x_r.shape[1], skip_conn=0.7, update_ratio=0.6, epsilon=0.1, n_iter=3)
        p.adj_norm = "separate"
        h, a_tilde = gsl_iterate(self.x_r, self.a0, p)
        h_ref, a_ref = algorithm_transcription(self.x_r.data, self.a0, p.w_mol.data, p.w_hid.data,
                                               [w.data for w in p.gcn], 0.7, 0.6, 0.1, 3, norm="separate")
        np.testing.assert_array_equal(a_tilde.data, a_ref)
        np.testing.assert_allclose(h.data, h_ref, rtol=1e-12, atol=1e-12)

    def test_separate_rows_are_stochastic(self):
        # with every graph row-normalized, constant features stay constant
        p = _params(self.x_r.shape[1], n_iter=1)
        p.adj_norm = "separate"
        p.gcn = [Tensor(np.eye(self.x_r.shape[1]))] * 2
        ones = Tensor(np.ones(self.x_r.shape))
        h, _ = gsl_iterate(ones, self.a0, p)
        np.testing.assert_allclose(h.data, 1.0, rtol=1e-14)

    def test_single_round(self):
        p = _params(self.x_r.shape[1], n_iter=1)
        h, a_tilde = gsl_iterate(self.x_r, self.a0, p)
        a1 = metric_similarity(self.x_r, p.w_mol, p.epsilon)
        expected = combine_adjacency(self.a0, a1, a1, p.skip_conn, p.update_ratio)
        np.testing.assert_array_equal(a_tilde.data, expected.data)
        np.testing.assert_array_equal(h.data, gcn_forward(expected, self.x_r, p.gcn).data)

    def test_lambda_one_fixes_embeddings(self):
        h1, _ = gsl_iterate(self.x_r, self.a0, _params(self.x_r.shape[1], skip_conn=1.0, n_iter=1))
        h2, _ = gsl_iterate(self.x_r, self.a0, _params(self.x_r.shape[1], skip_conn=1.0, n_iter=2))
        np.testing.assert_array_equal(h1.data, h2.data)

    def test_needs_at_least_one_round(self):
        with pytest.raises(ValueError):
            gsl_iterate(self.x_r, self.a0, _params(self.x_r.shape[1], n_iter=0))


class TestAnchors:
    def test_own_column_is_one(self):
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(5, 3)))
        r = anchor_similarity(h, AnchorSet(np.array([1, 3])), Tensor(rng.normal(size=(2, 3))), -1.0).data
        assert r[1, 0] == pytest.approx(1.0) and r[3, 1] == pytest.approx(1.0)

    def test_all_anchors_equals_full_similarity(self):
        rng = np.random.default_rng(1)
        h, w = Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=(4, 3)))
        r = anchor_similarity(h, AnchorSet(np.arange(6)), w, 0.0).data
        np.testing.assert_allclose(r, metric_similarity(h, w, 0.0).data, atol=1e-15)

    def test_three_nodes_two_anchors_by_hand(self):
        h = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        r = anchor_similarity(Tensor(h), AnchorSet(np.array([0, 2])), Tensor(np.ones((1, 2))), 0.0).data
        c = 1 / np.sqrt(2)
        np.testing.assert_allclose(r, [[1, 0], [c, c], [0, 1]], atol=1e-15)

    def test_one_hot_assignment_is_identity(self):
        perm = np.random.default_rng(2).permutation(5)
        r = np.eye(5)[:, perm]
        x = np.random.default_rng(3).normal(size=(5, 3))
        out = anchor_message_passing(Tensor(r), Tensor(x), [Tensor(np.eye(3))], final_relu=True).data
        np.testing.assert_allclose(out, np.maximum(x, 0), atol=1e-15)

    def test_equal_rows_give_equal_outputs(self):
        r = np.tile([[0.2, 0.5, 0.3]], (4, 1))
        x = np.random.default_rng(4).normal(size=(4, 2))
        out = anchor_propagate(Tensor(r), Tensor(x)).data
        np.testing.assert_allclose(out, np.tile(out[0], (4, 1)), atol=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 30), st.integers(1, 10), st.integers(0, 100_000), st.booleans())
    def test_matches_dense_recovery(self, n, s, seed, holes):
        s = min(s, n)
        rng = np.random.default_rng(seed)
        r = rng.uniform(size=(n, s))
        if holes:
            r[rng.uniform(size=(n, s)) < 0.4] = 0.0
        x = rng.normal(size=(n, 3))
        ws = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
        out = anchor_message_passing(Tensor(r), Tensor(x), [Tensor(w) for w in ws]).data
        ref = dense_gcn(anchor_recovered(r), x, ws, norm="none")
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)

    def test_pair_adjacency_matches_dense_fusion(self):
        rng = np.random.default_rng(5)
        n = 12
        x_r = Tensor(rng.normal(size=(n, 5)))
        a0 = sp.csr_matrix(np.where(rng.uniform(size=(n, n)) < 0.3, rng.uniform(size=(n, n)), 0.0))
        p = GslParams.init(5, 4, 2, 2, rng, n_iter=2, epsilon=0.0)
        state = anchor_gsl_iterate(x_r, a0, AnchorSet(np.arange(0, n, 2)), p)
        rows, cols = np.triu_indices(n, k=1)
        vals = anchor_pair_adjacency(state, a0, rows, cols, p).data
        a1 = metric_similarity(x_r, p.w_mol, 0.0).data
        at = np.mean([z.data @ z.data.T for z in state.z_last], axis=0)
        at = np.where(at >= 0, at, 0.0)
        dense = p.skip_conn * a0.toarray() + (1 - p.skip_conn) * (p.update_ratio * at + (1 - p.update_ratio) * a1)
        np.testing.assert_allclose(vals, dense[rows, cols], atol=1e-12)

    def test_no_dense_allocation(self):
        rng = np.random.default_rng(6)
        n = 300
        x_r = Tensor(rng.normal(size=(n, 8)), requires_grad=True)
        a0 = sp.identity(n, format="csr")
        p = GslParams.init(8, 4, 2, 2, rng)
        with T.forbid_shapes(lambda shp: len(shp) == 2 and shp[0] >= n and shp[1] >= n):
            with T.Tape():
                state = anchor_gsl_iterate(x_r, a0, AnchorSet(np.arange(20)), p)
                T.backward(T.sum(state.h))
        assert x_r.grad.shape == (n, 8)
