import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mkmcdse.consensus import (
    DistributedFilter,
    LinkFaultModel,
    Topology,
    TopologyError,
    consensus_round,
    faulty_weights,
    information_terms,
    init_consensus_terms,
    metropolis_weights,
    run_consensus,
)
from mkmcdse.kernels import GaussianKernel, KernelParams, MkmcKernel, NoKernel
from mkmcdse.robust_filter import GaussianBelief, UpdateConfig, build_regression, fixed_point_update, linear_model
from oracles import random_spd, textbook_ekf


def random_connected_edges(draw_rng, b):
    # spanning tree plus a few extra edges
    edges = [(int(draw_rng.integers(0, i)), i) for i in range(1, b)]
    for _ in range(b):
        i, j = draw_rng.integers(0, b, 2)
        if i != j:
            edges.append((int(i), int(j)))
    return edges


class TestMetropolis:
    def test_default_graph(self):
        topo = Topology.default10()
        W = topo.weights
        assert len(topo.edges) == 12
        assert W[0, 5] == pytest.approx(1 / 4)  # nodes 1 and 6 both have degree 3
        assert W[0, 1] == pytest.approx(1 / 4)
        assert W[3, 4] == pytest.approx(1 / 3)

    @given(seed=st.integers(0, 2**32 - 1), b=st.integers(1, 12))
    def test_doubly_stochastic_symmetric(self, seed, b):
        rng = np.random.default_rng(seed)
        W = metropolis_weights(random_connected_edges(rng, b), b)
        assert np.array_equal(W, W.T)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-15)
        assert W.min() >= 0.0

    def test_rejects_disconnected(self):
        with pytest.raises(TopologyError):
            metropolis_weights([(0, 1), (2, 3)], 4)

    @pytest.mark.parametrize("edges", [[(0, 0)], [(0, 4)], [(-1, 1)]])
    def test_rejects_bad_edges(self, edges):
        with pytest.raises(TopologyError):
            metropolis_weights(edges, 3)


class TestAveraging:
    def test_ring_converges_to_mean(self, rng):
        topo = Topology.ring(6)
        x = rng.standard_normal((6, 3, 3))
        out = run_consensus(x, topo, 50)
        np.testing.assert_allclose(out, np.broadcast_to(x.mean(axis=0), x.shape), atol=1e-6)

    def test_complete_graph_one_round(self, rng):
        topo = Topology.complete(5)
        x = rng.standard_normal((5, 4))
        np.testing.assert_allclose(consensus_round(x, topo), np.broadcast_to(x.mean(axis=0), x.shape), atol=1e-14)

    @given(seed=st.integers(0, 2**32 - 1), rounds=st.integers(0, 20))
    def test_sum_preserved(self, seed, rounds):
        rng = np.random.default_rng(seed)
        topo = Topology.default10()
        x = rng.standard_normal((10, 2))
        out = run_consensus(x, topo, rounds)
        np.testing.assert_allclose(out.sum(axis=0), x.sum(axis=0), atol=1e-12)

    @given(seed=st.integers(0, 2**32 - 1), p=st.floats(0, 1))
    def test_faulty_weights_stay_doubly_stochastic(self, seed, p):
        rng = np.random.default_rng(seed)
        topo = Topology.default10()
        W = faulty_weights(topo, rng.random(len(topo.edges)) < p)
        assert np.array_equal(W, W.T)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-15)

    def test_all_links_dropped_holds_values(self, rng):
        topo = Topology.default10()
        x = rng.standard_normal((10, 2))
        faults = LinkFaultModel(drop_probability=1.0)
        np.testing.assert_array_equal(consensus_round(x, topo, faults, rng), x)

    def test_faults_outside_window_ignored(self, rng):
        topo = Topology.default10()
        x = rng.standard_normal((10, 2))
        faults = LinkFaultModel(drop_probability=1.0, start=5)
        np.testing.assert_array_equal(consensus_round(x, topo, faults, None, step=4), consensus_round(x, topo))

    def test_active_faults_need_rng(self):
        with pytest.raises(ValueError):
            consensus_round(np.zeros((10, 1)), Topology.default10(), LinkFaultModel(0.5))

    def test_packed_terms_share_one_drop_pattern(self, rng):
        topo = Topology.default10()
        faults = LinkFaultModel(0.4)
        Om = rng.standard_normal((10, 3, 3))
        Xi = rng.standard_normal((10, 3))
        packed = run_consensus(np.concatenate([Om, Xi[:, :, None]], axis=2), topo, 4, faults,
                               np.random.default_rng(7))
        r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
        np.testing.assert_allclose(packed[:, :, :3], run_consensus(Om, topo, 4, faults, r1), atol=1e-14)
        np.testing.assert_allclose(packed[:, :, 3], run_consensus(Xi, topo, 4, faults, r2), atol=1e-14)


def test_information_terms_match_whitened_form(rng):
    n, m = 3, 4
    P, R = random_spd(rng, n), random_spd(rng, m)
    H = rng.standard_normal((m, n))
    mean = rng.standard_normal(n)
    v = H @ mean + rng.standard_normal(m)
    prior = GaussianBelief(mean, P)
    prob = build_regression(prior, v, linear_model(np.eye(n), H, np.zeros((n, n)), R))
    w = np.ones(n + m)
    Om, Xi = init_consensus_terms(prob, w)
    Om_ref, Xi_ref = information_terms(H, R, v)
    np.testing.assert_allclose(Om, Om_ref, atol=1e-10)
    np.testing.assert_allclose(Xi, Xi_ref, atol=1e-10)


def _static_network(rng, b, m, n=3, cov_scale=1.0):
    P = cov_scale * random_spd(rng, n)
    mean = rng.standard_normal(n)
    Hs = [rng.standard_normal((m, n)) for _ in range(b)]
    Rs = [random_spd(rng, m) for _ in range(b)]
    models = [linear_model(np.eye(n), H, np.zeros((n, n)), R) for H, R in zip(Hs, Rs)]
    beliefs = [GaussianBelief(mean.copy(), P.copy()) for _ in range(b)]
    return models, beliefs, Hs, Rs


class TestDistributedFilter:
    def test_two_nodes_match_centralized(self, rng):
        models, beliefs, Hs, Rs = _static_network(rng, 2, 2)
        truth = rng.standard_normal(3)
        vs = [H @ truth + 0.1 * rng.standard_normal(2) for H in Hs]
        flt = DistributedFilter(models, beliefs, Topology.complete(2), UpdateConfig(kernel=NoKernel()), rounds=1)
        flt.step(vs)
        H = np.vstack(Hs)
        R = np.zeros((4, 4))
        R[:2, :2], R[2:, 2:] = Rs
        prior = beliefs[0]
        mean, P = textbook_ekf(prior.mean, prior.cov, H, R, np.concatenate(vs) - H @ prior.mean)
        for bl in flt.beliefs:
            np.testing.assert_allclose(bl.mean, mean, atol=1e-8)
            np.testing.assert_allclose(bl.cov, P, atol=1e-8)

    @pytest.mark.parametrize("b,rounds", [(1, 3), (4, 0)])
    def test_no_exchange_keeps_local_posterior(self, rng, b, rounds):
        models, beliefs, Hs, _ = _static_network(rng, b, 3)
        cfg = UpdateConfig(kernel=MkmcKernel(KernelParams()))
        topo = Topology.ring(b) if b > 1 else Topology.from_edges([], 1)
        flt = DistributedFilter(models, beliefs, topo, cfg, rounds=rounds)
        vs = [H @ beliefs[0].mean + rng.standard_normal(3) for H in Hs]
        flt.step(vs)
        for i in range(b):
            local = fixed_point_update(build_regression(beliefs[i], vs[i], models[i]), cfg)
            np.testing.assert_allclose(flt.beliefs[i].mean, local.belief.mean, atol=1e-10)
            np.testing.assert_allclose(flt.beliefs[i].cov, local.belief.cov, atol=1e-10)

    def test_lost_measurement_contributes_nothing(self, rng):
        models, beliefs, Hs, _ = _static_network(rng, 3, 2)
        flt = DistributedFilter(models, beliefs, Topology.complete(3), UpdateConfig(kernel=NoKernel()), rounds=1)
        rep = flt.step([None, None, None])
        for bl, b0 in zip(flt.beliefs, beliefs):
            np.testing.assert_allclose(bl.mean, b0.mean, atol=1e-12)
        assert not rep.failed.any()

    def test_gated_node_keeps_prior_locally(self, rng):
        models, beliefs, Hs, _ = _static_network(rng, 3, 2)
        cfg = UpdateConfig(kernel=GaussianKernel(2.0), gate=True)
        flt = DistributedFilter(models, beliefs, Topology.ring(3), cfg, rounds=0)
        vs = [H @ beliefs[0].mean for H in Hs]
        vs[1] = vs[1] + 1e6
        rep = flt.step(vs)
        assert rep.gated.tolist() == [False, True, False]
        np.testing.assert_array_equal(flt.beliefs[1].mean, beliefs[1].mean)
        np.testing.assert_array_equal(flt.beliefs[1].cov, beliefs[1].cov)

    @pytest.mark.parametrize("kernel", [NoKernel(), MkmcKernel(KernelParams())])
    def test_batched_matches_nodewise(self, rng, kernel):
        models, beliefs, Hs, _ = _static_network(rng, 10, 3, cov_scale=4.0)
        cfg = UpdateConfig(kernel=kernel, gate=True)
        a = DistributedFilter(models, beliefs, Topology.default10(), cfg, rounds=3, batched=True)
        b = DistributedFilter(models, beliefs, Topology.default10(), cfg, rounds=3, batched=False)
        truth = rng.standard_normal(3)
        for k in range(5):
            vs = [H @ truth + rng.standard_t(2, 3) for H in Hs]
            vs[k] = vs[k] + 1e5  # a gated node each step
            ra, rb = a.step(vs, k), b.step(vs, k)
            np.testing.assert_array_equal(ra.gated, rb.gated)
            np.testing.assert_array_equal(ra.iterations, rb.iterations)
            np.testing.assert_allclose(a.means(), b.means(), atol=1e-10)
            np.testing.assert_allclose(a.covs(), b.covs(), atol=1e-10)

    def test_rejects_mismatched_sizes(self, rng):
        models, beliefs, _, _ = _static_network(rng, 2, 2)
        with pytest.raises(ValueError):
            DistributedFilter(models, beliefs, Topology.ring(3), UpdateConfig())
        with pytest.raises(ValueError):
            DistributedFilter(models, beliefs, Topology.ring(2), UpdateConfig(), rounds=-1)
