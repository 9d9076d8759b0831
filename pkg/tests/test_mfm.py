import math

import numpy as np
import pytest
from scipy import integrate, stats

from oracles import (canonical, log_block_marginal, log_partition_prior, log_vn_direct,
                     mrf_log_factor, ng_log_marginal_sequential, partition_posterior,
                     set_partitions)
from mrfcmfm.graph import neighborhoods
from mrfcmfm.mfm import (ChainState, ChainTrace, PriorConfig, _ng_log_marginal, block_stats,
                         compact_labels, gibbs_sweep, initial_state, label_weights, log_likelihood,
                         log_vn_table, run_chain, sample_blocks)

PATH4 = [("a", "b"), ("b", "c"), ("c", "d")]


def path_graph(d=1):
    return neighborhoods(PATH4, "abcd", d)


# --- V_n ---------------------------------------------------------------------

def test_vn_n1_w1_is_one():
    assert log_vn_table(1).log_vn[1] == pytest.approx(0.0, abs=1e-14)


def test_vn_n2_w1_direct_sum():
    rate = 1.0
    k = np.arange(1, 2000)
    pk = np.exp(k * math.log(rate) - rate - np.array([math.lgamma(x + 1) for x in k])) / (1 - math.exp(-rate))
    assert log_vn_table(2).log_vn[1] == pytest.approx(math.log(np.sum(pk / (k + 1))), rel=1e-12)


@pytest.mark.parametrize("n", [1, 3, 10, 51])
def test_vn_matches_plain_loop(n):
    tab = log_vn_table(n)
    for w in range(1, min(n, 8) + 1):
        assert tab.log_vn[w] == pytest.approx(log_vn_direct(n, w), rel=1e-12, abs=1e-12)


def test_vn_ratio_is_a_slowdown():
    for n in (2, 10, 51, 200):
        tab = log_vn_table(n)
        r = np.diff(tab.log_vn[1:n + 1])
        assert np.all(np.isfinite(r)) and np.all(r <= 0)


# --- conjugate algebra ---------------------------------------------------------

def test_ng_marginal_matches_sequential_predictives():
    rng = np.random.default_rng(0)
    for m in (1, 2, 5, 17):
        x = rng.normal(3, 0.7, m)
        mine = _ng_log_marginal(m, x.sum(), (x ** 2).sum(), 2.5, 2.0, 1.0, 1.0)
        assert mine == pytest.approx(ng_log_marginal_sequential(x, 2.5, 2.0, 1.0, 1.0), rel=1e-12)


def test_ng_marginal_two_points_numeric_integration():
    x = np.array([0.3, 1.1])
    mu0, k0, a, b = 0.5, 2.0, 1.0, 1.0

    def over_u(tau):
        f = lambda u: (stats.norm.pdf(u, mu0, 1 / math.sqrt(k0 * tau))
                       * np.prod(stats.norm.pdf(x, u, 1 / math.sqrt(tau))))
        return (integrate.quad(f, -30, 30, points=[mu0, x.mean()], limit=200)[0]
                * stats.gamma.pdf(tau, a, scale=1 / b))

    val = integrate.quad(over_u, 0, np.inf, limit=200)[0]
    assert math.log(val) == pytest.approx(_ng_log_marginal(2, x.sum(), (x ** 2).sum(), mu0, k0, a, b), abs=1e-6)


def test_single_entry_posterior_draws():
    # m=1, k0=2, alpha=beta=1: tau ~ Ga(1.5, 1 + (x-mu0)^2/3), U|tau ~ N((2 mu0 + x)/3, 1/(3 tau))
    Z = np.array([[0.0, 4.0], [4.0, 0.0]])
    prior = PriorConfig(mu0_diag=1.0, mu0_offdiag=1.0)
    z = np.array([0, 0])
    rng = np.random.default_rng(0)
    draws = np.array([sample_blocks(Z, z, prior, rng) for _ in range(40000)])
    U, T = draws[:, 0, 0, 0], draws[:, 1, 0, 0]
    rate = 1 + (4.0 - 1.0) ** 2 / 3
    assert T.mean() == pytest.approx(1.5 / rate, rel=0.02)
    assert stats.kstest(T, stats.gamma(1.5, scale=1 / rate).cdf).pvalue > 1e-3
    assert U.mean() == pytest.approx((2 * 1.0 + 4.0) / 3, abs=0.02)
    # marginal of U is Student-t with 2*1.5 dof, scale sqrt(rate / (1.5 * 3))
    t = stats.t(3, loc=2.0, scale=math.sqrt(rate / (1.5 * 3)))
    assert stats.kstest(U, t.cdf).pvalue > 1e-3


def test_empty_block_draws_from_prior():
    Z = np.zeros((3, 3))
    prior = PriorConfig(mu0_diag=5.0, mu0_offdiag=-1.0)
    z = np.array([0, 1, 1])  # block (0,0) has no strict-upper entries
    rng = np.random.default_rng(1)
    T = np.array([sample_blocks(Z, z, prior, rng)[1][0, 0] for _ in range(20000)])
    U = np.array([sample_blocks(Z, z, prior, rng)[0][0, 0] for _ in range(20000)])
    assert stats.kstest(T, stats.gamma(1.0).cdf).pvalue > 1e-3
    assert U.mean() == pytest.approx(5.0, abs=0.1)


def test_all_entries_at_prior_mean_keep_the_mean():
    Z = np.full((5, 5), 2.0)
    prior = PriorConfig(mu0_diag=2.0, mu0_offdiag=2.0)
    rng = np.random.default_rng(2)
    U = np.array([sample_blocks(Z, np.zeros(5, np.int64), prior, rng)[0][0, 0] for _ in range(20000)])
    assert U.mean() == pytest.approx(2.0, abs=0.01)


def test_block_stats_and_loglik_against_loops(toy_Z):
    z = np.array([0, 0, 1, 1])
    cnt, s1, s2 = block_stats(toy_Z, z, 2)
    assert cnt.tolist() == [[1, 4], [0, 1]]
    assert s1[0, 1] == pytest.approx(1.0 + 0.4 + 1.5 + 0.9)
    U = np.array([[3.0, 1.0], [1.0, 2.0]])
    T = np.array([[2.0, 0.5], [0.5, 1.5]])
    ref = sum(stats.norm.logpdf(toy_Z[i, j], U[z[i], z[j]], 1 / math.sqrt(T[z[i], z[j]]))
              for i in range(4) for j in range(i + 1, 4))
    assert log_likelihood(toy_Z, z, U, T) == pytest.approx(ref, rel=1e-12)


def test_prior_resolution_uses_strict_upper_triangle(toy_Z):
    Z = toy_Z.copy()
    np.fill_diagonal(Z, 99.0)
    p = PriorConfig().resolve(Z)
    assert p.mu0_diag == 3.0 and p.mu0_offdiag == 0.4


def test_prior_validation():
    for bad in ({"alpha": 0}, {"lam": -1}, {"k_prior": [0.5, 0.2]}):
        with pytest.raises(ValueError):
            PriorConfig(**bad)
    p = PriorConfig(k_prior=[0.25, 0.75])
    assert np.exp(p.log_k_prior(4)).tolist() == [0.25, 0.75, 0, 0]
    assert PriorConfig.from_dict(PriorConfig(lam=1.5).to_dict()).lam == 1.5


# --- full conditionals -------------------------------------------------------------

def _conditional_oracle(Z, z_rest, i, U, T, prior, pairs):
    """Exact conditional of z_i given the rest and explicit (U, T) for occupied rows.

    Existing c: prior ratio times the Normal likelihood of row i; new: prior
    ratio times the joint Normal-Gamma marginal of i's entries per block.
    """
    n = Z.shape[0]
    K = U.shape[0]
    out = []
    for c in range(K + 1):
        z = np.array(z_rest)
        z[i] = c
        lp = log_partition_prior(canonical(z), prior.gamma_dir) + mrf_log_factor(z, pairs, prior.lam)
        if c < K:
            lp += sum(stats.norm.logpdf(Z[i, j], U[c, z[j]], 1 / math.sqrt(T[c, z[j]]))
                      for j in range(n) if j != i)
        else:
            for t in range(K):
                x = [Z[i, j] for j in range(n) if j != i and z[j] == t]
                if x:
                    lp += ng_log_marginal_sequential(x, prior.mu0_offdiag, prior.k0, prior.alpha, prior.beta)
        out.append(lp)
    return np.array(out)


@pytest.mark.parametrize("lam", [0.0, 1.0, 2.5])
def test_label_weights_match_joint_density_ratios(toy_Z, lam):
    prior = PriorConfig(lam=lam).resolve(toy_Z)
    tab = log_vn_table(4)
    rng = np.random.default_rng(3)
    pairs = [(0, 1), (1, 2), (2, 3)]
    for z_rest in ([0, 0, 1, 1], [0, 1, 1, 0], [0, 0, 0, 0], [0, 1, 2, 0]):
        for i in range(4):
            z = np.array(z_rest)
            others = compact_labels(np.delete(z, i))
            z_minus = np.insert(others, i, 0)
            K = int(others.max()) + 1
            U = rng.normal(2, 1, (K, K))
            U = (U + U.T) / 2
            T = rng.gamma(2.0, 1.0, (K, K))
            T = (T + T.T) / 2
            w = label_weights(i, toy_Z, z_minus, U, T, path_graph(), prior, tab, order="abcd")
            z_or = z_minus.copy()
            ref = _conditional_oracle(toy_Z, z_or, i, U, T, prior, pairs)
            np.testing.assert_allclose(w - w[0], ref - ref[0], rtol=1e-10, atol=1e-10)


def test_lambda_zero_ignores_graph(toy_Z):
    prior = PriorConfig(lam=0.0).resolve(toy_Z)
    tab = log_vn_table(4)
    U = np.array([[3.0, 1.0], [1.0, 2.5]])
    T = np.ones((2, 2))
    z = np.array([0, 0, 1, 1])
    a = label_weights(1, toy_Z, z, U, T, path_graph(), prior, tab, order="abcd")
    b = label_weights(1, toy_Z, z, U, T, None, prior, tab)
    np.testing.assert_array_equal(a, b)


def test_isolated_node_has_no_mrf_term(toy_Z):
    g = neighborhoods([("a", "b"), ("b", "c")], "abcd", 1)
    tab = log_vn_table(4)
    U = np.array([[3.0, 1.0], [1.0, 2.5]])
    T = np.ones((2, 2))
    z = np.array([0, 0, 1, 1])
    on = label_weights(3, toy_Z, z, U, T, g, PriorConfig(lam=3.0).resolve(toy_Z), tab, order="abcd")
    off = label_weights(3, toy_Z, z, U, T, g, PriorConfig(lam=0.0).resolve(toy_Z), tab, order="abcd")
    np.testing.assert_array_equal(on, off)


# --- sampler ------------------------------------------------------------------------

def _posterior_tv(Z, graph, lam, sweeps, seed, pairs):
    prior = PriorConfig(lam=lam).resolve(Z)
    exact = partition_posterior(Z, pairs, lam, prior.mu0_diag, prior.mu0_offdiag)
    trace = run_chain(Z, graph, prior, sweeps + 200, 200, min(4, Z.shape[0]), rng_seed=seed,
                      order=list(graph.node_ids) if graph is not None else None)
    counts = {}
    for s in trace.states:
        key = canonical(s.z)
        counts[key] = counts.get(key, 0) + 1
    return 0.5 * sum(abs(counts.get(p, 0) / len(trace) - w) for p, w in exact.items())


def test_two_node_strong_similarity_merges():
    Z = np.array([[0.0, 8.0], [8.0, 0.0]])
    g = neighborhoods([], "ab", 1)
    prior = PriorConfig(mu0_diag=8.0, mu0_offdiag=0.0)
    exact = partition_posterior(Z, [], 0.0, 8.0, 0.0)
    assert exact[(0, 0)] > 0.9
    trace = run_chain(Z, g, prior, 20200, 200, 2, rng_seed=1)
    together = np.mean([s.K == 1 for s in trace.states])
    assert together > 0.9 and abs(together - exact[(0, 0)]) < 0.02


def test_large_lambda_collapses_path_graph():
    Z = np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.8], [0.5, 0.8, 0.0]])
    g = neighborhoods([("a", "b"), ("b", "c")], "abc", 1)
    prior = PriorConfig(lam=50.0).resolve(Z)
    exact = partition_posterior(Z, [(0, 1), (1, 2)], 50.0, prior.mu0_diag, prior.mu0_offdiag)
    assert exact[(0, 0, 0)] > 0.99
    trace = run_chain(Z, g, prior, 2200, 200, 3, rng_seed=2, order="abc")
    assert np.mean([s.K == 1 for s in trace.states]) > 0.99


def test_five_node_posterior_matches_enumeration():
    rng = np.random.default_rng(5)
    A = rng.normal(1.0, 0.8, (5, 5))
    Z = np.triu(A, 1) + np.triu(A, 1).T
    Z[:2, :2] += 2.0
    Z[2:, 2:] += 1.5
    np.fill_diagonal(Z, 0)
    g = neighborhoods([("a", "b"), ("b", "c"), ("c", "d"), ("d", "e")], "abcde", 1)
    assert _posterior_tv(Z, g, 1.0, 40000, 7, [(0, 1), (1, 2), (2, 3), (3, 4)]) < 0.05


def test_sweeps_are_deterministic(toy_Z):
    prior = PriorConfig(lam=1.0).resolve(toy_Z)
    tab = log_vn_table(4)
    s0 = initial_state(toy_Z, prior, np.random.default_rng(0), 3)
    a = gibbs_sweep(s0, toy_Z, path_graph(), prior, tab, np.random.default_rng(9))
    b = gibbs_sweep(s0, toy_Z, path_graph(), prior, tab, np.random.default_rng(9))
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.U, b.U)


def test_chain_state_invariants_and_trace_length(toy_Z):
    prior = PriorConfig(lam=0.5)
    tr = run_chain(toy_Z, path_graph(), prior, 300, 100, rng_seed=4, order="abcd")
    assert len(tr) == 200
    for s in tr.states:
        assert sorted(set(s.z.tolist())) == list(range(s.K))
        assert s.U.shape == (s.K, s.K)
        np.testing.assert_array_equal(s.U, s.U.T)
        np.testing.assert_array_equal(s.T, s.T.T)
        assert np.all(s.T > 0)
    assert len(run_chain(toy_Z, None, prior, 1, 0, rng_seed=0)) == 1
    with pytest.raises(ValueError):
        run_chain(toy_Z, None, prior, 5, 5)


def test_same_seed_same_trace(toy_Z):
    prior = PriorConfig(lam=1.0)
    a = run_chain(toy_Z, path_graph(), prior, 50, 0, rng_seed=12, order="abcd")
    b = run_chain(toy_Z, path_graph(), prior, 50, 0, rng_seed=12, order="abcd")
    assert all(np.array_equal(x.z, y.z) and np.array_equal(x.U, y.U) for x, y in zip(a.states, b.states))
    np.testing.assert_array_equal(a.log_likelihood, b.log_likelihood)


def test_permuting_nodes_permutes_the_partition(toy_Z):
    # sweeps visit nodes in order, so draws differ; posterior co-clustering
    # frequencies must still agree with the exact permuted posterior
    perm = np.array([2, 0, 3, 1])
    Zp = toy_Z[np.ix_(perm, perm)]
    prior = PriorConfig().resolve(toy_Z)
    exact = partition_posterior(toy_Z, [], 0.0, prior.mu0_diag, prior.mu0_offdiag)
    co = sum(w * (np.array(p)[:, None] == np.array(p)[None, :]) for p, w in exact.items())
    for Zx, target, seed in ((toy_Z, co, 1), (Zp, co[np.ix_(perm, perm)], 2)):
        tr = run_chain(Zx, None, PriorConfig(), 20200, 200, rng_seed=seed)
        emp = np.mean([s.z[:, None] == s.z[None, :] for s in tr.states], axis=0)
        np.testing.assert_allclose(emp, target, atol=0.04)


def test_trace_jsonl_roundtrip(tmp_path, toy_Z):
    tr = run_chain(toy_Z, None, PriorConfig(), 20, 10, rng_seed=3)
    tr.write_jsonl(tmp_path / "t.jsonl")
    back = ChainTrace.read_jsonl(tmp_path / "t.jsonl")
    assert len(back) == 10
    assert back.states[0].z.min() == 0
    np.testing.assert_array_equal(back.states[-1].U, tr.states[-1].U)
    import json
    first = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
    assert set(first) == {"iteration", "z", "U", "T", "log_likelihood"} and min(first["z"]) == 1


@pytest.mark.slow
def test_lambda_reduces_cluster_count_on_design_data(design1_strong):
    from mrfcmfm.experiment import ReplicationConfig, replicate_similarity
    from mrfcmfm.graph import us_states_adjacency
    _, sim = replicate_similarity(design1_strong, 0, ReplicationConfig(), 31)
    edges, _ = us_states_adjacency()
    g = neighborhoods(edges, design1_strong.state_ids, 3)
    means = []
    for lam in (0.0, 1.0, 2.0, 3.0):
        ks = [np.mean([s.K for s in run_chain(sim.Z, g, PriorConfig(lam=lam), 500, 250, rng_seed=(seed, int(lam)),
                                                order=design1_strong.state_ids).states])
              for seed in range(20)]
        means.append(np.mean(ks))
    assert all(b <= a + 1e-9 for a, b in zip(means, means[1:])), means
