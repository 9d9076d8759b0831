"""MFM / MRF-constrained MFM clustering of a Fisher-transformed similarity matrix.

Model: entries ``Z[i, j]`` (i < j) are independent ``N(U[z_i, z_j], 1 / T[z_i, z_j])``
with a Normal-Gamma prior on each symmetric block ``(U_rs, T_rs)`` and a
mixture-of-finite-mixtures partition prior tilted by a Potts-type factor
``exp(lam * #{neighbours sharing the label})``.

The sampler keeps explicit block parameters for occupied clusters and scores
a fresh cluster by the block-wise Normal-Gamma marginal of node i's entries,
drawing the new row of ``(U, T)`` from the matching conditional posterior
when the fresh cluster is chosen.  ``(U, T)`` are refreshed from their
conjugate posterior after every sweep over the labels.  The MRF normaliser
cancels from every full conditional and is never computed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numba
import numpy as np
from scipy.special import gammaln, logsumexp

from .graph import NeighborhoodGraph

LOG_2PI = math.log(2.0 * math.pi)
KMAX = 500


@dataclass
class PriorConfig:
    """Hyperparameters.  ``mu0_*`` left as ``None`` are filled from the data
    (max / min of the strict upper triangle of Z) by :meth:`resolve`."""

    gamma_dir: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    k0: float = 2.0
    mu0_diag: Optional[float] = None
    mu0_offdiag: Optional[float] = None
    lam: float = 0.0
    k_prior: Optional[Sequence[float]] = None
    poisson_rate: float = 1.0
    include_diagonal: bool = False

    def __post_init__(self):
        for name in ("gamma_dir", "alpha", "beta", "k0", "poisson_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.k_prior is not None:
            p = np.asarray(self.k_prior, dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("k_prior must be a p.m.f. on 1..len(k_prior)")

    def resolve(self, Z: np.ndarray) -> "PriorConfig":
        iu = np.triu_indices(Z.shape[0], 1)
        upper = Z[iu]
        return replace(
            self,
            mu0_diag=float(upper.max()) if self.mu0_diag is None else self.mu0_diag,
            mu0_offdiag=float(upper.min()) if self.mu0_offdiag is None else self.mu0_offdiag,
        )

    def log_k_prior(self, kmax: int = KMAX) -> np.ndarray:
        """log p(k) for k = 1..kmax (zero-truncated Poisson unless a pmf is given)."""
        k = np.arange(1, kmax + 1)
        if self.k_prior is not None:
            p = np.zeros(kmax)
            given = np.asarray(self.k_prior, dtype=float)[:kmax]
            p[: given.size] = given
            with np.errstate(divide="ignore"):
                return np.log(p)
        rate = self.poisson_rate
        return k * math.log(rate) - rate - gammaln(k + 1) - math.log1p(-math.exp(-rate))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if d["k_prior"] is not None:
            d["k_prior"] = list(d["k_prior"])
        return d

    @classmethod
    def from_dict(cls, d) -> "PriorConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LogVnTable:
    """``log_vn[w]`` for w = 0..n+1."""

    n: int
    log_vn: np.ndarray
    kmax: int = KMAX

    def __getitem__(self, w: int) -> float:
        return float(self.log_vn[w])

    def log_ratio(self, w: int) -> float:
        """log V_n(w+1) - log V_n(w): the MFM slowdown for opening cluster w+1."""
        return float(self.log_vn[w + 1] - self.log_vn[w])


def log_vn_table(n: int, gamma_dir: float = 1.0, log_k_prior: Optional[np.ndarray] = None) -> LogVnTable:
    """Precompute log V_n(w) = log sum_k k_(w) / (gamma k)^(n) p(k).

    Terms are summed in log space up to k = len(log_k_prior) (500 by default);
    for the zero-truncated Poisson(1) prior the omitted tail is far below
    double precision.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if log_k_prior is None:
        log_k_prior = PriorConfig(gamma_dir=gamma_dir).log_k_prior()
    kmax = log_k_prior.size
    k = np.arange(1, kmax + 1, dtype=float)
    rising = gammaln(gamma_dir * k + n) - gammaln(gamma_dir * k)
    out = np.empty(n + 2)
    for w in range(n + 2):
        with np.errstate(invalid="ignore"):
            falling = np.where(k >= w, gammaln(k + 1) - gammaln(np.maximum(k - w + 1, 1)), -np.inf)
        out[w] = logsumexp(log_k_prior + falling - rising)
    return LogVnTable(n, out, kmax)


@dataclass
class ChainState:
    """Labels are compact and 0-based (0..K-1); U and T are K x K."""

    z: np.ndarray
    U: np.ndarray
    T: np.ndarray
    iteration: int = 0

    @property
    def K(self) -> int:
        return int(self.U.shape[0])

    def copy(self) -> "ChainState":
        return ChainState(self.z.copy(), self.U.copy(), self.T.copy(), self.iteration)


@dataclass
class ChainTrace:
    states: List[ChainState]
    log_likelihood: np.ndarray
    seed: object
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s, ll in zip(self.states, self.log_likelihood):
                fh.write(json.dumps({"iteration": s.iteration, "z": (s.z + 1).tolist(),
                                     "U": s.U.tolist(), "T": s.T.tolist(),
                                     "log_likelihood": float(ll)}) + "\n")

    @classmethod
    def read_jsonl(cls, path, seed=None, config=None) -> "ChainTrace":
        states, ll = [], []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            states.append(ChainState(np.asarray(r["z"], dtype=np.int64) - 1, np.asarray(r["U"]),
                                     np.asarray(r["T"]), r["iteration"]))
            ll.append(r["log_likelihood"])
        return cls(states, np.asarray(ll), seed, config or {})


# --- conjugate algebra (scalar, shared by numba kernels) ------------------------

@numba.njit(cache=True)
def _ng_posterior(m, s1, s2, mu0, k0, alpha, beta):
    """Normal-Gamma posterior (mean, precision scale, shape, rate) from m entries."""
    if m == 0:
        return mu0, k0, alpha, beta
    xbar = s1 / m
    ss = max(s2 - s1 * xbar, 0.0)
    kn = k0 + m
    return ((k0 * mu0 + s1) / kn, kn, alpha + 0.5 * m,
            beta + 0.5 * ss + k0 * m * (xbar - mu0) ** 2 / (2.0 * kn))


@numba.njit(cache=True)
def _ng_log_marginal(m, s1, s2, mu0, k0, alpha, beta):
    if m == 0:
        return 0.0
    _, kn, an, bn = _ng_posterior(m, s1, s2, mu0, k0, alpha, beta)
    return (math.lgamma(an) - math.lgamma(alpha) + alpha * math.log(beta) - an * math.log(bn)
            + 0.5 * math.log(k0 / kn) - 0.5 * m * 1.8378770664093453)


@numba.njit(cache=True)
def _normal_block_loglik(m, s1, s2, u, tau):
    if m == 0:
        return 0.0
    return m * 0.5 * (math.log(tau) - 1.8378770664093453) - 0.5 * tau * (s2 - 2.0 * u * s1 + m * u * u)


@numba.njit(cache=True)
def _row_stats(i, Z, z, K, cnt, s1, s2):
    for t in range(K):
        cnt[t] = 0
        s1[t] = 0.0
        s2[t] = 0.0
    for j in range(z.size):
        t = z[j]
        if j == i or t < 0:
            continue
        x = Z[i, j]
        cnt[t] += 1
        s1[t] += x
        s2[t] += x * x


@numba.njit(cache=True)
def _node_log_weights(i, Z, z, K, counts, U, T, nb_ptr, nb_idx, log_vn, gamma_dir, lam,
                      alpha, beta, k0, mu_d, mu_o, include_diag, cnt, s1, s2, nbc, out):
    """Unnormalised log full conditional of z_i over K existing clusters + 1 new.

    ``z[i]`` must be excluded (set to -1) and ``counts`` must not include i.
    """
    _row_stats(i, Z, z, K, cnt, s1, s2)
    for t in range(K):
        nbc[t] = 0
    for p in range(nb_ptr[i], nb_ptr[i + 1]):
        t = z[nb_idx[p]]
        if t >= 0:
            nbc[t] += 1
    zii = Z[i, i]
    for c in range(K):
        acc = math.log(counts[c] + gamma_dir) + lam * nbc[c]
        for t in range(K):
            acc += _normal_block_loglik(cnt[t], s1[t], s2[t], U[c, t], T[c, t])
        if include_diag:
            acc += _normal_block_loglik(1, zii, zii * zii, U[c, c], T[c, c])
        out[c] = acc
    acc = math.log(gamma_dir) + log_vn[K + 1] - log_vn[K]
    for t in range(K):
        acc += _ng_log_marginal(cnt[t], s1[t], s2[t], mu_o, k0, alpha, beta)
    if include_diag:
        acc += _ng_log_marginal(1, zii, zii * zii, mu_d, k0, alpha, beta)
    out[K] = acc


@numba.njit(cache=True)
def _drop_cluster(c, K, z, counts, U, T):
    """Remove empty cluster c by moving cluster K-1 into its slot."""
    last = K - 1
    if c != last:
        for j in range(z.size):
            if z[j] == last:
                z[j] = c
        counts[c] = counts[last]
        for t in range(K):
            U[c, t] = U[last, t]
            T[c, t] = T[last, t]
        for t in range(K):
            U[t, c] = U[c, t]
            T[t, c] = T[c, t]
        U[c, c] = U[last, last]
        T[c, c] = T[last, last]
    counts[last] = 0


@numba.njit(cache=True)
def _draw_ng(m, s1, s2, mu0, k0, alpha, beta, rng):
    mn, kn, an, bn = _ng_posterior(m, s1, s2, mu0, k0, alpha, beta)
    tau = rng.standard_gamma(an) / bn
    u = mn + rng.standard_normal() / math.sqrt(kn * tau)
    return u, tau


@numba.njit(cache=True)
def _sweep_labels(Z, z, counts, K, U, T, nb_ptr, nb_idx, log_vn, gamma_dir, lam,
                  alpha, beta, k0, mu_d, mu_o, include_diag, rng):
    n = z.size
    cnt = np.zeros(n + 1, np.int64)
    s1 = np.zeros(n + 1)
    s2 = np.zeros(n + 1)
    nbc = np.zeros(n + 1, np.int64)
    logw = np.zeros(n + 2)
    for i in range(n):
        c_old = z[i]
        z[i] = -1
        counts[c_old] -= 1
        if counts[c_old] == 0:
            _drop_cluster(c_old, K, z, counts, U, T)
            K -= 1
        _node_log_weights(i, Z, z, K, counts, U, T, nb_ptr, nb_idx, log_vn, gamma_dir, lam,
                          alpha, beta, k0, mu_d, mu_o, include_diag, cnt, s1, s2, nbc, logw)
        # Gumbel-max categorical draw
        best = -np.inf
        c = 0
        for k in range(K + 1):
            v = logw[k] - math.log(rng.standard_exponential())
            if v > best:
                best = v
                c = k
        if c == K:
            for t in range(K):
                u, tau = _draw_ng(cnt[t], s1[t], s2[t], mu_o, k0, alpha, beta, rng)
                U[c, t] = u
                U[t, c] = u
                T[c, t] = tau
                T[t, c] = tau
            zii = Z[i, i]
            if include_diag:
                u, tau = _draw_ng(1, zii, zii * zii, mu_d, k0, alpha, beta, rng)
            else:
                u, tau = _draw_ng(0, 0.0, 0.0, mu_d, k0, alpha, beta, rng)
            U[c, c] = u
            T[c, c] = tau
            counts[c] = 0
            K += 1
        z[i] = c
        counts[c] += 1
    return K


# --- numpy-level operations -----------------------------------------------------

def compact_labels(z) -> np.ndarray:
    """Relabel to 0..K-1 in order of first appearance."""
    _, first, inv = np.unique(np.asarray(z), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


def block_stats(Z: np.ndarray, z: np.ndarray, K: int, include_diagonal: bool = False):
    """Per-block (count, sum, sum of squares) over modelled entries, as K x K arrays."""
    n = Z.shape[0]
    iu, ju = np.triu_indices(n, 0 if include_diagonal else 1)
    x = Z[iu, ju]
    r = np.minimum(z[iu], z[ju])
    s = np.maximum(z[iu], z[ju])
    idx = r * K + s
    cnt = np.bincount(idx, minlength=K * K).reshape(K, K)
    s1 = np.bincount(idx, weights=x, minlength=K * K).reshape(K, K)
    s2 = np.bincount(idx, weights=x * x, minlength=K * K).reshape(K, K)
    return cnt, s1, s2


@numba.njit(cache=True)
def _block_stats_nb(Z, z, K, include_diag):
    n = z.size
    cnt = np.zeros((K, K), np.int64)
    s1 = np.zeros((K, K))
    s2 = np.zeros((K, K))
    off = 0 if include_diag else 1
    for i in range(n):
        for j in range(i + off, n):
            r = min(z[i], z[j])
            s = max(z[i], z[j])
            x = Z[i, j]
            cnt[r, s] += 1
            s1[r, s] += x
            s2[r, s] += x * x
    return cnt, s1, s2


@numba.njit(cache=True)
def _sample_blocks_nb(Z, z, K, mu_d, mu_o, k0, alpha, beta, include_diag, rng):
    cnt, s1, s2 = _block_stats_nb(Z, z, K, include_diag)
    nb = K * (K + 1) // 2
    shape = np.empty(nb)
    rate = np.empty(nb)
    mean = np.empty(nb)
    kn = np.empty(nb)
    p = 0
    for r in range(K):
        for s in range(r, K):
            mu0 = mu_d if r == s else mu_o
            mean[p], kn[p], shape[p], rate[p] = _ng_posterior(cnt[r, s], s1[r, s], s2[r, s],
                                                              mu0, k0, alpha, beta)
            p += 1
    # all precisions first, then all means: the same stream as the vectorised draws
    tau = np.empty(nb)
    for p in range(nb):
        tau[p] = rng.standard_gamma(shape[p]) / rate[p]
    U = np.empty((K, K))
    T = np.empty((K, K))
    p = 0
    for r in range(K):
        for s in range(r, K):
            u = mean[p] + rng.standard_normal() / math.sqrt(kn[p] * tau[p])
            U[r, s] = u
            U[s, r] = u
            T[r, s] = tau[p]
            T[s, r] = tau[p]
            p += 1
    return U, T


@numba.njit(cache=True)
def _log_likelihood_nb(Z, z, U, T, include_diag):
    n = z.size
    off = 0 if include_diag else 1
    acc = 0.0
    for i in range(n):
        for j in range(i + off, n):
            tau = T[z[i], z[j]]
            d = Z[i, j] - U[z[i], z[j]]
            acc += 0.5 * (math.log(tau) - LOG_2PI) - 0.5 * tau * d * d
    return acc


def sample_blocks(Z: np.ndarray, z: np.ndarray, prior: PriorConfig, rng):
    """Draw every ``(U_rs, T_rs)``, r <= s, from its Normal-Gamma posterior."""
    _check_prior(prior)
    z = np.asarray(z, dtype=np.int64)
    K = int(z.max()) + 1
    return _sample_blocks_nb(np.ascontiguousarray(Z, dtype=float), z, K, prior.mu0_diag,
                             prior.mu0_offdiag, prior.k0, prior.alpha, prior.beta,
                             prior.include_diagonal, rng)


def log_likelihood(Z: np.ndarray, z: np.ndarray, U: np.ndarray, T: np.ndarray,
                   include_diagonal: bool = False) -> float:
    """sum of log N(Z_ij; U_{z_i z_j}, 1/T_{z_i z_j}) over modelled entries."""
    return float(_log_likelihood_nb(np.ascontiguousarray(Z, dtype=float),
                                    np.asarray(z, dtype=np.int64), np.ascontiguousarray(U, dtype=float),
                                    np.ascontiguousarray(T, dtype=float), include_diagonal))


def _neighbor_csr(graph: Optional[NeighborhoodGraph], n: int, order=None):
    if graph is None:
        return np.zeros(n + 1, np.int64), np.zeros(0, np.int64)
    indptr, indices = graph.csr(order)
    if indptr.size != n + 1:
        raise ValueError("graph size does not match the similarity matrix")
    return indptr, indices


def _check_prior(prior: PriorConfig):
    if prior.mu0_diag is None or prior.mu0_offdiag is None:
        raise ValueError("prior must be resolved against Z first (PriorConfig.resolve)")


def label_weights(i: int, Z: np.ndarray, z_minus_i: np.ndarray, U: np.ndarray, T: np.ndarray,
                  graph: Optional[NeighborhoodGraph], prior: PriorConfig, log_vn: LogVnTable,
                  order=None) -> np.ndarray:
    """Unnormalised log-probabilities of z_i over the K* clusters of ``z_minus_i`` plus a new one.

    ``z_minus_i[i]`` is ignored; the remaining labels must be compact over
    0..K*-1 and ``U``, ``T`` must be K* x K*.
    """
    _check_prior(prior)
    n = Z.shape[0]
    z = np.asarray(z_minus_i, dtype=np.int64).copy()
    z[i] = -1
    K = int(U.shape[0])
    counts = np.bincount(z[z >= 0], minlength=K).astype(np.int64)
    nb_ptr, nb_idx = _neighbor_csr(graph, n, order)
    out = np.empty(K + 1)
    _node_log_weights(i, np.ascontiguousarray(Z, dtype=float), z, K, counts,
                      np.ascontiguousarray(U, dtype=float), np.ascontiguousarray(T, dtype=float),
                      nb_ptr, nb_idx, log_vn.log_vn, prior.gamma_dir, prior.lam, prior.alpha,
                      prior.beta, prior.k0, prior.mu0_diag, prior.mu0_offdiag, prior.include_diagonal,
                      np.zeros(K + 1, np.int64), np.zeros(K + 1), np.zeros(K + 1),
                      np.zeros(K + 1, np.int64), out)
    return out


class _Sweeper:
    """Preallocated buffers for repeated sweeps on one problem."""

    def __init__(self, Z, graph, prior, log_vn, order=None):
        _check_prior(prior)
        self.Z = np.ascontiguousarray(Z, dtype=float)
        self.n = self.Z.shape[0]
        self.prior = prior
        self.log_vn = log_vn
        self.nb_ptr, self.nb_idx = _neighbor_csr(graph, self.n, order)
        self.U = np.zeros((self.n + 1, self.n + 1))
        self.T = np.ones((self.n + 1, self.n + 1))

    def sweep(self, state: ChainState, rng) -> ChainState:
        p = self.prior
        z = state.z.astype(np.int64).copy()
        K = state.K
        self.U[:K, :K] = state.U
        self.T[:K, :K] = state.T
        counts = np.zeros(self.n + 1, np.int64)
        counts[:K] = np.bincount(z, minlength=K)
        K = _sweep_labels(self.Z, z, counts, K, self.U, self.T, self.nb_ptr, self.nb_idx,
                          self.log_vn.log_vn, p.gamma_dir, p.lam, p.alpha, p.beta, p.k0,
                          p.mu0_diag, p.mu0_offdiag, p.include_diagonal, rng)
        if np.any(counts[:K] == 0) or z.max() != K - 1:
            from .errors import InvariantError
            raise InvariantError("labels not compact after sweep")
        U, T = sample_blocks(self.Z, z, p, rng)
        return ChainState(z, U, T, state.iteration + 1)


def gibbs_sweep(state: ChainState, Z: np.ndarray, graph: Optional[NeighborhoodGraph],
                prior: PriorConfig, log_vn: LogVnTable, rng) -> ChainState:
    """One pass over z_1..z_n followed by a conjugate refresh of (U, T)."""
    return _Sweeper(Z, graph, prior, log_vn).sweep(state, rng)


def initial_state(Z: np.ndarray, prior: PriorConfig, rng, init_clusters: int = 9,
                  z0: Optional[np.ndarray] = None) -> ChainState:
    n = Z.shape[0]
    if z0 is None:
        z0 = rng.integers(0, min(init_clusters, n), size=n)
    z = compact_labels(z0)
    U, T = sample_blocks(Z, z, prior, rng)
    return ChainState(z, U, T, 0)


def run_chain(Z: np.ndarray, graph: Optional[NeighborhoodGraph], prior: PriorConfig,
              iterations: int = 500, burn_in: int = 250, init_clusters: int = 9,
              rng_seed=None, z0: Optional[np.ndarray] = None, order=None) -> ChainTrace:
    """Run one chain and keep every post-burn-in state.

    ``prior`` is resolved against ``Z`` when its ``mu0`` entries are unset.
    ``order`` gives the node ids matching the rows of ``Z`` when ``graph``
    lists them differently.
    """
    if not iterations > burn_in >= 0:
        raise ValueError("need iterations > burn_in >= 0")
    Z = np.asarray(Z, dtype=float)
    prior = prior.resolve(Z)
    rng = np.random.default_rng(rng_seed)
    log_vn = log_vn_table(Z.shape[0], prior.gamma_dir, prior.log_k_prior())
    sweeper = _Sweeper(Z, graph if prior.lam > 0 else None, prior, log_vn, order)
    state = initial_state(Z, prior, rng, init_clusters, z0)
    states, ll = [], []
    for it in range(iterations):
        state = sweeper.sweep(state, rng)
        if it >= burn_in:
            states.append(state)
            ll.append(log_likelihood(Z, state.z, state.U, state.T, prior.include_diagonal))
    config = {"prior": prior.to_dict(), "iterations": iterations, "burn_in": burn_in,
              "init_clusters": init_clusters,
              "neighbor_limit": None if graph is None else graph.neighbor_limit}
    return ChainTrace(states, np.asarray(ll), rng_seed, config)
