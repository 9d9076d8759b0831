"""Posterior summaries, clustering agreement, mDIC model selection and baselines."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from .graph import NeighborhoodGraph, neighborhoods
from .mfm import ChainTrace, PriorConfig, log_likelihood, run_chain


@dataclass
class PosteriorSummary:
    selected_iteration: int
    z_hat: np.ndarray
    U_hat: np.ndarray
    T_hat: np.ndarray
    mean_pairwise: np.ndarray
    mdic: Optional[float] = None
    dev_hat: Optional[float] = None
    p_d: Optional[float] = None
    lam: Optional[float] = None
    neighbor_limit: Optional[int] = None
    runtime_ms: Optional[float] = None

    @property
    def K_hat(self) -> int:
        return int(len(np.unique(self.z_hat)))

    def to_dict(self, ids: Optional[Sequence[str]] = None, truth=None) -> dict:
        d = {"lambda": self.lam, "neighbor_limit": self.neighbor_limit, "mdic": self.mdic,
             "dev_hat": self.dev_hat, "p_d": self.p_d, "K_hat": self.K_hat,
             "selected_iteration": self.selected_iteration,
             "z_hat": (np.asarray(self.z_hat) + 1).tolist(),
             "U_hat": self.U_hat.tolist(), "T_hat": self.T_hat.tolist()}
        if ids is not None:
            d["ids"] = list(ids)
        if self.runtime_ms is not None:
            d["runtime_ms"] = self.runtime_ms
        if truth is not None:
            d["ari_vs_truth"] = adjusted_rand_index(self.z_hat, truth)
        return d

    @classmethod
    def from_dict(cls, d) -> "PosteriorSummary":
        z = np.asarray(d["z_hat"], dtype=np.int64) - 1
        n = z.size
        return cls(d.get("selected_iteration", -1), z, np.asarray(d["U_hat"]), np.asarray(d["T_hat"]),
                   np.full((n, n), np.nan), d.get("mdic"), d.get("dev_hat"), d.get("p_d"),
                   d.get("lambda"), d.get("neighbor_limit"), d.get("runtime_ms"))


def membership_matrix(z) -> np.ndarray:
    z = np.asarray(z)
    return (z[:, None] == z[None, :]).astype(float)


def dahl_summary(trace: ChainTrace) -> PosteriorSummary:
    """Least-squares (Dahl) partition: the draw closest to the mean co-clustering matrix."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    Z = np.stack([s.z for s in trace.states])
    n = Z.shape[1]
    Bbar = np.zeros((n, n))
    for z in Z:
        Bbar += membership_matrix(z)
    Bbar /= len(Z)
    dist = np.array([np.sum((membership_matrix(z) - Bbar) ** 2) for z in Z])
    t = int(np.argmin(dist))  # first minimum on ties
    s = trace.states[t]
    return PosteriorSummary(t, s.z.copy(), s.U.copy(), s.T.copy(), Bbar)


def _contingency(z1, z2):
    z1 = np.asarray(z1)
    z2 = np.asarray(z2)
    if z1.shape != z2.shape:
        raise ValueError("partitions have different lengths")
    if z1.size < 2:
        raise ValueError("need at least two items")
    _, a = np.unique(z1, return_inverse=True)
    _, b = np.unique(z2, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2.0


def adjusted_rand_index(z1, z2) -> float:
    """Hubert-Arabie adjusted Rand index (can be negative)."""
    table = _contingency(z1, z2)
    n = table.sum()
    index = _comb2(table).sum()
    a = _comb2(table.sum(axis=1)).sum()
    b = _comb2(table.sum(axis=0)).sum()
    expected = a * b / _comb2(n)
    denom = 0.5 * (a + b) - expected
    if denom == 0:
        return 1.0
    return float((index - expected) / denom)


def rand_index(z1, z2) -> float:
    table = _contingency(z1, z2)
    n = table.sum()
    agree_same = _comb2(table).sum()
    a = _comb2(table.sum(axis=1)).sum()
    b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    return float((total + 2 * agree_same - a - b) / total)


def deviance(Z, z, U, T, include_diagonal: bool = False) -> float:
    return -2.0 * log_likelihood(Z, z, U, T, include_diagonal)


def mdic_penalty(n: int, printed: bool = True) -> float:
    """log of the modelled-entry count; ``printed`` keeps n(n+1)/2, else n(n-1)/2."""
    return math.log(n * (n + 1) / 2.0) if printed else math.log(n * (n - 1) / 2.0)


def mdic(Z, trace: ChainTrace, summary: PosteriorSummary, printed_penalty: bool = True,
         include_diagonal: bool = False) -> Tuple[float, float, float]:
    """Return ``(mdic, dev_hat, p_d)`` with Dev(theta_bar) at the Dahl draw."""
    devs = np.array([deviance(Z, s.z, s.U, s.T, include_diagonal) for s in trace.states])
    dev_hat = float(devs[summary.selected_iteration])
    p_d = float(devs.mean() - dev_hat)
    return dev_hat + mdic_penalty(Z.shape[0], printed_penalty) * p_d, dev_hat, p_d


@dataclass
class ChainConfig:
    iterations: int = 500
    burn_in: int = 250
    init_clusters: int = 9
    prior: PriorConfig = field(default_factory=PriorConfig)
    printed_penalty: bool = True
    restarts: int = 1


@dataclass
class ModelSelection:
    best_lambda: float
    best_limit: int
    summaries: Dict[Tuple[float, int], PosteriorSummary]
    traces: Dict[Tuple[float, int], ChainTrace] = field(default_factory=dict, repr=False)

    @property
    def best(self) -> PosteriorSummary:
        return self.summaries[(self.best_lambda, self.best_limit)]


def chain_seed(master_seed, lam: float, restart: int = 0, replicate: int = 0) -> np.random.SeedSequence:
    """Sub-seed depending only on (master, replicate, lambda, restart).

    The neighbour limit is deliberately excluded so that lambda = 0 chains
    coincide across limits and with a plain MFM run.
    """
    return np.random.SeedSequence(entropy=master_seed,
                                  spawn_key=(1, replicate, int(round(lam * 1000)), restart))


def fit_summary(Z, graph: Optional[NeighborhoodGraph], lam: float, config: ChainConfig, seed,
                order=None, keep_trace: bool = False):
    """Run chain(s) at one grid point; summarise and score by mDIC.

    With ``restarts > 1`` the restart with the smallest mDIC is kept.
    """
    best = None
    for r in range(config.restarts):
        t0 = time.perf_counter()
        prior = PriorConfig(**{**config.prior.__dict__, "lam": lam})
        trace = run_chain(Z, graph, prior, config.iterations, config.burn_in, config.init_clusters,
                          rng_seed=seed if config.restarts == 1 else np.random.SeedSequence(
                              entropy=seed.entropy, spawn_key=seed.spawn_key + (r,)),
                          order=order)
        summ = dahl_summary(trace)
        summ.mdic, summ.dev_hat, summ.p_d = mdic(Z, trace, summ, config.printed_penalty,
                                                 config.prior.include_diagonal)
        summ.lam = lam
        summ.neighbor_limit = None if graph is None else graph.neighbor_limit
        summ.runtime_ms = 1000.0 * (time.perf_counter() - t0)
        if best is None or summ.mdic < best[0].mdic:
            best = (summ, trace)
    return best if keep_trace else (best[0], None)


def select_model(Z, node_ids: Sequence[str], edges, lambda_grid: Sequence[float],
                 limit_grid: Sequence[int], config: Optional[ChainConfig] = None, seed=0,
                 replicate: int = 0, keep_traces: bool = False) -> ModelSelection:
    """One chain per (lambda, limit); pick the smallest mDIC (ties: smaller lambda, then limit)."""
    if not lambda_grid or not limit_grid:
        raise ValueError("grids must be nonempty")
    config = config or ChainConfig()
    Z = np.asarray(Z, dtype=float)
    graphs = {d: neighborhoods(edges, node_ids, d) for d in sorted(set(limit_grid))}
    summaries, traces = {}, {}
    cached_null = None
    for lam in sorted(set(float(x) for x in lambda_grid)):
        for d in sorted(set(limit_grid)):
            if lam == 0 and cached_null is not None:
                # the graph is ignored at lambda = 0 and the seed ignores the limit
                s0, tr0 = cached_null
                s = PosteriorSummary(**{**s0.__dict__, "neighbor_limit": d})
                summaries[(lam, d)] = s
                if keep_traces:
                    traces[(lam, d)] = tr0
                continue
            seed_seq = chain_seed(seed, lam, replicate=replicate)
            summ, trace = fit_summary(Z, graphs[d], lam, config, seed_seq, order=node_ids,
                                      keep_trace=keep_traces or lam == 0)
            summaries[(lam, d)] = summ
            if keep_traces:
                traces[(lam, d)] = trace
            if lam == 0:
                cached_null = (summ, trace)
    key = min(summaries, key=lambda k: (summaries[k].mdic, k[0], k[1]))
    return ModelSelection(key[0], key[1], summaries, traces)


def kmeans_baseline(srvfs, k: int, rng=None, restarts: int = 10) -> np.ndarray:
    """Lloyd's K-means on the raw SRVF vectors (best of ``restarts`` seeded starts)."""
    X = np.stack([np.asarray(getattr(q, "q", q), dtype=float) for q in srvfs])
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}")
    seed = rng if isinstance(rng, (int, np.integer)) or rng is None else int(rng.integers(2**31 - 1))
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, algorithm="lloyd",
                random_state=seed)
    return km.fit_predict(X).astype(np.int64)


def k_recovery_count(summaries, k_true: int) -> int:
    return int(sum(1 for s in summaries if len(np.unique(getattr(s, "z_hat", s))) == k_true))


def stability(reference, partitions) -> Dict[str, float]:
    """Mean RI and ARI of ``partitions`` against ``reference``."""
    ri = [rand_index(reference, p) for p in partitions]
    ari = [adjusted_rand_index(reference, p) for p in partitions]
    return {"mean_ri": float(np.mean(ri)), "mean_ari": float(np.mean(ari)), "count": len(ri)}
