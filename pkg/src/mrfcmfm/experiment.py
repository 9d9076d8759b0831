"""End-to-end replication harness: simulate, align, cluster, select, score."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .elastic import similarity_matrix, srvf
from .graph import neighborhoods, us_states_adjacency
from .income import PartitionDesign, empirical_lorenz, simulate_design
from .mfm import PriorConfig
from .posterior import (ChainConfig, adjusted_rand_index, chain_seed, fit_summary, kmeans_baseline,
                        select_model)

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["replicate", "method", "lambda", "K_hat", "ari", "mdic", "runtime_ms"]
METHODS = ("mrfc-mfm", "mfm", "kmeans")


@dataclass
class ReplicationConfig:
    n_obs: int = 10_000
    grid_size: int = 101
    lambda_grid: Sequence[float] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    neighbor_limit: Optional[int] = None  # None: the design's own limit
    iterations: int = 500
    burn_in: int = 250
    init_clusters: int = 9
    restarts: int = 1
    kmeans_restarts: int = 10
    methods: Sequence[str] = METHODS
    prior: dict = field(default_factory=dict)

    def chain_config(self) -> ChainConfig:
        return ChainConfig(self.iterations, self.burn_in, self.init_clusters,
                           PriorConfig.from_dict(self.prior), restarts=self.restarts)

    def fingerprint(self, design: PartitionDesign, seed) -> str:
        payload = json.dumps({"config": asdict(self), "design": design.to_dict(), "seed": seed,
                              "version": __version__}, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def kmeans_seed(master_seed, replicate: int) -> int:
    return int(np.random.SeedSequence(entropy=master_seed, spawn_key=(3, replicate))
               .generate_state(1)[0] & 0x7FFFFFFF)


def replicate_similarity(design: PartitionDesign, replicate: int, config: ReplicationConfig, seed):
    samples = simulate_design(design, config.n_obs, seed, replicate)
    curves = [empirical_lorenz(samples[s], config.grid_size) for s in design.state_ids]
    return curves, similarity_matrix(curves)


def run_replicate(design: PartitionDesign, replicate: int, config: ReplicationConfig, seed,
                  edges=None) -> List[dict]:
    """All methods on one simulated data set; returns report rows."""
    if edges is None:
        edges, _ = us_states_adjacency()
    limit = config.neighbor_limit or design.neighbor_limit or 1
    truth = design.true_labels
    t0 = time.perf_counter()
    curves, sim = replicate_similarity(design, replicate, config, seed)
    sim_ms = 1000.0 * (time.perf_counter() - t0)
    chain_cfg = config.chain_config()
    rows = []
    selected = None
    if "mrfc-mfm" in config.methods or "kmeans" in config.methods:
        sel = select_model(sim.Z, design.state_ids, edges, config.lambda_grid, [limit], chain_cfg,
                           seed=seed, replicate=replicate)
        selected = sel.best
        for (lam, _), s in sorted(sel.summaries.items()):
            rows.append(_row(replicate, "mrfc-mfm", lam, s.K_hat,
                             adjusted_rand_index(s.z_hat, truth), s.mdic, s.runtime_ms + sim_ms))
    if "mfm" in config.methods:
        s, _ = fit_summary(sim.Z, None, 0.0, chain_cfg, chain_seed(seed, 0.0, replicate=replicate))
        rows.append(_row(replicate, "mfm", 0.0, s.K_hat, adjusted_rand_index(s.z_hat, truth),
                         s.mdic, s.runtime_ms + sim_ms))
    if "kmeans" in config.methods:
        t1 = time.perf_counter()
        labels = kmeans_baseline([srvf(c) for c in curves], selected.K_hat,
                                 kmeans_seed(seed, replicate), config.kmeans_restarts)
        rows.append(_row(replicate, "kmeans", selected.lam, selected.K_hat,
                         adjusted_rand_index(labels, truth), None,
                         1000.0 * (time.perf_counter() - t1) + sim_ms))
    if "mrfc-mfm" not in config.methods:
        rows = [r for r in rows if r["method"] != "mrfc-mfm"]
    return rows


def _row(replicate, method, lam, k_hat, ari, mdic_value, runtime_ms):
    return {"replicate": replicate, "method": method, "lambda": float(lam), "K_hat": int(k_hat),
            "ari": float(ari), "mdic": None if mdic_value is None else float(mdic_value),
            "runtime_ms": float(runtime_ms)}


def _sort_key(row):
    return (row["replicate"], METHODS.index(row["method"]) if row["method"] in METHODS else 99,
            row["lambda"])


def read_report(path) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"replicate": int(r["replicate"]), "method": r["method"],
                         "lambda": float(r["lambda"]), "K_hat": int(r["K_hat"]),
                         "ari": float(r["ari"]),
                         "mdic": float(r["mdic"]) if r["mdic"] not in ("", "None") else None,
                         "runtime_ms": float(r["runtime_ms"])})
    return rows


def write_report(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in sorted(rows, key=_sort_key):
            w.writerow({k: ("" if r[k] is None else r[k]) for k in REPORT_COLUMNS})


def run_replication(design: PartitionDesign, replicates: int, config: ReplicationConfig, seed,
                    out_csv=None, workers: int = 1) -> List[dict]:
    """Run ``replicates`` replicates; resumable when ``out_csv`` is given.

    Finished replicates are appended to ``<out_csv>.partial`` together with a
    configuration fingerprint, so an interrupted run picks up where it
    stopped and never mixes results from different settings.
    """
    edges, _ = us_states_adjacency()
    done: Dict[int, List[dict]] = {}
    partial = meta = None
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        partial = out_csv.with_name(out_csv.name + ".partial")
        meta = out_csv.with_name(out_csv.name + ".meta.json")
        fp = config.fingerprint(design, seed)
        if meta.exists() and json.loads(meta.read_text()).get("fingerprint") == fp and partial.exists():
            for line in partial.read_text().splitlines():
                if line.strip():
                    r = json.loads(line)
                    done.setdefault(r["replicate"], []).append(r)
        else:
            partial.write_text("")
            meta.write_text(json.dumps({"fingerprint": fp, "design": design.name, "seed": seed,
                                        "config": asdict(config)}, default=list, indent=1))
    todo = [r for r in range(replicates) if r not in done]
    if todo:
        log.info("%s: %d replicates to run (%d cached)", design.name, len(todo), len(done))

    def record(r, rows):
        done[r] = rows
        if partial is not None:
            with open(partial, "a") as fh:
                fh.writelines(json.dumps(x) + "\n" for x in rows)
        log.info("%s replicate %d done", design.name, r)

    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            futures = {r: pool.submit(run_replicate, design, r, config, seed, edges) for r in todo}
            for r in todo:
                record(r, futures[r].result())
    else:
        for r in todo:
            record(r, run_replicate(design, r, config, seed, edges))
    rows = [x for r in range(replicates) for x in done[r]]
    if out_csv is not None:
        write_report(rows, out_csv)
    return rows


def summarize_report(rows: List[dict], k_true: int) -> dict:
    """Per-method K histogram, K-recovery count, mean ARI and mean selected lambda.

    For ``mrfc-mfm`` each replicate contributes its smallest-mDIC lambda
    (ties: smaller lambda).
    """
    by_method: Dict[str, Dict[int, dict]] = {}
    for r in rows:
        if r["method"] == "mrfc-mfm":
            cur = by_method.setdefault("mrfc-mfm", {}).get(r["replicate"])
            if cur is None or (r["mdic"], r["lambda"]) < (cur["mdic"], cur["lambda"]):
                by_method["mrfc-mfm"][r["replicate"]] = r
        else:
            by_method.setdefault(r["method"], {})[r["replicate"]] = r
    out = {}
    for method, reps in by_method.items():
        ks = [x["K_hat"] for x in reps.values()]
        hist = {int(k): int(c) for k, c in zip(*np.unique(ks, return_counts=True))}
        out[method] = {"replicates": len(reps), "k_histogram": hist,
                       "k_recovery": int(sum(k == k_true for k in ks)),
                       "mean_ari": float(np.mean([x["ari"] for x in reps.values()])),
                       "mean_lambda": float(np.mean([x["lambda"] for x in reps.values()]))}
    return out
