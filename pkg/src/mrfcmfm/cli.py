"""Command-line pipeline: simulate -> lorenz -> similarity -> cluster -> evaluate.

Data artifacts go to ``--out``; progress goes to stderr.  Each subcommand
writes ``manifest.json`` describing its inputs, seed, configuration and
outputs.  Exit codes: 0 success, 2 bad input, 3 internal invariant failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .elastic import read_similarity, similarity_matrix, srvf, write_similarity
from .errors import InputError, InvariantError
from .experiment import ReplicationConfig, run_replication, summarize_report
from .graph import load_adjacency, neighborhoods, us_states_adjacency
from .income import (empirical_lorenz, gini, load_design, read_income_csv, read_lorenz_csv,
                     sample_gini, simulate_design, write_income_csv, write_lorenz_csv)
from .mfm import PriorConfig
from .posterior import (ChainConfig, PosteriorSummary, adjusted_rand_index, chain_seed,
                        fit_summary, select_model, stability)

log = logging.getLogger("mrfcmfm")

DEFAULT_LAMBDA_GRID = [round(0.2 * k, 1) for k in range(16)]
DEFAULT_LIMIT_GRID = [1, 2, 3]


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"cannot read config ({exc})", path=path) from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON ({exc.msg})", line=exc.lineno, path=path) from exc
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object", path=path)
    return cfg


def _pick(args, cfg, name, default):
    """Command-line flag beats config file beats default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


class Run:
    """Collects outputs and timings, then writes the manifest."""

    def __init__(self, args, inputs: dict, config: dict):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.inputs = {k: str(v) for k, v in inputs.items() if v is not None}
        self.config = config
        self.outputs: List[Path] = []
        self.timings = {}
        self._t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def timed(self, label, fn, *a, **kw):
        t = time.perf_counter()
        res = fn(*a, **kw)
        self.timings[label] = round(time.perf_counter() - t, 4)
        log.info("%s: %.2fs", label, self.timings[label])
        return res

    def finish(self):
        self.timings["total"] = round(time.perf_counter() - self._t0, 4)
        manifest = {"subcommand": self.args.command, "version": __version__,
                    "seed": getattr(self.args, "seed", None), "inputs": self.inputs,
                    "input_sha256": {k: _sha256(Path(v)) for k, v in self.inputs.items()
                                     if Path(v).is_file()},
                    "out": str(self.out), "config": self.config,
                    "argv": sys.argv[1:], "outputs": sorted(p.name for p in self.outputs),
                    "timings_s": self.timings}
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str))


# --- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> None:
    design = load_design(args.design)
    run = Run(args, {"design": args.design}, {"n_obs": args.n_obs, "replicate": args.replicate})
    if args.n_obs < 1:
        raise InputError("--n-obs must be >= 1")
    samples = run.timed("simulate", simulate_design, design, args.n_obs, args.seed, args.replicate)
    write_income_csv(samples, run.path("income.csv"))
    truth = {"design": design.name, "ids": list(design.state_ids),
             "labels": (design.true_labels + 1).tolist(), "neighbor_limit": design.neighbor_limit}
    run.path("truth.json").write_text(json.dumps(truth, indent=1))
    run.finish()


def _curves_from_income(path, grid_size):
    samples = read_income_csv(path)
    return [empirical_lorenz(s, grid_size) for s in samples.values()]


def cmd_lorenz(args) -> None:
    grid_size = args.grid_size or 101
    run = Run(args, {"income": args.income}, {"grid_size": grid_size})
    curves = run.timed("lorenz", _curves_from_income, args.income, grid_size)
    write_lorenz_csv(curves, run.path("lorenz.csv"))
    with open(run.path("gini.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state_id", "gini"])
        w.writerows([c.state_id, repr(gini(c))] for c in curves)
    run.finish()


def cmd_similarity(args) -> None:
    if (args.income is None) == (args.lorenz is None):
        raise InputError("give exactly one of --income or --lorenz")
    grid_size = args.grid_size or 101
    run = Run(args, {"income": args.income, "lorenz": args.lorenz},
              {"grid_size": grid_size, "threads": args.threads})
    if args.income is not None:
        curves = run.timed("lorenz", _curves_from_income, args.income, grid_size)
    else:
        curves = read_lorenz_csv(args.lorenz)
    sim = run.timed("similarity", similarity_matrix, curves, threads=args.threads)
    if not (np.allclose(sim.S, sim.S.T) and np.all(np.diag(sim.S) == 1.0)):
        raise InvariantError("similarity matrix is not symmetric with unit diagonal")
    for p in write_similarity(sim, run.out):
        run.outputs.append(p)
    run.finish()


def _graph_inputs(adjacency, ids):
    """Edges restricted to ``ids``; mismatched node sets raise with a diff."""
    if adjacency is None:
        edges, universe = us_states_adjacency()
    else:
        edges, universe = load_adjacency(adjacency)
    missing = sorted(set(ids) - set(universe))
    extra = sorted(set(universe) - set(ids))
    if missing or extra:
        raise InputError("node sets of matrix and adjacency differ: "
                         f"only in matrix {missing}; only in adjacency {extra}",
                         path=adjacency)
    return edges


def _chain_config(args, cfg) -> ChainConfig:
    prior = PriorConfig.from_dict(cfg.get("prior", {}))
    return ChainConfig(iterations=int(_pick(args, cfg, "iterations", 500)),
                       burn_in=int(_pick(args, cfg, "burn_in", 250)),
                       init_clusters=int(cfg.get("init_clusters", 9)), prior=prior,
                       printed_penalty=bool(cfg.get("printed_penalty", True)),
                       restarts=int(cfg.get("restarts", 1)))


def cmd_cluster(args) -> None:
    cfg = _load_config(args.config)
    sim = read_similarity(args.matrix)
    edges = _graph_inputs(args.adjacency, sim.ids)
    lam_grid = _pick(args, cfg, "lambda_grid", DEFAULT_LAMBDA_GRID)
    limit_grid = _pick(args, cfg, "neighbor_limit_grid", DEFAULT_LIMIT_GRID)
    chain_cfg = _chain_config(args, cfg)
    if not chain_cfg.iterations > chain_cfg.burn_in >= 0:
        raise InputError("need iterations > burn-in >= 0")
    config = {"lambda_grid": list(lam_grid), "neighbor_limit_grid": list(limit_grid),
              "replicate": args.replicate,
              "chain": {**asdict(chain_cfg), "prior": chain_cfg.prior.to_dict()}}
    run = Run(args, {"matrix": args.matrix, "adjacency": args.adjacency, "config": args.config,
                     "truth": args.truth}, config)
    truth = None
    if args.truth is not None:
        t = json.loads(Path(args.truth).read_text())
        pos = {s: k for k, s in enumerate(t["ids"])}
        truth = np.array([t["labels"][pos[s]] for s in sim.ids])
    sel = run.timed("select_model", select_model, sim.Z, sim.ids, edges, lam_grid, limit_grid,
                    chain_cfg, seed=args.seed, replicate=args.replicate, keep_traces=True)
    rows = []
    for (lam, d), s in sorted(sel.summaries.items()):
        tag = f"lam{lam:g}_d{d}"
        sel.traces[(lam, d)].write_jsonl(run.path(f"trace_{tag}.jsonl"))
        rows.append(s.to_dict(sim.ids, truth))
    run.path("summaries.json").write_text(json.dumps(rows, indent=1))
    best = sel.best.to_dict(sim.ids, truth)
    best["selected"] = {"lambda": sel.best_lambda, "neighbor_limit": sel.best_limit}
    run.path("summary.json").write_text(json.dumps(best, indent=1))
    with open(run.path("mdic.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "neighbor_limit", "K_hat", "mdic", "dev_hat", "p_d", "runtime_ms"])
        for r in rows:
            w.writerow([r["lambda"], r["neighbor_limit"], r["K_hat"], r["mdic"], r["dev_hat"],
                        r["p_d"], r["runtime_ms"]])
    log.info("selected lambda=%g limit=%d K=%d", sel.best_lambda, sel.best_limit, sel.best.K_hat)
    run.finish()


def cmd_replicate(args) -> None:
    cfg = _load_config(args.config)
    design = load_design(args.design)
    if args.replicates < 1:
        raise InputError("--replicates must be >= 1")
    limits = _pick(args, cfg, "neighbor_limit_grid", None)
    if limits is not None and len(limits) != 1:
        raise InputError("replicate uses a single neighbour limit per design")
    rc = ReplicationConfig(
        n_obs=int(_pick(args, cfg, "n_obs", 10_000)),
        grid_size=int(_pick(args, cfg, "grid_size", 101)),
        lambda_grid=tuple(_pick(args, cfg, "lambda_grid", (0.5, 1.0, 1.5, 2.0, 2.5, 3.0))),
        neighbor_limit=None if limits is None else int(limits[0]),
        iterations=int(_pick(args, cfg, "iterations", 500)),
        burn_in=int(_pick(args, cfg, "burn_in", 250)),
        init_clusters=int(cfg.get("init_clusters", 9)),
        restarts=int(cfg.get("restarts", 1)),
        kmeans_restarts=int(cfg.get("kmeans_restarts", 10)),
        methods=tuple(_pick(args, cfg, "methods", ("mrfc-mfm", "mfm", "kmeans"))),
        prior=dict(cfg.get("prior", {})))
    unknown = set(rc.methods) - {"mrfc-mfm", "mfm", "kmeans"}
    if unknown:
        raise InputError(f"unknown methods {sorted(unknown)}")
    run = Run(args, {"design": args.design, "config": args.config}, asdict(rc))
    rows = run.timed("replicate", run_replication, design, args.replicates, rc, args.seed,
                     out_csv=run.path("report.csv"), workers=args.threads)
    run.outputs.extend([run.out / "report.csv.partial", run.out / "report.csv.meta.json"])
    summary = summarize_report(rows, design.k_true)
    run.path("summary.json").write_text(json.dumps(summary, indent=1))
    ks = sorted({k for s in summary.values() for k in s["k_histogram"]})
    with open(run.path("k_histogram.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *ks])
        for m, s in summary.items():
            w.writerow([m, *[s["k_histogram"].get(k, 0) for k in ks]])
    with open(run.path("ari_table.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_ari", "k_recovery", "mean_lambda", "replicates"])
        for m, s in summary.items():
            w.writerow([m, s["mean_ari"], s["k_recovery"], s["mean_lambda"], s["replicates"]])
    run.finish()


def cluster_statistics(samples: dict, ids, z_hat) -> dict:
    """Per-cluster size, member states and mean state Gini; pooled national Gini."""
    state_gini = {s: sample_gini(samples[s].values) for s in ids}
    clusters = []
    for c in range(int(np.max(z_hat)) + 1):
        members = [s for s, zz in zip(ids, z_hat) if zz == c]
        clusters.append({"cluster": c + 1, "size": len(members), "states": members,
                         "mean_gini": float(np.mean([state_gini[s] for s in members]))})
    pooled = np.concatenate([samples[s].values for s in ids])
    return {"clusters": clusters, "national_gini": sample_gini(pooled),
            "state_gini": state_gini}


def cmd_evaluate(args) -> None:
    cfg = _load_config(args.config)
    run = Run(args, {"income": args.income, "summary": args.summary, "matrix": args.matrix,
                     "adjacency": args.adjacency, "config": args.config},
              {"stability_runs": args.stability_runs})
    samples = read_income_csv(args.income)
    summ_d = json.loads(Path(args.summary).read_text())
    ids = summ_d.get("ids")
    if ids is None:
        raise InputError("summary has no 'ids' field", path=args.summary)
    missing = sorted(set(ids) - set(samples))
    if missing:
        raise InputError(f"states in summary but not in income file: {missing}", path=args.income)
    summ = PosteriorSummary.from_dict(summ_d)
    stats = cluster_statistics(samples, ids, summ.z_hat)
    out = {"lambda": summ.lam, "neighbor_limit": summ.neighbor_limit, "K_hat": summ.K_hat,
           "mdic": summ.mdic, "U_hat": summ.U_hat.tolist(),
           "cluster_sizes": [c["size"] for c in stats["clusters"]],
           "cluster_mean_gini": [c["mean_gini"] for c in stats["clusters"]],
           "national_gini": stats["national_gini"], "clusters": stats["clusters"]}
    if args.stability_runs:
        if args.matrix is None:
            raise InputError("--stability-runs needs --matrix")
        sim = read_similarity(args.matrix)
        if list(sim.ids) != list(ids):
            raise InputError("matrix ids differ from summary ids", path=args.matrix)
        edges = _graph_inputs(args.adjacency, ids)
        chain_cfg = _chain_config(args, cfg)
        graph = neighborhoods(edges, ids, int(summ.neighbor_limit or 1))
        parts = []
        for r in range(args.stability_runs):
            s, _ = fit_summary(sim.Z, graph, float(summ.lam or 0.0), chain_cfg,
                               chain_seed(args.seed, float(summ.lam or 0.0), replicate=r + 1),
                               order=ids)
            parts.append(s.z_hat)
        out["stability"] = stability(summ.z_hat, parts)
    run.path("evaluation.json").write_text(json.dumps(out, indent=1))
    with open(run.path("clusters.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state_id", "cluster", "gini"])
        for s, zz in zip(ids, summ.z_hat):
            w.writerow([s, int(zz) + 1, repr(stats["state_gini"][s])])
    run.finish()


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mrfcmfm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config (flags override it)")
        p.add_argument("--threads", type=int, default=1)
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="simulate state incomes from a design")
    p.add_argument("--design", required=True)
    p.add_argument("--n-obs", type=int, default=10_000)
    p.add_argument("--replicate", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("lorenz", help="empirical Lorenz curves and Ginis")
    p.add_argument("--income", required=True)
    p.add_argument("--grid-size", type=int)
    common(p, seed=False)
    p.set_defaults(func=cmd_lorenz)

    p = sub.add_parser("similarity", help="elastic similarity and Fisher-Z matrices")
    p.add_argument("--income")
    p.add_argument("--lorenz")
    p.add_argument("--grid-size", type=int)
    common(p, seed=False)
    p.set_defaults(func=cmd_similarity)

    def chain_flags(p):
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in")
        p.add_argument("--lambda-grid", type=_floats, dest="lambda_grid")
        p.add_argument("--neighbor-limit-grid", type=_ints, dest="neighbor_limit_grid")

    p = sub.add_parser("cluster", help="fit over the lambda/limit grid and select by mDIC")
    p.add_argument("--matrix", required=True)
    p.add_argument("--adjacency", help="edge CSV (default: shipped US states contiguity)")
    p.add_argument("--truth", help="truth.json for ARI reporting")
    p.add_argument("--replicate", type=int, default=0)
    chain_flags(p)
    common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("replicate", help="simulation study for one design")
    p.add_argument("--design", required=True)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--methods", type=lambda s: [x.strip() for x in s.split(",") if x.strip()])
    p.add_argument("--grid-size", type=int)
    chain_flags(p)
    common(p)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("evaluate", help="cluster Ginis, national Gini and stability")
    p.add_argument("--income", required=True)
    p.add_argument("--summary", required=True)
    p.add_argument("--matrix")
    p.add_argument("--adjacency")
    p.add_argument("--stability-runs", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    common(p)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvariantError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
