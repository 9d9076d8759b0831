"""Run the simulation study for all six (design x signal) settings.

Results are cached under results/ and resumed on rerun. The acceptance
tests read these reports when present.

    python3 scripts/run_replication.py --replicates 100 --seed 2024
"""
import argparse
import json
import logging
from importlib import resources
from pathlib import Path

from mrfcmfm.experiment import ReplicationConfig, run_replication, summarize_report
from mrfcmfm.income import load_design

SETTINGS = [f"design{d}_{s}" for d in (1, 2, 3) for s in ("weak", "strong")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicates", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results"))
    ap.add_argument("--settings", nargs="*", default=SETTINGS)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    summary = {}
    for name in args.settings:
        design = load_design(resources.files("mrfcmfm") / "data" / f"{name}.json")
        rows = run_replication(design, args.replicates, ReplicationConfig(), args.seed,
                               out_csv=out / f"{name}.csv", workers=args.workers)
        summary[name] = summarize_report(rows, design.k_true)
        print(name, json.dumps(summary[name]))
    (out / "summary.json").write_text(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
