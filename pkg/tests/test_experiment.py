import csv

import pytest

from conftest import data_path
from mrfcmfm import experiment
from mrfcmfm.experiment import ReplicationConfig, read_report, run_replication, summarize_report
from mrfcmfm.income import load_design

SMALL = dict(n_obs=300, grid_size=31, iterations=40, burn_in=20, lambda_grid=(1.0, 2.0))


def test_replication_resumes_from_cache(tmp_path, monkeypatch):
    d = load_design(data_path("design3_strong.json"))
    cfg = ReplicationConfig(**SMALL)
    out = tmp_path / "r.csv"
    first = run_replication(d, 2, cfg, 11, out_csv=out)
    calls = []
    real = experiment.run_replicate
    monkeypatch.setattr(experiment, "run_replicate",
                        lambda *a, **k: calls.append(a[1]) or real(*a, **k))
    more = run_replication(d, 3, cfg, 11, out_csv=out)
    assert calls == [2]
    assert more[:len(first)] == first
    assert read_report(out) == more
    # a different configuration never reuses cached rows
    run_replication(d, 1, ReplicationConfig(**{**SMALL, "n_obs": 301}), 11, out_csv=out)
    assert calls == [2, 0]


def test_report_rows_and_summary(tmp_path):
    d = load_design(data_path("design2_weak.json"))
    rows = run_replication(d, 2, ReplicationConfig(**SMALL), 3)
    mrfc = [r for r in rows if r["method"] == "mrfc-mfm"]
    assert len(mrfc) == 4 and {r["lambda"] for r in mrfc} == {1.0, 2.0}
    s = summarize_report(rows, d.k_true)
    assert set(s) == {"mrfc-mfm", "mfm", "kmeans"}
    for r in range(2):
        best = min((x for x in mrfc if x["replicate"] == r), key=lambda x: (x["mdic"], x["lambda"]))
        km = next(x for x in rows if x["method"] == "kmeans" and x["replicate"] == r)
        assert km["K_hat"] == best["K_hat"] and km["lambda"] == best["lambda"]
    assert s["mrfc-mfm"]["replicates"] == 2
    assert sum(s["mfm"]["k_histogram"].values()) == 2


def test_summary_tie_breaks_on_smaller_lambda():
    rows = [{"replicate": 0, "method": "mrfc-mfm", "lambda": l, "K_hat": k, "ari": 0.5,
             "mdic": 10.0, "runtime_ms": 1.0} for l, k in ((2.0, 4), (1.0, 3))]
    s = summarize_report(rows, 3)
    assert s["mrfc-mfm"]["mean_lambda"] == 1.0 and s["mrfc-mfm"]["k_recovery"] == 1
