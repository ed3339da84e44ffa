from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from surroprev import __version__
from surroprev.calibration import read_calibration
from surroprev.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from surroprev.sampling import read_sample

WORLD = {
    "n_items": 3000,
    "n_users": 600,
    "n_days": 4,
    "popularity_exponent": 1.5,
    "categories": [{"name": "k", "label_rate": 0.05, "positive_score": [2.0, 2.0], "negative_score": [1.0, 6.0]}],
    "arms": [{"name": "control"}, {"name": "treatment", "category": "k", "threshold": 0.7}],
    "seed": 11,
}


def run(*argv) -> int:
    return main([str(a) for a in argv])


def jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "world.json").write_text(json.dumps(WORLD))
    assert run("synth", "--config", root / "world.json", "--out", root / "w") == EXIT_OK
    return root / "w"


@pytest.fixture(scope="module")
def calibration(world, tmp_path_factory):
    out = tmp_path_factory.mktemp("cal")
    assert run(
        "calibrate", "--logs", world / "logs.jsonl", "--scores", world / "scores.jsonl",
        "--labels", world / "labels.jsonl", "--category", "k", "--buckets", "equal:5",
        "--n", 1500, "--seed", 3, "--out", out,
    ) == EXIT_OK
    return out / "calibration.json"


def inputs(world):
    return ["--logs", world / "logs.jsonl", "--scores", world / "scores.jsonl"]


# --------------------------------------------------------------------------- synth

def test_minimal_synth_is_fast_and_complete(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_items": 10, "n_users": 5, "n_days": 2, "categories": [{"name": "k", "label_rate": 0.2}]}))
    t0 = time.perf_counter()
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
    assert time.perf_counter() - t0 < 1.0
    names = {p.name for p in (tmp_path / "o").iterdir()}
    assert {"logs.jsonl", "scores.jsonl", "labels.jsonl", "oracle.jsonl", "world.json", "manifest.json"} <= names


def test_synth_same_seed_same_digests(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(WORLD | {"n_items": 200, "n_users": 50}))

    def digests(out):
        run("synth", "--config", cfg, "--out", out)
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())}

    assert digests(tmp_path / "a") == digests(tmp_path / "b")
    run("synth", "--config", cfg, "--seed", 12, "--out", tmp_path / "c")
    assert digests(tmp_path / "a")["logs.jsonl"] != hashlib.sha256((tmp_path / "c" / "logs.jsonl").read_bytes()).hexdigest()


def test_exit_code_taxonomy(tmp_path, capsys):
    assert run("synth", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_items": 0, "n_users": 1, "n_days": 1, "categories": [{"name": "k", "label_rate": 0.1}]}))
    assert run("synth", "--config", bad, "--out", tmp_path / "o") == EXIT_VALIDATION
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path / "o") == EXIT_VALIDATION
    assert run("synth", "--out", tmp_path / "o") == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE
    assert len({EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DATA}) == 4
    assert "error" in capsys.readouterr().err


def test_malformed_logs_report_line(world, tmp_path, capsys):
    logs = tmp_path / "logs.jsonl"
    lines = (world / "logs.jsonl").read_text().splitlines()[:3]
    lines.append('{"day": "2024-01-01", "user": "u", "item": "x", "arm": "control", "impressions": -2}')
    logs.write_text("\n".join(lines) + "\n")
    code = run("sample", "--logs", logs, "--scores", world / "scores.jsonl", "--category", "k",
               "--n", 2, "--seed", 0, "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION
    assert ":4" in capsys.readouterr().err


# --------------------------------------------------------------------------- sample / calibrate

def test_sample_larger_than_population(world, tmp_path):
    assert run("sample", *inputs(world), "--category", "k", "--n", 10**6, "--seed", 1, "--out", tmp_path) == EXIT_OK
    s = read_sample(tmp_path / "sample.jsonl")
    n_present = len({r["item"] for r in jsonl(world / "logs.jsonl")})
    assert len(s) == n_present
    assert s.probabilities.sum() == pytest.approx(1.0)
    assert (s.probabilities > 0).all()


def test_calibration_table_invariants(calibration):
    t = read_calibration(calibration)
    ok = ~np.isnan(t.prevalence)
    assert ((t.prevalence[ok] >= 0) & (t.prevalence[ok] <= 1)).all()
    assert t.marginal.sum() == pytest.approx(1.0)
    assert t.labeled_count.sum() == t.sample_size == 1500
    assert all(("empty" in f) == (not o) for f, o in zip(t.flags, ok))
    rows = jsonl(calibration.parent / "buckets.jsonl")
    assert [r["bucket"] for r in rows] == [1, 2, 3, 4, 5]
    assert {r["calibration_version"] for r in rows} == {t.version}


def test_score_weighting_balances_labeled_counts(world, tmp_path):
    ratios = {}
    for scheme in ("impressions", "impressions-x-score"):
        out = tmp_path / scheme
        assert run("calibrate", *inputs(world), "--labels", world / "labels.jsonl", "--category", "k",
                   "--buckets", "equal:4", "--scheme", scheme, "--n", 400, "--seed", 5, "--out", out) == EXIT_OK
        counts = np.array([r["labeled_count"] for r in jsonl(out / "buckets.jsonl")])
        assert counts.min() > 0
        ratios[scheme] = counts.max() / counts.min()
    assert ratios["impressions-x-score"] < ratios["impressions"]


# --------------------------------------------------------------------------- estimate

def test_estimate_outputs_and_manifest(world, calibration, tmp_path):
    assert run("estimate", *inputs(world), "--calibration", calibration, "--out", tmp_path) == EXIT_OK
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    daily = jsonl(tmp_path / "daily.jsonl")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(daily) == WORLD["n_days"]
    assert {r["manifest_id"] for r in daily} == {manifest["manifest_id"]} == {summary["manifest_id"]}
    version = read_calibration(calibration).version
    assert manifest["calibration_version"] == version == summary["calibration_version"]
    assert manifest["tool_version"] == __version__
    assert manifest["command"] == "estimate"
    assert set(manifest["inputs"]) == {"logs", "scores", "calibration"}
    assert manifest["inputs"]["logs"] == hashlib.sha256((world / "logs.jsonl").read_bytes()).hexdigest()
    assert manifest["started_at"] == "2023-11-14T22:13:20Z"
    # the threshold filter drops the highest-score items from treatment
    assert summary["delta"] < 0
    shares = jsonl(tmp_path / "shares.jsonl")
    for day in {r["day"] for r in shares}:
        for role in ("control", "treatment"):
            assert sum(r["share"] for r in shares if r["day"] == day and r["role"] == role) == pytest.approx(1.0)


def test_estimate_same_arm_twice_gives_zero_deltas(world, calibration, tmp_path):
    assert run("estimate", *inputs(world), "--calibration", calibration,
               "--arms", "control=control,treatment=control", "--out", tmp_path) == EXIT_OK
    assert all(r["delta"] == 0.0 for r in jsonl(tmp_path / "daily.jsonl"))


def test_estimate_unknown_arm(world, calibration, tmp_path):
    assert run("estimate", *inputs(world), "--calibration", calibration,
               "--arms", "control=control,treatment=nope", "--out", tmp_path) == EXIT_DATA
    assert run("estimate", *inputs(world), "--calibration", calibration,
               "--arms", "control=control", "--out", tmp_path) == EXIT_USAGE


def test_empty_calibration_bucket_with_traffic(tmp_path, capsys):
    logs = tmp_path / "logs.jsonl"
    rows = [
        ("2024-01-01", "u1", "a", "control", 5), ("2024-01-01", "u2", "b", "treatment", 4),
        ("2024-01-02", "u1", "c", "control", 3), ("2024-01-02", "u2", "a", "treatment", 2),
    ]
    logs.write_text("".join(json.dumps(dict(zip(("day", "user", "item", "arm", "impressions"), r))) + "\n" for r in rows))
    scores = tmp_path / "scores.jsonl"
    scores.write_text("".join(json.dumps({"item": i, "category": "k", "score": s}) + "\n"
                              for i, s in (("a", 0.1), ("b", 0.2), ("c", 0.95))))
    labels = tmp_path / "labels.jsonl"
    labels.write_text("".join(json.dumps({"item": i, "category": "k", "label": z}) + "\n"
                              for i, z in (("a", 0), ("b", 1), ("c", 1))))
    # calibrate on day one only: item c, the sole occupant of the top bucket, is never seen
    assert run("calibrate", "--logs", logs, "--scores", scores, "--labels", labels, "--category", "k",
               "--buckets", "equal:2", "--n", 5, "--seed", 0, "--days", "2024-01-01", "--out", tmp_path / "cal") == 0
    code = run("estimate", "--logs", logs, "--scores", scores, "--calibration", tmp_path / "cal" / "calibration.json",
               "--out", tmp_path / "est")
    assert code == EXIT_DATA
    assert "bucket(s) 2" in capsys.readouterr().err


# --------------------------------------------------------------------------- simulate / delta-test

def test_simulate_runs_and_delta_test(world, calibration, tmp_path):
    sim = tmp_path / "sim"
    assert run("simulate", *inputs(world), "--calibration", calibration, "--seed", 4,
               "--repeats", 2, "--mode", "binomial", "--out", sim) == EXIT_OK
    rows = jsonl(sim / "simulated.jsonl")
    assert sorted({r["run"] for r in rows}) == [0, 1]
    assert len(rows) == 2 * WORLD["n_days"]
    assert run("delta-test", "--daily", sim / "simulated.jsonl", "--out", tmp_path / "r") == EXIT_VALIDATION
    assert run("delta-test", "--daily", sim / "simulated.jsonl", "--run", 1, "--out", tmp_path / "r") == EXIT_OK
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["n_days"] == WORLD["n_days"]
    assert report["calibration_version"] == read_calibration(calibration).version


@pytest.mark.parametrize("mode", ["exact", "binomial", "fixed"])
def test_simulate_same_arm_twice(world, calibration, tmp_path, mode):
    assert run("simulate", *inputs(world), "--calibration", calibration, "--seed", 4, "--mode", mode,
               "--arms", "control=treatment,treatment=treatment", "--out", tmp_path) == EXIT_OK
    assert all(r["delta"] == 0.0 for r in jsonl(tmp_path / "simulated.jsonl"))


def _daily_file(path, deltas):
    path.write_text("".join(
        json.dumps({"day": f"2024-03-{k + 1:02d}", "delta": d, "calibration_version": "v"}) + "\n"
        for k, d in enumerate(deltas)
    ))
    return path


@pytest.mark.parametrize(
    "deltas, significant",
    [([-0.01] * 10, True), ([0.01, -0.01] * 5, False), ([-0.3], False)],
)
def test_delta_test_examples(tmp_path, deltas, significant):
    daily = _daily_file(tmp_path / "d.jsonl", deltas)
    assert run("delta-test", "--daily", daily, "--alpha", 0.05, "--out", tmp_path / "o") == EXIT_OK
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["significant"] is significant
    if significant:
        assert report["p_value"] == pytest.approx(2 * 0.5 ** 10)


def test_delta_test_rejects_bad_input(tmp_path):
    daily = tmp_path / "d.jsonl"
    daily.write_text('{"day": "2024-01-01", "delta": "x"}\n')
    assert run("delta-test", "--daily", daily, "--out", tmp_path / "o") == EXIT_VALIDATION
    daily.write_text("")
    assert run("delta-test", "--daily", daily, "--out", tmp_path / "o") == EXIT_DATA
    assert run("delta-test", "--daily", daily, "--alpha", 2, "--out", tmp_path / "o") == EXIT_USAGE


# --------------------------------------------------------------------------- hh

def test_hh_matches_hand_computation(world, tmp_path):
    assert run("sample", *inputs(world), "--category", "k", "--n", 300, "--seed", 8, "--out", tmp_path / "s") == 0
    assert run("hh", "--logs", world / "logs.jsonl", "--sample", tmp_path / "s" / "sample.jsonl",
               "--labels", world / "labels.jsonl", "--arm", "control", "--out", tmp_path / "h") == EXIT_OK
    est = json.loads((tmp_path / "h" / "estimate.json").read_text())

    logs = [r for r in jsonl(world / "logs.jsonl") if r["arm"] == "control"]
    imps: dict[str, int] = {}
    for r in logs:
        imps[r["item"]] = imps.get(r["item"], 0) + r["impressions"]
    total = sum(imps.values())
    label = {r["item"]: r["label"] for r in jsonl(world / "labels.jsonl")}
    sample = read_sample(tmp_path / "s" / "sample.jsonl")
    y = np.array([label[i] * imps.get(i, 0) / p for i, p in zip(sample.item_ids, sample.probabilities)])
    assert est["total_impressions"] == total
    assert est["point"] == pytest.approx(y.mean() / total, rel=1e-12)
    assert est["variance"] == pytest.approx(y.var(ddof=1) / len(y) / total**2, rel=1e-9)


def test_hh_missing_label(world, tmp_path):
    run("sample", *inputs(world), "--category", "k", "--n", 20, "--seed", 8, "--out", tmp_path / "s")
    labels = tmp_path / "labels.jsonl"
    labels.write_text('{"item": "it000000", "category": "k", "label": 1}\n')
    assert run("hh", "--logs", world / "logs.jsonl", "--sample", tmp_path / "s" / "sample.jsonl",
               "--labels", labels, "--out", tmp_path / "h") == EXIT_DATA


def test_calibrate_missing_label_is_a_data_error(world, tmp_path):
    labels = tmp_path / "labels.jsonl"
    labels.write_text('{"item": "it000000", "category": "k", "label": 1}\n')
    assert run("calibrate", *inputs(world), "--labels", labels, "--category", "k",
               "--n", 50, "--seed", 0, "--out", tmp_path / "c") == EXIT_DATA
