"""Command-line interface.

Every command writes into ``--out`` (a directory): its result files plus
``manifest.json``.  Result files embed the manifest id, a digest of the
command, its flags, input file digests and the tool version, so reruns with
equal manifests produce byte-identical outputs.  Timestamps live only in
the manifest and honour ``SOURCE_DATE_EPOCH``.

Exit codes: 0 success, 2 usage, 3 validation (malformed input or config),
4 data (missing or unreadable input, missing labels, or inputs that cannot be
estimated).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
import warnings
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .calibration import MissingLabelError, calibrate, read_calibration, write_calibration
from .datamodel import (
    Bucketization,
    DomainError,
    IngestError,
    MissingScoreWarning,
    Segment,
    _iter_jsonl,
    equal_width_buckets,
    ingest_labels,
    ingest_logs,
    ingest_scores,
    quantile_buckets,
    read_bucketizations,
    write_jsonl,
)
from .hh import LabeledSample, hh_prevalence
from .inference import DailyDeltaSeries, decide
from .sampling import SampleWeightScheme, compute_weight, ppswor_sample, read_sample, write_sample
from .simulation import DrawMode, ImpressionMode, simulate
from .surrogate import (
    EmptyCalibrationBucketError,
    arm_delta,
    day_arm_bucket_impressions,
    shares_from_counts,
    surrogate_prevalence,
)
from .synthgen import WorldConfig, generate_world, write_world

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_DATA = 4

MODES = {
    "exact": (DrawMode.LOGIT_NORMAL, ImpressionMode.EXACT),
    "binomial": (DrawMode.LOGIT_NORMAL, ImpressionMode.BINOMIAL),
    "fixed": (DrawMode.FIXED, ImpressionMode.BINOMIAL),
}

_PATH_FLAGS = ("config", "logs", "scores", "labels", "calibration", "sample", "daily", "buckets")


class DataError(Exception):
    """Inputs are well formed but cannot support the requested computation."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.started = _now()
        self.flags = {}
        self.inputs = {}
        for k, v in sorted(vars(args).items()):
            if k in ("out", "func", "command"):
                continue
            if k in _PATH_FLAGS and v is not None and Path(v).is_file():
                self.inputs[k] = file_digest(v)
                continue
            self.flags[k] = v
        self.seed = getattr(args, "seed", None)
        self.calibration_version: str | None = None

    @property
    def manifest_id(self) -> str:
        body = {
            "command": self.command,
            "flags": self.flags,
            "inputs": self.inputs,
            "tool_version": __version__,
        }
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def write(self, out: Path, outputs: Sequence[str]) -> None:
        doc = {
            "manifest_id": self.manifest_id,
            "tool": "surroprev",
            "tool_version": __version__,
            "command": self.command,
            "flags": self.flags,
            "inputs": self.inputs,
            "seed": self.seed,
            "calibration_version": self.calibration_version,
            "outputs": sorted(outputs),
            "started_at": self.started,
            "finished_at": _now(),
        }
        (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2, default=str) + "\n")


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _clean(x):
    """JSON-safe copy: NaN and infinities become null, numpy scalars plain."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, date):
        return x.isoformat()
    return x


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n")


def parse_arms(spec: str) -> dict[str, str]:
    out = {}
    for part in spec.split(","):
        role, sep, arm = part.partition("=")
        role, arm = role.strip(), arm.strip()
        if not sep or role not in ("control", "treatment") or not arm:
            raise argparse.ArgumentTypeError(f"expected control=ARM,treatment=ARM, got {spec!r}")
        out[role] = arm
    if set(out) != {"control", "treatment"}:
        raise argparse.ArgumentTypeError("both control and treatment arms are required")
    return out


def parse_days(spec: str) -> tuple[date, date]:
    lo, sep, hi = spec.partition("..")
    try:
        a = date.fromisoformat(lo)
        b = date.fromisoformat(hi) if sep else a
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD..YYYY-MM-DD, got {spec!r}") from None
    if b < a:
        raise argparse.ArgumentTypeError("day range is reversed")
    return a, b


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _alpha(s: str) -> float:
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return v


def resolve_buckets(spec: str, scores, category: str) -> Bucketization:
    """``equal:B``, ``quantile:B`` or a bucketization JSONL file."""
    kind, sep, num = spec.partition(":")
    if sep and kind in ("equal", "quantile") and not Path(spec).exists():
        try:
            b = int(num)
        except ValueError:
            raise DomainError(f"bad bucket count in {spec!r}") from None
        if kind == "equal":
            return equal_width_buckets(b)
        if category not in scores.by_category:
            raise DomainError(f"no scores for category {category!r}")
        return quantile_buckets(scores.by_category[category][1], b)
    table = read_bucketizations(spec)
    if category not in table:
        raise DomainError(f"bucketization file has no entry for category {category!r}")
    return table[category]


def _segment(name: str, arms=None, days=None) -> Segment:
    return Segment(name=name, arms=frozenset(arms) if arms else None, days=days)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, manifest: RunManifest) -> list[str]:
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DomainError(f"config is not valid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise DomainError("config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    config = WorldConfig.from_dict(raw)
    manifest.seed = config.seed
    world = generate_world(config)
    paths = write_world(world, _out_dir(args))
    print(f"world: {config.n_items} items, {config.n_users} users, {config.n_days} days, "
          f"{world.log.total_impressions} impressions in {len(world.log)} rows")
    return [p.name for p in paths.values()]


def _window(log, days):
    return log if days is None else log.segment(_segment("window", days=days))


def cmd_sample(args, manifest: RunManifest) -> list[str]:
    log = _window(ingest_logs(args.logs), args.days)
    scores = ingest_scores(args.scores)
    scheme = SampleWeightScheme(args.scheme)
    totals = log.item_totals()
    present = np.flatnonzero(totals > 0)
    if present.size == 0:
        raise DataError("no impressions in the sampling window")
    imps = totals[present].astype(np.float64)
    item_scores = scores.scores_for_log(log, args.category)[present]
    weights = compute_weight(imps, item_scores, scheme)
    sample, _ = ppswor_sample(log.items[present], weights, args.n, args.seed, scheme.value)
    out = _out_dir(args)
    write_sample(out / "sample.jsonl", sample, {"category": args.category, "manifest_id": manifest.manifest_id})
    print(f"sampled {len(sample)} of {present.size} items (scheme {scheme.value}, seed {args.seed})")
    return ["sample.jsonl"]


def cmd_calibrate(args, manifest: RunManifest) -> list[str]:
    log = _window(ingest_logs(args.logs), args.days)
    scores = ingest_scores(args.scores)
    labels = ingest_labels(args.labels)
    buckets = resolve_buckets(args.buckets, scores, args.category)
    table = calibrate(
        log, scores, labels, buckets,
        category=args.category, n=args.n, seed=args.seed, scheme=SampleWeightScheme(args.scheme),
    )
    manifest.calibration_version = table.version
    out = _out_dir(args)
    write_calibration(out / "calibration.json", table)
    rows = []
    for b in range(table.n_buckets):
        rows.append(_clean({
            "category": table.category,
            "bucket": b + 1,
            "lower": buckets.boundaries[b],
            "upper": buckets.boundaries[b + 1],
            "prevalence": table.prevalence[b],
            "se": math.sqrt(table.variance[b]) if table.variance[b] >= 0 else None,
            "labeled_count": int(table.labeled_count[b]),
            "marginal": table.marginal[b],
            "flags": list(table.flags[b]),
            "calibration_version": table.version,
            "manifest_id": manifest.manifest_id,
        }))
    write_jsonl(out / "buckets.jsonl", rows)
    print(f"calibration {table.version}: {table.n_buckets} buckets, {table.sample_size} labeled items")
    for r in rows:
        p = "  empty" if r["prevalence"] is None else f"{r['prevalence']:.4f}"
        print(f"  bucket {r['bucket']:>2} [{r['lower']:.3f}, {r['upper']:.3f}) n={r['labeled_count']:>6} P={p} "
              f"{','.join(r['flags'])}")
    return ["calibration.json", "buckets.jsonl"]


def _arm_index(arms_vocab, name: str) -> int:
    hits = np.flatnonzero(arms_vocab == name)
    if hits.size == 0:
        raise DataError(f"arm {name!r} not found in logs")
    return int(hits[0])


def cmd_estimate(args, manifest: RunManifest) -> list[str]:
    log = _window(ingest_logs(args.logs), args.days)
    scores = ingest_scores(args.scores)
    table = read_calibration(args.calibration)
    manifest.calibration_version = table.version
    days, arms_vocab, counts = day_arm_bucket_impressions(log, scores, table.buckets, table.category)
    if not days:
        raise DataError("no impressions in the requested window")
    ci = _arm_index(arms_vocab, args.arms["control"])
    ti = _arm_index(arms_vocab, args.arms["treatment"])
    daily, share_rows = [], []
    for k, d in enumerate(days):
        ests = {}
        for role, a in (("control", ci), ("treatment", ti)):
            if counts[k, a].sum() <= 0:
                ests[role] = None
                continue
            sh = shares_from_counts(counts[k, a], table.buckets, table.category, str(arms_vocab[a]))
            ests[role] = surrogate_prevalence(sh, table)
            for r in sh.to_records():
                share_rows.append({"day": d.isoformat(), "role": role, **r, "manifest_id": manifest.manifest_id})
        if ests["control"] is None or ests["treatment"] is None:
            continue
        zt = arm_delta(ests["treatment"], ests["control"])
        daily.append(_daily_record(d, table, ests, zt, manifest))
    if not daily:
        raise DataError("no day has traffic in both arms")
    pooled = {}
    for role, a in (("control", ci), ("treatment", ti)):
        sh = shares_from_counts(counts[:, a].sum(0), table.buckets, table.category, str(arms_vocab[a]))
        pooled[role] = surrogate_prevalence(sh, table)
    zt = arm_delta(pooled["treatment"], pooled["control"])
    out = _out_dir(args)
    write_jsonl(out / "daily.jsonl", (_clean(r) for r in daily))
    write_jsonl(out / "shares.jsonl", (_clean(r) for r in share_rows))
    summary = {
        "manifest_id": manifest.manifest_id,
        "calibration_version": table.version,
        "category": table.category,
        "days": [days[0].isoformat(), days[-1].isoformat()],
        "control": pooled["control"].to_record(),
        "treatment": pooled["treatment"].to_record(),
        "delta": zt.delta,
        "relative_delta": zt.delta / pooled["control"].point if pooled["control"].point else None,
        "z": zt.z,
        "p_value": zt.p_value,
        "test": "two-sample z-test on pooled arm estimates",
    }
    _write_json(out / "summary.json", summary)
    print(f"{len(daily)} days; pooled control {pooled['control'].point:.5f}, "
          f"treatment {pooled['treatment'].point:.5f}, delta {zt.delta:+.5f} (p={zt.p_value:.3g})")
    return ["daily.jsonl", "shares.jsonl", "summary.json"]


def _daily_record(d, table, ests, zt, manifest) -> dict:
    c, t = ests["control"], ests["treatment"]
    return {
        "day": d.isoformat(),
        "category": table.category,
        "control_arm": c.segment,
        "treatment_arm": t.segment,
        "control_point": c.point,
        "control_se": c.se,
        "treatment_point": t.point,
        "treatment_se": t.se,
        "delta": zt.delta,
        "z": zt.z,
        "p_value": zt.p_value,
        "calibration_version": table.version,
        "manifest_id": manifest.manifest_id,
    }


def cmd_simulate(args, manifest: RunManifest) -> list[str]:
    log = _window(ingest_logs(args.logs), args.days)
    scores = ingest_scores(args.scores)
    table = read_calibration(args.calibration)
    manifest.calibration_version = table.version
    days = log.days()
    if not days:
        raise DataError("no impressions in the requested window")
    for role in ("control", "treatment"):
        _arm_index(log.arms, args.arms[role])
    draw, imp = MODES[args.mode]
    results = simulate(
        log, scores, table, days, seed=args.seed, arms=args.arms,
        repeats=args.repeats, draw_mode=draw, impression_mode=imp,
    )
    rows = []
    for r in results:
        rec = r.to_record()
        rec.update(
            control_point=rec["control_prevalence"],
            treatment_point=rec["treatment_prevalence"],
            calibration_version=table.version,
            manifest_id=manifest.manifest_id,
        )
        rows.append(_clean(rec))
    out = _out_dir(args)
    write_jsonl(out / "simulated.jsonl", rows)
    deltas = np.array([r["delta"] for r in rows], dtype=float)
    print(f"{len(rows)} simulated arm-days ({args.repeats} run(s), mode {args.mode}); "
          f"mean delta {np.nanmean(deltas):+.5f}")
    return ["simulated.jsonl"]


def cmd_delta_test(args, manifest: RunManifest) -> list[str]:
    records = [obj for _, obj in _iter_jsonl(args.daily)]
    if not records:
        raise DataError("daily estimates file is empty")
    runs = sorted({r.get("run", 0) for r in records})
    if args.run is not None:
        records = [r for r in records if r.get("run", 0) == args.run]
        if not records:
            raise DataError(f"no records for run {args.run}")
    elif len(runs) > 1:
        raise DomainError(f"daily file holds {len(runs)} simulation runs; pick one with --run")
    for r in records:
        if "day" not in r or not isinstance(r.get("delta"), (int, float)):
            raise IngestError("every record needs 'day' and a numeric 'delta'", args.daily)
    try:
        series = DailyDeltaSeries.from_records(records, experiment=args.experiment)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, DomainError):
            raise
        raise IngestError(f"bad daily record ({exc})", args.daily) from None
    manifest.calibration_version = series.calibration_version
    report = decide(series, alpha=args.alpha)
    rec = report.to_record()
    rec["manifest_id"] = manifest.manifest_id
    rec["days"] = [d.isoformat() for d in series.days]
    out = _out_dir(args)
    _write_json(out / "report.json", rec)
    verdict = "significant" if report.significant else "not significant"
    print(f"{report.n_days} days: {report.sign.n_neg} negative, {report.sign.n_pos} positive, "
          f"{report.sign.n_zero} zero; sign test p={report.sign.p_value:.4g} ({verdict} at {args.alpha})")
    return ["report.json"]


def cmd_hh(args, manifest: RunManifest) -> list[str]:
    log = ingest_logs(args.logs)
    sample = read_sample(args.sample)
    labels = ingest_labels(args.labels)
    category = args.category or sample.meta.get("category")
    if not category:
        raise DomainError("category is neither given nor recorded in the sample file")
    seg = _segment(",".join(args.arm) if args.arm else "all", args.arm, args.days)
    sub = log.segment(seg)
    total = sub.total_impressions
    if total <= 0:
        raise DataError(f"segment {seg.name!r} has no impressions")
    # sampled items outside the segment contribute zero impressions
    per_item = sub.item_totals()
    pos = np.minimum(np.searchsorted(sub.items, sample.item_ids), len(sub.items) - 1)
    seg_imps = np.where(sub.items[pos] == sample.item_ids, per_item[pos], 0)
    z = labels.labels(category, sample.item_ids)
    if (z < 0).any():
        raise MissingLabelError(f"{int((z < 0).sum())} sampled item(s) have no {category!r} label")
    ls = LabeledSample(z, seg_imps.astype(np.float64), sample.probabilities, sample.item_ids)
    est = hh_prevalence(ls, total, category=category, segment=seg.name)
    rec = est.to_record()
    rec.update(manifest_id=manifest.manifest_id, total_impressions=total, sample_seed=sample.seed,
               sample_scheme=sample.scheme)
    out = _out_dir(args)
    _write_json(out / "estimate.json", rec)
    print(f"HH prevalence of {category!r} in {seg.name!r}: {est.point:.5f} "
          f"(95% CI {est.ci_low:.5f}..{est.ci_high:.5f}, n={est.n})")
    return ["estimate.json"]


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surroprev", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, logs=True, scores=True):
        if logs:
            sp.add_argument("--logs", required=True, help="impression log JSONL")
        if scores:
            sp.add_argument("--scores", required=True, help="item score JSONL")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic world with exact oracles")
    sp.add_argument("--config", required=True, help="world config JSON")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("sample", help="draw a PPSWOR sample of items for labeling")
    common(sp)
    sp.add_argument("--category", required=True)
    sp.add_argument("--scheme", choices=[s.value for s in SampleWeightScheme], default="impressions")
    sp.add_argument("--n", type=_positive_int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--days", type=parse_days)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("calibrate", help="build a bucket calibration table")
    common(sp)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--category", required=True)
    sp.add_argument("--buckets", default="equal:10", help="equal:B, quantile:B or a bucketization file")
    sp.add_argument("--scheme", choices=[s.value for s in SampleWeightScheme], default="impressions-x-score")
    sp.add_argument("--n", type=_positive_int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--days", type=parse_days)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("estimate", help="per-day surrogate arm estimates and deltas")
    common(sp)
    sp.add_argument("--calibration", required=True)
    sp.add_argument("--arms", type=parse_arms, default=parse_arms("control=control,treatment=treatment"))
    sp.add_argument("--days", type=parse_days)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="single-calibration-draw Monte Carlo per day")
    common(sp)
    sp.add_argument("--calibration", required=True)
    sp.add_argument("--arms", type=parse_arms, default=parse_arms("control=control,treatment=treatment"))
    sp.add_argument("--days", type=parse_days)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--repeats", type=_positive_int, default=1)
    sp.add_argument("--mode", choices=sorted(MODES), default="binomial")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("delta-test", help="sign test over daily deltas")
    sp.add_argument("--daily", required=True, help="daily.jsonl from estimate or simulated.jsonl")
    sp.add_argument("--alpha", type=_alpha, default=0.05)
    sp.add_argument("--run", type=int, help="simulation run to test when the file holds several")
    sp.add_argument("--experiment", default="")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_delta_test)

    sp = sub.add_parser("hh", help="reference Hansen-Hurwitz estimate from a labeled sample")
    sp.add_argument("--logs", required=True)
    sp.add_argument("--sample", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--category")
    sp.add_argument("--arm", action="append", help="restrict the segment to this arm (repeatable)")
    sp.add_argument("--days", type=parse_days)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_hh)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = RunManifest(args.command, args)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", MissingScoreWarning)
            warnings.showwarning = lambda m, *a, **k: print(f"warning: {m}", file=sys.stderr)
            outputs = args.func(args, manifest)
        manifest.write(Path(args.out), outputs)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except (EmptyCalibrationBucketError, MissingLabelError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
