"""Command-line entry point: ``awpo {score,train,verify-bounds,export}``.

Exit codes: 0 success, 1 runtime failure, 2 config/usage/input error,
3 bound violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import backend_name
from .advantage import ConfigError
from .config import RunConfig, load_config
from .judge import RemoteJudge
from .rewards import outcome_reward
from .sim import TrainingAborted, env_digest, generate_env, summarize_run, train
from .theory import run_audit
from .toolgraph import parse_tool_graph, read_prediction_file, read_truth_file

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_BOUND = 0, 1, 2, 3

EXPORT_COLUMNS = ("iteration", "objective", "mean_w_mix", "clip_radius", "mean_r_out", "mean_r_mix",
                  "eval_exact_match")

log = logging.getLogger("awpo")


class InputError(Exception):
    pass


def _dump_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ------------------------------------------------------------------- score

def score_files(pred_path, truth_path) -> dict:
    try:
        preds = read_prediction_file(pred_path)
        truths = read_truth_file(truth_path)
    except OSError as exc:
        raise InputError(f"cannot read input: {exc}") from exc
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if len(preds) != len(truths):
        raise InputError(f"line count mismatch: {len(preds)} predictions vs {len(truths)} ground-truth rows")
    rows = []
    for p, t in zip(preds, truths):
        if p["prompt_id"] != t["prompt_id"]:
            raise InputError(f"{pred_path}:{p['line']}: prompt_id {p['prompt_id']!r} does not match "
                             f"{truth_path}:{t['line']} ({t['prompt_id']!r})")
        graph, valid = parse_tool_graph(p["response"])
        r = outcome_reward(t["truth"], graph, valid)
        rows.append({"prompt_id": p["prompt_id"], "line": p["line"], **r.to_dict()})
    keys = ("s_format", "r_name", "r_para", "r_value", "s_exec", "total")
    aggregate = {k: (float(np.mean([r[k] for r in rows])) if rows else 0.0) for k in keys}
    return {"rows": rows, "aggregate": aggregate, "count": len(rows)}


def cmd_score(args) -> int:
    report = score_files(args.pred, args.truth)
    for row in report["rows"]:
        print(f"{row['prompt_id']}\tformat={row['s_format']:.0f} name={row['r_name']:.4f} "
              f"para={row['r_para']:.4f} value={row['r_value']:.4f} exec={row['s_exec']:.4f} "
              f"total={row['total']:.4f}")
    agg = report["aggregate"]
    print(f"mean\ttotal={agg['total']:.4f} exec={agg['s_exec']:.4f} format={agg['s_format']:.4f} (n={report['count']})")
    if args.out:
        _dump_json(report, Path(args.out))
    return EXIT_OK


# ------------------------------------------------------------------- train

def _make_judge(cfg: RunConfig, run_dir: Path):
    js = cfg.trainer.judge
    if js.mode == "mock":
        return None
    if js.mode == "constant":
        from .judge import ConstantJudge

        return ConstantJudge(js.constant_value)
    return RemoteJudge(js.endpoint, timeout=js.timeout, retries=js.retries, concurrency=js.concurrency,
                       cache_dir=js.cache_dir or None, on_failure=js.on_failure)


def run_training(cfg: RunConfig, out_dir: Path | None = None) -> dict:
    """Train and write the run directory; returns the metrics summary."""
    run_dir = Path(out_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    tasks = generate_env(cfg.trainer.env)
    (run_dir / "env.json").write_text(env_digest(tasks) + "\n", encoding="utf-8")
    judge = _make_judge(cfg, run_dir)
    started = time.time()
    try:
        policy, records = train(cfg.trainer, tasks, judge=judge, run_dir=run_dir)
    finally:
        if isinstance(judge, RemoteJudge):
            judge.close()
    policy.save(run_dir / "final_policy.json")
    metrics = summarize_run(cfg.trainer, policy, records, tasks)
    _dump_json(metrics, run_dir / "metrics.json")
    _dump_json({"started": started, "duration_s": time.time() - started, "backend": backend_name(),
                "version": __version__}, run_dir / "run_info.json")
    return metrics


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out) if args.out else None
    try:
        metrics = run_training(cfg, out)
    except TrainingAborted as exc:
        print(f"error: training aborted after {len(exc.records)} iterations: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    f = metrics["final"]
    print(f"{metrics['algorithm']} seed={metrics['seed']} iterations={metrics['iterations']} "
          f"exact_match={f['exact_match']:.4f} mean_total={f['mean_total']:.4f} mean_w_mix={metrics['mean_w_mix']:.5f}")
    return EXIT_OK


# ----------------------------------------------------------- verify-bounds

def cmd_verify_bounds(args) -> int:
    cfg = load_config(args.config, args.set)
    summaries = run_audit(cfg.theory)
    report = {"config": cfg.to_dict()["theory"], "bounds": [s.to_dict() for s in summaries]}
    violated = [s for s in summaries if s.exact and not s.satisfied]
    report["violations"] = sum(s.violations for s in violated)
    report["skipped"] = max((s.skipped for s in summaries), default=0)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "bounds_report.json"
    _dump_json(report, out)
    for s in summaries:
        tag = "ok" if s.satisfied else "VIOLATED"
        extra = "".join(f" {k}={v:.6g}" for k, v in s.details.items())
        print(f"{s.name:24s} {tag:8s} trials={s.trials} violations={s.violations} skipped={s.skipped} "
              f"min_margin={s.min_margin:.3e}{extra}")
    return EXIT_BOUND if violated else EXIT_OK


# ------------------------------------------------------------------ export

def export_rows(run_dir: Path) -> list[dict]:
    path = run_dir / "records.jsonl"
    if not path.exists():
        raise InputError(f"no records.jsonl in {run_dir}")
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows.append({k: rec[k] for k in EXPORT_COLUMNS})
            except (ValueError, KeyError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise InputError(f"{path} is empty")
    return rows


def export_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EXPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    text = export_csv(export_rows(run_dir))
    out = Path(args.out) if args.out else run_dir / "iterations.csv"
    out.write_text(text, encoding="utf-8")
    print(f"wrote {text.count(chr(10)) - 1} rows to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="awpo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score predicted transcripts against ground truth")
    p.add_argument("pred", help="prediction JSONL (prompt_id, response)")
    p.add_argument("truth", help="ground-truth JSONL (prompt_id, truth, reference_reasoning)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_score)

    for name, func, help_ in (("train", cmd_train, "run the training simulator"),
                              ("verify-bounds", cmd_verify_bounds, "audit the improvement bounds")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. hp.eps_mix=0.3 (repeatable)")
        p.add_argument("--out", help="output directory (train) or report file (verify-bounds)")
        p.set_defaults(func=func)

    p = sub.add_parser("export", help="export per-iteration CSV from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="CSV path (default: RUN_DIR/iterations.csv)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
