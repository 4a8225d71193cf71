"""Command-line entry point: ``ecmcmc run|compare|check|export``.

Exit codes: 0 success, 1 failed self-check, 2 invalid configuration,
3 runtime failure (non-finite state).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, checks, experiment
from .config import (
    ConfigError,
    ExperimentConfig,
    is_compare,
    load_compare,
    load_experiment,
    resolved_dict,
    with_seed,
)
from .errors import ContractError, NonFiniteError
from .kernels import BACKEND

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
TRACE_HEADER = ("run_id", "arm", "worker", "step", "virtual_time", "metric", "value")
ARTIFACTS = ("trace.csv", "samples.jsonl", "summary.json", "series.csv")


class _Console:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def say(self, text: str):
        if not self.quiet:
            print(text)

    @staticmethod
    def error(text: str):
        print(f"error: {text}", file=sys.stderr)


def _num(x) -> str:
    return format(float(x), ".17g")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def run_id(resolved: dict, mode: str) -> str:
    blob = json.dumps({"config": resolved, "mode": mode}, sort_keys=True).encode()
    return _sha256(blob)[:12]


def trace_csv(rid: str, arm: str, result, metrics: dict) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for rec in result.trace_records(metrics):
        w.writerow((rid, arm, rec.worker, rec.step, _num(rec.virtual_time), rec.metric, _num(rec.value)))
    return buf.getvalue().encode()


def samples_jsonl(rid: str, arm: str, result) -> bytes:
    lines = []
    for i in range(result.samples.shape[0]):
        lines.append(json.dumps({
            "run_id": rid,
            "arm": arm,
            "seed": result.seed,
            "worker": int(result.sample_worker[i]),
            "step": int(result.sample_step[i]),
            "virtual_time": float(result.sample_time[i]),
            "theta": [float(v) for v in result.samples[i]],
        }))
    return ("\n".join(lines) + ("\n" if lines else "")).encode()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode()


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _clear(out: Path):
    for name in ARTIFACTS + ("manifest.json",):
        (out / name).unlink(missing_ok=True)


def publish(out: Path, files: dict, manifest: dict):
    """Write ``files`` then a manifest with their checksums, all or nothing.

    Files are staged in a temporary directory next to ``out`` and moved in
    only once every one of them has been written.
    """
    out.mkdir(parents=True, exist_ok=True)
    _clear(out)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out))
    try:
        for name, data in files.items():
            (stage / name).write_bytes(data)
        manifest = dict(manifest, status="complete",
                        artifacts={name: _sha256(data) for name, data in files.items()})
        for name in files:
            shutil.move(str(stage / name), str(out / name))
        (out / "manifest.json").write_bytes(_json_bytes(manifest))
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def publish_failure(out: Path, manifest: dict, error: str, step=None):
    out.mkdir(parents=True, exist_ok=True)
    _clear(out)
    manifest = dict(manifest, status="incomplete", error=error, failed_step=step, artifacts={})
    (out / "manifest.json").write_bytes(_json_bytes(manifest))


def _base_manifest(resolved: dict, seed: int, mode: str, rid: str, command: str) -> dict:
    return {
        "command": command,
        "run_id": rid,
        "seed": seed,
        "mode": mode,
        "config": resolved,
        "backend": BACKEND,
        "version": __version__,
    }


def _load_single(args) -> ExperimentConfig:
    cfg = load_experiment(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def cmd_run(args, con: _Console) -> int:
    try:
        if is_compare(args.config):
            raise ConfigError("this file lists arms; use 'ecmcmc compare'")
        cfg = _load_single(args)
    except ConfigError as exc:
        con.error(f"invalid config {args.config}:\n{exc}")
        return EXIT_CONFIG
    mode = args.mode
    if cfg.protocol.scheme == "optimizer":
        mode = "virtual"
    resolved = resolved_dict(cfg)
    rid = run_id(resolved, mode)
    out = Path(args.out or cfg.output.dir)
    manifest = _base_manifest(resolved, cfg.run.seed, mode, rid, "run")
    try:
        built = experiment.build_model(cfg.model)
        with np.errstate(over="ignore", invalid="ignore"):
            result = experiment.execute(cfg, built, mode)
        summary = experiment.summarize(cfg, built, result)
    except NonFiniteError as exc:
        publish_failure(out, manifest, str(exc), exc.step)
        con.error(str(exc))
        return EXIT_RUNTIME
    except ContractError as exc:
        publish_failure(out, manifest, str(exc))
        con.error(f"invalid config {args.config}:\n{exc}")
        return EXIT_CONFIG
    arm = cfg.sampler.kind
    files = {}
    if cfg.output.trace:
        files["trace.csv"] = trace_csv(rid, arm, result, experiment.sample_metrics(cfg, built))
    if cfg.output.samples:
        files["samples.jsonl"] = samples_jsonl(rid, arm, result)
    files["summary.json"] = _json_bytes(dict(summary, run_id=rid, arm=arm))
    publish(out, files, manifest)
    con.say(f"run {rid}: {result.samples.shape[0]} samples, artifacts in {out}")
    for key in ("mean_error", "cov_rel_error", "predictive_nll", "steps_to_threshold"):
        if key in summary:
            con.say(f"  {key} = {summary[key]}")
    return EXIT_OK


def _final(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(finite[-1]) if finite.size else float("nan")


def cmd_compare(args, con: _Console) -> int:
    try:
        cfg = load_compare(args.config)
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
        arms = cfg.experiments()
    except ConfigError as exc:
        con.error(f"invalid config {args.config}:\n{exc}")
        return EXIT_CONFIG
    resolved = resolved_dict(cfg)
    rid = run_id(resolved, args.mode)
    out = Path(args.out or cfg.output.dir)
    manifest = _base_manifest(resolved, cfg.run.seed, args.mode, rid, "compare")
    results = {}
    try:
        built = experiment.build_model(arms[0][1].model)
        for name, arm_cfg in arms:
            mode = "virtual" if arm_cfg.protocol.scheme == "optimizer" else args.mode
            with np.errstate(over="ignore", invalid="ignore"):
                results[name] = experiment.execute(arm_cfg, built, mode)
    except NonFiniteError as exc:
        publish_failure(out, manifest, f"arm {name}: {exc}", exc.step)
        con.error(f"arm {name}: {exc}")
        return EXIT_RUNTIME
    except ContractError as exc:
        publish_failure(out, manifest, str(exc))
        con.error(str(exc))
        return EXIT_CONFIG
    horizon = max(float(r.sample_time.max()) if r.sample_time.size else 0.0 for r in results.values())
    step = cfg.compare.grid_step
    grid = np.arange(step, horizon + step / 2, step)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    winners = {}
    summaries = {}
    for name, arm_cfg in arms:
        res = results[name]
        summaries[name] = experiment.summarize(arm_cfg, built, res)
        for metric, values in experiment.series(arm_cfg, built, res, grid,
                                                cfg.compare.burn_in_time).items():
            for j, g in enumerate(grid):
                w.writerow((rid, name, "all", j + 1, _num(g), metric, _num(values[j])))
            winners.setdefault(metric, {})[name] = _final(values)
        if "steps_to_threshold" in summaries[name]:
            hit = summaries[name]["steps_to_threshold"]
            winners.setdefault("steps_to_threshold", {})[name] = float("inf") if hit is None else float(hit)
    table = {}
    for metric, values in winners.items():
        ranked = sorted((v, n) for n, v in values.items() if np.isfinite(v))
        table[metric] = {"final": values, "winner": ranked[0][1] if ranked else None}
    summary = {"run_id": rid, "arms": summaries, "winners": table, "grid_step": step}
    publish(out, {"series.csv": buf.getvalue().encode(), "summary.json": _json_bytes(summary)}, manifest)
    con.say(f"compare {rid}: {len(arms)} arms, artifacts in {out}")
    for metric, row in table.items():
        cells = "  ".join(f"{n}={v:.6g}" for n, v in row["final"].items())
        con.say(f"  {metric:20s} winner={row['winner']}  {cells}")
    return EXIT_OK


def cmd_check(args, con: _Console) -> int:
    results = checks.run_all(mismatch_noise_scaling=args.mismatch_noise_scaling)
    for r in results:
        con.say(r.line())
    ok = checks.verdict(results)
    failed = [r.name for r in results if r.counts and not r.passed]
    con.say("all checks passed" if ok else f"failed: {', '.join(failed)}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_export(args, con: _Console) -> int:
    src = Path(args.source)
    if src.is_dir():
        src = src / "samples.jsonl"
    try:
        lines = src.read_text().splitlines()
    except OSError as exc:
        con.error(f"cannot read {src}: {exc.strerror}")
        return EXIT_CONFIG
    dest = Path(args.out) if args.out else src.with_suffix(".csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    width = None
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            theta = rec["theta"]
            if width is None:
                width = len(theta)
                w.writerow(["run_id", "arm", "seed", "worker", "step", "virtual_time"]
                           + [f"theta_{j}" for j in range(width)])
            if len(theta) != width:
                raise ValueError("theta length changes between lines")
            w.writerow([rec["run_id"], rec["arm"], rec["seed"], rec["worker"], rec["step"],
                        _num(rec["virtual_time"])] + [_num(v) for v in theta])
        except (ValueError, KeyError, TypeError) as exc:
            con.error(f"{src}:{i + 1}: malformed sample record ({exc})")
            return EXIT_CONFIG
    dest.write_text(buf.getvalue())
    con.say(f"wrote {dest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--mode", choices=("virtual", "threads"), default="virtual",
                        help="virtual-time simulation (default) or real threads")
    common.add_argument("--out", help="output directory (run/compare) or file (export)")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    parser = argparse.ArgumentParser(prog="ecmcmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run one experiment")
    p.add_argument("--config", required=True)
    p = sub.add_parser("compare", parents=[common], help="run several arms on one model")
    p.add_argument("--config", required=True)
    p = sub.add_parser("check", parents=[common], help="run the invariant self-checks")
    p.add_argument("--mismatch-noise-scaling", action="store_true",
                   help="negative control: decoupling test with mismatched noise scaling")
    p = sub.add_parser("export", parents=[common], help="convert samples.jsonl to CSV")
    p.add_argument("source", help="samples.jsonl or a run directory")
    return parser


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "check": cmd_check, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        _Console.error("--seed must be non-negative")
        return EXIT_CONFIG
    return COMMANDS[args.command](args, _Console(args.quiet))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
