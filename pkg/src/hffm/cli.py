"""Command-line entry point: ``hffm run | validate | report``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .config import _strategies, config_to_dict, dump_config, load_config
from .errors import HFFMError
from .metrics import (
    RoundReport, emit_csv, emit_table, ledger_to_csv, mean_reports, read_csv, reports_to_csv,
)
from .protocol import run_experiment
from .topology import generate_topology

OUTPUT_ENV = "HFFM_OUTPUT_DIR"


def _fail(msg: str, code: int = 1) -> int:
    print(f"hffm: error: {msg}", file=sys.stderr)
    return code


def gnuplot_curves(reports) -> str:
    """Whitespace-delimited curves, one ``index`` block per strategy."""
    blocks: dict = {}
    for r in reports:
        blocks.setdefault(r.strategy, []).append(r)
    out = []
    for strategy, rows in blocks.items():
        out.append(f"# {strategy}\n# round cum_latency_s cum_energy_j accuracy\n")
        out.extend(f"{r.round} {r.cumulative_latency_s!r} {r.cumulative_energy_j!r} {r.accuracy!r}\n"
                   for r in rows)
        out.append("\n\n")
    return "".join(out)


def _resolve_out(flag, cfg_dir) -> Path:
    return Path(flag or os.environ.get(OUTPUT_ENV) or cfg_dir)


def _publish(staging: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(staging.iterdir()):
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        item.replace(target)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.strategies:
            policy = dataclasses.replace(cfg.policy, strategies=_strategies(args.strategies, "--strategies"))
            cfg = cfg.with_(policy=policy).validate()
    except HFFMError as exc:
        return _fail(str(exc), 2)
    seeds = [args.seed_override] if args.seed_override is not None else list(cfg.seeds)
    out = _resolve_out(args.out, cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        per_seed, ledgers = [], []
        for seed in seeds:
            reports, ledger = run_experiment(cfg, seed)
            seed_dir = staging / f"seed-{seed}"
            seed_dir.mkdir()
            emit_csv(reports, seed_dir / "report.csv")
            (seed_dir / "ledger.csv").write_text(ledger_to_csv(ledger), encoding="utf-8")
            if args.dump_topology:
                topo = generate_topology(cfg.topology, seed)
                (seed_dir / "topology.txt").write_text(topo.to_text(), encoding="utf-8")
            per_seed.append(reports)
            ledgers.append(ledger_to_csv(ledger, seed))
        mean = mean_reports(per_seed)
        emit_csv(mean, staging / "report.csv")
        emit_table(mean, staging / "table.md")
        header, *_ = ledgers[0].splitlines(keepends=True)
        body = "".join(text.split("\n", 1)[1] for text in ledgers)
        (staging / "ledger.csv").write_text(header + body, encoding="utf-8")
        manifest = {
            "hffm_version": __version__,
            "seeds": seeds,
            "e_agg": {r.strategy: r.e_agg for r in mean},
            "config": config_to_dict(cfg),
        }
        (staging / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        if args.gnuplot:
            (staging / "curves.dat").write_text(gnuplot_curves(mean), encoding="utf-8")
        _publish(staging, out)
    except (HFFMError, OSError) as exc:
        return _fail(str(exc))
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"wrote {out}")
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except HFFMError as exc:
        return _fail(str(exc), 2)
    sys.stdout.write(dump_config(cfg))
    return 0


def _load_run(run_dir: Path):
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise HFFMError(f"{run_dir}: unreadable manifest.json ({exc})") from exc
    seed_dirs = sorted(run_dir.glob("seed-*"), key=lambda p: p.name)
    if not seed_dirs:
        raise HFFMError(f"{run_dir}: no seed-* outputs to aggregate")
    reports = mean_reports([read_csv(d / "report.csv") for d in seed_dirs])
    labels = manifest.get("e_agg", {})
    return [dataclasses.replace(r, e_agg=labels.get(r.strategy, "-")) for r in reports]


def cmd_report(args) -> int:
    try:
        runs = [_load_run(Path(d)) for d in args.runs]
        distinct = {r.e_agg for run in runs for r in run if r.e_agg != "-"}
        combined: list[RoundReport] = []
        seen = set()
        for run in runs:
            for r in run:
                if len(runs) > 1 and len(distinct) > 1 and r.e_agg != "-":
                    r = dataclasses.replace(r, strategy=f"{r.strategy}[e_agg={r.e_agg}]")
                if (r.strategy, r.round) in seen:
                    continue
                seen.add((r.strategy, r.round))
                combined.append(r)
        out = Path(args.out or args.runs[0])
        out.mkdir(parents=True, exist_ok=True)
        emit_csv(combined, out / "report.csv")
        emit_table(combined, out / "table.md")
        if args.gnuplot:
            (out / "curves.dat").write_text(gnuplot_curves(combined), encoding="utf-8")
    except (HFFMError, OSError) as exc:
        return _fail(str(exc))
    sys.stdout.write(reports_to_csv(combined))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hffm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write reports")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV}, then config output_dir)")
    run.add_argument("--strategies", help="comma-separated subset of star,hier,hier-d2d")
    run.add_argument("--seed-override", type=int, help="run this single seed instead of the config's")
    run.add_argument("--gnuplot", action="store_true", help="also write curves.dat")
    run.add_argument("--dump-topology", action="store_true", help="write seed-*/topology.txt")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="parse and validate a config, print it resolved")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)

    rep = sub.add_parser("report", help="re-aggregate the seed outputs of one or more runs")
    rep.add_argument("runs", nargs="+", help="run output directories")
    rep.add_argument("--out", help="destination (default: the first run directory)")
    rep.add_argument("--gnuplot", action="store_true", help="also write curves.dat")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
