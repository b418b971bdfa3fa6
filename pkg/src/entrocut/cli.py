"""Command line entry point: ``entrocut run|score|pareto|analyze``.

Exit codes: 0 success, 1 usage/config/input error, 2 too many failed episodes.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import config as cfg
from .harness import RunStore, build_report_from_records, entropy_analysis, latest_records, run_experiment
from .metrics import MetricReport, pareto_flags
from .models import ModelError, TokenModel
from .policy import ConfigError, config_fingerprint

EXIT_OK, EXIT_USAGE, EXIT_FAILURES = 0, 1, 2

log = logging.getLogger("entrocut")


class UsageError(Exception):
    pass


def make_model(target: str, model_section: dict[str, Any]) -> TokenModel:
    kind, sep, arg = target.partition(":")
    if not sep or not arg:
        raise UsageError(f"model target must be scripted:<fixture>, replay:<trace> or remote:<url>, got {target!r}")
    if kind == "scripted":
        from .fixtures import load_scripted

        try:
            return load_scripted(arg)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load scripted fixture {arg!r}: {exc}") from None
    if kind == "replay":
        from .trace import TraceSchemaError, replay_model

        try:
            return replay_model(arg)
        except (OSError, ValueError, TraceSchemaError) as exc:
            raise UsageError(f"cannot load trace {arg!r}: {exc}") from None
    if kind == "remote":
        from .remote import RemoteCompletionsModel

        return RemoteCompletionsModel(
            arg,
            str(model_section["name"]),
            api_key_env=str(model_section["api_key_env"]),
            timeout=float(model_section["timeout"]),
            top_logprobs=int(model_section["top_logprobs"]),
            max_retries=int(model_section["max_retries"]),
        )
    raise UsageError(f"unknown model target kind {kind!r} (expected scripted, replay or remote)")


def _flag_layer(args: argparse.Namespace) -> list[tuple[str, str, Any]]:
    flags = [cfg.parse_assignment(s) for s in args.set or []]
    named = {
        "temperature": ("sampling", "temperature"),
        "top_p": ("sampling", "top_p"),
        "tau": ("controller", "tau"),
        "probe_k": ("controller", "probe_k"),
        "seed": ("plan", "base_seed"),
        "concurrency": ("plan", "concurrency"),
        "failure_threshold": ("plan", "failure_threshold"),
        "model": ("model", "target"),
        "model_name": ("model", "name"),
        "out": ("output", "dir"),
    }
    for attr, (section, key) in named.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags.append((section, key, value))
    return flags


def cmd_run(args: argparse.Namespace) -> int:
    file_data = cfg.load_file(args.plan)
    tree = cfg.resolve(file_data, os.environ, _flag_layer(args))
    plan = cfg.build_plan(tree, Path(args.plan).parent)
    cells = plan.cells()
    if args.dry_run:
        print(cfg.dumps(tree))
        for m in plan.methods:
            for d in plan.datasets:
                fp = config_fingerprint(m.config_for(d.name), plan.sampling)
                print(f"method {m.name} on {d.name}: fingerprint {fp}, {plan.repetitions_for(d)} repetition(s)")
        print(f"planned cells: {len(cells)}")
        return EXIT_OK

    model = make_model(str(tree["model"]["target"]), tree["model"])
    store = RunStore(tree["output"]["dir"])
    with contextlib.ExitStack() as stack:
        if args.record:
            from .trace import record_trace

            sink = stack.enter_context(open(args.record, "w", encoding="utf-8"))
            model = record_trace(model, sink, sampling=plan.sampling)
        try:
            outcome = run_experiment(plan, model, store, limit=args.limit)
        finally:
            close = getattr(model, "close", None)
            if close:
                close()
    if outcome.executed == 0:
        print("nothing to do")
        return EXIT_OK
    print(outcome.report.format_table(), end="")
    print(f"ran {outcome.executed} episode(s), skipped {outcome.skipped} completed, {outcome.failed} failed")
    threshold = float(tree["plan"]["failure_threshold"])
    if outcome.executed and 100.0 * outcome.failed / outcome.executed > threshold:
        print(f"error: {outcome.failed}/{outcome.executed} episodes failed (threshold {threshold}%)", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def _open_store(path: str) -> RunStore:
    if not (Path(path) / "records.jsonl").exists():
        raise UsageError(f"{path}: not a run directory (no records.jsonl)")
    return RunStore(path)


def cmd_score(args: argparse.Namespace) -> int:
    if args.dry_run:
        n = sum(1 for line in open(Path(args.store) / "records.jsonl", encoding="utf-8") if line.strip())
        print(f"would score {n} record line(s) in {args.store}")
        return EXIT_OK
    store = _open_store(args.store)
    report = build_report_from_records(store.records)
    store.write_report(report)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(report.format_table(), end="")
    return EXIT_OK


def _report_points(paths: Sequence[str], method: str | None, dataset: str | None) -> list[tuple[float, float, str]]:
    points = []
    for path in paths:
        try:
            report = MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read report {path}: {exc}") from None
        for s in report.summaries:
            if (method and s.method_name != method) or (dataset and s.dataset != dataset):
                continue
            label = f"{Path(path).stem}:{s.method_name}@{s.dataset}"
            points.append((s.mean_tokens, s.accuracy, label))
    return points


def cmd_pareto(args: argparse.Namespace) -> int:
    points = _report_points(args.reports, args.method, args.dataset)
    if args.dry_run:
        print(f"would write {len(points)} point(s) to {args.out}")
        return EXIT_OK
    if not points:
        raise UsageError("no report points matched")
    flags = pareto_flags(points)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tokens", "accuracy", "label", "frontier"])
        for (tok, acc, label), flag in zip(points, flags):
            w.writerow([repr(tok), repr(acc), label, int(flag)])
    frontier = sorted((p for p, f in zip(points, flags) if f), key=lambda p: p[0])
    print("frontier: " + ", ".join(p[2] for p in frontier))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    store = _open_store(args.store)
    records = [
        r
        for r in latest_records(store.records).values()
        if (not args.method or r.method == args.method) and (not args.dataset or r.dataset == args.dataset)
    ]
    bundle = entropy_analysis(records, bins=args.bins)
    if bundle.correct is None and bundle.incorrect is None:
        print("error: no response-entropy data in the selected records", file=sys.stderr)
        return EXIT_USAGE
    if args.dry_run:
        print(f"would analyze {len(records) - bundle.skipped} episode(s), skipping {bundle.skipped}")
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups = [(g, s) for g, s in (("correct", bundle.correct), ("incorrect", bundle.incorrect)) if s is not None]
    absent = [g for g, s in (("correct", bundle.correct), ("incorrect", bundle.incorrect)) if s is None]
    note = f"# absent groups: {', '.join(absent)}\n" if absent else ""

    with open(out / "entropy_groups.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(note)
        w = csv.writer(fh)
        w.writerow(["group", "episodes", "mean_entropy"])
        for g, s in groups:
            w.writerow([g, s.count, repr(s.mean)])
    with open(out / "entropy_histogram.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(note)
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi"] + [f"{g}_count" for g, _ in groups])
        edges = bundle.bin_edges
        for i in range(len(edges) - 1):
            w.writerow([repr(edges[i]), repr(edges[i + 1])] + [s.histogram[i] for _, s in groups])
    with open(out / "prefix_curve.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(note)
        w = csv.writer(fh)
        labels = [g for g, _ in groups]
        w.writerow(["position"] + [c for g in labels for c in (f"{g}_mean", f"{g}_count")])
        length = max(len(bundle.curves[g].means) for g in labels)
        for i in range(length):
            row: list[Any] = [i + 1]
            for g in labels:
                curve = bundle.curves[g]
                row += [repr(curve.means[i]), curve.counts[i]] if i < len(curve.means) else ["", 0]
            w.writerow(row)
    for g, s in groups:
        print(f"{g}: {s.count} episode(s), mean response entropy {s.mean:.4f}")
    if absent:
        print(f"absent groups: {', '.join(absent)}")
    if bundle.skipped:
        print(f"skipped {bundle.skipped} record(s) without entropy data")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entrocut", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment plan")
    run.add_argument("plan", help="TOML plan/config file")
    run.add_argument("--model", help="scripted:<fixture>, replay:<trace> or remote:<url>")
    run.add_argument("--model-name", help="model name sent to a remote server")
    run.add_argument("--out", help="run directory")
    run.add_argument("--record", metavar="TRACE", help="also write a replayable trace")
    run.add_argument("--limit", type=int, help="run at most this many pending episodes")
    run.add_argument("--temperature", type=float)
    run.add_argument("--top-p", type=float)
    run.add_argument("--tau", type=float, help="shared threshold (methods may override)")
    run.add_argument("--probe-k", type=int)
    run.add_argument("--seed", type=int, help="base seed")
    run.add_argument("--concurrency", type=int)
    run.add_argument("--failure-threshold", type=float, help="max failed episode percentage before exit 2")
    run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    run.set_defaults(func=cmd_run)

    score = sub.add_parser("score", help="recompute the report for a run directory")
    score.add_argument("store")
    score.set_defaults(func=cmd_score)

    pareto = sub.add_parser("pareto", help="accuracy/token frontier over report files")
    pareto.add_argument("reports", nargs="+")
    pareto.add_argument("--out", required=True)
    pareto.add_argument("--method")
    pareto.add_argument("--dataset")
    pareto.set_defaults(func=cmd_pareto)

    analyze = sub.add_parser("analyze", help="response-entropy analysis data")
    analyze.add_argument("store")
    analyze.add_argument("--out", required=True)
    analyze.add_argument("--bins", type=int, default=20)
    analyze.add_argument("--method")
    analyze.add_argument("--dataset")
    analyze.set_defaults(func=cmd_analyze)

    for p in (run, score, pareto, analyze):
        p.add_argument("--dry-run", action="store_true", help="print what would happen and exit")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"error: model failure: {exc}", file=sys.stderr)
        return EXIT_FAILURES


if __name__ == "__main__":
    sys.exit(main())
