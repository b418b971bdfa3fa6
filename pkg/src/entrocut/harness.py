"""Experiment orchestration: datasets, run records, resumable stores, analysis."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .answers import DEFAULT_EXTRACTION, ExtractionPolicy, extract_answer, score_answer
from .entropy import GroupStats, grouped_entropy_stats, prefix_mean_curve
from .fixtures import DEFAULT_TEMPLATE, render_prompt
from .metrics import MethodSummary, MetricReport, build_report
from .models import ModelError, SamplingConfig, TokenModel
from .policy import ConfigError, ControllerConfig, Mode, config_fingerprint, run_episode

log = logging.getLogger(__name__)

DEFAULT_REPETITIONS = {"aime24": 16, "aime25": 16, "amc23": 16, "math500": 4}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Problem:
    id: str
    prompt_text: str
    gold_answer: str
    dataset_name: str
    metadata: Mapping[str, Any] = field(default_factory=dict)


def _problem_from_row(row: Mapping[str, Any], line: int, dataset: str) -> Problem:
    for key in ("id", "question", "answer"):
        value = row.get(key)
        if value is None or str(value).strip() == "":
            raise DatasetError(f"line {line}: missing or empty field {key!r}")
    meta = {k: v for k, v in row.items() if k not in ("id", "question", "answer") and v not in (None, "")}
    return Problem(str(row["id"]).strip(), str(row["question"]), str(row["answer"]).strip(), dataset, meta)


def ingest_dataset(path: str | Path, format: str | None = None, name: str | None = None) -> list[Problem]:
    """Load problems from JSON lines or CSV (columns ``id``, ``question``, ``answer``)."""
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "jsonl")
    dataset = name or path.stem
    problems: list[Problem] = []
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            reader = csv.DictReader(fh)
            for line, row in enumerate(reader, start=2):
                problems.append(_problem_from_row(row, line, dataset))
        elif fmt == "jsonl":
            for line, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    row = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"line {line}: invalid JSON ({exc.msg})") from None
                if not isinstance(row, dict):
                    raise DatasetError(f"line {line}: expected an object")
                problems.append(_problem_from_row(row, line, dataset))
        else:
            raise DatasetError(f"unknown dataset format {fmt!r}")
    if not problems:
        raise DatasetError(f"{path}: dataset is empty")
    seen: set[str] = set()
    for p in problems:
        if p.id in seen:
            raise DatasetError(f"{path}: duplicate problem id {p.id!r}")
        seen.add(p.id)
    return problems


def export_dataset(problems: Sequence[Problem], path: str | Path, format: str = "jsonl") -> None:
    path = Path(path)
    rows = [{"id": p.id, "question": p.prompt_text, "answer": p.gold_answer, **p.metadata} for p in problems]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if format == "csv":
            cols = list(dict.fromkeys(k for r in rows for k in r))
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(rows)
        else:
            for r in rows:
                fh.write(json.dumps(r, ensure_ascii=False) + "\n")


@dataclass
class RunRecord:
    problem_id: str
    dataset: str
    method: str
    mode: str
    repetition: int
    seed: int
    fingerprint: str
    think_token_count: int = 0
    transition_token_count: int = 0
    response_token_count: int = 0
    probe_overhead_tokens: int = 0
    probe_history: list[dict[str, Any]] = field(default_factory=list)
    response_entropy: list[float] = field(default_factory=list)
    extracted_answer: str | None = None
    correct: bool = False
    termination_cause: str | None = None
    anomalies: list[str] = field(default_factory=list)
    failed: bool = False
    failure_reason: str | None = None
    wall_clock_ms: float = 0.0
    probe_wall_ms: list[float] = field(default_factory=list)

    WALL_CLOCK_FIELDS = ("wall_clock_ms", "probe_wall_ms")

    @property
    def cell(self) -> tuple[str, str, int, str]:
        return (self.method, self.dataset, self.repetition, self.problem_id)

    @property
    def total_tokens(self) -> int:
        """Kept-path length: think, forced transition, and response tokens."""
        return self.think_token_count + self.transition_token_count + self.response_token_count

    @property
    def response_entropy_mean(self) -> float | None:
        if not self.response_entropy:
            return None
        return math.fsum(self.response_entropy) / len(self.response_entropy)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def comparable(self) -> dict[str, Any]:
        d = self.to_dict()
        for k in self.WALL_CLOCK_FIELDS:
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunRecord":
        return cls(**d)


@dataclass
class MethodSpec:
    name: str
    config: ControllerConfig
    tau_overrides: dict[str, float] = field(default_factory=dict)

    def config_for(self, dataset: str) -> ControllerConfig:
        if dataset in self.tau_overrides:
            return self.config.with_(tau=float(self.tau_overrides[dataset]))
        return self.config

    def to_dict(self) -> dict[str, Any]:
        d = {"name": self.name, **self.config.to_dict()}
        if self.tau_overrides:
            d["tau_overrides"] = dict(self.tau_overrides)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: Mapping[str, Any] | None = None) -> "MethodSpec":
        d = dict(d)
        name = d.pop("name", None)
        if not name:
            raise ConfigError("every method needs a name")
        overrides = {str(k): float(v) for k, v in (d.pop("tau_overrides", None) or {}).items()}
        merged = {**(base or {}), **d}
        try:
            config = ControllerConfig.from_dict(merged).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"method {name!r}: {exc}") from None
        return cls(str(name), config, overrides)


@dataclass
class DatasetSpec:
    name: str
    problems: list[Problem]
    repetitions: int | None = None
    path: str | None = None


@dataclass
class ExperimentPlan:
    datasets: list[DatasetSpec]
    methods: list[MethodSpec]
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    base_seed: int = 0
    concurrency: int = 4
    template: str = DEFAULT_TEMPLATE
    extraction: tuple[ExtractionPolicy, ...] = DEFAULT_EXTRACTION

    def repetitions_for(self, dataset: DatasetSpec) -> int:
        if dataset.repetitions is not None:
            return dataset.repetitions
        return DEFAULT_REPETITIONS.get(dataset.name.lower(), 1)

    def validate(self) -> "ExperimentPlan":
        if not self.datasets:
            raise ConfigError("plan has no datasets")
        if not self.methods:
            raise ConfigError("plan has no methods")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"method names must be unique: {names}")
        ds_names = [d.name for d in self.datasets]
        if len(set(ds_names)) != len(ds_names):
            raise ConfigError(f"dataset names must be unique: {ds_names}")
        for d in self.datasets:
            if self.repetitions_for(d) < 1:
                raise ConfigError(f"dataset {d.name!r}: repetitions must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if "{question}" not in self.template:
            raise ConfigError("prompt template must contain {question}")
        return self

    def anchors(self) -> dict[str, str]:
        out = {}
        for m in self.methods:
            if m.config.mode is Mode.VANILLA:
                out.setdefault("vanilla", m.name)
            elif m.config.mode is Mode.NOWAIT:
                out.setdefault("nowait", m.name)
        return out

    def cells(self) -> list[tuple[MethodSpec, DatasetSpec, int, Problem]]:
        return [
            (m, d, rep, p)
            for d in self.datasets
            for m in self.methods
            for rep in range(self.repetitions_for(d))
            for p in d.problems
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_seed": self.base_seed,
            "concurrency": self.concurrency,
            "template": self.template,
            "extraction": [str(p) for p in self.extraction],
            "sampling": self.sampling.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "datasets": [
                {"name": d.name, "path": d.path, "repetitions": self.repetitions_for(d), "problems": len(d.problems)}
                for d in self.datasets
            ],
        }


def cell_seed(base_seed: int, method: str, repetition: int, problem_id: str) -> int:
    """Stable per-cell seed, so any single cell can be rerun in isolation."""
    raw = json.dumps([base_seed, method, repetition, problem_id]).encode()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "big") >> 1


class RunStore:
    """One experiment directory: plan snapshot, append-only record log, index, reports."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.records_path = self.root / "records.jsonl"
        self.index_path = self.root / "index.jsonl"
        self._lock = threading.Lock()
        self._records = self._load_records()
        self._done: dict[tuple, str] = {}
        for rec in self._records:
            if not rec.failed:
                self._done[rec.cell] = rec.fingerprint
        self._reconcile_index()

    def _load_records(self) -> list[RunRecord]:
        if not self.records_path.exists():
            return []
        data = self.records_path.read_bytes()
        records = []
        good_end = 0
        pos = 0
        for raw in data.splitlines(keepends=True):
            pos += len(raw)
            if not raw.endswith(b"\n"):
                log.warning("dropping truncated final line in %s", self.records_path)
                break
            try:
                records.append(RunRecord.from_dict(json.loads(raw)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{self.records_path}: corrupt record at byte {pos - len(raw)}: {exc}") from None
            good_end = pos
        if good_end < len(data):
            with open(self.records_path, "r+b") as fh:
                fh.truncate(good_end)
        return records

    def _reconcile_index(self) -> None:
        # the index is derived from the log; rewrite it whenever they disagree
        want = [{"cell": list(c), "fingerprint": f} for c, f in self._done.items()]
        have = []
        if self.index_path.exists():
            for raw in self.index_path.read_text(encoding="utf-8").splitlines():
                try:
                    have.append(json.loads(raw))
                except json.JSONDecodeError:
                    have = None
                    break
        if have != want:
            with open(self.index_path, "w", encoding="utf-8") as fh:
                for row in want:
                    fh.write(json.dumps(row) + "\n")

    @property
    def records(self) -> list[RunRecord]:
        with self._lock:
            return list(self._records)

    def is_done(self, cell: tuple, fingerprint: str) -> bool:
        return self._done.get(cell) == fingerprint

    def append(self, record: RunRecord) -> None:
        line = json.dumps(record.to_dict(), ensure_ascii=False) + "\n"
        with self._lock:
            with open(self.records_path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self._records.append(record)
            if not record.failed:
                self._done[record.cell] = record.fingerprint
                with open(self.index_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"cell": list(record.cell), "fingerprint": record.fingerprint}) + "\n")

    def write_plan(self, plan: ExperimentPlan) -> None:
        (self.root / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")

    def read_plan(self) -> dict[str, Any] | None:
        p = self.root / "plan.json"
        return json.loads(p.read_text()) if p.exists() else None

    def write_report(self, report: MetricReport) -> None:
        (self.root / "report.json").write_text(report.to_json(), encoding="utf-8")
        (self.root / "report.csv").write_text(report.to_csv(), encoding="utf-8")


def _execute_cell(
    plan: ExperimentPlan,
    model: TokenModel,
    method: MethodSpec,
    dataset: DatasetSpec,
    repetition: int,
    problem: Problem,
    clock: Callable[[], float],
) -> RunRecord:
    config = method.config_for(dataset.name)
    rec = RunRecord(
        problem_id=problem.id,
        dataset=dataset.name,
        method=method.name,
        mode=config.mode.value,
        repetition=repetition,
        seed=cell_seed(plan.base_seed, method.name, repetition, problem.id),
        fingerprint=config_fingerprint(config, plan.sampling),
    )
    started = clock()
    try:
        query = model.encode(render_prompt(plan.template, problem.prompt_text))
        state = run_episode(model, query, config, plan.sampling, seed=rec.seed, clock=clock)
        response_text = model.decode(list(state.transition_tokens) + list(state.response_tokens))
    except ModelError as exc:
        rec.failed = True
        rec.failure_reason = f"{type(exc).__name__}: {exc}"
        rec.wall_clock_ms = (clock() - started) * 1000.0
        return rec
    rec.think_token_count = len(state.think_tokens)
    rec.transition_token_count = len(state.transition_tokens)
    rec.response_token_count = len(state.response_tokens)
    rec.probe_overhead_tokens = state.probe_overhead_tokens
    rec.probe_history = [
        {**p.to_dict(), "decision": o.value} for p, o in zip(state.probe_history, state.probe_outcomes)
    ]
    rec.response_entropy = list(state.response_entropy)
    rec.extracted_answer = extract_answer(response_text, plan.extraction)
    rec.correct = score_answer(response_text, problem.gold_answer, plan.extraction)
    rec.termination_cause = state.termination_cause.value if state.termination_cause else None
    rec.anomalies = list(state.anomalies)
    rec.probe_wall_ms = list(state.probe_wall_ms)
    rec.wall_clock_ms = (clock() - started) * 1000.0
    return rec


def latest_records(records: Iterable[RunRecord]) -> dict[tuple, RunRecord]:
    """One record per cell: the last success, else the last failure."""
    out: dict[tuple, RunRecord] = {}
    for rec in records:
        prev = out.get(rec.cell)
        if prev is None or not rec.failed or prev.failed:
            out[rec.cell] = rec
    return out


def summarize_records(records: Iterable[RunRecord]) -> list[MethodSummary]:
    """Acc/Tok per (method, dataset), averaged over repetitions.

    Failed episodes are excluded from the means but counted.
    """
    by_rep: dict[tuple[str, str], dict[int, list[RunRecord]]] = {}
    for rec in latest_records(records).values():
        by_rep.setdefault((rec.method, rec.dataset), {}).setdefault(rec.repetition, []).append(rec)
    out = []
    for (method, dataset), reps in by_rep.items():
        accs, toks, overheads = [], [], []
        episodes = failures = 0
        for rep in sorted(reps):
            recs = reps[rep]
            ok = [r for r in recs if not r.failed]
            episodes += len(recs)
            failures += len(recs) - len(ok)
            if not ok:
                continue
            accs.append(100.0 * sum(r.correct for r in ok) / len(ok))
            toks.append(math.fsum(r.total_tokens for r in ok) / len(ok))
            overheads.append(math.fsum(r.probe_overhead_tokens for r in ok) / len(ok))
        n = len(accs)
        out.append(
            MethodSummary(
                method_name=method,
                dataset=dataset,
                accuracy=math.fsum(accs) / n if n else 0.0,
                mean_tokens=math.fsum(toks) / n if n else 0.0,
                mean_probe_overhead=math.fsum(overheads) / n if n else 0.0,
                episodes=episodes,
                failures=failures,
            )
        )
    return out


def anchors_from_records(records: Iterable[RunRecord]) -> dict[str, str]:
    out: dict[str, str] = {}
    for rec in records:
        if rec.mode == Mode.VANILLA.value:
            out.setdefault("vanilla", rec.method)
        elif rec.mode == Mode.NOWAIT.value:
            out.setdefault("nowait", rec.method)
    return out


def build_report_from_records(
    records: Sequence[RunRecord],
    anchors: Mapping[str, str] | None = None,
    generated_at: str | None = None,
) -> MetricReport:
    if not records:
        raise ValueError("no run records to summarize")
    summaries = summarize_records(records)
    summaries.sort(key=lambda s: (s.dataset, s.method_name))
    report = build_report(summaries, anchors or anchors_from_records(records), generated_at)
    failed = sum(s.failures for s in summaries)
    if failed:
        report.warnings.append(f"{failed} failed episode(s) excluded from Acc/Tok")
    return report


@dataclass
class ExperimentOutcome:
    report: MetricReport
    executed: int
    skipped: int
    failed: int


def run_experiment(
    plan: ExperimentPlan,
    model: TokenModel,
    store: RunStore,
    *,
    limit: int | None = None,
    clock: Callable[[], float] = time.perf_counter,
    generated_at: str | None = None,
) -> ExperimentOutcome:
    """Run every pending cell of ``plan`` and report on everything in the store.

    ``limit`` caps how many pending cells run in this call, which is how a
    partial run is simulated.
    """
    plan.validate()
    store.write_plan(plan)
    pending = []
    for method, dataset, rep, problem in plan.cells():
        fp = config_fingerprint(method.config_for(dataset.name), plan.sampling)
        if not store.is_done((method.name, dataset.name, rep, problem.id), fp):
            pending.append((method, dataset, rep, problem))
    skipped = len(plan.cells()) - len(pending)
    if limit is not None:
        pending = pending[:limit]

    failed = 0

    def work(cell):
        rec = _execute_cell(plan, model, *cell, clock=clock)
        store.append(rec)
        return rec

    if pending:
        with ThreadPoolExecutor(max_workers=plan.concurrency) as pool:
            for rec in pool.map(work, pending):
                failed += rec.failed
    report = build_report_from_records(store.records, plan.anchors(), generated_at)
    store.write_report(report)
    return ExperimentOutcome(report, executed=len(pending), skipped=skipped, failed=failed)


@dataclass
class PrefixCurve:
    means: list[float]
    counts: list[int]


@dataclass
class AnalysisBundle:
    correct: GroupStats | None
    incorrect: GroupStats | None
    curves: dict[str, PrefixCurve]
    skipped: int
    bin_edges: tuple[float, ...]


def average_prefix_curves(series: Iterable[Sequence[float]]) -> PrefixCurve:
    """Position-aligned average of per-episode prefix-mean curves.

    Position ``i`` averages only episodes with more than ``i`` tokens.
    """
    columns: list[list[float]] = []
    for values in series:
        for i, v in enumerate(prefix_mean_curve(values)):
            if i == len(columns):
                columns.append([])
            columns[i].append(v)
    return PrefixCurve([math.fsum(c) / len(c) for c in columns], [len(c) for c in columns])


def entropy_analysis(records: Iterable[RunRecord], bins: int = 20) -> AnalysisBundle:
    usable, skipped = [], 0
    for rec in records:
        if rec.failed or not rec.response_entropy:
            skipped += 1
        else:
            usable.append(rec)
    correct, incorrect = grouped_entropy_stats(usable, bins=bins)
    curves = {}
    for label, flag in (("correct", True), ("incorrect", False)):
        group = [r.response_entropy for r in usable if r.correct == flag]
        if group:
            curves[label] = average_prefix_curves(group)
    edges = (correct or incorrect).bin_edges if (correct or incorrect) else ()
    return AnalysisBundle(correct, incorrect, curves, skipped, edges)
