"""Accuracy/token summaries, the EPR metric family, and Pareto frontiers.

EPR compares a target method against two anchors on the same dataset and
model: vanilla decoding (most accurate, most tokens) and no-wait decoding
(fewest tokens). Degenerate cases come back as explicit sentinels instead of
being clamped.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence


@dataclass(frozen=True)
class Undefined:
    """A ratio that has no meaningful value; ``reason`` says why."""

    reason: str

    def __str__(self) -> str:
        return "undefined"


INF_LABEL = "∞ (no accuracy loss)"


@dataclass(frozen=True)
class MethodSummary:
    method_name: str
    accuracy: float
    mean_tokens: float
    mean_probe_overhead: float = 0.0
    episodes: int = 0
    failures: int = 0
    dataset: str = ""

    def __post_init__(self) -> None:
        if not (0.0 <= self.accuracy <= 100.0):
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")
        if self.mean_tokens < 0 or self.mean_probe_overhead < 0:
            raise ValueError("token means must be non-negative")
        if self.failures > self.episodes:
            raise ValueError("more failures than episodes")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EprInputs:
    vanilla: MethodSummary
    nowait: MethodSummary
    target: MethodSummary


def token_saving_ratio(inputs: EprInputs) -> float | Undefined:
    denom = inputs.vanilla.mean_tokens - inputs.nowait.mean_tokens
    if denom == 0:
        return Undefined("vanilla and no-wait anchors use the same number of tokens")
    return (inputs.vanilla.mean_tokens - inputs.target.mean_tokens) / denom


def accuracy_loss_ratio(inputs: EprInputs) -> float | Undefined:
    denom = inputs.vanilla.accuracy - inputs.nowait.accuracy
    if denom == 0:
        return Undefined("vanilla and no-wait anchors have the same accuracy")
    return (inputs.vanilla.accuracy - inputs.target.accuracy) / denom


def epr(inputs: EprInputs) -> float | Undefined:
    """Token saving ratio over accuracy loss ratio.

    ``math.inf`` when the target saves tokens without losing accuracy.
    """
    tsr = token_saving_ratio(inputs)
    alr = accuracy_loss_ratio(inputs)
    if isinstance(tsr, Undefined):
        return tsr
    if isinstance(alr, Undefined):
        return alr
    if alr <= 0 and tsr > 0:
        return math.inf
    if alr == 0:
        return Undefined("no accuracy loss and no token saving")
    return tsr / alr


def format_ratio(value: float | Undefined, digits: int = 1) -> str:
    if isinstance(value, Undefined):
        return "undefined"
    if value == math.inf:
        return INF_LABEL
    return f"{value:.{digits}f}"


def ratio_to_json(value: float | Undefined) -> Any:
    if isinstance(value, Undefined):
        return {"undefined": value.reason}
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def ratio_from_json(value: Any) -> float | Undefined:
    if isinstance(value, dict):
        return Undefined(value["undefined"])
    if value in ("inf", "-inf"):
        return float(value)
    return float(value)


def mean_ratio(values: Sequence[float | Undefined]) -> float | Undefined:
    """Arithmetic mean used for the cross-dataset average EPR."""
    if not values:
        return Undefined("no datasets")
    for v in values:
        if isinstance(v, Undefined):
            return Undefined(f"a dataset EPR is undefined: {v.reason}")
    return math.fsum(values) / len(values) if not any(math.isinf(v) for v in values) else math.inf


def aggregate(per_repetition: Sequence[MethodSummary]) -> MethodSummary:
    """Average repetitions of one method on one dataset."""
    if not per_repetition:
        raise ValueError("nothing to aggregate")
    first = per_repetition[0]
    for s in per_repetition[1:]:
        if (s.method_name, s.dataset) != (first.method_name, first.dataset):
            raise ValueError(
                f"cannot aggregate {s.method_name}/{s.dataset} with {first.method_name}/{first.dataset}"
            )
    n = len(per_repetition)
    return MethodSummary(
        method_name=first.method_name,
        dataset=first.dataset,
        accuracy=math.fsum(s.accuracy for s in per_repetition) / n,
        mean_tokens=math.fsum(s.mean_tokens for s in per_repetition) / n,
        mean_probe_overhead=math.fsum(s.mean_probe_overhead for s in per_repetition) / n,
        episodes=sum(s.episodes for s in per_repetition),
        failures=sum(s.failures for s in per_repetition),
    )


def pareto_flags(points: Sequence[tuple[float, float, Any]]) -> list[bool]:
    """Per input point: is it non-dominated? (fewer tokens and higher accuracy are better)"""
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1]))
    flags = [False] * len(points)
    best_before = -math.inf
    i = 0
    while i < len(order):
        tokens = points[order[i]][0]
        j = i
        while j < len(order) and points[order[j]][0] == tokens:
            j += 1
        group = order[i:j]
        top = points[group[0]][1]
        if top > best_before:
            for idx in group:
                if points[idx][1] == top:
                    flags[idx] = True
            best_before = top
        i = j
    return flags


def pareto_frontier(points: Sequence[tuple[float, float, Any]]) -> list[Any]:
    """Labels of all non-dominated (tokens, accuracy, label) points, by tokens ascending.

    Exact duplicates of a frontier point are all kept.
    """
    for tokens, acc, _ in points:
        if math.isnan(tokens) or math.isnan(acc):
            raise ValueError("NaN coordinate in Pareto input")
    flags = pareto_flags(points)
    kept = [i for i, f in enumerate(flags) if f]
    kept.sort(key=lambda i: (points[i][0], i))
    return [points[i][2] for i in kept]


@dataclass
class EprRow:
    method_name: str
    dataset: str
    token_saving_ratio: float | Undefined
    accuracy_loss_ratio: float | Undefined
    epr: float | Undefined


@dataclass
class MetricReport:
    """Per-(dataset, method) summaries plus the EPR family where anchors exist."""

    summaries: list[MethodSummary]
    epr_rows: list[EprRow] = field(default_factory=list)
    avg_epr: dict[str, float | Undefined] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    generated_at: str | None = None

    def summary(self, method: str, dataset: str) -> MethodSummary:
        for s in self.summaries:
            if s.method_name == method and s.dataset == dataset:
                return s
        raise KeyError((method, dataset))

    def epr_for(self, method: str, dataset: str) -> EprRow | None:
        for row in self.epr_rows:
            if row.method_name == method and row.dataset == dataset:
                return row
        return None

    @property
    def datasets(self) -> list[str]:
        return list(dict.fromkeys(s.dataset for s in self.summaries))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(s.method_name for s in self.summaries))

    def to_dict(self) -> dict[str, Any]:
        return {
            "generated_at": self.generated_at,
            "summaries": [s.to_dict() for s in self.summaries],
            "epr": [
                {
                    "method_name": r.method_name,
                    "dataset": r.dataset,
                    "token_saving_ratio": ratio_to_json(r.token_saving_ratio),
                    "accuracy_loss_ratio": ratio_to_json(r.accuracy_loss_ratio),
                    "epr": ratio_to_json(r.epr),
                }
                for r in self.epr_rows
            ],
            "avg_epr": {m: ratio_to_json(v) for m, v in self.avg_epr.items()},
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricReport":
        return cls(
            summaries=[MethodSummary(**s) for s in d["summaries"]],
            epr_rows=[
                EprRow(
                    r["method_name"],
                    r["dataset"],
                    ratio_from_json(r["token_saving_ratio"]),
                    ratio_from_json(r["accuracy_loss_ratio"]),
                    ratio_from_json(r["epr"]),
                )
                for r in d.get("epr", [])
            ],
            avg_epr={m: ratio_from_json(v) for m, v in d.get("avg_epr", {}).items()},
            warnings=list(d.get("warnings", [])),
            generated_at=d.get("generated_at"),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["dataset", "method", "accuracy", "mean_tokens", "mean_probe_overhead", "episodes", "failures",
             "token_saving_ratio", "accuracy_loss_ratio", "epr"]
        )
        for s in self.summaries:
            row = self.epr_for(s.method_name, s.dataset)
            extra = (
                [ratio_to_json(row.token_saving_ratio), ratio_to_json(row.accuracy_loss_ratio), format_ratio(row.epr, 4)]
                if row
                else ["", "", ""]
            )
            extra = [json.dumps(x) if isinstance(x, dict) else x for x in extra]
            w.writerow([s.dataset, s.method_name, s.accuracy, s.mean_tokens, s.mean_probe_overhead,
                        s.episodes, s.failures, *extra])
        return buf.getvalue()

    def format_table(self) -> str:
        """Acc, Tok(probe overhead) and EPR per dataset, then the average EPR."""
        datasets = self.datasets
        header = ["Method"]
        for ds in datasets:
            header += [f"{ds} Acc", f"{ds} Tok", f"{ds} EPR"]
        header.append("Avg. EPR")
        rows = [header]
        for method in self.methods:
            row = [method]
            for ds in datasets:
                try:
                    s = self.summary(method, ds)
                except KeyError:
                    row += ["", "", ""]
                    continue
                tok = f"{s.mean_tokens:.0f}"
                if s.mean_probe_overhead:
                    tok += f"({s.mean_probe_overhead:.0f})"
                e = self.epr_for(method, ds)
                row += [f"{s.accuracy:.1f}", tok, format_ratio(e.epr) if e else "--"]
            avg = self.avg_epr.get(method)
            row.append(format_ratio(avg) if avg is not None else "--")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        out = "\n".join(lines)
        if self.warnings:
            out += "\n" + "\n".join(f"warning: {w}" for w in self.warnings)
        return out + "\n"


def build_report(
    summaries: Sequence[MethodSummary],
    anchors: Mapping[str, str] | None = None,
    generated_at: str | None = None,
) -> MetricReport:
    """Assemble a report, adding EPR for every non-anchor method.

    ``anchors`` maps ``"vanilla"`` and ``"nowait"`` to method names.
    """
    report = MetricReport(list(summaries), generated_at=generated_at)
    anchors = dict(anchors or {})
    vanilla, nowait = anchors.get("vanilla"), anchors.get("nowait")
    if vanilla is None or nowait is None:
        missing = [k for k in ("vanilla", "nowait") if anchors.get(k) is None]
        report.warnings.append(f"EPR omitted: missing anchor method(s) {', '.join(missing)}")
        return report
    per_method: dict[str, list[float | Undefined]] = {}
    for ds in report.datasets:
        try:
            v = report.summary(vanilla, ds)
            n = report.summary(nowait, ds)
        except KeyError:
            report.warnings.append(f"EPR omitted on {ds}: anchors not run on this dataset")
            continue
        for s in report.summaries:
            if s.dataset != ds or s.method_name in (vanilla, nowait):
                continue
            inputs = EprInputs(v, n, s)
            row = EprRow(s.method_name, ds, token_saving_ratio(inputs), accuracy_loss_ratio(inputs), epr(inputs))
            report.epr_rows.append(row)
            per_method.setdefault(s.method_name, []).append(row.epr)
    report.avg_epr = {m: mean_ratio(vals) for m, vals in per_method.items()}
    return report
