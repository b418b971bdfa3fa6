"""Layered configuration: defaults < config/plan file < environment < flags.

The file is TOML. Environment overrides look like
``ENTROCUT__SAMPLING__TEMPERATURE=0.7``; values are parsed as TOML scalars
when possible and taken as plain strings otherwise.
"""
from __future__ import annotations

import copy
import json
import math
import sys
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .answers import ExtractionPolicy
from .fixtures import DEFAULT_TEMPLATE
from .harness import DatasetSpec, ExperimentPlan, MethodSpec, ingest_dataset
from .models import SamplingConfig
from .policy import ConfigError, ControllerConfig

ENV_PREFIX = "ENTROCUT__"


def _controller_defaults() -> dict[str, Any]:
    d = ControllerConfig().to_dict()
    d.pop("mode")
    d.pop("fixed_length_budget")
    return d


def defaults() -> dict[str, dict[str, Any]]:
    return {
        "model": {
            "target": "scripted:demo",
            "name": "default",
            "top_logprobs": 20,
            "timeout": 60.0,
            "max_retries": 3,
            "api_key_env": "ENTROCUT_API_KEY",
        },
        "sampling": {"temperature": 0.6, "top_p": 1.0},
        "controller": _controller_defaults(),
        "plan": {
            "base_seed": 0,
            "concurrency": 4,
            "template": DEFAULT_TEMPLATE,
            "extraction": ["boxed", "after_marker:final answer is"],
            "failure_threshold": 10.0,
        },
        "output": {"dir": "runs/latest"},
    }


# keys that are free-form rather than part of the layered sections
LIST_SECTIONS = ("datasets", "methods")
# controller fields that only make sense per method
METHOD_ONLY = ("mode", "fixed_length_budget")


def parse_scalar(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set(tree: dict[str, dict[str, Any]], section: str, key: str, value: Any, source: str) -> None:
    if section not in tree:
        raise ConfigError(f"{source}: unknown config section {section!r}")
    if key not in tree[section] and not (section == "controller" and key in METHOD_ONLY):
        raise ConfigError(f"{source}: unknown key {section}.{key}")
    tree[section][key] = value


def env_overrides(environ: Mapping[str, str]) -> list[tuple[str, str, Any]]:
    out = []
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment variable {name}: expected {ENV_PREFIX}SECTION__KEY")
        out.append((parts[0], parts[1], parse_scalar(raw)))
    return out


def parse_assignment(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` as given to ``--set``."""
    lhs, sep, rhs = text.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    return section, key, parse_scalar(rhs.strip())


def load_file(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def resolve(
    file_data: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    flags: list[tuple[str, str, Any]] | None = None,
) -> dict[str, Any]:
    """Merge every layer into one tree; list sections pass through from the file."""
    tree: dict[str, Any] = defaults()
    for section, body in (file_data or {}).items():
        if section in LIST_SECTIONS:
            tree[section] = copy.deepcopy(body)
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"config file: top-level key {section!r} must be a table")
        for key, value in body.items():
            _set(tree, section, key, value, "config file")
    for section, key, value in env_overrides(environ or {}):
        _set(tree, section, key, value, "environment")
    for section, key, value in flags or []:
        _set(tree, section, key, value, "flag")
    return tree


def sampling_from(tree: Mapping[str, Any]) -> SamplingConfig:
    s = tree["sampling"]
    try:
        return SamplingConfig(float(s["temperature"]), float(s["top_p"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampling: {exc}") from None


def build_plan(tree: Mapping[str, Any], base_dir: str | Path = ".") -> ExperimentPlan:
    base_dir = Path(base_dir)
    datasets = []
    for d in tree.get("datasets") or []:
        if "path" not in d:
            raise ConfigError(f"dataset entry {d!r} needs a path")
        path = base_dir / d["path"]
        name = d.get("name") or path.stem
        problems = ingest_dataset(path, d.get("format"), name)
        datasets.append(DatasetSpec(name, problems, d.get("repetitions"), str(d["path"])))
    shared = dict(tree["controller"])
    methods = [MethodSpec.from_dict(m, shared) for m in tree.get("methods") or []]
    p = tree["plan"]
    try:
        extraction = tuple(ExtractionPolicy.parse(e) for e in p["extraction"])
    except ValueError as exc:
        raise ConfigError(f"plan.extraction: {exc}") from None
    return ExperimentPlan(
        datasets=datasets,
        methods=methods,
        sampling=sampling_from(tree),
        base_seed=int(p["base_seed"]),
        concurrency=int(p["concurrency"]),
        template=str(p["template"]),
        extraction=extraction,
    ).validate()


def dumps(tree: Mapping[str, Any]) -> str:
    """Printable form of a resolved tree (infinite floats spelled out)."""

    def clean(v: Any) -> Any:
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v

    return json.dumps(clean(dict(tree)), indent=2, sort_keys=True, ensure_ascii=False)
