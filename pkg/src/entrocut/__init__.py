"""Entropy-guided early termination of reasoning traces, plus an evaluation harness."""
from __future__ import annotations

from pathlib import Path

from .entropy import (
    IGNORE_TAIL,
    EntropySeries,
    InvalidDistributionError,
    ProbeResult,
    TailPolicy,
    TokenDistribution,
    grouped_entropy_stats,
    prefix_mean_curve,
    probe_mean_entropy,
    token_entropy,
)
from .harness import ExperimentPlan, MethodSpec, Problem, RunRecord, RunStore, entropy_analysis, run_experiment
from .metrics import INF_LABEL, EprInputs, MethodSummary, MetricReport, Undefined, epr, pareto_frontier
from .models import GREEDY, ModelError, OffTraceError, SamplingConfig, ScriptedModel, TokenModel
from .policy import ControllerConfig, EpisodeState, Mode, TerminationCause, run_episode

DEMO_DIR = Path(__file__).parent / "data" / "demo"

__version__ = "0.1.0"
