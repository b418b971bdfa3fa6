"""Two-phase decoding controller with entropy-probe early termination.

An episode runs a think phase until the model closes it, a probe says the
model is already confident, or a budget runs out; then a response phase runs
until end-of-sequence. The baselines (vanilla, no-wait) and the ablations
(hard budget, fixed length) are modes of the same loop.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping, Sequence

from .entropy import (
    IGNORE_TAIL,
    EntropySeries,
    ProbeResult,
    TailPolicy,
    TokenDistribution,
    probe_mean_entropy,
    token_entropy,
)
from .models import GREEDY, SamplingConfig, TokenModel, matches_word


class Mode(str, Enum):
    ENTROCUT = "entrocut"
    VANILLA = "vanilla"
    NOWAIT = "nowait"
    HARD_BUDGET = "hard_budget"
    FIXED_LENGTH = "fixed_length"


class Phase(str, Enum):
    THINK = "think"
    RESPOND = "respond"
    DONE = "done"


class TerminationCause(str, Enum):
    NATURAL_STOP = "natural_stop"
    PROBE_TERMINATED = "probe_terminated"
    BUDGET_EXHAUSTED = "budget_exhausted"
    FIXED_LENGTH_REACHED = "fixed_length_reached"


class Outcome(str, Enum):
    TERMINATE = "terminate"
    CONTINUE = "continue"


PROBING_MODES = frozenset({Mode.ENTROCUT, Mode.HARD_BUDGET})
_PHASE_ORDER = {Phase.THINK: 0, Phase.RESPOND: 1, Phase.DONE: 2}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerConfig:
    mode: Mode = Mode.ENTROCUT
    tau: float = 0.15
    probe_k: int = 5
    probe_text: str = "</think>\n\nSo the final answer is"
    trigger_tokens: frozenset[str] = frozenset({"Wait", "But", "Alternatively"})
    min_think_tokens: int = 128
    max_think_tokens: int = 32768
    fixed_length_budget: int | None = None
    probe_cooldown_tokens: int = 64
    think_end_text: str = "</think>"
    transition_text: str = "</think>\n\n"
    max_response_tokens: int = 8192
    hard_response_cap: int = 32
    probe_sampling: str = "greedy"
    tail_policy: TailPolicy = IGNORE_TAIL
    entropy_unit: str = "nats"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "trigger_tokens", frozenset(self.trigger_tokens))
        if isinstance(self.tail_policy, str):
            object.__setattr__(self, "tail_policy", TailPolicy.parse(self.tail_policy))

    def validate(self) -> "ControllerConfig":
        problems = []
        if self.min_think_tokens < 0:
            problems.append("min_think_tokens must be >= 0")
        if self.max_think_tokens < 1:
            problems.append("max_think_tokens must be positive")
        if self.min_think_tokens >= self.max_think_tokens:
            problems.append("min_think_tokens must be < max_think_tokens")
        if self.probe_k < 1:
            problems.append("probe_k must be >= 1")
        if math.isnan(self.tau):
            problems.append("tau must not be NaN")
        if self.probe_cooldown_tokens < 0:
            problems.append("probe_cooldown_tokens must be >= 0")
        if self.max_response_tokens < 0 or self.hard_response_cap < 0:
            problems.append("response caps must be >= 0")
        if self.probe_sampling not in ("greedy", "sampled"):
            problems.append(f"probe_sampling must be 'greedy' or 'sampled', got {self.probe_sampling!r}")
        if self.mode is Mode.FIXED_LENGTH:
            if self.fixed_length_budget is None or self.fixed_length_budget < 1:
                problems.append("fixed_length mode needs a positive fixed_length_budget")
            elif self.fixed_length_budget > self.max_think_tokens:
                problems.append("fixed_length_budget must be <= max_think_tokens")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["trigger_tokens"] = sorted(self.trigger_tokens)
        d["tail_policy"] = str(self.tail_policy)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ControllerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown controller fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "tau" in kwargs:
            kwargs["tau"] = float(kwargs["tau"])
        return cls(**kwargs)

    def with_(self, **changes: Any) -> "ControllerConfig":
        return replace(self, **changes)


def config_fingerprint(config: ControllerConfig, sampling: SamplingConfig) -> str:
    payload = json.dumps(
        {"controller": config.to_dict(), "sampling": sampling.to_dict()},
        sort_keys=True,
        allow_nan=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ProbeDecision:
    outcome: Outcome
    probe_result: ProbeResult | None


@dataclass
class EpisodeState:
    query_tokens: tuple[int, ...]
    rng_seed: int
    phase: Phase = Phase.THINK
    think_tokens: list[int] = field(default_factory=list)
    transition_tokens: list[int] = field(default_factory=list)
    response_tokens: list[int] = field(default_factory=list)
    response_entropy: list[float] = field(default_factory=list)
    probe_history: list[ProbeResult] = field(default_factory=list)
    probe_outcomes: list[Outcome] = field(default_factory=list)
    termination_cause: TerminationCause | None = None
    probe_overhead_tokens: int = 0
    anomalies: list[str] = field(default_factory=list)
    probe_wall_ms: list[float] = field(default_factory=list)

    def advance(self, phase: Phase) -> None:
        if _PHASE_ORDER[phase] <= _PHASE_ORDER[self.phase]:
            raise RuntimeError(f"illegal phase transition {self.phase.value} -> {phase.value}")
        self.phase = phase

    @property
    def think_context(self) -> tuple[int, ...]:
        return self.query_tokens + tuple(self.think_tokens)

    def to_dict(self) -> dict[str, Any]:
        """Serialization used for determinism checks; wall-clock fields omitted."""
        return {
            "phase": self.phase.value,
            "query_tokens": list(self.query_tokens),
            "rng_seed": self.rng_seed,
            "think_tokens": list(self.think_tokens),
            "transition_tokens": list(self.transition_tokens),
            "response_tokens": list(self.response_tokens),
            "response_entropy": list(self.response_entropy),
            "probe_history": [p.to_dict() for p in self.probe_history],
            "probe_outcomes": [o.value for o in self.probe_outcomes],
            "termination_cause": self.termination_cause.value if self.termination_cause else None,
            "probe_overhead_tokens": self.probe_overhead_tokens,
            "anomalies": list(self.anomalies),
        }


def detect_trigger(
    token_text: str,
    think_count: int,
    config: ControllerConfig,
    last_probe_at: int | None = None,
) -> bool:
    """Should the newest think token fire a probe?

    ``think_count`` is the number of think tokens preceding the newest one,
    i.e. its position.
    """
    if not matches_word(token_text, config.trigger_tokens):
        return False
    if think_count < config.min_think_tokens:
        return False
    if last_probe_at is not None and think_count - last_probe_at < config.probe_cooldown_tokens:
        return False
    return True


def execute_probe(
    model: TokenModel,
    state: EpisodeState,
    config: ControllerConfig,
    sampling: SamplingConfig = GREEDY,
) -> ProbeDecision:
    """Branch off ``probe_text`` and decide whether thinking can stop here.

    The branch never touches ``state``; the caller appends the probe record.
    """
    context = state.think_context
    suffix = model.encode(config.probe_text)
    if config.probe_sampling == "greedy":
        pairs = model.branch(context, suffix, config.probe_k)
    else:
        rng = random.Random(_derive_seed(state.rng_seed, "probe", len(state.think_tokens)))
        pairs = model.branch(context, suffix, config.probe_k, sampling, rng)
    if not pairs:
        return ProbeDecision(Outcome.CONTINUE, None)
    values = [token_entropy(dist, config.tail_policy) for _, dist in pairs]
    series = EntropySeries.from_values(values)
    result = ProbeResult(
        mean_entropy=probe_mean_entropy(series),
        probe_token_count=len(pairs),
        per_token=series,
        trigger_position=len(state.think_tokens),
    )
    outcome = Outcome.TERMINATE if result.mean_entropy <= config.tau else Outcome.CONTINUE
    return ProbeDecision(outcome, result)


@dataclass(frozen=True)
class StepContext:
    phase: Phase
    think_count: int = 0
    cause: TerminationCause | None = None


@dataclass(frozen=True)
class StepDirective:
    """What a mode imposes on the next step.

    ``blocked_words`` get zero probability before sampling. ``force_stop``
    ends the think phase before the step. ``response_prefix`` is the text
    forced in at the phase transition and ``response_cap`` bounds the
    response phase.
    """

    blocked_words: frozenset[str] = frozenset()
    allow_probes: bool = False
    force_stop: bool = False
    response_prefix: str = ""
    response_cap: int | None = None

    def mask(self, dist: TokenDistribution, token_text: Callable[[int], str]) -> TokenDistribution:
        """Zero out blocked tokens and renormalize what remains."""
        if not self.blocked_words:
            return dist
        blocked = [t for t, _ in dist.entries if matches_word(token_text(t), self.blocked_words)]
        return dist.without(blocked)


def apply_mode_constraints(mode: Mode, step_context: StepContext, config: ControllerConfig) -> StepDirective:
    mode = Mode(mode)
    if step_context.phase is Phase.THINK:
        if mode is Mode.NOWAIT:
            return StepDirective(blocked_words=config.trigger_tokens)
        if mode is Mode.FIXED_LENGTH:
            return StepDirective(force_stop=step_context.think_count >= (config.fixed_length_budget or 0))
        return StepDirective(allow_probes=mode in PROBING_MODES)

    cause = step_context.cause
    if cause is None or cause is TerminationCause.NATURAL_STOP:
        return StepDirective(response_cap=config.max_response_tokens)
    if mode is Mode.HARD_BUDGET:
        return StepDirective(response_prefix=config.probe_text, response_cap=config.hard_response_cap)
    return StepDirective(response_prefix=config.transition_text, response_cap=config.max_response_tokens)


def _derive_seed(*parts: Any) -> int:
    digest = hashlib.blake2b(json.dumps(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def run_episode(
    model: TokenModel,
    query: Sequence[int],
    config: ControllerConfig,
    sampling: SamplingConfig,
    seed: int = 0,
    clock: Callable[[], float] = time.perf_counter,
) -> EpisodeState:
    """Decode one problem end to end under ``config``."""
    config.validate()
    if not query:
        raise ValueError("query must be non-empty")

    rng = random.Random(seed)
    state = EpisodeState(query_tokens=tuple(query), rng_seed=seed)
    model.start_episode(state.query_tokens, seed)
    last_probe_at: int | None = None

    while state.termination_cause is None:
        n = len(state.think_tokens)
        directive = apply_mode_constraints(config.mode, StepContext(Phase.THINK, n), config)
        if directive.force_stop:
            state.termination_cause = TerminationCause.FIXED_LENGTH_REACHED
            break
        if n >= config.max_think_tokens:
            state.termination_cause = TerminationCause.BUDGET_EXHAUSTED
            break

        tok, _ = model.step(state.think_context, sampling, rng, directive.blocked_words)
        if tok == model.eos_id:
            # model ended the whole sequence without closing the think block
            state.termination_cause = TerminationCause.NATURAL_STOP
            state.anomalies.append(f"eos during think at {n}")
            state.advance(Phase.RESPOND)
            state.advance(Phase.DONE)
            return state
        text = model.token_text(tok)
        if config.think_end_text in text:
            state.think_tokens.append(tok)
            state.termination_cause = TerminationCause.NATURAL_STOP
            break

        if directive.allow_probes and detect_trigger(text, n, config, last_probe_at):
            started = clock()
            decision = execute_probe(model, state, config, sampling)
            state.probe_wall_ms.append((clock() - started) * 1000.0)
            last_probe_at = n
            if decision.probe_result is None:
                state.anomalies.append(f"empty probe at {n}")
            else:
                state.probe_history.append(decision.probe_result)
                state.probe_outcomes.append(decision.outcome)
                state.probe_overhead_tokens += decision.probe_result.probe_token_count
            if decision.outcome is Outcome.TERMINATE:
                # the reflective token is dropped: thinking stops just before it
                state.termination_cause = TerminationCause.PROBE_TERMINATED
                break
        state.think_tokens.append(tok)

    state.advance(Phase.RESPOND)
    directive = apply_mode_constraints(
        config.mode, StepContext(Phase.RESPOND, len(state.think_tokens), state.termination_cause), config
    )
    if directive.response_prefix:
        state.transition_tokens = model.encode(directive.response_prefix)
    cap = config.max_response_tokens if directive.response_cap is None else directive.response_cap
    prefix = state.think_context + tuple(state.transition_tokens)
    while len(state.response_tokens) < cap:
        tok, dist = model.step(prefix + tuple(state.response_tokens), sampling, rng)
        if tok == model.eos_id:
            break
        state.response_tokens.append(tok)
        state.response_entropy.append(token_entropy(dist, config.tail_policy))
    state.advance(Phase.DONE)
    return state
