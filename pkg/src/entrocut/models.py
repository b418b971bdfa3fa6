"""Next-token model interface, sampling, and the deterministic scripted model.

Contexts are sequences of integer token ids. Every model can map ids back to
surface text, and trigger matching and rule lookup both work on that text, so
the same controller drives id-level fixtures and text-chunk remote servers.
"""
from __future__ import annotations

import json
import math
import random
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .entropy import InvalidDistributionError, TokenDistribution

TokenStep = tuple[int, TokenDistribution]


class ModelError(Exception):
    """Base for failures that end one episode but not the experiment."""

    retryable = False


class TransportError(ModelError):
    retryable = True


class ContextOverflowError(ModelError):
    pass


class OffTraceError(ModelError):
    """A replayed model was asked something its trace never recorded."""


class TraceWriteError(ModelError):
    pass


class DegenerateMaskError(ModelError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.6
    top_p: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature < 0 or not math.isfinite(self.temperature):
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")

    def to_dict(self) -> dict:
        return asdict(self)


GREEDY = SamplingConfig(temperature=0.0, top_p=1.0)

_TRAILING_PUNCT = ",.;:!?"


def word_of(text: str) -> str:
    """Surface word of a token: surrounding whitespace and trailing punctuation removed."""
    return text.strip().rstrip(_TRAILING_PUNCT)


def matches_word(text: str, words: Iterable[str]) -> bool:
    w = word_of(text)
    return bool(w) and w in words


def sample_token(
    dist: TokenDistribution,
    sampling: SamplingConfig,
    rng: random.Random | None,
    blocked: Iterable[int] = (),
) -> int:
    """Pick the next token from ``dist`` after removing ``blocked`` ids.

    Temperature 0 (or no generator) means greedy. Top-p keeps the smallest
    high-probability prefix reaching ``top_p`` of the represented mass.
    """
    blocked = set(blocked)
    entries = [(t, p) for t, p in dist.entries if p > 0.0 and t not in blocked]
    if not entries:
        raise DegenerateMaskError("every token with positive probability is masked")
    if sampling.temperature == 0.0 or rng is None:
        return TokenDistribution(tuple(entries), min(1.0, math.fsum(p for _, p in entries))).argmax()
    if sampling.top_p < 1.0:
        entries.sort(key=lambda e: -e[1])
        target = sampling.top_p * math.fsum(p for _, p in entries)
        kept, acc = [], 0.0
        for t, p in entries:
            kept.append((t, p))
            acc += p
            if acc >= target:
                break
        entries = kept
    total = math.fsum(p for _, p in entries)
    u = rng.random() * total
    acc = 0.0
    for t, p in entries:
        acc += p
        if u < acc:
            return t
    return entries[-1][0]


@dataclass(frozen=True)
class Capabilities:
    full_distribution: bool = True
    top_n: int | None = None


class TokenModel(ABC):
    """What the controller needs from a language model."""

    name: str = "model"
    capabilities: Capabilities = Capabilities()
    vocab_size: int | None = None
    eos_id: int = 0

    @abstractmethod
    def step(
        self,
        context: Sequence[int],
        sampling: SamplingConfig,
        rng: random.Random | None,
        blocked_words: frozenset[str] = frozenset(),
    ) -> TokenStep:
        """Distribution for the next token and the token actually chosen."""

    @abstractmethod
    def branch(
        self,
        context: Sequence[int],
        suffix: Sequence[int],
        k: int,
        sampling: SamplingConfig = GREEDY,
        rng: random.Random | None = None,
    ) -> list[TokenStep]:
        """Up to ``k`` tokens continuing ``context + suffix``, without touching ``context``."""

    @abstractmethod
    def decode(self, ids: Sequence[int]) -> str: ...

    @abstractmethod
    def encode(self, text: str) -> list[int]: ...

    def token_text(self, token_id: int) -> str:
        return self.decode([token_id])

    def start_episode(self, query: Sequence[int], seed: int | None = None) -> None:
        """Hook called once before an episode's first step. No-op by default."""


@dataclass(frozen=True)
class Rule:
    """``pattern`` is a literal text suffix or a regex searched against the whole context."""

    pattern: str | re.Pattern
    dist: TokenDistribution

    def matches(self, text: str) -> bool:
        if isinstance(self.pattern, str):
            return text.endswith(self.pattern)
        return self.pattern.search(text) is not None


class ScriptedModel(TokenModel):
    """Rule table mapping context suffixes to fixed distributions.

    Rules are checked in order and the first match wins. Distributions are
    taken to be at deployment temperature already, so sampling uses them as
    given (temperature 0 still means greedy). Text not covered by the
    vocabulary is encoded one character per id above ``len(vocab)``.
    """

    def __init__(
        self,
        vocab: Sequence[str],
        rules: Sequence[tuple[str | re.Pattern, Mapping[str, float]]],
        default: Mapping[str, float],
        *,
        eos: str = "<eos>",
        stop_after: int | None = None,
        max_context: int | None = None,
        name: str = "scripted",
    ) -> None:
        self.vocab = tuple(vocab)
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocabulary entries must be unique")
        if any(v == "" for v in self.vocab):
            raise ValueError("empty vocabulary entry")
        self._ids = {text: i for i, text in enumerate(self.vocab)}
        if eos not in self._ids:
            raise ValueError(f"eos token {eos!r} missing from vocabulary")
        self.eos_id = self._ids[eos]
        self.name = name
        self.vocab_size = len(self.vocab)
        self.capabilities = Capabilities(full_distribution=True)
        self.stop_after = stop_after
        self.max_context = max_context
        self._max_len = max(len(v) for v in self.vocab)
        self._raw_rules = [(p, dict(d)) for p, d in rules]
        self._raw_default = dict(default)
        self.rules = tuple(Rule(p, self._dist(d)) for p, d in rules)
        self.default = self._dist(default)

    def _dist(self, probs: Mapping[str, float]) -> TokenDistribution:
        entries = []
        for text, p in probs.items():
            if text not in self._ids:
                raise ValueError(f"token {text!r} not in vocabulary")
            entries.append((self._ids[text], float(p)))
        dist = TokenDistribution.from_probs(entries)
        if abs(dist.coverage - 1.0) > 1e-9:
            raise InvalidDistributionError(f"scripted distribution sums to {dist.coverage}, expected 1")
        return TokenDistribution(dist.entries, 1.0)

    def lookup(self, context: Sequence[int]) -> TokenDistribution:
        if self.max_context is not None and len(context) > self.max_context:
            raise ContextOverflowError(f"context of {len(context)} tokens exceeds {self.max_context}")
        if self.stop_after is not None and len(context) >= self.stop_after:
            return TokenDistribution.one_hot(self.eos_id)
        text = self.decode(context)
        for rule in self.rules:
            if rule.matches(text):
                return rule.dist
        return self.default

    def step(self, context, sampling, rng, blocked_words=frozenset()):
        dist = self.lookup(context)
        blocked = self._blocked_ids(dist, blocked_words)
        return sample_token(dist, sampling, rng, blocked), dist

    def branch(self, context, suffix, k, sampling=GREEDY, rng=None):
        ctx = list(context) + list(suffix)
        out: list[TokenStep] = []
        for _ in range(k):
            dist = self.lookup(ctx)
            tok = sample_token(dist, sampling, rng)
            out.append((tok, dist))
            if tok == self.eos_id:
                break
            ctx.append(tok)
        return out

    def _blocked_ids(self, dist: TokenDistribution, words: frozenset[str]) -> list[int]:
        if not words:
            return []
        return [t for t, _ in dist.entries if matches_word(self.token_text(t), words)]

    def decode(self, ids):
        n = len(self.vocab)
        return "".join(self.vocab[i] if i < n else chr(i - n) for i in ids)

    def encode(self, text):
        ids: list[int] = []
        i = 0
        n = len(self.vocab)
        while i < len(text):
            for length in range(min(self._max_len, len(text) - i), 0, -1):
                tok = self._ids.get(text[i : i + length])
                if tok is not None:
                    ids.append(tok)
                    i += length
                    break
            else:
                ids.append(n + ord(text[i]))
                i += 1
        return ids

    def to_dict(self) -> dict[str, Any]:
        def pat(p):
            return {"regex": p.pattern} if isinstance(p, re.Pattern) else {"suffix": p}

        return {
            "name": self.name,
            "vocab": list(self.vocab),
            "eos": self.vocab[self.eos_id],
            "rules": [{**pat(p), "dist": d} for p, d in self._raw_rules],
            "default": self._raw_default,
            "stop_after": self.stop_after,
            "max_context": self.max_context,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScriptedModel":
        rules = []
        for r in d["rules"]:
            if "regex" in r:
                rules.append((re.compile(r["regex"], re.S), r["dist"]))
            else:
                rules.append((r["suffix"], r["dist"]))
        return cls(
            d["vocab"],
            rules,
            d["default"],
            eos=d.get("eos", "<eos>"),
            stop_after=d.get("stop_after"),
            max_context=d.get("max_context"),
            name=d.get("name", "scripted"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, ensure_ascii=False))
