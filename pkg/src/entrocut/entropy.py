"""Token distributions and the entropy arithmetic built on them.

All entropies are in nats. Distributions may be truncated (top-N logprobs from
a served model), in which case ``coverage`` records how much probability mass
the entries actually represent and a :class:`TailPolicy` decides what to do
with the rest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

PROB_TOL = 1e-9


class InvalidDistributionError(ValueError):
    """A distribution violates one of its invariants."""


@dataclass(frozen=True)
class TokenDistribution:
    """Probability mass over (part of) a vocabulary at one decoding step."""

    entries: tuple[tuple[int, float], ...]
    coverage: float = 1.0

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for token_id, prob in self.entries:
            if not isinstance(token_id, (int, np.integer)) or token_id < 0:
                raise InvalidDistributionError(f"token id must be a non-negative integer, got {token_id!r}")
            if token_id in seen:
                raise InvalidDistributionError(f"duplicate token id {token_id}")
            seen.add(token_id)
            if not (prob >= 0.0) or math.isinf(prob):
                raise InvalidDistributionError(f"negative or non-finite probability {prob!r} for token {token_id}")
        if not (0.0 <= self.coverage <= 1.0):
            raise InvalidDistributionError(f"coverage {self.coverage!r} outside [0, 1]")
        total = self.total_mass
        if total > 1.0 + PROB_TOL:
            raise InvalidDistributionError(f"probabilities sum to {total!r} > 1")
        if abs(total - self.coverage) > PROB_TOL:
            raise InvalidDistributionError(
                f"probabilities sum to {total!r} but coverage is {self.coverage!r}"
            )

    @classmethod
    def from_probs(
        cls, probs: Mapping[int, float] | Iterable[tuple[int, float]], coverage: float | None = None
    ) -> "TokenDistribution":
        items = probs.items() if isinstance(probs, Mapping) else probs
        entries = tuple((int(t), float(p)) for t, p in items)
        if coverage is None:
            coverage = min(1.0, math.fsum(p for _, p in entries))
        return cls(entries, coverage)

    @classmethod
    def one_hot(cls, token_id: int) -> "TokenDistribution":
        return cls(((token_id, 1.0),), 1.0)

    @property
    def total_mass(self) -> float:
        return math.fsum(p for _, p in self.entries)

    def prob(self, token_id: int) -> float:
        for t, p in self.entries:
            if t == token_id:
                return p
        return 0.0

    def argmax(self) -> int:
        """Most probable token; ties go to the earliest entry."""
        if not self.entries:
            raise InvalidDistributionError("argmax of an empty distribution")
        best_id, best_p = self.entries[0]
        for t, p in self.entries[1:]:
            if p > best_p:
                best_id, best_p = t, p
        return best_id

    def without(self, blocked: Iterable[int]) -> "TokenDistribution":
        """Drop ``blocked`` tokens and renormalize the rest.

        Each remaining probability is divided by ``1 - blocked_mass``, which is
        the correct conditional for both full and truncated distributions.
        """
        blocked = set(blocked)
        removed = math.fsum(p for t, p in self.entries if t in blocked)
        kept = [(t, p) for t, p in self.entries if t not in blocked]
        if removed == 0.0:
            return self
        denom = 1.0 - removed
        if denom <= 0.0 or not any(p > 0.0 for _, p in kept):
            raise InvalidDistributionError("mask removes every token with positive probability")
        entries = tuple((t, p / denom) for t, p in kept)
        return TokenDistribution.from_probs(entries)


@dataclass(frozen=True)
class TailPolicy:
    """How to treat mass a truncated distribution does not represent.

    ``ignore`` sums over represented entries only. ``uniform`` spreads the
    residual ``1 - coverage`` evenly over ``tail_size`` pseudo-entries.
    """

    kind: str = "ignore"
    tail_size: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("ignore", "uniform"):
            raise ValueError(f"unknown tail policy {self.kind!r}")
        if self.kind == "uniform" and self.tail_size < 1:
            raise ValueError("uniform tail policy needs tail_size >= 1")

    @classmethod
    def ignore(cls) -> "TailPolicy":
        return cls("ignore", 0)

    @classmethod
    def uniform(cls, tail_size: int) -> "TailPolicy":
        return cls("uniform", tail_size)

    @classmethod
    def parse(cls, text: str) -> "TailPolicy":
        """Parse ``"ignore"`` or ``"uniform:<n>"``."""
        if text == "ignore":
            return cls.ignore()
        kind, _, size = text.partition(":")
        if kind == "uniform" and size.isdigit():
            return cls.uniform(int(size))
        raise ValueError(f"cannot parse tail policy {text!r}")

    def __str__(self) -> str:
        return "ignore" if self.kind == "ignore" else f"uniform:{self.tail_size}"


IGNORE_TAIL = TailPolicy.ignore()


def token_entropy(dist: TokenDistribution, tail_mode: TailPolicy = IGNORE_TAIL) -> float:
    """Shannon entropy ``-sum p ln p`` of one step's distribution, in nats."""
    terms = [-p * math.log(p) for _, p in dist.entries if p > 0.0]
    if tail_mode.kind == "uniform":
        residual = 1.0 - dist.coverage
        if residual > 0.0:
            # tail_size pseudo-entries of mass residual/n each
            terms.append(-residual * math.log(residual / tail_mode.tail_size))
    return max(0.0, math.fsum(terms))


@dataclass(frozen=True)
class EntropySeries:
    values: tuple[float, ...]
    positions: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.positions):
            raise ValueError("values and positions differ in length")
        if any(v < 0.0 for v in self.values):
            raise ValueError("entropy values must be non-negative")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ValueError("positions must be strictly increasing")

    @classmethod
    def from_values(cls, values: Sequence[float], start: int = 0) -> "EntropySeries":
        return cls(tuple(float(v) for v in values), tuple(range(start, start + len(values))))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ProbeResult:
    mean_entropy: float
    probe_token_count: int
    per_token: EntropySeries
    trigger_position: int

    def to_dict(self) -> dict:
        return {
            "mean_entropy": self.mean_entropy,
            "probe_token_count": self.probe_token_count,
            "per_token": list(self.per_token.values),
            "trigger_position": self.trigger_position,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProbeResult":
        return cls(
            mean_entropy=d["mean_entropy"],
            probe_token_count=d["probe_token_count"],
            per_token=EntropySeries.from_values(d["per_token"]),
            trigger_position=d["trigger_position"],
        )


def probe_mean_entropy(series: EntropySeries | Sequence[float]) -> float:
    values = series.values if isinstance(series, EntropySeries) else tuple(series)
    if not values:
        raise ValueError("probe produced no tokens; mean entropy undefined")
    return math.fsum(values) / len(values)


def prefix_mean_curve(series: EntropySeries | Sequence[float]) -> list[float]:
    """Running mean: element ``i`` is the mean of the first ``i + 1`` values."""
    values = series.values if isinstance(series, EntropySeries) else tuple(series)
    out: list[float] = []
    # Neumaier compensated running sum keeps the last element within ulps of fsum/n
    total = 0.0
    comp = 0.0
    for i, v in enumerate(values):
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
        out.append((total + comp) / (i + 1))
    return out


class HasResponseEntropy(Protocol):
    correct: bool
    response_entropy: Sequence[float]


@dataclass(frozen=True)
class GroupStats:
    count: int
    mean: float
    episode_means: tuple[float, ...]
    histogram: tuple[int, ...]
    bin_edges: tuple[float, ...] = field(repr=False)


def grouped_entropy_stats(
    records: Iterable[HasResponseEntropy],
    bins: int | Sequence[float] = 20,
) -> tuple[GroupStats | None, GroupStats | None]:
    """Split episodes by correctness and summarize their mean response entropy.

    Episodes with an empty response series carry no signal and are dropped.
    A group with no episodes comes back as ``None`` rather than zeros. Both
    histograms share the same bin edges so they can be overlaid.
    """
    groups: dict[bool, list[float]] = {True: [], False: []}
    for rec in records:
        values = list(rec.response_entropy)
        if not values:
            continue
        groups[bool(rec.correct)].append(probe_mean_entropy(values))

    everything = groups[True] + groups[False]
    if isinstance(bins, int):
        hi = max(everything) if everything else 1.0
        edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
    else:
        edges = np.asarray(bins, dtype=float)

    def stats(means: list[float]) -> GroupStats | None:
        if not means:
            return None
        counts, _ = np.histogram(means, bins=edges)
        return GroupStats(
            count=len(means),
            mean=math.fsum(means) / len(means),
            episode_means=tuple(means),
            histogram=tuple(int(c) for c in counts),
            bin_edges=tuple(float(e) for e in edges),
        )

    return stats(groups[True]), stats(groups[False])
