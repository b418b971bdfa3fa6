"""Trace recording and deterministic replay of model interactions.

A trace is line-delimited JSON: a header line, then ``token`` (id -> text),
``encode``, ``episode``, ``step`` and ``branch`` records. Steps and branches
are looked up by a hash of the exact context they were asked about, so a
replayed episode either follows the recorded path or fails loudly.
"""
from __future__ import annotations

import hashlib
import json
import math
import threading
from array import array
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Mapping, Sequence

from .entropy import IGNORE_TAIL, TailPolicy, TokenDistribution, probe_mean_entropy, token_entropy
from .models import (
    GREEDY,
    Capabilities,
    OffTraceError,
    SamplingConfig,
    TokenModel,
    TokenStep,
    TraceWriteError,
)

SCHEMA_VERSION = 1
RECORD_KINDS = {"header", "token", "encode", "episode", "step", "branch"}


class TraceSchemaError(ValueError):
    pass


def context_hash(ids: Sequence[int]) -> str:
    return hashlib.blake2b(array("q", ids).tobytes(), digest_size=16).hexdigest()


def _dist_to_json(dist: TokenDistribution) -> dict[str, Any]:
    return {
        "top": [[t, math.log(p), p] for t, p in dist.entries if p > 0.0],
        "coverage": dist.coverage,
    }


def _dist_from_json(d: Mapping[str, Any]) -> TokenDistribution:
    return TokenDistribution(tuple((int(t), float(p)) for t, _, p in d["top"]), float(d["coverage"]))


class RecordingModel(TokenModel):
    """Transparent wrapper that logs every call to ``sink``."""

    def __init__(
        self,
        inner: TokenModel,
        sink: IO[str],
        *,
        sampling: SamplingConfig | None = None,
        tokenizer_id: str | None = None,
        think_end_text: str = "</think>",
    ) -> None:
        self.inner = inner
        self.sink = sink
        self.name = inner.name
        self.capabilities = inner.capabilities
        self.vocab_size = inner.vocab_size
        self.eos_id = inner.eos_id
        self.think_end_text = think_end_text
        self._lock = threading.Lock()
        self._local = threading.local()
        self._seen_ids: set[int] = set()
        self._seen_texts: set[str] = set()
        self._episodes = 0
        self._write(
            {
                "kind": "header",
                "schema_version": SCHEMA_VERSION,
                "model_name": inner.name,
                "sampling": sampling.to_dict() if sampling else None,
                "tokenizer_id": tokenizer_id or type(inner).__name__,
                "capabilities": {
                    "full_distribution": inner.capabilities.full_distribution,
                    "top_n": inner.capabilities.top_n,
                },
                "eos_id": inner.eos_id,
            }
        )
        self._note_ids([inner.eos_id])

    def _write(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, ensure_ascii=False) + "\n"
        try:
            with self._lock:
                self.sink.write(line)
                self.sink.flush()
        except (OSError, ValueError) as exc:
            raise TraceWriteError(f"trace sink write failed: {exc}") from exc

    def _note_ids(self, ids: Iterable[int]) -> None:
        fresh = []
        with self._lock:
            for i in ids:
                if i not in self._seen_ids:
                    self._seen_ids.add(i)
                    fresh.append(i)
        for i in fresh:
            self._write({"kind": "token", "id": i, "text": self.inner.token_text(i)})

    def _episode(self) -> Any:
        ep = getattr(self._local, "ep", None)
        if ep is None:
            raise RuntimeError("RecordingModel used before start_episode")
        return ep

    def start_episode(self, query, seed=None):
        with self._lock:
            index = self._episodes
            self._episodes += 1
        ep = _RecorderEpisode(index=index, query_len=len(query))
        self._local.ep = ep
        self._note_ids(query)
        self._write(
            {"kind": "episode", "episode": index, "seed": seed, "query_hash": context_hash(query), "query_len": len(query)}
        )
        self.inner.start_episode(query, seed)

    def step(self, context, sampling, rng, blocked_words=frozenset()):
        ep = self._episode()
        tok, dist = self.inner.step(context, sampling, rng, blocked_words)
        phase, position = ep.locate(context, self.inner, self.think_end_text)
        self._note_ids([tok, *(t for t, p in dist.entries if p > 0.0)])
        self._write(
            {
                "kind": "step",
                "episode": ep.index,
                "phase": phase,
                "position": position,
                "context_hash": context_hash(context),
                "blocked": sorted(blocked_words),
                "chosen": tok,
                **_dist_to_json(dist),
            }
        )
        return tok, dist

    def branch(self, context, suffix, k, sampling=GREEDY, rng=None):
        ep = self._episode()
        pairs = self.inner.branch(context, suffix, k, sampling, rng)
        probe_id = ep.probes
        ep.probes += 1
        ids = [t for t, _ in pairs] + [t for _, d in pairs for t, p in d.entries if p > 0.0]
        self._note_ids(ids)
        self._write(
            {
                "kind": "branch",
                "episode": ep.index,
                "trigger_position": len(context) - ep.query_len,
                "probe_id": probe_id,
                "context_hash": context_hash(list(context) + list(suffix)),
                "k": k,
                "tokens": [{"chosen": t, **_dist_to_json(d)} for t, d in pairs],
            }
        )
        return pairs

    def encode(self, text):
        ids = self.inner.encode(text)
        self._note_ids(ids)
        with self._lock:
            fresh = text not in self._seen_texts
            self._seen_texts.add(text)
        if fresh:
            self._write({"kind": "encode", "text": text, "ids": ids})
        return ids

    def decode(self, ids):
        return self.inner.decode(ids)

    def token_text(self, token_id):
        return self.inner.token_text(token_id)


@dataclass
class _RecorderEpisode:
    index: int
    query_len: int
    probes: int = 0
    respond_start: int | None = None
    seen_len: int = 0
    tail: str = ""

    def locate(self, context: Sequence[int], model: TokenModel, think_end: str) -> tuple[str, int]:
        if self.respond_start is None:
            start = max(self.seen_len, self.query_len)
            self.tail = (self.tail + model.decode(context[start:]))[-(len(think_end) + 64):]
            self.seen_len = len(context)
            if think_end in self.tail:
                self.respond_start = len(context)
        if self.respond_start is None:
            return "think", len(context) - self.query_len
        return "respond", len(context) - self.respond_start


@dataclass
class TraceFile:
    header: dict[str, Any]
    records: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def read(cls, path: str | Path) -> "TraceFile":
        lines = Path(path).read_text().splitlines()
        return cls.parse(lines)

    @classmethod
    def parse(cls, lines: Iterable[str]) -> "TraceFile":
        records = [json.loads(line) for line in lines if line.strip()]
        if not records or records[0].get("kind") != "header":
            raise TraceSchemaError("trace must start with a header line")
        header, body = records[0], records[1:]
        if header.get("schema_version") != SCHEMA_VERSION:
            raise TraceSchemaError(f"unsupported trace schema version {header.get('schema_version')!r}")
        trace = cls(header, body)
        trace.validate()
        return trace

    def validate(self) -> None:
        last: dict[tuple[int, str], int] = {}
        for n, rec in enumerate(self.records, start=2):
            kind = rec.get("kind")
            if kind not in RECORD_KINDS or kind == "header":
                raise TraceSchemaError(f"line {n}: unexpected record kind {kind!r}")
            dists = [rec] if kind == "step" else rec.get("tokens", []) if kind == "branch" else []
            for d in dists:
                if any(lp > 0.0 for _, lp, _ in d["top"]):
                    raise TraceSchemaError(f"line {n}: positive logprob")
            if kind == "step":
                key = (rec["episode"], rec["phase"])
                expected = last.get(key, -1) + 1
                if rec["position"] != expected:
                    raise TraceSchemaError(
                        f"line {n}: {rec['phase']} position {rec['position']} not contiguous (expected {expected})"
                    )
                last[key] = rec["position"]

    def episodes(self) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] == "episode"]

    def branches(self, episode: int | None = None) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] == "branch" and (episode is None or r["episode"] == episode)]

    def steps(self, episode: int | None = None) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] == "step" and (episode is None or r["episode"] == episode)]


@dataclass
class _ReplayEpisode:
    steps: dict[tuple[str, tuple[str, ...]], TokenStep] = field(default_factory=dict)
    branches: dict[str, tuple[int, list[TokenStep]]] = field(default_factory=dict)


class ReplayModel(TokenModel):
    """Serves exactly what a trace recorded and nothing else."""

    def __init__(self, trace: TraceFile) -> None:
        header = trace.header
        self.trace = trace
        self.name = header.get("model_name", "replay")
        caps = header.get("capabilities") or {}
        self.capabilities = Capabilities(caps.get("full_distribution", True), caps.get("top_n"))
        self.eos_id = header["eos_id"]
        self._texts: dict[int, str] = {}
        self._encodings: dict[str, list[int]] = {}
        self._episodes: dict[tuple[str, Any], _ReplayEpisode] = {}
        by_index: dict[int, _ReplayEpisode] = {}
        for rec in trace.records:
            kind = rec["kind"]
            if kind == "token":
                self._texts[rec["id"]] = rec["text"]
            elif kind == "encode":
                self._encodings[rec["text"]] = list(rec["ids"])
            elif kind == "episode":
                ep = _ReplayEpisode()
                by_index[rec["episode"]] = ep
                self._episodes.setdefault((rec["query_hash"], rec["seed"]), ep)
            elif kind == "step":
                key = (rec["context_hash"], tuple(rec["blocked"]))
                by_index[rec["episode"]].steps[key] = (rec["chosen"], _dist_from_json(rec))
            elif kind == "branch":
                pairs = [(t["chosen"], _dist_from_json(t)) for t in rec["tokens"]]
                by_index[rec["episode"]].branches[rec["context_hash"]] = (rec["k"], pairs)
        self.vocab_size = len(self._texts)
        self._local = threading.local()

    @classmethod
    def from_path(cls, path: str | Path) -> "ReplayModel":
        return cls(TraceFile.read(path))

    def _episode(self) -> _ReplayEpisode:
        ep = getattr(self._local, "ep", None)
        if ep is None:
            raise OffTraceError("no recorded episode selected")
        return ep

    def start_episode(self, query, seed=None):
        ep = self._episodes.get((context_hash(query), seed))
        self._local.ep = ep
        if ep is None:
            raise OffTraceError(f"no recorded episode for this query with seed {seed}")

    def step(self, context, sampling, rng, blocked_words=frozenset()):
        hit = self._episode().steps.get((context_hash(context), tuple(sorted(blocked_words))))
        if hit is None:
            raise OffTraceError(f"step at context length {len(context)} was not recorded")
        return hit

    def branch(self, context, suffix, k, sampling=GREEDY, rng=None):
        hit = self._episode().branches.get(context_hash(list(context) + list(suffix)))
        if hit is None:
            raise OffTraceError(f"probe at context length {len(context)} was not recorded")
        recorded_k, pairs = hit
        ended = bool(pairs) and pairs[-1][0] == self.eos_id
        if k > recorded_k and not ended:
            raise OffTraceError(f"probe asked for {k} tokens but only {recorded_k} were recorded")
        return list(pairs[:k])

    def encode(self, text):
        ids = self._encodings.get(text)
        if ids is None:
            raise OffTraceError(f"encoding of {text!r} was not recorded")
        return list(ids)

    def decode(self, ids):
        try:
            return "".join(self._texts[i] for i in ids)
        except KeyError as exc:
            raise OffTraceError(f"token id {exc.args[0]} never appeared in the trace") from None


def replay_model(trace: TraceFile | str | Path) -> ReplayModel:
    return ReplayModel(trace if isinstance(trace, TraceFile) else TraceFile.read(trace))


@dataclass(frozen=True)
class SweepPoint:
    tau: float
    decisions: tuple[bool, ...]
    terminate_at: int | None


def sweep_thresholds(
    trace: TraceFile,
    taus: Sequence[float],
    tail_policy: TailPolicy = IGNORE_TAIL,
) -> dict[int, list[SweepPoint]]:
    """Recompute probe decisions offline for every recorded probe.

    Returns, per episode, one entry per threshold listing the terminate
    decision at each recorded probe and the trigger position of the first
    terminating probe. Only probes that were actually recorded can be judged.
    """
    out: dict[int, list[SweepPoint]] = {}
    for ep in trace.episodes():
        index = ep["episode"]
        probes = sorted(trace.branches(index), key=lambda r: r["probe_id"])
        means = []
        for rec in probes:
            values = [token_entropy(_dist_from_json(t), tail_policy) for t in rec["tokens"]]
            means.append((rec["trigger_position"], probe_mean_entropy(values) if values else None))
        points = []
        for tau in taus:
            decisions = tuple(m is not None and m <= tau for _, m in means)
            first = next((pos for (pos, _), d in zip(means, decisions) if d), None)
            points.append(SweepPoint(tau, decisions, first))
        out[index] = points
    return out


def record_trace(model: TokenModel, sink: IO[str], **kwargs: Any) -> RecordingModel:
    return RecordingModel(model, sink, **kwargs)
