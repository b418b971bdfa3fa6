"""Client for a completions-style inference server with per-token logprobs.

The server owns tokenization, so this model works on surface text chunks:
each distinct chunk the server returns is interned to a local integer id.
Every call is a fresh stateless request; a probe is just a completion of the
probe-suffixed prompt.
"""
from __future__ import annotations

import logging
import math
import os
import random
import threading
import time
from typing import Any, Callable, Mapping, Sequence

import httpx

from .entropy import TokenDistribution
from .models import (
    GREEDY,
    Capabilities,
    ContextOverflowError,
    ModelError,
    SamplingConfig,
    TokenModel,
    TokenStep,
    TransportError,
    matches_word,
    sample_token,
)

log = logging.getLogger(__name__)

EOS_TEXT = ""
_OVERFLOW_HINTS = ("maximum context length", "context length", "too many tokens", "context_length_exceeded")


class TextVocab:
    """Thread-safe interning of surface chunks to ids. Id 0 is end-of-sequence."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._ids: dict[str, int] = {EOS_TEXT: 0}
        self._texts: list[str] = [EOS_TEXT]

    def intern(self, text: str) -> int:
        with self._lock:
            tok = self._ids.get(text)
            if tok is None:
                tok = len(self._texts)
                self._texts.append(text)
                self._ids[text] = tok
            return tok

    def text(self, tok: int) -> str:
        return self._texts[tok]

    def __len__(self) -> int:
        return len(self._texts)


def parse_logprob_steps(
    choice: Mapping[str, Any],
    vocab: TextVocab,
) -> tuple[list[TokenStep], bool]:
    """Turn one completions ``choice`` into (token, distribution) pairs.

    Returns the pairs plus whether the server stopped on end-of-sequence.
    Coverage of each distribution is the summed probability of the returned
    top entries; the chosen token is added if the server left it out.
    """
    lp = choice.get("logprobs") or {}
    tokens = lp.get("tokens") or []
    chosen_lps = lp.get("token_logprobs") or [None] * len(tokens)
    tops = lp.get("top_logprobs") or [None] * len(tokens)
    steps: list[TokenStep] = []
    for text, chosen_lp, top in zip(tokens, chosen_lps, tops):
        entries: dict[int, float] = {}
        for cand, cand_lp in (top or {}).items():
            if cand_lp is None:
                continue
            entries[vocab.intern(cand)] = math.exp(min(0.0, float(cand_lp)))
        tok = vocab.intern(text)
        if tok not in entries and chosen_lp is not None:
            entries[tok] = math.exp(min(0.0, float(chosen_lp)))
        if not entries:
            entries[tok] = 1.0
        total = math.fsum(entries.values())
        if total > 1.0:
            # logprobs rounded server-side can overshoot 1 slightly
            entries = {t: p / total for t, p in entries.items()}
        steps.append((tok, TokenDistribution.from_probs(entries)))
    stopped = choice.get("finish_reason") == "stop"
    return steps, stopped


class RemoteCompletionsModel(TokenModel):
    def __init__(
        self,
        base_url: str,
        model_name: str,
        *,
        api_key_env: str = "ENTROCUT_API_KEY",
        timeout: float = 60.0,
        top_logprobs: int = 20,
        max_retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 8,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.name = model_name
        self.top_logprobs = top_logprobs
        self.capabilities = Capabilities(full_distribution=False, top_n=top_logprobs)
        self.vocab_size = None
        self.eos_id = 0
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self.vocab = TextVocab()
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}/v1/completions"
        attempt = 0
        while True:
            try:
                with self._gate:
                    resp = self._client.post(url, json=payload, headers=self._headers)
            except httpx.TransportError as exc:
                err: ModelError = TransportError(f"transport failure: {exc}")
            else:
                if resp.status_code == 200:
                    return resp.json()
                body = resp.text
                if resp.status_code in (400, 413) and any(h in body.lower() for h in _OVERFLOW_HINTS):
                    raise ContextOverflowError(body[:300])
                if resp.status_code == 429 or resp.status_code >= 500:
                    err = TransportError(f"HTTP {resp.status_code}: {body[:300]}")
                else:
                    raise ModelError(f"HTTP {resp.status_code}: {body[:300]}")
            if attempt >= self.max_retries:
                raise err
            delay = self.backoff * (2**attempt)
            log.warning("retrying after %s (attempt %d, sleeping %.2fs)", err, attempt + 1, delay)
            self._sleep(delay)
            attempt += 1

    def _request(self, prompt: str, max_tokens: int, sampling: SamplingConfig, seed: int | None) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": self.name,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "logprobs": self.top_logprobs,
        }
        if seed is not None:
            payload["seed"] = seed
        data = self._post(payload)
        try:
            return data["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise ModelError(f"malformed completions response: {data!r:.300}") from exc

    def step(self, context, sampling, rng, blocked_words=frozenset()):
        seed = rng.getrandbits(31) if rng is not None else None
        choice = self._request(self.decode(context), 1, sampling, seed)
        steps, stopped = parse_logprob_steps(choice, self.vocab)
        if not steps or (stopped and steps[0][0] == self.eos_id):
            return self.eos_id, TokenDistribution.one_hot(self.eos_id)
        tok, dist = steps[0]
        if blocked_words and matches_word(self.vocab.text(tok), blocked_words):
            # server picked a masked chunk: resample from the returned top entries
            blocked = [t for t, _ in dist.entries if matches_word(self.vocab.text(t), blocked_words)]
            tok = sample_token(dist, sampling, rng or random.Random(seed), blocked)
        return tok, dist

    def branch(self, context, suffix, k, sampling=GREEDY, rng=None):
        seed = rng.getrandbits(31) if rng is not None else None
        choice = self._request(self.decode(list(context) + list(suffix)), k, sampling, seed)
        steps, _ = parse_logprob_steps(choice, self.vocab)
        return steps[:k]

    def encode(self, text: str) -> list[int]:
        return [self.vocab.intern(text)] if text else []

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.vocab.text(i) for i in ids)

    def close(self) -> None:
        self._client.close()
