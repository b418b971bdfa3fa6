"""Randomized scripted models shared by the controller property tests."""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass

from entrocut.fixtures import ScriptedProblem, build_scripted_model
from entrocut.models import GREEDY, ScriptedModel, TokenModel
from entrocut.policy import ControllerConfig

PROBE_TEXT = "</think>\n\nSo the final answer is"
THINK_WORDS = [" a", " b", " c", " d", " e"]
TRIGGERS = [" Wait", " But", " Alternatively,"]
ANSWERS = [" 1", " 2", " 3", " 4"]
RESPONSE = [" x", " y", " \\boxed{1}"]
EOS = "<eos>"


def _weights(rng: random.Random, tokens, floor=0.0):
    raw = [rng.random() + floor for _ in tokens]
    total = sum(raw)
    return {t: w / total for t, w in zip(tokens, raw)}


def _peaked(rng: random.Random, tokens):
    """Anything from near one-hot to near uniform."""
    sharpness = rng.choice([0.0, 0.5, 2.0, 8.0, 40.0])
    raw = [rng.random() ** sharpness if sharpness else 1.0 for _ in tokens]
    top = rng.randrange(len(tokens))
    raw[top] += sharpness
    total = sum(raw)
    return {t: w / total for t, w in zip(tokens, raw)}


def markov_model(seed: int) -> ScriptedModel:
    """Next token depends on the previous token only; probes depend on the
    think token they follow, so probe entropy varies along a trace."""
    rng = random.Random(seed)
    trigger_rate = rng.uniform(0.05, 0.4)
    stop_rate = rng.uniform(0.0, 0.05)
    rules = []
    for prev in THINK_WORDS + TRIGGERS:
        # the think_words cover the whole alphabet so NoWait always has mass left
        base = _weights(rng, THINK_WORDS, floor=0.2)
        dist = {t: p * (1 - trigger_rate - stop_rate) for t, p in base.items()}
        for t, p in _weights(rng, TRIGGERS).items():
            dist[t] = p * trigger_rate
        if stop_rate:
            dist["</think>"] = stop_rate
        rules.append((prev + PROBE_TEXT, _peaked(rng, ANSWERS)))
        rules.append((prev, dist))
    for a in ANSWERS:
        rules.append((a, {**{b: 0.8 / len(ANSWERS) for b in ANSWERS}, EOS: 0.2}))
    rules.append(("</think>", {"\n\n": 1.0}))
    rules.append(("\n\n", _weights(rng, RESPONSE)))
    for r in RESPONSE:
        rules.append((r, _mix_eos(rng)))
    rules.sort(key=lambda r: -len(r[0]))
    vocab = THINK_WORDS + TRIGGERS + ANSWERS + RESPONSE + ["</think>", "\n\n", "So the final answer is", EOS]
    return ScriptedModel(vocab, rules, {t: 1 / len(THINK_WORDS) for t in THINK_WORDS}, eos=EOS, name=f"markov{seed}")


def _mix_eos(rng: random.Random):
    d = {t: p * 0.7 for t, p in _weights(rng, RESPONSE).items()}
    d[EOS] = 0.3
    return d


def random_config(seed: int, **changes) -> ControllerConfig:
    rng = random.Random(seed * 7919 + 1)
    cfg = ControllerConfig(
        tau=rng.uniform(0.0, 1.4),
        probe_k=rng.randint(1, 4),
        min_think_tokens=rng.randint(0, 12),
        probe_cooldown_tokens=rng.randint(0, 6),
        max_think_tokens=rng.randint(30, 90),
        max_response_tokens=20,
        trigger_tokens=frozenset({"Wait", "But", "Alternatively"}),
    )
    return cfg.with_(**changes) if changes else cfg


@dataclass
class Call:
    kind: str
    context: tuple
    snapshot: tuple


class SpyModel(TokenModel):
    """Records every context it is handed and checks none is mutated."""

    def __init__(self, inner: TokenModel) -> None:
        self.inner = inner
        self.name = inner.name
        self.eos_id = inner.eos_id
        self.capabilities = inner.capabilities
        self.calls: list[Call] = []
        self.mutated = False

    def step(self, context, sampling, rng, blocked_words=frozenset()):
        before = tuple(context)
        out = self.inner.step(context, sampling, rng, blocked_words)
        self.calls.append(Call("step", before, tuple(context)))
        return out

    def branch(self, context, suffix, k, sampling=GREEDY, rng=None):
        before = tuple(context)
        out = self.inner.branch(context, suffix, k, sampling, rng)
        if tuple(context) != before:
            self.mutated = True
        self.calls.append(Call("branch", before, tuple(context)))
        return out

    def encode(self, text):
        return self.inner.encode(text)

    def decode(self, ids):
        return self.inner.decode(ids)


def binary_entropy(p: float) -> float:
    return -(p * math.log(p) + (1 - p) * math.log(1 - p))


def entropy_gap_model(p_correct: float, p_wrong: float, n_correct: int = 3, n_wrong: int = 2, length: int = 6):
    """Problems C1.. answer right and W1.. answer wrong; every response token
    has a two-way distribution, so each episode's response entropy is flat at
    the binary entropy of its group's probability.

    Meant for fixed_length runs with budget 5, which skip the natural "\\n\\n".
    """
    right = [{" \\boxed{5}": p_correct, " \\boxed{9}": 1 - p_correct}] * length
    wrong = [{" \\boxed{6}": p_wrong, " \\boxed{8}": 1 - p_wrong}] * length
    probs = [ScriptedProblem(f"C{i}", 10, responses={5: right}) for i in range(1, n_correct + 1)]
    probs += [ScriptedProblem(f"W{i}", 10, responses={5: wrong}) for i in range(1, n_wrong + 1)]
    return build_scripted_model(probs, name="entropy-gap")


def write_gap_dataset(path, n_correct: int = 3, n_wrong: int = 2):
    with open(path, "w") as fh:
        for tag in [f"C{i}" for i in range(1, n_correct + 1)] + [f"W{i}" for i in range(1, n_wrong + 1)]:
            fh.write(json.dumps({"id": tag, "question": f"q [{tag}]", "answer": "5"}) + "\n")
