"""Builders for scripted models with designed think/probe/response behaviour.

Each scripted problem is identified by a ``[tag]`` at the end of its question
text. Its think phase walks through unique per-position tokens, emits a
reflective word at chosen positions, and closes with ``</think>`` at
``think_length``. Probe continuations and responses are keyed by the think
position where thinking ended, so the same model answers differently
depending on where a controller cut the reasoning.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

from .models import ScriptedModel

DEFAULT_TEMPLATE = (
    "<｜User｜>{question}\nPlease reason step by step, and put your final answer within \\boxed{}."
    "<｜Assistant｜><think>\n"
)
DEFAULT_PROBE_TEXT = "</think>\n\nSo the final answer is"
THINK_END = "</think>"
EOS = "<eos>"

Step = Union[str, Mapping[str, float]]


def render_prompt(template: str, question: str) -> str:
    return template.replace("{question}", question)


def _as_dist(step: Step) -> dict[str, float]:
    return {step: 1.0} if isinstance(step, str) else dict(step)


def _main_token(step: Step) -> str:
    if isinstance(step, str):
        return step
    best = max(step.values())
    return next(t for t, p in step.items() if p == best)


@dataclass
class ScriptedProblem:
    tag: str
    think_length: int
    triggers: Mapping[int, Sequence[Step]] = field(default_factory=dict)
    responses: Mapping[int, Sequence[Step]] = field(default_factory=dict)
    default_response: Sequence[Step] = ()
    trigger_word: str = " Wait"
    stop_alt: float = 0.1

    def think_token(self, j: int) -> str:
        return self.trigger_word if j in self.triggers else f" {self.tag}s{j}"

    def check(self) -> None:
        positions = sorted(self.triggers)
        if any(p < 1 or p >= self.think_length for p in positions):
            raise ValueError(f"{self.tag}: trigger positions must lie in [1, think_length)")
        if any(b - a < 2 for a, b in zip(positions, positions[1:])):
            raise ValueError(f"{self.tag}: triggers must not be adjacent")


def build_scripted_model(
    problems: Sequence[ScriptedProblem],
    *,
    template: str = DEFAULT_TEMPLATE,
    probe_text: str = DEFAULT_PROBE_TEXT,
    name: str = "designed",
) -> ScriptedModel:
    tail = template.split("{question}", 1)[1]
    vocab: dict[str, None] = dict.fromkeys([EOS, THINK_END, "\n\n", probe_text[len(THINK_END + "\n\n"):]])
    rules: list[tuple[str, dict[str, float]]] = []

    def add(suffix: str, step: Step) -> None:
        dist = _as_dist(step)
        vocab.update(dict.fromkeys(dist))
        rules.append((suffix, dist))

    for prob in problems:
        prob.check()
        toks = [prob.think_token(j) for j in range(prob.think_length)]
        anchor = f"[{prob.tag}]{tail}"

        def key(j: int) -> str:
            # literal suffix that pins down think position j for this problem
            if j == 0:
                return anchor
            if j == 1:
                return anchor + toks[0]
            return toks[j - 2] + toks[j - 1]

        # any think position can end thinking (forced cuts included)
        for x in range(prob.think_length + 1):
            before = toks[x - 1] if x > 0 else anchor
            add(before + THINK_END, "\n\n")
            steps = list(prob.responses.get(x, prob.default_response)) + [EOS]
            text = before + THINK_END + "\n\n"
            for step in steps:
                add(text, step)
                text += _main_token(step)
            if x in prob.triggers:
                text = before + probe_text
                for step in prob.triggers[x]:
                    add(text, step)
                    text += _main_token(step)

        for j in range(prob.think_length + 1):
            if j == prob.think_length:
                add(key(j), THINK_END)
            elif j in prob.triggers:
                add(key(j), {prob.trigger_word: 1.0 - prob.stop_alt, THINK_END: prob.stop_alt})
            else:
                add(key(j), toks[j])

    # probe/response suffixes are longer and more specific; check them first
    rules.sort(key=lambda r: -len(r[0]))
    return ScriptedModel(list(vocab), rules, {EOS: 1.0}, eos=EOS, name=name)


def uniform(tokens: Sequence[str]) -> dict[str, float]:
    return {t: 1.0 / len(tokens) for t in tokens}


def demo_problems() -> list[ScriptedProblem]:
    """Four toy problems exercising every termination path.

    P1 benefits from a late cut, P2 is easy and can stop at its first
    reflection, P3 is cut by a confidently wrong probe, and P4 cuts early on
    a confident but wrong probe that only a free response phase repairs.
    """
    def confident(answer: str) -> list[Step]:
        return [" \\boxed{", {answer: 0.97, "1": 0.03}, "}"]

    unsure = [uniform([" 3", " 5", " 9", " 2"]), uniform([".", ",", " or", " and"]), " then"]
    right = ["The", " answer", " is", " \\boxed{7}", "."]
    wrong = ["The", " answer", " is", " \\boxed{3}", "."]
    repaired = ["Checking", " again", ",", " the", " answer", " is", " \\boxed{7}", "."]
    return [
        ScriptedProblem("P1", 40, triggers={12: unsure, 24: confident("7")},
                        responses={12: wrong, 24: right, 40: right}, default_response=right, stop_alt=1e-3),
        ScriptedProblem("P2", 30, triggers={10: confident("7"), 20: confident("7")},
                        responses={10: right, 20: right, 30: right}, default_response=right, stop_alt=1e-3),
        ScriptedProblem("P3", 50, triggers={15: unsure, 30: confident("9"), 45: unsure},
                        responses={15: wrong, 30: wrong, 45: right, 50: right}, default_response=wrong, stop_alt=1e-3),
        ScriptedProblem("P4", 36, triggers={12: confident("3"), 24: unsure},
                        responses={12: repaired, 24: right, 36: right}, default_response=wrong, stop_alt=1e-3),
    ]


def demo_model() -> ScriptedModel:
    return build_scripted_model(demo_problems(), name="demo")


BUNDLED = {"demo": demo_model}


def load_scripted(spec: str) -> ScriptedModel:
    """A bundled fixture by name, or a JSON fixture file path."""
    if spec in BUNDLED:
        return BUNDLED[spec]()
    return ScriptedModel.load(spec)
