"""Final-answer extraction and exact-match scoring for math benchmarks.

Matching is exact after light canonicalization; there is no symbolic
equivalence checking, so e.g. ``1/2`` and ``0.5`` match but ``\\sqrt{4}`` and
``2`` do not.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence


@dataclass(frozen=True)
class ExtractionPolicy:
    """``boxed``: last ``\\boxed{}``; ``after_marker``: text after the last
    ``marker``; ``whole_tail``: last non-empty line."""

    kind: str = "boxed"
    marker: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("boxed", "after_marker", "whole_tail"):
            raise ValueError(f"unknown extraction policy {self.kind!r}")
        if self.kind == "after_marker" and not self.marker:
            raise ValueError("after_marker policy needs a marker")

    @classmethod
    def parse(cls, text: str) -> "ExtractionPolicy":
        """``boxed``, ``whole_tail`` or ``after_marker:<marker>``."""
        kind, _, marker = text.partition(":")
        return cls(kind, marker)

    def __str__(self) -> str:
        return f"after_marker:{self.marker}" if self.kind == "after_marker" else self.kind


BOXED = ExtractionPolicy("boxed")
DEFAULT_EXTRACTION = (BOXED, ExtractionPolicy("after_marker", "final answer is"))


def _last_boxed(text: str) -> str | None:
    for m in reversed(list(re.finditer(r"\\(?:boxed|fbox)\s*\{", text))):
        depth = 1
        i = m.end()
        while i < len(text):
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
                if depth == 0:
                    return text[m.end() : i]
            i += 1
    return None


def extract_answer(response_text: str, policy: ExtractionPolicy | Sequence[ExtractionPolicy] = BOXED) -> str | None:
    """Candidate answer string, or None when nothing extractable is found.

    A sequence of policies is tried in order.
    """
    if not isinstance(policy, ExtractionPolicy):
        for p in policy:
            found = extract_answer(response_text, p)
            if found is not None:
                return found
        return None
    if policy.kind == "boxed":
        found = _last_boxed(response_text)
    elif policy.kind == "after_marker":
        idx = response_text.rfind(policy.marker)
        if idx < 0:
            return None
        tail = response_text[idx + len(policy.marker) :].strip()
        found = tail.splitlines()[0] if tail else None
        if found is not None:
            boxed = _last_boxed(found)
            found = boxed if boxed is not None else found
    else:
        lines = [ln for ln in response_text.splitlines() if ln.strip()]
        found = lines[-1] if lines else None
    if found is None or not found.strip():
        return None
    return found.strip()


_FRAC = re.compile(r"^\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}$")
_NUMBER = re.compile(r"^[-+]?(\d+(\.\d*)?|\.\d+)$")
_THOUSANDS = re.compile(r"^[-+]?\d{1,3}(,\d{3})+(\.\d+)?$")


def _as_rational(s: str) -> Fraction | None:
    m = _FRAC.match(s)
    if m:
        num, den = int(m.group(1)), int(m.group(2))
        return Fraction(num, den) if den else None
    if _THOUSANDS.match(s):
        s = s.replace(",", "")
    if _NUMBER.match(s):
        return Fraction(s)
    if s.count("/") == 1:
        num, den = s.split("/")
        if _NUMBER.match(num.strip()) and _NUMBER.match(den.strip()):
            den_f = Fraction(den.strip())
            return Fraction(num.strip()) / den_f if den_f else None
    return None


def normalize_answer(s: str) -> str:
    s = " ".join(s.split())
    for left, right in (("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")):
        while s.startswith(left) and s.endswith(right) and len(s) >= len(left) + len(right):
            s = s[len(left) : len(s) - len(right)].strip()
    s = s.rstrip(".").strip()
    m = re.fullmatch(r"\\text\{(.*)\}", s)
    if m:
        s = m.group(1).strip()
    value = _as_rational(s)
    if value is not None:
        return str(value)
    return s


def answers_match(candidate: str, gold: str) -> bool:
    return normalize_answer(candidate) == normalize_answer(gold)


def score_answer(
    response_text: str,
    gold_answer: str,
    extraction: ExtractionPolicy | Sequence[ExtractionPolicy] = BOXED,
) -> bool:
    candidate = extract_answer(response_text, extraction)
    return candidate is not None and answers_match(candidate, gold_answer)
