from __future__ import annotations

import random
import re
from collections import Counter

import pytest

from entrocut.entropy import TokenDistribution
from entrocut.fixtures import demo_model, load_scripted
from entrocut.models import (
    GREEDY,
    ContextOverflowError,
    DegenerateMaskError,
    SamplingConfig,
    ScriptedModel,
    matches_word,
    sample_token,
    word_of,
)


def test_word_of_strips_space_and_trailing_punctuation():
    assert word_of("  Wait,") == "Wait"
    assert word_of("But...") == "But"
    assert word_of("\n") == ""
    assert matches_word(" Alternatively,", {"Alternatively"})
    assert not matches_word(" WAIT", {"Wait"})


def test_greedy_picks_first_max():
    d = TokenDistribution.from_probs({3: 0.4, 1: 0.4, 2: 0.2})
    assert sample_token(d, GREEDY, None) == 3


def test_sampling_frequencies():
    d = TokenDistribution.from_probs({0: 0.7, 1: 0.2, 2: 0.1})
    rng = random.Random(0)
    counts = Counter(sample_token(d, SamplingConfig(1.0, 1.0), rng) for _ in range(20000))
    assert counts[0] / 20000 == pytest.approx(0.7, abs=0.02)
    assert counts[2] / 20000 == pytest.approx(0.1, abs=0.01)


def test_top_p_cuts_tail():
    d = TokenDistribution.from_probs({0: 0.6, 1: 0.3, 2: 0.1})
    rng = random.Random(1)
    seen = {sample_token(d, SamplingConfig(1.0, 0.85), rng) for _ in range(2000)}
    assert seen == {0, 1}


def test_mask_excludes_and_errors_when_empty():
    d = TokenDistribution.from_probs({0: 0.9, 1: 0.1})
    rng = random.Random(2)
    assert {sample_token(d, SamplingConfig(), rng, blocked=[0]) for _ in range(50)} == {1}
    with pytest.raises(DegenerateMaskError):
        sample_token(d, SamplingConfig(), rng, blocked=[0, 1])


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(temperature=-1)
    with pytest.raises(ValueError):
        SamplingConfig(top_p=0)


def simple_model(**kw):
    return ScriptedModel(
        ["a", "b", " Wait", "<eos>"],
        [("ab", {"<eos>": 1.0}), (re.compile(r"a$"), {"b": 0.8, " Wait": 0.2})],
        {"a": 1.0},
        **kw,
    )


def test_scripted_rules_and_branch():
    m = simple_model()
    ctx = m.encode("xa")
    tok, dist = m.step(ctx, GREEDY, None)
    assert m.token_text(tok) == "b" and dist.prob(m.encode(" Wait")[0]) == pytest.approx(0.2)
    before = list(ctx)
    out = m.branch(ctx, m.encode("b"), 5)
    assert ctx == before
    assert [m.token_text(t) for t, _ in out] == ["<eos>"]
    out = m.branch(m.encode("x"), [], 3)
    assert [m.token_text(t) for t, _ in out] == ["a", "b", "<eos>"]


def test_scripted_blocked_words():
    m = simple_model()
    rng = random.Random(0)
    picks = {m.step(m.encode("a"), SamplingConfig(), rng, frozenset({"b"}))[0] for _ in range(20)}
    assert {m.token_text(t) for t in picks} == {" Wait"}


def test_encode_decode_round_trip_with_unknown_chars():
    m = simple_model()
    text = "ab Wait ünïcode ab"
    assert m.decode(m.encode(text)) == text


def test_stop_after_and_overflow():
    m = simple_model(stop_after=3, max_context=5)
    assert m.lookup([0, 0, 0]).argmax() == m.eos_id
    with pytest.raises(ContextOverflowError):
        m.lookup([0] * 6)


def test_rejects_bad_distributions():
    with pytest.raises(ValueError):
        ScriptedModel(["a", "<eos>"], [("a", {"a": 0.5})], {"a": 1.0})
    with pytest.raises(ValueError):
        ScriptedModel(["a", "<eos>"], [("a", {"zzz": 1.0})], {"a": 1.0})


def test_json_round_trip(tmp_path):
    m = simple_model()
    path = tmp_path / "m.json"
    m.save(path)
    again = load_scripted(str(path))
    ctx = m.encode("qa")
    assert again.lookup(ctx) == m.lookup(ctx)
    assert again.to_dict() == m.to_dict()


def test_demo_fixture_loads_by_name():
    m = load_scripted("demo")
    assert m.name == "demo"
    assert demo_model().vocab == m.vocab
