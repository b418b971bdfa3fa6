from __future__ import annotations

import json
import math
import random

import pytest

from entrocut.fixtures import ScriptedProblem, build_scripted_model, demo_model, uniform
from entrocut.harness import (
    DatasetError,
    DatasetSpec,
    ExperimentPlan,
    MethodSpec,
    Problem,
    RunRecord,
    RunStore,
    average_prefix_curves,
    build_report_from_records,
    cell_seed,
    entropy_analysis,
    export_dataset,
    ingest_dataset,
    run_experiment,
)
from entrocut.models import GREEDY, ModelError, SamplingConfig
from entrocut.policy import ControllerConfig

SMALL = dict(probe_k=3, min_think_tokens=8, probe_cooldown_tokens=4, max_think_tokens=64)


def demo_problems():
    return [Problem(f"P{i}", f"question {i} [P{i}]", "7", "demo") for i in range(1, 5)]


def methods(*modes, **extra):
    out = []
    for mode in modes:
        cfg = ControllerConfig(mode=mode, **{**SMALL, **extra})
        out.append(MethodSpec(mode, cfg))
    return out


def demo_plan(reps=2, modes=("vanilla", "nowait", "entrocut"), **kw):
    return ExperimentPlan(
        datasets=[DatasetSpec("demo", demo_problems(), reps)],
        methods=methods(*modes),
        sampling=SamplingConfig(0.6, 1.0),
        **kw,
    )


def test_ingest_jsonl_and_csv(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(
        '{"id": 1, "question": "q1", "answer": "5", "difficulty": "easy"}\n\n'
        '{"id": "2", "question": "q2", "answer": " 6 "}\n'
        '{"id": "3", "question": "q3", "answer": "7"}\n'
    )
    probs = ingest_dataset(p)
    assert [x.id for x in probs] == ["1", "2", "3"]
    assert probs[0].metadata == {"difficulty": "easy"} and probs[1].gold_answer == "6"
    assert probs[0].dataset_name == "d"
    c = tmp_path / "d.csv"
    export_dataset(probs, c, "csv")
    assert ingest_dataset(c, name="d") == probs
    j = tmp_path / "again.jsonl"
    export_dataset(probs, j)
    assert ingest_dataset(j, name="d") == probs


@pytest.mark.parametrize(
    "content, message",
    [
        ('{"id": "1", "question": "q"}\n', "line 1: missing or empty field 'answer'"),
        ('{"id": "1", "question": "q", "answer": "1"}\n{"id": "2", "answer": "1"}\n', "line 2"),
        ('{"id": "1", "question": "q", "answer": ""}\n', "answer"),
        ("not json\n", "line 1: invalid JSON"),
        ("", "empty"),
        ('{"id": "1", "question": "q", "answer": "1"}\n{"id": "1", "question": "q", "answer": "1"}\n', "duplicate"),
    ],
)
def test_ingest_errors(tmp_path, content, message):
    p = tmp_path / "bad.jsonl"
    p.write_text(content)
    with pytest.raises(DatasetError, match=message):
        ingest_dataset(p)


def test_ingest_csv_error_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,question,answer\n1,q,5\n2,,6\n")
    with pytest.raises(DatasetError, match="line 3: missing or empty field 'question'"):
        ingest_dataset(p)


def test_default_repetitions_by_dataset_name():
    plan = demo_plan()
    assert plan.repetitions_for(DatasetSpec("AIME24", [])) == 16
    assert plan.repetitions_for(DatasetSpec("amc23", [])) == 16
    assert plan.repetitions_for(DatasetSpec("MATH500", [])) == 4
    assert plan.repetitions_for(DatasetSpec("math500", [], repetitions=2)) == 2


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan([DatasetSpec("d", demo_problems(), 1)], methods("vanilla", "vanilla")).validate()
    with pytest.raises(ValueError):
        ExperimentPlan([DatasetSpec("d", demo_problems(), 0)], methods("vanilla")).validate()
    with pytest.raises(ValueError):
        ExperimentPlan([DatasetSpec("d", demo_problems(), 1)], methods("vanilla"), template="no slot").validate()


def test_tau_overrides_change_fingerprint_per_dataset():
    m = MethodSpec("ec", ControllerConfig(tau=0.15), {"amc23": 0.2})
    assert m.config_for("amc23").tau == 0.2
    assert m.config_for("aime24").tau == 0.15


def test_cell_seeds_are_isolated():
    base = {(m, r, p): cell_seed(0, m, r, p) for m in ("a", "b") for r in range(3) for p in ("x", "y")}
    assert len(set(base.values())) == len(base)
    assert cell_seed(0, "a", 1, "x") == base[("a", 1, "x")]
    assert cell_seed(1, "a", 1, "x") != base[("a", 1, "x")]


def test_counts_resume_and_noop(tmp_path):
    plan = demo_plan()
    store = RunStore(tmp_path / "run")
    first = run_experiment(plan, demo_model(), store, limit=10)
    assert first.executed == 10
    store = RunStore(tmp_path / "run")
    second = run_experiment(plan, demo_model(), store)
    assert (second.executed, second.skipped) == (14, 10)
    assert len(store.records) == 24
    assert len({r.cell for r in store.records}) == 24
    before = (tmp_path / "run" / "records.jsonl").read_bytes()
    third = run_experiment(plan, demo_model(), RunStore(tmp_path / "run"))
    assert third.executed == 0
    assert (tmp_path / "run" / "records.jsonl").read_bytes() == before
    assert third.report.to_json() == second.report.to_json()
    assert third.report.epr_for("entrocut", "demo") is not None


def test_resumed_run_matches_uninterrupted_run(tmp_path):
    plan = demo_plan(concurrency=3)
    a = RunStore(tmp_path / "a")
    run_experiment(plan, demo_model(), a, limit=7)
    run_experiment(plan, demo_model(), RunStore(tmp_path / "a"))
    b = RunStore(tmp_path / "b")
    run_experiment(plan, demo_model(), b)
    key = lambda r: r.cell
    got = [r.comparable() for r in sorted(RunStore(tmp_path / "a").records, key=key)]
    want = [r.comparable() for r in sorted(b.records, key=key)]
    assert got == want


def test_truncated_log_tail_is_dropped(tmp_path):
    plan = demo_plan(reps=1)
    run_experiment(plan, demo_model(), RunStore(tmp_path / "run"), limit=3)
    log = tmp_path / "run" / "records.jsonl"
    with open(log, "a") as fh:
        fh.write('{"problem_id": "P4", "data')
    store = RunStore(tmp_path / "run")
    assert len(store.records) == 3
    out = run_experiment(plan, demo_model(), store)
    assert out.executed == 9
    assert all(json.loads(line) for line in log.read_text().splitlines())


def test_index_rebuilt_from_log(tmp_path):
    plan = demo_plan(reps=1)
    run_experiment(plan, demo_model(), RunStore(tmp_path / "run"), limit=5)
    (tmp_path / "run" / "index.jsonl").write_text("garbage\n")
    store = RunStore(tmp_path / "run")
    assert len((tmp_path / "run" / "index.jsonl").read_text().splitlines()) == 5
    assert run_experiment(plan, demo_model(), store).executed == 7


def test_changed_config_reruns_only_that_method(tmp_path):
    plan = demo_plan(reps=1)
    run_experiment(plan, demo_model(), RunStore(tmp_path / "run"))
    plan.methods[2] = MethodSpec("entrocut", plan.methods[2].config.with_(tau=0.5))
    out = run_experiment(plan, demo_model(), RunStore(tmp_path / "run"))
    assert out.executed == 4


def flaky(model, bad_tag):
    """Make every step of one problem's episodes fail."""

    class _Flaky(type(model)):
        def step(self, context, sampling, rng, blocked_words=frozenset()):
            if f"[{bad_tag}]" in self.decode(context):
                raise ModelError("server exploded")
            return super().step(context, sampling, rng, blocked_words)

    model.__class__ = _Flaky
    return model


def test_failures_recorded_and_retried(tmp_path):
    plan = demo_plan(reps=1)
    store = RunStore(tmp_path / "run")
    out = run_experiment(plan, flaky(demo_model(), "P2"), store)
    assert out.failed == 3
    failed = [r for r in store.records if r.failed]
    assert {r.problem_id for r in failed} == {"P2"}
    assert all("server exploded" in r.failure_reason for r in failed)
    s = out.report.summary("vanilla", "demo")
    assert (s.episodes, s.failures) == (4, 1)
    assert any("failed" in w for w in out.report.warnings)
    again = run_experiment(plan, demo_model(), RunStore(tmp_path / "run"))
    assert again.executed == 3 and again.failed == 0
    assert again.report.summary("vanilla", "demo").failures == 0


def test_unexpected_errors_propagate(tmp_path):
    class Boom(type(demo_model())):
        def step(self, *a, **k):
            raise RuntimeError("bug")

    m = demo_model()
    m.__class__ = Boom
    with pytest.raises(RuntimeError):
        run_experiment(demo_plan(reps=1), m, RunStore(tmp_path / "run"))


def test_report_deterministic_from_store(tmp_path):
    plan = demo_plan(reps=1)
    run_experiment(plan, demo_model(), RunStore(tmp_path / "run"))
    records = RunStore(tmp_path / "run").records
    a = build_report_from_records(records).to_json()
    b = build_report_from_records(list(reversed(records))).to_json()
    assert a == b


def half_gap_model():
    """Vanilla cuts at 30 think tokens, NoWait at 10, EntroCut at 20.

    NoWait answers wrong, the other two answer right, so EntroCut loses no
    accuracy and saves exactly half of the Vanilla/NoWait token gap.
    """
    right, wrong = ["A", " \\boxed{5}"], ["A", " \\boxed{6}"]
    prob = ScriptedProblem(
        "H",
        30,
        triggers={10: [uniform([" 1", " 2"])], 20: [{" 5": 1.0}]},
        responses={10: wrong, 20: right, 30: right},
        default_response=right,
        stop_alt=1e-9,
    )
    return build_scripted_model([prob])


def test_designed_half_gap_gives_infinite_epr(tmp_path):
    plan = ExperimentPlan(
        datasets=[DatasetSpec("d", [Problem("H", "q [H]", "5", "d")], 2)],
        methods=methods("vanilla", "nowait", "entrocut", probe_k=1, tau=0.1),
        sampling=GREEDY,
    )
    out = run_experiment(plan, half_gap_model(), RunStore(tmp_path / "run"))
    rep = out.report
    v, n, e = (rep.summary(m, "d") for m in ("vanilla", "nowait", "entrocut"))
    # natural stops count "</think>" and "\n\n"; the forced cut counts its 2-token transition
    assert (v.mean_tokens, n.mean_tokens, e.mean_tokens) == (34, 14, 24)
    assert (v.accuracy, n.accuracy, e.accuracy) == (100, 0, 100)
    row = rep.epr_for("entrocut", "d")
    assert row.token_saving_ratio == 0.5
    assert row.accuracy_loss_ratio == 0.0
    assert row.epr == math.inf


def make_record(correct, values, pid="p"):
    return RunRecord(pid, "d", "m", "entrocut", 0, 0, "fp", correct=correct, response_entropy=list(values))


def test_entropy_analysis_designed_gap():
    recs = [make_record(True, [0.2] * 5, "a"), make_record(True, [0.2] * 5, "b")]
    recs += [make_record(False, [0.8] * 5, "c"), make_record(False, [], "d")]
    bundle = entropy_analysis(recs)
    assert bundle.correct.mean == pytest.approx(0.2, abs=1e-12)
    assert bundle.incorrect.mean == pytest.approx(0.8, abs=1e-12)
    assert bundle.skipped == 1
    assert bundle.curves["correct"].counts == [2] * 5


def test_single_episode_curve_unchanged():
    from entrocut.entropy import prefix_mean_curve

    values = [0.5, 0.1, 0.9, 0.3]
    curve = average_prefix_curves([values])
    assert curve.means == prefix_mean_curve(values)
    assert curve.counts == [1, 1, 1, 1]


def test_mixed_length_curves_against_accumulator():
    rng = random.Random(4)
    episodes = [[rng.uniform(0, 2) for _ in range(rng.randint(1, 40))] for _ in range(30)]
    curve = average_prefix_curves(episodes)
    # independent oracle: explicit per-position sums of per-episode running means
    sums, counts = {}, {}
    for ep in episodes:
        running = 0.0
        for i, v in enumerate(ep):
            running += v
            sums[i] = sums.get(i, 0.0) + running / (i + 1)
            counts[i] = counts.get(i, 0) + 1
    assert curve.counts == [counts[i] for i in range(len(counts))]
    for i, m in enumerate(curve.means):
        assert m == pytest.approx(sums[i] / counts[i], abs=1e-12)


def test_run_record_round_trip():
    rec = make_record(True, [0.1])
    rec.wall_clock_ms = 5.0
    again = RunRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert again == rec
    assert "wall_clock_ms" not in rec.comparable()
