import itertools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechalign.evaluation import (
    ACCURACY,
    AGREEMENT,
    CATEGORIES,
    CHAT,
    EvalInstance,
    EvalTask,
    FileResponder,
    JudgeVerdict,
    RuleBasedJudge,
    aggregate,
    cascade_responder,
    collect_responses,
    dump_tasks,
    dump_verdicts,
    echo_responder,
    judge,
    load_tasks,
    load_verdicts,
    parse_accuracy,
    parse_agreement,
    report_metadata,
    run_task,
)
from speechalign.synthetic import mini_benchmark, mini_benchmark_responder, sample_manifest


def task(tid, cat, n, protocol=ACCURACY):
    insts = tuple(EvalInstance(f"{tid}-{i}", f"q{i}", "yes", None) for i in range(n))
    return EvalTask(tid, cat, protocol, insts)


def verdicts(t, correct):
    return [JudgeVerdict(i.id, ACCURACY, correct=c) for i, c in zip(t.instances, correct)]


def test_task_validation():
    with pytest.raises(ValueError):
        task("x", "CON", 1, AGREEMENT)
    with pytest.raises(ValueError):
        task("x", CHAT, 1, ACCURACY)
    with pytest.raises(ValueError):
        task("x", "XYZ", 1)


def test_task_file_round_trip(tmp_path):
    tasks = mini_benchmark(3)
    dump_tasks(tasks, tmp_path / "t.json")
    assert load_tasks(tmp_path / "t.json") == tasks


def test_echo_responses():
    t = task("t", "CON", 10)
    assert collect_responses(t, echo_responder) == [(i.id, i.instruction) for i in t.instances]


def test_responder_failure_unanswered():
    t = task("t", "CON", 10)

    def flaky(inst):
        if inst.id == "t-3":
            raise RuntimeError("boom")
        return "ok"
    got = collect_responses(t, flaky)
    assert len(got) == 9 and "t-3" not in dict(got)
    v = judge(t.instances, got, ACCURACY, lambda m: "CORRECT")
    assert v[3].correct is False and v[3].raw == ("<unanswered>",)


def test_file_responder(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text("\n".join(json.dumps({"id": f"t-{i}", "response": f"r {i}"}) for i in range(3)))
    t = task("t", "CON", 3)
    assert collect_responses(t, FileResponder(p)) == [(f"t-{i}", f"r {i}") for i in range(3)]


def test_parsers():
    assert parse_accuracy("CORRECT") is True and parse_accuracy("Incorrect.") is False
    assert parse_accuracy("Yes") is True and parse_accuracy("hmm") is None
    assert parse_agreement("Score: 7") == 7 and parse_agreement("8/10") == 8
    assert parse_agreement("Score: 11") is None and parse_agreement("great") is None


def test_alternating_mock_judge():
    t = task("t", "CON", 6)
    replies = itertools.cycle(["CORRECT", "INCORRECT"])
    v = judge(t.instances, collect_responses(t, echo_responder), ACCURACY,
              lambda m: next(replies), parallelism=1)
    assert [x.correct for x in v] == [True, False] * 3


def test_agreement_and_reprompt_fallback():
    t = EvalTask("c", CHAT, AGREEMENT, (EvalInstance("c0", "q", "r"),))
    v = judge(t.instances, [("c0", "a")], AGREEMENT, lambda m: "Score: 7")
    assert v[0].score == 7
    calls = []

    def prose(m):
        calls.append(len(m))
        return "I think it is fine."
    v = judge(task("t", "CON", 1).instances, [("t-0", "a")], ACCURACY, prose)
    assert v[0].correct is False and len(v[0].raw) == 2 and calls == [1, 3]
    v = judge(t.instances, [("c0", "a")], AGREEMENT, prose)
    assert v[0].score == 1


def test_rule_judge():
    inst = EvalInstance("i", "What emotion?", "very happy")
    ok = judge([inst], [("i", "The speaker is very happy today")], ACCURACY, RuleBasedJudge())
    bad = judge([inst], [("i", "happy, not very")], ACCURACY, RuleBasedJudge())
    assert ok[0].correct is True and bad[0].correct is False


def test_aggregate_examples():
    t = task("a", "CON", 4)
    r = aggregate({"a": (t, verdicts(t, [1, 1, 1, 0]))})
    assert r.task_scores["a"] == 75.0 and r.category_scores["CON"] == 75.0 and r.overall == 75.0
    c = EvalTask("c", CHAT, AGREEMENT, (EvalInstance("c0", "q", "r"), EvalInstance("c1", "q", "r")))
    r = aggregate({"c": (c, [JudgeVerdict("c0", AGREEMENT, score=6),
                             JudgeVerdict("c1", AGREEMENT, score=8)])})
    assert r.chat_score == 7.00 and r.overall is None


def test_all_is_task_weighted():
    a, b1, b2 = task("a", "CON", 2), task("b1", "SEM", 2), task("b2", "SEM", 2)
    res = {"a": (a, verdicts(a, [1, 1])), "b1": (b1, verdicts(b1, [0, 0])),
           "b2": (b2, verdicts(b2, [1, 0]))}
    r = aggregate(res)
    assert r.category_scores == {"CON": 100.0, "SEM": 25.0}
    assert r.overall == 50.0
    assert sum(r.category_scores.values()) / 2 == 62.5
    assert aggregate(res, weighting="instance").overall == pytest.approx(100 * 3 / 6)


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(rnd):
    tasks = mini_benchmark(4, seed=2)
    resp = mini_benchmark_responder(0.5)
    results = {t.task_id: run_task(t, resp, RuleBasedJudge(), 1) for t in tasks}
    base = aggregate(results).to_dict()
    shuffled = {}
    keys = list(results)
    rnd.shuffle(keys)
    for k in keys:
        t, v = results[k]
        order = list(range(len(v)))
        rnd.shuffle(order)
        t2 = EvalTask(t.task_id, t.category, t.protocol, tuple(t.instances[i] for i in order))
        shuffled[k] = (t2, [v[i] for i in order])
    assert aggregate(shuffled).to_dict() == base


def test_cascade_variants():
    rec = sample_manifest().records[0]
    last_line = lambda msgs: msgs[-1].content.splitlines()[-1]
    assert cascade_responder(rec, "What is said?", last_line) == "What is said?"
    seen = []
    cascade_responder(rec, "q", lambda m: seen.append(m[0].content) or "x", "transcript")
    cascade_responder(rec, "q", lambda m: seen.append(m[0].content) or "x", "seed")
    assert seen[0] == "How are you?\nq"
    assert "(Gender: Female, Emotion: Happy)" in seen[1]


def test_verdict_persistence_byte_deterministic(tmp_path):
    tasks = mini_benchmark(5)
    results = {t.task_id: run_task(t, mini_benchmark_responder(), RuleBasedJudge()) for t in tasks}
    dump_verdicts(results, tmp_path / "v.jsonl")
    loaded = load_verdicts(tmp_path / "v.jsonl")
    meta = report_metadata("rule")
    a = aggregate(results, metadata=meta).to_json()
    b = aggregate(loaded, metadata=meta).to_json()
    assert a == b
    dump_verdicts(loaded, tmp_path / "w.jsonl")
    assert (tmp_path / "v.jsonl").read_bytes() == (tmp_path / "w.jsonl").read_bytes()
    assert all(v.raw for _, vs in loaded.values() for v in vs)
    assert set(meta["prompts"]) == {ACCURACY, AGREEMENT}


def test_report_table_columns():
    tasks = mini_benchmark(3)
    results = {t.task_id: run_task(t, mini_benchmark_responder(), RuleBasedJudge()) for t in tasks}
    head = aggregate(results).table().splitlines()[0].split()
    assert head == [*CATEGORIES, "ALL", "Chat"]
