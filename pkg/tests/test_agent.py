import random

import pytest

from kgwalk.agent import (
    AgentConfig,
    AgentRunError,
    Attempts,
    ReasoningStep,
    Route,
    Termination,
    cleanup,
    compose_summary,
    route_after_cleanup,
    route_anchor,
    route_reasoning,
    route_relation,
    route_relations,
    run,
)
from kgwalk.graph import Tuple, has_head, outgoing_relations, triples
from kgwalk.llm import MessageContext, ScriptedBackend, ScriptedTranscript
from kgwalk.prompts import DECLINE, Stage
from kgwalk.verdict import Verdict

from conftest import KELIDAR_QUESTION, RandomBackend, fence, random_graph, scripted

CFG = AgentConfig(c_max=3, k_max=5)


def step(index=1, flag=True, tuples=frozenset()):
    return ReasoningStep(index, "Kelidar", "genre", frozenset(tuples), f"implication {index}", flag,
                         Attempts(1, 1, 1))


def script(*entries):
    return ScriptedBackend(ScriptedTranscript([(Stage(s), r) for s, r in entries]))


# -- routers -------------------------------------------------------------------

def test_route_anchor(kelidar):
    assert route_anchor("Mahmoud Dowlatabadi", 1, kelidar, CFG) is Route.PROCEED_TO_RELATIONS
    assert route_anchor("Mahmoud Dowlatabadi", 3, kelidar, CFG) is Route.FINALIZE
    assert route_anchor("novel", 1, kelidar, CFG) is Route.RETRY_ANCHOR_PROMPT
    assert route_anchor(None, 2, kelidar, CFG) is Route.RETRY_ANCHOR_PROMPT


def test_route_relations():
    assert route_relations(frozenset()) is Route.BACK_TO_ANCHOR_SELECTION
    assert route_relations({"genre"}) is Route.PROCEED_TO_RELATION_PROMPT


def test_route_relations_unreachable_for_valid_anchor():
    rng = random.Random(8)
    for _ in range(50):
        g = random_graph(rng, 100)
        for anchor in g.entities:
            if has_head(g, anchor):
                assert route_relations(outgoing_relations(g, anchor)) is Route.PROCEED_TO_RELATION_PROMPT


def test_route_relation():
    available = {"genre", "notable work"}
    assert route_relation(DECLINE, 1, available, CFG) is Route.BACK_TO_ANCHOR_PROPOSAL
    assert route_relation("genre", 1, available, CFG) is Route.PROCEED_TO_TUPLES
    assert route_relation("publisher", 1, {"genre"}, CFG) is Route.RETRY_RELATION_PROMPT
    assert route_relation(None, 1, {"genre"}, CFG) is Route.RETRY_RELATION_PROMPT
    assert route_relation("genre", 3, available, CFG) is Route.FINALIZE


def test_route_reasoning():
    t = {Tuple("Kelidar", "genre", "novel")}
    fake = Tuple("Kelidar", "genre", "poem")
    assert route_reasoning(t, 1, t, CFG) is Route.PROCEED_TO_CLEANUP
    assert route_reasoning(set(), 1, t, CFG) is Route.PROCEED_TO_CLEANUP
    assert route_reasoning(t | {fake}, 1, t, CFG) is Route.RETRY_REASONING_PROMPT
    assert route_reasoning(None, 1, t, CFG) is Route.RETRY_REASONING_PROMPT
    assert route_reasoning(t, 3, t, CFG) is Route.FINALIZE


def test_route_after_cleanup():
    assert route_after_cleanup(step(flag=True), 1, CFG) is Route.NEW_REASONING_STEP
    assert route_after_cleanup(step(flag=True), 5, CFG) is Route.FINALIZE
    assert route_after_cleanup(step(flag=False), 1, CFG) is Route.FINALIZE


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(c_max=0)
    with pytest.raises(ValueError):
        AgentConfig(k_max=0)
    with pytest.raises(ValueError):
        AgentConfig(temperature=-0.1)


# -- cleanup -------------------------------------------------------------------

def test_cleanup_resets_context():
    ctx = MessageContext.start("sys", "q")
    for i in range(6):
        ctx.add("user", f"prompt {i} " * 20)
        ctx.add("assistant", f"reply {i} " * 20)
    before = ctx.footprint()
    backend = script(("summarize", "Step 1: a. Step 2: b."))
    new, summary = cleanup(ctx, [step(1), step(2)], backend)
    assert [m.role for m in new.messages] == ["system", "user", "assistant"]
    assert new.messages[2].content == summary == "Step 1: a. Step 2: b."
    assert new.footprint() <= before


def test_cleanup_single_step_verbatim():
    _, summary = cleanup(MessageContext.start("s", "q"), [step(1)], script(("summarize", "Step 1: Kelidar is a novel.")))
    assert summary == "Step 1: Kelidar is a novel."


def test_summary_fills_missing_steps():
    steps = [step(1), step(2, tuples={Tuple("Kelidar", "genre", "novel")})]
    summary = compose_summary("Step 1: covered.", steps)
    assert summary.startswith("Step 1: covered.")
    assert "Step 2: Kelidar --genre--> (Kelidar, genre, novel). implication 2" in summary
    assert compose_summary("", steps).count("Step") == 2
    assert compose_summary("Step 12 only", [step(1)]).endswith("implication 1")


def test_cleanup_requires_steps():
    with pytest.raises(ValueError):
        cleanup(MessageContext.start("s", "q"), [], script(("summarize", "x")))


# -- full runs -------------------------------------------------------------------

def test_kelidar_two_hop_path(kelidar):
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(), scripted("kelidar_path"))
    assert outcome.answer is Verdict.TRUE
    assert [(s.anchor, s.relation) for s in outcome.steps] == [
        ("Mahmoud Dowlatabadi", "notable work"), ("Kelidar", "genre"), ("The Makioka Sisters", "genre")]
    assert outcome.termination_reason is Termination.CONTINUE_FLAG_FALSE
    assert len(outcome.summaries) == len(outcome.steps)
    for s in outcome.steps:
        assert s.selected_tuples <= triples(kelidar, s.anchor, s.relation)
    assert outcome.llm_call_count == 13
    assert outcome.events[1]["messages"][:2] == [
        {"role": "system", "content": outcome.events[1]["messages"][0]["content"]},
        {"role": "user", "content": KELIDAR_QUESTION},
    ]


def test_invalid_anchors_exhaust(kelidar):
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(c_max=3), scripted("invalid_anchor"))
    assert outcome.steps == []
    assert outcome.termination_reason is Termination.ANCHOR_ATTEMPTS_EXHAUSTED
    assert outcome.answer is Verdict.NONE
    calls = [e["stage"] for e in outcome.events if e["kind"] == "llm_call"]
    assert calls == ["anchor_select"] * 3 + ["final_answer"]
    final_prompt = [e for e in outcome.events if e["kind"] == "llm_call"][-1]["messages"][-1]["content"]
    assert "no evidence was gathered" in final_prompt


def test_always_continue_hits_k_max(kelidar):
    rng = random.Random(0)
    backend = RandomBackend(rng, kelidar, "always_continue")
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(k_max=4), backend)
    assert len(outcome.steps) == 4
    assert outcome.termination_reason is Termination.K_MAX_REACHED
    assert backend.calls[-1] is Stage.FINAL_ANSWER


def test_retry_notice_carries_reason(kelidar):
    backend = script(
        ("anchor_select", fence("anchor: novel")),
        ("anchor_select", fence("anchor: Kelidar")),
        ("relation_select", fence("relation: publisher")),
        ("relation_select", fence("relation: 1")),
        ("reasoning_infer", fence("tuples: 3\nimplication: x")),
        ("reasoning_infer", fence("tuples: 1\nimplication: Kelidar is a novel.\ncontinue: no")),
        ("summarize", "Step 1: Kelidar is a novel."),
        ("final_answer", fence("verdict: True")),
    )
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(c_max=3), backend)
    assert outcome.steps[0].attempts == Attempts(2, 2, 2)
    notices = [m["content"] for e in outcome.events if e["kind"] == "llm_call" for m in e["messages"][-1:]
               if m["content"].startswith("That reply was rejected")]
    assert any("'novel' is not a head entity" in n for n in notices)
    assert any("'publisher' is not in the offered relation list" in n for n in notices)
    assert any("tuple numbers [3]" in n for n in notices)


def test_anchor_prompt_added_once_per_step(kelidar):
    backend = script(
        ("anchor_select", fence("anchor: x")),
        ("anchor_select", fence("anchor: y")),
        ("anchor_select", fence("anchor: z")),
        ("final_answer", fence("verdict: None")),
    )
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(c_max=3), backend)
    last_anchor_call = [e for e in outcome.events if e["kind"] == "llm_call"][2]
    anchor_prompts = [m for m in last_anchor_call["messages"] if m["content"].startswith("Select one anchor")]
    assert len(anchor_prompts) == 1


def test_decline_returns_to_anchor_and_shares_relation_budget(kelidar):
    backend = script(
        ("anchor_select", fence("anchor: Mahmoud Dowlatabadi")),
        ("relation_select", fence("relation: none")),
        ("anchor_select", fence("anchor: Kelidar")),
        ("relation_select", fence("relation: genre")),
        ("reasoning_infer", fence("tuples: 1\nimplication: Kelidar is a novel.\ncontinue: no")),
        ("summarize", "Step 1: Kelidar is a novel."),
        ("final_answer", fence("verdict: True")),
    )
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(c_max=3), backend)
    assert outcome.steps[0].anchor == "Kelidar"
    assert outcome.steps[0].attempts == Attempts(2, 2, 1)


def test_declines_exhaust_anchor_budget(kelidar):
    backend = script(
        ("anchor_select", fence("anchor: Kelidar")),
        ("relation_select", fence("relation: none")),
        ("anchor_select", fence("anchor: Kelidar")),
        ("relation_select", fence("relation: none")),
        ("anchor_select", fence("anchor: Kelidar")),
        ("final_answer", fence("verdict: None")),
    )
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(c_max=3), backend)
    assert outcome.termination_reason is Termination.ANCHOR_ATTEMPTS_EXHAUSTED


def test_relation_and_reasoning_exhaustion(kelidar):
    rel = script(
        ("anchor_select", fence("anchor: Kelidar")),
        *[("relation_select", fence("relation: author"))] * 2,
        ("final_answer", fence("verdict: None")),
    )
    assert run(KELIDAR_QUESTION, kelidar, AgentConfig(c_max=2), rel).termination_reason \
        is Termination.RELATION_ATTEMPTS_EXHAUSTED
    rea = script(
        ("anchor_select", fence("anchor: Kelidar")),
        ("relation_select", fence("relation: 1")),
        *[("reasoning_infer", "no block")] * 2,
        ("final_answer", "garbled"),
    )
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(c_max=2), rea)
    assert outcome.termination_reason is Termination.REASONING_ATTEMPTS_EXHAUSTED
    assert outcome.answer is Verdict.NONE


def test_missing_continue_flag_means_continue(kelidar):
    backend = script(
        ("anchor_select", fence("anchor: Kelidar")),
        ("relation_select", fence("relation: 1")),
        ("reasoning_infer", fence("tuples: 1\nimplication: novel")),
        ("summarize", "Step 1: novel"),
        ("final_answer", fence("verdict: True")),
    )
    outcome = run(KELIDAR_QUESTION, kelidar, AgentConfig(k_max=1), backend)
    assert outcome.steps[0].continue_flag is True
    assert outcome.termination_reason is Termination.K_MAX_REACHED


def test_transport_failure_carries_partial_trace(kelidar):
    backend = script(
        ("anchor_select", fence("anchor: Kelidar")),
    )
    with pytest.raises(AgentRunError) as info:
        run(KELIDAR_QUESTION, kelidar, AgentConfig(), backend)
    partial = info.value.outcome
    assert partial.llm_call_count == 2
    assert partial.events[-1]["kind"] == "error"


def test_run_preconditions(kelidar):
    with pytest.raises(ValueError):
        run("  ", kelidar, AgentConfig(), scripted("kelidar_path"))


def test_runs_share_no_state(kelidar):
    first = run(KELIDAR_QUESTION, kelidar, AgentConfig(), scripted("kelidar_stop")).to_dict()
    run(KELIDAR_QUESTION, kelidar, AgentConfig(), scripted("kelidar_path"))
    assert run(KELIDAR_QUESTION, kelidar, AgentConfig(), scripted("kelidar_stop")).to_dict() == first


def test_fuzzed_invariants():
    rng = random.Random(42)
    for i in range(150):
        g = random_graph(rng, 60)
        cfg = AgentConfig(c_max=rng.randint(1, 4), k_max=rng.randint(1, 5))
        outcome = run("q?", g, cfg, RandomBackend(rng, g, rng.choice(["random", "always_continue"])))
        assert len(outcome.steps) <= cfg.k_max
        assert outcome.final_answer_calls == 1
        for s in outcome.steps:
            assert has_head(g, s.anchor)
            assert s.relation in outgoing_relations(g, s.anchor)
            assert s.selected_tuples <= triples(g, s.anchor, s.relation)
            assert max(s.attempts.anchor, s.attempts.relation, s.attempts.reasoning) <= cfg.c_max
        for e in outcome.events:
            if e["kind"] == "route" and e["stage"] != "after_cleanup":
                assert 1 <= e["c"] <= cfg.c_max
