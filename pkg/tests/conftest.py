from __future__ import annotations

import random
from pathlib import Path

import pytest

from kgwalk.graph import PropertyGraph, Tuple, load_graph
from kgwalk.llm import CompletionParams, MessageContext, ScriptedBackend, load_transcript
from kgwalk.prompts import Stage

FIXTURES = Path(__file__).parent / "fixtures"
KELIDAR_QUESTION = "Are any of Mahmoud Dowlatabadi's works in the genre of The Makioka Sisters?"


def fence(body: str) -> str:
    return f"```\n{body}\n```"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def kelidar() -> PropertyGraph:
    with open(FIXTURES / "kelidar.jsonl", "rb") as fh:
        return load_graph(fh, "triples-jsonl")


def scripted(name: str) -> ScriptedBackend:
    with open(FIXTURES / f"transcript_{name}.json", "rb") as fh:
        return ScriptedBackend(load_transcript(fh))


def random_graph(rng: random.Random, max_tuples: int = 200, entities: int | None = None) -> PropertyGraph:
    n_entities = entities or rng.randint(2, max(3, max_tuples // 3))
    n_relations = rng.randint(1, 8)
    tuples = []
    for _ in range(rng.randint(1, max_tuples)):
        props = ()
        if rng.random() < 0.2:
            props = (("start time", str(rng.randint(1900, 2020))),)
        tuples.append(Tuple(f"e{rng.randrange(n_entities)}", f"r{rng.randrange(n_relations)}",
                            f"e{rng.randrange(n_entities)}", props))
    return PropertyGraph.from_tuples(tuples)


class RandomBackend:
    """Stage-aware random replier used to fuzz the agent loop.

    ``mode`` is ``random``, ``always_invalid`` (never a head entity) or
    ``always_continue`` (valid choices, continue flag always yes).
    """

    supports_temperature = False

    def __init__(self, rng: random.Random, graph: PropertyGraph, mode: str = "random"):
        self.rng = rng
        self.graph = graph
        self.mode = mode
        self.model = f"random-{mode}"
        self.heads = sorted(graph.head_index)
        self.non_heads = sorted(graph.entities - graph.head_index.keys()) or ["no such entity"]
        self.calls: list[Stage] = []
        self.contexts: list[list[dict]] = []

    def complete(self, context: MessageContext, params: CompletionParams, stage: Stage | None = None) -> str:
        self.calls.append(stage)
        self.contexts.append(context.to_list())
        rng = self.rng
        if stage is Stage.ANCHOR_SELECT:
            if self.mode == "always_invalid":
                return fence(f"anchor: {rng.choice(self.non_heads)}_x")
            if self.mode == "always_continue" or rng.random() < 0.6:
                return fence(f"anchor: {rng.choice(self.heads)}")
            return rng.choice([fence(f"anchor: {rng.choice(self.non_heads)}"), "no block", fence("anchor:")])
        if stage is Stage.RELATION_SELECT:
            if self.mode == "always_continue":
                return fence("relation: 1")
            return rng.choice([fence(f"relation: {rng.randint(1, 4)}"), fence("relation: none"),
                               fence("relation: bogus"), "garbage", fence(f"relation: r{rng.randrange(8)}")])
        if stage is Stage.REASONING_INFER:
            if self.mode == "always_continue":
                return fence("tuples: 1\nimplication: keep going\ncontinue: yes")
            picks = ", ".join(str(rng.randint(1, 4)) for _ in range(rng.randint(0, 3)))
            flag = rng.choice(["yes", "no", "", "maybe"])
            return rng.choice([
                fence(f"tuples: {picks}\nimplication: something follows\ncontinue: {flag}"),
                fence(f"tuples: {picks}\nimplication: ok"),
                "unstructured musing",
            ])
        if stage is Stage.SUMMARIZE:
            return rng.choice(["Step 1: something.", "A summary without indices.", ""])
        return rng.choice([fence("verdict: True"), fence("verdict: False"), fence("verdict: None"), "dunno"])


_acceptance_results: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _acceptance_results[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_results):
        title, status = _acceptance_results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
