"""The iterative exploration loop: anchor -> relation -> tuples -> reasoning -> cleanup."""
from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import AbstractSet, Sequence

from kgwalk.graph import PropertyGraph, Tuple, has_head, outgoing_relations, triples
from kgwalk.llm import CompletionParams, LlmBackend, LlmError, MessageContext
from kgwalk.prompts import (
    DECLINE,
    ParseFailure,
    PromptPack,
    Stage,
    default_pack,
    format_tuple,
    order_relations,
    order_tuples,
    parse_final,
    parse_reply,
    render,
)
from kgwalk.verdict import Verdict

DEFAULT_C_MAX = 3
DEFAULT_K_MAX = 10


@dataclass(frozen=True)
class AgentConfig:
    c_max: int = DEFAULT_C_MAX
    k_max: int = DEFAULT_K_MAX
    temperature: float = 0.0
    seed: int | None = None
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.c_max < 1:
            raise ValueError("c_max must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def params(self) -> CompletionParams:
        return CompletionParams(self.temperature, self.max_output_tokens, self.seed)

    @property
    def call_budget(self) -> int:
        return self.k_max * (3 * self.c_max + 1) + 2

    def to_dict(self) -> dict:
        return {
            "c_max": self.c_max,
            "k_max": self.k_max,
            "temperature": self.temperature,
            "seed": self.seed,
            "max_output_tokens": self.max_output_tokens,
        }


class Route(str, Enum):
    FINALIZE = "finalize"
    PROCEED_TO_RELATIONS = "proceed_to_relations"
    RETRY_ANCHOR_PROMPT = "retry_anchor_prompt"
    BACK_TO_ANCHOR_SELECTION = "back_to_anchor_selection"
    PROCEED_TO_RELATION_PROMPT = "proceed_to_relation_prompt"
    BACK_TO_ANCHOR_PROPOSAL = "back_to_anchor_proposal"
    PROCEED_TO_TUPLES = "proceed_to_tuples"
    RETRY_RELATION_PROMPT = "retry_relation_prompt"
    PROCEED_TO_CLEANUP = "proceed_to_cleanup"
    RETRY_REASONING_PROMPT = "retry_reasoning_prompt"
    NEW_REASONING_STEP = "new_reasoning_step"


class Termination(str, Enum):
    CONTINUE_FLAG_FALSE = "continue_flag_false"
    K_MAX_REACHED = "k_max_reached"
    ANCHOR_ATTEMPTS_EXHAUSTED = "anchor_attempts_exhausted"
    RELATION_ATTEMPTS_EXHAUSTED = "relation_attempts_exhausted"
    REASONING_ATTEMPTS_EXHAUSTED = "reasoning_attempts_exhausted"


@dataclass(frozen=True)
class Attempts:
    anchor: int
    relation: int
    reasoning: int


@dataclass(frozen=True)
class ReasoningStep:
    index: int
    anchor: str
    relation: str
    selected_tuples: frozenset[Tuple]
    implication: str
    continue_flag: bool
    attempts: Attempts

    def digest(self) -> str:
        evidence = "; ".join(format_tuple(t) for t in order_tuples(self.selected_tuples)) or "no tuples selected"
        return f"Step {self.index}: {self.anchor} --{self.relation}--> {evidence}. {self.implication}"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "anchor": self.anchor,
            "relation": self.relation,
            "selected_tuples": [t.to_record() for t in order_tuples(self.selected_tuples)],
            "implication": self.implication,
            "continue_flag": self.continue_flag,
            "attempts": {"anchor": self.attempts.anchor, "relation": self.attempts.relation,
                         "reasoning": self.attempts.reasoning},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ReasoningStep:
        return cls(
            index=doc["index"],
            anchor=doc["anchor"],
            relation=doc["relation"],
            selected_tuples=frozenset(
                Tuple(r["h"], r["r"], r["t"], tuple(r.get("props", {}).items())) for r in doc["selected_tuples"]
            ),
            implication=doc["implication"],
            continue_flag=doc["continue_flag"],
            attempts=Attempts(**doc["attempts"]),
        )


@dataclass
class AgentOutcome:
    answer: Verdict
    justification: str
    steps: list[ReasoningStep]
    summaries: list[str]
    termination_reason: Termination | None
    llm_call_count: int
    events: list[dict] = field(default_factory=list)
    timings: list[float] = field(default_factory=list, repr=False)

    @property
    def final_answer_calls(self) -> int:
        return sum(1 for e in self.events if e["kind"] == "llm_call" and e["stage"] == Stage.FINAL_ANSWER.value)

    def to_dict(self) -> dict:
        """Deterministic part of the outcome (wall-clock timings excluded)."""
        return {
            "answer": self.answer.value,
            "justification": self.justification,
            "termination_reason": self.termination_reason.value if self.termination_reason else None,
            "llm_call_count": self.llm_call_count,
            "steps": [s.to_dict() for s in self.steps],
            "summaries": list(self.summaries),
            "events": self.events,
        }


class AgentRunError(RuntimeError):
    """The backend failed mid-run; ``outcome`` holds the partial trace."""

    def __init__(self, message: str, outcome: AgentOutcome):
        self.outcome = outcome
        super().__init__(message)


# -- routing -------------------------------------------------------------------

def route_anchor(candidate: str | None, c: int, graph: PropertyGraph, config: AgentConfig) -> Route:
    if c >= config.c_max:
        return Route.FINALIZE
    if has_head(graph, candidate):
        return Route.PROCEED_TO_RELATIONS
    return Route.RETRY_ANCHOR_PROMPT


def route_relations(relations: AbstractSet[str]) -> Route:
    if not relations:
        return Route.BACK_TO_ANCHOR_SELECTION
    return Route.PROCEED_TO_RELATION_PROMPT


def route_relation(candidate, c: int, available: AbstractSet[str], config: AgentConfig) -> Route:
    """``candidate`` is a relation label, ``DECLINE``, or ``None`` when unparseable."""
    if c >= config.c_max:
        return Route.FINALIZE
    if candidate is DECLINE:
        return Route.BACK_TO_ANCHOR_PROPOSAL
    if candidate is not None and candidate in available:
        return Route.PROCEED_TO_TUPLES
    return Route.RETRY_RELATION_PROMPT


def route_reasoning(selection: AbstractSet | None, c: int, available: AbstractSet, config: AgentConfig) -> Route:
    """Works on tuples or on tuple numbers alike; ``None`` means unparseable."""
    if c >= config.c_max:
        return Route.FINALIZE
    if selection is not None and set(selection) <= set(available):
        return Route.PROCEED_TO_CLEANUP
    return Route.RETRY_REASONING_PROMPT


def route_after_cleanup(step: ReasoningStep, k: int, config: AgentConfig) -> Route:
    if k >= config.k_max:
        return Route.FINALIZE
    if step.continue_flag:
        return Route.NEW_REASONING_STEP
    return Route.FINALIZE


# -- cleanup -------------------------------------------------------------------

def _mentions_step(summary: str, index: int) -> bool:
    return re.search(rf"\bstep\s*{index}(?!\d)", summary, re.IGNORECASE) is not None


def compose_summary(reply: str, steps: Sequence[ReasoningStep]) -> str:
    """Use the model's summary, appending digests for any step it left out."""
    summary = reply.strip()
    missing = [s.digest() for s in steps if not _mentions_step(summary, s.index)]
    return "\n".join([summary, *missing]) if summary else "\n".join(missing)


def cleanup(
    context: MessageContext,
    steps: Sequence[ReasoningStep],
    backend: LlmBackend,
    params: CompletionParams | None = None,
    pack: PromptPack | None = None,
) -> tuple[MessageContext, str]:
    """Summarize every step so far, then reset to [system, query, summary]."""
    if not steps:
        raise ValueError("cleanup needs at least one reasoning step")
    pack = pack or default_pack()
    prompt = render(pack[Stage.SUMMARIZE], {"steps": "\n".join(s.digest() for s in steps)})
    request = MessageContext(list(context.messages))
    request.add("user", prompt)
    reply = backend.complete(request, params or CompletionParams(), Stage.SUMMARIZE)
    summary = compose_summary(reply, steps)
    reset = MessageContext(list(context.messages[:2]))
    reset.add("assistant", summary)
    return reset, summary


# -- the loop ------------------------------------------------------------------

class _Recorder:
    """Backend proxy that logs every call into the run's event list."""

    def __init__(self, backend: LlmBackend, run: _Run):
        self.backend = backend
        self.run = run
        self.model = backend.model
        self.supports_temperature = backend.supports_temperature
        self.calls = 0

    def complete(self, context: MessageContext, params: CompletionParams, stage: Stage | None = None) -> str:
        event = self.run.event(
            "llm_call",
            stage=Stage(stage).value if stage else None,
            messages=context.to_list(),
        )
        self.calls += 1
        response = self.backend.complete(context, params, stage)
        event["response"] = response
        return response


class _Run:
    def __init__(self, query: str, graph: PropertyGraph, config: AgentConfig, backend: LlmBackend,
                 pack: PromptPack):
        self.query = query
        self.graph = graph
        self.config = config
        self.pack = pack
        self.params = config.params
        self.backend = _Recorder(backend, self)
        self.events: list[dict] = []
        self.timings: list[float] = []
        self.steps: list[ReasoningStep] = []
        self.summaries: list[str] = []
        self.k = 0
        self.context = MessageContext.start(render(pack[Stage.SYSTEM], {}), query)
        self.termination: Termination | None = None
        self.answer = Verdict.NONE
        self.justification = ""

    def event(self, kind: str, **data) -> dict:
        record = {"seq": len(self.events), "kind": kind, "k": self.k, **data}
        self.events.append(record)
        self.timings.append(time.time())
        return record

    def outcome(self) -> AgentOutcome:
        return AgentOutcome(
            answer=self.answer,
            justification=self.justification,
            steps=list(self.steps),
            summaries=list(self.summaries),
            termination_reason=self.termination,
            llm_call_count=self.backend.calls,
            events=self.events,
            timings=self.timings,
        )

    def ask(self, stage: Stage) -> str:
        reply = self.backend.complete(self.context, self.params, stage)
        self.context.add("assistant", reply)
        return reply

    def prompt(self, stage: Stage, **bindings) -> None:
        self.context.add("user", render(self.pack[stage], bindings))

    def route(self, stage: str, c: int, route: Route, **data) -> Route:
        self.event("route", stage=stage, c=c, route=route.value, **data)
        return route

    def execute(self) -> AgentOutcome:
        self.event("init", query=self.query, config=self.config.to_dict())
        try:
            self.termination = self.explore()
            self.finalize()
        except LlmError as exc:
            self.event("error", error=f"{type(exc).__name__}: {exc}")
            raise AgentRunError(str(exc), self.outcome()) from exc
        return self.outcome()

    def explore(self) -> Termination:
        while True:
            self.k += 1
            result = self.reasoning_step()
            if isinstance(result, Termination):
                return result
            self.steps.append(result)
            self.do_cleanup()
            route = self.route("after_cleanup", 0, route_after_cleanup(result, self.k, self.config),
                               continue_flag=result.continue_flag)
            if route is Route.FINALIZE:
                return Termination.CONTINUE_FLAG_FALSE if not result.continue_flag else Termination.K_MAX_REACHED

    def reasoning_step(self) -> ReasoningStep | Termination:
        c_anchor = c_relation = c_reasoning = 0
        self.prompt(Stage.ANCHOR_SELECT, query=self.query)
        while True:
            c_anchor += 1
            raw = self.ask(Stage.ANCHOR_SELECT)
            try:
                anchor = parse_reply(Stage.ANCHOR_SELECT, raw).anchor
                reason = f"{anchor!r} is not a head entity in the graph"
            except ParseFailure as exc:
                anchor, reason = None, str(exc)
            route = self.route("anchor", c_anchor, route_anchor(anchor, c_anchor, self.graph, self.config),
                               candidate=anchor)
            if route is Route.FINALIZE:
                return Termination.ANCHOR_ATTEMPTS_EXHAUSTED
            if route is Route.RETRY_ANCHOR_PROMPT:
                self.prompt(Stage.RETRY_NOTICE, reason=reason)
                continue

            relations = outgoing_relations(self.graph, anchor)
            if self.route("relations", c_anchor, route_relations(relations),
                          count=len(relations)) is Route.BACK_TO_ANCHOR_SELECTION:
                self.prompt(Stage.RETRY_NOTICE, reason=f"{anchor!r} has no outgoing relations")
                continue

            offered = order_relations(relations)
            self.prompt(Stage.RELATION_SELECT, anchor=anchor, relations=offered)
            relation = None
            while True:
                c_relation += 1
                raw = self.ask(Stage.RELATION_SELECT)
                try:
                    candidate = parse_reply(Stage.RELATION_SELECT, raw, offered).relation
                    reason = f"{candidate!r} is not in the offered relation list"
                except ParseFailure as exc:
                    candidate, reason = None, str(exc)
                route = self.route("relation", c_relation,
                                   route_relation(candidate, c_relation, relations, self.config),
                                   candidate=None if candidate is None else str(candidate))
                if route is Route.FINALIZE:
                    return Termination.RELATION_ATTEMPTS_EXHAUSTED
                if route is Route.RETRY_RELATION_PROMPT:
                    self.prompt(Stage.RETRY_NOTICE, reason=reason)
                    continue
                if route is Route.PROCEED_TO_TUPLES:
                    relation = candidate
                break
            if relation is None:
                self.prompt(Stage.RETRY_NOTICE, reason=f"no relation of {anchor!r} was chosen; "
                                                       "propose a different anchor entity")
                continue

            available = triples(self.graph, anchor, relation)
            tuple_list = order_tuples(available)
            numbers = set(range(1, len(tuple_list) + 1))
            self.prompt(Stage.REASONING_INFER, anchor=anchor, relation=relation, tuples=tuple_list)
            while True:
                c_reasoning += 1
                raw = self.ask(Stage.REASONING_INFER)
                try:
                    reply = parse_reply(Stage.REASONING_INFER, raw, tuple_list)
                    selection = set(reply.indices)
                    reason = f"tuple numbers {sorted(selection - numbers)} are not in the offered list"
                except ParseFailure as exc:
                    reply, selection, reason = None, None, str(exc)
                route = self.route("reasoning", c_reasoning,
                                   route_reasoning(selection, c_reasoning, numbers, self.config),
                                   selection=None if selection is None else sorted(selection))
                if route is Route.FINALIZE:
                    return Termination.REASONING_ATTEMPTS_EXHAUSTED
                if route is Route.RETRY_REASONING_PROMPT:
                    self.prompt(Stage.RETRY_NOTICE, reason=reason)
                    continue
                flag = reply.continue_flag if reply.continue_flag is not None else True
                return ReasoningStep(
                    index=self.k,
                    anchor=anchor,
                    relation=relation,
                    selected_tuples=frozenset(reply.selected),
                    implication=reply.implication,
                    continue_flag=flag,
                    attempts=Attempts(c_anchor, c_relation, c_reasoning),
                )

    def do_cleanup(self) -> None:
        before = self.context.footprint()
        self.context, summary = cleanup(self.context, self.steps, self.backend, self.params, self.pack)
        self.summaries.append(summary)
        self.event("cleanup", summary=summary, context_messages=len(self.context),
                   footprint_before=before, footprint_after=self.context.footprint())

    def finalize(self) -> None:
        evidence = self.summaries[-1] if self.summaries else "(no evidence was gathered from the knowledge graph)"
        self.context = MessageContext(list(self.context.messages[:2]))
        self.prompt(Stage.FINAL_ANSWER, query=self.query, summaries=evidence)
        raw = self.ask(Stage.FINAL_ANSWER)
        reply = parse_final(raw)
        self.answer, self.justification = reply.verdict, reply.justification
        self.event("final", answer=self.answer.value, termination=self.termination.value)


def run(
    query: str,
    graph: PropertyGraph,
    config: AgentConfig,
    backend: LlmBackend,
    pack: PromptPack | None = None,
) -> AgentOutcome:
    """Answer ``query`` by exploring ``graph`` with ``backend``.

    Raises :class:`AgentRunError` (carrying the partial outcome) when the
    backend fails.
    """
    if not query or not query.strip():
        raise ValueError("query must be nonempty")
    if not graph.tuples:
        raise ValueError("graph must be nonempty")
    return _Run(query, graph, config, backend, pack or default_pack()).execute()
