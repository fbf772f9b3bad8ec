"""Run traces: JSON export, loading, and a readable narrative.

Trace document (``schema_version`` 1)::

    {
      "schema_version": 1,
      "query": str,
      "model": str,
      "config": {c_max, k_max, temperature, seed, max_output_tokens},
      "prompt_pack": {"version": str, "hash": sha256 hex},
      "outcome": {answer, justification, termination_reason, llm_call_count,
                  steps: [...], summaries: [...], events: [...]},
      "redacted": bool,
      "timing": {"event_times": [unix seconds per event seq]}
    }

Every event carries ``seq``, ``kind`` and the step index ``k``. Kinds:
``init``, ``llm_call`` (stage, messages, response), ``route`` (stage, c,
route, plus candidate/selection), ``cleanup`` (summary, context size),
``final`` and ``error``. Everything except ``timing`` is deterministic for a
scripted backend.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from kgwalk.agent import AgentConfig, AgentOutcome
from kgwalk.prompts import PromptPack

SCHEMA_VERSION = 1
REDACTED = "[redacted]"


class TraceSchemaError(ValueError):
    pass


def build_trace(
    query: str,
    outcome: AgentOutcome,
    config: AgentConfig,
    pack: PromptPack,
    model: str,
    redact: bool = False,
) -> dict:
    body = copy.deepcopy(outcome.to_dict())
    if redact:
        for event in body["events"]:
            if event["kind"] == "llm_call":
                event["messages"] = [{"role": m["role"], "content": REDACTED} for m in event["messages"]]
                if "response" in event:
                    event["response"] = REDACTED
    return {
        "schema_version": SCHEMA_VERSION,
        "query": query,
        "model": model,
        "config": config.to_dict(),
        "prompt_pack": {"version": pack.version, "hash": pack.hash},
        "outcome": body,
        "redacted": redact,
        "timing": {"event_times": list(outcome.timings)},
    }


def deterministic_view(trace: dict) -> dict:
    return {k: v for k, v in trace.items() if k != "timing"}


def dumps(trace: dict) -> str:
    return json.dumps(trace, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def write_trace(trace: dict, path: str | Path) -> None:
    Path(path).write_text(dumps(trace), encoding="utf-8")


def load_trace(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraceSchemaError(f"trace {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise TraceSchemaError(f"trace {path} has no schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise TraceSchemaError(
            f"trace schema version {doc['schema_version']} is not supported (expected {SCHEMA_VERSION})"
        )
    for key in ("query", "config", "outcome"):
        if key not in doc:
            raise TraceSchemaError(f"trace {path} lacks {key!r}")
    return doc


def _short(text: str, limit: int = 160) -> str:
    text = " ".join(str(text).split())
    return text if len(text) <= limit else text[: limit - 3] + "..."


def narrative(trace: dict) -> str:
    """Human-readable account of a run; same trace, same bytes."""
    out = trace["outcome"]
    cfg = trace["config"]
    lines = [
        f"Question: {trace['query']}",
        f"Model: {trace.get('model', '?')}  c_max={cfg['c_max']}  k_max={cfg['k_max']}  "
        f"temperature={cfg['temperature']}",
        "",
    ]
    for event in out["events"]:
        kind = event["kind"]
        prefix = f"[{event['seq']:03d}] k={event['k']}"
        if kind == "llm_call":
            lines.append(f"{prefix} call {event['stage']}: {_short(event.get('response', '<no response>'))}")
        elif kind == "route":
            detail = ""
            if "candidate" in event:
                detail = f" candidate={event['candidate']!r}"
            elif "selection" in event:
                detail = f" selection={event['selection']}"
            elif "count" in event:
                detail = f" relations={event['count']}"
            elif "continue_flag" in event:
                detail = f" continue={event['continue_flag']}"
            lines.append(f"{prefix} route {event['stage']} attempt {event['c']}{detail} -> {event['route']}")
        elif kind == "cleanup":
            lines.append(f"{prefix} summary ({event['context_messages']} messages kept): {_short(event['summary'])}")
        elif kind == "final":
            lines.append(f"{prefix} final answer {event['answer']} (termination: {event['termination']})")
        elif kind == "error":
            lines.append(f"{prefix} error: {event['error']}")
        elif kind == "init":
            lines.append(f"{prefix} start")
    lines.append("")
    for step in out["steps"]:
        lines.append(f"Step {step['index']}: {step['anchor']} --{step['relation']}--> "
                     f"{len(step['selected_tuples'])} tuple(s); {step['implication']}")
    lines.append(f"Answer: {out['answer']}")
    if out.get("justification"):
        lines.append(f"Justification: {out['justification']}")
    lines.append(f"Termination: {out['termination_reason']}; LLM calls: {out['llm_call_count']}")
    return "\n".join(lines) + "\n"
