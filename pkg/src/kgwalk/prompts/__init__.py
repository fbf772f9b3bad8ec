"""Prompt templates for each agent stage and strict parsers for the replies.

Reply grammar
-------------
The model must answer with a fenced block (three backticks, optional language
tag) holding ``key: value`` lines. When several blocks are present the last one
wins; anything outside it is ignored. Lines that do not start with a known key
continue the previous value.

==================  ==========================================================
stage               keys
==================  ==========================================================
anchor_select       ``anchor`` (entity label)
relation_select     ``relation`` (1-based number from the offered list, an
                    exact label, or ``none``/``decline``)
reasoning_infer     ``tuples`` (comma separated numbers, may be empty),
                    ``implication`` (text), ``continue`` (yes/no, optional)
final_answer        ``verdict`` (exactly ``True``, ``False`` or ``None``),
                    ``justification`` (text, optional)
==================  ==========================================================
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from kgwalk.graph import Tuple
from kgwalk.verdict import Verdict

PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
KEY_LINE = re.compile(r"^\s*([A-Za-z_]+)\s*:\s*(.*)$")

DEFAULT_PACK_VERSION = "v1"


class Stage(str, Enum):
    SYSTEM = "system"
    ANCHOR_SELECT = "anchor_select"
    RELATION_SELECT = "relation_select"
    REASONING_INFER = "reasoning_infer"
    SUMMARIZE = "summarize"
    FINAL_ANSWER = "final_answer"
    RETRY_NOTICE = "retry_notice"


# Stages that correspond to an LLM call (a transcript entry).
CALL_STAGES = (
    Stage.ANCHOR_SELECT,
    Stage.RELATION_SELECT,
    Stage.REASONING_INFER,
    Stage.SUMMARIZE,
    Stage.FINAL_ANSWER,
)

STAGE_PLACEHOLDERS: dict[Stage, frozenset[str]] = {
    Stage.SYSTEM: frozenset(),
    Stage.ANCHOR_SELECT: frozenset({"query"}),
    Stage.RELATION_SELECT: frozenset({"anchor", "relations"}),
    Stage.REASONING_INFER: frozenset({"anchor", "relation", "tuples"}),
    Stage.SUMMARIZE: frozenset({"steps"}),
    Stage.FINAL_ANSWER: frozenset({"query", "summaries"}),
    Stage.RETRY_NOTICE: frozenset({"reason"}),
}


class TemplateError(ValueError):
    pass


class RenderError(KeyError):
    def __init__(self, placeholder: str, stage: Stage):
        self.placeholder = placeholder
        super().__init__(f"missing binding for placeholder {{{{{placeholder}}}}} in stage {stage.value}")


class ParseFailure(ValueError):
    """The reply has no usable structured block for the requested stage."""


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    body: str

    def __post_init__(self) -> None:
        found = set(PLACEHOLDER.findall(self.body))
        expected = STAGE_PLACEHOLDERS[self.stage]
        if found != expected:
            missing, extra = sorted(expected - found), sorted(found - expected)
            raise TemplateError(
                f"{self.stage.value} template placeholders mismatch: missing={missing} unexpected={extra}"
            )

    @property
    def placeholders(self) -> frozenset[str]:
        return STAGE_PLACEHOLDERS[self.stage]


@dataclass(frozen=True)
class PromptPack:
    version: str
    templates: Mapping[Stage, PromptTemplate]

    @property
    def hash(self) -> str:
        digest = hashlib.sha256()
        for stage in Stage:
            digest.update(stage.value.encode())
            digest.update(b"\0")
            digest.update(self.templates[stage].body.encode("utf-8"))
            digest.update(b"\0")
        return digest.hexdigest()

    def __getitem__(self, stage: Stage) -> PromptTemplate:
        return self.templates[stage]


def load_pack(directory: str | Path, version: str | None = None) -> PromptPack:
    """Load ``<stage>.txt`` for every stage from ``directory``."""
    directory = Path(directory)
    templates = {}
    for stage in Stage:
        path = directory / f"{stage.value}.txt"
        if not path.is_file():
            raise TemplateError(f"prompt pack {directory} lacks {path.name}")
        templates[stage] = PromptTemplate(stage, path.read_text(encoding="utf-8"))
    return PromptPack(version or directory.name, templates)


def default_pack() -> PromptPack:
    root = resources.files("kgwalk.prompts").joinpath(DEFAULT_PACK_VERSION)
    templates = {
        stage: PromptTemplate(stage, root.joinpath(f"{stage.value}.txt").read_text(encoding="utf-8"))
        for stage in Stage
    }
    return PromptPack(DEFAULT_PACK_VERSION, templates)


# -- rendering ---------------------------------------------------------------

def tuple_key(tup: Tuple) -> tuple:
    return (tup.head, tup.relation, tup.tail, tup.properties)


def order_relations(relations: Iterable[str]) -> list[str]:
    """Order in which relations are numbered in prompts and resolved in replies."""
    return sorted(set(relations))


def order_tuples(tuples: Iterable[Tuple]) -> list[Tuple]:
    return sorted(set(tuples), key=tuple_key)


def format_tuple(tup: Tuple) -> str:
    text = f"({tup.head}, {tup.relation}, {tup.tail})"
    if tup.properties:
        text += " [" + "; ".join(f"{k}: {v}" for k, v in tup.properties) + "]"
    return text


def numbered(lines: Sequence[str]) -> str:
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1))


def _format_binding(value: object) -> str:
    if isinstance(value, str):
        return value
    items = list(value)  # type: ignore[call-overload]
    if items and all(isinstance(item, Tuple) for item in items):
        return numbered([format_tuple(t) for t in order_tuples(items)])
    return numbered(order_relations(str(item) for item in items))


def render(template: PromptTemplate, bindings: Mapping[str, object]) -> str:
    """Substitute ``{{name}}`` placeholders.

    String values are inserted as-is. Collections of relation labels or of
    tuples become numbered lists in the order given by :func:`order_relations`
    and :func:`order_tuples`, so reply numbers can be resolved back.
    """
    for name in sorted(template.placeholders):
        if name not in bindings:
            raise RenderError(name, template.stage)
    rendered = {name: _format_binding(bindings[name]) for name in template.placeholders}
    return PLACEHOLDER.sub(lambda m: rendered[m.group(1)], template.body)


# -- parsing -----------------------------------------------------------------

class _Decline:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DECLINE"


DECLINE = _Decline()
DECLINE_TOKENS = frozenset({"none", "decline", "no relation"})


@dataclass(frozen=True)
class AnchorReply:
    anchor: str


@dataclass(frozen=True)
class RelationReply:
    relation: str | _Decline

    @property
    def declined(self) -> bool:
        return self.relation is DECLINE


@dataclass(frozen=True)
class ReasoningReply:
    indices: tuple[int, ...]
    selected: tuple[Tuple, ...]
    implication: str
    continue_flag: bool | None


@dataclass(frozen=True)
class VerdictReply:
    verdict: Verdict
    justification: str


STAGE_KEYS = {
    Stage.ANCHOR_SELECT: ("anchor",),
    Stage.RELATION_SELECT: ("relation",),
    Stage.REASONING_INFER: ("tuples", "implication", "continue"),
    Stage.FINAL_ANSWER: ("verdict", "justification"),
}

_TRUE_FLAGS = frozenset({"yes", "true", "1", "continue"})
_FALSE_FLAGS = frozenset({"no", "false", "0", "stop"})


def structured_block(raw: str) -> str:
    blocks = FENCE.findall(raw)
    if not blocks:
        raise ParseFailure("no fenced structured block found")
    return blocks[-1]


def _fields(block: str, keys: Sequence[str]) -> dict[str, str]:
    fields: dict[str, list[str]] = {}
    current = None
    for line in block.splitlines():
        match = KEY_LINE.match(line)
        if match and match.group(1).lower() in keys:
            current = match.group(1).lower()
            fields[current] = [match.group(2)]
        elif current is not None and line.strip():
            fields[current].append(line.strip())
    return {k: " ".join(part.strip() for part in v if part.strip()) for k, v in fields.items()}


def _label(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'`":
        value = value[1:-1].strip()
    return value


def _parse_indices(value: str) -> tuple[int, ...]:
    value = value.strip().strip("[]")
    if not value or value.lower() == "none":
        return ()
    indices = []
    for token in re.split(r"[,\s]+", value):
        if not token:
            continue
        if not token.isdigit():
            raise ParseFailure(f"tuple reference {token!r} is not a number")
        indices.append(int(token))
    return tuple(dict.fromkeys(indices))


def parse_reply(stage: Stage, raw: str, offered: Sequence = ()):
    """Parse ``raw`` into the typed reply for ``stage``.

    ``offered`` is the list shown to the model in its numbered order: relation
    labels for ``relation_select`` and tuples for ``reasoning_infer``.
    Raises :class:`ParseFailure` when the reply does not follow the grammar.
    """
    stage = Stage(stage)
    if stage not in STAGE_KEYS:
        raise ValueError(f"stage {stage.value} has no structured reply")
    fields = _fields(structured_block(raw), STAGE_KEYS[stage])

    if stage is Stage.ANCHOR_SELECT:
        anchor = _label(fields.get("anchor", ""))
        if not anchor:
            raise ParseFailure("no anchor given")
        return AnchorReply(anchor)

    if stage is Stage.RELATION_SELECT:
        if "relation" not in fields:
            raise ParseFailure("no relation given")
        value = _label(fields["relation"])
        if not value:
            raise ParseFailure("no relation given")
        if value.lower() in DECLINE_TOKENS:
            return RelationReply(DECLINE)
        number = value.rstrip(".")
        if number.isdigit() and 1 <= int(number) <= len(offered):
            return RelationReply(offered[int(number) - 1])
        return RelationReply(value)

    if stage is Stage.REASONING_INFER:
        if "tuples" not in fields:
            raise ParseFailure("no tuples line given")
        implication = fields.get("implication", "").strip()
        if not implication:
            raise ParseFailure("no implication given")
        indices = _parse_indices(fields["tuples"])
        flag_text = fields.get("continue", "").strip().lower()
        if not flag_text:
            flag = None
        elif flag_text in _TRUE_FLAGS:
            flag = True
        elif flag_text in _FALSE_FLAGS:
            flag = False
        else:
            raise ParseFailure(f"continue flag {flag_text!r} is not yes/no")
        selected = tuple(offered[i - 1] for i in indices if 1 <= i <= len(offered))
        return ReasoningReply(indices, selected, implication, flag)

    token = fields.get("verdict", "").strip()
    try:
        verdict = Verdict(token)
    except ValueError:
        raise ParseFailure(f"verdict {token!r} is not one of True, False, None") from None
    return VerdictReply(verdict, fields.get("justification", "").strip())


def parse_final(raw: str) -> VerdictReply:
    """Total version of the final-answer parser: failures become ``None``."""
    try:
        return parse_reply(Stage.FINAL_ANSWER, raw)
    except ParseFailure:
        return VerdictReply(Verdict.NONE, raw.strip())
