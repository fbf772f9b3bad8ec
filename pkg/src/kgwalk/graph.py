"""In-memory property graph with head and (head, relation) indexes."""
from __future__ import annotations

import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import IO, Iterable, Mapping

FORMATS = ("triples-jsonl", "triples-tsv")


class GraphLoadError(ValueError):
    """Raised when a graph source cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, order=True)
class Tuple:
    """One directed edge ``head -relation-> tail`` with flat string properties."""

    head: str
    relation: str
    tail: str
    properties: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.head or not self.relation:
            raise ValueError("tuple head and relation must be nonempty")
        # canonical order so that equal property maps hash equally
        object.__setattr__(self, "properties", tuple(sorted(dict(self.properties).items())))

    @property
    def props(self) -> dict[str, str]:
        return dict(self.properties)

    def to_record(self) -> dict:
        record: dict = {"h": self.head, "r": self.relation, "t": self.tail}
        if self.properties:
            record["props"] = self.props
        return record


@dataclass(frozen=True)
class PropertyGraph:
    tuples: frozenset[Tuple]
    entities: frozenset[str]
    relations: frozenset[str]
    head_index: Mapping[str, frozenset[str]] = field(repr=False)
    pair_index: Mapping[tuple[str, str], frozenset[Tuple]] = field(repr=False)

    @classmethod
    def from_tuples(cls, tuples: Iterable[Tuple]) -> PropertyGraph:
        tuple_set = frozenset(tuples)
        heads: dict[str, set[str]] = defaultdict(set)
        pairs: dict[tuple[str, str], set[Tuple]] = defaultdict(set)
        entities: set[str] = set()
        for tup in tuple_set:
            heads[tup.head].add(tup.relation)
            pairs[(tup.head, tup.relation)].add(tup)
            entities.add(tup.head)
            entities.add(tup.tail)
        return cls(
            tuples=tuple_set,
            entities=frozenset(entities),
            relations=frozenset(t.relation for t in tuple_set),
            head_index=MappingProxyType({h: frozenset(rs) for h, rs in heads.items()}),
            pair_index=MappingProxyType({k: frozenset(v) for k, v in pairs.items()}),
        )

    def __len__(self) -> int:
        return len(self.tuples)

    @property
    def head_entities(self) -> frozenset[str]:
        return frozenset(self.head_index)


def _check_props(raw: object, line: int) -> dict[str, str]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise GraphLoadError("props must be an object", line)
    for key, value in raw.items():
        if not isinstance(value, str):
            raise GraphLoadError(f"property {key!r} must be a string, got {type(value).__name__}", line)
    return raw


def _parse_jsonl(line_text: str, line: int) -> Tuple:
    try:
        record = json.loads(line_text)
    except json.JSONDecodeError as exc:
        raise GraphLoadError(f"invalid JSON: {exc.msg}", line) from None
    if not isinstance(record, dict):
        raise GraphLoadError("record must be an object", line)
    missing = [k for k in ("h", "r", "t") if k not in record]
    if missing:
        raise GraphLoadError(f"missing key(s) {', '.join(missing)}", line)
    head, relation, tail = record["h"], record["r"], record["t"]
    if not all(isinstance(v, str) for v in (head, relation, tail)):
        raise GraphLoadError("h, r and t must be strings", line)
    if not head or not relation:
        raise GraphLoadError("empty head or relation", line)
    props = _check_props(record.get("props"), line)
    return Tuple(head, relation, tail, tuple(props.items()))


def _parse_tsv(line_text: str, line: int) -> Tuple:
    fields = line_text.split("\t")
    if len(fields) != 3:
        raise GraphLoadError(f"expected 3 tab-separated fields, got {len(fields)}", line)
    head, relation, tail = fields
    if not head or not relation:
        raise GraphLoadError("empty head or relation", line)
    return Tuple(head, relation, tail)


def load_graph(source: IO[bytes] | IO[str], format: str = "triples-jsonl") -> PropertyGraph:
    """Read a graph from a byte (or text) stream.

    Blank lines are skipped. Identical tuples collapse into one.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown graph format {format!r}; expected one of {FORMATS}")
    data = source.read()
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GraphLoadError(f"source is not valid UTF-8: {exc}") from None
    parse = _parse_jsonl if format == "triples-jsonl" else _parse_tsv
    tuples = []
    for number, raw in enumerate(data.split("\n"), start=1):
        if not raw.strip():
            continue
        tuples.append(parse(raw.rstrip("\r"), number))
    if not tuples:
        raise GraphLoadError("empty graph")
    return PropertyGraph.from_tuples(tuples)


def load_graph_file(path: str, format: str | None = None) -> PropertyGraph:
    if format is None:
        format = "triples-tsv" if str(path).endswith(".tsv") else "triples-jsonl"
    with open(path, "rb") as fh:
        return load_graph(fh, format)


def serialize_graph(graph: PropertyGraph, format: str = "triples-jsonl") -> bytes:
    """Inverse of :func:`load_graph`; tuples are written in sorted order."""
    out = io.StringIO()
    for tup in sorted(graph.tuples):
        if format == "triples-jsonl":
            out.write(json.dumps(tup.to_record(), ensure_ascii=False, sort_keys=True))
        elif format == "triples-tsv":
            if tup.properties:
                raise ValueError("triples-tsv cannot carry properties")
            out.write(f"{tup.head}\t{tup.relation}\t{tup.tail}")
        else:
            raise ValueError(f"unknown graph format {format!r}")
        out.write("\n")
    return out.getvalue().encode("utf-8")


def has_head(graph: PropertyGraph, candidate: str | None) -> bool:
    return candidate is not None and candidate in graph.head_index


def outgoing_relations(graph: PropertyGraph, anchor: str) -> frozenset[str]:
    return graph.head_index.get(anchor, frozenset())


def triples(graph: PropertyGraph, anchor: str, relation: str) -> frozenset[Tuple]:
    return graph.pair_index.get((anchor, relation), frozenset())
