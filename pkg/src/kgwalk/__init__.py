"""Knowledge-graph exploration agent for yes/no question answering."""

from kgwalk.agent import AgentConfig, AgentOutcome, AgentRunError, ReasoningStep, Route, Termination, run
from kgwalk.graph import PropertyGraph, Tuple, has_head, load_graph, outgoing_relations, triples
from kgwalk.verdict import Verdict

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "AgentOutcome",
    "AgentRunError",
    "PropertyGraph",
    "ReasoningStep",
    "Route",
    "Termination",
    "Tuple",
    "Verdict",
    "has_head",
    "load_graph",
    "outgoing_relations",
    "run",
    "triples",
]
