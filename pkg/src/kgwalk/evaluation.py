"""Dataset loading, batch runs and the answer-rate / accuracy / reliability metrics."""
from __future__ import annotations

import json
import logging
import math
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import IO, Callable, Iterable, Sequence

from kgwalk.agent import AgentConfig, AgentRunError, run
from kgwalk.graph import PropertyGraph
from kgwalk.llm import LlmBackend, LlmError
from kgwalk.prompts import PromptPack, default_pack
from kgwalk.verdict import Verdict

log = logging.getLogger(__name__)

ANSWER_CLASSES = 3
REQUIRED_FIELDS = ("id", "question", "label", "inference_rule", "reasoning_steps", "skills")


class DatasetError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    id: str
    question: str
    label: bool
    inference_rule: str
    reasoning_steps: tuple[str, ...]
    skills: tuple[str, ...]

    @property
    def verdict_label(self) -> Verdict:
        return Verdict.TRUE if self.label else Verdict.FALSE


def _parse_label(value: object, record_id: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise DatasetError(f"record {record_id}: label {value!r} is not True or False")


def _record(raw: object, position: int) -> EvalRecord:
    if not isinstance(raw, dict):
        raise DatasetError(f"record {position}: expected an object")
    record_id = str(raw.get("id", f"#{position}"))
    for name in REQUIRED_FIELDS:
        if name not in raw:
            raise DatasetError(f"record {record_id}: missing field {name!r}")
    steps, skills = raw["reasoning_steps"], raw["skills"]
    if not isinstance(steps, list) or not isinstance(skills, list):
        raise DatasetError(f"record {record_id}: reasoning_steps and skills must be lists")
    return EvalRecord(
        id=record_id,
        question=str(raw["question"]),
        label=_parse_label(raw["label"], record_id),
        inference_rule=str(raw["inference_rule"]),
        reasoning_steps=tuple(str(s) for s in steps),
        skills=tuple(str(s) for s in skills),
    )


def load_dataset(source: IO[bytes] | IO[str]) -> list[EvalRecord]:
    """Accepts a JSON array, an object with a ``records`` array, or JSON lines."""
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if not data.strip():
        raise DatasetError("empty dataset")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError:
        try:
            doc = [json.loads(line) for line in data.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise DatasetError(f"dataset is neither JSON nor JSON lines: {exc.msg}") from None
    if isinstance(doc, dict):
        doc = doc.get("records")
    if not isinstance(doc, list) or not doc:
        raise DatasetError("dataset must contain a nonempty list of records")
    records = [_record(raw, i) for i, raw in enumerate(doc)]
    seen: set[str] = set()
    for rec in records:
        if rec.id in seen:
            raise DatasetError(f"duplicate id {rec.id!r}")
        seen.add(rec.id)
    log.info("loaded %d records", len(records))
    return records


# -- metrics -------------------------------------------------------------------

def _counts(verdicts: Sequence[Verdict], labels: Sequence[bool] | None = None) -> tuple[int, int, int]:
    if labels is not None and len(verdicts) != len(labels):
        raise MetricError(f"{len(verdicts)} verdicts but {len(labels)} labels")
    definite = sum(1 for v in verdicts if Verdict(v).is_definite)
    correct = 0
    if labels is not None:
        correct = sum(
            1 for v, lab in zip(verdicts, labels)
            if Verdict(v).is_definite and (Verdict(v) is Verdict.TRUE) == bool(lab)
        )
    return len(verdicts), definite, correct


def answer_rate(verdicts: Sequence[Verdict]) -> float:
    total, definite, _ = _counts(verdicts)
    if total == 0:
        raise MetricError("answer rate of an empty verdict list")
    return definite / total


def conditional_accuracy(verdicts: Sequence[Verdict], labels: Sequence[bool]) -> float | None:
    """Accuracy among definite answers; ``None`` when there are none."""
    _, definite, correct = _counts(verdicts, labels)
    if definite == 0:
        return None
    return correct / definite


def overall_accuracy(verdicts: Sequence[Verdict], labels: Sequence[bool]) -> float:
    total, _, correct = _counts(verdicts, labels)
    if total == 0:
        raise MetricError("overall accuracy of an empty verdict list")
    return correct / total


def reliability(runs: Iterable[Verdict], k: int = ANSWER_CLASSES) -> float:
    """1 - H / log2(k), H the Shannon entropy (bits) of the answer frequencies."""
    counts = Counter(Verdict(v) for v in runs)
    n = sum(counts.values())
    if n == 0:
        raise MetricError("reliability needs at least one run")
    entropy = 0.0
    for count in counts.values():
        p = count / n
        entropy -= p * math.log2(p)
    return min(1.0, max(0.0, 1.0 - entropy / math.log2(k)))


# -- percentages and published-table checks -----------------------------------

def format_percent(value: float | Fraction | None, decimals: int = 2) -> str:
    if value is None:
        return "n/a"
    exact = Decimal(value.numerator) / Decimal(value.denominator) if isinstance(value, Fraction) \
        else Decimal(repr(float(value)))
    return str((exact * 100).quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_UP))


def reconstruct_counts(rate: str, conditional: str, overall: str, n: int = 200) -> list[tuple[int, int]]:
    """All (definite, correct) pairs at ``n`` questions that print as the given
    percentages, each rounded half-up to the decimals they were written with."""
    decimals = max(len(s.split(".")[1]) if "." in s else 0 for s in (rate, conditional, overall))
    matches = []
    for definite in range(1, n + 1):
        if format_percent(Fraction(definite, n), decimals) != _norm(rate, decimals):
            continue
        for correct in range(definite + 1):
            if (format_percent(Fraction(correct, definite), decimals) == _norm(conditional, decimals)
                    and format_percent(Fraction(correct, n), decimals) == _norm(overall, decimals)):
                matches.append((definite, correct))
    return matches


def _norm(text: str, decimals: int) -> str:
    return str(Decimal(text).quantize(Decimal(1).scaleb(-decimals)))


def identity_consistent(rate: float, conditional: float, overall: float, decimals: int = 0) -> bool:
    """Whether published percentages could satisfy overall = rate * conditional
    given that each was rounded to ``decimals`` places."""
    half = 0.5 * 10 ** -decimals
    low = (rate - half) * (conditional - half) / 100
    high = (rate + half) * (conditional + half) / 100
    return low <= overall + half and high >= overall - half


# -- runs and aggregation ------------------------------------------------------

@dataclass
class RunMatrix:
    """Verdicts per question id, one per run, in run order."""

    verdicts: dict[str, list[Verdict]]

    def __post_init__(self) -> None:
        lengths = {len(v) for v in self.verdicts.values()}
        if len(lengths) > 1:
            raise MetricError(f"run matrix is not rectangular: run counts {sorted(lengths)}")
        if lengths == {0}:
            raise MetricError("run matrix needs at least one run")

    @property
    def runs(self) -> int:
        return len(next(iter(self.verdicts.values()))) if self.verdicts else 0

    def column(self, run_index: int, ids: Sequence[str]) -> list[Verdict]:
        return [self.verdicts[i][run_index] for i in ids]

    def to_dict(self) -> dict:
        return {qid: [v.value for v in vs] for qid, vs in self.verdicts.items()}


@dataclass(frozen=True)
class RunMetrics:
    total: int
    definite: int
    correct: int

    @property
    def answer_rate(self) -> float:
        return self.definite / self.total

    @property
    def conditional_accuracy(self) -> float | None:
        return self.correct / self.definite if self.definite else None

    @property
    def overall_accuracy(self) -> float:
        return self.correct / self.total


@dataclass(frozen=True)
class Summary:
    mean: float | None
    std: float | None

    def formatted(self) -> str:
        if self.mean is None:
            return "n/a"
        text = format_percent(self.mean)
        return text if self.std is None else f"{text} ± {format_percent(self.std)}"


def _summarize(values: Sequence[float | None]) -> Summary:
    defined = [v for v in values if v is not None]
    if not defined:
        return Summary(None, None)
    mean = statistics.fmean(defined)
    std = statistics.stdev(defined) if len(values) > 1 and len(defined) > 1 else None
    return Summary(mean, std)


@dataclass
class MetricsReport:
    questions: int
    runs: int
    per_run: list[RunMetrics]
    per_question_reliability: dict[str, float]
    skill_counts: dict[str, int] = field(default_factory=dict)
    failures: int = 0
    notes: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    prompt_pack_hash: str | None = None
    model: str | None = None
    generated_at: str | None = None

    @property
    def answer_rate(self) -> Summary:
        return _summarize([m.answer_rate for m in self.per_run])

    @property
    def conditional_accuracy(self) -> Summary:
        return _summarize([m.conditional_accuracy for m in self.per_run])

    @property
    def overall_accuracy(self) -> Summary:
        return _summarize([m.overall_accuracy for m in self.per_run])

    @property
    def mean_reliability(self) -> float:
        return statistics.fmean(self.per_question_reliability.values())

    @property
    def reliability_degenerate(self) -> bool:
        return self.runs == 1

    def to_dict(self) -> dict:
        def stat(s: Summary) -> dict:
            return {"mean": s.mean, "std": s.std}

        return {
            "questions": self.questions,
            "runs": self.runs,
            "model": self.model,
            "config": self.config,
            "prompt_pack_hash": self.prompt_pack_hash,
            "per_run": [{"total": m.total, "definite": m.definite, "correct": m.correct,
                         "answer_rate": m.answer_rate, "conditional_accuracy": m.conditional_accuracy,
                         "overall_accuracy": m.overall_accuracy} for m in self.per_run],
            "answer_rate": stat(self.answer_rate),
            "conditional_accuracy": stat(self.conditional_accuracy),
            "overall_accuracy": stat(self.overall_accuracy),
            "per_question_reliability": self.per_question_reliability,
            "mean_reliability": self.mean_reliability,
            "reliability_degenerate": self.reliability_degenerate,
            "formatted": {
                "answer_rate": self.answer_rate.formatted(),
                "conditional_accuracy": self.conditional_accuracy.formatted(),
                "overall_accuracy": self.overall_accuracy.formatted(),
                "reliability": f"{self.mean_reliability:.2f}",
            },
            "skill_counts": self.skill_counts,
            "failures": self.failures,
            "notes": self.notes,
            "generated_at": self.generated_at,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MetricsReport:
        return cls(
            questions=doc["questions"],
            runs=doc["runs"],
            per_run=[RunMetrics(m["total"], m["definite"], m["correct"]) for m in doc["per_run"]],
            per_question_reliability=dict(doc["per_question_reliability"]),
            skill_counts=dict(doc.get("skill_counts", {})),
            failures=doc.get("failures", 0),
            notes=list(doc.get("notes", [])),
            config=dict(doc.get("config", {})),
            prompt_pack_hash=doc.get("prompt_pack_hash"),
            model=doc.get("model"),
            generated_at=doc.get("generated_at"),
        )

    def deterministic_dict(self) -> dict:
        doc = self.to_dict()
        doc.pop("generated_at")
        return doc


def aggregate(matrix: RunMatrix, records: Sequence[EvalRecord], **extra) -> MetricsReport:
    """Per-run metrics, their mean and sample std, and per-question reliability."""
    ids = [r.id for r in records]
    if set(ids) != set(matrix.verdicts):
        diff = sorted(set(ids) ^ set(matrix.verdicts))
        raise MetricError(f"matrix and records disagree on ids: {diff}")
    labels = [r.label for r in records]
    per_run = [RunMetrics(*_counts(matrix.column(i, ids), labels)) for i in range(matrix.runs)]
    notes = list(extra.pop("notes", []))
    if matrix.runs == 1:
        notes.append("single run: reliability is trivially 1.0 for every question")
    undefined = sum(1 for m in per_run if m.definite == 0)
    if undefined:
        notes.append(f"{undefined} run(s) had no definite answer; conditional accuracy undefined there")
    return MetricsReport(
        questions=len(records),
        runs=matrix.runs,
        per_run=per_run,
        per_question_reliability={qid: reliability(matrix.verdicts[qid]) for qid in ids},
        skill_counts=dict(sorted(Counter(s for r in records for s in r.skills).items())),
        notes=notes,
        **extra,
    )


@dataclass
class EvalResult:
    matrix: RunMatrix
    failures: dict[tuple[str, int], str]
    call_counts: dict[tuple[str, int], int]


BackendFactory = Callable[[EvalRecord, int], LlmBackend]


def evaluate(
    records: Sequence[EvalRecord],
    graph: PropertyGraph,
    backend_factory: BackendFactory,
    config: AgentConfig,
    runs: int = 1,
    parallel: int | None = None,
    pack: PromptPack | None = None,
) -> EvalResult:
    """Run every (question, run) cell on a bounded thread pool.

    A cell whose backend fails is recorded as a ``None`` verdict and listed in
    ``failures``. With a seed in ``config``, run ``i`` uses ``seed + i``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    pack = pack or default_pack()
    workers = parallel or min(4, len(records))
    if workers < 1:
        raise ValueError("parallel must be >= 1")

    def cell(record: EvalRecord, run_index: int):
        cfg = config if config.seed is None else replace(config, seed=config.seed + run_index)
        backend = backend_factory(record, run_index)
        try:
            outcome = run(record.question, graph, cfg, backend, pack)
        except (AgentRunError, LlmError) as exc:
            calls = exc.outcome.llm_call_count if isinstance(exc, AgentRunError) else 0
            log.warning("question %s run %d failed: %s", record.id, run_index, exc)
            return Verdict.NONE, str(exc), calls
        return outcome.answer, None, outcome.llm_call_count

    cells = [(rec, i) for i in range(runs) for rec in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda c: cell(*c), cells))

    verdicts: dict[str, list[Verdict]] = {rec.id: [Verdict.NONE] * runs for rec in records}
    failures, calls = {}, {}
    for (rec, i), (verdict, error, count) in zip(cells, results):
        verdicts[rec.id][i] = verdict
        calls[(rec.id, i)] = count
        if error is not None:
            failures[(rec.id, i)] = error
    return EvalResult(RunMatrix(verdicts), failures, calls)
