"""Command line: ``kgwalk ask|eval|replay|report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from kgwalk import trace as tracing
from kgwalk.agent import DEFAULT_C_MAX, DEFAULT_K_MAX, AgentConfig, AgentRunError, run
from kgwalk.evaluation import (
    DatasetError,
    EvalRecord,
    MetricsReport,
    aggregate,
    evaluate,
    load_dataset,
)
from kgwalk.graph import GraphLoadError, load_graph_file
from kgwalk.llm import (
    LlmError,
    OpenAICompatibleBackend,
    ScriptedBackend,
    ScriptedTranscript,
    TranscriptLoadError,
    load_transcript,
    transcript_from_obj,
)
from kgwalk.prompts import default_pack, load_pack

log = logging.getLogger("kgwalk")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonnegative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a value >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgwalk", description="Knowledge-graph exploration agent.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def agent_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--graph", required=True, help="graph file (.jsonl or .tsv)")
        p.add_argument("--graph-format", choices=("triples-jsonl", "triples-tsv"))
        p.add_argument("--model", help="remote model name")
        p.add_argument("--base-url", default="http://localhost:8000", help="OpenAI-compatible endpoint")
        p.add_argument("--api-key-env", default="OPENAI_API_KEY", help="environment variable holding the API key")
        p.add_argument("--transcript", help="scripted transcript (JSON) instead of a remote model")
        p.add_argument("--temperature", type=_nonnegative_float, default=0.0)
        p.add_argument("--seed", type=int)
        p.add_argument("--c-max", type=_positive_int, default=DEFAULT_C_MAX)
        p.add_argument("--k-max", type=_positive_int, default=DEFAULT_K_MAX)
        p.add_argument("--max-retries", type=int, default=3)
        p.add_argument("--timeout", type=float, default=120.0)
        p.add_argument("--prompts", help="prompt pack directory (default: built-in)")

    ask = sub.add_parser("ask", help="answer one question")
    agent_options(ask)
    ask.add_argument("--question", required=True)
    ask.add_argument("--out", default="kgwalk-trace.json", help="trace output path")
    ask.add_argument("--redact", action="store_true", help="omit prompts and responses from the trace")

    ev = sub.add_parser("eval", help="evaluate on a dataset")
    agent_options(ev)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--runs", type=_positive_int, default=1)
    ev.add_argument("--parallel", type=_positive_int)
    ev.add_argument("--out", default="report.json", help="report output path")

    rp = sub.add_parser("replay", help="print the narrative of a saved trace")
    rp.add_argument("trace")

    rep = sub.add_parser("report", help="print the table of a saved report")
    rep.add_argument("report")
    return parser


def _config(args: argparse.Namespace) -> AgentConfig:
    return AgentConfig(c_max=args.c_max, k_max=args.k_max, temperature=args.temperature, seed=args.seed)


def _remote(args: argparse.Namespace) -> OpenAICompatibleBackend:
    return OpenAICompatibleBackend(
        args.model,
        args.base_url,
        api_key_env=args.api_key_env,
        timeout=args.timeout,
        max_retries=args.max_retries,
    )


def _backend_args_ok(args: argparse.Namespace, parser_error) -> None:
    if not args.transcript and not args.model:
        parser_error("one of --transcript or --model is required")
    if args.transcript and args.model:
        parser_error("--transcript and --model are mutually exclusive")


def _read_transcript_doc(path: str) -> object:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise TranscriptLoadError("empty transcript")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise TranscriptLoadError(f"invalid transcript JSON: {exc.msg}") from None


def cmd_ask(args: argparse.Namespace, out) -> int:
    pack = load_pack(args.prompts) if args.prompts else default_pack()
    graph = load_graph_file(args.graph, args.graph_format)
    config = _config(args)
    if args.transcript:
        with open(args.transcript, "rb") as fh:
            backend = ScriptedBackend(load_transcript(fh))
    else:
        backend = _remote(args)
    try:
        outcome = run(args.question, graph, config, backend, pack)
        status = 0
    except AgentRunError as exc:
        outcome, status = exc.outcome, 1
        print(f"error: {exc}", file=sys.stderr)
    doc = tracing.build_trace(args.question, outcome, config, pack, backend.model, redact=args.redact)
    tracing.write_trace(doc, args.out)
    if status == 0:
        print(outcome.answer.value, file=out)
        if outcome.justification:
            print(outcome.justification, file=out)
    print(f"trace: {args.out}", file=out)
    return status


def _eval_factory(args: argparse.Namespace, records: list[EvalRecord]):
    if not args.transcript:
        backend = _remote(args)
        return lambda record, run_index: backend, backend.model

    doc = _read_transcript_doc(args.transcript)
    if isinstance(doc, dict) and "by_question" in doc:
        per_question = {qid: transcript_from_obj(t) for qid, t in doc["by_question"].items()}
        missing = sorted({r.id for r in records} - set(per_question))
        if missing:
            raise TranscriptLoadError(f"transcript has no entries for question(s) {missing}")
    else:
        shared = transcript_from_obj(doc)
        per_question = {r.id: shared for r in records}

    def factory(record: EvalRecord, run_index: int) -> ScriptedBackend:
        transcript: ScriptedTranscript = per_question[record.id]
        return ScriptedBackend(transcript.copy())

    return factory, "scripted"


def report_table(report: MetricsReport) -> str:
    model = report.model or "?"
    if report.runs > 1:
        header = ["Model", "Answer Rate %", "Conditional %", "Overall %", "Reliab."]
        row = [model, report.answer_rate.formatted(), report.conditional_accuracy.formatted(),
               report.overall_accuracy.formatted(), f"{report.mean_reliability:.2f}"]
    else:
        header = ["Model", "Answer Rate %", "Conditional %", "Overall %"]
        row = [model, report.answer_rate.formatted(), report.conditional_accuracy.formatted(),
               report.overall_accuracy.formatted()]
    widths = [max(len(h), len(c)) for h, c in zip(header, row)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
        "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip(),
    ]
    lines.append(f"questions={report.questions} runs={report.runs} failures={report.failures}")
    lines.extend(f"note: {n}" for n in report.notes)
    return "\n".join(lines) + "\n"


def cmd_eval(args: argparse.Namespace, out) -> int:
    pack = load_pack(args.prompts) if args.prompts else default_pack()
    graph = load_graph_file(args.graph, args.graph_format)
    with open(args.dataset, "rb") as fh:
        records = load_dataset(fh)
    config = _config(args)
    factory, model = _eval_factory(args, records)
    result = evaluate(records, graph, factory, config, runs=args.runs, parallel=args.parallel, pack=pack)
    notes = []
    if result.failures:
        notes.append(f"{len(result.failures)} cell(s) failed and were counted as None")
    report = aggregate(
        result.matrix,
        records,
        failures=len(result.failures),
        notes=notes,
        config={**config.to_dict(), "runs": args.runs},
        prompt_pack_hash=pack.hash,
        model=model,
        generated_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    out.write(report_table(report))
    print(f"report: {args.out}", file=out)
    return 0


def cmd_replay(args: argparse.Namespace, out) -> int:
    out.write(tracing.narrative(tracing.load_trace(args.trace)))
    return 0


def cmd_report(args: argparse.Namespace, out) -> int:
    try:
        doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
        report = MetricsReport.from_dict(doc)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"error: {args.report} is not a valid report ({exc})", file=sys.stderr)
        return 1
    out.write(report_table(report))
    return 0


COMMANDS = {"ask": cmd_ask, "eval": cmd_eval, "replay": cmd_replay, "report": cmd_report}


def main(argv: list[str] | None = None, out=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("ask", "eval"):
        _backend_args_ok(args, parser.error)
    out = out or sys.stdout
    try:
        return COMMANDS[args.command](args, out)
    except (GraphLoadError, DatasetError, TranscriptLoadError, tracing.TraceSchemaError,
            LlmError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
