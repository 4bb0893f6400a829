"""Command-line entry point.

Four verbs: ``run`` executes one session, ``bench`` runs a graded benchmark,
``replay`` recomputes metrics from trace files, ``report`` aggregates
activation tables across traces. Flag precedence is CLI flag > config file >
built-in default. Exit codes: 0 on completion, 2 on backend failure, 3 on
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

from .backends import BackendError, Client, HttpBackend, ScriptedBackend
from .core import (
    ConfigError,
    CostModel,
    Origin,
    RangeError,
    SessionConfig,
    Strategy,
    load_config_file,
    load_cost_model_file,
    validate_config,
)
from .metrics import (
    AnswerKind,
    ReportAccumulator,
    build_report,
    format_activation_table,
    grade_answer,
    extract_answer,
    pass_at_1,
    trigger_activation_report,
)
from .orchestrator import (
    SchemaError,
    Session,
    read_trace,
    run_single_model,
    run_specreason,
    run_trigreason,
    write_trace,
)
from .triggers import HesitationLexicon

ENV_SRM_URL = "TRIG_SRM_URL"
ENV_LRM_URL = "TRIG_LRM_URL"
ENV_API_KEY = "TRIG_LRM_API_KEY"

BUDGET_FLAG_RANGE = (2048, 32768)


class Verb(Enum):
    RUN = "run"
    BENCH = "bench"
    REPLAY = "replay"
    REPORT = "report"


@dataclass(frozen=True)
class Command:
    """One parsed invocation: exactly one verb plus its settings."""

    verb: Verb
    config_path: Path | None
    overrides: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

_CONFIG_FLAGS = (
    "rho",
    "tau",
    "n",
    "m",
    "k",
    "budget",
    "temperature",
    "top_p",
    "step_delimiter",
    "max_step_tokens",
    "strategy",
    "judge_threshold",
    "answer_model",
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("session config (flag > file > default)")
    group.add_argument("--config", type=Path, default=None, help="TOML config file")
    group.add_argument("--rho", type=float, default=None, help="coverage threshold in (0,1]")
    group.add_argument("--tau", type=float, default=None, help="per-token perplexity threshold")
    group.add_argument("--n", type=int, default=None, help="priming steps from the large model")
    group.add_argument("--m", type=int, default=None, help="rectification steps per intervention")
    group.add_argument("--k", type=int, default=None, help="consecutive hesitant steps to intervene")
    group.add_argument("--budget", type=int, default=None, help="max thinking tokens (2048-32768)")
    group.add_argument("--temperature", type=float, default=None)
    group.add_argument("--top-p", dest="top_p", type=float, default=None)
    group.add_argument("--step-delimiter", dest="step_delimiter", default=None)
    group.add_argument("--max-step-tokens", dest="max_step_tokens", type=int, default=None)
    group.add_argument(
        "--strategy",
        choices=[strategy.value for strategy in Strategy],
        default=None,
    )
    group.add_argument("--judge-threshold", dest="judge_threshold", type=int, default=None)
    group.add_argument(
        "--answer-model",
        dest="answer_model",
        choices=["srm", "lrm"],
        default=None,
    )
    group.add_argument("--lexicon", type=Path, default=None, help="hesitation phrase file")
    group.add_argument(
        "--finish-marker",
        dest="finish_markers",
        action="append",
        default=None,
        help="finish marker substring (repeatable)",
    )
    group.add_argument(
        "--skip-draft-during-rectify",
        dest="skip_draft_during_rectify",
        action="store_true",
        default=None,
    )
    group.add_argument("--cost-model", dest="cost_model", type=Path, default=None)


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("backends")
    group.add_argument("--srm-url", default=os.environ.get(ENV_SRM_URL))
    group.add_argument("--lrm-url", default=os.environ.get(ENV_LRM_URL))
    group.add_argument("--srm-model", default="default")
    group.add_argument("--lrm-model", default="default")
    group.add_argument("--api-key", default=os.environ.get(ENV_API_KEY))
    group.add_argument("--chat", action="store_true", help="use /v1/chat/completions")
    group.add_argument("--srm-script", type=Path, default=None, help="scripted mock for the SRM")
    group.add_argument("--lrm-script", type=Path, default=None, help="scripted mock for the LRM")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steprelay",
        description="Step-level collaborative reasoning between a small and a large model.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run one session and print its summary")
    run.add_argument("question")
    _add_config_flags(run)
    _add_backend_flags(run)
    run.add_argument("--trace-out", dest="trace_out", type=Path, default=None)
    run.add_argument("--answer-kind", dest="answer_kind", choices=[k.value for k in AnswerKind], default=None)

    bench = sub.add_parser("bench", help="run a graded benchmark dataset")
    bench.add_argument("dataset", type=Path)
    _add_config_flags(bench)
    _add_backend_flags(bench)
    bench.add_argument("--runs", type=int, default=16, help="sessions per question")
    bench.add_argument("--parallel", type=int, default=4)
    bench.add_argument("--out", type=Path, default=Path("bench_results.jsonl"))
    bench.add_argument("--trace-dir", dest="trace_dir", type=Path, default=None)

    replay = sub.add_parser("replay", help="recompute metrics from trace files")
    replay.add_argument("traces", nargs="+", type=Path)
    replay.add_argument("--cost-model", dest="cost_model", type=Path, default=None)

    report = sub.add_parser("report", help="aggregate activation table across traces")
    report.add_argument("traces", nargs="+", type=Path)
    return parser


def _merge_config(args: argparse.Namespace) -> SessionConfig:
    """Apply flag > file > default precedence and validate."""
    merged: dict[str, Any] = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        merged.update(load_config_file(args.config))
    for name in _CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    if getattr(args, "skip_draft_during_rectify", None):
        merged["skip_draft_during_rectify"] = True
    if getattr(args, "finish_markers", None):
        merged["finish_markers"] = tuple(args.finish_markers)
    if getattr(args, "lexicon", None) is not None:
        merged["lexicon"] = HesitationLexicon.from_file(args.lexicon).phrases
    if args.budget is not None:
        low, high = BUDGET_FLAG_RANGE
        if not low <= args.budget <= high:
            raise RangeError("budget", f"--budget accepts {low}-{high}")
    if isinstance(merged.get("answer_model"), str):
        merged["answer_model"] = merged["answer_model"].upper()
    return validate_config(SessionConfig.from_dict(merged))


def _load_cost_model(path: Path | None) -> CostModel:
    if path is None:
        return CostModel.illustrative()
    if not path.exists():
        raise ConfigError(f"cost model file not found: {path}")
    return load_cost_model_file(path)


def _build_client(
    script: Path | None, url: str | None, model: str, api_key: str | None, use_chat: bool, side: str
) -> Client:
    if script is not None:
        if not script.exists():
            raise ConfigError(f"--{side}-script file not found: {script}")
        return ScriptedBackend.from_file(script)
    if url is None:
        raise ConfigError(f"--{side}-url (or --{side}-script) is required")
    return HttpBackend(url, model=model, api_key=api_key, use_chat=use_chat)


def _dispatch_strategy(
    question: str, config: SessionConfig, args: argparse.Namespace
) -> Session:
    needs_srm = config.strategy is not Strategy.LRM_ONLY
    needs_lrm = config.strategy is not Strategy.SRM_ONLY
    srm = (
        _build_client(args.srm_script, args.srm_url, args.srm_model, None, args.chat, "srm")
        if needs_srm
        else None
    )
    lrm = (
        _build_client(args.lrm_script, args.lrm_url, args.lrm_model, args.api_key, args.chat, "lrm")
        if needs_lrm
        else None
    )
    if config.strategy is Strategy.TRIGREASON:
        return run_trigreason(question, config, srm, lrm)
    if config.strategy is Strategy.SPECREASON:
        return run_specreason(question, config, srm, lrm)
    if config.strategy is Strategy.SRM_ONLY:
        return run_single_model(question, config, srm, Origin.SRM)
    return run_single_model(question, config, lrm, Origin.LRM)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    config = _merge_config(args)
    cost_model = _load_cost_model(args.cost_model)
    session = _dispatch_strategy(args.question, config, args)
    report = build_report(session, cost_model)
    print(f"strategy: {config.strategy.value}")
    print(f"finish: {session.finish_kind.value}")
    print(f"answer: {session.answer_text if session.answer_text is not None else '<absent>'}")
    if args.answer_kind is not None:
        extracted = extract_answer(session.answer_text or "", AnswerKind(args.answer_kind))
        print(f"extracted: {extracted if extracted is not None else '<absent>'}")
    print(f"smt_percentage: {report.smt_percentage * 100:.2f}%")
    print(f"steps: SRM={report.step_counts['SRM']} LRM={report.step_counts['LRM']}")
    print(
        "tokens: "
        f"SRM={report.srm_tokens} LRM={report.lrm_tokens} wasted_draft={report.wasted_draft_tokens}"
    )
    print(
        "triggers: "
        f"StrategicPriming={report.trigger_counts['StrategicPriming']} "
        f"CognitiveOffload={report.trigger_counts['CognitiveOffload']} "
        f"InterventionRequest={report.trigger_counts['InterventionRequest']}"
    )
    print(f"est_latency_s: {report.est_latency:.6f}")
    print(f"est_cost: {report.est_cost:.8f}")
    if args.trace_out is not None:
        write_trace(session, args.trace_out)
        print(f"trace: {args.trace_out}")
    return 0


def _bench_one(
    question: str,
    expected: str,
    kind: AnswerKind,
    config: SessionConfig,
    args: argparse.Namespace,
) -> tuple[Session, bool]:
    session = _dispatch_strategy(question, config, args)
    return session, grade_answer(session.answer_text, expected, kind)


def cmd_bench(args: argparse.Namespace) -> int:
    config = _merge_config(args)
    cost_model = _load_cost_model(args.cost_model)
    if args.runs < 1:
        raise RangeError("runs", "--runs must be >= 1")
    if not args.dataset.exists():
        raise ConfigError(f"dataset file not found: {args.dataset}")

    questions: list[dict[str, Any]] = []
    with open(args.dataset, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                questions.append(
                    {
                        "id": str(row["id"]),
                        "question": str(row["question"]),
                        "answer": str(row["answer"]),
                        "kind": AnswerKind(row["kind"]),
                    }
                )
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"dataset line {line_number}: {exc}") from exc
    if not questions:
        raise ConfigError("dataset contains no questions")

    accumulator = ReportAccumulator()
    results: dict[tuple[str, int], dict[str, Any]] = {}
    failed_questions: set[str] = set()

    def run_one(row: dict[str, Any], run_index: int) -> None:
        key = (row["id"], run_index)
        try:
            session, correct = _bench_one(
                row["question"], row["answer"], row["kind"], config, args
            )
        except (BackendError, ConfigError) as exc:
            results[key] = {"id": row["id"], "run": run_index, "error": f"{type(exc).__name__}: {exc}"}
            failed_questions.add(row["id"])
            return
        report = build_report(session, cost_model, correct)
        results[key] = {
            "id": row["id"],
            "run": run_index,
            "correct": correct,
            "answer": session.answer_text,
            "extracted": extract_answer(session.answer_text or "", row["kind"]),
            "smt_percentage": report.smt_percentage,
            "est_latency": report.est_latency,
            "est_cost": report.est_cost,
        }
        accumulator.add(row["id"], session, correct)
        if args.trace_dir is not None:
            args.trace_dir.mkdir(parents=True, exist_ok=True)
            write_trace(session, args.trace_dir / f"{row['id']}_{run_index}.jsonl")

    jobs = [(row, run_index) for row in questions for run_index in range(args.runs)]
    if args.parallel > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            list(pool.map(lambda job: run_one(*job), jobs))
    else:
        for job in jobs:
            run_one(*job)

    with open(args.out, "w", encoding="utf-8") as handle:
        for key in sorted(results):
            handle.write(json.dumps(results[key], sort_keys=True) + "\n")

    graded = {
        row["id"]: [
            results[(row["id"], i)]["correct"]
            for i in range(args.runs)
            if "correct" in results[(row["id"], i)]
        ]
        for row in questions
    }
    graded = {qid: runs for qid, runs in graded.items() if runs}
    if not graded:
        print("bench: every question failed", file=sys.stderr)
        return 2
    accuracy = pass_at_1(graded)
    activation = accumulator.activation()
    print(format_activation_table([activation]))
    print(f"pass@1: {accuracy:.6f}")
    print(json.dumps(activation.to_dict(), sort_keys=True))
    print(f"results: {args.out}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    cost_model = _load_cost_model(args.cost_model)
    sessions = []
    for path in args.traces:
        if not path.exists():
            raise ConfigError(f"trace file not found: {path}")
        sessions.append(read_trace(path))
    for path, session in zip(args.traces, sessions):
        report = build_report(session, cost_model)
        print(json.dumps({"trace": str(path), **report.to_dict()}, sort_keys=True))
    if len(sessions) > 1:
        aggregate = trigger_activation_report(sessions)
        print(json.dumps({"aggregate": aggregate.to_dict()}, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    by_label: dict[str, list[Session]] = {}
    for path in args.traces:
        if not path.exists():
            raise ConfigError(f"trace file not found: {path}")
        session = read_trace(path)
        config = session.config
        by_label.setdefault(f"{config.rho:g}-{config.n}-{config.m}", []).append(session)
    rows = [
        trigger_activation_report(sessions, label=label)
        for label, sessions in sorted(by_label.items())
    ]
    print(format_activation_table(rows))
    for row in rows:
        print(json.dumps(row.to_dict(), sort_keys=True))
    return 0


_HANDLERS: dict[Verb, Callable[[argparse.Namespace], int]] = {
    Verb.RUN: cmd_run,
    Verb.BENCH: cmd_bench,
    Verb.REPLAY: cmd_replay,
    Verb.REPORT: cmd_report,
}


def parse_command(argv: Sequence[str] | None = None) -> tuple[Command, argparse.Namespace]:
    args = build_parser().parse_args(argv)
    verb = Verb(args.verb)
    overrides = {
        name: getattr(args, name)
        for name in _CONFIG_FLAGS
        if getattr(args, name, None) is not None
    }
    return Command(verb=verb, config_path=getattr(args, "config", None), overrides=overrides), args


def main(argv: Sequence[str] | None = None) -> int:
    try:
        command, args = parse_command(argv)
        return _HANDLERS[command.verb](args)
    except SchemaError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
