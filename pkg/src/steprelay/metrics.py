"""Post-hoc and aggregate analytics over sessions.

Small-model token share, trigger-activation statistics, analytic edge-cloud
cost and latency, answer extraction, and pass@1 grading. Everything is a
pure function over immutable sessions except the explicitly synchronized
accumulator used by concurrent benchmark runs.
"""

from __future__ import annotations

import math
import re
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .core import CostModel, Origin, TriggerKind
from .orchestrator import Session


class EmptySession(ValueError):
    """A per-session metric was requested over a session with no steps."""


class EmptyInput(ValueError):
    """An aggregate metric was requested over empty input."""


class AnswerKind(Enum):
    """Answer formats the exact-match grader understands."""

    INTEGER_BOXED = "IntegerBoxed"
    MULTIPLE_CHOICE = "MultipleChoice"


@dataclass(frozen=True)
class SessionReport:
    """Per-session summary: answer, token split, trigger counts, estimates."""

    answer: str | None
    correct: bool | None
    srm_tokens: int
    lrm_tokens: int
    wasted_draft_tokens: int
    smt_percentage: float
    trigger_counts: dict[str, int]
    step_counts: dict[str, int]
    est_latency: float
    est_cost: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer": self.answer,
            "correct": self.correct,
            "srm_tokens": self.srm_tokens,
            "lrm_tokens": self.lrm_tokens,
            "wasted_draft_tokens": self.wasted_draft_tokens,
            "smt_percentage": self.smt_percentage,
            "trigger_counts": dict(self.trigger_counts),
            "step_counts": dict(self.step_counts),
            "est_latency": self.est_latency,
            "est_cost": self.est_cost,
        }


def origin_token_counts(session: Session) -> dict[Origin, int]:
    """Reasoning-token totals per origin over non-discarded steps."""
    counts = {Origin.SRM: 0, Origin.LRM: 0}
    for step in session.steps:
        counts[step.origin] += step.token_count
    return counts


def smt_percentage(session: Session) -> float:
    """Share of output reasoning tokens produced by the small model.

    The ratio runs over non-discarded steps only; discarded drafts are not
    part of the output and never enter the numerator or denominator.

    Raises:
        EmptySession: When the session has no non-discarded reasoning tokens.
    """
    counts = origin_token_counts(session)
    total = counts[Origin.SRM] + counts[Origin.LRM]
    if not session.steps or total == 0:
        raise EmptySession("session has no reasoning tokens")
    return counts[Origin.SRM] / total


# ---------------------------------------------------------------------------
# Trigger activation statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationReport:
    """One activation-frequency row: percentages of all reasoning steps."""

    config_label: str
    cognitive_offload_pct: float
    strategic_priming_pct: float
    intervention_request_pct: float
    total_pct: float
    total_steps: int
    accuracy: float | None = None

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "config_label": self.config_label,
            "cognitive_offload_pct": self.cognitive_offload_pct,
            "strategic_priming_pct": self.strategic_priming_pct,
            "intervention_request_pct": self.intervention_request_pct,
            "total_pct": self.total_pct,
            "total_steps": self.total_steps,
        }
        if self.accuracy is not None:
            data["accuracy"] = self.accuracy
        return data


def _config_label(session: Session) -> str:
    config = session.config
    return f"{config.rho:g}-{config.n}-{config.m}"


def trigger_activation_report(
    sessions: Sequence[Session],
    accuracy: float | None = None,
    label: str | None = None,
) -> ActivationReport:
    """Percentage of reasoning steps at which each trigger fired.

    Percentages are computed over all non-discarded steps across the given
    sessions; the total column is their sum. Sessions with no events
    contribute zeros.

    Raises:
        EmptyInput: On an empty session list.
    """
    if not sessions:
        raise EmptyInput("no sessions to report on")
    total_steps = sum(len(session.steps) for session in sessions)
    counts = {kind: 0 for kind in TriggerKind}
    for session in sessions:
        for event in session.events:
            counts[event.kind] += 1
    if total_steps == 0:
        pcts = {kind: 0.0 for kind in TriggerKind}
    else:
        pcts = {kind: 100.0 * counts[kind] / total_steps for kind in TriggerKind}
    return ActivationReport(
        config_label=label if label is not None else _config_label(sessions[0]),
        cognitive_offload_pct=pcts[TriggerKind.COGNITIVE_OFFLOAD],
        strategic_priming_pct=pcts[TriggerKind.STRATEGIC_PRIMING],
        intervention_request_pct=pcts[TriggerKind.INTERVENTION_REQUEST],
        total_pct=sum(pcts.values()),
        total_steps=total_steps,
        accuracy=accuracy,
    )


def format_activation_table(reports: Iterable[ActivationReport]) -> str:
    """Human-readable activation table, one row per configuration."""
    header = (
        "Config (rho-n-m)",
        "Cognitive Offload (%)",
        "Strategic Priming (%)",
        "Intervention Request (%)",
        "Total Trigger (%)",
        "Accuracy",
    )
    rows = [header]
    for report in reports:
        rows.append(
            (
                report.config_label,
                f"{report.cognitive_offload_pct:.2f}",
                f"{report.strategic_priming_pct:.2f}",
                f"{report.intervention_request_pct:.2f}",
                f"{report.total_pct:.2f}",
                "-" if report.accuracy is None else f"{report.accuracy:.4f}",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Edge-cloud analytic model
# ---------------------------------------------------------------------------

def _cost_terms(session: Session, model: CostModel) -> Iterator[float]:
    for step in session.steps:
        if step.origin is Origin.LRM:
            yield step.prompt_tokens * model.lrm_input_price
            yield step.token_count * model.lrm_output_price
        else:
            yield step.prompt_tokens * model.srm_input_price
            yield step.token_count * model.srm_output_price
    for draft in session.discarded_drafts:
        yield draft.prompt_tokens * model.srm_input_price
        yield draft.token_count * model.srm_output_price
    for call in session.judge_calls:
        if session.config.count_judge_prompt_tokens:
            yield call.prompt_tokens * model.lrm_input_price
        yield call.completion_tokens * model.lrm_output_price
    answer = session.answer_record
    if answer is not None:
        if answer.origin is Origin.LRM:
            yield answer.prompt_tokens * model.lrm_input_price
            yield len(answer.tokens) * model.lrm_output_price
        else:
            yield answer.prompt_tokens * model.srm_input_price
            yield len(answer.tokens) * model.srm_output_price


def estimate_cost(session: Session, model: CostModel) -> float:
    """API cost of the session under the given price model.

    Large-model calls are priced on their full prompt (the cumulative prefix
    is resent each step, which is what makes per-step polling expensive)
    plus completion tokens. Small-model calls are priced the same way and
    default to free; discarded drafts really ran, so they are included.
    Judge prompt tokens are included unless the session config disabled
    counting them. Summed with ``math.fsum`` so totals are independent of
    call order.
    """
    return math.fsum(_cost_terms(session, model))


def _latency_terms(session: Session, model: CostModel) -> Iterator[float]:
    for step in session.steps:
        if step.origin is Origin.LRM:
            yield model.rtt_latency
            yield step.token_count * model.lrm_token_latency
        else:
            yield step.token_count * model.srm_token_latency
    for draft in session.discarded_drafts:
        yield draft.token_count * model.srm_token_latency
    for call in session.judge_calls:
        yield model.rtt_latency
        yield call.completion_tokens * model.lrm_token_latency
    answer = session.answer_record
    if answer is not None:
        if answer.origin is Origin.LRM:
            yield model.rtt_latency
            yield len(answer.tokens) * model.lrm_token_latency
        else:
            yield len(answer.tokens) * model.srm_token_latency


def estimate_latency(session: Session, model: CostModel) -> float:
    """Sequential edge-cloud latency estimate in seconds.

    Each large-model call pays one network round trip plus per-token cloud
    generation time; small-model calls pay edge generation time only.
    Discarded drafts add small-model time (they really ran); judge calls are
    large-model round trips. Summed with ``math.fsum`` so totals are
    independent of call order.
    """
    return math.fsum(_latency_terms(session, model))


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------

_BOXED_MARKER = "\\boxed{"
_CHOICE = re.compile(r"\b([A-D])\b")


def _boxed_contents(text: str) -> list[str]:
    contents = []
    start = text.find(_BOXED_MARKER)
    while start != -1:
        cursor = start + len(_BOXED_MARKER)
        depth = 1
        while cursor < len(text) and depth > 0:
            if text[cursor] == "{":
                depth += 1
            elif text[cursor] == "}":
                depth -= 1
            cursor += 1
        if depth == 0:
            contents.append(text[start + len(_BOXED_MARKER) : cursor - 1])
        start = text.find(_BOXED_MARKER, cursor)
    return contents


def extract_answer(answer_text: str, kind: AnswerKind) -> str | None:
    """Pull a gradable answer out of free-form answer text.

    Integer answers come from the last ``\\boxed{...}`` occurrence, accepted
    when it parses as an integer in [0, 999] and returned in canonical form.
    Multiple-choice answers are the last standalone letter A-D. Returns
    ``None`` when nothing matches.
    """
    if kind is AnswerKind.INTEGER_BOXED:
        contents = _boxed_contents(answer_text)
        if not contents:
            return None
        candidate = contents[-1].strip().strip("$").strip()
        try:
            value = int(candidate)
        except ValueError:
            return None
        if 0 <= value <= 999:
            return str(value)
        return None
    matches = _CHOICE.findall(answer_text)
    return matches[-1] if matches else None


def grade_answer(answer_text: str | None, expected: str, kind: AnswerKind) -> bool:
    """Exact-match grading after extraction; deterministic by construction."""
    if answer_text is None:
        return False
    extracted = extract_answer(answer_text, kind)
    if extracted is None:
        return False
    if kind is AnswerKind.INTEGER_BOXED:
        try:
            return int(extracted) == int(expected.strip())
        except ValueError:
            return False
    return extracted == expected.strip().upper()


def pass_at_1(per_question_runs: Mapping[str, Sequence[bool]]) -> float:
    """Mean over questions of each question's mean run correctness.

    Raises:
        EmptyInput: When there are no questions or a question has no runs.
    """
    if not per_question_runs:
        raise EmptyInput("no questions")
    means = []
    for question, runs in per_question_runs.items():
        if not runs:
            raise EmptyInput(f"question {question!r} has no runs")
        means.append(sum(1 for correct in runs if correct) / len(runs))
    return sum(means) / len(means)


# ---------------------------------------------------------------------------
# Per-session report and concurrent aggregation
# ---------------------------------------------------------------------------

def build_report(
    session: Session,
    cost_model: CostModel | None = None,
    correct: bool | None = None,
) -> SessionReport:
    """Assemble the full per-session report."""
    model = cost_model if cost_model is not None else CostModel()
    counts = origin_token_counts(session)
    total_tokens = counts[Origin.SRM] + counts[Origin.LRM]
    trigger_counts = {kind.value: 0 for kind in TriggerKind}
    for event in session.events:
        trigger_counts[event.kind.value] += 1
    step_counts = {origin.value: 0 for origin in Origin}
    for step in session.steps:
        step_counts[step.origin.value] += 1
    return SessionReport(
        answer=session.answer_text,
        correct=correct,
        srm_tokens=counts[Origin.SRM],
        lrm_tokens=counts[Origin.LRM],
        wasted_draft_tokens=session.wasted_draft_tokens,
        smt_percentage=counts[Origin.SRM] / total_tokens if total_tokens else 0.0,
        trigger_counts=trigger_counts,
        step_counts=step_counts,
        est_latency=estimate_latency(session, model),
        est_cost=estimate_cost(session, model),
    )


class ReportAccumulator:
    """Thread-safe collector for concurrent benchmark sessions."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._sessions: list[Session] = []
        self._runs: dict[str, list[bool]] = {}

    def add(self, question_id: str, session: Session, correct: bool | None) -> None:
        with self._lock:
            self._sessions.append(session)
            if correct is not None:
                self._runs.setdefault(question_id, []).append(correct)

    def activation(self) -> ActivationReport:
        with self._lock:
            accuracy = pass_at_1(self._runs) if self._runs else None
            return trigger_activation_report(list(self._sessions), accuracy=accuracy)

    def accuracy(self) -> float | None:
        with self._lock:
            return pass_at_1(self._runs) if self._runs else None

    @property
    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)
