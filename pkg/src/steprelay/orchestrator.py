"""Session state machine.

Runs the trigger-based strategy, the judge-polling baseline, and the
single-model baselines over any pair of step clients; enforces the thinking
budget, detects finish conditions, and hands off to the answer phase.

A session is a single logical sequential process (each step depends on the
full prefix); many sessions may run concurrently and independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .backends import BackendError, Client, StepRequest, StepResponse, generate_step, score_step
from .core import (
    FinishReason,
    Origin,
    ReasoningStep,
    SessionConfig,
    TokenSample,
    TriggerEvent,
    TriggerKind,
)
from .triggers import (
    HesitationLexicon,
    InterventionState,
    cognitive_trigger,
    detect_hesitation,
    intervention_trigger,
    is_priming,
    low_ppl_ratio,
    push_hesitation,
    reasoning_tokens,
)

# Appended to the trajectory to elicit the final answer once thinking ends.
ANSWER_SUFFIX = "Final answer:"


class SchemaError(ValueError):
    """A trace file violates the session trace schema.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SessionStatus(Enum):
    """Outcome of the per-step finish check."""

    CONTINUE = "continue"
    FINISHED_BY_MARKER = "marker"
    FINISHED_BY_EOS = "eos"
    FINISHED_BY_BUDGET = "budget"


@dataclass(frozen=True)
class JudgeCall:
    """Accounting record of one judge invocation under the polling baseline."""

    step_index: int
    score: int | None
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class AnswerRecord:
    """Accounting record of the answer-phase generation call."""

    origin: Origin
    tokens: tuple[TokenSample, ...]
    finish: FinishReason
    prompt_tokens: int


@dataclass
class Session:
    """One reasoning session: trajectory, events, and accounting."""

    question: str
    config: SessionConfig
    steps: list[ReasoningStep] = field(default_factory=list)
    discarded_drafts: list[ReasoningStep] = field(default_factory=list)
    events: list[TriggerEvent] = field(default_factory=list)
    judge_calls: list[JudgeCall] = field(default_factory=list)
    intervention: InterventionState = field(default_factory=InterventionState)
    thinking_tokens_used: int = 0
    finished: bool = False
    finish_kind: SessionStatus = SessionStatus.CONTINUE
    answer_text: str | None = None
    answer_record: AnswerRecord | None = None
    answer_error: str | None = None

    @property
    def wasted_draft_tokens(self) -> int:
        return sum(step.token_count for step in self.discarded_drafts)

    @property
    def budget_exhausted_without_answer(self) -> bool:
        return self.finish_kind is SessionStatus.FINISHED_BY_BUDGET and self.answer_text is None


def check_finished(step: ReasoningStep, used: int, config: SessionConfig) -> SessionStatus:
    """Decide whether the thinking loop ends after this completed step.

    Priority: finish marker in the step text, then end-of-sequence, then the
    token budget. The budget is only consulted between steps, so overshoot is
    bounded by one step.
    """
    if any(marker in step.text for marker in config.finish_markers):
        return SessionStatus.FINISHED_BY_MARKER
    if step.finish is FinishReason.END_OF_SEQUENCE:
        return SessionStatus.FINISHED_BY_EOS
    if used >= config.budget:
        return SessionStatus.FINISHED_BY_BUDGET
    return SessionStatus.CONTINUE


# ---------------------------------------------------------------------------
# Shared per-session machinery
# ---------------------------------------------------------------------------

class _SessionRun:
    """Mutable helper confining one session's loop state."""

    def __init__(self, question: str, config: SessionConfig) -> None:
        self.session = Session(question=question, config=config)
        self.config = config
        self.lexicon = HesitationLexicon(config.lexicon)

    def context(self) -> str:
        parts = [self.session.question]
        parts.extend(step.text for step in self.session.steps)
        return self.config.step_delimiter.join(parts)

    def request(self, want_logprobs: bool) -> StepRequest:
        return StepRequest(
            context=self.context(),
            stop=(self.config.step_delimiter,) + self.config.finish_markers,
            max_tokens=self.config.max_step_tokens,
            temperature=self.config.temperature,
            top_p=self.config.top_p,
            want_logprobs=want_logprobs,
        )

    def draft_ratio(self, response: StepResponse) -> float:
        tokens = reasoning_tokens(response.tokens)
        if not tokens:
            # A draft of pure control tokens carries no confidence signal.
            return 0.0
        return low_ppl_ratio(tokens, self.config.tau)

    def append(
        self,
        index: int,
        origin: Origin,
        response: StepResponse,
        ratio: float | None,
    ) -> tuple[ReasoningStep, SessionStatus]:
        """Append an accepted step, push its hesitation flag, check finish."""
        step = ReasoningStep(
            index=index,
            origin=origin,
            tokens=response.tokens,
            text=response.text,
            low_ppl_ratio=ratio,
            hesitation=detect_hesitation(response.text, self.lexicon),
            finish=response.finish_reason,
            prompt_tokens=response.prompt_tokens,
        )
        self.session.steps.append(step)
        self.session.thinking_tokens_used += step.token_count
        if origin is not Origin.SRM:
            # SRM-accepted steps push via the intervention trigger instead.
            self.session.intervention = push_hesitation(
                self.session.intervention, step.hesitation, self.config.k
            )
        status = check_finished(step, self.session.thinking_tokens_used, self.config)
        if status is not SessionStatus.CONTINUE:
            self.session.finished = True
            self.session.finish_kind = status
        return step, status

    def discard_draft(self, index: int, response: StepResponse, ratio: float) -> None:
        draft = ReasoningStep(
            index=index,
            origin=Origin.SRM,
            tokens=response.tokens,
            text=response.text,
            low_ppl_ratio=ratio,
            hesitation=detect_hesitation(response.text, self.lexicon),
            discarded_draft=True,
            finish=response.finish_reason,
            prompt_tokens=response.prompt_tokens,
        )
        self.session.discarded_drafts.append(draft)

    def run_answer_phase(self, client: Client, origin: Origin) -> None:
        """Prompt the answer model with the trajectory plus an answer cue.

        Backend failures here leave the answer absent instead of failing the
        session; a budget-exhausted session still gets its one answer try.
        """
        parts = [self.session.question]
        parts.extend(step.text for step in self.session.steps)
        parts.append(ANSWER_SUFFIX)
        request = StepRequest(
            context=self.config.step_delimiter.join(parts),
            stop=self.config.finish_markers,
            max_tokens=self.config.max_step_tokens,
            temperature=self.config.temperature,
            top_p=self.config.top_p,
            want_logprobs=origin is Origin.SRM,
        )
        try:
            response = generate_step(client, request)
        except BackendError as exc:
            self.session.answer_error = f"{type(exc).__name__}: {exc}"
            return
        text = response.text.strip()
        self.session.answer_text = text if text else None
        self.session.answer_record = AnswerRecord(
            origin=origin,
            tokens=response.tokens,
            finish=response.finish_reason,
            prompt_tokens=response.prompt_tokens,
        )

    def attach_and_reraise(self, exc: BackendError) -> None:
        # Diagnostics for callers: the partial session rides on the error.
        exc.partial_session = self.session  # type: ignore[attr-defined]
        raise exc


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

def run_trigreason(
    question: str,
    config: SessionConfig,
    srm_client: Client,
    lrm_client: Client,
) -> Session:
    """Run one session under the trigger-based strategy.

    Per step ``t``: the first ``n`` steps come from the large model (one
    strategic-priming event is recorded at step 1). Afterwards the small
    model drafts each step and its low-perplexity ratio is computed; if a
    rectification window is open or the ratio exceeds ``rho``, the large
    model generates the step instead and the draft is discarded. The
    rectification counter only decrements on steps whose ratio did not
    exceed ``rho``, so an overconfident draft extends the window. Accepted
    small-model steps feed the hesitation window; when the last ``k``
    appended steps were all hesitant, an intervention request opens a
    ``rectify = m`` window.

    The loop ends on a finish marker, end-of-sequence, or once the thinking
    budget is consumed; the configured answer model then writes the answer.

    Backend errors during thinking propagate with the partial session
    attached as ``exc.partial_session``.
    """
    run = _SessionRun(question, config)
    session = run.session
    t = 0
    try:
        while not session.finished:
            t += 1
            if is_priming(t, config.n):
                response = generate_step(lrm_client, run.request(want_logprobs=False))
                if t == 1:
                    session.events.append(
                        TriggerEvent(kind=TriggerKind.STRATEGIC_PRIMING, step_index=1)
                    )
                run.append(t, Origin.LRM, response, ratio=None)
                continue

            rectifying = session.intervention.rectify_steps_remaining > 0
            draft: StepResponse | None = None
            ratio: float | None = None
            if not (rectifying and config.skip_draft_during_rectify):
                draft = generate_step(srm_client, run.request(want_logprobs=True))
                ratio = run.draft_ratio(draft)

            fired = ratio is not None and cognitive_trigger(ratio, config.rho)
            if rectifying or fired:
                if fired:
                    session.events.append(
                        TriggerEvent(
                            kind=TriggerKind.COGNITIVE_OFFLOAD, step_index=t, evidence=ratio
                        )
                    )
                response = generate_step(lrm_client, run.request(want_logprobs=False))
                if draft is not None:
                    run.discard_draft(t, draft, ratio)  # type: ignore[arg-type]
                run.append(t, Origin.LRM, response, ratio=None)
                if rectifying and not fired:
                    session.intervention = session.intervention.decremented()
            else:
                assert draft is not None and ratio is not None
                step, status = run.append(t, Origin.SRM, draft, ratio=ratio)
                state, requested = intervention_trigger(
                    session.intervention, step.hesitation, config.k, config.m
                )
                session.intervention = state
                if requested:
                    session.events.append(
                        TriggerEvent(
                            kind=TriggerKind.INTERVENTION_REQUEST,
                            step_index=t,
                            evidence=tuple(range(t - config.k + 1, t + 1)),
                        )
                    )
    except BackendError as exc:
        run.attach_and_reraise(exc)

    answer_client = srm_client if config.answer_model is Origin.SRM else lrm_client
    run.run_answer_phase(answer_client, config.answer_model)
    return session


def run_specreason(
    question: str,
    config: SessionConfig,
    srm_client: Client,
    lrm_client: Client,
) -> Session:
    """Run one session under the judge-polling baseline.

    Every step is drafted by the small model and scored by the large model
    in [0, 9]; scores at or above ``judge_threshold`` accept the draft,
    anything else (including an unparseable reply) makes the large model
    regenerate the step. A threshold of 0 accepts every draft, so the judge
    is provably irrelevant and is not called at all, which keeps the session
    identical to a small-model-only run.
    """
    run = _SessionRun(question, config)
    session = run.session
    t = 0
    try:
        while not session.finished:
            t += 1
            draft = generate_step(srm_client, run.request(want_logprobs=True))
            ratio = run.draft_ratio(draft)
            if config.judge_threshold <= 0:
                accepted = True
            else:
                score, prompt_tokens, completion_tokens = score_step(
                    lrm_client, run.context(), draft.text or " ", config.judge_prompt
                )
                session.judge_calls.append(
                    JudgeCall(
                        step_index=t,
                        score=score,
                        prompt_tokens=prompt_tokens,
                        completion_tokens=completion_tokens,
                    )
                )
                accepted = score is not None and score >= config.judge_threshold
            if accepted:
                run.append(t, Origin.SRM, draft, ratio=ratio)
            else:
                response = generate_step(lrm_client, run.request(want_logprobs=False))
                run.discard_draft(t, draft, ratio)
                run.append(t, Origin.LRM, response, ratio=None)
    except BackendError as exc:
        run.attach_and_reraise(exc)

    answer_client = srm_client if config.answer_model is Origin.SRM else lrm_client
    run.run_answer_phase(answer_client, config.answer_model)
    return session


def run_single_model(
    question: str,
    config: SessionConfig,
    client: Client,
    origin: Origin,
) -> Session:
    """Run one session on a single model; all steps share ``origin``.

    No triggers, no events. The answer phase uses the session's only client
    regardless of ``config.answer_model``.
    """
    run = _SessionRun(question, config)
    session = run.session
    want_logprobs = origin is Origin.SRM
    t = 0
    try:
        while not session.finished:
            t += 1
            response = generate_step(client, run.request(want_logprobs=want_logprobs))
            ratio = run.draft_ratio(response) if origin is Origin.SRM else None
            run.append(t, origin, response, ratio=ratio)
    except BackendError as exc:
        run.attach_and_reraise(exc)

    run.run_answer_phase(client, origin)
    return session


# ---------------------------------------------------------------------------
# Trace serialization
# ---------------------------------------------------------------------------

def _dump(obj: Mapping[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _step_record(step: ReasoningStep, judge: JudgeCall | None = None) -> dict[str, Any]:
    return {
        "idx": step.index,
        "origin": step.origin.value,
        "tokens": [sample.text for sample in step.tokens],
        "logprobs": [sample.logprob for sample in step.tokens],
        "special": [sample.special for sample in step.tokens],
        "finish": step.finish.value,
        "discarded": step.discarded_draft,
        "hesitation": step.hesitation,
        "low_ppl_ratio": step.low_ppl_ratio,
        "prompt_tokens": step.prompt_tokens,
        "judge": None
        if judge is None
        else {
            "score": judge.score,
            "prompt_tokens": judge.prompt_tokens,
            "completion_tokens": judge.completion_tokens,
        },
    }


def _record_step(record: Mapping[str, Any], line_number: int) -> ReasoningStep:
    try:
        texts = record["tokens"]
        logprobs = record["logprobs"]
        special = record.get("special", [False] * len(texts))
        tokens = tuple(
            TokenSample(
                text=str(text),
                logprob=None if lp is None else float(lp),
                special=bool(flag),
            )
            for text, lp, flag in zip(texts, logprobs, special)
        )
        ratio = record.get("low_ppl_ratio")
        return ReasoningStep(
            index=int(record["idx"]),
            origin=Origin(record["origin"]),
            tokens=tokens,
            text="".join(sample.text for sample in tokens),
            low_ppl_ratio=None if ratio is None else float(ratio),
            hesitation=bool(record.get("hesitation", False)),
            discarded_draft=bool(record.get("discarded", False)),
            finish=FinishReason(record.get("finish", "stop")),
            prompt_tokens=int(record.get("prompt_tokens", 0)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(line_number, f"bad step record: {exc}") from exc


def serialize_session(session: Session) -> str:
    """Serialize a session to its trace form: JSON Lines, UTF-8.

    One record per step in generation order, with discarded drafts preceding
    the step that replaced them; then an events array; then a trailing
    summary record. Key order and separators are fixed, so identical
    sessions serialize to identical bytes.
    """
    drafts_by_index: dict[int, ReasoningStep] = {
        draft.index: draft for draft in session.discarded_drafts
    }
    judges_by_index: dict[int, JudgeCall] = {call.step_index: call for call in session.judge_calls}
    lines: list[str] = []
    for step in session.steps:
        draft = drafts_by_index.get(step.index)
        if draft is not None:
            lines.append(_dump(_step_record(draft, judges_by_index.get(step.index))))
            lines.append(_dump(_step_record(step)))
        else:
            lines.append(_dump(_step_record(step, judges_by_index.get(step.index))))
    if session.answer_record is not None:
        answer = session.answer_record
        last_index = session.steps[-1].index if session.steps else 0
        lines.append(
            _dump(
                {
                    "idx": last_index + 1,
                    "origin": answer.origin.value,
                    "tokens": [sample.text for sample in answer.tokens],
                    "logprobs": [sample.logprob for sample in answer.tokens],
                    "special": [sample.special for sample in answer.tokens],
                    "finish": answer.finish.value,
                    "prompt_tokens": answer.prompt_tokens,
                    "answer_phase": True,
                }
            )
        )
    lines.append(_dump({"events": [event.to_dict() for event in session.events]}))
    summary = {
        "summary": {
            "question": session.question,
            "config": session.config.to_dict(),
            "answer": session.answer_text,
            "answer_error": session.answer_error,
            "finished": session.finished,
            "finish_kind": session.finish_kind.value,
            "thinking_tokens_used": session.thinking_tokens_used,
            "wasted_draft_tokens": session.wasted_draft_tokens,
        }
    }
    lines.append(_dump(summary))
    return "\n".join(lines) + "\n"


def deserialize_session(text: str) -> Session:
    """Rebuild a session from its trace form.

    Raises:
        SchemaError: Naming the offending line on parse problems, idx gaps
            in the accepted trajectory, or a missing summary record.
    """
    steps: list[ReasoningStep] = []
    drafts: list[ReasoningStep] = []
    judge_calls: list[JudgeCall] = []
    events: list[TriggerEvent] = []
    answer_record: AnswerRecord | None = None
    summary: Mapping[str, Any] | None = None

    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            raise SchemaError(line_number, f"invalid JSON: {exc}") from exc
        if record.get("answer_phase"):
            try:
                tokens = tuple(
                    TokenSample(
                        text=str(text_),
                        logprob=None if lp is None else float(lp),
                        special=bool(flag),
                    )
                    for text_, lp, flag in zip(
                        record["tokens"],
                        record["logprobs"],
                        record.get("special", [False] * len(record["tokens"])),
                    )
                )
                answer_record = AnswerRecord(
                    origin=Origin(record["origin"]),
                    tokens=tokens,
                    finish=FinishReason(record.get("finish", "stop")),
                    prompt_tokens=int(record.get("prompt_tokens", 0)),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(line_number, f"bad answer record: {exc}") from exc
        elif "idx" in record:
            step = _record_step(record, line_number)
            judge = record.get("judge")
            if judge is not None:
                judge_calls.append(
                    JudgeCall(
                        step_index=step.index,
                        score=judge.get("score"),
                        prompt_tokens=int(judge.get("prompt_tokens", 0)),
                        completion_tokens=int(judge.get("completion_tokens", 0)),
                    )
                )
            if step.discarded_draft:
                drafts.append(step)
            else:
                if steps and step.index != steps[-1].index + 1:
                    raise SchemaError(
                        line_number,
                        f"idx gap: expected {steps[-1].index + 1}, got {step.index}",
                    )
                if not steps and step.index != 1:
                    raise SchemaError(line_number, f"trajectory must start at idx 1, got {step.index}")
                steps.append(step)
        elif "events" in record:
            events = [TriggerEvent.from_dict(item) for item in record["events"]]
        elif "summary" in record:
            summary = record["summary"]
        else:
            raise SchemaError(line_number, "unrecognized record")

    if summary is None:
        raise SchemaError(len(text.splitlines()) or 1, "missing summary record")

    config = SessionConfig.from_dict(summary["config"])
    session = Session(question=str(summary["question"]), config=config)
    session.steps = steps
    session.discarded_drafts = drafts
    session.judge_calls = judge_calls
    session.events = events
    session.answer_text = summary.get("answer")
    session.answer_error = summary.get("answer_error")
    session.finished = bool(summary.get("finished", False))
    session.finish_kind = SessionStatus(summary.get("finish_kind", "continue"))
    session.thinking_tokens_used = sum(step.token_count for step in steps)
    session.answer_record = answer_record
    expected_used = int(summary.get("thinking_tokens_used", session.thinking_tokens_used))
    if expected_used != session.thinking_tokens_used:
        raise SchemaError(
            len(text.splitlines()),
            f"summary token count {expected_used} does not match steps "
            f"({session.thinking_tokens_used})",
        )
    return session


def write_trace(session: Session, path: str | Path) -> None:
    Path(path).write_text(serialize_session(session), encoding="utf-8")


def read_trace(path: str | Path) -> Session:
    return deserialize_session(Path(path).read_text(encoding="utf-8"))


def read_trace_records(path: str | Path) -> list[dict[str, Any]]:
    """Raw JSONL records of a trace file, for replay-backend construction."""
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except ValueError as exc:
                raise SchemaError(line_number, f"invalid JSON: {exc}") from exc
    return records
