from __future__ import annotations

import random

import pytest

from steprelay.backends import ProtocolError, ReplayBackend, ScriptedBackend, make_step
from steprelay.core import FinishReason, Origin, ReasoningStep, SessionConfig, TokenSample, TriggerKind
from steprelay.orchestrator import (
    SchemaError,
    SessionStatus,
    check_finished,
    deserialize_session,
    read_trace_records,
    run_single_model,
    run_specreason,
    run_trigreason,
    serialize_session,
)

from oracle_reference import reference_trace
from scenario import (
    ANSWER_STEP,
    ScenarioPlan,
    StepPlan,
    build_backends,
    random_plan,
)


def _step_of(texts, logprobs, finish=FinishReason.STOP_SEQUENCE):
    return make_step(texts, logprobs, finish=finish)


def _ten_token_step(low: int, hesitant: bool = False):
    texts = ["wait " if hesitant and i == 0 else f"w{i} " for i in range(10)]
    logprobs = [-0.01 if i < low else -1.0 for i in range(10)]
    return make_step(texts, logprobs)


# ---------------------------------------------------------------------------
# Scripted scenarios from first principles
# ---------------------------------------------------------------------------

def test_cognitive_offload_scenario() -> None:
    # n=2 priming steps; SRM drafts with ratios [0.5, 0.9, 0.4]; the 0.9 draft
    # exceeds rho=0.85, so step 4 is regenerated by the large model.
    config = SessionConfig(n=2, rho=0.85, k=3, m=1, budget=50, max_step_tokens=64)
    srm = ScriptedBackend([_ten_token_step(5), _ten_token_step(9), _ten_token_step(4), ANSWER_STEP])
    lrm = ScriptedBackend([_ten_token_step(0), _ten_token_step(0), _ten_token_step(0)])
    session = run_trigreason("question", config, srm, lrm)

    origins = [step.origin for step in session.steps]
    assert origins == [Origin.LRM, Origin.LRM, Origin.SRM, Origin.LRM, Origin.SRM]
    kinds = [(event.kind, event.step_index) for event in session.events]
    assert kinds == [(TriggerKind.STRATEGIC_PRIMING, 1), (TriggerKind.COGNITIVE_OFFLOAD, 4)]
    assert session.events[1].evidence == 0.9
    assert [draft.index for draft in session.discarded_drafts] == [4]
    assert session.steps[2].low_ppl_ratio == 0.5
    assert session.steps[4].low_ppl_ratio == 0.4
    assert session.finish_kind is SessionStatus.FINISHED_BY_BUDGET


def test_intervention_scenario_returns_control_after_m_steps() -> None:
    # Hesitant drafts with low ratios: the third accepted step requests
    # intervention; exactly one rectification step follows (its replacement
    # draft stays below rho), then control returns to the small model.
    config = SessionConfig(n=0, rho=0.85, k=3, m=1, budget=50, max_step_tokens=64)
    srm = ScriptedBackend(
        [_ten_token_step(2, hesitant=True) for _ in range(4)] + [_ten_token_step(2), ANSWER_STEP]
    )
    lrm = ScriptedBackend([_ten_token_step(0) for _ in range(3)])
    session = run_trigreason("question", config, srm, lrm)

    origins = [step.origin for step in session.steps]
    assert origins == [Origin.SRM, Origin.SRM, Origin.SRM, Origin.LRM, Origin.SRM]
    kinds = [(event.kind, event.step_index) for event in session.events]
    assert kinds == [(TriggerKind.INTERVENTION_REQUEST, 3)]
    assert session.events[0].evidence == (1, 2, 3)
    assert [draft.index for draft in session.discarded_drafts] == [4]


def test_overconfident_draft_extends_rectification_window() -> None:
    # During rectification an overconfident draft fires the cognitive trigger;
    # the decrement is guarded, so the window extends one extra step.
    config = SessionConfig(n=0, rho=0.85, k=2, m=1, budget=60, max_step_tokens=64)
    srm = ScriptedBackend(
        [
            _ten_token_step(0, hesitant=True),
            _ten_token_step(0, hesitant=True),  # fires intervention at step 2
            _ten_token_step(10),  # rectify step, draft overconfident: no decrement
            _ten_token_step(0),  # rectify step, decrements to 0
            _ten_token_step(0),  # accepted again
            _ten_token_step(0),
            ANSWER_STEP,
        ]
    )
    lrm = ScriptedBackend([_ten_token_step(0) for _ in range(4)])
    session = run_trigreason("question", config, srm, lrm)
    origins = [step.origin for step in session.steps]
    assert origins == [Origin.SRM, Origin.SRM, Origin.LRM, Origin.LRM, Origin.SRM, Origin.SRM]
    kinds = [(event.kind, event.step_index) for event in session.events]
    assert kinds == [
        (TriggerKind.INTERVENTION_REQUEST, 2),
        (TriggerKind.COGNITIVE_OFFLOAD, 3),
    ]


def test_all_triggers_disabled_collapses_to_srm_only() -> None:
    plan = random_plan(random.Random(7), max_horizon=20)
    plan = ScenarioPlan(
        n=0,
        m=plan.m,
        k=plan.k,
        rho=1.0,
        horizon=plan.horizon,
        srm_plan=tuple(
            StepPlan(low_tokens=p.low_tokens, hesitant=p.hesitant)
            for p in (plan.srm_plan + plan.lrm_plan)[: plan.horizon]
        ),
        lrm_plan=(),
    )
    config = plan.config(lexicon=())
    srm_a, _ = build_backends(plan)
    srm_b, _ = build_backends(plan)
    trig = run_trigreason("question", config, srm_a, ScriptedBackend([]))
    solo = run_single_model("question", config, srm_b, Origin.SRM)
    assert serialize_session(trig) == serialize_session(solo)


def test_trigreason_determinism() -> None:
    plan = random_plan(random.Random(11))
    config = plan.config()
    first = run_trigreason("question", config, *build_backends(plan))
    second = run_trigreason("question", config, *build_backends(plan))
    assert serialize_session(first) == serialize_session(second)


def test_skip_draft_during_rectify_saves_draft_calls() -> None:
    config = SessionConfig(
        n=0, rho=0.85, k=2, m=2, budget=60, max_step_tokens=64, skip_draft_during_rectify=True
    )
    srm = ScriptedBackend(
        [
            _ten_token_step(0, hesitant=True),
            _ten_token_step(0, hesitant=True),  # intervention at step 2
            _ten_token_step(0),  # step 5 draft (steps 3 and 4 are skipped)
            _ten_token_step(0),
            ANSWER_STEP,
        ]
    )
    lrm = ScriptedBackend([_ten_token_step(0) for _ in range(3)])
    session = run_trigreason("question", config, srm, lrm)
    origins = [step.origin for step in session.steps]
    assert origins == [Origin.SRM, Origin.SRM, Origin.LRM, Origin.LRM, Origin.SRM, Origin.SRM]
    assert session.discarded_drafts == []  # drafts skipped during the window


# ---------------------------------------------------------------------------
# Polling baseline
# ---------------------------------------------------------------------------

def test_specreason_accepts_and_rejects_by_score() -> None:
    config = SessionConfig(budget=30, max_step_tokens=64)
    srm = ScriptedBackend(
        [_ten_token_step(2), _ten_token_step(2), _ten_token_step(2), ANSWER_STEP],
        judge_replies=[],
    )
    lrm = ScriptedBackend([_ten_token_step(0)], judge_replies=["8", "6", "9"])
    session = run_specreason("question", config, srm, lrm)
    origins = [step.origin for step in session.steps]
    assert origins == [Origin.SRM, Origin.LRM, Origin.SRM]
    assert [draft.index for draft in session.discarded_drafts] == [2]
    assert [call.score for call in session.judge_calls] == [8, 6, 9]
    assert session.events == []


def test_specreason_threshold_zero_skips_judge_and_matches_srm_only() -> None:
    config = SessionConfig(judge_threshold=0, budget=30, max_step_tokens=64)
    steps = [_ten_token_step(2), _ten_token_step(3), _ten_token_step(1), ANSWER_STEP]
    spec = run_specreason("question", config, ScriptedBackend(list(steps)), ScriptedBackend([]))
    solo = run_single_model("question", config, ScriptedBackend(list(steps)), Origin.SRM)
    assert spec.judge_calls == []
    assert serialize_session(spec) == serialize_session(solo)


def test_specreason_unparseable_score_rejects_draft() -> None:
    config = SessionConfig(budget=10, max_step_tokens=64)
    srm = ScriptedBackend([_ten_token_step(2), ANSWER_STEP])
    lrm = ScriptedBackend([_ten_token_step(0)], judge_replies=["no clue"])
    session = run_specreason("question", config, srm, lrm)
    assert session.steps[0].origin is Origin.LRM
    assert session.judge_calls[0].score is None


def test_specreason_rejecting_judge_yields_zero_srm_tokens() -> None:
    config = SessionConfig(budget=100, max_step_tokens=64)
    srm = ScriptedBackend([_ten_token_step(2) for _ in range(10)] + [ANSWER_STEP])
    lrm = ScriptedBackend([_ten_token_step(0) for _ in range(10)], judge_replies=["6"] * 10)
    session = run_specreason("question", config, srm, lrm)
    assert all(step.origin is Origin.LRM for step in session.steps)
    srm_output_tokens = sum(s.token_count for s in session.steps if s.origin is Origin.SRM)
    assert srm_output_tokens == 0
    assert session.wasted_draft_tokens == 100


# ---------------------------------------------------------------------------
# Single-model baseline, finish rules, budget
# ---------------------------------------------------------------------------

def test_single_model_plain_run() -> None:
    config = SessionConfig(budget=30, max_step_tokens=64)
    client = ScriptedBackend([_ten_token_step(2), _ten_token_step(2), _ten_token_step(2), ANSWER_STEP])
    session = run_single_model("question", config, client, Origin.SRM)
    assert len(session.steps) == 3
    assert session.events == []
    assert all(step.origin is Origin.SRM for step in session.steps)


def test_budget_stops_after_crossing_step() -> None:
    # 4-token steps against budget=5: the second step crosses the budget and
    # completes; nothing is truncated mid-step.
    config = SessionConfig(budget=5, max_step_tokens=64)
    client = ScriptedBackend(
        [
            _step_of(["a ", "b ", "c ", "d "], [-0.1] * 4),
            _step_of(["e ", "f ", "g ", "h "], [-0.1] * 4),
            _step_of(["i ", "j ", "k ", "l "], [-0.1] * 4),
            ANSWER_STEP,
        ]
    )
    session = run_single_model("question", config, client, Origin.SRM)
    assert len(session.steps) == 2
    assert session.thinking_tokens_used == 8
    assert session.finish_kind is SessionStatus.FINISHED_BY_BUDGET
    assert session.thinking_tokens_used < config.budget + config.max_step_tokens


def test_finish_marker_ends_session() -> None:
    config = SessionConfig(budget=1000, max_step_tokens=64)
    client = ScriptedBackend(
        [
            _step_of(["fine "], [-0.1]),
            _step_of(["done", "</think>"], [-0.1, -0.1]),
            ANSWER_STEP,
        ]
    )
    session = run_single_model("question", config, client, Origin.SRM)
    assert len(session.steps) == 2
    assert session.finish_kind is SessionStatus.FINISHED_BY_MARKER


def test_eos_ends_session() -> None:
    config = SessionConfig(budget=1000, max_step_tokens=64)
    client = ScriptedBackend(
        [_step_of(["end "], [-0.1], finish=FinishReason.END_OF_SEQUENCE), ANSWER_STEP]
    )
    session = run_single_model("question", config, client, Origin.SRM)
    assert session.finish_kind is SessionStatus.FINISHED_BY_EOS


def _plain_step(index: int = 1, text: str = "plain ", finish=FinishReason.STOP_SEQUENCE) -> ReasoningStep:
    tokens = (TokenSample(text=text, logprob=-0.1),)
    return ReasoningStep(
        index=index,
        origin=Origin.SRM,
        tokens=tokens,
        text=text,
        low_ppl_ratio=0.0,
        hesitation=False,
        finish=finish,
    )


def test_check_finished_priorities() -> None:
    config = SessionConfig()
    marker_step = _plain_step(text="x</think>y", finish=FinishReason.END_OF_SEQUENCE)
    assert check_finished(marker_step, used=0, config=config) is SessionStatus.FINISHED_BY_MARKER
    eos_step = _plain_step(finish=FinishReason.END_OF_SEQUENCE)
    assert check_finished(eos_step, used=10**9, config=config) is SessionStatus.FINISHED_BY_EOS
    plain = _plain_step()
    assert check_finished(plain, used=8192, config=config) is SessionStatus.FINISHED_BY_BUDGET
    assert check_finished(plain, used=8191, config=config) is SessionStatus.CONTINUE


def test_budget_exhausted_without_answer_flag() -> None:
    config = SessionConfig(budget=4, max_step_tokens=64)
    client = ScriptedBackend([_step_of(["a ", "b ", "c ", "d "], [-0.1] * 4)])  # no answer entry
    session = run_single_model("question", config, client, Origin.SRM)
    assert session.finish_kind is SessionStatus.FINISHED_BY_BUDGET
    assert session.answer_text is None
    assert session.answer_error is not None
    assert session.budget_exhausted_without_answer


def test_backend_error_carries_partial_session() -> None:
    config = SessionConfig(budget=1000, max_step_tokens=64)
    client = ScriptedBackend([_ten_token_step(2)])  # runs dry mid-thinking
    with pytest.raises(ProtocolError) as excinfo:
        run_single_model("question", config, client, Origin.SRM)
    partial = excinfo.value.partial_session
    assert len(partial.steps) == 1


# ---------------------------------------------------------------------------
# Reference-oracle equivalence on randomized scenarios
# ---------------------------------------------------------------------------

def _assert_rectification_bound(session, config) -> None:
    # Between an intervention request and the next accepted SRM step there
    # are at most m large-model steps plus any whose offload trigger fired.
    cognitive_steps = {
        e.step_index for e in session.events if e.kind is TriggerKind.COGNITIVE_OFFLOAD
    }
    origin_by_index = {step.index: step.origin for step in session.steps}
    request_steps = [
        e.step_index for e in session.events if e.kind is TriggerKind.INTERVENTION_REQUEST
    ]
    last_index = session.steps[-1].index if session.steps else 0
    for start in request_steps:
        lrm_span = 0
        for t in range(start + 1, last_index + 1):
            if origin_by_index[t] is Origin.SRM:
                break
            if t not in cognitive_steps:
                lrm_span += 1
        assert lrm_span <= config.m


def _assert_matches_oracle(plan: ScenarioPlan) -> None:
    config = plan.config()
    srm, lrm = build_backends(plan)
    session = run_trigreason("question", config, srm, lrm)
    expected = reference_trace(plan.oracle_scenario())

    assert [step.origin.value for step in session.steps] == expected.origins
    actual_events = [
        (event.kind.value, event.step_index, event.evidence) for event in session.events
    ]
    assert actual_events == expected.events
    assert [draft.index for draft in session.discarded_drafts] == expected.discarded_steps
    # Call accounting: one extra small-model call produced the answer.
    assert srm.calls - 1 == expected.srm_calls
    assert lrm.calls == expected.lrm_calls
    assert session.thinking_tokens_used < config.budget + config.max_step_tokens
    _assert_rectification_bound(session, config)

    # Disabled trigger families must leave no trace in the event log.
    kinds = {event.kind for event in session.events}
    if config.rho == 1.0:
        assert TriggerKind.COGNITIVE_OFFLOAD not in kinds
    if config.n == 0:
        assert TriggerKind.STRATEGIC_PRIMING not in kinds
    if not config.lexicon:
        assert TriggerKind.INTERVENTION_REQUEST not in kinds


def test_orchestrator_matches_reference_on_random_scenarios() -> None:
    rng = random.Random(20240817)
    for _ in range(120):
        _assert_matches_oracle(random_plan(rng))


# ---------------------------------------------------------------------------
# Trace round trips
# ---------------------------------------------------------------------------

def _mixed_session():
    plan = random_plan(random.Random(5))
    config = plan.config()
    return run_trigreason("question", config, *build_backends(plan)), config


def test_serialize_deserialize_round_trip() -> None:
    session, _ = _mixed_session()
    text = serialize_session(session)
    rebuilt = deserialize_session(text)
    assert serialize_session(rebuilt) == text


def test_session_replays_through_replay_backend(tmp_path) -> None:
    session, config = _mixed_session()
    path = tmp_path / "trace.jsonl"
    path.write_text(serialize_session(session), encoding="utf-8")
    records = read_trace_records(path)
    srm_replay = ReplayBackend(records, origin=Origin.SRM)
    lrm_replay = ReplayBackend(records, origin=Origin.LRM)
    replayed = run_trigreason("question", config, srm_replay, lrm_replay)
    assert serialize_session(replayed) == serialize_session(session)


def _trace_records_of(text: str):
    import json

    return [json.loads(line) for line in text.splitlines() if line.strip()]


def test_specreason_replays_through_replay_backend(tmp_path) -> None:
    config = SessionConfig(budget=30, max_step_tokens=64)
    srm = ScriptedBackend([_ten_token_step(2), _ten_token_step(2), _ten_token_step(2), ANSWER_STEP])
    lrm = ScriptedBackend([_ten_token_step(0)], judge_replies=["8", "6", "9"])
    session = run_specreason("question", config, srm, lrm)
    records = _trace_records_of(serialize_session(session))
    srm_replay = ReplayBackend(records, origin=Origin.SRM)
    lrm_replay = ReplayBackend(
        [r for r in records if not r.get("discarded")],
        origin=Origin.LRM,
        judge_replies=[str(call.score) for call in session.judge_calls],
    )
    replayed = run_specreason("question", config, srm_replay, lrm_replay)
    assert [s.origin for s in replayed.steps] == [s.origin for s in session.steps]
    assert replayed.answer_text == session.answer_text


def _is_accepted_step_line(line: str) -> bool:
    return '"idx"' in line and '"discarded":false' in line


def test_idx_gap_raises_schema_error_with_line_number() -> None:
    config = SessionConfig(budget=50, max_step_tokens=64)
    client = ScriptedBackend([_ten_token_step(1) for _ in range(5)] + [ANSWER_STEP])
    session = run_single_model("question", config, client, Origin.SRM)
    lines = serialize_session(session).splitlines()
    step_lines = [i for i, line in enumerate(lines) if _is_accepted_step_line(line)]
    assert len(step_lines) >= 2
    removed = step_lines[1]
    del lines[removed]
    # The gap is detected at the next accepted-step record after the removal.
    gap_line = next(i for i, line in enumerate(lines) if _is_accepted_step_line(line) and i >= removed)
    with pytest.raises(SchemaError) as excinfo:
        deserialize_session("\n".join(lines) + "\n")
    assert excinfo.value.line_number == gap_line + 1
    assert "line" in str(excinfo.value)


def test_missing_summary_raises_schema_error() -> None:
    session, _ = _mixed_session()
    lines = serialize_session(session).splitlines()
    body = "\n".join(line for line in lines if '"summary"' not in line)
    with pytest.raises(SchemaError):
        deserialize_session(body + "\n")


# ---------------------------------------------------------------------------
# Token accounting across backends
# ---------------------------------------------------------------------------

def test_backend_token_totals_match_session_accounting() -> None:
    plan = random_plan(random.Random(13))
    config = plan.config()
    srm, lrm = build_backends(plan)
    session = run_trigreason("question", config, srm, lrm)

    srm_step_tokens = sum(s.token_count for s in session.steps if s.origin is Origin.SRM)
    lrm_step_tokens = sum(s.token_count for s in session.steps if s.origin is Origin.LRM)
    answer_tokens = len(session.answer_record.tokens) if session.answer_record else 0
    answer_srm = answer_tokens if config.answer_model is Origin.SRM else 0
    answer_lrm = answer_tokens if config.answer_model is Origin.LRM else 0

    assert srm.completion_tokens_served == srm_step_tokens + session.wasted_draft_tokens + answer_srm
    assert lrm.completion_tokens_served == lrm_step_tokens + answer_lrm
