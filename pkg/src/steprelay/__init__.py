"""Step-level collaborative reasoning between a small and a large model."""

from .core import (
    ConfigError,
    CostModel,
    DEFAULT_HESITATION_PHRASES,
    EmptyLexicon,
    FinishReason,
    Origin,
    RangeError,
    ReasoningStep,
    SessionConfig,
    Strategy,
    TokenSample,
    TriggerEvent,
    TriggerKind,
    validate_config,
)
from .triggers import (
    DomainError,
    EmptyStep,
    HesitationLexicon,
    InterventionState,
    cognitive_trigger,
    detect_hesitation,
    intervention_trigger,
    is_priming,
    low_ppl_ratio,
    token_perplexity,
)
from .backends import (
    BackendError,
    HttpBackend,
    LogprobsUnavailable,
    ProtocolError,
    ReplayBackend,
    ScriptedBackend,
    StepRequest,
    StepResponse,
    TransportError,
    UnparseableScore,
    generate_step,
    judge_step,
    parse_completion_response,
)
from .orchestrator import (
    SchemaError,
    Session,
    SessionStatus,
    check_finished,
    deserialize_session,
    read_trace,
    run_single_model,
    run_specreason,
    run_trigreason,
    serialize_session,
    write_trace,
)
from .metrics import (
    AnswerKind,
    EmptyInput,
    EmptySession,
    SessionReport,
    build_report,
    estimate_cost,
    estimate_latency,
    extract_answer,
    pass_at_1,
    smt_percentage,
    trigger_activation_report,
)

__version__ = "0.1.0"
