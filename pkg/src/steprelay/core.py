"""Domain types and configuration shared by all modules.

Everything here is an immutable value type with no I/O; instances are safe
to share across threads without coordination.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Base class for configuration problems."""


class RangeError(ConfigError):
    """A config field is outside its declared range.

    ``field_name`` identifies the offending field so CLI errors can name it.
    """

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class EmptyLexicon(ConfigError):
    """The trigger-based strategy was configured without hesitation phrases."""


class Origin(Enum):
    """Which model produced a step (or writes the final answer)."""

    SRM = "SRM"
    LRM = "LRM"


class Strategy(Enum):
    """Session orchestration strategy."""

    TRIGREASON = "trigreason"
    SPECREASON = "specreason"
    SRM_ONLY = "srm-only"
    LRM_ONLY = "lrm-only"


class TriggerKind(Enum):
    """The three intervention triggers."""

    STRATEGIC_PRIMING = "StrategicPriming"
    COGNITIVE_OFFLOAD = "CognitiveOffload"
    INTERVENTION_REQUEST = "InterventionRequest"


class FinishReason(Enum):
    """Why a single generation call stopped."""

    STOP_SEQUENCE = "stop"
    LENGTH = "length"
    END_OF_SEQUENCE = "eos"


# Hesitation phrases shipped as the built-in default lexicon.
DEFAULT_HESITATION_PHRASES: tuple[str, ...] = (
    "wait",
    "hmm",
    "debatable",
    "maybe",
    "perhaps",
    "could be",
    "might be",
    "possibly",
    "on the other hand",
    "alternatively",
    "another possibility",
    "or perhaps",
    "actually",
    "now that I think about it",
    "I think I made a mistake",
    "let me reconsider",
    "not sure",
    "I'm not entirely sure",
    "this might be wrong",
    "I could be mistaken",
    "unless I'm wrong",
)

DEFAULT_FINISH_MARKERS: tuple[str, ...] = ("</think>",)

DEFAULT_JUDGE_PROMPT = (
    "Rate the following candidate reasoning step from 0-9 for usefulness and "
    "correctness given the partial solution; reply with one integer.\n\n"
    "Partial solution:\n{context}\n\nCandidate step:\n{candidate}\n\nScore:"
)


@dataclass(frozen=True)
class TokenSample:
    """One generated token with its natural-log probability.

    Args:
        text: Token surface form.
        logprob: Natural-log probability the producing model assigned to the
            token, finite and <= 0 when available. ``None`` when the backend
            did not return logprobs (remote large-model APIs may omit them).
        special: End-of-sequence / control token flag. Special tokens are
            excluded from perplexity statistics by callers.
    """

    text: str
    logprob: float | None = None
    special: bool = False

    def __post_init__(self) -> None:
        if self.logprob is not None:
            if not math.isfinite(self.logprob):
                raise ValueError(f"token logprob must be finite, got {self.logprob}")
            if self.logprob > 0:
                raise ValueError(f"token logprob must be <= 0, got {self.logprob}")


@dataclass(frozen=True)
class ReasoningStep:
    """A delimited span of tokens produced by one model.

    Args:
        index: 1-based step counter within the trajectory.
        origin: Which model generated the step.
        tokens: The step's token samples, in generation order.
        text: Concatenation of the tokens' surface forms.
        low_ppl_ratio: Fraction of the step's non-special tokens whose
            perplexity falls below the configured threshold. Present exactly
            when ``origin`` is the small model (large-model logprobs may be
            unavailable from remote APIs).
        hesitation: Whether the step text matched the hesitation lexicon.
        discarded_draft: True for small-model drafts that were generated but
            replaced by a large-model step. Discarded drafts never enter the
            trajectory.
        finish: Why generation of this step stopped.
        prompt_tokens: Prompt size of the call that produced the step, used
            for cumulative-prefix cost accounting.
    """

    index: int
    origin: Origin
    tokens: tuple[TokenSample, ...]
    text: str
    low_ppl_ratio: float | None
    hesitation: bool
    discarded_draft: bool = False
    finish: FinishReason = FinishReason.STOP_SEQUENCE
    prompt_tokens: int = 0

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"step index must be >= 1, got {self.index}")
        joined = "".join(sample.text for sample in self.tokens)
        if joined != self.text:
            raise ValueError("step text must equal the concatenation of its tokens")
        if (self.low_ppl_ratio is not None) != (self.origin is Origin.SRM):
            raise ValueError("low_ppl_ratio must be present exactly for SRM-origin steps")
        if self.discarded_draft and self.origin is not Origin.SRM:
            raise ValueError("only SRM drafts can be discarded")

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TriggerEvent:
    """A record of one trigger firing.

    ``evidence`` is kind-specific: the low-perplexity ratio for cognitive
    offload, the consecutive hesitant step indices for an intervention
    request, and ``None`` for strategic priming.
    """

    kind: TriggerKind
    step_index: int
    evidence: float | tuple[int, ...] | None = None

    def to_dict(self) -> dict[str, Any]:
        evidence: Any = self.evidence
        if isinstance(evidence, tuple):
            evidence = list(evidence)
        return {"kind": self.kind.value, "step_index": self.step_index, "evidence": evidence}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TriggerEvent:
        evidence = data.get("evidence")
        if isinstance(evidence, list):
            evidence = tuple(int(i) for i in evidence)
        return cls(kind=TriggerKind(data["kind"]), step_index=int(data["step_index"]), evidence=evidence)


# ---------------------------------------------------------------------------
# Session configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SessionConfig:
    """All protocol knobs for one reasoning session.

    Field defaults are the reference operating point; ``validate_config``
    checks ranges and substitutes defaults for fields explicitly set to
    ``None``.

    Args:
        n: Number of initial steps generated by the large model (priming).
            0 disables priming.
        m: Number of large-model steps granted after an intervention request.
        k: Consecutive hesitation-flagged steps needed to request intervention.
        tau: Per-token perplexity threshold; tokens below it count as
            low-perplexity.
        rho: Coverage threshold on the low-perplexity ratio; the offload
            trigger fires strictly above it, so ``rho=1`` disables it.
        budget: Maximum thinking tokens across the trajectory.
        temperature: Sampling temperature forwarded to backends.
        top_p: Nucleus sampling parameter forwarded to backends.
        step_delimiter: Stop sequence that bounds one reasoning step.
        max_step_tokens: Per-call token cap so a step always terminates.
        lexicon: Hesitation phrases; empty disables the intervention trigger.
        strategy: Orchestration strategy for CLI dispatch.
        judge_threshold: Minimum judge score that accepts a draft step
            under the polling baseline.
        answer_model: Which model writes the final answer after thinking.
        finish_markers: Substrings whose appearance ends the thinking phase.
        skip_draft_during_rectify: Skip small-model drafting while a
            rectification window is open (optimization; default keeps the
            faithful always-draft behavior).
        judge_prompt: Override for the judge prompt template; must contain
            ``{context}`` and ``{candidate}`` placeholders.
        count_judge_prompt_tokens: Include judge-call prompt tokens in cost
            estimates.
    """

    n: int = 20
    m: int = 1
    k: int = 3
    tau: float = 1.05
    rho: float = 0.85
    budget: int = 8192
    temperature: float = 0.6
    top_p: float = 0.95
    step_delimiter: str = "\n\n"
    max_step_tokens: int = 512
    lexicon: tuple[str, ...] = DEFAULT_HESITATION_PHRASES
    strategy: Strategy = Strategy.TRIGREASON
    judge_threshold: int = 7
    answer_model: Origin = Origin.SRM
    finish_markers: tuple[str, ...] = DEFAULT_FINISH_MARKERS
    skip_draft_during_rectify: bool = False
    judge_prompt: str = DEFAULT_JUDGE_PROMPT
    count_judge_prompt_tokens: bool = True

    def to_dict(self) -> dict[str, Any]:
        """Serialize to plain JSON/TOML-compatible types."""
        return {
            "n": self.n,
            "m": self.m,
            "k": self.k,
            "tau": self.tau,
            "rho": self.rho,
            "budget": self.budget,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "step_delimiter": self.step_delimiter,
            "max_step_tokens": self.max_step_tokens,
            "lexicon": list(self.lexicon),
            "strategy": self.strategy.value,
            "judge_threshold": self.judge_threshold,
            "answer_model": self.answer_model.value,
            "finish_markers": list(self.finish_markers),
            "skip_draft_during_rectify": self.skip_draft_during_rectify,
            "judge_prompt": self.judge_prompt,
            "count_judge_prompt_tokens": self.count_judge_prompt_tokens,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SessionConfig:
        """Build a config from a mapping; absent keys keep their defaults.

        Raises:
            RangeError: On keys that do not name a config field.
        """
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise RangeError(sorted(unknown)[0], "unknown config field")
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if value is None:
                continue
            if key == "strategy" and not isinstance(value, Strategy):
                try:
                    value = Strategy(value)
                except ValueError:
                    raise RangeError("strategy", f"unknown strategy {value!r}") from None
            elif key == "answer_model" and not isinstance(value, Origin):
                try:
                    value = Origin(value)
                except ValueError:
                    raise RangeError("answer_model", f"unknown model {value!r}") from None
            elif key in ("lexicon", "finish_markers"):
                value = tuple(str(item) for item in value)
            kwargs[key] = value
        return cls(**kwargs)


_CONFIG_DEFAULTS = SessionConfig()


def validate_config(config: SessionConfig) -> SessionConfig:
    """Check every config invariant, filling ``None`` fields with defaults.

    Idempotent: validating an already-valid config returns an equal value.

    Raises:
        RangeError: Naming the first offending field.
        EmptyLexicon: When the trigger-based strategy has no hesitation
            phrases; the intervention trigger would be silently dead.
    """
    filled: dict[str, Any] = {}
    for field_spec in dataclasses.fields(SessionConfig):
        if getattr(config, field_spec.name) is None:
            filled[field_spec.name] = getattr(_CONFIG_DEFAULTS, field_spec.name)
    if filled:
        config = dataclasses.replace(config, **filled)

    def require(name: str, ok: bool, expected: str) -> None:
        if not ok:
            raise RangeError(name, f"expected {expected}, got {getattr(config, name)!r}")

    require("n", isinstance(config.n, int) and config.n >= 0, "integer >= 0")
    require("m", isinstance(config.m, int) and config.m >= 0, "integer >= 0")
    require("k", isinstance(config.k, int) and config.k >= 1, "integer >= 1")
    require("tau", math.isfinite(config.tau) and config.tau > 0, "real > 0")
    require("rho", math.isfinite(config.rho) and 0 < config.rho <= 1, "real in (0, 1]")
    require("budget", isinstance(config.budget, int) and config.budget >= 1, "integer >= 1")
    require("temperature", math.isfinite(config.temperature) and config.temperature >= 0, "real >= 0")
    require("top_p", math.isfinite(config.top_p) and 0 < config.top_p <= 1, "real in (0, 1]")
    require("step_delimiter", bool(config.step_delimiter), "non-empty string")
    require(
        "max_step_tokens",
        isinstance(config.max_step_tokens, int) and config.max_step_tokens >= 1,
        "integer >= 1",
    )
    require(
        "judge_threshold",
        isinstance(config.judge_threshold, int) and 0 <= config.judge_threshold <= 9,
        "integer in [0, 9]",
    )
    if "{context}" not in config.judge_prompt or "{candidate}" not in config.judge_prompt:
        raise RangeError("judge_prompt", "template must contain {context} and {candidate}")
    if config.strategy is Strategy.TRIGREASON and not config.lexicon:
        raise EmptyLexicon("trigger strategy configured with an empty hesitation lexicon")
    return config


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a TOML config file whose keys mirror ``SessionConfig`` fields.

    Returns the raw mapping; merge with CLI overrides before building the
    config so flag > file > default precedence holds.
    """
    with open(path, "rb") as handle:
        data = tomllib.load(handle)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a table at top level")
    return data


# ---------------------------------------------------------------------------
# Edge-cloud pricing and timing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Prices and timings for the edge-cloud accounting model.

    Prices are currency per token with input and output separated; the small
    model defaults to free because it runs on local edge hardware.

    Args:
        srm_input_price: Currency per small-model prompt token.
        srm_output_price: Currency per small-model completion token.
        lrm_input_price: Currency per large-model prompt token.
        lrm_output_price: Currency per large-model completion token.
        rtt_latency: Seconds per large-model round trip over the network.
        srm_token_latency: Seconds per token generated on the edge.
        lrm_token_latency: Seconds per token generated in the cloud.
    """

    srm_input_price: float = 0.0
    srm_output_price: float = 0.0
    lrm_input_price: float = 0.0
    lrm_output_price: float = 0.0
    rtt_latency: float = 0.0
    srm_token_latency: float = 0.0
    lrm_token_latency: float = 0.0

    def __post_init__(self) -> None:
        for field_spec in dataclasses.fields(self):
            value = getattr(self, field_spec.name)
            if not math.isfinite(value) or value < 0:
                raise RangeError(field_spec.name, f"expected real >= 0, got {value!r}")

    @classmethod
    def illustrative(cls) -> CostModel:
        """Illustrative deployment: free local small model, metered cloud API.

        The prices mirror a public large-model API list (USD per token) and
        the timings a mid-range edge box; they are documentation defaults,
        not measurements.
        """
        return cls(
            srm_input_price=0.0,
            srm_output_price=0.0,
            lrm_input_price=0.27e-6,
            lrm_output_price=1.10e-6,
            rtt_latency=0.5,
            srm_token_latency=0.02,
            lrm_token_latency=0.033,
        )

    def to_dict(self) -> dict[str, float]:
        return {field_spec.name: getattr(self, field_spec.name) for field_spec in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CostModel:
        known = {field_spec.name for field_spec in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise RangeError(sorted(unknown)[0], "unknown cost model field")
        return cls(**{key: float(value) for key, value in data.items()})


def load_cost_model_file(path: str | Path) -> CostModel:
    """Read a TOML cost model file with ``CostModel`` field names as keys."""
    with open(path, "rb") as handle:
        data = tomllib.load(handle)
    return CostModel.from_dict(data)
