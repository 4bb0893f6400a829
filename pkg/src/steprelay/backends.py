"""Uniform model-client abstraction.

Three interchangeable clients expose ``complete(StepRequest) -> StepResponse``:
a live OpenAI-compatible HTTP endpoint, a scripted mock, and a recorded-trace
replayer. The judge call used by the polling baseline lives here too.

Clients are shareable handles: each call is independent, and the only shared
mutable state is the HTTP connection pool, which ``requests`` synchronizes
internally.
"""

from __future__ import annotations

import dataclasses
import json
import re
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import requests

from .core import DEFAULT_JUDGE_PROMPT, FinishReason, Origin, TokenSample


class BackendError(Exception):
    """Base class for model-client failures."""


class TransportError(BackendError):
    """Connection or timeout failure; retryable."""


class ProtocolError(BackendError):
    """Malformed or unexpected response body."""


class LogprobsUnavailable(BackendError):
    """The endpoint ignored the logprobs request and the caller required it."""


class UnparseableScore(BackendError):
    """The judge reply contained no integer in [0, 9]."""


@dataclass(frozen=True)
class StepRequest:
    """One step-granular generation request.

    Args:
        context: The question plus all accepted step texts so far, joined by
            the step delimiter.
        stop: Stop sequences: the step delimiter plus any finish markers.
        max_tokens: Per-call token cap.
        temperature: Sampling temperature.
        top_p: Nucleus sampling parameter.
        want_logprobs: Require a logprob on every returned token.
    """

    context: str
    stop: tuple[str, ...]
    max_tokens: int
    temperature: float
    top_p: float
    want_logprobs: bool

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class StepResponse:
    """One step's worth of generated tokens plus accounting fields."""

    tokens: tuple[TokenSample, ...]
    finish_reason: FinishReason
    wall_time: float = 0.0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def text(self) -> str:
        return "".join(sample.text for sample in self.tokens)


class Client(Protocol):
    def complete(self, request: StepRequest) -> StepResponse: ...


def generate_step(
    client: Client,
    request: StepRequest,
    *,
    retries: int = 3,
    initial_backoff: float = 0.25,
    sleep: Callable[[float], None] = time.sleep,
) -> StepResponse:
    """Run one generation call with bounded retries.

    Transport failures are retried ``retries`` times with exponential backoff
    starting at ``initial_backoff`` seconds, then surfaced; bounded retries
    keep latency accounting honest on lossy edge-cloud links.

    Raises:
        TransportError: After the retry budget is exhausted.
        ProtocolError: On malformed response bodies.
        LogprobsUnavailable: When logprobs were required but missing.
    """
    if not request.context:
        raise ValueError("request context must be non-empty")
    attempt = 0
    while True:
        try:
            response = client.complete(request)
            break
        except TransportError:
            attempt += 1
            if attempt > retries:
                raise
            sleep(initial_backoff * 2 ** (attempt - 1))
    if request.want_logprobs:
        if any(sample.logprob is None for sample in response.tokens):
            raise LogprobsUnavailable("endpoint returned tokens without logprobs")
        if response.completion_tokens != len(response.tokens):
            # Per-token data is authoritative once logprobs were required.
            response = dataclasses.replace(response, completion_tokens=len(response.tokens))
    return response


# ---------------------------------------------------------------------------
# Response parsing (OpenAI-compatible wire format)
# ---------------------------------------------------------------------------

_FINISH_REASONS = {
    "stop": FinishReason.STOP_SEQUENCE,
    "length": FinishReason.LENGTH,
    "eos": FinishReason.END_OF_SEQUENCE,
    "end_of_sequence": FinishReason.END_OF_SEQUENCE,
}


def _map_finish_reason(raw: Any) -> FinishReason:
    reason = _FINISH_REASONS.get(str(raw))
    if reason is None:
        raise ProtocolError(f"unknown finish reason {raw!r}")
    return reason


def _split_plain_text(text: str) -> tuple[TokenSample, ...]:
    # Whitespace-preserving chunks; used only when the server omits logprobs.
    return tuple(TokenSample(text=chunk, logprob=None) for chunk in re.findall(r"\S+\s*|\s+", text))


def parse_completion_response(body: bytes) -> StepResponse:
    """Parse the JSON body of a ``/v1/completions`` call into a StepResponse.

    Reads token texts and token logprobs from the first choice; servers that
    omit logprobs yield whitespace-split token samples with ``logprob=None``.

    Raises:
        ProtocolError: On missing choices, mismatched token/logprob list
            lengths, undecodable JSON, or an unknown finish reason.
    """
    try:
        data = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"response body is not valid JSON: {exc}") from exc
    choices = data.get("choices")
    if not isinstance(choices, list) or not choices:
        raise ProtocolError("response has no choices")
    choice = choices[0]

    logprob_block = choice.get("logprobs")
    if isinstance(logprob_block, dict) and logprob_block.get("tokens") is not None:
        texts = logprob_block.get("tokens")
        logprobs = logprob_block.get("token_logprobs")
        if not isinstance(texts, list) or not isinstance(logprobs, list):
            raise ProtocolError("logprobs block missing tokens or token_logprobs")
        if len(texts) != len(logprobs):
            raise ProtocolError(
                f"token/logprob length mismatch: {len(texts)} vs {len(logprobs)}"
            )
        tokens = tuple(
            TokenSample(text=str(text), logprob=None if lp is None else float(lp))
            for text, lp in zip(texts, logprobs)
        )
    else:
        tokens = _split_plain_text(str(choice.get("text", "")))

    usage = data.get("usage") or {}
    completion_tokens = int(usage.get("completion_tokens", len(tokens)))
    prompt_tokens = int(usage.get("prompt_tokens", 0))
    return StepResponse(
        tokens=tokens,
        finish_reason=_map_finish_reason(choice.get("finish_reason", "stop")),
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
    )


def parse_chat_response(body: bytes) -> StepResponse:
    """Parse a ``/v1/chat/completions`` body; the chat-shaped logprob layout."""
    try:
        data = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"response body is not valid JSON: {exc}") from exc
    choices = data.get("choices")
    if not isinstance(choices, list) or not choices:
        raise ProtocolError("response has no choices")
    choice = choices[0]

    logprob_block = choice.get("logprobs")
    if isinstance(logprob_block, dict) and isinstance(logprob_block.get("content"), list):
        tokens = tuple(
            TokenSample(
                text=str(item.get("token", "")),
                logprob=None if item.get("logprob") is None else float(item["logprob"]),
            )
            for item in logprob_block["content"]
        )
    else:
        message = choice.get("message") or {}
        tokens = _split_plain_text(str(message.get("content", "")))

    usage = data.get("usage") or {}
    return StepResponse(
        tokens=tokens,
        finish_reason=_map_finish_reason(choice.get("finish_reason", "stop")),
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", len(tokens))),
    )


# ---------------------------------------------------------------------------
# Judge call (polling baseline)
# ---------------------------------------------------------------------------

_INTEGER = re.compile(r"\d+")


def parse_judge_score(reply: str) -> int | None:
    """First integer in [0, 9] appearing in the reply, or None."""
    for match in _INTEGER.finditer(reply):
        value = int(match.group())
        if 0 <= value <= 9:
            return value
    return None


def score_step(
    client: Client,
    context: str,
    candidate_step: str,
    template: str = DEFAULT_JUDGE_PROMPT,
) -> tuple[int | None, int, int]:
    """Judge call returning (score or None, prompt_tokens, completion_tokens).

    The token counts feed cost and latency accounting; an unparseable reply
    yields ``None`` so callers can treat it as a rejection.
    """
    if not candidate_step:
        raise ValueError("candidate step must be non-empty")
    prompt = template.format(context=context, candidate=candidate_step)
    judge_text = getattr(client, "judge_text", None)
    if judge_text is not None:
        reply = judge_text(prompt)
        prompt_tokens = len(prompt.split())
        completion_tokens = len(reply.split())
    else:
        response = generate_step(
            client,
            StepRequest(
                context=prompt,
                stop=("\n",),
                max_tokens=16,
                temperature=0.0,
                top_p=1.0,
                want_logprobs=False,
            ),
        )
        reply = response.text
        prompt_tokens = response.prompt_tokens
        completion_tokens = response.completion_tokens
    return parse_judge_score(reply), prompt_tokens, completion_tokens


def judge_step(
    client: Client,
    context: str,
    candidate_step: str,
    template: str = DEFAULT_JUDGE_PROMPT,
) -> int:
    """Score a candidate reasoning step in [0, 9] via the large model.

    Raises:
        UnparseableScore: When no in-range integer appears in the reply.
    """
    score, _, _ = score_step(client, context, candidate_step, template)
    if score is None:
        raise UnparseableScore("judge reply contained no integer in [0, 9]")
    return score


# ---------------------------------------------------------------------------
# Scripted mock
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScriptedStep:
    """One pre-recorded step for the scripted mock."""

    tokens: tuple[TokenSample, ...]
    finish: FinishReason = FinishReason.STOP_SEQUENCE
    prompt_tokens: int | None = None


def make_step(
    texts: Sequence[str],
    logprobs: Sequence[float | None],
    finish: FinishReason = FinishReason.STOP_SEQUENCE,
    special: Sequence[bool] | None = None,
) -> ScriptedStep:
    """Convenience builder pairing token texts with logprobs."""
    if len(texts) != len(logprobs):
        raise ValueError("texts and logprobs must have equal length")
    flags = special if special is not None else [False] * len(texts)
    tokens = tuple(
        TokenSample(text=text, logprob=lp, special=flag)
        for text, lp, flag in zip(texts, logprobs, flags)
    )
    return ScriptedStep(tokens=tokens, finish=finish)


class ScriptedBackend:
    """Mock client that replays a fixed script of steps and judge replies.

    Honors ``max_tokens`` by truncating an entry and reporting ``length``;
    otherwise tokens pass through unchanged, in order. Tracks cumulative
    completion tokens served so token accounting can be audited.
    """

    def __init__(
        self,
        steps: Iterable[ScriptedStep] = (),
        judge_replies: Iterable[str] = (),
    ) -> None:
        self._steps: deque[ScriptedStep] = deque(steps)
        self._judge_replies: deque[str] = deque(judge_replies)
        self.completion_tokens_served = 0
        self.calls = 0

    def complete(self, request: StepRequest) -> StepResponse:
        if not self._steps:
            raise ProtocolError("scripted backend exhausted")
        entry = self._steps.popleft()
        self.calls += 1
        tokens = entry.tokens
        finish = entry.finish
        if len(tokens) > request.max_tokens:
            tokens = tokens[: request.max_tokens]
            finish = FinishReason.LENGTH
        prompt_tokens = entry.prompt_tokens
        if prompt_tokens is None:
            prompt_tokens = len(request.context.split())
        self.completion_tokens_served += len(tokens)
        return StepResponse(
            tokens=tokens,
            finish_reason=finish,
            wall_time=0.0,
            prompt_tokens=prompt_tokens,
            completion_tokens=len(tokens),
        )

    def judge_text(self, prompt: str) -> str:
        if not self._judge_replies:
            raise ProtocolError("scripted judge exhausted")
        return self._judge_replies.popleft()

    @property
    def remaining_steps(self) -> int:
        return len(self._steps)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        """Load a script from JSON.

        Schema: ``{"steps": [{"tokens": [...], "logprobs": [...],
        "finish": "stop", "special": [...]}], "judge": ["8", ...]}``.
        """
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
        steps = [
            make_step(
                entry["tokens"],
                entry["logprobs"],
                finish=FinishReason(entry.get("finish", "stop")),
                special=entry.get("special"),
            )
            for entry in data.get("steps", [])
        ]
        return cls(steps=steps, judge_replies=[str(reply) for reply in data.get("judge", [])])


# ---------------------------------------------------------------------------
# Recorded-trace replayer
# ---------------------------------------------------------------------------

def record_to_response(record: Mapping[str, Any]) -> StepResponse:
    """Build a StepResponse from one trace step record."""
    texts = record["tokens"]
    logprobs = record["logprobs"]
    if len(texts) != len(logprobs):
        raise ProtocolError(
            f"trace record idx {record.get('idx')}: token/logprob length mismatch"
        )
    tokens = tuple(
        TokenSample(text=str(text), logprob=None if lp is None else float(lp))
        for text, lp in zip(texts, logprobs)
    )
    return StepResponse(
        tokens=tokens,
        finish_reason=FinishReason(record.get("finish", "stop")),
        wall_time=0.0,
        prompt_tokens=int(record.get("prompt_tokens", 0)),
        completion_tokens=len(tokens),
    )


class ReplayBackend:
    """Client that serves recorded step responses in original order.

    Feeding the same recorded trace yields byte-identical response sequences
    across runs; requests only advance the cursor, their content is ignored.
    """

    def __init__(
        self,
        records: Sequence[Mapping[str, Any]],
        origin: Origin | None = None,
        judge_replies: Iterable[str] = (),
    ) -> None:
        selected = [
            record
            for record in records
            if "idx" in record and (origin is None or record.get("origin") == origin.value)
        ]
        indices = [int(record["idx"]) for record in selected]
        if any(b < a for a, b in zip(indices, indices[1:])):
            raise ProtocolError("trace records are not ordered by idx")
        self._responses: deque[StepResponse] = deque(
            record_to_response(record) for record in selected
        )
        self._judge_replies: deque[str] = deque(judge_replies)
        self.completion_tokens_served = 0
        self.calls = 0

    def complete(self, request: StepRequest) -> StepResponse:
        if not self._responses:
            raise ProtocolError("replay backend exhausted")
        response = self._responses.popleft()
        self.calls += 1
        self.completion_tokens_served += len(response.tokens)
        return response

    def judge_text(self, prompt: str) -> str:
        if not self._judge_replies:
            raise ProtocolError("replay judge exhausted")
        return self._judge_replies.popleft()

    @classmethod
    def from_file(cls, path: str | Path, origin: Origin | None = None) -> ReplayBackend:
        records = []
        with open(path, "r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return cls(records, origin=origin)


# ---------------------------------------------------------------------------
# Live OpenAI-compatible endpoint
# ---------------------------------------------------------------------------

class HttpBackend:
    """Client for an OpenAI-compatible completions endpoint.

    Posts to ``{base_url}/v1/completions`` (or the chat variant when
    ``use_chat`` is set, for endpoints that lack raw completions). The API
    key, when given, is sent as a bearer authorization header.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        use_chat: bool = False,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.use_chat = use_chat
        self.timeout = timeout
        self._session = session or requests.Session()
        if api_key:
            self._session.headers["Authorization"] = f"Bearer {api_key}"

    def complete(self, request: StepRequest) -> StepResponse:
        if self.use_chat:
            url = f"{self.base_url}/v1/chat/completions"
            payload: dict[str, Any] = {
                "model": self.model,
                "messages": [{"role": "user", "content": request.context}],
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
                "top_p": request.top_p,
                "stop": list(request.stop),
            }
            if request.want_logprobs:
                payload["logprobs"] = True
        else:
            url = f"{self.base_url}/v1/completions"
            payload = {
                "model": self.model,
                "prompt": request.context,
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
                "top_p": request.top_p,
                "stop": list(request.stop),
            }
            if request.want_logprobs:
                payload["logprobs"] = 1

        started = time.monotonic()
        try:
            http_response = self._session.post(url, json=payload, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransportError(f"{url}: {exc}") from exc
        elapsed = time.monotonic() - started

        if http_response.status_code >= 500:
            raise TransportError(f"{url}: server error {http_response.status_code}")
        if http_response.status_code >= 400:
            raise ProtocolError(
                f"{url}: status {http_response.status_code}: {http_response.text[:200]}"
            )
        parser = parse_chat_response if self.use_chat else parse_completion_response
        parsed = parser(http_response.content)
        return StepResponse(
            tokens=parsed.tokens,
            finish_reason=parsed.finish_reason,
            wall_time=elapsed,
            prompt_tokens=parsed.prompt_tokens,
            completion_tokens=parsed.completion_tokens,
        )
