"""Pure trigger mathematics.

Perplexity, the low-perplexity ratio, the cognitive-offload decision,
lexicon-based hesitation detection, the intervention window, and the priming
gate. Every operation is a pure function of its inputs; ``InterventionState``
is passed and returned by value, so everything here is safe for arbitrary
concurrent use.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .core import DEFAULT_HESITATION_PHRASES, TokenSample


class DomainError(ValueError):
    """An argument is outside an operation's mathematical domain."""


class EmptyStep(ValueError):
    """A step statistic was requested over an empty token list."""


# ---------------------------------------------------------------------------
# Hesitation lexicon
# ---------------------------------------------------------------------------

class HesitationLexicon:
    """A phrase set compiled into a case-insensitive, word-bounded matcher.

    Phrase ends are anchored at word boundaries so short entries do not fire
    on containing words ("waiter" never matches "wait"); internal whitespace
    matches any whitespace run, so phrases survive line wrapping.
    """

    def __init__(self, phrases: Iterable[str]) -> None:
        self.phrases: tuple[str, ...] = tuple(phrases)
        self._pattern: re.Pattern[str] | None = None
        if self.phrases:
            alternatives = "|".join(
                r"\s+".join(re.escape(word) for word in phrase.split())
                for phrase in sorted(self.phrases, key=len, reverse=True)
            )
            self._pattern = re.compile(rf"\b(?:{alternatives})\b", re.IGNORECASE)

    @classmethod
    def default(cls) -> HesitationLexicon:
        return cls(DEFAULT_HESITATION_PHRASES)

    @classmethod
    def from_file(cls, path: str | Path) -> HesitationLexicon:
        """Load one phrase per line; '#' starts a comment, blanks ignored.

        A missing file yields the built-in default phrase list.
        """
        path = Path(path)
        if not path.exists():
            return cls.default()
        phrases: list[str] = []
        for line in path.read_text(encoding="utf-8").splitlines():
            phrase = line.split("#", 1)[0].strip()
            if phrase:
                phrases.append(phrase)
        return cls(phrases)

    def matches(self, text: str) -> bool:
        if self._pattern is None:
            return False
        return self._pattern.search(text) is not None

    def __len__(self) -> int:
        return len(self.phrases)

    def __repr__(self) -> str:
        return f"HesitationLexicon({len(self.phrases)} phrases)"


# ---------------------------------------------------------------------------
# Intervention window state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InterventionState:
    """Ring of recent hesitation flags plus the open rectification window.

    Args:
        recent_h: The most recent hesitation flags, oldest first, at most
            ``k`` of them.
        rectify_steps_remaining: Large-model steps still owed after the most
            recent intervention request.
    """

    recent_h: tuple[bool, ...] = ()
    rectify_steps_remaining: int = 0

    def decremented(self) -> InterventionState:
        """One rectification step consumed; never drops below zero."""
        return replace(self, rectify_steps_remaining=max(0, self.rectify_steps_remaining - 1))


def push_hesitation(state: InterventionState, new_h: bool, k: int) -> InterventionState:
    """Append a hesitation flag to the ring, keeping only the last ``k``."""
    if k < 1:
        raise DomainError(f"window size k must be >= 1, got {k}")
    ring = (state.recent_h + (new_h,))[-k:]
    return replace(state, recent_h=ring)


def intervention_trigger(
    state: InterventionState, new_h: bool, k: int, m: int
) -> tuple[InterventionState, bool]:
    """Record a hesitation flag and decide whether intervention is requested.

    Fires exactly when the last ``k`` recorded flags are all true. On firing
    the ring is cleared, so the trigger cannot re-fire within ``k`` steps,
    and ``rectify_steps_remaining`` is set to ``m``.

    Returns:
        The updated state and whether the trigger fired.
    """
    state = push_hesitation(state, new_h, k)
    fired = len(state.recent_h) == k and all(state.recent_h)
    if fired:
        state = InterventionState(recent_h=(), rectify_steps_remaining=m)
    return state, fired


# ---------------------------------------------------------------------------
# Perplexity math
# ---------------------------------------------------------------------------

def token_perplexity(logprob: float) -> float:
    """Per-token perplexity: the exponential of the negative log probability.

    Raises:
        DomainError: If ``logprob`` is positive or not finite.
    """
    if not math.isfinite(logprob):
        raise DomainError(f"logprob must be finite, got {logprob}")
    if logprob > 0:
        raise DomainError(f"logprob must be <= 0, got {logprob}")
    return math.exp(-logprob)


def low_ppl_ratio(step_tokens: Sequence[TokenSample], tau: float) -> float:
    """Fraction of a step's tokens with perplexity strictly below ``tau``.

    Callers exclude special tokens first; their logprobs reflect formatting,
    not reasoning confidence. Tokens without logprobs count as not-low.

    Raises:
        EmptyStep: On an empty token list.
        DomainError: If ``tau`` is not a positive finite real.
    """
    if not step_tokens:
        raise EmptyStep("cannot compute a low-perplexity ratio over zero tokens")
    if not math.isfinite(tau) or tau <= 0:
        raise DomainError(f"tau must be a positive real, got {tau}")
    low = sum(
        1
        for sample in step_tokens
        if sample.logprob is not None and token_perplexity(sample.logprob) < tau
    )
    return low / len(step_tokens)


def cognitive_trigger(r_s: float, rho: float) -> bool:
    """Whether a step's low-perplexity ratio signals overconfidence.

    Strictly greater-than, so ``rho=1`` can never fire: a ratio never
    exceeds 1.
    """
    if not 0 <= r_s <= 1:
        raise DomainError(f"ratio must lie in [0, 1], got {r_s}")
    if not 0 < rho <= 1:
        raise DomainError(f"rho must lie in (0, 1], got {rho}")
    return r_s > rho


def detect_hesitation(text: str, lexicon: HesitationLexicon) -> bool:
    """Whether the text contains any lexicon phrase (case-insensitive)."""
    return lexicon.matches(text)


def is_priming(step_index: int, n: int) -> bool:
    """Whether a 1-based step index falls inside the priming prefix.

    Exactly the first ``n`` steps are priming steps; ``n=0`` disables
    priming entirely.
    """
    if step_index < 1:
        raise DomainError(f"step index must be >= 1, got {step_index}")
    return step_index <= n


def reasoning_tokens(tokens: Sequence[TokenSample]) -> tuple[TokenSample, ...]:
    """Drop special tokens before step-level perplexity statistics."""
    return tuple(sample for sample in tokens if not sample.special)
