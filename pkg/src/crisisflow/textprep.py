"""Preprocessing: cleaning, short-message filtering, and locale tagging.

The pipeline order is fixed: clean, then length filter, then locale
detection. Dropped messages never reach prompting.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources as importlib_resources
from typing import Mapping, Optional, Protocol

_KEPT_PUNCT = frozenset(".,!?'-")
_WS_RUN = re.compile(r"\s+")

DEFAULT_MIN_TOKENS = 3
DEFAULT_CONFIDENCE_THRESHOLD = 0.6

# Code points rare outside one language; a token containing one votes for it.
_SCRIPT_HINTS: dict[str, frozenset[str]] = {
    "tr": frozenset("ığşİĞŞ"),
    "es": frozenset("ñ¿¡"),
}


def clean_text(raw: str) -> str:
    """Strip emoji, symbols, and control characters; collapse whitespace.

    Keeps letters of any script, digits, whitespace, and . , ! ? ' -
    Whitespace runs collapse to single spaces; ends are trimmed.
    """
    kept = [
        ch
        for ch in raw
        if ch.isalpha() or ch.isdigit() or ch.isspace() or ch in _KEPT_PUNCT
    ]
    return _WS_RUN.sub(" ", "".join(kept)).strip()


def is_too_short(cleaned: str, min_tokens: int = DEFAULT_MIN_TOKENS) -> bool:
    """True when the cleaned text has fewer than min_tokens whitespace tokens."""
    if min_tokens < 1:
        raise ValueError("min_tokens must be >= 1")
    return len(cleaned.split()) < min_tokens


class LocaleDetector(Protocol):
    def detect(self, cleaned: str) -> Optional[str]: ...


class StopwordLocaleDetector:
    """Naive detector: per-language stopword tables plus script-range voting.

    A token votes for a language when it appears in that language's table or
    contains a script character distinctive for it. The winning language is
    returned only when its vote share reaches the confidence threshold.
    """

    def __init__(
        self,
        tables: Mapping[str, frozenset[str]],
        script_hints: Optional[Mapping[str, frozenset[str]]] = None,
        threshold: float = DEFAULT_CONFIDENCE_THRESHOLD,
    ):
        self.tables = dict(tables)
        self.script_hints = dict(script_hints if script_hints is not None else _SCRIPT_HINTS)
        self.threshold = threshold

    def detect(self, cleaned: str) -> Optional[str]:
        tokens = [t.lower() for t in cleaned.split()]
        if not tokens:
            return None
        best_tag, best_share = None, 0.0
        for tag in sorted(self.tables):
            table = self.tables[tag]
            hints = self.script_hints.get(tag, frozenset())
            votes = sum(
                1 for tok in tokens if tok in table or any(ch in hints for ch in tok)
            )
            share = votes / len(tokens)
            if share > best_share:
                best_tag, best_share = tag, share
        if best_share >= self.threshold:
            return best_tag
        return None


def _load_stopword_tables() -> dict[str, frozenset[str]]:
    tables: dict[str, frozenset[str]] = {}
    base = importlib_resources.files("crisisflow.resources") / "stopwords"
    for entry in base.iterdir():
        if not entry.name.endswith(".txt"):
            continue
        words = {
            line.strip().lower()
            for line in entry.read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.startswith("#")
        }
        tables[entry.name[:-4]] = frozenset(words)
    return tables


def default_locale_detector(threshold: float = DEFAULT_CONFIDENCE_THRESHOLD) -> StopwordLocaleDetector:
    """Detector backed by the stopword tables shipped with the package."""
    return StopwordLocaleDetector(_load_stopword_tables(), threshold=threshold)


def detect_locale(cleaned: str, detector: Optional[LocaleDetector] = None) -> Optional[str]:
    """Tag the likely language of cleaned text; None below confidence."""
    if detector is None:
        detector = default_locale_detector()
    return detector.detect(cleaned)


@dataclass(frozen=True)
class CleanText:
    """Output of the preprocessing pipeline for one message."""

    text: str
    token_count: int
    locale_tag: Optional[str]
    dropped: bool


def prepare(
    raw: str,
    min_tokens: int = DEFAULT_MIN_TOKENS,
    detector: Optional[LocaleDetector] = None,
) -> CleanText:
    """Run clean -> short-filter -> locale in that fixed order."""
    cleaned = clean_text(raw)
    tokens = cleaned.split()
    dropped = len(tokens) < min_tokens
    locale_tag = None if dropped else detect_locale(cleaned, detector)
    return CleanText(
        text=cleaned,
        token_count=len(tokens),
        locale_tag=locale_tag,
        dropped=dropped,
    )
