"""Per-message analysis path: prep -> prompt -> infer -> parse/repair ->
entity extraction -> TriageResult.

Contact and location come from the raw message text first; model-reported
fields only fill gaps. That keeps hallucinated callback numbers out of
incident records.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

from .inference import (
    BackendRegistry,
    InferenceError,
    InferenceRequest,
    InferenceResponse,
    PREDICTION_THRESHOLD,
    DEFAULT_DEADLINE_MS,
    DEFAULT_MAX_RETRIES,
)
from .model import CategoryTaxonomy, EmergencyLevel, EmergencyMessage
from .prompting import (
    GuidelineSnippet,
    PromptExemplar,
    render_advisory,
    render_binary,
    render_multiclass,
    select_snippets,
)
from .textprep import CleanText, LocaleDetector, DEFAULT_MIN_TOKENS, prepare

REPAIR_CONFIDENCE = 0.51


class ParseMode(str, Enum):
    STRICT = "strict"
    REPAIRED = "repaired"
    FAILED = "failed"


@dataclass(frozen=True)
class TriageResult:
    """Structured outcome for one admitted message."""

    message_id: str
    relevant: bool
    categories: dict[str, float]
    level: EmergencyLevel
    location_text: Optional[str]
    contact: Optional[str]
    advisory: Optional[str]
    parse_mode: ParseMode
    backend_id: str
    total_latency_ms: float

    def predicted(self) -> frozenset[str]:
        return frozenset(k for k, v in self.categories.items() if v >= PREDICTION_THRESHOLD)

    def to_dict(self) -> dict:
        return {
            "message_id": self.message_id,
            "relevant": self.relevant,
            "categories": dict(sorted(self.categories.items())),
            "level": self.level.word,
            "location_text": self.location_text,
            "contact": self.contact,
            "advisory": self.advisory,
            "parse_mode": self.parse_mode.value,
            "backend_id": self.backend_id,
            "total_latency_ms": round(self.total_latency_ms, 3),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriageResult":
        return cls(
            message_id=d["message_id"],
            relevant=bool(d["relevant"]),
            categories={str(k): float(v) for k, v in (d.get("categories") or {}).items()},
            level=EmergencyLevel.from_word(d.get("level")),
            location_text=d.get("location_text"),
            contact=d.get("contact"),
            advisory=d.get("advisory"),
            parse_mode=ParseMode(d["parse_mode"]),
            backend_id=d.get("backend_id", ""),
            total_latency_ms=float(d.get("total_latency_ms", 0.0)),
        )


@dataclass(frozen=True)
class ParsedOutput:
    relevant: bool
    labels: dict[str, float]
    level: EmergencyLevel
    location: Optional[str]
    contact: Optional[str]
    mode: ParseMode


_LEVEL_WORDS = ("critical", "high", "moderate", "low")


def parse_model_output(text: str, taxonomy: CategoryTaxonomy) -> ParsedOutput:
    """Parse backend text against the output contract; degrade gracefully.

    Strict mode expects one JSON object {relevant, labels, level, location,
    contact}. On failure, repair mode scans the text for taxonomy keys and
    level words as whole words, scoring each found key 0.51. If nothing
    matches, the output is failed: irrelevant with no categories.
    """
    strict = _parse_strict(text, taxonomy)
    if strict is not None:
        return strict
    repaired = _parse_repair(text, taxonomy)
    if repaired is not None:
        return repaired
    return ParsedOutput(
        relevant=False, labels={}, level=EmergencyLevel.UNKNOWN,
        location=None, contact=None, mode=ParseMode.FAILED,
    )


def _parse_strict(text: str, taxonomy: CategoryTaxonomy) -> Optional[ParsedOutput]:
    try:
        data = json.loads(text.strip())
    except (ValueError, TypeError):
        return None
    if not isinstance(data, dict):
        return None
    relevant = data.get("relevant")
    raw_labels = data.get("labels")
    if not isinstance(relevant, bool) or not isinstance(raw_labels, list):
        return None
    labels: dict[str, float] = {}
    for item in raw_labels:
        if not isinstance(item, dict) or "key" not in item:
            return None
        key = str(item["key"])
        if key not in taxonomy:
            continue  # unknown keys are dropped, not fatal
        try:
            confidence = float(item.get("confidence", 1.0))
        except (TypeError, ValueError):
            return None
        labels[key] = min(1.0, max(0.0, confidence))
    level = EmergencyLevel.from_word(data.get("level") if isinstance(data.get("level"), str) else None)
    location = data.get("location")
    contact = data.get("contact")
    return ParsedOutput(
        relevant=relevant,
        labels=labels,
        level=level,
        location=str(location) if isinstance(location, str) and location.strip() else None,
        contact=str(contact) if isinstance(contact, str) and contact.strip() else None,
        mode=ParseMode.STRICT,
    )


def _parse_repair(text: str, taxonomy: CategoryTaxonomy) -> Optional[ParsedOutput]:
    lowered = text.lower()
    labels = {
        key: REPAIR_CONFIDENCE
        for key in taxonomy.keys()
        if re.search(r"(?<!\w)" + re.escape(key) + r"(?!\w)", lowered)
    }
    if not labels:
        return None
    level = EmergencyLevel.UNKNOWN
    for word in _LEVEL_WORDS:  # ordered by severity: first hit wins
        if re.search(r"(?<!\w)" + word + r"(?!\w)", lowered):
            level = EmergencyLevel.from_word(word)
            break
    return ParsedOutput(
        relevant=True, labels=labels, level=level,
        location=None, contact=None, mode=ParseMode.REPAIRED,
    )


@dataclass(frozen=True)
class EntityHints:
    contact: Optional[str]
    location_text: Optional[str]
    level_hint: EmergencyLevel


_PHONE_CANDIDATE = re.compile(r"\+?\d[\d\s().-]{4,22}\d")

_LOCATION_PREPOSITIONS = frozenset({"at", "in", "near", "on"})
_MAX_LOCATION_TOKENS = 6

_LEVEL_HINTS: tuple[tuple[str, EmergencyLevel], ...] = (
    ("trapped", EmergencyLevel.CRITICAL),
    ("under rubble", EmergencyLevel.CRITICAL),
    ("not breathing", EmergencyLevel.CRITICAL),
    ("unconscious", EmergencyLevel.CRITICAL),
    ("drowning", EmergencyLevel.CRITICAL),
    ("building collapsed", EmergencyLevel.CRITICAL),
    ("bleeding", EmergencyLevel.HIGH),
    ("fire spreading", EmergencyLevel.HIGH),
    ("chest pain", EmergencyLevel.HIGH),
    ("injured", EmergencyLevel.HIGH),
    ("stranded", EmergencyLevel.MODERATE),
)


def normalize_phone(raw: str) -> Optional[str]:
    """Digits only, 7 to 15 of them, with a leading + preserved."""
    plus = raw.strip().startswith("+")
    digits = re.sub(r"\D", "", raw)
    if not 7 <= len(digits) <= 15:
        return None
    return ("+" + digits) if plus else digits


def _find_contact(raw_text: str) -> Optional[str]:
    for match in _PHONE_CANDIDATE.finditer(raw_text):
        normalized = normalize_phone(match.group(0))
        if normalized:
            return normalized
    return None


def _titleish(token: str) -> bool:
    stripped = token.strip(".,!?'\"()-")
    if not stripped:
        return False
    first = stripped[0]
    return first.isupper() or first.isdigit()


def _find_location(raw_text: str) -> Optional[str]:
    tokens = raw_text.split()
    best: list[str] = []
    for i, tok in enumerate(tokens):
        if tok.lower().strip(".,!?") not in _LOCATION_PREPOSITIONS:
            continue
        run: list[str] = []
        for follower in tokens[i + 1 : i + 1 + _MAX_LOCATION_TOKENS]:
            if not _titleish(follower):
                break
            run.append(follower.strip(".,!?'\"()"))
        if len(run) > len(best):
            best = run
    return " ".join(best) if best else None


def _find_level_hint(raw_text: str) -> EmergencyLevel:
    lowered = raw_text.lower()
    found = EmergencyLevel.UNKNOWN
    for phrase, level in _LEVEL_HINTS:
        if re.search(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", lowered):
            found = max(found, level)
    return found


def extract_entities(raw_text: str) -> EntityHints:
    """Pull contact, location, and a severity hint straight from raw text."""
    return EntityHints(
        contact=_find_contact(raw_text),
        location_text=_find_location(raw_text),
        level_hint=_find_level_hint(raw_text),
    )


@dataclass
class TriageConfig:
    """Everything triage_message needs besides the message itself."""

    taxonomy: CategoryTaxonomy
    registry: BackendRegistry
    backend_chain: Sequence[str]
    snippets: Sequence[GuidelineSnippet] = ()
    min_tokens: int = DEFAULT_MIN_TOKENS
    detector: Optional[LocaleDetector] = None
    deadline_ms: int = DEFAULT_DEADLINE_MS
    max_retries: int = DEFAULT_MAX_RETRIES
    k_shot: int = 0
    exemplars: Sequence[PromptExemplar] = ()
    advisory_audience: Optional[str] = "dispatcher"  # None disables advisories


class AllBackendsFailed(Exception):
    def __init__(self, last_backend_id: str, errors: list[str]):
        super().__init__("; ".join(errors))
        self.last_backend_id = last_backend_id
        self.errors = errors


def _infer_chain(prompt: str, cfg: TriageConfig) -> InferenceResponse:
    errors: list[str] = []
    last_id = cfg.backend_chain[-1] if cfg.backend_chain else ""
    for backend_id in cfg.backend_chain:
        request = InferenceRequest(
            prompt=prompt,
            backend_id=backend_id,
            deadline_ms=cfg.deadline_ms,
            max_retries=cfg.max_retries,
        )
        try:
            return cfg.registry.infer(request)
        except InferenceError as exc:
            errors.append(f"{backend_id}: {exc.code}")
            last_id = backend_id
    raise AllBackendsFailed(last_id, errors)


def _failed_result(message: EmergencyMessage, backend_id: str, started: float) -> TriageResult:
    return TriageResult(
        message_id=message.id,
        relevant=False,
        categories={},
        level=EmergencyLevel.UNKNOWN,
        location_text=None,
        contact=None,
        advisory=None,
        parse_mode=ParseMode.FAILED,
        backend_id=backend_id,
        total_latency_ms=(time.perf_counter() - started) * 1000.0,
    )


def triage_message(
    message: EmergencyMessage,
    cfg: TriageConfig,
    prep: Optional[CleanText] = None,
) -> TriageResult:
    """Run the full analysis path for one admitted message.

    Stage 1 answers the seeking-help-vs-other question; only relevant
    messages pay for the multiclass stage. Inference errors walk down the
    backend chain; when every backend fails the message still yields a
    (failed) result so nothing is silently lost.
    """
    started = time.perf_counter()
    if prep is None:
        prep = prepare(message.raw_text, cfg.min_tokens, cfg.detector)
    if prep.dropped:
        raise ValueError("dropped messages must not reach triage")
    locale_tag = message.locale_tag or prep.locale_tag

    # Stage 1: binary relevance.
    binary_prompt = render_binary(prep.text, locale_tag=locale_tag)
    try:
        stage1 = _infer_chain(binary_prompt, cfg)
    except AllBackendsFailed as exc:
        return _failed_result(message, exc.last_backend_id, started)
    parsed1 = parse_model_output(stage1.text, cfg.taxonomy)
    cfg.registry.record_parse(stage1.backend_id, parsed1.mode is ParseMode.FAILED)
    if parsed1.mode is ParseMode.FAILED:
        return _failed_result(message, stage1.backend_id, started)

    backend_id = stage1.backend_id
    if not parsed1.relevant:
        return TriageResult(
            message_id=message.id,
            relevant=False,
            categories={},
            level=EmergencyLevel.UNKNOWN,
            location_text=None,
            contact=None,
            advisory=None,
            parse_mode=parsed1.mode,
            backend_id=backend_id,
            total_latency_ms=(time.perf_counter() - started) * 1000.0,
        )

    # Stage 2: multiclass categories.
    multi_prompt = render_multiclass(
        prep.text, cfg.taxonomy, k_shot=cfg.k_shot, exemplars=cfg.exemplars, locale_tag=locale_tag
    )
    try:
        stage2 = _infer_chain(multi_prompt, cfg)
    except AllBackendsFailed as exc:
        return _failed_result(message, exc.last_backend_id, started)
    parsed2 = parse_model_output(stage2.text, cfg.taxonomy)
    cfg.registry.record_parse(stage2.backend_id, parsed2.mode is ParseMode.FAILED)
    if parsed2.mode is ParseMode.FAILED:
        return _failed_result(message, stage2.backend_id, started)
    backend_id = stage2.backend_id

    # Entities: raw text first, model output fills the gaps.
    hints = extract_entities(message.raw_text)
    if message.geo is not None:
        location = f"{message.geo[0]},{message.geo[1]}"
    else:
        location = hints.location_text or parsed2.location
    contact = hints.contact
    if contact is None and parsed2.contact:
        contact = normalize_phone(parsed2.contact)
    if contact is None and message.reported_contact:
        contact = normalize_phone(message.reported_contact)
    level = max(parsed2.level, hints.level_hint)

    result = TriageResult(
        message_id=message.id,
        relevant=True,
        categories=parsed2.labels,
        level=level,
        location_text=location,
        contact=contact,
        advisory=None,
        parse_mode=parsed2.mode,
        backend_id=backend_id,
        total_latency_ms=0.0,
    )

    advisory = None
    if cfg.advisory_audience and (result.predicted() or result.relevant):
        advisory = generate_advisory(result, cfg.snippets, cfg.advisory_audience, cfg)

    return replace(
        result,
        advisory=advisory,
        total_latency_ms=(time.perf_counter() - started) * 1000.0,
    )


def generate_advisory(
    result: TriageResult,
    snippets: Sequence[GuidelineSnippet],
    audience: str,
    cfg: TriageConfig,
) -> Optional[str]:
    """Assistive instructions for a relevant result.

    Asks the backend chain first; if inference fails, falls back to the
    matched snippet texts joined verbatim. Absent only when there are no
    matching snippets either.
    """
    if not result.relevant:
        raise ValueError("advisories are only generated for relevant results")
    prompt = render_advisory(
        categories=result.predicted(),
        level_word=result.level.word,
        location_text=result.location_text,
        contact=result.contact,
        snippets=snippets,
        audience=audience,
    )
    try:
        response = _infer_chain(prompt, cfg)
        if response.text.strip():
            return response.text.strip()
    except AllBackendsFailed:
        pass
    matched = select_snippets(result.predicted(), snippets)
    if matched:
        return "\n\n".join(s.text for s in matched)
    return None
