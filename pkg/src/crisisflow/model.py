"""Shared domain types: inbound messages, the category taxonomy, severity
levels, and dispatcher feedback.

Everything here is immutable after construction and safe to share across
threads. Identifiers are pure functions of message content, so any process
recomputing them arrives at the same value.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum, IntEnum
from typing import Mapping, Optional, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

MAX_TEXT_CHARS = 10_000

_SEP = b"\x1f"
_LOCALE_TAG_RE = re.compile(r"^[A-Za-z]{2,3}(-[A-Za-z0-9]{2,8})*$")
_LABEL_KEY_RE = re.compile(r"^[a-z][a-z0-9_]*$")


class Source(str, Enum):
    """Where an inbound message came from."""

    CALL_TRANSCRIPT = "call_transcript"
    SOCIAL_FEED = "social_feed"
    APP_DIRECT = "app_direct"


class EmergencyLevel(IntEnum):
    """Severity scale, totally ordered; UNKNOWN is the only default."""

    UNKNOWN = 0
    LOW = 1
    MODERATE = 2
    HIGH = 3
    CRITICAL = 4

    @classmethod
    def from_word(cls, word: Optional[str]) -> "EmergencyLevel":
        """Map a level word to the enum; anything unrecognized is UNKNOWN."""
        if not word:
            return cls.UNKNOWN
        try:
            return cls[word.strip().upper()]
        except KeyError:
            return cls.UNKNOWN

    @property
    def word(self) -> str:
        return self.name.lower()


def message_id(source: Union[Source, str], raw_text: str, received_at_ms: int) -> str:
    """Deterministic 64-hex content digest of (source, text, timestamp).

    The digest covers `source 0x1F utf8(text) 0x1F decimal-epoch-millis`,
    so identical triples always produce identical ids across processes.
    """
    src = source.value if isinstance(source, Source) else str(source)
    payload = src.encode("utf-8") + _SEP + raw_text.encode("utf-8") + _SEP + str(received_at_ms).encode("ascii")
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class EmergencyMessage:
    """One inbound text item: transcript segment, social post, or app message."""

    id: str
    source: Source
    raw_text: str
    received_at_ms: int
    locale_tag: Optional[str] = None
    geo: Optional[tuple[float, float]] = None
    reported_contact: Optional[str] = None
    meta: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source": self.source.value,
            "raw_text": self.raw_text,
            "received_at_ms": self.received_at_ms,
            "locale_tag": self.locale_tag,
            "geo": list(self.geo) if self.geo else None,
            "reported_contact": self.reported_contact,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmergencyMessage":
        geo = d.get("geo")
        return cls(
            id=d["id"],
            source=Source(d["source"]),
            raw_text=d["raw_text"],
            received_at_ms=int(d["received_at_ms"]),
            locale_tag=d.get("locale_tag"),
            geo=(float(geo[0]), float(geo[1])) if geo else None,
            reported_contact=d.get("reported_contact"),
            meta=dict(d.get("meta") or {}),
        )


@dataclass(frozen=True)
class Rejection:
    """Machine-readable refusal of a candidate record; never an exception."""

    reason: str
    detail: str = ""


def _parse_timestamp_ms(value) -> Optional[int]:
    """Accept epoch millis (int) or an ISO-8601 string; None if unusable."""
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value if value >= 0 else None
    if isinstance(value, float):
        return int(value) if value >= 0 else None
    if isinstance(value, str):
        text = value.strip()
        if re.fullmatch(r"\d{1,17}", text):
            return int(text)
        try:
            moment = datetime.fromisoformat(text.replace("Z", "+00:00"))
        except ValueError:
            return None
        if moment.tzinfo is None:
            moment = moment.replace(tzinfo=timezone.utc)
        return int(moment.timestamp() * 1000)
    return None


def _parse_geo(value) -> Union[tuple[float, float], None, Rejection]:
    if value is None:
        return None
    if isinstance(value, Mapping):
        pair = (value.get("lat"), value.get("lon"))
    elif isinstance(value, (list, tuple)) and len(value) == 2:
        pair = (value[0], value[1])
    else:
        return Rejection("bad_geo", f"unrecognized geo shape: {value!r}")
    try:
        lat, lon = float(pair[0]), float(pair[1])
    except (TypeError, ValueError):
        return Rejection("bad_geo", f"non-numeric geo: {value!r}")
    if lat != lat or lon != lon:  # NaN
        return Rejection("bad_geo", "geo is NaN")
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        return Rejection("bad_geo", f"out of range: lat={lat} lon={lon}")
    return (lat, lon)


def validate_message(
    candidate: Mapping,
    *,
    default_source: Source = Source.SOCIAL_FEED,
) -> Union[EmergencyMessage, Rejection]:
    """Turn a raw ingest record into a well-formed message, or reject it.

    Rejection reasons: empty_text, oversize_text, bad_timestamp, bad_geo,
    bad_source. Never raises on malformed input; the stream must go on.
    """
    if not isinstance(candidate, Mapping):
        return Rejection("empty_text", "candidate is not a record")

    raw_source = candidate.get("source")
    if raw_source is None:
        source = default_source
    else:
        try:
            source = Source(str(raw_source))
        except ValueError:
            return Rejection("bad_source", f"unknown source: {raw_source!r}")

    text = candidate.get("text", candidate.get("raw_text"))
    if not isinstance(text, str) or not text.strip():
        return Rejection("empty_text", "text missing or blank after trim")
    if len(text) > MAX_TEXT_CHARS:
        return Rejection("oversize_text", f"{len(text)} chars > {MAX_TEXT_CHARS}")

    ts = _parse_timestamp_ms(candidate.get("received_at", candidate.get("created_at")))
    if ts is None:
        return Rejection("bad_timestamp", f"unusable timestamp: {candidate.get('received_at', candidate.get('created_at'))!r}")

    geo = _parse_geo(candidate.get("geo"))
    if isinstance(geo, Rejection):
        return geo

    locale_tag = candidate.get("locale_tag")
    if not (isinstance(locale_tag, str) and _LOCALE_TAG_RE.fullmatch(locale_tag)):
        locale_tag = None

    contact = candidate.get("reported_contact", candidate.get("contact"))
    contact = str(contact) if contact is not None else None

    meta_in = candidate.get("meta")
    meta = {str(k): str(v) for k, v in meta_in.items()} if isinstance(meta_in, Mapping) else {}
    if "label" in candidate and candidate["label"] is not None:
        meta.setdefault("gold_binary", str(candidate["label"]))

    return EmergencyMessage(
        id=message_id(source, text, ts),
        source=source,
        raw_text=text,
        received_at_ms=ts,
        locale_tag=locale_tag,
        geo=geo,
        reported_contact=contact,
        meta=meta,
    )


class TaxonomyError(ValueError):
    """Raised when a taxonomy document violates its invariants."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass(frozen=True)
class CategoryLabel:
    key: str
    display_name: str
    lexicon: frozenset[str]


@dataclass(frozen=True)
class CategoryTaxonomy:
    """Ordered, flat set of incident category labels with keyword lexicons."""

    labels: tuple[CategoryLabel, ...]

    def keys(self) -> tuple[str, ...]:
        return tuple(label.key for label in self.labels)

    def __contains__(self, key: str) -> bool:
        return any(label.key == key for label in self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def get(self, key: str) -> Optional[CategoryLabel]:
        for label in self.labels:
            if label.key == key:
                return label
        return None

    def index_of(self, key: str) -> int:
        for i, label in enumerate(self.labels):
            if label.key == key:
                return i
        return len(self.labels)


def load_taxonomy(config_text: str) -> CategoryTaxonomy:
    """Parse and validate a taxonomy document (TOML table list).

    Raises TaxonomyError with codes empty_taxonomy, duplicate_key,
    empty_lexicon, or bad_key. File order is preserved.
    """
    doc = tomllib.loads(config_text)
    entries = doc.get("labels", [])
    if not entries:
        raise TaxonomyError("empty_taxonomy", "no [[labels]] entries")
    seen: set[str] = set()
    labels = []
    for entry in entries:
        key = str(entry.get("key", "")).strip()
        if not _LABEL_KEY_RE.fullmatch(key):
            raise TaxonomyError("bad_key", f"not lowercase snake-case: {key!r}")
        if key in seen:
            raise TaxonomyError("duplicate_key", key)
        seen.add(key)
        lexicon = frozenset(str(w).lower() for w in entry.get("lexicon", []) if str(w).strip())
        if not lexicon:
            raise TaxonomyError("empty_lexicon", key)
        labels.append(
            CategoryLabel(
                key=key,
                display_name=str(entry.get("display_name", key)),
                lexicon=lexicon,
            )
        )
    return CategoryTaxonomy(labels=tuple(labels))


def serialize_taxonomy(taxonomy: CategoryTaxonomy) -> str:
    """Emit the TOML form load_taxonomy accepts; round-trips to equality."""
    chunks = []
    for label in taxonomy.labels:
        words = ", ".join(f'"{w}"' for w in sorted(label.lexicon))
        chunks.append(
            "[[labels]]\n"
            f'key = "{label.key}"\n'
            f'display_name = "{label.display_name}"\n'
            f"lexicon = [{words}]\n"
        )
    return "\n".join(chunks)


class FeedbackAction(str, Enum):
    ACCEPT = "accept"
    DISMISS = "dismiss"
    EDIT = "edit"


@dataclass(frozen=True)
class DispatcherFeedback:
    """A dispatcher's verdict on a routed incident."""

    incident_id: str
    action: FeedbackAction
    at_ms: int
    edited_categories: Optional[frozenset[str]] = None
    note: Optional[str] = None

    def __post_init__(self):
        if self.action is FeedbackAction.EDIT and not self.edited_categories:
            raise ValueError("edit requires edited_categories")
        if self.action is not FeedbackAction.EDIT and self.edited_categories is not None:
            raise ValueError(f"{self.action.value} must not carry edited_categories")

    def to_dict(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "action": self.action.value,
            "at_ms": self.at_ms,
            "edited_categories": sorted(self.edited_categories) if self.edited_categories else None,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DispatcherFeedback":
        edited = d.get("edited_categories")
        return cls(
            incident_id=d["incident_id"],
            action=FeedbackAction(d["action"]),
            at_ms=int(d["at_ms"]),
            edited_categories=frozenset(edited) if edited else None,
            note=d.get("note"),
        )
