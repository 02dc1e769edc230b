"""Category-to-agency relay: priority queues, incident merging, the
dispatcher feedback loop, and notification records.

All mutations go through one Router instance owned by a single writer;
readers only ever see snapshot dictionaries.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .model import CategoryTaxonomy, DispatcherFeedback, EmergencyLevel, FeedbackAction
from .triage import TriageResult, ParseMode

MERGE_WINDOW_MS = 15 * 60 * 1000

DEFAULT_LEVEL_WEIGHTS = {
    EmergencyLevel.CRITICAL: 8,
    EmergencyLevel.HIGH: 4,
    EmergencyLevel.MODERATE: 2,
    EmergencyLevel.LOW: 1,
    EmergencyLevel.UNKNOWN: 1,
}

_GEO_TEXT = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*$")


class RoutingError(ValueError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


class UnknownAgencyError(KeyError):
    pass


class UnknownIncidentError(KeyError):
    pass


class IllegalTransitionError(ValueError):
    pass


@dataclass(frozen=True)
class RoutingTable:
    """category -> agency mapping plus priority weights per severity level."""

    category_to_agency: Mapping[str, str]
    default_agency: str
    level_weights: Mapping[EmergencyLevel, int] = field(
        default_factory=lambda: dict(DEFAULT_LEVEL_WEIGHTS)
    )

    def agency_for(self, category: str) -> str:
        return self.category_to_agency.get(category, self.default_agency)

    def weight(self, level: EmergencyLevel) -> int:
        return self.level_weights.get(level, 1)

    def agencies(self) -> frozenset[str]:
        return frozenset(self.category_to_agency.values()) | {self.default_agency}

    def validate(self, taxonomy: Optional[CategoryTaxonomy] = None) -> None:
        if not self.default_agency:
            raise RoutingError("missing_default_agency")
        for level, weight in self.level_weights.items():
            if weight <= 0:
                raise RoutingError("bad_weight", f"{level.word}={weight}")
        named = [EmergencyLevel.LOW, EmergencyLevel.MODERATE, EmergencyLevel.HIGH, EmergencyLevel.CRITICAL]
        for lower, higher in zip(named, named[1:]):
            if self.weight(lower) >= self.weight(higher):
                raise RoutingError(
                    "weights_not_increasing",
                    f"{lower.word}={self.weight(lower)} >= {higher.word}={self.weight(higher)}",
                )
        if taxonomy is not None:
            unknown = [c for c in self.category_to_agency if c not in taxonomy]
            if unknown:
                raise RoutingError("unknown_category", ", ".join(sorted(unknown)))


def load_routing_table(config_text: str) -> RoutingTable:
    doc = tomllib.loads(config_text)
    categories = {str(k): str(v) for k, v in doc.get("categories", {}).items()}
    weights = dict(DEFAULT_LEVEL_WEIGHTS)
    for word, value in doc.get("levels", {}).items():
        weights[EmergencyLevel.from_word(word)] = int(value)
    table = RoutingTable(
        category_to_agency=categories,
        default_agency=str(doc.get("default_agency", "")),
        level_weights=weights,
    )
    table.validate()
    return table


class IncidentStatus(str, Enum):
    PENDING = "pending"
    ACKNOWLEDGED = "acknowledged"
    DISMISSED = "dismissed"
    EDITED = "edited"

    @property
    def closed(self) -> bool:
        return self in (IncidentStatus.ACKNOWLEDGED, IncidentStatus.DISMISSED)


@dataclass
class IncidentRecord:
    """A routed, possibly merged cluster of messages in an agency queue.

    `edited` marks an incident whose categories a dispatcher corrected; it
    stays open (queued) until accepted or dismissed. Only acknowledged and
    dismissed incidents are closed.
    """

    incident_id: str
    agency_id: str
    categories: set[str]
    level: EmergencyLevel
    location_cell: str
    message_ids: list[str]
    created_at_ms: int
    status: IncidentStatus = IncidentStatus.PENDING
    feedback: list[DispatcherFeedback] = field(default_factory=list)

    @property
    def open(self) -> bool:
        return not self.status.closed

    def to_dict(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "agency_id": self.agency_id,
            "categories": sorted(self.categories),
            "level": self.level.word,
            "location_cell": self.location_cell,
            "message_ids": list(self.message_ids),
            "created_at_ms": self.created_at_ms,
            "status": self.status.value,
            "feedback": [fb.to_dict() for fb in self.feedback],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "IncidentRecord":
        return cls(
            incident_id=d["incident_id"],
            agency_id=d["agency_id"],
            categories=set(d.get("categories", [])),
            level=EmergencyLevel.from_word(d.get("level")),
            location_cell=d.get("location_cell", ""),
            message_ids=list(d.get("message_ids", [])),
            created_at_ms=int(d["created_at_ms"]),
            status=IncidentStatus(d.get("status", "pending")),
            feedback=[DispatcherFeedback.from_dict(fb) for fb in d.get("feedback", [])],
        )


@dataclass(frozen=True)
class NotificationRecord:
    """One forwarding record per enqueue event (create or re-route)."""

    incident_id: str
    agency_id: str
    payload_digest: str
    at_ms: int

    def to_dict(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "agency_id": self.agency_id,
            "payload_digest": self.payload_digest,
            "at_ms": self.at_ms,
        }


def _notification_for(incident: IncidentRecord, at_ms: int) -> NotificationRecord:
    digest = hashlib.sha256(
        json.dumps(incident.to_dict(), sort_keys=True).encode("utf-8")
    ).hexdigest()
    return NotificationRecord(
        incident_id=incident.incident_id,
        agency_id=incident.agency_id,
        payload_digest=digest,
        at_ms=at_ms,
    )


@dataclass(frozen=True)
class RouteOutcome:
    incident: Optional[IncidentRecord]
    created: bool = False
    merged: bool = False
    reviewed: bool = False
    notification: Optional[NotificationRecord] = None


@dataclass(frozen=True)
class FeedbackOutcome:
    incident: IncidentRecord
    rerouted: bool = False
    notification: Optional[NotificationRecord] = None


def location_cell_of(result: TriageResult) -> str:
    """Merge key: geo snapped to a 2-decimal cell, else normalized location
    text, else the message id (which never merges)."""
    text = result.location_text or ""
    match = _GEO_TEXT.match(text)
    if match:
        lat, lon = float(match.group(1)), float(match.group(2))
        return f"{round(lat, 2):.2f},{round(lon, 2):.2f}"
    normalized = re.sub(r"\s+", " ", text.strip().lower())
    return normalized if normalized else result.message_id


class Router:
    """Single-writer routing state: incidents, queues, review, stats."""

    def __init__(
        self,
        table: RoutingTable,
        taxonomy: CategoryTaxonomy,
        merge_window_ms: int = MERGE_WINDOW_MS,
    ):
        table.validate(taxonomy)
        self.table = table
        self.taxonomy = taxonomy
        self.merge_window_ms = merge_window_ms
        self.incidents: dict[str, IncidentRecord] = {}
        self.review_queue: list[TriageResult] = []
        self._seq = 0

    # -- routing ---------------------------------------------------------

    def _next_incident_id(self) -> str:
        self._seq += 1
        return f"inc-{self._seq:06d}"

    def _top_category(self, result: TriageResult) -> Optional[str]:
        predicted = result.predicted()
        if not predicted:
            return None
        best = max(
            predicted,
            key=lambda k: (result.categories[k], -self.taxonomy.index_of(k)),
        )
        return best

    def route(self, result: TriageResult, at_ms: Optional[int] = None) -> RouteOutcome:
        """File one triage result: review, merge into an open incident, or
        open a new one. at_ms anchors the merge window (message time during
        replays, wall clock when omitted)."""
        now = at_ms if at_ms is not None else int(time.time() * 1000)
        if result.parse_mode is ParseMode.FAILED or not result.relevant:
            self.review_queue.append(result)
            return RouteOutcome(incident=None, reviewed=True)

        top = self._top_category(result)
        agency = self.table.agency_for(top) if top else self.table.default_agency
        cell = location_cell_of(result)
        predicted = set(result.predicted())

        for incident in sorted(self.incidents.values(), key=lambda i: i.created_at_ms):
            if (
                incident.open
                and incident.agency_id == agency
                and incident.location_cell == cell
                and incident.categories & predicted
                and 0 <= now - incident.created_at_ms <= self.merge_window_ms
                and result.message_id not in incident.message_ids
            ):
                incident.message_ids.append(result.message_id)
                incident.categories |= predicted
                incident.level = max(incident.level, result.level)
                return RouteOutcome(incident=incident, merged=True)

        incident = IncidentRecord(
            incident_id=self._next_incident_id(),
            agency_id=agency,
            categories=predicted,
            level=result.level,
            location_cell=cell,
            message_ids=[result.message_id],
            created_at_ms=now,
        )
        self.incidents[incident.incident_id] = incident
        return RouteOutcome(
            incident=incident,
            created=True,
            notification=_notification_for(incident, now),
        )

    # -- queues ----------------------------------------------------------

    def _priority_key(self, incident: IncidentRecord):
        return (-self.table.weight(incident.level), incident.created_at_ms, incident.incident_id)

    def agency_queue(self, agency_id: str) -> list[IncidentRecord]:
        if agency_id not in self.table.agencies():
            raise UnknownAgencyError(agency_id)
        queue = [i for i in self.incidents.values() if i.open and i.agency_id == agency_id]
        queue.sort(key=self._priority_key)
        return queue

    def next_for_agency(self, agency_id: str) -> Optional[IncidentRecord]:
        """Peek the highest-priority open incident; dequeue happens only via
        feedback (accept/dismiss)."""
        queue = self.agency_queue(agency_id)
        return queue[0] if queue else None

    # -- feedback --------------------------------------------------------

    def record_feedback(self, fb: DispatcherFeedback) -> FeedbackOutcome:
        incident = self.incidents.get(fb.incident_id)
        if incident is None:
            raise UnknownIncidentError(fb.incident_id)
        if not incident.open:
            raise IllegalTransitionError(
                f"{incident.incident_id} is {incident.status.value}; no further feedback allowed"
            )
        incident.feedback.append(fb)
        if fb.action is FeedbackAction.ACCEPT:
            incident.status = IncidentStatus.ACKNOWLEDGED
            return FeedbackOutcome(incident=incident)
        if fb.action is FeedbackAction.DISMISS:
            incident.status = IncidentStatus.DISMISSED
            return FeedbackOutcome(incident=incident)

        # Edit: replace categories, stay open, re-route if the mapping moved.
        assert fb.edited_categories is not None
        unknown = [c for c in fb.edited_categories if c not in self.taxonomy]
        if unknown:
            raise RoutingError("unknown_category", ", ".join(sorted(unknown)))
        incident.status = IncidentStatus.EDITED
        incident.categories = set(fb.edited_categories)
        ordered = sorted(incident.categories, key=self.taxonomy.index_of)
        new_agency = self.table.agency_for(ordered[0]) if ordered else self.table.default_agency
        if new_agency != incident.agency_id:
            incident.agency_id = new_agency
            return FeedbackOutcome(
                incident=incident,
                rerouted=True,
                notification=_notification_for(incident, fb.at_ms),
            )
        return FeedbackOutcome(incident=incident)

    def feedback_stats(self) -> dict[str, float]:
        """Per-category acceptance rate over closed incidents; categories
        with no closed incidents are absent."""
        accepted: dict[str, int] = {}
        dismissed: dict[str, int] = {}
        for incident in self.incidents.values():
            if not incident.status.closed:
                continue
            bucket = accepted if incident.status is IncidentStatus.ACKNOWLEDGED else dismissed
            for category in incident.categories:
                bucket[category] = bucket.get(category, 0) + 1
        stats: dict[str, float] = {}
        for category in sorted(set(accepted) | set(dismissed)):
            acc = accepted.get(category, 0)
            dis = dismissed.get(category, 0)
            stats[category] = acc / (acc + dis)
        return stats

    # -- accounting ------------------------------------------------------

    def message_count(self, only_open: Optional[bool] = None) -> int:
        total = 0
        for incident in self.incidents.values():
            if only_open is None or incident.open == only_open:
                total += len(incident.message_ids)
        return total

    def to_state_dict(self) -> dict:
        """Canonical state for dumps and recovery comparison."""
        return {
            "incidents": {iid: self.incidents[iid].to_dict() for iid in sorted(self.incidents)},
            "review_queue": [r.to_dict() for r in self.review_queue],
            "feedback_stats": self.feedback_stats(),
            "incident_seq": self._seq,
        }

    # -- recovery (verbatim re-application of journaled outcomes) ---------

    def apply_created(self, incident_dict: Mapping) -> None:
        incident = IncidentRecord.from_dict(incident_dict)
        self.incidents[incident.incident_id] = incident
        match = re.search(r"(\d+)$", incident.incident_id)
        if match:
            self._seq = max(self._seq, int(match.group(1)))

    def apply_merged(self, payload: Mapping) -> None:
        incident = self.incidents[payload["incident_id"]]
        message_id = payload["message_id"]
        if message_id not in incident.message_ids:
            incident.message_ids.append(message_id)
        incident.categories |= set(payload.get("categories", []))
        incident.level = max(incident.level, EmergencyLevel.from_word(payload.get("level")))

    def apply_feedback(self, payload: Mapping) -> None:
        fb = DispatcherFeedback.from_dict(payload["feedback"])
        incident = self.incidents[fb.incident_id]
        incident.feedback.append(fb)
        incident.status = IncidentStatus(payload["status_after"])
        incident.agency_id = payload["agency_after"]
        incident.categories = set(payload["categories_after"])

    def apply_reviewed(self, result_dict: Mapping) -> None:
        self.review_queue.append(TriageResult.from_dict(dict(result_dict)))
