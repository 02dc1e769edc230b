"""Service core: configuration, the single-writer orchestration of
submit -> triage -> route -> journal, and state recovery from the journal.

The HTTP layer in gateway.py is a thin adapter over this class; everything
testable lives here.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .inference import (
    BackendRegistry,
    EndpointConfig,
    KeywordBaselineBackend,
    MockBackend,
    RemoteChatBackend,
    DEFAULT_DEADLINE_MS,
    DEFAULT_MAX_RETRIES,
)
from .ingest import (
    DEDUP_WINDOW_RECORDS,
    FLOOD_PER_MINUTE,
    FeedRecord,
    GuardStatus,
    PoisonGuard,
    ReplayStats,
    replay,
)
from .journal import EventKind, Journal
from .model import (
    CategoryTaxonomy,
    EmergencyLevel,
    EmergencyMessage,
    DispatcherFeedback,
    FeedbackAction,
    Rejection,
    Source,
    load_taxonomy,
    validate_message,
)
from .prompting import GuidelineSnippet, default_snippets, load_snippets
from .routing import (
    IncidentRecord,
    Router,
    RoutingTable,
    load_routing_table,
)
from .textprep import DEFAULT_MIN_TOKENS, default_locale_detector, prepare
from .triage import ParseMode, TriageConfig, TriageResult, triage_message

DEFAULT_PORT = 8990
PORT_ENV = "CRISIS_PORT"


def _resource_text(name: str) -> str:
    return (importlib_resources.files("crisisflow.resources") / name).read_text("utf-8")


def default_taxonomy() -> CategoryTaxonomy:
    return load_taxonomy(_resource_text("taxonomy.toml"))


def default_routing_table() -> RoutingTable:
    return load_routing_table(_resource_text("routing.toml"))


@dataclass
class ServiceConfig:
    taxonomy: CategoryTaxonomy
    routing_table: RoutingTable
    registry: BackendRegistry
    backend_chain: Sequence[str]
    snippets: Sequence[GuidelineSnippet] = ()
    journal_path: Optional[Path] = None
    port: int = DEFAULT_PORT
    min_tokens: int = DEFAULT_MIN_TOKENS
    deadline_ms: int = DEFAULT_DEADLINE_MS
    max_retries: int = DEFAULT_MAX_RETRIES
    dedup_window: int = DEDUP_WINDOW_RECORDS
    flood_per_minute: int = FLOOD_PER_MINUTE
    merge_window_ms: int = 15 * 60 * 1000
    advisory_audience: Optional[str] = "dispatcher"
    k_shot: int = 0

    @classmethod
    def default(cls, journal_path: Optional[Union[str, Path]] = None) -> "ServiceConfig":
        taxonomy = default_taxonomy()
        registry = BackendRegistry()
        registry.register(KeywordBaselineBackend(taxonomy))
        return cls(
            taxonomy=taxonomy,
            routing_table=default_routing_table(),
            registry=registry,
            backend_chain=["baseline"],
            snippets=default_snippets(taxonomy),
            journal_path=Path(journal_path) if journal_path else None,
        )

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ServiceConfig":
        base = Path(path).parent
        doc = tomllib.loads(Path(path).read_text("utf-8"))

        def _resolve(name) -> Optional[Path]:
            value = doc.get(name)
            if value is None:
                return None
            candidate = Path(value)
            return candidate if candidate.is_absolute() else base / candidate

        taxonomy_path = _resolve("taxonomy")
        taxonomy = (
            load_taxonomy(taxonomy_path.read_text("utf-8")) if taxonomy_path else default_taxonomy()
        )
        routing_path = _resolve("routing")
        routing = (
            load_routing_table(routing_path.read_text("utf-8")) if routing_path else default_routing_table()
        )
        snippets_path = _resolve("snippets")
        snippets = (
            load_snippets(snippets_path.read_text("utf-8"), taxonomy)
            if snippets_path
            else default_snippets(taxonomy)
        )

        registry = BackendRegistry()
        declared = doc.get("backends", [])
        for entry in declared:
            kind = entry.get("type", "baseline")
            backend_id = entry.get("id", kind)
            if kind == "baseline":
                registry.register(KeywordBaselineBackend(taxonomy, backend_id=backend_id))
            elif kind == "remote":
                registry.register(
                    RemoteChatBackend(
                        EndpointConfig(
                            url=entry["url"],
                            model=entry.get("model", ""),
                            auth_token=entry.get("auth_token"),
                            temperature=float(entry.get("temperature", 0.0)),
                        ),
                        backend_id=backend_id,
                    )
                )
            elif kind == "mock":
                registry.register(
                    MockBackend(
                        replies=entry.get("replies", [""]),
                        backend_id=backend_id,
                        sleep_s=float(entry.get("sleep_s", 0.0)),
                    )
                )
            else:
                raise ValueError(f"unknown backend type: {kind}")
        if not declared:
            registry.register(KeywordBaselineBackend(taxonomy))

        chain = doc.get("backend_chain") or registry.ids()
        guard = doc.get("guard", {})
        port = int(os.environ.get(PORT_ENV, doc.get("port", DEFAULT_PORT)))
        return cls(
            taxonomy=taxonomy,
            routing_table=routing,
            registry=registry,
            backend_chain=list(chain),
            snippets=snippets,
            journal_path=_resolve("journal"),
            port=port,
            min_tokens=int(doc.get("min_tokens", DEFAULT_MIN_TOKENS)),
            deadline_ms=int(doc.get("deadline_ms", DEFAULT_DEADLINE_MS)),
            max_retries=int(doc.get("max_retries", DEFAULT_MAX_RETRIES)),
            dedup_window=int(guard.get("dedup_window", DEDUP_WINDOW_RECORDS)),
            flood_per_minute=int(guard.get("flood_per_minute", FLOOD_PER_MINUTE)),
            merge_window_ms=int(doc.get("merge_window_ms", 15 * 60 * 1000)),
            advisory_audience=doc.get("advisory_audience", "dispatcher") or None,
            k_shot=int(doc.get("k_shot", 0)),
        )

    def validate(self) -> list[str]:
        """Coherence checks across taxonomy, routing, and backends."""
        problems: list[str] = []
        try:
            self.routing_table.validate(self.taxonomy)
        except Exception as exc:
            problems.append(str(exc))
        for backend_id in self.backend_chain:
            try:
                self.registry.get(backend_id)
            except KeyError:
                problems.append(f"backend_chain refers to unregistered backend {backend_id!r}")
        for label in self.taxonomy.labels:
            if not label.lexicon:
                problems.append(f"label {label.key} has an empty lexicon")
        return problems

    def triage_config(self) -> TriageConfig:
        return TriageConfig(
            taxonomy=self.taxonomy,
            registry=self.registry,
            backend_chain=list(self.backend_chain),
            snippets=list(self.snippets),
            min_tokens=self.min_tokens,
            detector=default_locale_detector(),
            deadline_ms=self.deadline_ms,
            max_retries=self.max_retries,
            k_shot=self.k_shot,
            advisory_audience=self.advisory_audience,
        )


@dataclass
class ServiceCounters:
    admitted: int = 0
    quarantined: int = 0
    rejected: int = 0
    triaged: int = 0
    relevant: int = 0

    def to_dict(self) -> dict:
        return {
            "admitted": self.admitted,
            "quarantined": self.quarantined,
            "rejected": self.rejected,
            "triaged": self.triaged,
            "relevant": self.relevant,
        }


class DispatchService:
    """Single-writer orchestration over journal, triage, and routing.

    Constructing over an existing journal file replays it, so crash
    recovery is simply reopening the service on the same path.
    """

    def __init__(self, config: ServiceConfig):
        self.config = config
        self._lock = threading.RLock()
        self.journal = Journal(config.journal_path)
        self.router = Router(config.routing_table, config.taxonomy, config.merge_window_ms)
        self.guard = PoisonGuard(config.dedup_window, config.flood_per_minute)
        self.counters = ServiceCounters()
        self.notifications: list[dict] = []
        self._triage_cfg = config.triage_config()
        self.latencies_ms: list[float] = []
        for event in self.journal.all_events():
            self._apply(event)

    # -- recovery ----------------------------------------------------------

    def _apply(self, event) -> None:
        kind, payload = event.kind, event.payload
        if kind is EventKind.MESSAGE_ADMITTED:
            self.counters.admitted += 1
        elif kind is EventKind.QUARANTINE:
            self.counters.quarantined += 1
        elif kind is EventKind.TRIAGE_RESULT:
            self.counters.triaged += 1
            result = TriageResult.from_dict(payload)
            if result.parse_mode is ParseMode.FAILED or not result.relevant:
                self.router.apply_reviewed(payload)
            else:
                self.counters.relevant += 1
        elif kind is EventKind.INCIDENT_CREATED:
            self.router.apply_created(payload)
        elif kind is EventKind.INCIDENT_MERGED:
            self.router.apply_merged(payload)
        elif kind is EventKind.FEEDBACK:
            self.router.apply_feedback(payload)
        elif kind is EventKind.NOTIFICATION:
            self.notifications.append(payload)

    # -- ingestion ----------------------------------------------------------

    def submit(self, record: Mapping, default_source: Source = Source.APP_DIRECT) -> dict:
        """Validate, guard, triage, and route one raw record."""
        with self._lock:
            outcome = validate_message(record, default_source=default_source)
            if isinstance(outcome, Rejection):
                self.counters.rejected += 1
                return {"status": "rejected", "reason": outcome.reason, "detail": outcome.detail}
            verdict = self.guard.check(outcome)
            if verdict.status is not GuardStatus.PASS:
                self.counters.quarantined += 1
                self.journal.append(
                    EventKind.QUARANTINE,
                    {"record": outcome.to_dict(), "verdict": verdict.to_dict()},
                )
                return {"status": "quarantined", "id": outcome.id, "verdict": verdict.status.value}
            self.counters.admitted += 1
            self.journal.append(EventKind.MESSAGE_ADMITTED, outcome.to_dict())
            self._triage_and_route(outcome)
            return {"status": "admitted", "id": outcome.id}

    def _triage_and_route(self, message: EmergencyMessage) -> Optional[TriageResult]:
        prep = prepare(message.raw_text, self.config.min_tokens, self._triage_cfg.detector)
        if prep.dropped:
            # Too short to classify; goes straight to the review pile.
            result = TriageResult(
                message_id=message.id,
                relevant=False,
                categories={},
                level=EmergencyLevel.UNKNOWN,
                location_text=None,
                contact=None,
                advisory=None,
                parse_mode=ParseMode.FAILED,
                backend_id="",
                total_latency_ms=0.0,
            )
        else:
            result = triage_message(message, self._triage_cfg, prep)
        self.counters.triaged += 1
        self.latencies_ms.append(result.total_latency_ms)
        self.journal.append(EventKind.TRIAGE_RESULT, result.to_dict())
        if result.parse_mode is not ParseMode.FAILED and result.relevant:
            self.counters.relevant += 1
        outcome = self.router.route(result, at_ms=message.received_at_ms)
        if outcome.created:
            self.journal.append(EventKind.INCIDENT_CREATED, outcome.incident.to_dict())
        elif outcome.merged:
            self.journal.append(
                EventKind.INCIDENT_MERGED,
                {
                    "incident_id": outcome.incident.incident_id,
                    "message_id": result.message_id,
                    "categories": sorted(result.predicted()),
                    "level": result.level.word,
                },
            )
        if outcome.notification:
            notification = outcome.notification.to_dict()
            self.notifications.append(notification)
            self.journal.append(EventKind.NOTIFICATION, notification)
        return result

    def run_feed(
        self,
        records,
        rate: Optional[float] = None,
        default_source: Source = Source.SOCIAL_FEED,
    ) -> ReplayStats:
        """Replay a feed through the full pipeline with guard accounting."""

        def emit(message: EmergencyMessage) -> None:
            with self._lock:
                self.counters.admitted += 1
                self.journal.append(EventKind.MESSAGE_ADMITTED, message.to_dict())
                self._triage_and_route(message)

        def quarantine(entry: dict) -> None:
            with self._lock:
                self.counters.quarantined += 1
                self.journal.append(EventKind.QUARANTINE, entry)

        stats = replay(
            records,
            emit=emit,
            guard=self.guard,
            rate=rate,
            quarantine=quarantine,
            default_source=default_source,
        )
        with self._lock:
            self.counters.rejected += stats.rejected
        return stats

    # -- dispatcher surface --------------------------------------------------

    def agency_queue(self, agency_id: str) -> list[dict]:
        with self._lock:
            return [i.to_dict() for i in self.router.agency_queue(agency_id)]

    def incident(self, incident_id: str) -> Optional[dict]:
        with self._lock:
            record = self.router.incidents.get(incident_id)
            return record.to_dict() if record else None

    def feedback(
        self,
        incident_id: str,
        action: str,
        edited_categories: Optional[Sequence[str]] = None,
        note: Optional[str] = None,
    ) -> dict:
        with self._lock:
            fb = DispatcherFeedback(
                incident_id=incident_id,
                action=FeedbackAction(action),
                at_ms=int(time.time() * 1000),
                edited_categories=frozenset(edited_categories) if edited_categories else None,
                note=note,
            )
            outcome = self.router.record_feedback(fb)
            incident = outcome.incident
            self.journal.append(
                EventKind.FEEDBACK,
                {
                    "feedback": fb.to_dict(),
                    "status_after": incident.status.value,
                    "agency_after": incident.agency_id,
                    "categories_after": sorted(incident.categories),
                },
            )
            if outcome.notification:
                notification = outcome.notification.to_dict()
                self.notifications.append(notification)
                self.journal.append(EventKind.NOTIFICATION, notification)
            return incident.to_dict()

    def feedback_stats(self) -> dict[str, float]:
        with self._lock:
            return self.router.feedback_stats()

    def health(self) -> dict:
        with self._lock:
            return {
                "status": "degraded" if self.config.registry.all_tripped() else "ok",
                "backends": {
                    backend_id: self.config.registry.health(backend_id).to_dict()
                    for backend_id in self.config.registry.ids()
                },
                "counters": self.counters.to_dict(),
                "journal_seq": self.journal.last_seq,
            }

    def state_dump(self) -> bytes:
        """Canonical snapshot of queues, incidents, and stats for recovery
        comparison."""
        with self._lock:
            queues = {
                agency: [i.incident_id for i in self.router.agency_queue(agency)]
                for agency in sorted(self.router.table.agencies())
            }
            state = {
                "router": self.router.to_state_dict(),
                "queues": queues,
                "counters": {
                    "admitted": self.counters.admitted,
                    "quarantined": self.counters.quarantined,
                    "triaged": self.counters.triaged,
                    "relevant": self.counters.relevant,
                },
                "notifications": self.notifications,
            }
        return json.dumps(state, sort_keys=True, indent=1).encode("utf-8")

    def close(self) -> None:
        self.journal.close()
