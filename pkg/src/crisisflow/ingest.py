"""Feed loading and replay with poisoning guards.

Two file formats are supported: newline-delimited JSON tweets (binary gold
label in `label`) and the disaster-message CSV (one 0/1 column per taxonomy
label). Records flagged by the guards are quarantined to a side journal,
never dropped silently, and no malformed record ever stops a stream; the
only fatal condition is a label-column mismatch, which would corrupt every
downstream evaluation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Optional, Union

from .evalkit import BINARY_LABEL, EvalDataset, EvalItem
from .model import CategoryTaxonomy, EmergencyMessage, Rejection, Source, validate_message
from .textprep import clean_text

DEDUP_WINDOW_RECORDS = 5_000
FLOOD_PER_MINUTE = 30
SHINGLE_SIZE = 8
FLOOD_WINDOW_MS = 60_000


class TaxonomyMismatchError(ValueError):
    """CSV label columns disagree with the taxonomy; loading must stop."""


@dataclass(frozen=True)
class FeedRecord:
    """One raw feed row before validation."""

    raw: Optional[Mapping]
    source_tag: str
    seq: int
    line: str = ""


@dataclass
class LoadStats:
    read: int = 0
    loaded: int = 0
    skipped: int = 0
    reasons: Counter = field(default_factory=Counter)


def iter_feed_records(path: Union[str, Path], source_tag: str = "ndjson") -> Iterator[FeedRecord]:
    """Yield raw NDJSON rows with strictly increasing sequence numbers.

    Unparseable lines yield raw=None so downstream accounting still sees
    them.
    """
    seq = 0
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            seq += 1
            try:
                raw = json.loads(line)
                if not isinstance(raw, dict):
                    raw = None
            except json.JSONDecodeError:
                raw = None
            yield FeedRecord(raw=raw, source_tag=source_tag, seq=seq, line=line)


def iter_tweet_ndjson(
    path: Union[str, Path], stats: Optional[LoadStats] = None
) -> Iterator[EmergencyMessage]:
    """Validated messages from a tweet feed, in file order.

    The binary gold label, when present, lands in meta["gold_binary"].
    Malformed records are counted and skipped, never fatal.
    """
    stats = stats if stats is not None else LoadStats()
    for record in iter_feed_records(path, "tweet_ndjson"):
        stats.read += 1
        if record.raw is None:
            stats.skipped += 1
            stats.reasons["unparseable"] += 1
            continue
        outcome = validate_message(record.raw, default_source=Source.SOCIAL_FEED)
        if isinstance(outcome, Rejection):
            stats.skipped += 1
            stats.reasons[outcome.reason] += 1
            continue
        stats.loaded += 1
        yield outcome


def iter_disaster_csv(
    path: Union[str, Path],
    taxonomy: CategoryTaxonomy,
    stats: Optional[LoadStats] = None,
) -> Iterator[tuple[EmergencyMessage, frozenset[str]]]:
    """(message, gold label set) pairs from the disaster-message CSV.

    Header must be id,message,original,genre followed by exactly one 0/1
    column per taxonomy label; anything else raises TaxonomyMismatchError.
    """
    stats = stats if stats is not None else LoadStats()
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise TaxonomyMismatchError("empty file: no header")
        if header[:4] != ["id", "message", "original", "genre"]:
            raise TaxonomyMismatchError(f"fixed columns wrong: {header[:4]}")
        label_columns = header[4:]
        if set(label_columns) != set(taxonomy.keys()):
            missing = sorted(set(taxonomy.keys()) - set(label_columns))
            extra = sorted(set(label_columns) - set(taxonomy.keys()))
            raise TaxonomyMismatchError(f"label columns mismatch: missing={missing} extra={extra}")

        for index, row in enumerate(reader):
            stats.read += 1
            if len(row) != len(header):
                stats.skipped += 1
                stats.reasons["short_row"] += 1
                continue
            try:
                flags = [int(v) for v in row[4:]]
            except ValueError:
                stats.skipped += 1
                stats.reasons["bad_label_value"] += 1
                continue
            if any(v not in (0, 1) for v in flags):
                stats.skipped += 1
                stats.reasons["bad_label_value"] += 1
                continue
            candidate = {
                "text": row[1],
                "received_at": index * 1000,  # format carries no timestamps
                "meta": {"dataset_id": row[0], "original": row[2], "genre": row[3]},
            }
            outcome = validate_message(candidate, default_source=Source.SOCIAL_FEED)
            if isinstance(outcome, Rejection):
                stats.skipped += 1
                stats.reasons[outcome.reason] += 1
                continue
            gold = frozenset(
                label for label, flag in zip(label_columns, flags) if flag == 1
            )
            stats.loaded += 1
            yield outcome, gold


def load_tweet_dataset(path: Union[str, Path]) -> EvalDataset:
    items = []
    for message in iter_tweet_ndjson(path):
        gold = frozenset([BINARY_LABEL]) if message.meta.get("gold_binary") == "1" else frozenset()
        items.append(EvalItem(message=message, gold=gold))
    return EvalDataset(items=tuple(items), labels=(BINARY_LABEL,), task="binary")


def load_disaster_dataset(path: Union[str, Path], taxonomy: CategoryTaxonomy) -> EvalDataset:
    items = tuple(
        EvalItem(message=message, gold=gold)
        for message, gold in iter_disaster_csv(path, taxonomy)
    )
    return EvalDataset(items=items, labels=taxonomy.keys(), task="multilabel")


class GuardStatus(str, Enum):
    PASS = "pass"
    DUPLICATE = "duplicate"
    FLOOD = "flood"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class GuardVerdict:
    status: GuardStatus
    detail: str = ""

    def to_dict(self) -> dict:
        return {"status": self.status.value, "detail": self.detail}


def shingle_fingerprint(cleaned_text_value: str, k: int = SHINGLE_SIZE) -> str:
    """Order-insensitive digest of the word-level k-shingles of cleaned text.

    Texts shorter than k words fingerprint as their whole token sequence, so
    emoji-only differences still collide after cleaning.
    """
    tokens = cleaned_text_value.lower().split()
    if len(tokens) < k:
        shingles = [tuple(tokens)]
    else:
        shingles = [tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1)]
    digests = sorted(
        hashlib.sha256("\x1f".join(shingle).encode("utf-8")).hexdigest()
        for shingle in set(shingles)
    )
    return hashlib.sha256("\x1e".join(digests).encode("ascii")).hexdigest()


class PoisonGuard:
    """Stateful ingest filter: near-duplicate window plus per-contact flood.

    Verdicts depend only on the record sequence and configuration, never on
    wall clock, so identical replays produce identical verdict sequences.
    """

    def __init__(
        self,
        dedup_window: int = DEDUP_WINDOW_RECORDS,
        flood_per_minute: int = FLOOD_PER_MINUTE,
        shingle_k: int = SHINGLE_SIZE,
    ):
        self.dedup_window = dedup_window
        self.flood_per_minute = flood_per_minute
        self.shingle_k = shingle_k
        self._recent: deque[str] = deque()
        self._counts: Counter = Counter()
        self._contact_times: dict[str, deque[int]] = defaultdict(deque)

    def _remember(self, fingerprint: str) -> None:
        self._recent.append(fingerprint)
        self._counts[fingerprint] += 1
        while len(self._recent) > self.dedup_window:
            old = self._recent.popleft()
            self._counts[old] -= 1
            if self._counts[old] <= 0:
                del self._counts[old]

    def check(self, message: EmergencyMessage) -> GuardVerdict:
        fingerprint = shingle_fingerprint(clean_text(message.raw_text), self.shingle_k)
        duplicate = self._counts.get(fingerprint, 0) > 0
        self._remember(fingerprint)

        flood = False
        contact = message.reported_contact
        if contact:
            times = self._contact_times[contact]
            now = message.received_at_ms
            while times and now - times[0] > FLOOD_WINDOW_MS:
                times.popleft()
            times.append(now)
            flood = len(times) > self.flood_per_minute

        if duplicate:
            return GuardVerdict(GuardStatus.DUPLICATE, f"fingerprint seen within last {self.dedup_window} records")
        if flood:
            return GuardVerdict(GuardStatus.FLOOD, f"contact {contact} over {self.flood_per_minute}/min")
        return GuardVerdict(GuardStatus.PASS)


@dataclass
class ReplayStats:
    input: int = 0
    admitted: int = 0
    quarantined: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)
    wall_s: float = 0.0

    def conserved(self) -> bool:
        return self.input == self.admitted + self.quarantined + self.rejected

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "admitted": self.admitted,
            "quarantined": self.quarantined,
            "rejected": self.rejected,
            "reasons": dict(self.reasons),
            "wall_s": round(self.wall_s, 3),
        }


def replay(
    records: Iterable[FeedRecord],
    emit: Callable[[EmergencyMessage], None],
    guard: Optional[PoisonGuard] = None,
    rate: Optional[float] = None,
    quarantine: Optional[Callable[[dict], None]] = None,
    default_source: Source = Source.SOCIAL_FEED,
) -> ReplayStats:
    """Push a feed through validation and guards into the triage queue.

    `rate` spaces emissions 1/rate seconds apart; None means as fast as
    possible. `emit` may block (bounded queue backpressure); records are
    never dropped to keep up. Exact conservation holds on return:
    input == admitted + quarantined + rejected.
    """
    if rate is not None and rate <= 0:
        raise ValueError("rate must be > 0 or None")
    stats = ReplayStats()
    started = time.perf_counter()
    next_emission = started
    for record in records:
        stats.input += 1
        if record.raw is None:
            stats.rejected += 1
            stats.reasons["unparseable"] += 1
            continue
        outcome = validate_message(record.raw, default_source=default_source)
        if isinstance(outcome, Rejection):
            stats.rejected += 1
            stats.reasons[outcome.reason] += 1
            continue
        if guard is not None:
            verdict = guard.check(outcome)
            if verdict.status is not GuardStatus.PASS:
                stats.quarantined += 1
                stats.reasons[verdict.status.value] += 1
                if quarantine is not None:
                    quarantine(
                        {
                            "record": outcome.to_dict(),
                            "verdict": verdict.to_dict(),
                            "at": int(time.time() * 1000),
                        }
                    )
                continue
        if rate is not None:
            pause = next_emission - time.perf_counter()
            if pause > 0:
                time.sleep(pause)
            next_emission += 1.0 / rate
        emit(outcome)
        stats.admitted += 1
    stats.wall_s = time.perf_counter() - started
    return stats
