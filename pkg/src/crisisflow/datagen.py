"""Synthetic fixture generators for the two feed formats.

The real corpora are not redistributable, so loaders and evaluation are
exercised against generated stand-ins that match the documented class
compositions. Every generator is seeded and returns its own draw counts,
which tests use as an independent oracle.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from typing import Mapping, Sequence

from .model import CategoryTaxonomy

_PLACES = (
    "Konak", "Cedar Rapids", "Port Hill", "Antakya", "Maple Grove", "Old Harbor",
    "Green Valley", "North Bridge", "Salt Flats", "Iron District", "East Quarter",
    "River Bend",
)

_CLASS1_TEMPLATES = (
    "Help we are trapped under rubble at {place} {n} street, call {phone}",
    "My family is stuck in a collapsed building near {place}, please send rescue, reach us at {phone}",
    "Earthquake destroyed our block at {place} {n}, two injured people here, call {phone}",
    "Trapped on the {n}th floor at {place}, aftershock took the stairs out, phone {phone}",
    "We need urgent help under the rubble in {place}, {n} of us, number {phone}",
)

_SIMILAR0_TEMPLATES = (
    "News crew reporting from the earthquake zone near {place}, aid trucks arriving",
    "Donated {n} blankets and food packages for earthquake relief today",
    "Thoughts with everyone affected by the earthquake, stay strong {place}",
    "The aftershock this morning measured {n}.2, officials urge calm",
    "Relief volunteers are collecting supplies for {place} at the gym",
)

_UNRELATED_TEMPLATES = (
    "Great match tonight, {n} goals, what a season for {place} united",
    "New bakery opened on {n}th avenue, best croissants in {place}",
    "Traffic was light this morning, made it to {place} in {n} minutes",
    "Weekend plans: hiking near {place} with the dog, maybe {n} km",
    "Just finished reading a {n}00 page novel, loved every chapter",
)


def _phone(rng: random.Random) -> str:
    return "+90 5" + "".join(str(rng.randint(0, 9)) for _ in range(2)) + " " + \
        " ".join("".join(str(rng.randint(0, 9)) for _ in range(3)) for _ in range(2)) + \
        " " + "".join(str(rng.randint(0, 9)) for _ in range(2))


def turkey_feed_records(
    n_class1: int = 300,
    n_similar0: int = 150,
    n_unrelated0: int = 50,
    seed: int = 7,
    base_ms: int = 1_675_666_800_000,
) -> list[dict]:
    """Records shaped like the tweet NDJSON format, shuffled but seeded.

    Class 1 items describe directly affected people sharing location and
    contact; class 0 splits into keyword-lookalikes and unrelated chatter.
    """
    rng = random.Random(seed)
    records: list[dict] = []

    def build(template: str, label: int, index: int) -> dict:
        place = rng.choice(_PLACES)
        text = template.format(place=place, n=rng.randint(2, 97), phone=_phone(rng))
        record = {"text": f"{text} #{index}", "label": label}
        if label == 1 and rng.random() < 0.5:
            record["geo"] = {
                "lat": round(38.4 + rng.uniform(-0.3, 0.3), 4),
                "lon": round(27.1 + rng.uniform(-0.3, 0.3), 4),
            }
        return record

    for i in range(n_class1):
        records.append(build(rng.choice(_CLASS1_TEMPLATES), 1, i))
    for i in range(n_similar0):
        records.append(build(rng.choice(_SIMILAR0_TEMPLATES), 0, n_class1 + i))
    for i in range(n_unrelated0):
        records.append(build(rng.choice(_UNRELATED_TEMPLATES), 0, n_class1 + n_similar0 + i))

    rng.shuffle(records)
    for i, record in enumerate(records):
        record["created_at"] = base_ms + i * 500
    return records


def turkey_feed_lines(**kwargs) -> list[str]:
    return [json.dumps(r, ensure_ascii=False) for r in turkey_feed_records(**kwargs)]


def write_turkey_feed(path, **kwargs) -> Counter:
    records = turkey_feed_records(**kwargs)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")
    return Counter(str(r["label"]) for r in records)


def signature_terms(taxonomy: CategoryTaxonomy) -> dict[str, str]:
    """One lexicon term per label that no other label's lexicon contains.

    Texts built from these terms make the keyword baseline fully
    predictable: exactly the intended labels fire.
    """
    out: dict[str, str] = {}
    for label in taxonomy.labels:
        others = set()
        for other in taxonomy.labels:
            if other.key != label.key:
                others |= other.lexicon
        unique = sorted(t for t in label.lexicon if t not in others and " " not in t)
        if not unique:
            unique = sorted(t for t in label.lexicon if t not in others)
        if not unique:
            raise ValueError(f"label {label.key} has no unique lexicon term")
        out[label.key] = unique[0]
    return out


def multilabel_rows(
    n: int,
    label_probs: Mapping[str, float],
    taxonomy: CategoryTaxonomy,
    seed: int = 11,
) -> tuple[list[tuple[dict, frozenset[str]]], Counter]:
    """Bernoulli-draw gold label sets and synthesize matching message texts.

    Returns (rows, draw_counter); the counter is the ground truth for
    prevalence checks. Unlisted labels have probability 0.
    """
    rng = random.Random(seed)
    terms = signature_terms(taxonomy)
    keys = taxonomy.keys()
    rows: list[tuple[dict, frozenset[str]]] = []
    draws: Counter = Counter()
    for i in range(n):
        gold = frozenset(
            key for key in keys if rng.random() < label_probs.get(key, 0.0)
        )
        draws.update(gold)
        if gold:
            words = " ".join(terms[key] for key in sorted(gold))
            text = f"report {i}: situation involves {words} right now"
        else:
            text = f"report {i}: calm evening, nothing notable happening around town"
        record = {
            "id": str(i),
            "message": text,
            "original": text,
            "genre": rng.choice(("direct", "news", "social")),
        }
        rows.append((record, gold))
    return rows, draws


def write_disaster_csv(path, rows: Sequence[tuple[dict, frozenset[str]]], taxonomy: CategoryTaxonomy) -> None:
    """Write rows in the documented CSV layout for the taxonomy."""
    import csv

    keys = taxonomy.keys()
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "message", "original", "genre", *keys])
        for record, gold in rows:
            writer.writerow(
                [record["id"], record["message"], record["original"], record["genre"]]
                + [1 if key in gold else 0 for key in keys]
            )
