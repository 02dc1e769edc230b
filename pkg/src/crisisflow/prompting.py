"""Deterministic prompt construction for the binary, multiclass, and
advisory tasks.

Rendering is byte-deterministic: equal inputs always produce equal prompt
text. Message text is embedded between <<< >>> markers with braces escaped
so the original can be extracted back out of the prompt.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources as importlib_resources
from typing import Iterable, Optional, Sequence

from .model import CategoryTaxonomy

MAX_SNIPPET_CHARS = 800
DEFAULT_SNIPPET_COUNT = 3

MESSAGE_OPEN = "<<<"
MESSAGE_CLOSE = ">>>"

_PLACEHOLDERS = ("{message}", "{labels}", "{examples}", "{guideline_snippets}", "{locale_directive}")


class PromptTask(str, Enum):
    BINARY_RELEVANCE = "binary_relevance"
    MULTICLASS = "multiclass"
    DISPATCHER_ADVISORY = "dispatcher_advisory"
    PUBLIC_ADVISORY = "public_advisory"


class RenderError(ValueError):
    pass


class MissingExemplarsError(RenderError):
    """k_shot asks for more exemplars than were supplied."""


@dataclass(frozen=True)
class PromptTemplate:
    task: PromptTask
    system_text: str
    user_skeleton: str

    @property
    def fingerprint(self) -> str:
        """Stable hash identifying this template version in reports."""
        payload = "\x1f".join((self.task.value, self.system_text, self.user_skeleton))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptExemplar:
    """One worked example: cleaned input text plus the expected JSON answer."""

    text: str
    answer: str


@dataclass(frozen=True)
class GuidelineSnippet:
    id: str
    source_doc: str
    text: str
    tags: frozenset[str]

    def __post_init__(self):
        if len(self.text) > MAX_SNIPPET_CHARS:
            raise ValueError(f"snippet {self.id}: text exceeds {MAX_SNIPPET_CHARS} chars")


def escape_braces(text: str) -> str:
    return text.replace("{", "{{").replace("}", "}}")


def unescape_braces(text: str) -> str:
    return text.replace("{{", "{").replace("}}", "}")


def extract_message(prompt: str) -> Optional[str]:
    """Recover the embedded message from a rendered prompt, or None.

    Reads the last marker block, so worked examples never shadow the live
    message. This is what the keyword baseline backend runs against.
    """
    open_at = prompt.rfind(MESSAGE_OPEN + "\n")
    if open_at == -1:
        return None
    close_at = prompt.find("\n" + MESSAGE_CLOSE, open_at)
    if close_at == -1:
        return None
    return unescape_braces(prompt[open_at + len(MESSAGE_OPEN) + 1 : close_at])


_CONTRACT_LINE = (
    '{"relevant": <true|false>, "labels": [{"key": "<allowed key>", "confidence": <0.0-1.0>}], '
    '"level": "<critical|high|moderate|low|unknown>", "location": <"text"|null>, "contact": <"text"|null>}'
)

# Wording here deliberately avoids the default category keys so that every
# key occurs exactly once in a rendered zero-shot prompt: the allowed-keys
# list is the only enumeration.
_SYSTEM_TRIAGE = (
    "You are a triage assistant inside a public-safety intake system. "
    "You read one inbound text and reply with structured JSON only, never prose."
)

_MULTICLASS_SKELETON = """TASK: Decide which of the allowed category keys apply to the text between the markers, whether it is a genuine request for assistance, how severe it is, and any place or phone details stated in it.

Allowed category keys:
{labels}

Reply with exactly one JSON object shaped like:
""" + _CONTRACT_LINE + """
Use only keys from the allowed list. Omit keys that do not apply.
{locale_directive}{examples}
TEXT:
<<<
{message}
>>>"""

_BINARY_SKELETON = """TASK: Decide whether the text between the markers comes from a person directly affected by the incident who is asking for assistance and shares where they are or how to reach them. If so answer true; for anything else, including bystander chatter that reuses the same vocabulary, answer false.

Reply with exactly one JSON object shaped like:
""" + _CONTRACT_LINE + """
Leave "labels" empty for this task.
{locale_directive}
TEXT:
<<<
{message}
>>>"""

_SYSTEM_ADVISORY = (
    "You support public-safety response work. Be specific, calm, and brief; "
    "never invent facts that are not in the incident picture or the reference guidance."
)

_DISPATCHER_ADVISORY_SKELETON = """A call-taker is working one live incident.

Incident picture: {message}
Category keys: {labels}

Reference guidance:
{guideline_snippets}

Write two short sections. First "ASK:" with up to three questions the call-taker should ask next. Then "STEPS:" with the protocol steps to follow, as short numbered lines."""

_PUBLIC_ADVISORY_SKELETON = """A person in the incident below needs plain instructions on what to do right now.

Incident picture: {message}
Category keys: {labels}

Reference guidance:
{guideline_snippets}

Write at most five short plain-language sentences addressed to that person. No jargon, no preamble."""

DEFAULT_TEMPLATES: dict[PromptTask, PromptTemplate] = {
    PromptTask.MULTICLASS: PromptTemplate(PromptTask.MULTICLASS, _SYSTEM_TRIAGE, _MULTICLASS_SKELETON),
    PromptTask.BINARY_RELEVANCE: PromptTemplate(PromptTask.BINARY_RELEVANCE, _SYSTEM_TRIAGE, _BINARY_SKELETON),
    PromptTask.DISPATCHER_ADVISORY: PromptTemplate(
        PromptTask.DISPATCHER_ADVISORY, _SYSTEM_ADVISORY, _DISPATCHER_ADVISORY_SKELETON
    ),
    PromptTask.PUBLIC_ADVISORY: PromptTemplate(PromptTask.PUBLIC_ADVISORY, _SYSTEM_ADVISORY, _PUBLIC_ADVISORY_SKELETON),
}


def _substitute(template: PromptTemplate, values: dict[str, str]) -> str:
    body = template.user_skeleton
    for name, value in values.items():
        body = body.replace("{" + name + "}", value)
    leftover = [p for p in _PLACEHOLDERS if p in body]
    if leftover:
        raise RenderError(f"unfilled placeholders: {leftover}")
    return template.system_text + "\n\n" + body


def _locale_directive(locale_tag: Optional[str]) -> str:
    if locale_tag and locale_tag != "en":
        return (
            f"The text carries the locale tag '{locale_tag}'. Read it in that "
            "language; still reply with only the JSON object.\n"
        )
    return ""


def render_multiclass(
    text: str,
    taxonomy: CategoryTaxonomy,
    k_shot: int = 0,
    exemplars: Sequence[PromptExemplar] = (),
    locale_tag: Optional[str] = None,
    template: Optional[PromptTemplate] = None,
) -> str:
    """Render the multiclass prompt: every taxonomy key listed exactly once,
    exactly k_shot worked examples in the given order."""
    if k_shot < 0:
        raise RenderError("k_shot must be >= 0")
    if k_shot > len(exemplars):
        raise MissingExemplarsError(f"k_shot={k_shot} but only {len(exemplars)} exemplars supplied")
    template = template or DEFAULT_TEMPLATES[PromptTask.MULTICLASS]
    labels = "\n".join(f"- {key}" for key in taxonomy.keys())
    if k_shot:
        blocks = [
            f"TEXT: {escape_braces(ex.text)}\nANSWER: {ex.answer}"
            for ex in exemplars[:k_shot]
        ]
        examples = "\nEXAMPLES:\n" + "\n\n".join(blocks) + "\n"
    else:
        examples = ""
    return _substitute(
        template,
        {
            "labels": labels,
            "examples": examples,
            "locale_directive": _locale_directive(locale_tag),
            "message": escape_braces(text),
        },
    )


def render_binary(
    text: str,
    locale_tag: Optional[str] = None,
    template: Optional[PromptTemplate] = None,
) -> str:
    """Render the seeking-help-vs-other question for one cleaned message."""
    if not text:
        raise RenderError("binary prompt needs non-empty text")
    template = template or DEFAULT_TEMPLATES[PromptTask.BINARY_RELEVANCE]
    return _substitute(
        template,
        {
            "locale_directive": _locale_directive(locale_tag),
            "message": escape_braces(text),
        },
    )


def select_snippets(
    categories: Iterable[str],
    snippets: Sequence[GuidelineSnippet],
    n: int = DEFAULT_SNIPPET_COUNT,
) -> list[GuidelineSnippet]:
    """Top-n snippets whose tags intersect the categories.

    Ordered by overlap count descending, then id ascending. Pure function.
    """
    wanted = set(categories)
    scored = [
        (len(s.tags & wanted), s)
        for s in snippets
        if s.tags & wanted
    ]
    scored.sort(key=lambda pair: (-pair[0], pair[1].id))
    return [s for _, s in scored[:n]]


def render_advisory(
    categories: Iterable[str],
    level_word: str,
    location_text: Optional[str],
    contact: Optional[str],
    snippets: Sequence[GuidelineSnippet],
    audience: str = "dispatcher",
    n_snippets: int = DEFAULT_SNIPPET_COUNT,
    template: Optional[PromptTemplate] = None,
) -> str:
    """Render the assistive-instructions prompt for a triaged incident."""
    if audience not in ("dispatcher", "public"):
        raise RenderError(f"unknown audience: {audience}")
    cats = sorted(set(categories))
    if template is None:
        task = PromptTask.DISPATCHER_ADVISORY if audience == "dispatcher" else PromptTask.PUBLIC_ADVISORY
        template = DEFAULT_TEMPLATES[task]
    chosen = select_snippets(cats, snippets, n_snippets)
    snippet_text = "\n".join(f"[{s.id}] {escape_braces(s.text)}" for s in chosen)
    picture = (
        f"severity {level_word}; place: {escape_braces(location_text) if location_text else 'unknown'}; "
        f"callback: {escape_braces(contact) if contact else 'unknown'}"
    )
    return _substitute(
        template,
        {
            "message": picture,
            "labels": ", ".join(cats) if cats else "(none)",
            "guideline_snippets": snippet_text,
        },
    )


def load_snippets(text: str, taxonomy: CategoryTaxonomy) -> list[GuidelineSnippet]:
    """Parse an NDJSON snippet store, checking tags against the taxonomy."""
    out: list[GuidelineSnippet] = []
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        record = json.loads(line)
        tags = frozenset(record.get("tags", []))
        unknown = [t for t in tags if t not in taxonomy]
        if unknown:
            raise ValueError(f"snippet line {i}: tags not in taxonomy: {unknown}")
        out.append(
            GuidelineSnippet(
                id=str(record["id"]),
                source_doc=str(record.get("source_doc", "")),
                text=str(record["text"]),
                tags=tags,
            )
        )
    return out


def default_snippets(taxonomy: CategoryTaxonomy) -> list[GuidelineSnippet]:
    """The curated snippet store shipped with the package."""
    text = (importlib_resources.files("crisisflow.resources") / "snippets.ndjson").read_text("utf-8")
    return load_snippets(text, taxonomy)
