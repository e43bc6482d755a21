"""Dialogue corpus model, ReDial-style JSON-lines ingestion, popularity and
head/body/tail segmentation."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

ORIGINS = ("original", "augmented_tail", "augmented_body")
GROUPS = ("head", "body", "tail")
MENTION_RE = re.compile(r"@(\w+)")


class CorpusError(ValueError):
    """Raised for malformed corpus files or violated corpus invariants."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    text: str
    turn_index: int

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError("utterance text is empty")
        if self.turn_index < 0:
            raise CorpusError("turn_index must be non-negative")


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    utterances: tuple[Utterance, ...]
    mentions: frozenset[str] = frozenset()
    origin: str = "original"

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError(f"dialogue {self.dialogue_id!r} has no utterances")
        turns = [u.turn_index for u in self.utterances]
        if any(b <= a for a, b in zip(turns, turns[1:])):
            raise CorpusError(f"dialogue {self.dialogue_id!r}: turn indices not increasing")
        if self.origin not in ORIGINS:
            raise CorpusError(f"unknown origin {self.origin!r}")
        object.__setattr__(self, "mentions", frozenset(self.mentions))

    @property
    def text(self) -> str:
        return "\n".join(u.text for u in self.utterances)

    @classmethod
    def from_turns(cls, dialogue_id: str, turns: Iterable[tuple[str, str]],
                   mentions: Iterable[str] = (), origin: str = "original") -> "Dialogue":
        utts = tuple(Utterance(s, t, i) for i, (s, t) in enumerate(turns))
        return cls(dialogue_id, utts, frozenset(mentions), origin)


@dataclass
class Corpus:
    dialogues: list[Dialogue]
    catalog: dict[str, str]
    warnings: list[dict] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for d in self.dialogues:
            if d.dialogue_id in seen:
                raise CorpusError(f"duplicate dialogue_id {d.dialogue_id!r}")
            seen.add(d.dialogue_id)
            missing = d.mentions - self.catalog.keys()
            if missing:
                raise CorpusError(f"dialogue {d.dialogue_id!r} mentions unknown movies {sorted(missing)}")

    def __len__(self):
        return len(self.dialogues)

    def by_id(self) -> dict[str, Dialogue]:
        return {d.dialogue_id: d for d in self.dialogues}

    @property
    def original(self) -> list[Dialogue]:
        return [d for d in self.dialogues if d.origin == "original"]


def _parse_line(obj: dict, lineno: int, warnings: list) -> tuple[Dialogue, dict]:
    try:
        did = str(obj["conversationId"])
        messages = obj["messages"]
        mention_map = obj.get("movieMentions") or {}
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"missing field {exc}", lineno) from None
    if not isinstance(messages, list) or not isinstance(mention_map, dict):
        raise CorpusError("messages must be a list and movieMentions an object", lineno)
    mention_map = {str(k): str(v) for k, v in mention_map.items()}

    utts = []
    for i, msg in enumerate(messages):
        try:
            text = str(msg["text"])
            speaker = str(msg["senderWorkerId"])
        except (KeyError, TypeError) as exc:
            raise CorpusError(f"message {i}: missing field {exc}", lineno) from None
        if not text.strip():
            warnings.append({"line": lineno, "dialogue_id": did, "kind": "empty_message", "message": i})
            continue
        utts.append(Utterance(speaker, text, len(utts)))
        for ref in MENTION_RE.findall(text):
            if ref not in mention_map:
                warnings.append({"line": lineno, "dialogue_id": did, "kind": "unresolved_mention",
                                 "movie_id": ref})
    if not utts:
        raise CorpusError(f"dialogue {did!r} has no non-empty messages", lineno)
    origin = obj.get("origin") or "original"
    if origin not in ORIGINS:
        raise CorpusError(f"unknown origin {origin!r}", lineno)
    return Dialogue(did, tuple(utts), frozenset(mention_map), origin), mention_map


def ingest(path, catalog: Mapping[str, str] | None = None) -> Corpus:
    """Read a JSON-lines corpus file.

    Movie references of the form ``@id`` that appear in message text but not
    in ``movieMentions`` are kept out of the mention set and reported in
    ``Corpus.warnings``.
    """
    path = Path(path)
    dialogues: list[Dialogue] = []
    titles: dict[str, str] = dict(catalog or {})
    warnings: list[dict] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise CorpusError("expected a JSON object", lineno)
            dlg, mention_map = _parse_line(obj, lineno, warnings)
            if dlg.dialogue_id in seen:
                raise CorpusError(f"duplicate dialogue_id {dlg.dialogue_id!r}", lineno)
            seen.add(dlg.dialogue_id)
            for mid, title in mention_map.items():
                titles.setdefault(mid, title)
            dialogues.append(dlg)
    if not dialogues:
        raise CorpusError("empty corpus")
    for w in warnings:
        logger.warning("corpus %s: %s", path.name, w)
    return Corpus(dialogues, titles, warnings)


def dialogue_to_json(d: Dialogue, catalog: Mapping[str, str]) -> dict:
    obj = {
        "conversationId": d.dialogue_id,
        "messages": [{"senderWorkerId": u.speaker_id, "text": u.text} for u in d.utterances],
        "movieMentions": {m: catalog[m] for m in sorted(d.mentions)},
    }
    if d.origin != "original":
        obj["origin"] = d.origin
    return obj


def write_corpus(corpus: Corpus, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in corpus.dialogues:
            fh.write(json.dumps(dialogue_to_json(d, corpus.catalog), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


@dataclass(frozen=True)
class PopularityTable:
    pop: dict[str, int]

    def __getitem__(self, movie_id: str) -> int:
        return self.pop.get(movie_id, 0)

    def mentioned(self) -> list[str]:
        return [m for m, c in self.pop.items() if c >= 1]


def compute_popularity(corpus: Corpus, dialogues: Iterable[Dialogue] | None = None) -> PopularityTable:
    """Number of distinct dialogues mentioning each catalog movie."""
    counts = Counter()
    for d in corpus.dialogues if dialogues is None else dialogues:
        counts.update(d.mentions)
    pop = {m: counts.get(m, 0) for m in sorted(corpus.catalog)}
    for m in counts:
        pop.setdefault(m, counts[m])
    return PopularityTable(pop)


@dataclass(frozen=True)
class Segmentation:
    head: frozenset[str]
    body: frozenset[str]
    tail: frozenset[str]
    tail_max: int
    body_max: int

    def group_of(self, movie_id: str) -> str | None:
        for name in GROUPS:
            if movie_id in getattr(self, name):
                return name
        return None

    def to_json(self) -> dict:
        return {
            "thresholds": {"tail_max": self.tail_max, "body_max": self.body_max},
            "head": sorted(self.head),
            "body": sorted(self.body),
            "tail": sorted(self.tail),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Segmentation":
        th = obj["thresholds"]
        return cls(frozenset(obj["head"]), frozenset(obj["body"]), frozenset(obj["tail"]),
                   int(th["tail_max"]), int(th["body_max"]))


def quartile_threshold(pop: PopularityTable) -> int:
    """Nearest-rank 25th percentile of the popularity of mentioned movies."""
    values = sorted(c for c in pop.pop.values() if c >= 1)
    if not values:
        raise CorpusError("no mentioned movies")
    return values[max(1, math.ceil(0.25 * len(values))) - 1]


def segment(pop: PopularityTable, tail_max: int = 1, body_max: int = 5, mode: str = "fixed") -> Segmentation:
    """Split mentioned movies into head (> body_max), body and tail (<= tail_max).

    ``mode="quartile"`` replaces ``tail_max`` by the first quartile of the
    popularity values. Movies with zero popularity belong to no group.
    """
    if mode == "quartile":
        tail_max = quartile_threshold(pop)
    elif mode != "fixed":
        raise ValueError(f"unknown segmentation mode {mode!r}")
    if not 1 <= tail_max < body_max:
        raise CorpusError(f"need 1 <= tail_max < body_max, got {tail_max}, {body_max}")
    head, body, tail = set(), set(), set()
    for m, c in pop.pop.items():
        if c < 1:
            continue
        if c <= tail_max:
            tail.add(m)
        elif c <= body_max:
            body.add(m)
        else:
            head.add(m)
    return Segmentation(frozenset(head), frozenset(body), frozenset(tail), tail_max, body_max)


def build_subsets(corpus: Corpus, seg: Segmentation) -> dict[str, list[Dialogue]]:
    """Per-movie training subsets for every body and tail movie."""
    targets = seg.body | seg.tail
    subsets: dict[str, list[Dialogue]] = {m: [] for m in sorted(targets)}
    for d in corpus.dialogues:
        for m in d.mentions & targets:
            subsets[m].append(d)
    return subsets


def union_subset(subsets: Mapping[str, list[Dialogue]], movies: Iterable[str]) -> list[Dialogue]:
    """De-duplicated union of per-movie subsets, in first-seen order."""
    seen: dict[str, Dialogue] = {}
    for m in sorted(movies):
        for d in subsets.get(m, ()):
            seen.setdefault(d.dialogue_id, d)
    return list(seen.values())


@dataclass(frozen=True)
class GroupStats:
    titles: int
    mentions: int
    title_share: float
    mention_share: float


@dataclass(frozen=True)
class StatsReport:
    groups: dict[str, GroupStats]
    n_dialogues: int
    n_titles: int
    n_mentions: int
    tail_max: int
    body_max: int

    def to_json(self) -> dict:
        return {
            "n_dialogues": self.n_dialogues,
            "n_titles": self.n_titles,
            "n_mentions": self.n_mentions,
            "thresholds": {"tail_max": self.tail_max, "body_max": self.body_max},
            "groups": {k: vars(v) for k, v in self.groups.items()},
        }

    def to_markdown(self) -> str:
        lines = ["| Group | Titles | Title share | Mentions | Mention share |",
                 "|---|---:|---:|---:|---:|"]
        for name in GROUPS:
            g = self.groups[name]
            lines.append(f"| {name} | {g.titles} | {100 * g.title_share:.1f}% | "
                         f"{g.mentions} | {100 * g.mention_share:.1f}% |")
        return "\n".join(lines) + "\n"


def corpus_stats(corpus: Corpus, seg: Segmentation, pop: PopularityTable | None = None) -> StatsReport:
    pop = pop or compute_popularity(corpus)
    sizes = {g: len(getattr(seg, g)) for g in GROUPS}
    mentions = {g: sum(pop[m] for m in getattr(seg, g)) for g in GROUPS}
    n_titles = sum(sizes.values())
    n_mentions = sum(mentions.values())
    groups = {
        g: GroupStats(sizes[g], mentions[g],
                      sizes[g] / n_titles if n_titles else 0.0,
                      mentions[g] / n_mentions if n_mentions else 0.0)
        for g in GROUPS
    }
    return StatsReport(groups, len(corpus.dialogues), n_titles, n_mentions, seg.tail_max, seg.body_max)
