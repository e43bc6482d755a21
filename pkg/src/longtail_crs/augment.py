"""Prototype-guided dialogue augmentation.

Stages: prompt construction, generation through a chat client, similarity
filtering against the prototype, five-judge voting with a human-review queue,
and integration into the corpus under a global ratio cap.

Transcripts exchanged with the generator use one turn per line,
``SPEAKER: text``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from .corpus import Corpus, CorpusError, Dialogue, dialogue_to_json
from .embed import HashedEmbedder, SemanticVector, cosine
from .errors import ConfigError

logger = logging.getLogger(__name__)

STATES = ("generated", "filtered_out", "accepted", "in_review", "discarded")
TRANSITIONS = {
    "generated": {"filtered_out", "accepted", "in_review", "discarded"},
    "in_review": {"accepted", "discarded"},
}
RESOLUTIONS = ("pending", "approved", "rejected")
TURN_RE = re.compile(r"^\s*([A-Za-z][\w ]{0,31}):\s*(\S.*)$")
API_KEY_ENV = "LUMI_API_KEY"


class GenerationError(RuntimeError):
    pass


class ReviewError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    temperature: float = 0.8
    tail_count_range: tuple[int, int] = (8, 10)
    body_count_range: tuple[int, int] = (4, 5)
    filter_threshold: float = 0.85
    judge_count: int = 5
    accept_min: int = 4
    review_min: int = 2
    rho: float = 0.3
    max_in_flight: int = 4
    judge_pass_threshold: float = 0.5
    prompt_neighbors: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tail_count_range", tuple(self.tail_count_range))
        object.__setattr__(self, "body_count_range", tuple(self.body_count_range))
        if not 0 <= self.review_min < self.accept_min <= self.judge_count:
            raise ConfigError("need 0 <= review_min < accept_min <= judge_count")
        if not 0 < self.filter_threshold <= 1:
            raise ConfigError("filter_threshold must be in (0, 1]")
        if not 0 <= self.rho <= 1:
            raise ConfigError("rho must be in [0, 1]")
        for lo, hi in (self.tail_count_range, self.body_count_range):
            if not 0 <= lo <= hi:
                raise ConfigError("count ranges must satisfy 0 <= lo <= hi")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")

    def count_range(self, tier: str) -> tuple[int, int]:
        if tier == "tail":
            return self.tail_count_range
        if tier == "body":
            return self.body_count_range
        raise ValueError(f"unknown tier {tier!r}")


@dataclass(frozen=True)
class JudgeVerdict:
    judge_id: str
    scores: tuple[float, float, float]  # consistency, fluency, plausibility
    threshold: float = 0.5
    error: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if len(self.scores) != 3:
            raise ValueError("a verdict has exactly three scores")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValueError(f"judge {self.judge_id}: scores must lie in [0, 1]")

    @property
    def passed(self) -> bool:
        return self.error is None and all(s >= self.threshold for s in self.scores)

    @classmethod
    def failed(cls, judge_id: str, error: str) -> "JudgeVerdict":
        return cls(judge_id, (0.0, 0.0, 0.0), error=error)

    def to_json(self) -> dict:
        out = {"judge_id": self.judge_id, "pass": self.passed, "scores": list(self.scores)}
        if self.error:
            out["error"] = self.error
        return out


@dataclass
class Candidate:
    movie_id: str
    tier: str
    prompt_hash: str
    index: int
    text: str
    temperature: float
    sim_to_prototype: float | None = None
    state: str = "generated"
    votes: list[JudgeVerdict] = field(default_factory=list)

    @property
    def candidate_id(self) -> str:
        return f"{self.movie_id}-{self.index:03d}"

    @property
    def pass_count(self) -> int:
        return sum(v.passed for v in self.votes)

    def move_to(self, state: str) -> None:
        if state not in TRANSITIONS.get(self.state, ()):
            raise ValueError(f"candidate {self.candidate_id}: illegal transition {self.state} -> {state}")
        self.state = state

    def to_json(self) -> dict:
        return {
            "candidate_id": self.candidate_id, "movie_id": self.movie_id, "tier": self.tier,
            "prompt_hash": self.prompt_hash, "index": self.index, "text": self.text,
            "temperature": self.temperature, "sim_to_prototype": self.sim_to_prototype,
            "state": self.state, "pass_count": self.pass_count,
            "votes": [v.to_json() for v in self.votes],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Candidate":
        votes = [JudgeVerdict(v["judge_id"], tuple(v["scores"]), error=v.get("error")) for v in obj.get("votes", [])]
        return cls(obj["movie_id"], obj["tier"], obj["prompt_hash"], int(obj["index"]), obj["text"],
                   float(obj["temperature"]), obj.get("sim_to_prototype"), obj.get("state", "generated"), votes)


# --------------------------------------------------------------------------
# prompting


def transcript(d: Dialogue) -> str:
    return "\n".join(f"{u.speaker_id}: {u.text}" for u in d.utterances)


def build_prompt(prototype: Dialogue, neighbors: Sequence[Dialogue], movie_title: str,
                 max_neighbors: int = 3) -> str:
    parts = [
        "You write natural movie-recommendation conversations between a SEEKER and a RECOMMENDER.",
        "",
        "Reference conversation:",
        transcript(prototype),
    ]
    for i, d in enumerate(neighbors[:max_neighbors], start=1):
        parts += ["", f"Related conversation {i}:", transcript(d)]
    parts += [
        "",
        f"Write a new multi-turn conversation in the same style in which the RECOMMENDER "
        f"explicitly recommends the movie {movie_title}. "
        "Write one turn per line as SPEAKER: text.",
    ]
    return "\n".join(parts)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


def parse_transcript(text: str) -> list[tuple[str, str]]:
    turns = []
    for line in text.splitlines():
        if not line.strip():
            continue
        m = TURN_RE.match(line)
        if not m:
            raise CorpusError(f"unparseable transcript line {line[:60]!r}")
        turns.append((m.group(1).strip(), m.group(2).strip()))
    if not turns:
        raise CorpusError("empty transcript")
    return turns


# --------------------------------------------------------------------------
# chat clients and judges


class ChatClient(Protocol):
    def generate(self, prompt: str, temperature: float, index: int) -> str: ...


class Judge(Protocol):
    judge_id: str

    def judge(self, candidate: Candidate) -> JudgeVerdict: ...


_MOCK_WORDS = ("great", "story", "watch", "really", "classic", "actor", "scene", "ending",
               "funny", "dark", "slow", "twist", "like", "enjoy", "heard", "seen")


class MockChatClient:
    """Offline generator whose output depends only on (prompt hash, index)."""

    def generate(self, prompt: str, temperature: float, index: int) -> str:
        ph = prompt_hash(prompt)
        rng = random.Random(f"{ph}:{index}")
        m = re.search(r"recommends the movie (.+?)\. Write one turn", prompt)
        title = m.group(1) if m else "this movie"
        lines = []
        for t in range(rng.randint(3, 6)):
            words = " ".join(rng.choice(_MOCK_WORDS) for _ in range(rng.randint(4, 9)))
            speaker = "SEEKER" if t % 2 == 0 else "RECOMMENDER"
            lines.append(f"{speaker}: {words}")
        lines.append(f"RECOMMENDER: you should try {title} ({ph[:6]}-{index})")
        return "\n".join(lines)


class HttpChatClient:
    """Chat-completions client for an OpenAI-compatible endpoint.

    Transport errors, 429 and 5xx responses are retried after each delay in
    ``backoff``; other HTTP errors fail at once.
    """

    RETRY_STATUS = {429, 500, 502, 503, 504}

    def __init__(self, url: str, model: str, api_key: str | None = None, client=None,
                 backoff: Sequence[float] = (0.5, 1.0, 2.0), sleep: Callable[[float], None] = time.sleep,
                 timeout: float = 60.0):
        import httpx

        self.url = url
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise ConfigError(f"environment variable {API_KEY_ENV} is not set")
        self._client = client or httpx.Client(timeout=timeout)
        self.backoff = tuple(backoff)
        self._sleep = sleep

    def _redact(self, s: str) -> str:
        return s.replace(self.api_key, "***") if self.api_key else s

    def chat(self, prompt: str, temperature: float, seed: int | None = None) -> str:
        import httpx

        body = {"model": self.model, "temperature": temperature,
                "messages": [{"role": "user", "content": prompt}]}
        if seed is not None:
            body["seed"] = seed
        headers = {"Authorization": f"Bearer {self.api_key}"}
        logger.debug("chat request %s", self._redact(json.dumps(body)))
        last = None
        for attempt in range(len(self.backoff) + 1):
            if attempt:
                self._sleep(self.backoff[attempt - 1])
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                logger.warning("chat attempt %d failed: %s", attempt + 1, self._redact(last))
                continue
            if resp.status_code in self.RETRY_STATUS:
                last = f"HTTP {resp.status_code}"
                logger.warning("chat attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise GenerationError(f"HTTP {resp.status_code}: {self._redact(resp.text[:200])}")
            logger.debug("chat response %s", self._redact(resp.text))
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise GenerationError(f"malformed chat response: {exc!r}") from None
        raise GenerationError(f"giving up after {len(self.backoff) + 1} attempts ({last})")

    def generate(self, prompt: str, temperature: float, index: int) -> str:
        return self.chat(prompt, temperature, seed=index)


JUDGE_PROMPT = (
    "Rate the conversation below on three criteria, each from 0 to 1: semantic consistency, "
    "fluency, and plausibility of the recommendation of movie id {movie}. Answer with JSON only: "
    '{{"consistency": x, "fluency": y, "plausibility": z}}\n\n{text}'
)


class ChatJudge:
    """Judge backed by any chat client exposing ``chat(prompt, temperature)``."""

    def __init__(self, judge_id: str, client, threshold: float = 0.5):
        self.judge_id = judge_id
        self.client = client
        self.threshold = threshold

    def judge(self, candidate: Candidate) -> JudgeVerdict:
        reply = self.client.chat(JUDGE_PROMPT.format(movie=candidate.movie_id, text=candidate.text), 0.0)
        m = re.search(r"\{.*\}", reply, re.S)
        if not m:
            raise ValueError("no JSON object in judge reply")
        obj = json.loads(m.group(0))
        return JudgeVerdict(self.judge_id, (obj["consistency"], obj["fluency"], obj["plausibility"]),
                            self.threshold)


class MockJudge:
    """Deterministic judge; scores are hashes of (judge id, candidate text) mapped to [0, 1)."""

    def __init__(self, judge_id: str, threshold: float = 0.5, bias: float = 0.4):
        self.judge_id = judge_id
        self.threshold = threshold
        self.bias = bias

    def judge(self, candidate: Candidate) -> JudgeVerdict:
        h = hashlib.sha256(f"{self.judge_id}\x00{candidate.text}".encode()).digest()
        scores = tuple(min(1.0, self.bias + (1 - self.bias) * int.from_bytes(h[4 * i:4 * i + 4], "big") / 2**32)
                       for i in range(3))
        return JudgeVerdict(self.judge_id, scores, self.threshold)


class ScriptedJudge:
    """Returns fixed pass/fail answers keyed by candidate id; raises for ids mapped to ``None``."""

    def __init__(self, judge_id: str, answers: dict, threshold: float = 0.5):
        self.judge_id = judge_id
        self.answers = answers
        self.threshold = threshold

    def judge(self, candidate: Candidate) -> JudgeVerdict:
        ans = self.answers[candidate.candidate_id]
        if ans is None:
            raise RuntimeError("scripted judge failure")
        s = 1.0 if ans else 0.0
        return JudgeVerdict(self.judge_id, (s, s, s), self.threshold)


# --------------------------------------------------------------------------
# stages


def generation_count(movie_id: str, tier: str, cfg: AugmentConfig) -> int:
    lo, hi = cfg.count_range(tier)
    return random.Random(f"{cfg.seed}:{tier}:{movie_id}").randint(lo, hi)


def generate(prompt: str, movie_id: str, tier: str, cfg: AugmentConfig, client: ChatClient,
             executor: ThreadPoolExecutor | None = None) -> list[Candidate]:
    """Draw the tier's candidate count and request that many completions.

    Raises :class:`GenerationError` if any request fails after retries.
    """
    n = generation_count(movie_id, tier, cfg)
    ph = prompt_hash(prompt)
    call = lambda i: client.generate(prompt, cfg.temperature, i)  # noqa: E731
    texts = list(executor.map(call, range(n))) if executor else [call(i) for i in range(n)]
    return [Candidate(movie_id, tier, ph, i, t, cfg.temperature) for i, t in enumerate(texts)]


def similarity_filter(candidates: Iterable[Candidate], prototype_vec: SemanticVector, embedder,
                      threshold: float = 0.85) -> tuple[list[Candidate], list[Candidate]]:
    """Record similarity to the prototype; candidates strictly above ``threshold`` are filtered out."""
    kept, dropped = [], []
    for c in candidates:
        c.sim_to_prototype = cosine(embedder.embed_text(c.text), prototype_vec)
        if c.sim_to_prototype > threshold:
            c.move_to("filtered_out")
            dropped.append(c)
        else:
            kept.append(c)
    return kept, dropped


def route(pass_count: int, cfg: AugmentConfig) -> str:
    if not 0 <= pass_count <= cfg.judge_count:
        raise ValueError(f"pass count {pass_count} outside [0, {cfg.judge_count}]")
    if pass_count >= cfg.accept_min:
        return "accepted"
    if pass_count >= cfg.review_min:
        return "in_review"
    return "discarded"


def collect_votes(candidate: Candidate, judges: Sequence[Judge]) -> list[JudgeVerdict]:
    votes = []
    for j in judges:
        try:
            votes.append(j.judge(candidate))
        except Exception as exc:  # a broken judge votes fail
            logger.warning("judge %s failed on %s: %r", j.judge_id, candidate.candidate_id, exc)
            votes.append(JudgeVerdict.failed(j.judge_id, repr(exc)))
    return votes


def judge_and_route(candidate: Candidate, judges: Sequence[Judge], cfg: AugmentConfig,
                    queue: "ReviewQueue | None" = None, votes: list[JudgeVerdict] | None = None) -> Candidate:
    if len(judges) != cfg.judge_count:
        raise ConfigError(f"expected {cfg.judge_count} judges, got {len(judges)}")
    if candidate.state != "generated" or candidate.sim_to_prototype is None:
        raise ValueError(f"candidate {candidate.candidate_id} has not passed the similarity filter")
    candidate.votes = votes if votes is not None else collect_votes(candidate, judges)
    candidate.move_to(route(candidate.pass_count, cfg))
    if candidate.state == "in_review" and queue is not None and candidate.candidate_id not in queue.entries:
        queue.add(candidate)
    return candidate


@dataclass
class ReviewQueueEntry:
    candidate_id: str
    pass_count: int
    created_at: str
    resolution: str = "pending"
    candidate: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class ReviewQueue:
    """JSON-lines queue of borderline candidates awaiting a human decision."""

    def __init__(self, path, cfg: AugmentConfig | None = None, clock: Callable[[], str] = _utc_now):
        self.path = Path(path)
        self.cfg = cfg or AugmentConfig()
        self.clock = clock
        self.entries: dict[str, ReviewQueueEntry] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    e = ReviewQueueEntry(**json.loads(line))
                    self.entries[e.candidate_id] = e

    def add(self, candidate: Candidate) -> ReviewQueueEntry:
        pc = candidate.pass_count
        if not self.cfg.review_min <= pc < self.cfg.accept_min:
            raise ReviewError(f"pass count {pc} is outside the review band")
        if candidate.candidate_id in self.entries:
            raise ReviewError(f"candidate {candidate.candidate_id} already queued")
        entry = ReviewQueueEntry(candidate.candidate_id, pc, self.clock(), "pending", candidate.to_json())
        self.entries[entry.candidate_id] = entry
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        return entry

    def pending(self) -> list[ReviewQueueEntry]:
        return [e for e in self.entries.values() if e.resolution == "pending"]

    def resolve(self, candidate_id: str, decision: str) -> Candidate:
        if decision not in ("approved", "rejected"):
            raise ReviewError(f"decision must be 'approved' or 'rejected', got {decision!r}")
        entry = self.entries.get(candidate_id)
        if entry is None:
            raise ReviewError(f"unknown review entry {candidate_id!r}")
        if entry.resolution != "pending":
            raise ReviewError(f"entry {candidate_id!r} already {entry.resolution}")
        cand = Candidate.from_json(entry.candidate)
        cand.move_to("accepted" if decision == "approved" else "discarded")
        entry.resolution = decision
        entry.candidate = cand.to_json()
        # append-only: the resolution is a new row, replay keeps the last one
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        return cand

    def approved(self) -> list[Candidate]:
        return [Candidate.from_json(e.candidate) for e in self.entries.values() if e.resolution == "approved"]


def resolve_review(queue_path, candidate_id: str, decision: str) -> Candidate:
    return ReviewQueue(queue_path).resolve(candidate_id, decision)


@dataclass
class IntegrationReport:
    added: list[str]
    dropped_by_cap: list[str]
    skipped: list[dict]
    cap: int


def candidate_dialogue(c: Candidate) -> Dialogue:
    return Dialogue.from_turns(f"aug-{c.candidate_id}", parse_transcript(c.text), {c.movie_id},
                               origin=f"augmented_{c.tier}")


def integrate(accepted: Sequence[Candidate], corpus: Corpus, rho: float = 0.3) -> tuple[Corpus, IntegrationReport]:
    """Append accepted candidates as tagged dialogues, at most ``floor(rho * |original|)``.

    Candidates are kept by decreasing pass count, then candidate id.
    """
    if not 0 <= rho <= 1:
        raise ConfigError("rho must be in [0, 1]")
    cap = math.floor(rho * len(corpus.original) + 1e-9)
    existing = {d.dialogue_id for d in corpus.dialogues}
    parsed, skipped = [], []
    for c in accepted:
        if c.state != "accepted":
            raise ValueError(f"candidate {c.candidate_id} is {c.state}, not accepted")
        if c.movie_id not in corpus.catalog:
            skipped.append({"candidate_id": c.candidate_id, "reason": f"movie {c.movie_id} not in catalog"})
            continue
        try:
            d = candidate_dialogue(c)
        except CorpusError as exc:
            skipped.append({"candidate_id": c.candidate_id, "reason": str(exc)})
            continue
        if d.dialogue_id in existing:
            skipped.append({"candidate_id": c.candidate_id, "reason": "already integrated"})
            continue
        parsed.append((c, d))
    parsed.sort(key=lambda cd: (-cd[0].pass_count, cd[0].candidate_id))
    keep, drop = parsed[:cap], parsed[cap:]
    keep.sort(key=lambda cd: cd[0].candidate_id)
    for entry in skipped:
        logger.warning("integration skipped %s", entry)
    new = Corpus(list(corpus.dialogues) + [d for _, d in keep], dict(corpus.catalog), list(corpus.warnings))
    report = IntegrationReport([d.dialogue_id for _, d in keep], [c.candidate_id for c, _ in drop], skipped, cap)
    return new, report


# --------------------------------------------------------------------------
# pipeline


@dataclass
class AugmentTarget:
    movie_id: str
    tier: str
    title: str
    prototype: Dialogue
    prototype_vec: SemanticVector
    neighbors: list[Dialogue]


@dataclass
class PipelineResult:
    candidates: list[Candidate]
    errors: dict[str, str]
    corpus: Corpus
    report: IntegrationReport

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in STATES}
        for c in self.candidates:
            out[c.state] += 1
        return out


def run_pipeline(targets: Sequence[AugmentTarget], corpus: Corpus, cfg: AugmentConfig, client: ChatClient,
                 judges: Sequence[Judge], embedder=None, queue: ReviewQueue | None = None) -> PipelineResult:
    """Generate, filter, judge and integrate for every target movie.

    Requests run on up to ``cfg.max_in_flight`` threads; all state changes
    happen afterwards in (movie id, candidate index) order.
    """
    if embedder is None:
        embedder = HashedEmbedder().fit(d.text for d in corpus.dialogues)
    targets = sorted(targets, key=lambda t: t.movie_id)
    errors: dict[str, str] = {}
    generated: list[tuple[AugmentTarget, list[Candidate]]] = []
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        for t in targets:
            prompt = build_prompt(t.prototype, t.neighbors, t.title, cfg.prompt_neighbors)
            try:
                generated.append((t, generate(prompt, t.movie_id, t.tier, cfg, client, pool)))
            except Exception as exc:
                logger.error("generation failed for %s: %r", t.movie_id, exc)
                errors[t.movie_id] = repr(exc)

        to_judge: list[Candidate] = []
        all_cands: list[Candidate] = []
        for t, cands in generated:
            kept, _ = similarity_filter(cands, t.prototype_vec, embedder, cfg.filter_threshold)
            to_judge.extend(kept)
            all_cands.extend(cands)
        votes = list(pool.map(lambda c: collect_votes(c, judges), to_judge))

    for c, v in zip(to_judge, votes):
        judge_and_route(c, judges, cfg, queue, votes=v)
    all_cands.sort(key=lambda c: (c.movie_id, c.index))
    accepted = [c for c in all_cands if c.state == "accepted"]
    if queue is not None:
        movies = {t.movie_id for t in targets}
        seen = {c.candidate_id for c in accepted}
        accepted += [c for c in queue.approved() if c.movie_id in movies and c.candidate_id not in seen]
    new_corpus, report = integrate(accepted, corpus, cfg.rho)
    return PipelineResult(all_cands, errors, new_corpus, report)


def write_augmented(corpus: Corpus, path) -> int:
    """Write only the augmented dialogues of ``corpus``; returns how many."""
    n = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in corpus.dialogues:
            if d.origin != "original":
                fh.write(json.dumps(dialogue_to_json(d, corpus.catalog), ensure_ascii=False, sort_keys=True) + "\n")
                n += 1
    return n
