"""Prototype selection and composite-similarity support sets.

FinalScore(a, x) = w_sem * cos(v_a, v_x) + w_emo / (1 + |e_a - e_x|_1)
                   + w_mov * |M(a) & M(x)| + w_int * R
with R = sem * emo * sigmoid(steepness * mov).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, Dialogue
from .embed import AffectModel, AffectVector, HashedEmbedder, SemanticVector, cosine, l1_distance

STRATEGIES = ("medoid", "random", "centroid")


@dataclass(frozen=True)
class SimilarityWeights:
    w_sem: float = 0.4
    w_emo: float = 0.2
    w_mov: float = 0.2
    w_int: float = 0.2
    steepness: float = 1.0
    normalize_mov: bool = False

    def __post_init__(self):
        ws = (self.w_sem, self.w_emo, self.w_mov, self.w_int)
        if any(w < 0 or not math.isfinite(w) for w in ws):
            raise ValueError("similarity weights must be finite and non-negative")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ValueError(f"similarity weights must sum to 1, got {sum(ws)!r}")
        if not self.steepness > 0:
            raise ValueError("steepness must be > 0")

    @classmethod
    def equal(cls, steepness: float = 1.0) -> "SimilarityWeights":
        return cls(0.25, 0.25, 0.25, 0.25, steepness)


@dataclass(frozen=True)
class DialogueFeatures:
    """Embedding-side view of a dialogue, computed once and reused for scoring."""
    dialogue_id: str
    semantic: SemanticVector
    affect: AffectVector
    mentions: frozenset


@dataclass(frozen=True)
class Prototype:
    movie_id: str
    dialogue_id: str
    semantic: SemanticVector
    affect: AffectVector
    mentions: frozenset

    @property
    def features(self) -> DialogueFeatures:
        return DialogueFeatures(self.dialogue_id, self.semantic, self.affect, self.mentions)

    def to_json(self) -> dict:
        return {"movie_id": self.movie_id, "prototype_dialogue_id": self.dialogue_id}


@dataclass(frozen=True)
class SupportSet:
    movie_id: str
    prototype_dialogue_id: str
    neighbors: tuple  # ((dialogue_id, score), ...)

    def __post_init__(self):
        ids = [d for d, _ in self.neighbors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate dialogue in support set")
        if self.prototype_dialogue_id in ids:
            raise ValueError("support set contains the prototype dialogue")
        scores = [s for _, s in self.neighbors]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError("support set scores must be non-increasing")

    @property
    def ids(self) -> list[str]:
        return [d for d, _ in self.neighbors]

    def to_json(self) -> dict:
        return {"movie_id": self.movie_id, "prototype_dialogue_id": self.prototype_dialogue_id,
                "neighbors": [{"dialogue_id": d, "score": s} for d, s in self.neighbors]}


class FeatureStore:
    """Semantic and affect vectors for every dialogue of a corpus.

    The hashed embedder is fitted on the corpus texts unless one is passed in.
    """

    def __init__(self, dialogues: Sequence[Dialogue], embedder=None, affect: AffectModel | None = None):
        self.dialogues = list(dialogues)
        texts = [d.text for d in self.dialogues]
        if embedder is None:
            embedder = HashedEmbedder().fit(texts)
        self.embedder = embedder
        self.affect_model = affect or AffectModel()
        sem = embedder.embed_many(texts)
        self._feat = {
            d.dialogue_id: DialogueFeatures(d.dialogue_id, s, self.affect_model.affect_vector(d.text), d.mentions)
            for d, s in zip(self.dialogues, sem)
        }
        self.ids = [d.dialogue_id for d in self.dialogues]
        self.sem_matrix = np.vstack([self._feat[i].semantic.values for i in self.ids]) if self.ids else np.zeros((0, 0))
        self.aff_matrix = np.vstack([self._feat[i].affect.values for i in self.ids]) if self.ids else np.zeros((0, 8))

    @classmethod
    def from_corpus(cls, corpus: Corpus, embedder=None, affect=None) -> "FeatureStore":
        return cls(corpus.dialogues, embedder, affect)

    def __getitem__(self, dialogue_id: str) -> DialogueFeatures:
        return self._feat[dialogue_id]

    def __contains__(self, dialogue_id: str) -> bool:
        return dialogue_id in self._feat

    def prototype(self, movie_id: str, dialogue_id: str) -> Prototype:
        f = self._feat[dialogue_id]
        if movie_id not in f.mentions:
            raise ValueError(f"dialogue {dialogue_id!r} does not mention {movie_id!r}")
        return Prototype(movie_id, dialogue_id, f.semantic, f.affect, f.mentions)


def _feat(x) -> DialogueFeatures:
    return x.features if isinstance(x, Prototype) else x


def sim_sem(a, x) -> float:
    return cosine(_feat(a).semantic, _feat(x).semantic)


def sim_emo(a, x) -> float:
    return 1.0 / (1.0 + l1_distance(_feat(a).affect, _feat(x).affect))


def sim_mov(a, x) -> int:
    return len(_feat(a).mentions & _feat(x).mentions)


def interaction_R(sem: float, emo: float, mov: float, steepness: float = 1.0) -> float:
    if not steepness > 0:
        raise ValueError("steepness must be > 0")
    return sem * emo / (1.0 + math.exp(-steepness * mov))


def final_score(a, x, w: SimilarityWeights) -> float:
    fa, fx = _feat(a), _feat(x)
    sem, emo, mov = sim_sem(fa, fx), sim_emo(fa, fx), sim_mov(fa, fx)
    mov_term = mov / len(fa.mentions) if w.normalize_mov and fa.mentions else mov
    return (w.w_sem * sem + w.w_emo * emo + w.w_mov * mov_term
            + w.w_int * interaction_R(sem, emo, mov, w.steepness))


def score_all(a, store: FeatureStore, w: SimilarityWeights) -> np.ndarray:
    """FinalScore of ``a`` against every dialogue in ``store`` (same order as ``store.ids``)."""
    fa = _feat(a)
    n = len(store.ids)
    if n == 0:
        return np.zeros(0)
    qa = fa.semantic.values
    na = fa.semantic.norm
    norms = np.linalg.norm(store.sem_matrix, axis=1)
    dots = store.sem_matrix @ qa
    with np.errstate(divide="ignore", invalid="ignore"):
        sem = np.where((norms > 0) & (na > 0), dots / (norms * na), 0.0)
    sem = np.clip(sem, -1.0, 1.0)
    emo = 1.0 / (1.0 + np.abs(store.aff_matrix - fa.affect.values).sum(axis=1))
    mov = np.array([len(fa.mentions & store[i].mentions) for i in store.ids], dtype=float)
    mov_term = mov / len(fa.mentions) if w.normalize_mov and fa.mentions else mov
    r = sem * emo / (1.0 + np.exp(-w.steepness * mov))
    return w.w_sem * sem + w.w_emo * emo + w.w_mov * mov_term + w.w_int * r


def top_k_neighbors(a: Prototype, store: FeatureStore, K: int = 50,
                    w: SimilarityWeights | None = None) -> SupportSet:
    """The K best-scoring dialogues other than the prototype's own, ties by dialogue id."""
    if K < 1:
        raise ValueError("K must be >= 1")
    w = w or SimilarityWeights()
    scores = score_all(a, store, w)
    ids = np.array(store.ids, dtype=object)
    keep = ids != a.dialogue_id
    ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids.astype(str), -scores))[:K]
    return SupportSet(a.movie_id, a.dialogue_id,
                      tuple((str(ids[i]), float(scores[i])) for i in order))


def select_prototype(movie_id: str, subset: Sequence[Dialogue], store: FeatureStore,
                     strategy: str = "medoid", seed: int = 0) -> Prototype:
    """Representative dialogue of ``movie_id`` among ``subset``.

    ``medoid`` maximizes the summed equal-weight FinalScore to the other
    members. ``centroid`` picks the member closest (cosine) to the mean
    semantic vector. ``random`` draws one member with ``seed``. Ties go to the
    smallest dialogue id.
    """
    if not subset:
        raise ValueError(f"empty subset for movie {movie_id!r}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown prototype strategy {strategy!r}")
    for d in subset:
        if movie_id not in d.mentions:
            raise ValueError(f"dialogue {d.dialogue_id!r} does not mention {movie_id!r}")
    ids = sorted({d.dialogue_id for d in subset})
    if len(ids) == 1:
        return store.prototype(movie_id, ids[0])
    if strategy == "random":
        return store.prototype(movie_id, random.Random(f"{seed}:{movie_id}").choice(ids))
    feats = [store[i] for i in ids]
    if strategy == "centroid":
        centroid = np.mean([f.semantic.values for f in feats], axis=0)
        vals = [cosine(f.semantic, centroid) for f in feats]
    else:
        w = SimilarityWeights.equal()
        vals = [math.fsum(final_score(fi, fj, w) for j, fj in enumerate(feats) if j != i)
                for i, fi in enumerate(feats)]
    best_val = max(vals)
    winner = min(i for i, v in zip(ids, vals) if v == best_val)
    return store.prototype(movie_id, winner)


def select_prototypes(subsets: Mapping[str, Sequence[Dialogue]], store: FeatureStore,
                      strategy: str = "medoid", seed: int = 0) -> list[Prototype]:
    return [select_prototype(m, subsets[m], store, strategy, seed) for m in sorted(subsets) if subsets[m]]


def build_support_union(prototypes: Iterable[Prototype], store: FeatureStore, K: int = 50,
                        w: SimilarityWeights | None = None) -> set[str]:
    out: set[str] = set()
    for p in prototypes:
        out.add(p.dialogue_id)
        out.update(top_k_neighbors(p, store, K, w).ids)
    return out
