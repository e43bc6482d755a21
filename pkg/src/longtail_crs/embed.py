"""Semantic and affective feature vectors for dialogue text.

The default semantic backend is a hashed bag of tokens weighted by IDF. For a
pair of texts with no shared tokens the cosine is 0 unless two distinct tokens
hash into the same bucket; weights are non-negative, so a collision can only
raise the similarity.
"""

from __future__ import annotations

import logging
import math
import os
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

EMOTIONS = ("anger", "anticipation", "disgust", "fear", "joy", "sadness", "surprise", "trust")
DEFAULT_LEXICON = Path(__file__).with_name("data") / "emotion_lexicon.tsv"
TOKEN_RE = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text.lower())


def bucket(token: str, dim: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % dim


@dataclass(frozen=True, eq=False)
class SemanticVector:
    values: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("semantic vector must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("semantic vector has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "norm", float(np.linalg.norm(v)))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        return isinstance(other, SemanticVector) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass(frozen=True, eq=False)
class AffectVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(EMOTIONS),):
            raise ValueError(f"affect vector needs {len(EMOTIONS)} entries, got shape {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("affect entries must be finite and non-negative")
        total = v.sum()
        if total > 0:
            v = v / total
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls) -> "AffectVector":
        return cls(np.zeros(len(EMOTIONS)))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(EMOTIONS, self.values.tolist()))

    def __eq__(self, other):
        return isinstance(other, AffectVector) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


def _values(v) -> np.ndarray:
    if isinstance(v, (SemanticVector, AffectVector)):
        return v.values
    return np.asarray(v, dtype=float)


def cosine(a, b) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def l1_distance(a, b) -> float:
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    return float(np.abs(va - vb).sum())


class HashedEmbedder:
    """Hashed TF-IDF bag of tokens.

    Before :meth:`fit` every token has IDF 1. After fitting, tokens unseen in
    the fitted texts get the largest possible IDF.
    """

    kind = "hashed"

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ConfigError("embedding dimension must be >= 1")
        self.dim = dim
        self.idf: dict[str, float] = {}
        self.n_docs = 0

    def fit(self, texts: Iterable[str]) -> "HashedEmbedder":
        df: Counter = Counter()
        n = 0
        for t in texts:
            df.update(set(tokenize(t)))
            n += 1
        self.n_docs = n
        self.idf = {tok: math.log((1 + n) / (1 + c)) + 1.0 for tok, c in df.items()}
        return self

    def token_weight(self, token: str) -> float:
        if not self.n_docs:
            return 1.0
        return self.idf.get(token, math.log(1 + self.n_docs) + 1.0)

    def embed_text(self, text: str) -> SemanticVector:
        v = np.zeros(self.dim)
        for tok, tf in sorted(Counter(tokenize(text)).items()):
            v[bucket(tok, self.dim)] += tf * self.token_weight(tok)
        return SemanticVector(v)

    def embed_many(self, texts: Sequence[str]) -> list[SemanticVector]:
        return [self.embed_text(t) for t in texts]


class RemoteEmbedder:
    """Embeddings from an HTTP endpoint speaking the common ``/embeddings`` JSON shape.

    Request: ``{"model": ..., "input": [texts]}``; response:
    ``{"data": [{"embedding": [...]}, ...]}`` in input order.
    """

    kind = "remote"

    def __init__(self, url: str, model: str, dim: int, api_key_env: str = "LUMI_API_KEY",
                 client=None, timeout: float = 30.0, batch_size: int = 64):
        import httpx

        self.url = url
        self.model = model
        self.dim = dim
        self.batch_size = batch_size
        key = os.environ.get(api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def fit(self, texts):
        return self

    def embed_many(self, texts: Sequence[str]) -> list[SemanticVector]:
        out: list[SemanticVector] = []
        for start in range(0, len(texts), self.batch_size):
            chunk = list(texts[start:start + self.batch_size])
            resp = self._client.post(self.url, json={"model": self.model, "input": chunk},
                                     headers=self._headers)
            resp.raise_for_status()
            data = resp.json()["data"]
            if len(data) != len(chunk):
                raise ValueError(f"embedding endpoint returned {len(data)} vectors for {len(chunk)} inputs")
            for row in data:
                vec = SemanticVector(row["embedding"])
                if vec.dim != self.dim:
                    raise ValueError(f"expected dimension {self.dim}, got {vec.dim}")
                out.append(vec)
        return out

    def embed_text(self, text: str) -> SemanticVector:
        return self.embed_many([text])[0]


def make_embedder(kind: str = "hashed", dim: int = 256, **kwargs):
    if kind == "hashed":
        return HashedEmbedder(dim)
    if kind == "remote":
        url = kwargs.get("url")
        model = kwargs.get("model")
        if not url or not model:
            raise ConfigError("remote embedder needs 'url' and 'model'")
        return RemoteEmbedder(url, model, dim, **{k: v for k, v in kwargs.items() if k not in ("url", "model")})
    raise ConfigError(f"unknown embedder {kind!r} (expected 'hashed' or 'remote')")


def load_lexicon(path=None) -> dict[str, frozenset[str]]:
    """Read a ``word<TAB>emotion`` file. Lines starting with ``#`` are comments."""
    path = Path(path) if path is not None else DEFAULT_LEXICON
    if not path.is_file():
        raise ConfigError(f"emotion lexicon not found: {path}")
    lex: dict[str, set[str]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1].strip() not in EMOTIONS:
            raise ConfigError(f"{path}:{lineno}: expected 'word<TAB>emotion'")
        lex.setdefault(parts[0].strip().lower(), set()).add(parts[1].strip())
    return {w: frozenset(e) for w, e in lex.items()}


@lru_cache(maxsize=1)
def _default_lexicon():
    return load_lexicon()


class AffectModel:
    def __init__(self, lexicon: dict[str, frozenset[str]] | None = None):
        self.lexicon = lexicon if lexicon is not None else _default_lexicon()
        self._index = {e: i for i, e in enumerate(EMOTIONS)}

    def counts(self, text: str) -> np.ndarray:
        c = np.zeros(len(EMOTIONS))
        for tok in tokenize(text):
            for emo in self.lexicon.get(tok, ()):
                c[self._index[emo]] += 1
        return c

    def affect_vector(self, text: str) -> AffectVector:
        return AffectVector(self.counts(text))


def affect_vector(text: str, lexicon: dict | None = None) -> AffectVector:
    return AffectModel(lexicon).affect_vector(text)
