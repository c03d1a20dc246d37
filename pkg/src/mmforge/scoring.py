"""Embedding and NSFW providers plus the similarity/threshold primitives.

Providers are deterministic by contract. The stub provider derives every
vector from a documented seeding rule so the whole pipeline runs with no
model and no network: seed = first 8 bytes (big-endian) of
sha256(content), or sha256(salt || 0x00 || content) for a salted instance;
draw `dim` uniform [0, 1) values from PCG64(seed), subtract 0.5 from each
(centered vectors make unrelated cosines straddle zero, so similarity
thresholds behave as they would with a real encoder); L2-normalize. The
NSFW stub maps the first 8 bytes of sha256(image bytes) to a fraction of
2^64. An HTTP-backed provider speaks the same contract against a remote
service.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .model import CandidateImage, PipelineConfig, Sentence

logger = logging.getLogger(__name__)

DEFAULT_DIM = 64
DEFAULT_BATCH = 64


class EmbeddingProvider(Protocol):
    def embed_texts(self, texts: Sequence[str]) -> list[list[float]]: ...

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]: ...

    def dim(self) -> int: ...


class NsfwScorer(Protocol):
    def score_images(self, images: Sequence[bytes]) -> list[float]: ...


def _seed_from(content: bytes, salt: str) -> int:
    if salt:
        digest = hashlib.sha256(salt.encode("utf-8") + b"\x00" + content).digest()
    else:
        digest = hashlib.sha256(content).digest()
    return int.from_bytes(digest[:8], "big")


def stub_embedding(content: bytes, dim: int = DEFAULT_DIM, salt: str = "") -> list[float]:
    """The documented content-seeded embedding rule. Unit-norm output."""
    rng = np.random.Generator(np.random.PCG64(_seed_from(content, salt)))
    v = rng.random(dim) - 0.5
    v /= np.linalg.norm(v)
    return v.tolist()


def stub_nsfw_score(content: bytes) -> float:
    digest = hashlib.sha256(content).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


class StubEmbeddingProvider:
    """Deterministic in-process provider; no model, no network.

    Distinct salts give independent embedding families, which is how two
    separate alignment scorers are simulated.
    """

    def __init__(self, dim: int = DEFAULT_DIM, salt: str = ""):
        self._dim = dim
        self._salt = salt

    def dim(self) -> int:
        return self._dim

    def embed_texts(self, texts: Sequence[str]) -> list[list[float]]:
        return [stub_embedding(t.encode("utf-8"), self._dim, self._salt) for t in texts]

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]:
        return [stub_embedding(data, self._dim, self._salt) for data in images]


class StubNsfwScorer:
    def score_images(self, images: Sequence[bytes]) -> list[float]:
        return [stub_nsfw_score(data) for data in images]


class HttpEmbeddingProvider:
    """Client for the embedding service HTTP contract."""

    def __init__(self, endpoint: str, batch_size: int = DEFAULT_BATCH, timeout_s: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.batch_size = batch_size
        self.timeout_s = timeout_s
        self._session = requests.Session()
        self._dim: int | None = None

    def _post(self, path: str, payload: dict) -> dict:
        resp = self._session.post(self.endpoint + path, json=payload, timeout=self.timeout_s)
        resp.raise_for_status()
        return resp.json()

    def dim(self) -> int:
        if self._dim is None:
            resp = self._session.get(self.endpoint + "/healthz", timeout=self.timeout_s)
            resp.raise_for_status()
            self._dim = int(resp.json()["dim"])
        return self._dim

    def _embed(self, path: str, key: str, items: list) -> list[list[float]]:
        out: list[list[float]] = []
        for start in range(0, len(items), self.batch_size):
            body = self._post(path, {key: items[start : start + self.batch_size]})
            self._dim = int(body["dim"])
            out.extend(body["embeddings"])
        return out

    def embed_texts(self, texts: Sequence[str]) -> list[list[float]]:
        return self._embed("/v1/embed/text", "texts", list(texts))

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]:
        import base64

        encoded = [base64.b64encode(data).decode("ascii") for data in images]
        return self._embed("/v1/embed/image", "images_b64", encoded)


class HttpNsfwScorer:
    def __init__(self, endpoint: str, batch_size: int = DEFAULT_BATCH, timeout_s: float = 30.0):
        self._provider = HttpEmbeddingProvider(endpoint, batch_size, timeout_s)

    def score_images(self, images: Sequence[bytes]) -> list[float]:
        import base64

        out: list[float] = []
        prov = self._provider
        for start in range(0, len(images), prov.batch_size):
            batch = images[start : start + prov.batch_size]
            payload = {"images_b64": [base64.b64encode(d).decode("ascii") for d in batch]}
            body = prov._post("/v1/score/nsfw", payload)
            out.extend(body["scores"])
        return out


class CachingEmbeddingProvider:
    """Digest-keyed cache wrapper so reruns never recompute embeddings.

    The cache key is sha256 of the content bytes (texts are keyed on their
    UTF-8 encoding, prefixed to keep the two namespaces apart). Entries can
    be persisted to an append-only JSONL file. Thread-safe; values are
    deterministic so overlapping writes are benign.
    """

    def __init__(self, inner: EmbeddingProvider, cache_path: str | Path | None = None):
        self.inner = inner
        self.cache_path = Path(cache_path) if cache_path else None
        self._mem: dict[str, list[float]] = {}
        self._lock = threading.Lock()
        if self.cache_path is not None and self.cache_path.exists():
            with open(self.cache_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._mem[rec["key"]] = rec["embedding"]

    def dim(self) -> int:
        return self.inner.dim()

    @staticmethod
    def _key(namespace: str, content: bytes) -> str:
        return namespace + ":" + hashlib.sha256(content).hexdigest()

    def _lookup(self, namespace: str, blobs: list[bytes], embed) -> list[list[float]]:
        keys = [self._key(namespace, b) for b in blobs]
        with self._lock:
            missing = [i for i, k in enumerate(keys) if k not in self._mem]
        if missing:
            fresh = embed([blobs[i] for i in missing])
            with self._lock:
                new_lines = []
                for i, vec in zip(missing, fresh):
                    if keys[i] not in self._mem:
                        self._mem[keys[i]] = vec
                        new_lines.append(json.dumps({"key": keys[i], "embedding": vec}))
                if new_lines and self.cache_path is not None:
                    self.cache_path.parent.mkdir(parents=True, exist_ok=True)
                    with open(self.cache_path, "a", encoding="utf-8") as fh:
                        fh.write("\n".join(new_lines) + "\n")
        with self._lock:
            return [self._mem[k] for k in keys]

    def embed_texts(self, texts: Sequence[str]) -> list[list[float]]:
        blobs = [t.encode("utf-8") for t in texts]
        return self._lookup("text", blobs, lambda bs: self.inner.embed_texts([b.decode("utf-8") for b in bs]))

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]:
        return self._lookup("image", list(images), lambda bs: self.inner.embed_images(bs))


class SimilarityMatrix:
    """Cosine similarities between n_sentences rows and n_images columns."""

    def __init__(self, values: np.ndarray):
        if values.ndim != 2:
            raise ValueError("similarity matrix must be 2-D")
        self.values = values

    @property
    def n_sentences(self) -> int:
        return self.values.shape[0]

    @property
    def n_images(self) -> int:
        return self.values.shape[1]

    def at(self, sentence_index: int, image_index: int) -> float:
        return float(self.values[sentence_index, image_index])


def nsfw_filter(
    images: list[CandidateImage],
    image_bytes: Sequence[bytes],
    scorer: NsfwScorer,
    cfg: PipelineConfig,
) -> tuple[list[CandidateImage], list[CandidateImage]]:
    """Split images into (kept, removed) by the NSFW threshold.

    An image is removed iff its score >= cfg.nsfw_reject_min. Scores are
    recorded on the records; order is preserved on both sides. A scorer
    failure propagates: scores are mandatory, not best-effort.
    """
    if len(image_bytes) != len(images):
        raise ValueError("one byte blob per image required")
    scores = scorer.score_images(image_bytes) if images else []
    if len(scores) != len(images):
        raise ValueError("scorer returned wrong count")
    kept: list[CandidateImage] = []
    removed: list[CandidateImage] = []
    for img, score in zip(images, scores):
        scored = img.model_copy(update={"nsfw_score": score})
        if score >= cfg.nsfw_reject_min:
            removed.append(scored)
        else:
            kept.append(scored)
    return kept, removed


def similarity_matrix(
    sentences: Sequence[Sentence | str],
    images: Sequence[CandidateImage],
    sentence_embeddings: Sequence[Sequence[float]],
    image_embeddings: Sequence[Sequence[float]] | None = None,
) -> SimilarityMatrix:
    """Build the (sentence x image) cosine matrix from unit-norm embeddings.

    Image embeddings default to the vectors already stored on the records.
    """
    if image_embeddings is None:
        missing = [img.url for img in images if img.embedding is None]
        if missing:
            raise ValueError(f"images missing embeddings: {missing[:3]}")
        image_embeddings = [img.embedding for img in images]
    if len(sentence_embeddings) != len(sentences):
        raise ValueError("one embedding per sentence required")
    if len(image_embeddings) != len(images):
        raise ValueError("one embedding per image required")
    s = np.asarray(sentence_embeddings, dtype=np.float64)
    v = np.asarray(image_embeddings, dtype=np.float64)
    if len(sentences) == 0 or len(images) == 0:
        return SimilarityMatrix(np.zeros((len(sentences), len(images)), dtype=np.float64))
    return SimilarityMatrix(s @ v.T)


def percentile_threshold(scores: Sequence[float], p: int) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest score.

    Callers filter with strict greater-than, so an all-equal score list
    would be filtered out entirely; warn on that degenerate input.
    """
    if len(scores) == 0:
        raise ValueError("percentile of empty score list")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    ordered = sorted(scores)
    rank = math.ceil(p / 100 * len(ordered))
    idx = min(max(rank - 1, 0), len(ordered) - 1)
    if ordered[0] == ordered[-1]:
        logger.warning("all %d scores equal %r; strict filter removes everything", len(ordered), ordered[0])
    return ordered[idx]
