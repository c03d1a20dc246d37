"""Domain types, manifest schemas, and sample validation.

All records exchanged between pipeline stages are line-delimited JSON so
every stage is streamable and restartable. Perceptual hashes are carried as
integers in memory and serialized as 16-char lowercase hex; content digests
as 64-char lowercase hex.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Iterator

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_serializer,
    field_validator,
    model_validator,
)

from .funnel import Funnel
from .util import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)


class Sentence(BaseModel):
    """One sentence of a document; text is stripped and non-empty."""

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0)
    text: str = Field(min_length=1)

    @field_validator("text")
    @classmethod
    def _no_edge_whitespace(cls, v: str) -> str:
        if v != v.strip():
            raise ValueError("sentence text must have no leading/trailing whitespace")
        return v


class RawImageRef(BaseModel):
    """An image reference as it appeared in the source document."""

    model_config = ConfigDict(frozen=True)

    url: str
    alt_text: str | None = None
    position: int = Field(ge=0)


class RawDocument(BaseModel):
    """One crawled web page: ordered sentences plus image references."""

    doc_id: str
    source_url: str
    sentences: list[Sentence] = Field(default_factory=list)
    image_refs: list[RawImageRef] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_order(self) -> "RawDocument":
        for i, s in enumerate(self.sentences):
            if s.index != i:
                raise ValueError("sentence indices must be 0-based and contiguous")
        positions = [r.position for r in self.image_refs]
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError("image ref positions must strictly increase")
        return self

    def sentence_texts(self) -> list[str]:
        return [s.text for s in self.sentences]


def _hex_phash(v: int) -> str:
    return format(v, "016x")


def _parse_phash(v) -> int:
    if isinstance(v, str):
        return int(v, 16)
    return v


class CandidateImage(BaseModel):
    """A downloaded image with metadata filled in as stages progress.

    Raw bytes live in the blob store keyed by content_digest; this record
    only carries metadata. phash, nsfw_score and embedding stay unset until
    the dedup / score stages run.
    """

    url: str
    content_digest: str = Field(pattern=r"^[0-9a-f]{64}$")
    width_px: int = Field(gt=0)
    height_px: int = Field(gt=0)
    phash: int | None = None
    nsfw_score: float | None = Field(default=None, ge=0.0, le=1.0)
    embedding: list[float] | None = None

    @field_validator("phash", mode="before")
    @classmethod
    def _phash_from_hex(cls, v):
        return None if v is None else _parse_phash(v)

    @field_serializer("phash")
    def _phash_to_hex(self, v: int | None):
        return None if v is None else _hex_phash(v)

    @field_validator("embedding")
    @classmethod
    def _unit_norm(cls, v):
        if v is not None:
            norm = math.sqrt(sum(x * x for x in v))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"embedding must be unit-norm, got ||v||={norm!r}")
        return v

    @property
    def pixel_count(self) -> int:
        return self.width_px * self.height_px


class DocImage(CandidateImage):
    """A candidate image bound to its in-document reference."""

    alt_text: str | None = None
    position: int = Field(default=0, ge=0)


class PipelineDoc(BaseModel):
    """Per-document record carried through dedup / score / assign stages."""

    doc_id: str
    source_url: str
    sentences: list[str]
    images: list[DocImage] = Field(default_factory=list)


class SampleImage(BaseModel):
    """image_info entry of an interleaved sample (wire keys: width/height)."""

    model_config = ConfigDict(populate_by_name=True)

    url: str
    phash: int
    width_px: int = Field(alias="width", gt=0)
    height_px: int = Field(alias="height", gt=0)
    matched_text_index: int = Field(ge=0)
    matched_sim: float

    @field_validator("phash", mode="before")
    @classmethod
    def _phash_from_hex(cls, v):
        return _parse_phash(v)

    @field_serializer("phash")
    def _phash_to_hex(self, v: int):
        return _hex_phash(v)


class InterleavedSample(BaseModel):
    """Final interleaved record: full sentence list plus matched images."""

    source_url: str = Field(alias="url")
    text_list: list[str]
    image_info: list[SampleImage]

    model_config = ConfigDict(populate_by_name=True)

    def to_record(self) -> dict:
        return self.model_dump(by_alias=True)


class AltPair(BaseModel):
    """An (image, normalized alt text) pair with two alignment scores."""

    image: CandidateImage
    alt_text: str
    score_a: float
    score_b: float

    def to_record(self) -> dict:
        assert self.image.phash is not None
        return {
            "url": self.image.url,
            "alt": self.alt_text,
            "phash": _hex_phash(self.image.phash),
            "score_a": self.score_a,
            "score_b": self.score_b,
        }


class PairRecord(BaseModel):
    """Wire form of an emitted alt pair."""

    url: str
    alt: str
    phash: str = Field(pattern=r"^[0-9a-f]{16}$")
    score_a: float
    score_b: float


class PipelineConfig(BaseModel):
    """Every pipeline threshold as an explicit, serialized value.

    Defaults are the production constants; unknown keys in a config file are
    rejected so typos cannot silently disable a filter.
    """

    model_config = ConfigDict(extra="forbid")

    min_side_px: int = Field(default=150, gt=0)
    aspect_min: float = Field(default=0.5, gt=0)
    aspect_max: float = Field(default=2.0, gt=0)
    nsfw_reject_min: float = Field(default=0.1, gt=0)
    hamming_intra_max: int = Field(default=5, gt=0)
    cross_sample_size: int = Field(default=60000, gt=0)
    cross_dup_max: int = Field(default=10, gt=0)
    sim_min: float = Field(default=0.20, gt=0)
    images_min: int = Field(default=2, gt=0)
    images_max: int = Field(default=5, gt=0)
    sentences_min: int = Field(default=10, gt=0)
    sentences_max: int = Field(default=100, gt=0)
    max_tokens: int = Field(default=4096, gt=0)
    alt_freq_max: int = Field(default=10, gt=0)
    pair_percentile: int = Field(default=30, ge=0, le=100)
    alt_min_chars: int = Field(default=3, gt=0)
    per_domain_url_cap: int = Field(default=1000, ge=1)
    fetch_rate_per_host: float = Field(default=8.0, gt=0)
    fetch_concurrency: int = Field(default=8, ge=1)
    rng_seed: int = Field(default=0, ge=0, lt=1 << 64)

    @model_validator(mode="after")
    def _check_ranges(self) -> "PipelineConfig":
        if self.images_min > self.images_max:
            raise ValueError("images_min must be <= images_max")
        if self.sentences_min > self.sentences_max:
            raise ValueError("sentences_min must be <= sentences_max")
        if self.aspect_min > self.aspect_max:
            raise ValueError("aspect_min must be <= aspect_max")
        return self

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls.model_validate(data)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))


# --- manifest IO ---------------------------------------------------------


def _doc_from_record(rec: dict) -> RawDocument:
    refs = [
        RawImageRef(
            url=img["url"],
            alt_text=img.get("alt"),
            position=img["position"],
        )
        for img in rec.get("images", [])
    ]
    if "sentences" in rec:
        texts = rec["sentences"]
    else:
        # Raw input carries unsegmented "text"; split at newlines so the
        # loader stays purely structural and the segment stage owns the
        # linguistic boundaries.
        texts = [ln.strip() for ln in rec["text"].split("\n")]
        texts = [t for t in texts if t]
    sentences = [Sentence(index=i, text=t) for i, t in enumerate(texts)]
    return RawDocument(
        doc_id=rec["doc_id"],
        source_url=rec["url"],
        sentences=sentences,
        image_refs=refs,
    )


def load_documents(path: str | Path, funnel: Funnel | None = None) -> Iterator[RawDocument]:
    """Stream documents from an input or segmented manifest.

    Malformed lines are logged with their line number, counted on the
    funnel under ``malformed_line``, and skipped; the stream continues.
    """
    for line_no, line in iter_jsonl(path):
        if funnel is not None:
            funnel.input_count += 1
        try:
            rec = json.loads(line)
            doc = _doc_from_record(rec)
        except (json.JSONDecodeError, KeyError, TypeError, ValidationError, ValueError) as exc:
            logger.warning("%s:%d: skipping malformed line (%s)", path, line_no, exc)
            if funnel is not None:
                funnel.reject("malformed_line")
            continue
        yield doc


def doc_to_record(doc: RawDocument, segmented: bool = True) -> dict:
    rec: dict = {"doc_id": doc.doc_id, "url": doc.source_url}
    if segmented:
        rec["sentences"] = doc.sentence_texts()
    else:
        rec["text"] = "\n".join(doc.sentence_texts())
    rec["images"] = [
        {"url": r.url, "alt": r.alt_text, "position": r.position} for r in doc.image_refs
    ]
    return rec


def write_samples(path: str | Path, samples: list[InterleavedSample]) -> int:
    return write_jsonl(path, (s.to_record() for s in samples))


def load_samples(path: str | Path) -> list[InterleavedSample]:
    out = []
    for _, line in iter_jsonl(path):
        out.append(InterleavedSample.model_validate(json.loads(line)))
    return out


# --- sample validation ---------------------------------------------------


def validate_sample(sample: InterleavedSample, cfg: PipelineConfig) -> list[str]:
    """Return every violated sample invariant; [] means the sample is valid."""
    violations = []
    n_img = len(sample.image_info)
    n_txt = len(sample.text_list)
    if n_img < cfg.images_min:
        violations.append("too_few_images")
    if n_img > cfg.images_max:
        violations.append("too_many_images")
    if n_txt < cfg.sentences_min:
        violations.append("too_few_sentences")
    if n_txt > cfg.sentences_max:
        violations.append("too_many_sentences")
    indices = [info.matched_text_index for info in sample.image_info]
    if any(i < 0 or i >= n_txt for i in indices):
        violations.append("index_out_of_bounds")
    if len(set(indices)) != len(indices):
        violations.append("duplicate_index")
    if any(info.matched_sim < cfg.sim_min for info in sample.image_info):
        violations.append("sim_below_min")
    return violations
