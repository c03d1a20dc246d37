"""Image and alt-text pair extraction with the full filter stack.

Filters run in a pinned order chosen for funnel attribution, not
correctness (the pure predicates commute): Japanese check, length floor,
auto-generated alt phrases, filename-style alts, wordlist, whitespace
normalization, frequency dedup, (phash, alt) dedup, then the two-scorer
percentile gate where a pair must beat the cut on both scorers.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Callable, Sequence

from pydantic import BaseModel, ConfigDict

from .funnel import Funnel
from .model import AltPair, DocImage, PipelineConfig
from .scoring import EmbeddingProvider, percentile_threshold
from .segmenter import has_japanese

_WS_RUN = re.compile(r"\s{2,}")

DEFAULT_AUTOGEN_PREFIXES = (
    "画像に alt 属性が指定されていません。",
    "この画像には alt 属性が指定されておらず、",
)
DEFAULT_FILENAME_KEYWORDS = (
    "写真",
    "キャプチャ",
    "画像",
    "スクリーンショット",
    "全画面キャプチャ",
    "ファイル",
    "コメント",
    "コピー",
)


class AltFilterTables(BaseModel):
    """Phrase tables for the alt-text filters; overridable from a JSON file."""

    model_config = ConfigDict(extra="forbid")

    autogen_prefixes: tuple[str, ...] = DEFAULT_AUTOGEN_PREFIXES
    filename_keywords: tuple[str, ...] = DEFAULT_FILENAME_KEYWORDS
    nsfw_wordlist: tuple[str, ...] = ()

    @classmethod
    def from_file(cls, path: str | Path) -> "AltFilterTables":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.model_validate(json.load(fh))


def is_autogenerated_alt(text: str, tables: AltFilterTables) -> bool:
    """Alt text injected by tooling when the page author left none."""
    return text.startswith(tables.autogen_prefixes)


def is_filename_alt(text: str, tables: AltFilterTables) -> bool:
    """Alt that is just a capture-tool filename: keyword prefix, no Japanese after it."""
    return any(
        text.startswith(kw) and not has_japanese(text[len(kw):])
        for kw in tables.filename_keywords
    )


def normalize_whitespace(text: str) -> str:
    """Trim the ends; squash every internal whitespace run of 2+ to one ASCII space."""
    return _WS_RUN.sub(" ", text.strip())


def dedup_alt_frequency(pairs: list[AltPair], max_freq: int) -> list[AltPair]:
    """Drop every pair whose alt text occurs more than max_freq times."""
    counts: dict[str, int] = {}
    for p in pairs:
        counts[p.alt_text] = counts.get(p.alt_text, 0) + 1
    return [p for p in pairs if counts[p.alt_text] <= max_freq]


def dedup_phash_alt(pairs: list[AltPair]) -> list[AltPair]:
    """Keep the first occurrence of each (phash, alt) combination."""
    seen: set[tuple[int, str]] = set()
    out = []
    for p in pairs:
        key = (p.image.phash, p.alt_text)
        if key in seen:
            continue
        seen.add(key)
        out.append(p)
    return out


def extract_pairs(
    images: Sequence[DocImage],
    tables: AltFilterTables,
    provider_a: EmbeddingProvider,
    provider_b: EmbeddingProvider,
    cfg: PipelineConfig,
    load_bytes: Callable[[str], bytes],
    funnel: Funnel | None = None,
) -> list[AltPair]:
    """Run every image that carries alt text through the filter stack.

    Images must already be NSFW-filtered and phashed. load_bytes maps a
    content digest to the raw image bytes for the scorers.
    """

    def reject(reason: str, n: int = 1) -> None:
        if funnel is not None and n > 0:
            funnel.reject(reason, n)

    if funnel is not None:
        funnel.input_count += len(images)

    survivors: list[AltPair] = []
    for img in images:
        alt = img.alt_text
        if alt is None:
            raise ValueError(f"image {img.url} has no alt text")
        if img.phash is None:
            raise ValueError(f"phash not computed for {img.url}")
        if not has_japanese(alt):
            reject("no_japanese")
            continue
        if len(alt) < cfg.alt_min_chars:
            reject("too_short")
            continue
        if is_autogenerated_alt(alt, tables):
            reject("autogen_alt")
            continue
        if is_filename_alt(alt, tables):
            reject("filename_alt")
            continue
        if any(word in alt for word in tables.nsfw_wordlist):
            reject("wordlist")
            continue
        survivors.append(
            AltPair(image=img, alt_text=normalize_whitespace(alt), score_a=0.0, score_b=0.0)
        )

    kept = dedup_alt_frequency(survivors, cfg.alt_freq_max)
    reject("freq_exceeded", len(survivors) - len(kept))
    survivors = kept

    kept = dedup_phash_alt(survivors)
    reject("duplicate_pair", len(survivors) - len(kept))
    survivors = kept

    if not survivors:
        if funnel is not None:
            funnel.output_count = 0
        return []

    blobs = [load_bytes(p.image.content_digest) for p in survivors]
    alts = [p.alt_text for p in survivors]

    def dot(u: Sequence[float], v: Sequence[float]) -> float:
        return sum(x * y for x, y in zip(u, v))

    a_img, a_txt = provider_a.embed_images(blobs), provider_a.embed_texts(alts)
    b_img, b_txt = provider_b.embed_images(blobs), provider_b.embed_texts(alts)
    survivors = [
        p.model_copy(update={"score_a": dot(a_img[i], a_txt[i]), "score_b": dot(b_img[i], b_txt[i])})
        for i, p in enumerate(survivors)
    ]

    thr_a = percentile_threshold([p.score_a for p in survivors], cfg.pair_percentile)
    thr_b = percentile_threshold([p.score_b for p in survivors], cfg.pair_percentile)
    final = []
    for p in survivors:
        if p.score_a <= thr_a:
            reject("below_percentile_a")
        elif p.score_b <= thr_b:
            reject("below_percentile_b")
        else:
            final.append(p)
    if funnel is not None:
        funnel.output_count = len(final)
    return final
