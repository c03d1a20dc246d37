"""Image-to-sentence matching via an exact linear assignment solver.

solve_lap is a shortest-augmenting-path implementation (the
Jonker-Volgenant / Hungarian family): for each row it grows an alternating
tree over reduced costs until it reaches a free column, then augments along
the path. Runs in O(r^2 c) and returns an exact optimum for finite inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .funnel import Funnel
from .model import InterleavedSample, PipelineConfig, RawDocument, SampleImage
from .scoring import SimilarityMatrix


@dataclass(frozen=True)
class AssignedPair:
    image_index: int
    sentence_index: int
    sim: float


@dataclass(frozen=True)
class Assignment:
    pairs: list[AssignedPair]


class CharTokenCounter:
    """Default token counter: one token per character.

    The real token budget depends on whichever LLM consumes the corpus;
    character count is a conservative, dependency-free stand-in and any
    callable with the same shape can replace it.
    """

    def count(self, text: str) -> int:
        return len(text)


def solve_lap(cost: Sequence[Sequence[float]]) -> list[int]:
    """Minimize total cost over injective row-to-column mappings.

    Requires n_rows <= n_cols and finite entries. Returns, per row, the
    assigned column; ties are broken toward lower row and column indices by
    the scan order. Total cost is exactly optimal (verified against brute
    force in the test suite).
    """
    n = len(cost)
    if n == 0:
        return []
    m = len(cost[0])
    if any(len(row) != m for row in cost):
        raise ValueError("cost matrix must be rectangular")
    if n > m:
        raise ValueError(f"need n_rows <= n_cols, got {n}x{m}")
    for row in cost:
        for value in row:
            if not math.isfinite(value):
                raise ValueError("cost entries must be finite")

    inf = math.inf
    # 1-indexed with a virtual row/column 0, the classic formulation.
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    row_of = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[row_of[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1

    result = [0] * n
    for j in range(1, m + 1):
        if row_of[j]:
            result[row_of[j] - 1] = j - 1
    return result


def prefilter_images(m: SimilarityMatrix, cfg: PipelineConfig) -> list[int]:
    """Indices of images whose best sentence similarity reaches sim_min."""
    kept = []
    for i in range(m.n_images):
        best = max((m.at(s, i) for s in range(m.n_sentences)), default=-1.0)
        if best >= cfg.sim_min:
            kept.append(i)
    return kept


def assign_images(m: SimilarityMatrix, cfg: PipelineConfig) -> Assignment:
    """Maximize total similarity with one sentence per image.

    Solved as a minimization over negated similarities. When images
    outnumber sentences the roles are swapped so the smaller side is fully
    assigned; every sentence then receives at most one image.
    """
    n_s, n_i = m.n_sentences, m.n_images
    if n_i == 0 or n_s == 0:
        return Assignment(pairs=[])
    if n_i <= n_s:
        cost = [[-m.at(s, i) for s in range(n_s)] for i in range(n_i)]
        cols = solve_lap(cost)
        pairs = [AssignedPair(image_index=i, sentence_index=s, sim=m.at(s, i)) for i, s in enumerate(cols)]
    else:
        cost = [[-m.at(s, i) for i in range(n_i)] for s in range(n_s)]
        cols = solve_lap(cost)
        pairs = [AssignedPair(image_index=i, sentence_index=s, sim=m.at(s, i)) for s, i in enumerate(cols)]
        pairs.sort(key=lambda p: p.image_index)
    return Assignment(pairs=pairs)


def build_sample(
    doc: RawDocument,
    images: Sequence,
    assignment: Assignment,
    counter: Callable[[str], int] | CharTokenCounter,
    cfg: PipelineConfig,
    funnel: Funnel | None = None,
) -> InterleavedSample | None:
    """Assemble the final record, or reject the document with a reason.

    Assigned pairs below sim_min are dropped first (counted, not fatal);
    the image-count, sentence-count, and token-length gates then decide the
    document's fate. Returns None on rejection, recording the reason.
    """

    def reject(reason: str) -> None:
        if funnel is not None:
            funnel.reject(reason)

    texts = doc.sentence_texts()
    pairs = []
    for p in assignment.pairs:
        if p.sim < cfg.sim_min:
            if funnel is not None:
                funnel.note("pairs_below_sim")
        else:
            pairs.append(p)
    if len(pairs) < cfg.images_min:
        reject("too_few_images")
        return None
    if len(pairs) > cfg.images_max:
        reject("too_many_images")
        return None
    if len(texts) < cfg.sentences_min:
        reject("too_few_sentences")
        return None
    if len(texts) > cfg.sentences_max:
        reject("too_many_sentences")
        return None
    joined = "\n".join(texts)
    count = counter(joined) if callable(counter) else counter.count(joined)
    if count > cfg.max_tokens:
        reject("too_long")
        return None
    info = []
    for p in pairs:
        img = images[p.image_index]
        if img.phash is None:
            raise ValueError(f"phash not computed for {img.url}")
        info.append(
            SampleImage(
                url=img.url,
                phash=img.phash,
                width_px=img.width_px,
                height_px=img.height_px,
                matched_text_index=p.sentence_index,
                matched_sim=p.sim,
            )
        )
    return InterleavedSample(source_url=doc.source_url, text_list=texts, image_info=info)
