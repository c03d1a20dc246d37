"""Stage runners and pipeline orchestration.

Every stage reads its predecessors' manifests from the working directory,
writes one output manifest plus a funnel report, and records a resume
sidecar (digests of inputs, outputs, config, seed). run_pipeline skips a
stage when its sidecar still matches, so interrupting and restarting a long
run never repeats finished work and never reuses stale work.

Stage units differ and telescope only where the unit is preserved: the
document chain (segment -> dedup -> score -> assign) counts documents, the
fetch stage counts distinct URLs, and the pairs stage counts alt-text
candidates. Image attrition inside kept documents shows up in the reports'
``info`` maps.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Sequence

from . import fetcher as fetcher_mod
from .assigner import CharTokenCounter, assign_images, build_sample, prefilter_images
from .funnel import Funnel, FunnelReport, load_report
from .model import (
    DocImage,
    PipelineConfig,
    PipelineDoc,
    RawDocument,
    Sentence,
    load_documents,
)
from .pairs import AltFilterTables, extract_pairs
from .phash import cross_marked_hashes, dedup_intra, phash_bytes
from .rouge import rouge_l
from .scoring import (
    CachingEmbeddingProvider,
    EmbeddingProvider,
    HttpEmbeddingProvider,
    HttpNsfwScorer,
    NsfwScorer,
    StubEmbeddingProvider,
    StubNsfwScorer,
    nsfw_filter,
    similarity_matrix,
)
from .segmenter import segment_and_repair
from .util import derive_seed, file_digest, iter_jsonl, sha256_hex, write_jsonl

logger = logging.getLogger(__name__)

SEGMENTED = "01_segmented.jsonl"
IMAGES = "02_images.jsonl"
DEDUPED = "03_deduped.jsonl"
SCORED = "04_scored.jsonl"
SAMPLES = "05_samples.jsonl"
PAIRS = "06_pairs.jsonl"

DOC_CHAIN = ["segment", "dedup", "score", "assign"]
PIPELINE_ORDER = ["segment", "fetch", "dedup", "score", "assign", "pairs"]


class StageContext:
    """Paths, config, seed, and lazily built providers for one run."""

    def __init__(
        self,
        workdir: str | Path,
        cfg: PipelineConfig,
        seed: int | None = None,
        embed_endpoint: str | None = None,
        tables: AltFilterTables | None = None,
    ):
        self.workdir = Path(workdir)
        self.cfg = cfg
        self.seed = cfg.rng_seed if seed is None else seed
        self.embed_endpoint = embed_endpoint
        self.tables = tables or AltFilterTables()
        self._provider_a: EmbeddingProvider | None = None
        self._provider_b: EmbeddingProvider | None = None
        self._nsfw: NsfwScorer | None = None

    def path(self, name: str) -> Path:
        return self.workdir / name

    def funnel_path(self, stage: str) -> Path:
        return self.workdir / "funnels" / f"{stage}.json"

    def meta_path(self, stage: str) -> Path:
        return self.workdir / "meta" / f"{stage}.meta.json"

    def blob_path(self, digest: str) -> Path:
        return self.workdir / "blobs" / digest

    def load_blob(self, digest: str) -> bytes:
        path = self.blob_path(digest)
        if not path.exists():
            raise FileNotFoundError(f"blob {digest} missing; re-run the fetch stage")
        return path.read_bytes()

    def provider_a(self) -> EmbeddingProvider:
        if self._provider_a is None:
            if self.embed_endpoint:
                inner: EmbeddingProvider = HttpEmbeddingProvider(self.embed_endpoint)
            else:
                inner = StubEmbeddingProvider()
            cache = self.workdir / "cache" / "embed_a.jsonl"
            self._provider_a = CachingEmbeddingProvider(inner, cache)
        return self._provider_a

    def provider_b(self) -> EmbeddingProvider:
        # The second alignment scorer; always an independent in-process
        # family (a remote endpoint serves only one embedding space).
        if self._provider_b is None:
            cache = self.workdir / "cache" / "embed_b.jsonl"
            self._provider_b = CachingEmbeddingProvider(StubEmbeddingProvider(salt="b"), cache)
        return self._provider_b

    def nsfw_scorer(self) -> NsfwScorer:
        if self._nsfw is None:
            self._nsfw = HttpNsfwScorer(self.embed_endpoint) if self.embed_endpoint else StubNsfwScorer()
        return self._nsfw

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)


# --- resume sidecars ------------------------------------------------------


def _config_digest(ctx: StageContext) -> str:
    return sha256_hex(ctx.cfg.canonical_json().encode("utf-8"))


def _digest_map(paths: Sequence[Path]) -> dict[str, str]:
    return {str(p): file_digest(p) for p in paths}


def write_sidecar(ctx: StageContext, stage: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
    meta = {
        "stage": stage,
        "config_digest": _config_digest(ctx),
        "seed": ctx.seed,
        "inputs": _digest_map(inputs),
        "outputs": _digest_map(outputs),
    }
    path = ctx.meta_path(stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def stage_is_current(ctx: StageContext, stage: str, inputs: Sequence[Path]) -> bool:
    """True when the sidecar proves inputs, config, seed, and outputs are unchanged."""
    path = ctx.meta_path(stage)
    if not path.exists():
        return False
    try:
        with open(path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    if meta.get("config_digest") != _config_digest(ctx) or meta.get("seed") != ctx.seed:
        return False
    if set(meta.get("inputs", {})) != {str(p) for p in inputs}:
        return False
    for recorded, digest in meta["inputs"].items():
        p = Path(recorded)
        if not p.exists() or file_digest(p) != digest:
            return False
    for recorded, digest in meta.get("outputs", {}).items():
        p = Path(recorded)
        if not p.exists() or file_digest(p) != digest:
            return False
    return True


# --- manifest helpers -----------------------------------------------------


def _doc_record(doc: PipelineDoc) -> dict:
    return {
        "doc_id": doc.doc_id,
        "url": doc.source_url,
        "sentences": doc.sentences,
        "images": [img.model_dump() for img in doc.images],
    }


def _load_pipeline_docs(path: Path) -> list[PipelineDoc]:
    docs = []
    for _, line in iter_jsonl(path):
        rec = json.loads(line)
        docs.append(
            PipelineDoc(
                doc_id=rec["doc_id"],
                source_url=rec["url"],
                sentences=rec["sentences"],
                images=[DocImage.model_validate(d) for d in rec["images"]],
            )
        )
    return docs


def _as_raw_document(doc: PipelineDoc) -> RawDocument:
    sentences = [Sentence(index=i, text=t) for i, t in enumerate(doc.sentences)]
    return RawDocument(doc_id=doc.doc_id, source_url=doc.source_url, sentences=sentences)


class _DigestMemoScorer:
    """Memoizes NSFW scores by content digest within one stage run."""

    def __init__(self, inner: NsfwScorer):
        self.inner = inner
        self._memo: dict[str, float] = {}

    def score_images(self, images: Sequence[bytes]) -> list[float]:
        keys = [hashlib.sha256(b).hexdigest() for b in images]
        missing = [i for i, k in enumerate(keys) if k not in self._memo]
        if missing:
            fresh = self.inner.score_images([images[i] for i in missing])
            for i, s in zip(missing, fresh):
                self._memo[keys[i]] = s
        return [self._memo[k] for k in keys]


# --- stages ---------------------------------------------------------------


def run_segment(ctx: StageContext, input_path: Path) -> FunnelReport:
    funnel = Funnel("segment")
    out_path = ctx.path(SEGMENTED)
    records = []
    for doc in load_documents(input_path, funnel):
        sentences = segment_and_repair("\n".join(doc.sentence_texts()))
        records.append(
            {
                "doc_id": doc.doc_id,
                "url": doc.source_url,
                "sentences": [s.text for s in sentences],
                "images": [
                    {"url": r.url, "alt": r.alt_text, "position": r.position}
                    for r in doc.image_refs
                ],
            }
        )
    funnel.output_count = write_jsonl(out_path, records)
    report = funnel.write(ctx.funnel_path("segment"))
    write_sidecar(ctx, "segment", [input_path], [out_path, ctx.funnel_path("segment")])
    return report


def run_fetch(ctx: StageContext) -> FunnelReport:
    funnel = Funnel("fetch")
    in_path = ctx.path(SEGMENTED)
    out_path = ctx.path(IMAGES)
    policy = fetcher_mod.FetchPolicy.from_config(ctx.cfg)

    seen: set[str] = set()
    urls: list[str] = []
    for doc in load_documents(in_path):
        for ref in doc.image_refs:
            if ref.url not in seen:
                seen.add(ref.url)
                urls.append(ref.url)
    funnel.input_count = len(urls)

    passed: list[str] = []
    for url in urls:
        reason = fetcher_mod.filter_url(url, policy)
        if reason is None:
            passed.append(url)
        else:
            funnel.reject(reason)

    kept = fetcher_mod.downsample_domains(passed, ctx.cfg.per_domain_url_cap, ctx.stage_seed("fetch"))
    if len(kept) < len(passed):
        funnel.reject("domain_downsampled", len(passed) - len(kept))

    outcomes = fetcher_mod.fetch_all(kept, policy, ctx.cfg)
    records = []
    blob_dir = ctx.workdir / "blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    for outcome in outcomes:
        if not outcome.ok:
            funnel.reject(outcome.reason)
            continue
        blob = ctx.blob_path(outcome.image.content_digest)
        if not blob.exists():
            blob.write_bytes(outcome.data)
        records.append(outcome.image.model_dump())
    funnel.output_count = write_jsonl(out_path, records)
    report = funnel.write(ctx.funnel_path("fetch"))
    write_sidecar(ctx, "fetch", [in_path], [out_path, ctx.funnel_path("fetch")])
    return report


def run_dedup(ctx: StageContext) -> FunnelReport:
    from .model import CandidateImage

    funnel = Funnel("dedup")
    seg_path, img_path = ctx.path(SEGMENTED), ctx.path(IMAGES)
    out_path = ctx.path(DEDUPED)

    fetched: dict[str, CandidateImage] = {}
    for _, line in iter_jsonl(img_path):
        img = CandidateImage.model_validate(json.loads(line))
        fetched[img.url] = img

    phash_memo: dict[str, int] = {}

    def phash_of(digest: str) -> int:
        if digest not in phash_memo:
            phash_memo[digest] = phash_bytes(ctx.load_blob(digest))
        return phash_memo[digest]

    docs: list[PipelineDoc] = []
    for doc in load_documents(seg_path):
        funnel.input_count += 1
        images = []
        for ref in doc.image_refs:
            base = fetched.get(ref.url)
            if base is None:
                funnel.note("refs_unfetched")
                continue
            images.append(
                DocImage(
                    url=base.url,
                    content_digest=base.content_digest,
                    width_px=base.width_px,
                    height_px=base.height_px,
                    phash=phash_of(base.content_digest),
                    alt_text=ref.alt_text,
                    position=ref.position,
                )
            )
        kept = dedup_intra(images, ctx.cfg.hamming_intra_max)
        if len(kept) < len(images):
            funnel.note("intra_removed", len(images) - len(kept))
        docs.append(
            PipelineDoc(
                doc_id=doc.doc_id,
                source_url=doc.source_url,
                sentences=doc.sentence_texts(),
                images=kept,
            )
        )

    all_hashes = [img.phash for doc in docs for img in doc.images]
    marked = cross_marked_hashes(
        all_hashes,
        ctx.cfg.cross_sample_size,
        ctx.cfg.cross_dup_max,
        derive_seed(ctx.stage_seed("dedup"), "cross"),
    )
    if marked:
        for doc in docs:
            before = len(doc.images)
            doc.images = [img for img in doc.images if img.phash not in marked]
            if len(doc.images) < before:
                funnel.note("cross_removed", before - len(doc.images))

    funnel.output_count = write_jsonl(out_path, (_doc_record(d) for d in docs))
    report = funnel.write(ctx.funnel_path("dedup"))
    write_sidecar(ctx, "dedup", [seg_path, img_path], [out_path, ctx.funnel_path("dedup")])
    return report


def run_score(ctx: StageContext) -> FunnelReport:
    funnel = Funnel("score")
    in_path, out_path = ctx.path(DEDUPED), ctx.path(SCORED)
    docs = _load_pipeline_docs(in_path)
    funnel.input_count = len(docs)

    scorer = _DigestMemoScorer(ctx.nsfw_scorer())
    provider = ctx.provider_a()
    for doc in docs:
        blobs = [ctx.load_blob(img.content_digest) for img in doc.images]
        kept, removed = nsfw_filter(doc.images, blobs, scorer, ctx.cfg)
        if removed:
            funnel.note("images_nsfw_rejected", len(removed))
        kept_blobs = [ctx.load_blob(img.content_digest) for img in kept]
        embeddings = provider.embed_images(kept_blobs) if kept else []
        doc.images = [
            img.model_copy(update={"embedding": vec}) for img, vec in zip(kept, embeddings)
        ]

    funnel.output_count = write_jsonl(out_path, (_doc_record(d) for d in docs))
    report = funnel.write(ctx.funnel_path("score"))
    write_sidecar(ctx, "score", [in_path], [out_path, ctx.funnel_path("score")])
    return report


def run_assign(ctx: StageContext) -> FunnelReport:
    funnel = Funnel("assign")
    in_path, out_path = ctx.path(SCORED), ctx.path(SAMPLES)
    docs = _load_pipeline_docs(in_path)
    funnel.input_count = len(docs)

    provider = ctx.provider_a()
    counter = CharTokenCounter()
    records = []
    for doc in docs:
        sentence_vecs = provider.embed_texts(doc.sentences) if doc.sentences else []
        m = similarity_matrix(doc.sentences, doc.images, sentence_vecs)
        keep_idx = prefilter_images(m, ctx.cfg)
        if len(keep_idx) < len(doc.images):
            funnel.note("images_prefiltered", len(doc.images) - len(keep_idx))
        images = [doc.images[i] for i in keep_idx]
        sub = similarity_matrix(doc.sentences, images, sentence_vecs)
        assignment = assign_images(sub, ctx.cfg)
        sample = build_sample(_as_raw_document(doc), images, assignment, counter, ctx.cfg, funnel)
        if sample is not None:
            records.append(sample.to_record())

    funnel.output_count = write_jsonl(out_path, records)
    report = funnel.write(ctx.funnel_path("assign"))
    write_sidecar(ctx, "assign", [in_path], [out_path, ctx.funnel_path("assign")])
    return report


def run_pairs(ctx: StageContext) -> FunnelReport:
    funnel = Funnel("pairs")
    in_path, out_path = ctx.path(SCORED), ctx.path(PAIRS)
    docs = _load_pipeline_docs(in_path)
    candidates = [img for doc in docs for img in doc.images if img.alt_text is not None]
    pairs = extract_pairs(
        candidates,
        ctx.tables,
        ctx.provider_a(),
        ctx.provider_b(),
        ctx.cfg,
        ctx.load_blob,
        funnel,
    )
    write_jsonl(out_path, (p.to_record() for p in pairs))
    report = funnel.write(ctx.funnel_path("pairs"))
    write_sidecar(ctx, "pairs", [in_path], [out_path, ctx.funnel_path("pairs")])
    return report


def run_rouge(input_path: Path, output_path: Path, mode: str = "character", beta: float = 1.0) -> int:
    """Score candidate/reference rows; returns the number scored."""
    rows = []
    sums = [0.0, 0.0, 0.0]
    scored = 0
    for line_no, line in iter_jsonl(input_path):
        rec = json.loads(line)
        try:
            r = rouge_l(rec["candidate"], rec["reference"], rec.get("mode", mode), rec.get("beta", beta))
        except (KeyError, ValueError) as exc:
            rows.append({"index": line_no, "error": str(exc)})
            continue
        rows.append({"index": line_no, "precision": r.precision, "recall": r.recall, "f": r.f})
        sums[0] += r.precision
        sums[1] += r.recall
        sums[2] += r.f
        scored += 1
    if scored:
        rows.append(
            {
                "rows": scored,
                "mean_precision": sums[0] / scored,
                "mean_recall": sums[1] / scored,
                "mean_f": sums[2] / scored,
            }
        )
    write_jsonl(output_path, rows)
    return scored


def run_stats(ctx: StageContext) -> dict:
    """Merge all funnel reports and check unit-preserving telescoping."""
    reports: dict[str, FunnelReport] = {}
    funnel_dir = ctx.workdir / "funnels"
    if funnel_dir.is_dir():
        for path in sorted(funnel_dir.glob("*.json")):
            rep = load_report(path)
            reports[rep.stage] = rep
    checks = []
    for prev, nxt in zip(DOC_CHAIN, DOC_CHAIN[1:]):
        if prev in reports and nxt in reports:
            checks.append(
                {
                    "from": prev,
                    "to": nxt,
                    "output": reports[prev].output_count,
                    "input": reports[nxt].input_count,
                    "ok": reports[prev].output_count == reports[nxt].input_count,
                }
            )
    merged = {
        "stages": [reports[s].model_dump() for s in PIPELINE_ORDER if s in reports],
        "telescoping": checks,
        "ok": all(c["ok"] for c in checks),
    }
    out = ctx.workdir / "stats.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(merged, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    return merged


def run_pipeline(ctx: StageContext, input_path: Path) -> list[str]:
    """Run all stages in order, skipping any whose sidecar is still valid.

    Returns the list of stages that actually executed.
    """
    executed = []
    plan: list[tuple[str, list[Path]]] = [
        ("segment", [input_path]),
        ("fetch", [ctx.path(SEGMENTED)]),
        ("dedup", [ctx.path(SEGMENTED), ctx.path(IMAGES)]),
        ("score", [ctx.path(DEDUPED)]),
        ("assign", [ctx.path(SCORED)]),
        ("pairs", [ctx.path(SCORED)]),
    ]
    runners = {
        "segment": lambda: run_segment(ctx, input_path),
        "fetch": lambda: run_fetch(ctx),
        "dedup": lambda: run_dedup(ctx),
        "score": lambda: run_score(ctx),
        "assign": lambda: run_assign(ctx),
        "pairs": lambda: run_pairs(ctx),
    }
    ctx.workdir.mkdir(parents=True, exist_ok=True)
    for stage, inputs in plan:
        if stage_is_current(ctx, stage, inputs):
            logger.info("stage %s up to date, skipping", stage)
            continue
        logger.info("running stage %s", stage)
        runners[stage]()
        executed.append(stage)
    return executed
