"""FastAPI application serving the embedding and scoring contract.

Endpoints: POST /v1/embed/text {"texts": [...]}, POST /v1/embed/image
{"images_b64": [...]} (both answering {"dim": int, "embeddings": [[float]]}),
POST /v1/score/nsfw {"images_b64": [...]} answering {"scores": [float]},
and GET /healthz answering {"mode": "stub"|"model", "dim": int}.

Stub mode derives every output from the request bytes (see stub.py) and
holds no state, so concurrent requests and restarts cannot change
responses. Model mode is a mounting point for real encoders: until a
model object is supplied, its inference endpoints answer 503. Oversize
batches answer 413; images that base64-decode or pixel-decode badly
answer 422 naming the offending index.
"""

from __future__ import annotations

import base64
import io
from typing import Protocol, Sequence

from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel

from .stub import DEFAULT_DIM, nsfw_score, stub_embedding, wire_float

DEFAULT_BATCH_MAX = 64


class Model(Protocol):
    """What a real encoder must provide to run the service in model mode."""

    def embed_texts(self, texts: Sequence[str]) -> list[list[float]]: ...

    def embed_images(self, images: Sequence[bytes]) -> list[list[float]]: ...

    def score_images(self, images: Sequence[bytes]) -> list[float]: ...


class TextBatch(BaseModel):
    texts: list[str]


class ImageBatch(BaseModel):
    images_b64: list[str]


class EmbedResponse(BaseModel):
    dim: int
    embeddings: list[list[float]]


class ScoreResponse(BaseModel):
    scores: list[float]


class Health(BaseModel):
    mode: str
    dim: int


def create_app(
    mode: str = "stub",
    dim: int = DEFAULT_DIM,
    batch_max: int = DEFAULT_BATCH_MAX,
    model: Model | None = None,
) -> FastAPI:
    if mode not in ("stub", "model"):
        raise ValueError(f"unknown mode {mode!r}")
    if dim < 1 or batch_max < 1:
        raise ValueError("dim and batch_max must be positive")

    app = FastAPI(title="embed-service", version="0.1.0")

    def check_batch(n: int) -> None:
        if n > batch_max:
            raise HTTPException(413, detail=f"batch of {n} exceeds the limit of {batch_max}")

    def require_model() -> Model:
        if model is None:
            raise HTTPException(503, detail="model mode requested but no model is loaded")
        return model

    def decode_images(items: list[str]) -> list[bytes]:
        blobs = []
        for i, encoded in enumerate(items):
            try:
                data = base64.b64decode(encoded, validate=True)
                with Image.open(io.BytesIO(data)) as img:
                    img.load()
            except (ValueError, OSError, Image.DecompressionBombError) as exc:
                raise HTTPException(422, detail=f"undecodable image at index {i}") from exc
            blobs.append(data)
        return blobs

    def respond(vectors: list[list[float]]) -> EmbedResponse:
        rounded = [[wire_float(x) for x in vec] for vec in vectors]
        return EmbedResponse(dim=dim, embeddings=rounded)

    @app.get("/healthz", response_model=Health)
    def healthz() -> Health:
        return Health(mode=mode, dim=dim)

    @app.post("/v1/embed/text", response_model=EmbedResponse)
    def embed_text(batch: TextBatch) -> EmbedResponse:
        check_batch(len(batch.texts))
        if mode == "model":
            return respond(require_model().embed_texts(batch.texts))
        return respond([stub_embedding(t.encode("utf-8"), dim) for t in batch.texts])

    @app.post("/v1/embed/image", response_model=EmbedResponse)
    def embed_image(batch: ImageBatch) -> EmbedResponse:
        check_batch(len(batch.images_b64))
        blobs = decode_images(batch.images_b64)
        if mode == "model":
            return respond(require_model().embed_images(blobs))
        return respond([stub_embedding(data, dim) for data in blobs])

    @app.post("/v1/score/nsfw", response_model=ScoreResponse)
    def score_nsfw(batch: ImageBatch) -> ScoreResponse:
        check_batch(len(batch.images_b64))
        blobs = decode_images(batch.images_b64)
        if mode == "model":
            scores = require_model().score_images(blobs)
        else:
            scores = [nsfw_score(data) for data in blobs]
        return ScoreResponse(scores=[wire_float(s) for s in scores])

    return app
