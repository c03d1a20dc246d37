"""mmforge: build interleaved image-text documents and image-alt-text pairs
from web-crawl manifests, with deterministic, restartable stages."""

from .model import (
    AltPair,
    CandidateImage,
    InterleavedSample,
    PipelineConfig,
    RawDocument,
    Sentence,
    validate_sample,
)

__all__ = [
    "AltPair",
    "CandidateImage",
    "InterleavedSample",
    "PipelineConfig",
    "RawDocument",
    "Sentence",
    "validate_sample",
]

__version__ = "0.1.0"
