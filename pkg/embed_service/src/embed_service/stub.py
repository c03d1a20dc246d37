"""Deterministic stub rules for embeddings and NSFW scores.

The rule is pinned at byte level so independent implementations (this
service, the pipeline's in-process provider, offline checkers) agree at
JSON float precision: seed a PCG64 generator with the first 8 bytes
(big-endian) of sha256(content), draw ``dim`` uniform [0, 1) values,
subtract 0.5 from each, and L2-normalize. Content is the UTF-8 encoding
for text and the raw bytes for images. The NSFW score maps the first 8
bytes of sha256(image bytes) to a fraction of 2^64.

Values cross the wire with 9 significant digits; consumers compare with a
1e-6 tolerance.
"""

from __future__ import annotations

import hashlib

import numpy as np

DEFAULT_DIM = 64


def _seed(content: bytes) -> int:
    return int.from_bytes(hashlib.sha256(content).digest()[:8], "big")


def stub_embedding(content: bytes, dim: int = DEFAULT_DIM) -> list[float]:
    """Unit-norm vector derived from the content bytes alone."""
    rng = np.random.Generator(np.random.PCG64(_seed(content)))
    v = rng.random(dim) - 0.5
    v /= np.linalg.norm(v)
    return v.tolist()


def nsfw_score(content: bytes) -> float:
    """Deterministic score in [0, 1) derived from the content digest."""
    return _seed(content) / 2.0**64


def wire_float(x: float) -> float:
    """Round to the documented wire precision of 9 significant digits."""
    return float(f"{x:.9g}")
