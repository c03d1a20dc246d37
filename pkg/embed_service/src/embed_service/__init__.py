"""embed_service: text/image embeddings and NSFW scores over HTTP, with a
deterministic stub mode that needs no model weights."""

from .app import create_app
from .stub import DEFAULT_DIM, nsfw_score, stub_embedding

__all__ = ["create_app", "DEFAULT_DIM", "nsfw_score", "stub_embedding"]

__version__ = "0.1.0"
