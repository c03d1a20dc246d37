"""Image URL filtering, per-host download pacing, and validation.

Downloads run on a thread pool under two independent brakes: a per-host
minimum-interval pacer (token bucket with burst 1) and a global in-flight
semaphore. The pacer commits each request's earliest start time before the
semaphore is taken, so one slow host never starves the others; under a
saturated in-flight bound a start may slip later than its slot, never
earlier.
"""

from __future__ import annotations

import io
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from urllib.parse import urlsplit

import numpy as np
import requests
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from .model import CandidateImage, PipelineConfig
from .util import derive_seed, sha256_hex

logger = logging.getLogger(__name__)


class FetchPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    allowed_extensions: frozenset[str] = frozenset({".jpg", ".jpeg", ".png"})
    blocked_keywords: frozenset[str] = frozenset({"logo", "button", "icon", "plugin", "widget"})
    timeout_ms: int = Field(default=10_000, gt=0)
    max_bytes: int = Field(default=20_000_000, gt=0)
    rate_per_host: float = Field(default=8.0, gt=0)
    max_in_flight: int = Field(default=8, ge=1)
    user_agent: str = "mmforge/0.1"

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "FetchPolicy":
        return cls(rate_per_host=cfg.fetch_rate_per_host, max_in_flight=cfg.fetch_concurrency)


@dataclass(frozen=True)
class FetchOutcome:
    """Result of one URL: either an image plus its raw bytes, or a reason."""

    url: str
    image: CandidateImage | None = None
    data: bytes | None = None
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.image is not None


def host_of(url: str) -> str | None:
    try:
        parts = urlsplit(url)
    except ValueError:
        return None
    if not parts.scheme or not parts.netloc:
        return None
    return parts.netloc.lower()


def filter_url(url: str, policy: FetchPolicy) -> str | None:
    """None when the URL may be fetched, else the rejection reason.

    The extension gate looks at the path only (query ignored, case folded);
    the keyword gate scans the entire URL.
    """
    try:
        parts = urlsplit(url)
    except ValueError:
        return "unparseable"
    if not parts.scheme or not parts.netloc:
        return "unparseable"
    path = parts.path.lower()
    if not any(path.endswith(ext) for ext in policy.allowed_extensions):
        return "bad_extension"
    lowered = url.lower()
    if any(kw in lowered for kw in policy.blocked_keywords):
        return "blocked_keyword"
    return None


def downsample_domains(urls: list[str], cap: int, seed: int) -> list[str]:
    """Cap the number of URLs kept per host, sampling uniformly.

    Hosts at or below the cap pass through untouched. Sampling is seeded
    per host, so the kept set does not depend on how other hosts shrink.
    Relative input order is preserved.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    by_host: dict[str, list[int]] = {}
    for i, url in enumerate(urls):
        key = host_of(url) or ""
        by_host.setdefault(key, []).append(i)
    keep: set[int] = set()
    for key, indices in by_host.items():
        if len(indices) <= cap:
            keep.update(indices)
            continue
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "downsample:" + key)))
        chosen = rng.choice(len(indices), size=cap, replace=False)
        keep.update(indices[int(k)] for k in chosen)
    return [url for i, url in enumerate(urls) if i in keep]


class HostPacer:
    """Commits per-host start slots at least 1/rate apart (burst 1)."""

    def __init__(self, rate_per_host: float):
        self.interval = 1.0 / rate_per_host
        self._next: dict[str, float] = {}
        self._lock = threading.Lock()

    def reserve(self, host: str) -> float:
        """Return the monotonic time at which this request may start."""
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next.get(host, 0.0))
            self._next[host] = slot + self.interval
            return slot


def _download(url: str, policy: FetchPolicy) -> tuple[bytes, str] | str:
    headers = {"User-Agent": policy.user_agent}
    timeout = policy.timeout_ms / 1000.0
    for attempt in (0, 1):
        try:
            with requests.get(url, headers=headers, timeout=timeout, stream=True) as resp:
                if not 200 <= resp.status_code < 300:
                    return "http_error"
                chunks: list[bytes] = []
                total = 0
                for chunk in resp.iter_content(chunk_size=65536):
                    total += len(chunk)
                    if total > policy.max_bytes:
                        return "oversize"
                    chunks.append(chunk)
                data = b"".join(chunks)
                return data, sha256_hex(data)
        except requests.Timeout:
            if attempt == 1:
                return "timeout"
            logger.debug("timeout fetching %s, retrying once", url)
        except requests.RequestException:
            return "http_error"
    return "timeout"


def fetch_image(url: str, policy: FetchPolicy, cfg: PipelineConfig) -> FetchOutcome:
    """Download one pre-filtered URL and validate the decoded image."""
    result = _download(url, policy)
    if isinstance(result, str):
        return FetchOutcome(url=url, reason=result)
    data, digest = result
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            width, height = img.width, img.height
    except Exception:
        return FetchOutcome(url=url, reason="undecodable")
    if width == 0 or height == 0:
        return FetchOutcome(url=url, reason="undecodable")
    if min(width, height) < cfg.min_side_px:
        return FetchOutcome(url=url, reason="small")
    aspect = width / height
    if aspect < cfg.aspect_min or aspect > cfg.aspect_max:
        return FetchOutcome(url=url, reason="aspect")
    image = CandidateImage(url=url, content_digest=digest, width_px=width, height_px=height)
    return FetchOutcome(url=url, image=image, data=data)


def fetch_all(urls: list[str], policy: FetchPolicy, cfg: PipelineConfig) -> list[FetchOutcome]:
    """Fetch every URL concurrently; results come back in input order."""
    if not urls:
        return []
    pacer = HostPacer(policy.rate_per_host)
    in_flight = threading.Semaphore(policy.max_in_flight)

    def run_one(url: str) -> FetchOutcome:
        host = host_of(url)
        if host is None:
            return FetchOutcome(url=url, reason="unparseable")
        slot = pacer.reserve(host)
        delay = slot - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        with in_flight:
            return fetch_image(url, policy, cfg)

    workers = min(max(policy.max_in_flight * 2, 16), 32, len(urls))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, urls))
