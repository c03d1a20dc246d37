"""Shared fixtures: synthetic images, a local HTTP image server, and the
document corpus used by the pipeline and acceptance tests."""

from __future__ import annotations

import io
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image


def smooth_array(rng: np.random.Generator, width: int = 128, height: int = 96) -> np.ndarray:
    """A low-frequency random field; smooth enough that hashing survives a downscale."""
    yy, xx = np.mgrid[0:height, 0:width]
    field = np.zeros((height, width), dtype=np.float64)
    for _ in range(6):
        fx = rng.uniform(0.5, 4.0)
        fy = rng.uniform(0.5, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.4, 1.0)
        field += amp * np.cos(2 * np.pi * (fx * xx / width + fy * yy / height) + phase)
    field += rng.normal(0.0, 0.05, field.shape)
    lo, hi = field.min(), field.max()
    gray = (field - lo) / (hi - lo + 1e-12)
    gains = rng.uniform(0.6, 1.0, size=3)
    rgb = np.stack([gray * g * 255 for g in gains], axis=-1)
    return rgb.astype(np.uint8)


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def upscale2x(arr: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(arr, 2, axis=0), 2, axis=1)


class ImageServer:
    """Local HTTP server with request accounting for concurrency assertions."""

    def __init__(self):
        self.files: dict[str, bytes] = {}
        self.status: dict[str, int] = {}
        self.delay: dict[str, float] = {}
        self.hits: dict[str, int] = {}
        self.start_times: dict[str, list[float]] = {}
        self.active = 0
        self.high_water = 0
        self._lock = threading.Lock()

        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                with server._lock:
                    server.active += 1
                    server.high_water = max(server.high_water, server.active)
                    server.hits[self.path] = server.hits.get(self.path, 0) + 1
                    server.start_times.setdefault(self.path, []).append(time.monotonic())
                try:
                    delay = server.delay.get(self.path, 0.0)
                    if delay:
                        time.sleep(delay)
                    status = server.status.get(self.path)
                    if status is not None:
                        self.send_response(status)
                        self.end_headers()
                        return
                    body = server.files.get(self.path)
                    if body is None:
                        self.send_response(404)
                        self.end_headers()
                        return
                    self.send_response(200)
                    self.send_header("Content-Type", "image/png")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass
                finally:
                    with server._lock:
                        server.active -= 1

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    @property
    def alt_host_url(self) -> str:
        # Same server, different host string, for per-host bucket tests.
        return f"http://localhost:{self.port}"

    def add_png(self, path: str, arr: np.ndarray) -> str:
        self.files[path] = png_bytes(arr)
        return self.base_url + path

    def close(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture
def image_server():
    server = ImageServer()
    yield server
    server.close()


# --- synthetic corpus -----------------------------------------------------

_NOUNS = ["庭園", "市場", "神社", "駅前", "公園", "海岸", "商店街", "美術館", "図書館", "展望台"]
_PREDICATES = [
    "は朝から多くの人で賑わっていた",
    "の写真を撮影して記事にまとめた",
    "では季節の花が見頃を迎えている",
    "を訪れたのは今回が初めてだった",
    "の様子を動画でも公開している",
    "までは駅から歩いて十分ほどかかる",
    "の入口には案内板が設置されている",
    "で開催された催しの記録を残す",
]
_ALT_POOL = [
    "満開の桜と古い石段",
    "夕暮れの海岸線を望む",
    "市場に並ぶ新鮮な野菜",
    "雨上がりの商店街の路地",
    "窓から見える山並みの景色",
    "祭りの提灯が並ぶ参道",
    "雪化粧した庭園の石橋",
    "朝焼けに染まる展望台",
]


def make_sentence(rng: np.random.Generator) -> str:
    noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
    pred = _PREDICATES[int(rng.integers(len(_PREDICATES)))]
    return f"{noun}{pred}。"


def build_corpus(server: ImageServer, tmp_path, n_docs: int = 200, seed: int = 7):
    """Serve a seeded image pool and write a raw document manifest.

    The corpus plants everything the pipeline must react to: URL filter
    hits, undersized/misproportioned/corrupt images, an intra-document
    duplicate at two resolutions, a cross-document duplicate referenced by
    12 documents, and alt texts covering every pair filter.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    pool_size = max(60, n_docs * 3 // 2)
    pool_urls = []
    for i in range(pool_size):
        arr = smooth_array(rng, width=200, height=160)
        pool_urls.append(server.add_png(f"/img/pool_{i:04d}.png", arr))

    base = smooth_array(rng, width=200, height=160)
    base_url = server.add_png("/img/dup_base.png", base)
    base2x_url = server.add_png("/img/dup_base_2x.png", upscale2x(base))
    cross_url = server.add_png("/img/cross_dup.png", smooth_array(rng, width=200, height=160))

    server.files["/img/tiny.png"] = png_bytes(smooth_array(rng, width=100, height=100))
    server.files["/img/wide.png"] = png_bytes(smooth_array(rng, width=600, height=200))
    server.files["/img/corrupt.png"] = b"not a png at all"
    bad_urls = [
        server.base_url + "/img/anim.gif",
        server.base_url + "/assets/logo.png",
        server.base_url + "/img/missing_404.png",
        server.base_url + "/img/tiny.png",
        server.base_url + "/img/wide.png",
        server.base_url + "/img/corrupt.png",
    ]

    freq_alt = "商品一覧の画像です"  # planted > alt_freq_max times
    ten_alt = "限定十回だけの説明文"  # exactly alt_freq_max times
    autogen_alt = "画像に alt 属性が指定されていません。説明なし"
    filename_alt = "写真 2015-01-20 18 12 33"
    english_alt = "scenic mountain view"

    docs = []
    freq_used = 0
    ten_used = 0
    for d in range(n_docs):
        n_sent = int(rng.integers(12, 17))
        sentences = [make_sentence(rng) for _ in range(n_sent)]
        refs = []
        position = 0

        def add_ref(url, alt=None):
            nonlocal position
            refs.append({"url": url, "alt": alt, "position": position})
            position += 1

        n_imgs = int(rng.integers(8, 13))
        chosen = rng.choice(pool_size, size=n_imgs, replace=False)
        for j, k in enumerate(chosen):
            alt = None
            roll = rng.random()
            if roll < 0.55:
                alt = _ALT_POOL[int(rng.integers(len(_ALT_POOL)))] + f"その{int(rng.integers(1000))}"
            elif roll < 0.60 and freq_used < 12:
                alt = freq_alt
                freq_used += 1
            elif roll < 0.65 and ten_used < 10:
                alt = ten_alt
                ten_used += 1
            elif roll < 0.70:
                alt = autogen_alt
            elif roll < 0.75:
                alt = filename_alt
            elif roll < 0.80:
                alt = english_alt
            add_ref(pool_urls[int(k)], alt)

        if d < 12:
            add_ref(cross_url, None)
        if d == 0:
            add_ref(base_url)
            add_ref(base2x_url)
            add_ref(base_url)
        if d % 17 == 0:
            add_ref(bad_urls[(d // 17) % len(bad_urls)])

        docs.append(
            {
                "doc_id": f"doc-{d:05d}",
                "url": f"https://example.jp/articles/{d:05d}",
                "text": "\n".join(sentences),
                "images": refs,
            }
        )

    manifest = tmp_path / "raw_docs.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
    return manifest, docs
