"""URL filtering, domain downsampling, pacing and download tests.

Network cases run against an in-process HTTP server (conftest.ImageServer)
that counts hits and tracks concurrent request high-water marks.
"""

from __future__ import annotations

import hashlib
import time

import numpy as np
import pytest

from mmforge.fetcher import (
    FetchPolicy,
    HostPacer,
    downsample_domains,
    fetch_all,
    fetch_image,
    filter_url,
    host_of,
)
from mmforge.model import PipelineConfig

from conftest import smooth_array


def _policy(**kw) -> FetchPolicy:
    return FetchPolicy(**kw)


class TestFilterUrl:
    def test_allowed_extension_any_case(self):
        assert filter_url("https://a.jp/img/photo.JPG", _policy()) is None

    def test_blocked_keyword(self):
        assert filter_url("https://a.jp/assets/logo.png", _policy()) == "blocked_keyword"

    def test_bad_extension(self):
        assert filter_url("https://a.jp/anim.gif", _policy()) == "bad_extension"

    def test_extension_checked_before_keyword(self):
        assert filter_url("https://a.jp/button.gif", _policy()) == "bad_extension"

    def test_query_string_ignored_for_extension(self):
        assert filter_url("https://a.jp/photo.jpg?size=large&v=3", _policy()) is None

    def test_keyword_in_query_still_blocks(self):
        assert filter_url("https://a.jp/pic.png?from=button", _policy()) == "blocked_keyword"

    def test_keyword_case_insensitive(self):
        assert filter_url("https://a.jp/LOGO_banner.png", _policy()) == "blocked_keyword"

    def test_unparseable(self):
        assert filter_url("not a url.jpg", _policy()) == "unparseable"
        assert filter_url("https:///photo.jpg", _policy()) == "unparseable"


class TestHostOf:
    def test_lowercases_netloc(self):
        assert host_of("https://CDN.Example.JP/a.png") == "cdn.example.jp"

    def test_keeps_port(self):
        assert host_of("http://localhost:8420/x.png") == "localhost:8420"

    def test_rejects_relative(self):
        assert host_of("/just/a/path.png") is None


class TestDownsampleDomains:
    def _urls(self, host: str, n: int) -> list[str]:
        return [f"https://{host}/img/{i}.png" for i in range(n)]

    def test_under_cap_passes_through(self):
        urls = self._urls("a.jp", 5) + self._urls("b.jp", 3)
        assert downsample_domains(urls, cap=5, seed=1) == urls

    def test_over_cap_keeps_exactly_cap(self):
        urls = self._urls("a.jp", 20)
        kept = downsample_domains(urls, cap=7, seed=1)
        assert len(kept) == 7
        assert set(kept) <= set(urls)

    def test_order_preserved(self):
        urls = self._urls("a.jp", 30)
        kept = downsample_domains(urls, cap=10, seed=2)
        assert kept == [u for u in urls if u in set(kept)]

    def test_deterministic(self):
        urls = self._urls("a.jp", 30)
        assert downsample_domains(urls, 10, seed=3) == downsample_domains(urls, 10, seed=3)

    def test_hosts_sampled_independently(self):
        a = self._urls("a.jp", 30)
        b = self._urls("b.jp", 40)
        kept_alone = [u for u in downsample_domains(a, 10, seed=4) if "a.jp" in u]
        kept_mixed = [u for u in downsample_domains(a + b, 10, seed=4) if "a.jp" in u]
        assert kept_alone == kept_mixed

    def test_cap_must_be_positive(self):
        with pytest.raises(ValueError):
            downsample_domains([], cap=0, seed=1)


class TestHostPacer:
    def test_slots_spaced_by_interval(self):
        pacer = HostPacer(rate_per_host=10.0)
        slots = [pacer.reserve("a.jp") for _ in range(4)]
        gaps = [b - a for a, b in zip(slots, slots[1:])]
        assert all(g >= 0.1 - 1e-9 for g in gaps)

    def test_hosts_do_not_share_a_bucket(self):
        pacer = HostPacer(rate_per_host=2.0)
        for _ in range(5):
            pacer.reserve("slow.jp")
        fresh = pacer.reserve("fast.jp")
        assert fresh <= time.monotonic() + 1e-6


class TestFetchImage:
    def test_success_fills_dimensions_and_digest(self, image_server):
        rng = np.random.Generator(np.random.PCG64(1))
        url = image_server.add_png("/img/ok.png", smooth_array(rng, width=300, height=300))
        out = fetch_image(url, _policy(), PipelineConfig())
        assert out.ok
        assert (out.image.width_px, out.image.height_px) == (300, 300)
        assert out.image.content_digest == hashlib.sha256(out.data).hexdigest()
        assert out.image.phash is None

    def test_min_side_boundary(self, image_server):
        rng = np.random.Generator(np.random.PCG64(2))
        small = image_server.add_png("/img/s.png", smooth_array(rng, width=149, height=300))
        edge = image_server.add_png("/img/e.png", smooth_array(rng, width=150, height=300))
        assert fetch_image(small, _policy(), PipelineConfig()).reason == "small"
        assert fetch_image(edge, _policy(), PipelineConfig()).ok

    def test_aspect_boundaries(self, image_server):
        rng = np.random.Generator(np.random.PCG64(3))
        cases = {
            "/img/a49.png": ((196, 400), "aspect"),  # 0.49
            "/img/a50.png": ((200, 400), None),  # 0.50
            "/img/a200.png": ((400, 200), None),  # 2.00
            "/img/a201.png": ((402, 200), "aspect"),  # 2.01
        }
        for path, ((w, h), want) in cases.items():
            url = image_server.add_png(path, smooth_array(rng, width=w, height=h))
            out = fetch_image(url, _policy(), PipelineConfig())
            assert out.reason == want, path

    def test_missing_file_is_http_error(self, image_server):
        out = fetch_image(image_server.base_url + "/img/absent.png", _policy(), PipelineConfig())
        assert out.reason == "http_error"

    def test_server_error_status(self, image_server):
        image_server.status["/img/broken.png"] = 503
        out = fetch_image(image_server.base_url + "/img/broken.png", _policy(), PipelineConfig())
        assert out.reason == "http_error"

    def test_undecodable_bytes(self, image_server):
        image_server.files["/img/corrupt.png"] = b"\x89PNG\r\n\x1a\nnot really a png"
        out = fetch_image(image_server.base_url + "/img/corrupt.png", _policy(), PipelineConfig())
        assert out.reason == "undecodable"

    def test_oversize_body(self, image_server):
        rng = np.random.Generator(np.random.PCG64(4))
        url = image_server.add_png("/img/big.png", smooth_array(rng, width=300, height=300))
        out = fetch_image(url, _policy(max_bytes=100), PipelineConfig())
        assert out.reason == "oversize"

    def test_timeout_retries_once(self, image_server):
        rng = np.random.Generator(np.random.PCG64(5))
        url = image_server.add_png("/img/slow.png", smooth_array(rng, width=300, height=300))
        image_server.delay["/img/slow.png"] = 1.0
        out = fetch_image(url, _policy(timeout_ms=200), PipelineConfig())
        assert out.reason == "timeout"
        assert image_server.hits["/img/slow.png"] == 2


class TestFetchAll:
    def test_results_in_input_order(self, image_server):
        rng = np.random.Generator(np.random.PCG64(6))
        good = image_server.add_png("/img/g.png", smooth_array(rng, width=300, height=300))
        urls = [good, image_server.base_url + "/img/gone.png", good]
        out = fetch_all(urls, _policy(rate_per_host=1000), PipelineConfig())
        assert [o.url for o in out] == urls
        assert [o.ok for o in out] == [True, False, True]

    def test_in_flight_bound_holds(self, image_server):
        rng = np.random.Generator(np.random.PCG64(7))
        urls = []
        for i in range(10):
            path = f"/img/c{i}.png"
            urls.append(image_server.add_png(path, smooth_array(rng, width=160, height=160)))
            image_server.delay[path] = 0.05
        policy = _policy(rate_per_host=10_000, max_in_flight=2)
        out = fetch_all(urls, policy, PipelineConfig())
        assert all(o.ok for o in out)
        assert image_server.high_water <= 2

    def test_per_host_rate_is_enforced(self, image_server):
        rng = np.random.Generator(np.random.PCG64(8))
        urls = [
            image_server.add_png(f"/img/r{i}.png", smooth_array(rng, width=160, height=160))
            for i in range(4)
        ]
        start = time.monotonic()
        fetch_all(urls, _policy(rate_per_host=20.0), PipelineConfig())
        assert time.monotonic() - start >= 3 * 0.05 - 1e-3

    def test_unparseable_url_reported_in_place(self):
        out = fetch_all(["::nope::"], _policy(), PipelineConfig())
        assert out[0].reason == "unparseable"
        assert not out[0].ok
