"""64-bit DCT perceptual hash and the two deduplication passes.

The hash procedure is pinned step by step (luma weights, area-average
resize, unnormalized DCT-II, quantization, median threshold, bit order) so
that any faithful reimplementation reproduces it bit for bit. Quantization
happens at two points, after the resize and after the DCT, so that the
threshold comparison never depends on sub-noise floating-point residue;
without it a constant image would hash differently across DCT algorithms.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image
from scipy.fftpack import dct

from .model import CandidateImage

HASH_SIDE = 8
RESIZE_SIDE = 32
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)
_PIXEL_QUANTUM = 1e-4
_COEFF_QUANTUM = 1e-2


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix averaging input cells per bin.

    Output bin i covers the half-open interval [i*n_in/n_out, (i+1)*n_in/n_out);
    each input cell contributes proportionally to its overlap with the bin.
    """
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        lo = i * scale
        hi = (i + 1) * scale
        k0 = int(np.floor(lo))
        k1 = min(int(np.ceil(hi)), n_in)
        for k in range(k0, k1):
            overlap = min(hi, k + 1) - max(lo, k)
            if overlap > 0:
                w[i, k] = overlap / scale
    return w


def _to_gray(image: Image.Image) -> np.ndarray:
    rgb = np.asarray(image.convert("RGB"), dtype=np.float64)
    return rgb @ _LUMA


def _quantize(a: np.ndarray, quantum: float) -> np.ndarray:
    return np.round(a / quantum) * quantum


def phash64(image: Image.Image) -> int:
    """Hash a decoded raster to a 64-bit perceptual fingerprint.

    Grayscale via (0.299, 0.587, 0.114), area-average resize to 32x32,
    2-D unnormalized DCT-II, top-left 8x8 coefficient block, bit = 1 iff
    the coefficient exceeds the block median; packed row-major, MSB first.
    """
    if image.width == 0 or image.height == 0:
        raise ValueError("cannot hash a zero-area image")
    gray = _to_gray(image)
    wy = _area_weights(gray.shape[0], RESIZE_SIDE)
    wx = _area_weights(gray.shape[1], RESIZE_SIDE)
    small = _quantize(wy @ gray @ wx.T, _PIXEL_QUANTUM)
    coeffs = dct(dct(small, type=2, axis=0), type=2, axis=1)
    block = _quantize(coeffs[:HASH_SIDE, :HASH_SIDE], _COEFF_QUANTUM)
    median = np.median(block)
    bits = 0
    for value in block.ravel():
        bits = (bits << 1) | (1 if value > median else 0)
    return bits


def phash_bytes(data: bytes) -> int:
    with Image.open(io.BytesIO(data)) as img:
        return phash64(img)


def hamming(a: int, b: int) -> int:
    """Number of differing bits between two 64-bit hashes."""
    return ((a ^ b) & ((1 << 64) - 1)).bit_count()


def dedup_intra(images: list[CandidateImage], max_d: int) -> list[CandidateImage]:
    """Drop near-duplicates within one document, keeping highest resolution.

    Candidates are visited by pixel count descending (URL ascending on
    ties); one is kept iff it is more than max_d bits away from everything
    kept so far. The survivors come back in their original document order.
    """
    for img in images:
        if img.phash is None:
            raise ValueError(f"phash not computed for {img.url}")
    order = sorted(range(len(images)), key=lambda i: (-images[i].pixel_count, images[i].url))
    kept_idx: list[int] = []
    for i in order:
        h = images[i].phash
        if all(hamming(h, images[j].phash) > max_d for j in kept_idx):
            kept_idx.append(i)
    kept_idx.sort()
    return [images[i] for i in kept_idx]


def cross_marked_hashes(
    hashes: list[int],
    sample_size: int,
    dup_max: int,
    seed: int,
) -> set[int]:
    """Hash values flagged as over-represented by sampled frequency counts.

    Runs ceil(N / sample_size) rounds. Each round draws a seeded uniform
    sample (without replacement) of min(sample_size, N) hashes and flags
    every value occurring more than dup_max times in the sample. A globally
    unique hash can never be flagged.
    """
    n = len(hashes)
    if n == 0:
        return set()
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    rounds = -(-n // sample_size)
    take = min(sample_size, n)
    marked: set[int] = set()
    for _ in range(rounds):
        counts: dict[int, int] = {}
        for i in rng.choice(n, size=take, replace=False):
            h = hashes[int(i)]
            counts[h] = counts.get(h, 0) + 1
        for h, c in counts.items():
            if c > dup_max:
                marked.add(h)
    return marked


def dedup_cross(
    images: list[CandidateImage],
    sample_size: int,
    dup_max: int,
    seed: int,
) -> list[CandidateImage]:
    """Remove images whose hash is over-represented across the dataset.

    Sampling semantics are those of cross_marked_hashes; every image whose
    hash got flagged in any round is removed, the rest keep input order.
    """
    for img in images:
        if img.phash is None:
            raise ValueError(f"phash not computed for {img.url}")
    marked = cross_marked_hashes([img.phash for img in images], sample_size, dup_max, seed)
    return [img for img in images if img.phash not in marked]
