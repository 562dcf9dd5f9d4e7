"""Handwritten-digit corpus management.

Training and evaluation expect MNIST-layout IDX files (60K/10K, 28x28).
When the official files are present in the data directory they are used
as-is. When they are not, a deterministic stand-in corpus is synthesized
from the 1797 real handwritten glyphs bundled with scikit-learn: glyphs are
upsampled to 20x20, centered on a 28x28 canvas, and expanded with seeded
random affine distortions, intensity jitter, and pixel noise. Base glyphs
are split between train and test pools before expansion, so the test set
shows writing the training set never saw.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data import ImageDataset, load_mnist, write_idx_images, write_idx_labels

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

# distortion ranges for the synthetic corpus
ROTATE_DEG = 11.0
LOG_SCALE = 0.13
SHEAR = 0.10
SHIFT_PX = 1.8
NOISE_SIGMA = 0.02

DEFAULT_DATA_DIR = Path(__file__).resolve().parents[2] / "data"


def data_dir() -> Path:
    return Path(os.environ.get("DBE_DATA_DIR", DEFAULT_DATA_DIR))


def _find(dirpath: Path, stem: str):
    for name in (stem, stem + ".gz"):
        p = dirpath / name
        if p.exists():
            return p
    return None


def locate_corpus(dirpath: Path):
    """Return the four IDX paths under dirpath, or None if any is missing."""
    paths = tuple(
        _find(dirpath, stem)
        for stem in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)
    )
    return paths if all(paths) else None


def _upscaled_glyphs():
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    raw = load_digits()
    glyphs = np.empty((len(raw.images), 20, 20), dtype=np.float32)
    for i, img in enumerate(raw.images):
        up = zoom(img / 16.0, 2.5, order=3)
        glyphs[i] = np.clip(up, 0.0, 1.0)
    return glyphs, raw.target.astype(np.int64)


def _warp_batch(glyphs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply an independent random affine map to each 28x28 image by
    inverse-mapped bilinear sampling."""
    n, h, w = glyphs.shape
    theta = np.deg2rad(rng.uniform(-ROTATE_DEG, ROTATE_DEG, size=n))
    scale = np.exp(rng.uniform(-LOG_SCALE, LOG_SCALE, size=n))
    shear = rng.uniform(-SHEAR, SHEAR, size=n)
    tx = rng.uniform(-SHIFT_PX, SHIFT_PX, size=n)
    ty = rng.uniform(-SHIFT_PX, SHIFT_PX, size=n)

    cos, sin = np.cos(theta) / scale, np.sin(theta) / scale
    # inverse map: rotation/scale then shear, applied around the center
    inv = np.empty((n, 2, 2), dtype=np.float64)
    inv[:, 0, 0] = cos
    inv[:, 0, 1] = sin + shear * cos
    inv[:, 1, 0] = -sin
    inv[:, 1, 1] = cos - shear * sin

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = np.stack([yy.ravel() - (h - 1) / 2, xx.ravel() - (w - 1) / 2])
    src = np.einsum("nij,jp->nip", inv, grid)
    src[:, 0] += (h - 1) / 2 - ty[:, None]
    src[:, 1] += (w - 1) / 2 - tx[:, None]

    y0 = np.floor(src[:, 0]).astype(np.int64)
    x0 = np.floor(src[:, 1]).astype(np.int64)
    fy = (src[:, 0] - y0).astype(np.float32)
    fx = (src[:, 1] - x0).astype(np.float32)

    flat = glyphs.reshape(n, h * w)
    out = np.zeros((n, h * w), dtype=np.float32)
    for dy in (0, 1):
        for dx in (0, 1):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            wy = fy if dy else 1.0 - fy
            wx = fx if dx else 1.0 - fx
            out += np.take_along_axis(flat, idx, axis=1) * (wy * wx * valid)
    return out.reshape(n, h, w)


def _expand(glyphs, labels, pool_idx, count, rng):
    """Draw `count` distorted samples whose bases come from pool_idx."""
    pool_by_class = [pool_idx[labels[pool_idx] == c] for c in range(10)]
    cls = rng.integers(0, 10, size=count)
    picks = np.empty(count, dtype=np.int64)
    for c in range(10):
        members = np.flatnonzero(cls == c)
        picks[members] = rng.choice(pool_by_class[c], size=len(members))

    canvas = np.zeros((count, 28, 28), dtype=np.float32)
    canvas[:, 4:24, 4:24] = glyphs[picks]
    images = np.empty_like(canvas)
    for lo in range(0, count, 4096):
        hi = min(lo + 4096, count)
        batch = _warp_batch(canvas[lo:hi], rng)
        gain = rng.uniform(0.85, 1.0, size=(hi - lo, 1, 1)).astype(np.float32)
        batch = batch * gain + rng.normal(
            0.0, NOISE_SIGMA, size=batch.shape
        ).astype(np.float32)
        images[lo:hi] = np.clip(batch, 0.0, 1.0)
    return np.round(images * 255.0).astype(np.uint8), cls.astype(np.uint8)


def synthesize_digit_corpus(
    out_dir, n_train: int = 60000, n_test: int = 10000, seed: int = 7
) -> tuple:
    """Write the four IDX files for the stand-in corpus and return their
    paths. Deterministic for a fixed (seed, n_train, n_test)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    glyphs, labels = _upscaled_glyphs()
    rng = np.random.default_rng(seed)

    # hold out 20% of the base glyphs, per class, for the test side
    test_pool = []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        test_pool.append(rng.permutation(members)[: max(1, len(members) // 5)])
    test_pool = np.sort(np.concatenate(test_pool))
    train_mask = np.ones(len(labels), dtype=bool)
    train_mask[test_pool] = False
    train_pool = np.flatnonzero(train_mask)

    train_imgs, train_lbls = _expand(glyphs, labels, train_pool, n_train, rng)
    test_imgs, test_lbls = _expand(glyphs, labels, test_pool, n_test, rng)

    paths = (
        out_dir / TRAIN_IMAGES,
        out_dir / TRAIN_LABELS,
        out_dir / TEST_IMAGES,
        out_dir / TEST_LABELS,
    )
    write_idx_images(paths[0], train_imgs)
    write_idx_labels(paths[1], train_lbls)
    write_idx_images(paths[2], test_imgs)
    write_idx_labels(paths[3], test_lbls)
    return paths


def load_train_test(dirpath=None) -> tuple[ImageDataset, ImageDataset, str]:
    """Load the digit corpus, preferring real MNIST-layout files in the data
    directory and synthesizing the stand-in corpus once otherwise.

    Returns (train, test, source) where source is "idx-files" when existing
    files were found and "synthetic" when the stand-in was generated.
    """
    base = Path(dirpath) if dirpath is not None else data_dir()
    found = locate_corpus(base)
    source = "idx-files"
    if found is None:
        synth_dir = base / "synthetic-digits"
        found = locate_corpus(synth_dir)
        if found is None:
            found = synthesize_digit_corpus(synth_dir)
        source = "synthetic"
    train = load_mnist(found[0], found[1], split="train")
    test = load_mnist(found[2], found[3], split="test")
    return train, test, source
