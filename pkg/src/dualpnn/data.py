"""Dataset ingestion (IDX containers) and the two input encodings.

Images enter a diffractive system as zero-phase amplitude fields
(bilinear upscale to the active area, zero-pad to the simulation grid)
and an interferometric system as the central block of the image's 2-D
Fourier coefficients.

When no handwritten-digit corpus is present, ensure_dataset() renders a
deterministic synthetic one: per-class stroke skeletons drawn with
seeded affine jitter, written as standard gzipped IDX files so the
ingestion path is exercised unchanged.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np
import scipy.fft

__all__ = [
    "load_idx", "load_split", "dataset_root", "ensure_dataset",
    "preprocess_dpnn", "preprocess_mpnn", "bilinear_resize",
]

DATA_ENV = "DUALPNN_DATA"

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path):
    """Parse an IDX image/label pair into ([0,1] floats, int labels)."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise ValueError(f"load_idx: {images_path}: truncated header ({len(img)} bytes, need 16)")
    if len(lab) < 8:
        raise ValueError(f"load_idx: {labels_path}: truncated header ({len(lab)} bytes, need 8)")
    magic, n, rows, cols = struct.unpack(">iiii", img[:16])
    if magic != 2051:
        raise ValueError(f"load_idx: {images_path}: magic {magic} at offset 0, expected 2051 (images)")
    lmagic, ln = struct.unpack(">ii", lab[:8])
    if lmagic != 2049:
        raise ValueError(f"load_idx: {labels_path}: magic {lmagic} at offset 0, expected 2049 (labels)")
    need = 16 + n * rows * cols
    if len(img) < need:
        raise ValueError(f"load_idx: {images_path}: payload ends at {len(img)}, expected {need}")
    if len(lab) < 8 + ln:
        raise ValueError(f"load_idx: {labels_path}: payload ends at {len(lab)}, expected {8 + ln}")
    if n != ln:
        raise ValueError(f"load_idx: {n} images but {ln} labels")
    images = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = images.reshape(n, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=ln, offset=8).astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise ValueError(f"load_idx: labels outside [0,9]: {labels.min()}..{labels.max()}")
    return images, labels


def dataset_root(override=None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(DATA_ENV, "data"))


def load_split(root, split: str):
    """Load the train or test split from a dataset directory.

    Accepts raw or gzipped IDX files under the conventional names."""
    if split not in _FILES:
        raise ValueError(f"load_split: unknown split {split!r}")
    root = Path(root)
    paths = []
    for stem in _FILES[split]:
        plain, gz = root / stem, root / (stem + ".gz")
        if gz.exists():
            paths.append(gz)
        elif plain.exists():
            paths.append(plain)
        else:
            raise FileNotFoundError(f"load_split: missing {plain} (or .gz); set ${DATA_ENV} or run ensure_dataset")
    return load_idx(paths[0], paths[1])


# ---------------------------------------------------------------------------
# synthetic digit corpus
# ---------------------------------------------------------------------------

def _arc(cx, cy, rx, ry, a0, a1, n=40):
    t = np.linspace(np.deg2rad(a0), np.deg2rad(a1), n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(x0, y0, x1, y1, n=24):
    t = np.linspace(0.0, 1.0, n)
    return np.stack([x0 + (x1 - x0) * t, y0 + (y1 - y0) * t], axis=1)


def _skeleton(digit: int) -> np.ndarray:
    """Point cloud for one digit in a [0,1]^2 box, x right / y down.
    Angles follow the same convention (90 deg points down the page)."""
    s = {
        0: [_arc(0.5, 0.5, 0.30, 0.42, 0, 360, 80)],
        1: [_line(0.52, 0.08, 0.52, 0.92), _line(0.34, 0.26, 0.52, 0.08)],
        2: [_arc(0.5, 0.30, 0.28, 0.22, 180, 380, 40),
            _line(0.74, 0.42, 0.26, 0.90), _line(0.26, 0.90, 0.78, 0.90)],
        3: [_arc(0.46, 0.30, 0.26, 0.21, 150, 395, 40),
            _arc(0.46, 0.71, 0.28, 0.22, 325, 570, 40)],
        4: [_line(0.62, 0.08, 0.22, 0.62), _line(0.22, 0.62, 0.82, 0.62),
            _line(0.62, 0.08, 0.62, 0.92)],
        5: [_line(0.74, 0.10, 0.30, 0.10), _line(0.30, 0.10, 0.28, 0.46),
            _arc(0.48, 0.66, 0.26, 0.24, 250, 480, 40)],
        6: [_arc(0.50, 0.66, 0.26, 0.24, 0, 360, 60),
            _arc(0.78, 0.40, 0.52, 0.58, 180, 245, 30)],
        7: [_line(0.24, 0.10, 0.78, 0.10), _line(0.78, 0.10, 0.42, 0.92)],
        8: [_arc(0.5, 0.30, 0.22, 0.19, 0, 360, 50),
            _arc(0.5, 0.71, 0.27, 0.22, 0, 360, 60)],
        9: [_arc(0.50, 0.34, 0.26, 0.24, 0, 360, 60),
            _arc(0.22, 0.60, 0.52, 0.58, 300, 360, 30)],
    }[digit]
    return np.concatenate(s, axis=0)


def synth_digits(n: int, seed: int):
    """Render n jittered digits, classes cycling 0..9. Returns
    (uint8 images (n, 28, 28), int labels)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 20)))
    labels = np.arange(n) % 10
    imgs = np.zeros((n, 28, 28))
    pts_by_class = [(_skeleton(d) - 0.5) for d in range(10)]
    for i in range(n):
        pts = pts_by_class[labels[i]]
        ang = rng.uniform(-0.16, 0.16)
        scale = rng.uniform(0.88, 1.08) * np.array([rng.uniform(0.9, 1.1), 1.0])
        shear = rng.uniform(-0.12, 0.12)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        xy = pts * scale @ rot.T
        xy[:, 0] += shear * xy[:, 1]
        xy = (xy + 0.5) * 22.0 + 3.0 + rng.uniform(-1.2, 1.2, 2)
        # splat a soft 2-px brush at each sampled point
        c0 = np.floor(xy).astype(int)
        f = xy - c0
        for dy in (0, 1):
            for dx in (0, 1):
                w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                xi = np.clip(c0[:, 0] + dx, 0, 27)
                yi = np.clip(c0[:, 1] + dy, 0, 27)
                np.add.at(imgs[i], (yi, xi), w)
    imgs = np.minimum(imgs * 1.4, 1.0)
    # soften edges with a tiny separable blur
    k = np.array([0.25, 0.5, 0.25])
    imgs = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, imgs)
    imgs = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 2, imgs)
    imgs = imgs / np.maximum(imgs.max(axis=(1, 2), keepdims=True), 1e-9)
    order = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 21))).permutation(n)
    return np.round(imgs[order] * 255).astype(np.uint8), labels[order]


def _write_idx(path: Path, magic: int, dims: tuple, payload: np.ndarray):
    header = struct.pack(">i", magic) + b"".join(struct.pack(">i", d) for d in dims)
    # fixed mtime so regenerated corpora are byte-identical
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(header + payload.tobytes())


def ensure_dataset(root, train_n: int = 4000, test_n: int = 1000,
                   seed: int = 77) -> Path:
    """Create the synthetic corpus under root unless files already exist."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, n, s in (("train", train_n, seed), ("test", test_n, seed + 1)):
        img_stem, lab_stem = _FILES[split]
        if (root / (img_stem + ".gz")).exists() or (root / img_stem).exists():
            continue
        imgs, labels = synth_digits(n, s)
        _write_idx(root / (img_stem + ".gz"), 2051, imgs.shape, imgs)
        _write_idx(root / (lab_stem + ".gz"), 2049, (len(labels),),
                   labels.astype(np.uint8))
    return root


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------

def bilinear_resize(images: np.ndarray, out: int) -> np.ndarray:
    """Bilinear resample (N, H, W) -> (N, out, out), pixel-center
    (align-corners = false) convention."""
    n, h, w = images.shape
    def axis_weights(size_in, size_out):
        src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
        i0 = np.floor(src).astype(int)
        f = src - i0
        lo = np.clip(i0, 0, size_in - 1)
        hi = np.clip(i0 + 1, 0, size_in - 1)
        return lo, hi, f
    r0, r1, fr = axis_weights(h, out)
    c0, c1, fc = axis_weights(w, out)
    top = images[:, r0][:, :, c0] * (1 - fc) + images[:, r0][:, :, c1] * fc
    bot = images[:, r1][:, :, c0] * (1 - fc) + images[:, r1][:, :, c1] * fc
    return top * (1 - fr)[None, :, None] + bot * fr[None, :, None]


def preprocess_dpnn(images: np.ndarray, grid: int) -> np.ndarray:
    """Amplitude-encode images for the diffractive path: upscale to the
    grid/2 active area, zero-pad to (N, grid, grid). Zero phase
    throughout, so the output stays real."""
    if grid % 2:
        raise ValueError(f"preprocess_dpnn: grid must be even, got {grid}")
    single = images.ndim == 2
    if single:
        images = images[None]
    active = grid // 2
    up = bilinear_resize(np.asarray(images, dtype=np.float64), active)
    out = np.zeros((up.shape[0], grid, grid))
    r0 = (grid - active) // 2
    out[:, r0:r0 + active, r0:r0 + active] = up
    return out[0] if single else out


def preprocess_mpnn(images: np.ndarray, coeff_grid: int = 8,
                    normalize: bool = False) -> np.ndarray:
    """Fourier-encode images for the interferometric path.

    Unnormalized 2-D DFT, zero frequency moved to the array centre, then
    the central coeff_grid x coeff_grid block flattened row-major; the
    DC coefficient lands at block index (g/2, g/2).  normalize rescales
    each vector to unit power (off by default).
    """
    single = images.ndim == 2
    if single:
        images = images[None]
    n, h, w = images.shape
    if coeff_grid * coeff_grid > h * w:
        raise ValueError(f"preprocess_mpnn: {coeff_grid}^2 coefficients exceed the {h}x{w} image")
    spec = scipy.fft.fftshift(scipy.fft.fft2(np.asarray(images, dtype=np.complex128)),
                              axes=(-2, -1))
    r0 = h // 2 - coeff_grid // 2
    c0 = w // 2 - coeff_grid // 2
    block = spec[:, r0:r0 + coeff_grid, c0:c0 + coeff_grid]
    vec = block.reshape(n, coeff_grid * coeff_grid)
    if normalize:
        power = np.linalg.norm(vec, axis=1, keepdims=True)
        vec = vec / np.maximum(power, 1e-300)
    return vec[0] if single else vec
