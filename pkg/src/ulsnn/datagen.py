"""Synthetic 20x20 grey-scale glyph corpus with distortion transforms.

Class prototypes are random smoothed stroke patterns; training examples are
prototypes pushed through random pipelines of five transforms: line
thickening and thinning (grey-scale 3x3 cross dilation/erosion), integer
shifts up to two pixels, 3x3 box blur, and clamped uniform pixel noise.
Everything is a pure function of (parameters, seed): per-class and
per-pattern RNG streams are derived with spawn keys, so generation order
never changes results.

Dataset files: magic ``GLY1``, little-endian u32 header
(n_classes, n_patterns, width=20, height=20), then per pattern one u32 label
followed by 400 little-endian float32 pixels. Loading maps pixels [0,1] to
network inputs [-1,1] and labels to one-hot +-1 targets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .matcore import Mat32
from .nn import Batch

GLYPH_SIZE = 20
DATASET_MAGIC = b"GLY1"
TRANSFORM_KINDS = ("thicken", "thin", "shift", "blur", "noise")

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class FormatError(ValueError):
    """Corrupt or truncated dataset file."""


class MarginError(ValueError):
    """Could not generate prototypes this far apart."""


@dataclass
class GlyphImage:
    pixels: np.ndarray  # (20, 20) float32 in [0, 1]
    label: int

    def __post_init__(self):
        if self.pixels.shape != (GLYPH_SIZE, GLYPH_SIZE):
            raise ValueError(f"glyphs are {GLYPH_SIZE}x{GLYPH_SIZE}, "
                             f"got {self.pixels.shape}")


def _draw_strokes(rng, background: float) -> np.ndarray:
    """Random dilated, blurred strokes over a mid-grey background.

    Each stroke is randomly brighter or darker than the background, so the
    per-pixel expectation over a class ensemble stays near the background
    level. With background 0.5 the [-1, 1] input mapping then lands near
    zero mean per pixel, which the curvature of the training objective is
    very sensitive to; uninked pixels map to exactly 0 and stay inert.
    """
    bright = np.zeros((GLYPH_SIZE, GLYPH_SIZE), dtype=np.float32)
    dark = np.zeros((GLYPH_SIZE, GLYPH_SIZE), dtype=np.float32)
    for _ in range(int(rng.integers(3, 7))):
        mask = bright if rng.integers(0, 2) else dark
        r0, c0, r1, c1 = rng.integers(2, GLYPH_SIZE - 2, 4)
        steps = max(abs(int(r1) - int(r0)), abs(int(c1) - int(c0)), 1)
        for t in np.linspace(0.0, 1.0, 2 * steps + 1):
            r = int(round(r0 + t * (int(r1) - int(r0))))
            c = int(round(c0 + t * (int(c1) - int(c0))))
            mask[r, c] = 1.0
    bright = _box_blur(ndimage.grey_dilation(bright, footprint=_CROSS, mode="nearest"))
    dark = _box_blur(ndimage.grey_dilation(dark, footprint=_CROSS, mode="nearest"))
    img = background + (1.0 - background) * bright - background * dark
    return np.clip(img, 0.0, 1.0).astype(np.float32)


DEFAULT_BACKGROUND = 0.5


def generate_prototypes(n_classes: int, seed: int, margin: float = 1.5,
                        max_attempts: int = 64,
                        background: float = DEFAULT_BACKGROUND) -> list[GlyphImage]:
    """Deterministic, pairwise-distinct class prototypes (L2 >= margin)."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    protos: list[GlyphImage] = []
    for cls in range(n_classes):
        for attempt in range(max_attempts):
            rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(0, cls, attempt)))
            img = _draw_strokes(rng, background)
            dists = [np.linalg.norm(img - p.pixels) for p in protos]
            if not dists or min(dists) >= margin:
                protos.append(GlyphImage(img, cls))
                break
        else:
            raise MarginError(
                f"class {cls}: no prototype at L2 margin {margin} after "
                f"{max_attempts} attempts")
    return protos


def _box_blur(img: np.ndarray) -> np.ndarray:
    # 3x3 mean with edge padding, accumulated in float64 so constant images
    # are exact fixed points
    padded = np.pad(img.astype(np.float64), 1, mode="edge")
    acc = np.zeros((GLYPH_SIZE, GLYPH_SIZE), dtype=np.float64)
    for dr in range(3):
        for dc in range(3):
            acc += padded[dr:dr + GLYPH_SIZE, dc:dc + GLYPH_SIZE]
    return (acc / 9.0).astype(np.float32)


def _shifted(img: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(img)
    src_r = slice(max(0, -dr), GLYPH_SIZE - max(0, dr))
    src_c = slice(max(0, -dc), GLYPH_SIZE - max(0, dc))
    dst_r = slice(max(0, dr), GLYPH_SIZE + min(0, dr))
    dst_c = slice(max(0, dc), GLYPH_SIZE + min(0, dc))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def transform(img: GlyphImage, kind: str, rng,
              noise_amp: float = 0.2) -> GlyphImage:
    """One random distortion; the label rides along unchanged."""
    px = img.pixels
    if kind == "thicken":
        out = ndimage.grey_dilation(px, footprint=_CROSS, mode="nearest")
    elif kind == "thin":
        out = ndimage.grey_erosion(px, footprint=_CROSS, mode="nearest")
    elif kind == "shift":
        dr, dc = (int(v) for v in rng.integers(-2, 3, 2))
        out = _shifted(px, dr, dc)
    elif kind == "blur":
        out = _box_blur(px)
    elif kind == "noise":
        out = px + rng.uniform(-noise_amp, noise_amp,
                               px.shape).astype(np.float32)
    else:
        raise ValueError(f"unknown transform {kind!r}")
    return GlyphImage(np.clip(out, 0.0, 1.0).astype(np.float32), img.label)


def generate_patterns(n_classes: int, per_class: int,
                      transform_mix=TRANSFORM_KINDS, seed: int = 0,
                      noise_amp: float = 0.15, margin: float = 1.5,
                      background: float = DEFAULT_BACKGROUND,
                      start_index: int = 0):
    """All pattern pixels (n x 400 in [0,1]) plus labels, round-robin classes.

    Pattern i draws its transform pipeline from a stream keyed by
    (seed, start_index + i), so a held-out set generated with a start_index
    past the training count shares the class prototypes but never a
    transform draw.
    """
    protos = generate_prototypes(n_classes, seed, margin=margin,
                                 background=background)
    n = n_classes * per_class
    pixels = np.empty((n, GLYPH_SIZE * GLYPH_SIZE), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint32)
    mix = tuple(transform_mix)
    for kind in mix:
        if kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform {kind!r} in mix")
    for i in range(n):
        cls = i % n_classes
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(1, start_index + i)))
        img = protos[cls]
        for kind in rng.choice(mix, size=int(rng.integers(1, 3))):
            img = transform(img, str(kind), rng, noise_amp=noise_amp)
        pixels[i] = img.pixels.ravel()
        labels[i] = cls
    return pixels, labels


def batch_from_patterns(pixels: np.ndarray, labels: np.ndarray,
                        n_classes: int) -> tuple[Batch, np.ndarray]:
    """Map [0,1] pixels to [-1,1] inputs and labels to +-1 one-hot targets."""
    x = (pixels * np.float32(2.0) - np.float32(1.0)).astype(np.float32)
    t = np.full((len(labels), n_classes), -1.0, dtype=np.float32)
    t[np.arange(len(labels)), labels.astype(np.int64)] = 1.0
    return Batch(Mat32.from_array(x), Mat32.from_array(t)), labels.astype(np.int64)


def build_dataset(path, n_classes: int, per_class: int,
                  transform_mix=TRANSFORM_KINDS, seed: int = 0,
                  noise_amp: float = 0.15, margin: float = 1.5,
                  background: float = DEFAULT_BACKGROUND,
                  start_index: int = 0) -> int:
    """Generate and write a dataset file; returns the pattern count."""
    pixels, labels = generate_patterns(n_classes, per_class, transform_mix,
                                       seed, noise_amp, margin, background,
                                       start_index)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", n_classes, len(labels),
                             GLYPH_SIZE, GLYPH_SIZE))
        for i in range(len(labels)):
            fh.write(struct.pack("<I", int(labels[i])))
            fh.write(pixels[i].astype("<f4").tobytes())
    return len(labels)


def load_dataset(path) -> tuple[Batch, np.ndarray]:
    """Read a dataset file back into a Batch plus integer labels."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise FormatError("truncated header")
        n_classes, n_patterns, width, height = struct.unpack("<IIII", header)
        if (width, height) != (GLYPH_SIZE, GLYPH_SIZE):
            raise FormatError(f"unsupported glyph size {width}x{height}")
        if n_patterns < n_classes or n_classes < 2:
            raise FormatError(f"inconsistent header: {n_classes} classes, "
                              f"{n_patterns} patterns")
        per = 4 + 4 * width * height
        body = fh.read(per * n_patterns + 1)
        if len(body) != per * n_patterns:
            raise FormatError("truncated or oversized pattern payload")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(n_patterns, per)
    labels = raw[:, :4].copy().view("<u4").reshape(n_patterns)
    if labels.max(initial=0) >= n_classes:
        raise FormatError("label outside class range")
    pixels = raw[:, 4:].copy().view("<f4").reshape(n_patterns, width * height)
    return batch_from_patterns(pixels.astype(np.float32), labels, n_classes)
