"""Fingerprint images, pore annotations, label maps, patches, and synthesis.

Coordinates are (row, col) integer pixel positions throughout. Pore label
images encode closeness to the nearest annotated pore: a pixel at Euclidean
distance d from its nearest pore gets 1 - d/radius when d < radius and 0
otherwise, so each pore sits under a small cone of unit peak height.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import ndimage

DOMAIN_SOURCE = 0
DOMAIN_TARGET = 1
_DOMAIN_NAMES = {"source": DOMAIN_SOURCE, "target": DOMAIN_TARGET}

LABEL_RADIUS = 5.0


class PoreFileError(ValueError):
    """A .pores annotation file is malformed."""


class PoreBoundsError(PoreFileError):
    """A pore annotation lies outside its image."""


class UnsupportedImageError(ValueError):
    """Image file has a format or bit depth this package does not handle."""


def assign_domain(tag: str | int) -> int:
    if isinstance(tag, str):
        try:
            return _DOMAIN_NAMES[tag]
        except KeyError:
            raise ValueError(f"domain must be 'source' or 'target', got {tag!r}") from None
    if tag not in (DOMAIN_SOURCE, DOMAIN_TARGET):
        raise ValueError(f"domain must be {DOMAIN_SOURCE} or {DOMAIN_TARGET}, got {tag!r}")
    return int(tag)


def domain_name(tag: int) -> str:
    return "source" if tag == DOMAIN_SOURCE else "target"


@dataclass
class FingerprintImage:
    pixels: np.ndarray               # (H, W) uint8 or uint16
    pores: np.ndarray | None = None  # (k, 2) int rows/cols, or None if unlabeled
    domain: int = DOMAIN_SOURCE
    name: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.pores is not None:
            self.pores = np.asarray(self.pores, dtype=np.int64).reshape(-1, 2)
            _check_bounds(self.pores, self.pixels.shape, self.name or "<image>")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def _check_bounds(pores: np.ndarray, shape: tuple[int, int], where: str) -> None:
    h, w = shape
    bad = (pores[:, 0] < 0) | (pores[:, 0] >= h) | (pores[:, 1] < 0) | (pores[:, 1] >= w)
    if bad.any():
        r, c = pores[np.argmax(bad)]
        raise PoreBoundsError(f"{where}: pore ({r}, {c}) outside {h}x{w} image")


# ---------------------------------------------------------------------------
# label images

def pore_label_image(shape: tuple[int, int], pores: np.ndarray | None,
                     radius: float = LABEL_RADIUS, dtype=np.float32) -> np.ndarray:
    """Ground-truth intensity map: 1 at pore centers, falling linearly to 0
    at distance radius. No pores gives an all-zero map."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    out = np.zeros(shape, dtype=dtype)
    if pores is None or len(pores) == 0:
        return out
    pores = np.asarray(pores, dtype=np.int64).reshape(-1, 2)
    _check_bounds(pores, shape, "label")
    occupied = np.ones(shape, dtype=bool)
    occupied[pores[:, 0], pores[:, 1]] = False
    dist = ndimage.distance_transform_edt(occupied)
    np.clip(1.0 - dist / radius, 0.0, 1.0, out=out)
    return out


# ---------------------------------------------------------------------------
# patch extraction

def patch_grid(shape: tuple[int, int], size: int, step: int) -> np.ndarray:
    """(k, 2) top-left offsets of every size x size window at the given step."""
    h, w = shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    rows = np.arange(0, h - size + 1, step)
    cols = np.arange(0, w - size + 1, step)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass
class Patches:
    """Dense overlapping patches; windows is a zero-copy strided view."""

    windows: np.ndarray          # (nr, nc, size, size), view into the image
    offsets: np.ndarray          # (nr * nc, 2)
    size: int
    step: int
    image_shape: tuple[int, int]

    def __len__(self) -> int:
        return self.offsets.shape[0]

    def stack(self) -> np.ndarray:
        return self.windows.reshape(-1, self.size, self.size)


def extract_patches_overlapping(image: np.ndarray, size: int = 80,
                                step: int = 10) -> Patches:
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    offsets = patch_grid(image.shape, size, step)
    windows = sliding_window_view(image, (size, size))[::step, ::step]
    assert windows.shape[0] * windows.shape[1] == len(offsets)
    return Patches(windows, offsets, size, step, image.shape)


def _reflect_indices(n: int, total: int) -> np.ndarray:
    # mirror-without-edge-repeat indexing, valid for any pad amount
    if n == 1:
        return np.zeros(total, dtype=np.intp)
    period = 2 * n - 2
    idx = np.arange(total, dtype=np.intp) % period
    return np.minimum(idx, period - idx)


def reflect_pad_to_multiple(image: np.ndarray, size: int) -> np.ndarray:
    """Extend the image by mirror reflection so both dims divide by size."""
    h, w = image.shape
    ph = -h % size
    pw = -w % size
    if ph == 0 and pw == 0:
        return image
    return image[np.ix_(_reflect_indices(h, h + ph), _reflect_indices(w, w + pw))]


@dataclass
class TiledPatches:
    """Non-overlapping tiling of a reflect-padded image, with reassembly."""

    tiles: np.ndarray            # (k, size, size)
    grid: tuple[int, int]
    size: int
    image_shape: tuple[int, int]

    def __len__(self) -> int:
        return self.tiles.shape[0]

    def stitch(self, maps: np.ndarray) -> np.ndarray:
        """Reassemble per-tile maps and crop back to the original image size."""
        gr, gc = self.grid
        if maps.shape != (gr * gc, self.size, self.size):
            raise ValueError(f"expected {(gr * gc, self.size, self.size)} maps, "
                             f"got {maps.shape}")
        full = maps.reshape(gr, gc, self.size, self.size) \
                   .transpose(0, 2, 1, 3) \
                   .reshape(gr * self.size, gc * self.size)
        h, w = self.image_shape
        return full[:h, :w]


def extract_patches_nonoverlapping(image: np.ndarray, size: int = 80) -> TiledPatches:
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    padded = reflect_pad_to_multiple(image, size)
    gr, gc = padded.shape[0] // size, padded.shape[1] // size
    tiles = padded.reshape(gr, size, gc, size).transpose(0, 2, 1, 3) \
                  .reshape(gr * gc, size, size)
    return TiledPatches(tiles, (gr, gc), size, image.shape)


# ---------------------------------------------------------------------------
# pixel scaling

def to_unit(pixels: np.ndarray) -> np.ndarray:
    """Map stored pixel values to float32 in [0, 1]."""
    if pixels.dtype == np.uint8:
        return pixels.astype(np.float32) / 255.0
    if pixels.dtype == np.uint16:
        return pixels.astype(np.float32) / 65535.0
    if np.issubdtype(pixels.dtype, np.floating):
        return pixels.astype(np.float32)
    raise UnsupportedImageError(f"cannot scale dtype {pixels.dtype}")


# ---------------------------------------------------------------------------
# .pores annotation files: one "row col" integer pair per line

def load_ground_truth(path: str, image_shape: tuple[int, int] | None = None) -> np.ndarray:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise PoreFileError(f"{path}:{lineno}: expected 'row col', got {text!r}")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise PoreFileError(
                    f"{path}:{lineno}: non-integer coordinate in {text!r}") from None
    pores = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    if image_shape is not None:
        _check_bounds(pores, image_shape, path)
    return pores


def write_pores(path: str, pores: np.ndarray) -> None:
    pores = np.asarray(pores, dtype=np.int64).reshape(-1, 2)
    with open(path, "w") as f:
        for r, c in pores:
            f.write(f"{r} {c}\n")


# ---------------------------------------------------------------------------
# image IO: binary PGM (8- and 16-bit) and PNG

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pgm_read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    m = _PGM_TOKEN.match(data, pos)
    if m is None:
        raise UnsupportedImageError("truncated PGM header")
    return m.group(1), m.end()


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _pgm_read_token(data, 0)
    if magic != b"P5":
        raise UnsupportedImageError(f"{path}: not a binary PGM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _pgm_read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise UnsupportedImageError(f"{path}: bad PGM header field {tok!r}") from None
    w, h, maxval = fields
    if not (0 < maxval < 65536):
        raise UnsupportedImageError(f"{path}: PGM maxval {maxval} out of range")
    pos += 1  # single whitespace byte after maxval
    if maxval < 256:
        dtype, itemsize = np.uint8, 1
    else:
        dtype, itemsize = np.dtype(">u2"), 2  # two-byte samples are big-endian
    need = h * w * itemsize
    if len(data) - pos < need:
        raise UnsupportedImageError(f"{path}: PGM pixel data truncated")
    pixels = np.frombuffer(data, dtype=dtype, count=h * w, offset=pos).reshape(h, w)
    return pixels.astype(np.uint16) if itemsize == 2 else pixels.copy()


def write_pgm(path: str, pixels: np.ndarray, comment: str | None = None) -> None:
    if pixels.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if pixels.dtype == np.uint8:
        maxval, payload = 255, pixels.tobytes()
    elif pixels.dtype == np.uint16:
        maxval, payload = 65535, pixels.astype(">u2").tobytes()
    else:
        raise UnsupportedImageError(f"cannot write dtype {pixels.dtype} as PGM")
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode() + b"\n"
    header += f"{pixels.shape[1]} {pixels.shape[0]}\n{maxval}\n".encode()
    with open(path, "wb") as f:
        f.write(header + payload)


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.uint8)
        if img.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.int64)
            if arr.min() < 0 or arr.max() > 65535:
                raise UnsupportedImageError(f"{path}: PNG values exceed 16-bit range")
            return arr.astype(np.uint16)
        raise UnsupportedImageError(f"{path}: unsupported PNG mode {img.mode!r}")


def write_png(path: str, pixels: np.ndarray) -> None:
    if pixels.dtype == np.uint8:
        Image.fromarray(pixels, mode="L").save(path)
    elif pixels.dtype == np.uint16:
        Image.fromarray(pixels.astype(np.int32), mode="I").convert("I;16").save(path)
    else:
        raise UnsupportedImageError(f"cannot write dtype {pixels.dtype} as PNG")


def load_image(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".png":
        return read_png(path)
    raise UnsupportedImageError(f"{path}: unsupported image extension {ext!r}")


def write_image(path: str, pixels: np.ndarray, comment: str | None = None) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        write_pgm(path, pixels, comment)
    elif ext == ".png":
        write_png(path, pixels)
    else:
        raise UnsupportedImageError(f"{path}: unsupported image extension {ext!r}")


# ---------------------------------------------------------------------------
# dataset manifests: JSON list of {"image", "pores" (optional), "domain"}

@dataclass
class ManifestEntry:
    image: str
    pores: str | None
    domain: int


def load_manifest(path: str) -> list[ManifestEntry]:
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "image" not in item:
            raise ValueError(f"{path}: entry {i} needs an 'image' key")
        image = os.path.join(base, item["image"])
        pores = item.get("pores")
        if pores is not None:
            pores = os.path.join(base, pores)
        entries.append(ManifestEntry(image, pores, assign_domain(item.get("domain", "source"))))
    return entries


def save_manifest(path: str, entries: list[dict]) -> None:
    with open(path, "w") as f:
        json.dump(entries, f, indent=2)
        f.write("\n")


def load_entry(entry: ManifestEntry) -> FingerprintImage:
    pixels = load_image(entry.image)
    pores = None
    if entry.pores is not None:
        pores = load_ground_truth(entry.pores, pixels.shape)
    return FingerprintImage(pixels, pores, entry.domain,
                            name=os.path.basename(entry.image))


# ---------------------------------------------------------------------------
# training samples

@dataclass
class DomainSample:
    """One training patch: unit-scaled pixels, its label map when labeled."""

    patch: np.ndarray              # (size, size) float32 in [0, 1]
    label: np.ndarray | None       # (size, size) float32, None for unlabeled
    domain: int = DOMAIN_SOURCE


def labeled_patches(image: FingerprintImage, size: int, step: int,
                    radius: float = LABEL_RADIUS) -> list[DomainSample]:
    """Overlapping patches paired with matching crops of the label image."""
    if image.pores is None:
        raise ValueError("labeled_patches needs ground-truth pores")
    unit = to_unit(image.pixels)
    label = pore_label_image(image.shape, image.pores, radius)
    samples = []
    for r, c in patch_grid(image.shape, size, step):
        samples.append(DomainSample(np.ascontiguousarray(unit[r:r + size, c:c + size]),
                                    np.ascontiguousarray(label[r:r + size, c:c + size]),
                                    image.domain))
    return samples


def unlabeled_patches(image: FingerprintImage, size: int) -> list[DomainSample]:
    """Non-overlapping tiles with no labels, for the unannotated domain."""
    tiled = extract_patches_nonoverlapping(to_unit(image.pixels), size)
    return [DomainSample(np.ascontiguousarray(t), None, image.domain)
            for t in tiled.tiles]


# ---------------------------------------------------------------------------
# synthetic fingerprints

@dataclass(frozen=True)
class SynthConfig:
    """Oriented-sinusoid fingerprint with bright pores on ridge crests.

    Ridges are dark (base_level - ridge_contrast at crest centers), valleys
    bright; each pore adds an elliptical Gaussian bump of peak pore_gain at
    an integer pixel on a crest. Distinct sensors are modeled by varying
    period, contrast, brightness, and noise between configs.
    """

    height: int = 240
    width: int = 320
    ridge_period: float = 9.0
    orientation: float = 0.35
    orientation_wobble: float = 0.25
    wobble_scale: float = 0.011
    n_pores: int = 60
    pore_radius: float = 2.2
    pore_aspect: float = 0.75
    pore_gain: float = 110.0
    crest_threshold: float = 0.985
    min_separation: float = 10.0
    margin: int = 12
    base_level: float = 140.0
    ridge_contrast: float = 75.0
    noise_sigma: float = 6.0

    def __post_init__(self):
        if self.height <= 2 * self.margin or self.width <= 2 * self.margin:
            raise ValueError("margin leaves no room for pores")
        if self.n_pores < 0 or self.ridge_period <= 0 or self.pore_radius <= 0:
            raise ValueError("bad synthesis parameters")


def _ridge_field(cfg: SynthConfig, rng: np.random.Generator):
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    wobble_dir = rng.uniform(0, 2 * np.pi)
    wobble_phase = rng.uniform(0, 2 * np.pi)
    carrier = xx * np.cos(wobble_dir) + yy * np.sin(wobble_dir)
    theta = cfg.orientation + cfg.orientation_wobble * np.sin(
        cfg.wobble_scale * 2 * np.pi * carrier + wobble_phase)
    phase = (2 * np.pi / cfg.ridge_period) * (xx * np.cos(theta) + yy * np.sin(theta))
    return np.cos(phase), theta


def _place_pores(cfg: SynthConfig, crest: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    candidates = np.argwhere(crest)
    inside = ((candidates[:, 0] >= cfg.margin)
              & (candidates[:, 0] < cfg.height - cfg.margin)
              & (candidates[:, 1] >= cfg.margin)
              & (candidates[:, 1] < cfg.width - cfg.margin))
    candidates = candidates[inside]
    placed: list[np.ndarray] = []
    min_sq = cfg.min_separation ** 2
    # one greedy pass is exhaustive: a candidate rejected against a prefix of
    # the placed set stays rejected as the set grows
    for i in rng.permutation(len(candidates)):
        cand = candidates[i]
        if all(((cand - p) ** 2).sum() >= min_sq for p in placed):
            placed.append(cand)
            if len(placed) == cfg.n_pores:
                break
    if len(placed) < cfg.n_pores:
        raise RuntimeError(
            f"placed only {len(placed)}/{cfg.n_pores} pores; loosen min_separation "
            "or lower n_pores")
    return np.array(sorted(map(tuple, placed)), dtype=np.int64).reshape(-1, 2)


def synth_fingerprint(cfg: SynthConfig, seed: int, domain: int = DOMAIN_SOURCE,
                      index: int = 0) -> FingerprintImage:
    """Deterministic synthetic print; (seed, domain, index) fixes every pixel."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, domain, index]))
    ridge, theta = _ridge_field(cfg, rng)
    image = cfg.base_level - cfg.ridge_contrast * ridge
    pores = _place_pores(cfg, ridge > cfg.crest_threshold, rng)

    sig_u = cfg.pore_radius
    sig_v = cfg.pore_radius * cfg.pore_aspect
    reach = int(np.ceil(4 * sig_u))
    for r, c in pores:
        r0, r1 = max(0, r - reach), min(cfg.height, r + reach + 1)
        c0, c1 = max(0, c - reach), min(cfg.width, c + reach + 1)
        yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
        th = theta[r, c]
        du, dv = np.cos(th), np.sin(th)
        dy, dx = yy - r, xx - c
        u = dx * du + dy * dv          # along the ridge
        v = -dx * dv + dy * du         # across the ridge
        image[r0:r1, c0:c1] += cfg.pore_gain * np.exp(
            -0.5 * ((u / sig_u) ** 2 + (v / sig_v) ** 2))

    image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return FingerprintImage(pixels, pores, domain, name=f"synth-{domain}-{index:03d}")


def synth_dataset(cfg: SynthConfig, n_images: int, seed: int,
                  domain: int = DOMAIN_SOURCE, start: int = 0) -> list[FingerprintImage]:
    """n_images prints at consecutive indices; disjoint starts give disjoint
    deterministic splits (train/validation/test) from one seed."""
    return [synth_fingerprint(cfg, seed, domain, start + i) for i in range(n_images)]


def synth_domain_pair(source_cfg: SynthConfig, target_cfg: SynthConfig,
                      n_source: int, n_target: int, seed: int
                      ) -> tuple[list[FingerprintImage], list[FingerprintImage]]:
    """Matched source/target datasets with a controlled sensor shift."""
    return (synth_dataset(source_cfg, n_source, seed, DOMAIN_SOURCE),
            synth_dataset(target_cfg, n_target, seed, DOMAIN_TARGET))
