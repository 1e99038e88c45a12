"""Synthetic multi-domain segmentation data.

Scenes are simple shape compositions (rectangles, disks, triangles, one
class each) on a background, labeled pixel-exactly. A domain is the
same scene distribution pushed through a parametric appearance
transform (channel gains/offsets, contrast, blur, noise), so domains
differ in style but never in semantics: masks are identical across
domains for the same scene index.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SceneSpec",
    "DomainStyle",
    "DomainDataset",
    "DEFAULT_STYLES",
    "generate_scene",
    "apply_style",
    "build_benchmark",
    "save_datasets",
    "load_datasets",
    "IMAGE_MAGIC",
    "MASK_MAGIC",
]

IMAGE_MAGIC = b"SEGD0001"
MASK_MAGIC = b"SEGM0001"
FORMAT_VERSION = 1

# class ids: 0 background, then one per shape kind
_SHAPE_CLASSES = (1, 2, 3)  # rectangle, disk, triangle

_BASE_COLORS = {
    0: (0.20, 0.25, 0.30),
    1: (0.75, 0.30, 0.25),
    2: (0.25, 0.70, 0.30),
    3: (0.30, 0.35, 0.80),
}


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 4)  # inclusive range
    shape_size: tuple[int, int] = (12, 28)  # bounding-box side range, pixels
    color_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes != len(_SHAPE_CLASSES) + 1:
            raise ValueError("class count is background + one per shape kind")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")
        lo, hi = self.shape_size
        if lo < 2 or hi < lo:
            raise ValueError(f"bad shape_size range {self.shape_size}")


@dataclass(frozen=True)
class DomainStyle:
    """Parametric appearance transform; gains/offsets are per channel."""

    name: str
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    contrast: float = 1.0
    noise: float = 0.0
    blur: int = 1  # box-filter width; 1 disables smoothing

    def __post_init__(self):
        if any(g <= 0 for g in self.gain):
            raise ValueError("gains must be positive")
        if self.noise < 0:
            raise ValueError("noise sigma must be nonnegative")
        if self.contrast <= 0:
            raise ValueError("contrast exponent must be positive")
        if self.blur < 1 or self.blur % 2 == 0:
            raise ValueError("blur width must be an odd integer >= 1")


IDENTITY_STYLE = DomainStyle(name="identity")

DEFAULT_STYLES = (
    DomainStyle(name="neutral", noise=0.01),
    DomainStyle(
        name="warm",
        gain=(1.30, 0.95, 0.75),
        offset=(0.10, 0.02, -0.05),
        contrast=0.85,
        noise=0.015,
    ),
    DomainStyle(
        name="cool_dark",
        gain=(0.70, 0.85, 1.25),
        offset=(-0.05, 0.00, 0.08),
        contrast=1.25,
        noise=0.01,
        blur=3,
    ),
    DomainStyle(
        name="bright_soft",
        gain=(1.10, 1.15, 1.05),
        offset=(0.18, 0.15, 0.12),
        contrast=0.70,
        noise=0.02,
        blur=3,
    ),
    DomainStyle(
        name="harsh_noisy",
        gain=(0.90, 1.10, 0.85),
        offset=(-0.08, -0.05, 0.02),
        contrast=1.45,
        noise=0.035,
    ),
)


@dataclass
class DomainDataset:
    domain_id: int
    style_name: str
    images: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    masks: np.ndarray  # (n, H, W) uint8

    def __post_init__(self):
        if self.images.shape[0] != self.masks.shape[0]:
            raise ValueError("image/mask count mismatch")

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.images[i : i + 1], self.masks[i]


def _shape_mask(kind: int, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    """Boolean coverage mask of one shape on the pixel grid."""
    ys, xs = np.mgrid[0:h, 0:w]
    half = size / 2.0
    if kind == 1:  # rectangle
        return (np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)
    if kind == 2:  # disk
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= half**2
    # upward triangle via three half-plane tests
    ax, ay = cx, cy - half
    bx, by = cx - half, cy + half
    cx2, cy2 = cx + half, cy + half

    def side(px, py, qx, qy):
        return (qx - px) * (ys - py) - (qy - py) * (xs - px)

    d1, d2, d3 = side(ax, ay, bx, by), side(bx, by, cx2, cy2), side(cx2, cy2, ax, ay)
    # with y growing downward this vertex order is clockwise: interior is all-negative
    return (d1 <= 0) & (d2 <= 0) & (d3 <= 0)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One canonical (image, mask) pair; later shapes draw over earlier ones.

    Shape kinds rotate round-robin so class frequencies stay balanced.
    Returns float32 (3, H, W) in [0,1] and uint8 (H, W).
    """
    h, w = spec.height, spec.width
    image = np.empty((3, h, w), dtype=np.float64)
    bg = np.array(_BASE_COLORS[0]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    image[:] = np.clip(bg, 0.0, 1.0)[:, None, None]
    mask = np.zeros((h, w), dtype=np.uint8)

    count = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    for j in range(count):
        kind = _SHAPE_CLASSES[j % len(_SHAPE_CLASSES)]
        size = float(rng.uniform(*spec.shape_size))
        cy = float(rng.uniform(size / 2.0, h - size / 2.0))
        cx = float(rng.uniform(size / 2.0, w - size / 2.0))
        cover = _shape_mask(kind, h, w, cy, cx, size)
        color = np.array(_BASE_COLORS[kind]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        color = np.clip(color, 0.0, 1.0)
        image[:, cover] = color[:, None]
        mask[cover] = kind
    return image.astype(np.float32), mask


def _box_blur(image: np.ndarray, width: int) -> np.ndarray:
    """Separable box filter with edge padding; width must be odd."""
    if width == 1:
        return image
    pad = width // 2
    kernel = np.full(width, 1.0 / width)
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        padded = np.pad(image[c], pad, mode="edge")
        rows = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, padded)
        out[c] = np.apply_along_axis(lambda col: np.convolve(col, kernel, mode="valid"), 0, rows)
    return out


def apply_style(image: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Affine color shift, contrast exponent, smoothing, then noise; clamped to [0,1]."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3,H,W) image, got shape {x.shape}")
    gain = np.asarray(style.gain)[:, None, None]
    offset = np.asarray(style.offset)[:, None, None]
    x = gain * x + offset
    x = np.clip(x, 0.0, 1.0) ** style.contrast
    x = _box_blur(x, style.blur)
    if style.noise > 0:
        x = x + rng.normal(0.0, style.noise, x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def build_benchmark(
    num_domains: int,
    images_per_domain: int,
    spec: SceneSpec = SceneSpec(),
    styles: tuple[DomainStyle, ...] = DEFAULT_STYLES,
    seed: int = 0,
) -> list[DomainDataset]:
    """Datasets sharing one scene distribution, one style per domain.

    Scene randomness depends only on (seed, scene seed, index), so the
    same index yields the same mask in every domain; style randomness
    additionally depends on the domain id.
    """
    if num_domains < 1:
        raise ValueError("need at least one domain")
    if len(styles) < num_domains:
        raise ValueError(f"{num_domains} domains but only {len(styles)} styles")
    used = styles[:num_domains]
    if len({s.name for s in used}) != num_domains:
        raise ValueError("styles must be pairwise distinct")
    keys = [(s.gain, s.offset, s.contrast, s.noise, s.blur) for s in used]
    if len(set(keys)) != len(keys):
        raise ValueError("styles must be pairwise distinct in parameters, not just name")

    h, w = spec.height, spec.width
    datasets = []
    for d in range(num_domains):
        images = np.empty((images_per_domain, 3, h, w), dtype=np.float32)
        masks = np.empty((images_per_domain, h, w), dtype=np.uint8)
        for j in range(images_per_domain):
            scene_rng = np.random.default_rng(np.random.SeedSequence((seed, spec.seed, j)))
            canonical, mask = generate_scene(spec, scene_rng)
            style_rng = np.random.default_rng(np.random.SeedSequence((seed, spec.seed, d, j)))
            images[j] = apply_style(canonical, styles[d], style_rng)
            masks[j] = mask
        datasets.append(DomainDataset(d, styles[d].name, images, masks))
    return datasets


# --- on-disk format ---


def _write_image(path: str, image: np.ndarray) -> None:
    c, h, w = image.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", c, h, w))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def _read_image(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(8) != IMAGE_MAGIC:
            raise ValueError(f"bad image magic in {path}")
        c, h, w = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(4 * c * h * w), dtype="<f4")
        return data.reshape(c, h, w).astype(np.float32)


def _write_mask(path: str, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def _read_mask(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(8) != MASK_MAGIC:
            raise ValueError(f"bad mask magic in {path}")
        h, w = struct.unpack("<II", f.read(8))
        return np.frombuffer(f.read(h * w), dtype=np.uint8).reshape(h, w).copy()


def save_datasets(out_dir: str, datasets: list[DomainDataset]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    h, w = datasets[0].images.shape[2:]
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_shape": [3, h, w],
        "mask_shape": [h, w],
        "domains": [],
    }
    for ds in datasets:
        sub = f"domain_{ds.domain_id}"
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        for j in range(len(ds)):
            _write_image(os.path.join(out_dir, sub, f"img_{j:05d}.bin"), ds.images[j])
            _write_mask(os.path.join(out_dir, sub, f"msk_{j:05d}.bin"), ds.masks[j])
        manifest["domains"].append(
            {"id": ds.domain_id, "style": ds.style_name, "count": len(ds), "dir": sub}
        )
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_datasets(data_dir: str) -> list[DomainDataset]:
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest['format_version']}")
    datasets = []
    for dom in manifest["domains"]:
        images, masks = [], []
        for j in range(dom["count"]):
            images.append(_read_image(os.path.join(data_dir, dom["dir"], f"img_{j:05d}.bin")))
            masks.append(_read_mask(os.path.join(data_dir, dom["dir"], f"msk_{j:05d}.bin")))
        datasets.append(
            DomainDataset(
                dom["id"],
                dom["style"],
                np.stack(images) if images else np.empty((0, 3, 0, 0), np.float32),
                np.stack(masks) if masks else np.empty((0, 0, 0), np.uint8),
            )
        )
    return datasets
