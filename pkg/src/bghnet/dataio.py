"""Loading, preprocessing, augmentation, splitting and synthetic data.

Images are float32 arrays of shape (3, H, W) in [0, 1]; masks are uint8
arrays of shape (H, W) holding 0/1. On disk a dataset is
``<root>/images/<id>.png`` plus ``<root>/masks/<id>.png`` (8-bit masks,
0 background / 255 foreground).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import InputError


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    identifier: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise InputError(f"{self.identifier}: image must be 3 x H x W, got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise InputError(
                f"{self.identifier}: image extent {self.image.shape[1:]} != mask extent {self.mask.shape}")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    arr = np.asarray(_open(Path(path)).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    arr = np.asarray(_open(Path(path)).convert("L"))
    return (arr > 127).astype(np.uint8)


def load_sample(image_path, mask_path, identifier: str | None = None) -> Sample:
    image = load_image(image_path)
    mask = load_mask(mask_path)
    return Sample(image, mask, identifier or Path(image_path).stem)


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path)


def list_ids(root) -> List[str]:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise OSError(f"{root} must contain images/ and masks/ directories")
    ids = sorted(p.stem for p in img_dir.glob("*.png"))
    missing = [i for i in ids if not (mask_dir / f"{i}.png").exists()]
    if missing:
        raise OSError(f"{root}: masks missing for {missing[:5]}")
    return ids


def load_dataset(root, ids: Sequence[str] | None = None) -> List[Sample]:
    root = Path(root)
    ids = list_ids(root) if ids is None else list(ids)
    return [load_sample(root / "images" / f"{i}.png", root / "masks" / f"{i}.png", i) for i in ids]


# -- geometry ---------------------------------------------------------------

def _resize(image: np.ndarray, mask: np.ndarray, h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    if image.shape[1:] == (h, w):
        return image, mask
    img = F.interpolate(torch.from_numpy(image)[None], size=(h, w), mode="bilinear", align_corners=False)
    msk = F.interpolate(torch.from_numpy(mask)[None, None].float(), size=(h, w), mode="nearest")
    return img[0].numpy(), msk[0, 0].numpy().astype(np.uint8)


def resize_shortest(s: Sample, target: int) -> Sample:
    """Scale so the shortest side equals ``target``, keeping the aspect ratio."""
    h, w = s.mask.shape
    scale = target / min(h, w)
    nh, nw = max(target, round(h * scale)), max(target, round(w * scale))
    image, mask = _resize(s.image, s.mask, nh, nw)
    return Sample(image, mask, s.identifier)


def crop(s: Sample, top: int, left: int, size: int) -> Sample:
    return Sample(np.ascontiguousarray(s.image[:, top:top + size, left:left + size]),
                  np.ascontiguousarray(s.mask[top:top + size, left:left + size]), s.identifier)


def preprocess_train(s: Sample, target: int = 512, rng: np.random.Generator | None = None) -> Sample:
    """Shortest side to ``target``, then a uniformly random target x target crop."""
    rng = rng if rng is not None else np.random.default_rng()
    s = resize_shortest(s, target)
    h, w = s.mask.shape
    top = int(rng.integers(0, h - target + 1))
    left = int(rng.integers(0, w - target + 1))
    return crop(s, top, left, target)


def preprocess_test(s: Sample, target: int = 512) -> Sample:
    """Shortest side to ``target``, then a center crop."""
    s = resize_shortest(s, target)
    h, w = s.mask.shape
    return crop(s, (h - target) // 2, (w - target) // 2, target)


def rotate(s: Sample, angle: float) -> Sample:
    """Rotate image (bilinear) and mask (nearest) jointly, zero fill outside."""
    quarter = angle / 90.0
    if quarter == round(quarter):
        k = int(round(quarter)) % 4
        image = np.ascontiguousarray(np.rot90(s.image, k, axes=(1, 2)))
        mask = np.ascontiguousarray(np.rot90(s.mask, k))
        return Sample(image, mask, s.identifier)
    image = ndimage.rotate(s.image, angle, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0)
    mask = ndimage.rotate(s.mask, angle, axes=(0, 1), reshape=False, order=0, mode="constant", cval=0)
    return Sample(np.clip(image, 0, 1).astype(np.float32), mask.astype(np.uint8), s.identifier)


def augment_rotate(s: Sample, angle_degrees: float = 30.0, rng: np.random.Generator | None = None) -> Sample:
    if angle_degrees == 0:
        return s
    rng = rng if rng is not None else np.random.default_rng()
    return rotate(s, float(rng.uniform(-angle_degrees, angle_degrees)))


def split(samples: Sequence, spec: SplitSpec = SplitSpec()):
    """Deterministic shuffled train/test partition by identifier.

    Accepts ``Sample`` objects or bare identifier strings.
    """
    if len(samples) == 0:
        raise InputError("cannot split an empty dataset")
    key = (lambda s: s) if isinstance(samples[0], str) else (lambda s: s.identifier)
    ordered = sorted(samples, key=key)
    perm = np.random.default_rng(spec.seed).permutation(len(ordered))
    n_train = int(round(spec.train_fraction * len(ordered)))
    train = [ordered[i] for i in perm[:n_train]]
    test = [ordered[i] for i in perm[n_train:]]
    return train, test


# -- synthetic data ---------------------------------------------------------

def value_noise(size: int, rng: np.random.Generator, cells: Sequence[int] = (4, 8, 16)) -> np.ndarray:
    """Sum of bilinearly upsampled random lattices, normalized to [0, 1]."""
    out = np.zeros((size, size), dtype=np.float64)
    amp = 1.0
    for c in cells:
        lattice = rng.random((c + 1, c + 1))
        coords = np.linspace(0, c, size)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        out += amp * ndimage.map_coordinates(lattice, [yy, xx], order=1)
        amp *= 0.5
    out -= out.min()
    return out / max(out.max(), 1e-12)


def ellipse_mask(size: int, cy: float, cx: float, a: float, b: float, phi: float) -> np.ndarray:
    """Pixels whose centers fall inside the rotated ellipse."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(phi), math.sin(phi)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def synth_sample(size: int, rng: np.random.Generator, identifier: str = "") -> Sample:
    a = rng.uniform(size / 6, size / 3)
    b = rng.uniform(size / 6, size / 3)
    phi = rng.uniform(0, math.pi)
    # half-extents of the rotated ellipse, so it stays inside the frame
    ex = math.sqrt((a * math.cos(phi)) ** 2 + (b * math.sin(phi)) ** 2)
    ey = math.sqrt((a * math.sin(phi)) ** 2 + (b * math.cos(phi)) ** 2)
    cx = rng.uniform(ex + 1, size - 1 - ex)
    cy = rng.uniform(ey + 1, size - 1 - ey)
    mask = ellipse_mask(size, cy, cx, a, b, phi)

    bg_tint = rng.uniform(0.2, 0.6, size=3)
    fg_tint = np.array([rng.uniform(0.7, 0.95), rng.uniform(0.25, 0.45), rng.uniform(0.3, 0.5)])
    bg = np.stack([value_noise(size, rng) for _ in range(3)])
    fg_tex = value_noise(size, rng, cells=(8, 16))
    background = 0.5 * bg + 0.5 * bg_tint[:, None, None]
    foreground = 0.75 * fg_tint[:, None, None] + 0.25 * fg_tex[None]
    image = np.where(mask[None] > 0, foreground, background)
    return Sample(np.clip(image, 0, 1).astype(np.float32), mask, identifier)


def synth_generate(count: int, size: int, seed: int, out_dir) -> List[str]:
    """Write ``count`` image/mask pairs; returns the identifiers."""
    if count < 1:
        raise InputError(f"count must be >= 1, got {count}")
    if size < 16:
        raise InputError(f"size must be >= 16, got {size}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        ident = f"synth_{i:05d}"
        s = synth_sample(size, np.random.default_rng([seed, i]), ident)
        save_image(s.image, out / "images" / f"{ident}.png")
        save_mask(s.mask, out / "masks" / f"{ident}.png")
        ids.append(ident)
    return ids


def to_batch(samples: Sequence[Sample], dtype=torch.float32):
    """Stack samples into (N, 3, H, W) images and (N, 1, H, W) masks."""
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    masks = torch.from_numpy(np.stack([s.mask for s in samples])[:, None]).to(dtype)
    return images, masks
