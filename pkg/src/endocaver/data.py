"""Paired image/mask datasets and the bundled procedural polyp corpus."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .degrade import apply, derive_seed, list_images, make_rng, read_rgb, sample_spec, to_uint8, write_rgb

log = logging.getLogger(__name__)

CORPUS_DIR = Path(__file__).parent / "corpus"


class PairingError(ValueError):
    """Images and masks do not pair up by filename stem."""


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float32)[None]


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(to_uint8(np.asarray(mask).reshape(mask.shape[-2:])), mode="L").save(path)


def resize_rgb(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[-2:] == (size, size):
        return img
    pil = Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32).transpose(2, 0, 1) / 255.0


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape[-2:] == (size, size):
        return mask
    pil = Image.fromarray(to_uint8(mask[0]), mode="L").resize((size, size), Image.NEAREST)
    return (np.asarray(pil) >= 128).astype(np.float32)[None]


def pair_files(root: Path) -> list[tuple[Path, Path | None]]:
    """Match ``root/images/*`` with ``root/masks/*`` by stem.

    Without a ``masks/`` folder every image pairs with ``None``. Orphans on either
    side raise :class:`PairingError` naming them.
    """
    root = Path(root)
    images = {p.stem: p for p in list_images(root / "images")} if (root / "images").is_dir() else {}
    if not (root / "masks").is_dir():
        return [(images[s], None) for s in sorted(images)]
    masks = {p.stem: p for p in list_images(root / "masks")}
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise PairingError(f"unpaired files under {root}: {', '.join(orphans)}")
    return [(images[s], masks[s]) for s in sorted(images)]


@dataclass
class Dataset:
    names: list[str]
    clean: np.ndarray            # [N, 3, S, S]
    degraded: np.ndarray         # [N, 3, S, S]
    masks: np.ndarray | None     # [N, 1, S, S]

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, n: int) -> Dataset:
        return Dataset(self.names[:n], self.clean[:n], self.degraded[:n],
                       None if self.masks is None else self.masks[:n])


def load_dataset(root, input_size: int, degraded: bool = True, seed: int = 0, severity: str = "moderate",
                 degraded_dir=None) -> Dataset:
    """Load clean images, masks and their degraded counterparts.

    Degraded inputs come from ``degraded_dir`` (or ``root/degraded``) when it
    exists, otherwise they are synthesised from per-image derived seeds. With
    ``degraded=False`` the network input is the clean image itself.
    """
    root = Path(root)
    pairs = pair_files(root)
    if not pairs:
        raise FileNotFoundError(f"no images found under {root / 'images'}")
    if degraded_dir is None and (root / "degraded").is_dir():
        degraded_dir = root / "degraded"
    names, clean, deg, masks = [], [], [], []
    for img_path, mask_path in pairs:
        img = resize_rgb(read_rgb(img_path), input_size)
        names.append(img_path.name)
        clean.append(img)
        if not degraded:
            deg.append(img)
        elif degraded_dir is not None:
            deg.append(resize_rgb(read_rgb(Path(degraded_dir) / f"{img_path.stem}.png"), input_size))
        else:
            spec = sample_spec(derive_seed(seed, img_path.name), severity)
            # quantise like a written file so in-memory and on-disk runs agree
            deg.append(to_uint8(apply(img, spec)).astype(np.float32) / 255.0)
        if mask_path is not None:
            masks.append(resize_mask(read_mask(mask_path), input_size))
    return Dataset(names, np.stack(clean), np.stack(deg), np.stack(masks) if masks else None)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng(derive_seed(seed, f"epoch-{epoch}")).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for optimizer step ``step``: seeded per-epoch permutations cut into batches.

    Each epoch visits every sample exactly once; a short final batch is kept.
    """
    per_epoch = -(-n // batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = epoch_order(n, seed, epoch)
    return order[pos * batch_size:(pos + 1) * batch_size]


# -- procedural corpus -------------------------------------------------------------------
def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field / (np.abs(field).max() + 1e-12)


def draw_sample(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic frame: smooth mucosa texture with a shaded elliptical 'polyp'."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    base = np.array([0.78, 0.42, 0.36]) + rng.uniform(-0.06, 0.06, 3)
    tex = 0.10 * _smooth_noise(rng, size, size / 10) + 0.05 * _smooth_noise(rng, size, size / 24)
    vignette = 1.0 - 0.35 * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    img = (base[:, None, None] + tex[None] * np.array([1.0, 0.8, 0.7])[:, None, None]) * vignette[None]

    cy, cx = rng.uniform(0.3, 0.7, 2)
    ry, rx = rng.uniform(0.12, 0.24, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
    r = np.sqrt(u * u + v * v)
    mask = (r <= 1.0).astype(np.float32)
    inside = np.clip(1.0 - r, 0.0, 1.0)
    polyp = np.array([0.90, 0.55, 0.45]) + rng.uniform(-0.05, 0.05, 3)
    shade = 0.75 + 0.25 * np.sqrt(inside)
    soft = 1.0 / (1.0 + np.exp((r - 1.0) * size / 3.0))
    img = img * (1 - soft[None]) + (polyp[:, None, None] * shade[None]) * soft[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask[None]


def make_corpus(out_dir, n: int = 32, size: int = 64, seed: int = 0) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img, mask = draw_sample(make_rng(derive_seed(seed, f"corpus-{i}")), size)
        write_rgb(out_dir / "images" / f"polyp_{i:03d}.png", img)
        write_mask(out_dir / "masks" / f"polyp_{i:03d}.png", mask)
    return out_dir
