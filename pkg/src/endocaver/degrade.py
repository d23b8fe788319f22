"""Seeded synthetic endoscopic degradations: blur, specular highlights, lens fog.

A :class:`DegradationSpec` fully determines the corruption, and specs are
drawn from a counter-based Philox generator keyed by a 64-bit seed. Per-image
seeds are derived as ``blake2b(f"{seed}:{filename}")`` truncated to 64 bits,
so a manifest line alone reproduces its image.

Composition order is blur -> highlights -> fog, followed by a clamp to [0, 1].
Images are quantised to 8 bits with ``floor(255 * x + 0.5)`` after casting to
float32.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SEVERITIES = ("mild", "moderate", "severe")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# Stand-in parameter ranges per severity tier; override by passing ``ranges``.
DEFAULT_RANGES = {
    "motion_length": {"mild": (3.0, 7.0), "moderate": (7.0, 15.0), "severe": (15.0, 25.0)},
    "defocus_radius": {"mild": (1.0, 2.0), "moderate": (2.0, 5.0), "severe": (5.0, 8.0)},
    "fog_alpha": {"mild": (0.1, 0.2), "moderate": (0.2, 0.4), "severe": (0.4, 0.6)},
    "fog_haze": (0.8, 1.0),
    "highlight_count": (1, 4),
    "highlight_radius": (4.0, 16.0),
    "highlight_intensity": (0.4, 0.9),
}


@dataclass
class MotionBlur:
    length: float
    angle: float


@dataclass
class DefocusBlur:
    radius: float


@dataclass
class Highlights:
    centers: list[tuple[float, float]]  # (row, col) as fractions of the image extent
    radius: list[float]
    intensity: list[float]

    @property
    def count(self) -> int:
        return len(self.centers)


@dataclass
class Fog:
    alpha: float
    haze: float


@dataclass
class DegradationSpec:
    seed: int
    motion: MotionBlur | None = None
    defocus: DefocusBlur | None = None
    highlights: Highlights | None = None
    fog: Fog | None = None
    severity: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not any((self.motion, self.defocus, self.highlights, self.fog)):
            raise ValueError("a degradation spec needs at least one component")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DegradationSpec:
        hl = d.get("highlights")
        return cls(
            seed=int(d["seed"]),
            motion=MotionBlur(**d["motion"]) if d.get("motion") else None,
            defocus=DefocusBlur(**d["defocus"]) if d.get("defocus") else None,
            highlights=Highlights([tuple(c) for c in hl["centers"]], list(hl["radius"]), list(hl["intensity"]))
            if hl else None,
            fog=Fog(**d["fog"]) if d.get("fog") else None,
            severity=d.get("severity"),
        )


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2 ** 64 - 1)))


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def sample_spec(seed: int, severity: str = "moderate", ranges: dict | None = None) -> DegradationSpec:
    """Draw a spec: one of motion/defocus blur, 1-4 highlights and fog."""
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be one of {SEVERITIES}")
    r = {**DEFAULT_RANGES, **(ranges or {})}
    rng = make_rng(seed)
    motion = defocus = None
    if rng.random() < 0.5:
        motion = MotionBlur(float(rng.uniform(*r["motion_length"][severity])), float(rng.uniform(0.0, math.pi)))
    else:
        defocus = DefocusBlur(float(rng.uniform(*r["defocus_radius"][severity])))
    lo, hi = r["highlight_count"]
    n = int(rng.integers(lo, hi + 1))
    highlights = Highlights(
        centers=[(float(a), float(b)) for a, b in rng.uniform(0.0, 1.0, size=(n, 2))],
        radius=[float(v) for v in rng.uniform(*r["highlight_radius"], size=n)],
        intensity=[float(v) for v in rng.uniform(*r["highlight_intensity"], size=n)],
    )
    fog = Fog(float(rng.uniform(*r["fog_alpha"][severity])), float(rng.uniform(*r["fog_haze"])))
    return DegradationSpec(int(seed), motion, defocus, highlights, fog, severity)


# -- kernels -----------------------------------------------------------------------
def motion_kernel(length: float, angle: float, samples_per_px: int = 8) -> np.ndarray:
    """Anti-aliased line segment of ``length`` px at ``angle`` rad, normalised to sum 1."""
    half = int(math.ceil(length / 2.0)) + 1
    size = 2 * half + 1
    k = np.zeros((size, size))
    n = max(2, int(math.ceil(length * samples_per_px)) + 1)
    t = np.linspace(-length / 2.0, length / 2.0, n)
    xs = half + t * math.cos(angle)
    ys = half - t * math.sin(angle)
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            np.add.at(k, (y0 + dy, x0 + dx), wy * wx)
    return k / k.sum()


def disk_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    """Uniform disk with area-weighted edge pixels, normalised to sum 1."""
    half = int(math.ceil(radius))
    size = 2 * half + 1
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    grid = np.arange(size) - half
    ys = (grid[:, None] + offs[None, :]).reshape(-1)
    cover = (ys[:, None] ** 2 + ys[None, :] ** 2 <= radius * radius).astype(float)
    k = cover.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return k / k.sum()


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in img])


# -- application ----------------------------------------------------------------------
def apply(clean, spec: DegradationSpec) -> np.ndarray:
    """Degrade a ``[3, H, W]`` image in [0, 1]; returns float32 in [0, 1]."""
    img = np.array(getattr(clean, "data", clean), dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected a [C, H, W] image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("clean image must lie in [0, 1]")
    H, W = img.shape[-2:]
    if spec.motion is not None:
        img = blur(img, motion_kernel(spec.motion.length, spec.motion.angle))
    if spec.defocus is not None:
        img = blur(img, disk_kernel(spec.defocus.radius))
    if spec.highlights is not None:
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        glow = np.zeros((H, W))
        for (cy, cx), rad, inten in zip(spec.highlights.centers, spec.highlights.radius, spec.highlights.intensity):
            sigma = rad / 2.0
            d2 = (yy - cy * (H - 1)) ** 2 + (xx - cx * (W - 1)) ** 2
            glow += inten * np.exp(-d2 / (2 * sigma * sigma))
        img = np.clip(img + glow[None], 0.0, 1.0)
    if spec.fog is not None:
        img = (1.0 - spec.fog.alpha) * img + spec.fog.alpha * spec.fog.haze
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img, dtype=np.float32)
    return np.floor(x * np.float32(255.0) + np.float32(0.5)).clip(0, 255).astype(np.uint8)


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_rgb(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path)


def list_images(folder: Path) -> list[Path]:
    return sorted(p for p in Path(folder).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def degrade_dataset(input_dir, output_dir, seed: int, severity: str = "moderate",
                    ranges: dict | None = None) -> list[dict]:
    """Degrade every image under ``input_dir`` and write a JSON-lines manifest.

    ``input_dir`` is either a flat image folder or a dataset root with
    ``images/`` and ``masks/``; masks are copied byte-for-byte. Unreadable
    images are skipped and recorded with an ``error`` field.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    image_dir = input_dir / "images" if (input_dir / "images").is_dir() else input_dir
    out_images = output_dir / "images"
    out_images.mkdir(parents=True, exist_ok=True)
    manifest = []
    for path in list_images(image_dir):
        sub_seed = derive_seed(seed, path.name)
        try:
            clean = read_rgb(path)
        except Exception as exc:  # noqa: BLE001 - any decode failure is recorded, not fatal
            log.warning("skipping unreadable image %s: %s", path.name, exc)
            manifest.append({"filename": path.name, "sub_seed": sub_seed, "error": str(exc)})
            continue
        spec = sample_spec(sub_seed, severity, ranges)
        write_rgb(out_images / f"{path.stem}.png", apply(clean, spec))
        manifest.append({"filename": path.name, "sub_seed": sub_seed, "spec": spec.to_dict()})
    mask_dir = input_dir / "masks"
    if image_dir != input_dir and mask_dir.is_dir():
        (output_dir / "masks").mkdir(parents=True, exist_ok=True)
        for m in list_images(mask_dir):
            shutil.copyfile(m, output_dir / "masks" / m.name)
    with open(output_dir / "manifest.jsonl", "w") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest
