"""Synthetic surgical-tool images with exact masks.

Each image is a smooth reddish tissue texture with one to three elongated
metallic instruments entering from the border. Instruments are capsules or
tapered wedges (both convex), shaded like cylinders with a specular streak.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

FG_MIN, FG_MAX = 0.02, 0.40


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 16
    size: tuple[int, int] = (64, 64)  # (H, W)
    tools_per_image: tuple[int, int] = (1, 3)
    tool_width: tuple[int, int] | None = None  # pixels; None scales with image size
    background_texture_scale: float = 1.0
    specular_noise_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(self.size))
        object.__setattr__(self, "tools_per_image", tuple(self.tools_per_image))
        if self.tool_width is not None:
            object.__setattr__(self, "tool_width", tuple(self.tool_width))
        h, w = self.size
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if h % 16 or w % 16:
            raise ValueError(f"image size must be divisible by 16, got {h}x{w}")
        lo, hi = self.tools_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad tools_per_image range {self.tools_per_image}")

    @property
    def width_range(self) -> tuple[int, int]:
        if self.tool_width is not None:
            return self.tool_width
        m = min(self.size)
        return max(3, round(0.09 * m)), max(4, round(0.17 * m))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _background(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    sigma = max(1.0, scale * min(h, w) / 10.0)
    noise = gaussian_filter(rng.normal(size=(h, w)), sigma)
    noise /= np.abs(noise).max() + 1e-12
    fine = gaussian_filter(rng.normal(size=(h, w)), 1.0)
    fine /= np.abs(fine).max() + 1e-12
    base = np.array([0.62, 0.24, 0.20]) + rng.uniform(-0.06, 0.06, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    vignette = 1.0 - 0.35 * (((yy - cy) / h) ** 2 + ((xx - cx) / w) ** 2) * 2
    img = base[None, None, :] * (1.0 + 0.25 * noise[..., None] + 0.06 * fine[..., None])
    return img * vignette[..., None]


def _tool_geometry(rng: np.random.Generator, h: int, w: int, wmin: int, wmax: int):
    side = rng.integers(4)
    t = rng.uniform(0.15, 0.85)
    # entry point just outside the border, heading inwards
    if side == 0:
        p0, normal = np.array([-2.0, t * w]), 0.0
    elif side == 1:
        p0, normal = np.array([h + 1.0, t * w]), math.pi
    elif side == 2:
        p0, normal = np.array([t * h, -2.0]), math.pi / 2
    else:
        p0, normal = np.array([t * h, w + 1.0]), -math.pi / 2
    ang = normal + rng.uniform(-math.pi / 4, math.pi / 4)
    length = rng.uniform(0.45, 0.85) * min(h, w)
    p1 = p0 + length * np.array([math.cos(ang), math.sin(ang)])
    r0 = rng.uniform(wmin, wmax) / 2.0
    wedge = rng.random() < 0.4
    r1 = r0 * rng.uniform(0.45, 0.8) if wedge else r0
    return p0, p1, r0, r1


def _rasterise(p0, p1, r0, r1, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    d = p1 - p0
    seg_len2 = float(d @ d)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    py, px = p0[0] + t * d[0], p0[1] + t * d[1]
    dist = np.hypot(yy - py, xx - px)
    radius = r0 + (r1 - r0) * t
    inside = dist <= radius
    rel = np.clip(dist / np.maximum(radius, 1e-6), 0.0, 1.0)
    return inside, rel


def render(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically render image ``index``: float RGB in [0,1] and a bool mask."""
    h, w = cfg.size
    rng = np.random.default_rng([cfg.seed, index])
    wmin, wmax = cfg.width_range
    img = _background(rng, h, w, cfg.background_texture_scale)
    for _ in range(100):
        n_tools = int(rng.integers(cfg.tools_per_image[0], cfg.tools_per_image[1] + 1))
        tools = [_tool_geometry(rng, h, w, wmin, wmax) for _ in range(n_tools)]
        mask = np.zeros((h, w), dtype=bool)
        for p0, p1, r0, r1 in tools:
            mask |= _rasterise(p0, p1, r0, r1, h, w)[0]
        if FG_MIN <= mask.mean() <= FG_MAX:
            break
    else:
        raise RuntimeError(f"could not place tools within the foreground budget (image {index})")

    tint = np.array([0.80, 0.82, 0.88]) * rng.uniform(0.9, 1.1)
    for p0, p1, r0, r1 in tools:
        inside, rel = _rasterise(p0, p1, r0, r1, h, w)
        shade = 0.55 + 0.45 * np.sqrt(1.0 - rel ** 2)
        streak = 0.25 * np.exp(-((rel - 0.35) / 0.15) ** 2)
        tool = tint[None, None, :] * shade[..., None] + streak[..., None]
        img = np.where(inside[..., None], tool, img)

    if rng.random() < cfg.specular_noise_prob:
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.5, 1.5)
            yy, xx = np.mgrid[0:h, 0:w]
            spot = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
            img = img + 0.5 * spot[..., None] * (~mask)[..., None]
    img = img + rng.normal(scale=0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


def _to_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def _image_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def generate_dataset(cfg: SynthConfig, out_dir, prefix: str = "img", start: int = 0) -> dict:
    """Write ``cfg.n_images`` image/mask pairs as ``out_dir/{images,masks}/<prefix>NNNN.png``.

    Images are rendered at indices ``start .. start + n_images - 1``, so a
    held-out set drawn with a larger ``start`` never repeats a training image.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    names, fractions = [], []
    for i in range(start, start + cfg.n_images):
        img, mask = render(cfg, i)
        name = f"{prefix}{i:04d}.png"
        _to_png(_image_bytes(img), out / "images" / name)
        _to_png(mask.astype(np.uint8) * 255, out / "masks" / name)
        names.append(name)
        fractions.append(float(mask.mean()))
    return {"out_dir": str(out), "n_images": cfg.n_images, "names": names,
            "foreground_fractions": fractions}


def photometric_variant(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(0.75, 1.25)
    bias = rng.uniform(-0.08, 0.08)
    colour = rng.uniform(0.9, 1.1, size=3)
    gamma = rng.uniform(0.8, 1.25)
    mean = img.mean()
    out = ((img - mean) * rng.uniform(0.8, 1.2) + mean) * gain * colour[None, None, :] + bias
    out = np.clip(out, 0.0, 1.0) ** gamma
    out = out + rng.normal(scale=0.02, size=img.shape)
    return np.clip(out, 0.0, 1.0)


def generate_unlabeled_variants(cfg: SynthConfig, per_image: int, out_dir, prefix: str = "unl") -> int:
    """Write ``per_image`` photometric variants of every base image, without masks."""
    if per_image < 1:
        raise ValueError("per_image must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    count = 0
    for i in range(cfg.n_images):
        base, _ = render(cfg, i)
        for v in range(per_image):
            rng = np.random.default_rng([cfg.seed, i, v, 1])
            _to_png(_image_bytes(photometric_variant(base, rng)), out / "images" / f"{prefix}{i:04d}_{v:02d}.png")
            count += 1
    return count
