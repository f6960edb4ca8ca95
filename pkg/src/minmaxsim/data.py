"""Dataset scanning, the disjoint labeled split, augmentation and batching."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

from .errors import DatasetError, ParameterError, SplitError, ValidationError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_FORMAT = "minmaxsim-manifest"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# files

def load_image(path) -> torch.Tensor:
    """RGB image as a float32 3 x H x W tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(path) -> torch.Tensor:
    """Binary 1 x H x W float32 mask, thresholded at 128."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return torch.from_numpy((arr >= 128).astype(np.float32))[None]


class ImageStore:
    """Memoising loader so each file is decoded once per run."""

    def __init__(self):
        self._images: dict[str, torch.Tensor] = {}
        self._masks: dict[str, torch.Tensor] = {}

    def image(self, path) -> torch.Tensor:
        key = str(path)
        if key not in self._images:
            self._images[key] = load_image(key)
        return self._images[key]

    def mask(self, path) -> torch.Tensor:
        key = str(path)
        if key not in self._masks:
            self._masks[key] = load_mask(key)
        return self._masks[key]


def scan_dataset(root) -> tuple[list[tuple[str, str]], list[str]]:
    """List ``root/images`` and pair each image with ``root/masks/<same name>``.

    Returns ``(labeled, unlabeled)``, both sorted by file name.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    images = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if img_dir.is_dir() else []
    if not images:
        raise DatasetError(f"no images found under {img_dir}")
    masks = {p.name: p for p in mask_dir.glob("*.png")} if mask_dir.is_dir() else {}
    by_name = {p.name for p in images}
    orphans = sorted(set(masks) - by_name)
    if orphans:
        raise ValidationError(f"mask without image: {orphans[0]}")
    labeled, unlabeled = [], []
    for p in images:
        if p.name in masks:
            labeled.append((str(p), str(masks[p.name])))
        else:
            unlabeled.append(str(p))
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# split

@dataclass
class SplitManifest:
    labeled_x1: list[tuple[str, str]]
    labeled_x2: list[tuple[str, str]]
    unlabeled: list[str]
    test: list[tuple[str, str]] = field(default_factory=list)
    label_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.labeled_x1 = [tuple(x) for x in self.labeled_x1]
        self.labeled_x2 = [tuple(x) for x in self.labeled_x2]
        self.test = [tuple(x) for x in self.test]
        self.unlabeled = list(self.unlabeled)
        self.validate()

    def validate(self) -> None:
        s1, s2 = set(self.labeled_x1), set(self.labeled_x2)
        if s1 & s2:
            raise ValidationError("labeled subsets overlap")
        if abs(len(self.labeled_x1) - len(self.labeled_x2)) > 1:
            raise ValidationError("labeled subsets differ in size by more than one")
        labeled_imgs = {x for x, _ in s1 | s2}
        if labeled_imgs & set(self.unlabeled):
            raise ValidationError("a labeled image also appears in the unlabeled pool")
        train_imgs = labeled_imgs | set(self.unlabeled)
        if train_imgs & {x for x, _ in self.test}:
            raise ValidationError("a training image also appears in the test set")
        if not 0 < self.label_fraction <= 1:
            raise ValidationError(f"label_fraction must be in (0, 1], got {self.label_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("labeled_x1", "labeled_x2", "test"):
            d[k] = [list(x) for x in d[k]]
        return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise ValidationError("not a split manifest")
        if d.get("version") != MANIFEST_VERSION:
            raise ValidationError(f"unsupported manifest version {d.get('version')!r}")
        return cls(**{k: v for k, v in d.items() if k not in ("format", "version")})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def disjoint_split(labeled: Sequence[tuple[str, str]], label_fraction: float, seed: int,
                   unlabeled: Sequence[str] = (), test: Sequence[tuple[str, str]] = ()) -> SplitManifest:
    """Pick ``round(fraction * n)`` labeled pairs and deal them alternately to X1 and X2.

    Labeled pairs that are not picked join the unlabeled pool (masks dropped).
    """
    if not 0 < label_fraction <= 1:
        raise SplitError(f"label_fraction must be in (0, 1], got {label_fraction}")
    labeled = [tuple(x) for x in labeled]
    n_lab = round_half_up(label_fraction * len(labeled))
    if n_lab < 2:
        raise SplitError(f"{n_lab} labeled image(s) selected; each network needs at least one")
    order = np.random.default_rng(seed).permutation(len(labeled))
    chosen = [labeled[i] for i in order[:n_lab]]
    rest = sorted(labeled[i][0] for i in order[n_lab:])
    return SplitManifest(
        labeled_x1=chosen[0::2],
        labeled_x2=chosen[1::2],
        unlabeled=list(unlabeled) + rest,
        test=list(test),
        label_fraction=label_fraction,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    rotation_prob: float = 0.5
    rotation_degrees: float = 30.0
    flip_prob: float = 0.5
    affine_prob: float = 0.5
    affine_translate: float = 0.1
    affine_scale: tuple[float, float] = (0.9, 1.1)
    affine_shear: float = 10.0
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    gridmask_prob: float = 0.5
    gridmask_keep_ratio: float = 0.6
    gridmask_unit: tuple[int, int] = (8, 32)
    target_size: tuple[int, int] = (512, 288)  # (W, H)

    def __post_init__(self):
        for name in ("rotation_prob", "flip_prob", "affine_prob", "grayscale_prob",
                     "blur_prob", "jitter_prob", "gridmask_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")
        if not 0 < self.gridmask_keep_ratio <= 1:
            raise ParameterError(f"gridmask_keep_ratio must be in (0, 1], got {self.gridmask_keep_ratio}")
        if self.gridmask_unit[0] < 2 or self.gridmask_unit[1] < self.gridmask_unit[0]:
            raise ParameterError(f"bad gridmask_unit range {self.gridmask_unit}")
        # JSON round-trips give lists
        for name in ("affine_scale", "blur_sigma", "gridmask_unit", "target_size"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


IDENTITY_AUGMENT = dict(rotation_prob=0.0, flip_prob=0.0, affine_prob=0.0, grayscale_prob=0.0,
                        blur_prob=0.0, jitter_prob=0.0, gridmask_prob=0.0, gridmask_keep_ratio=1.0)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class _Geometry:
    angle: float
    translate: tuple[float, float]
    scale: float
    shear: float
    flip: bool

    @property
    def is_warp(self) -> bool:
        return bool(self.angle or self.translate != (0.0, 0.0) or self.scale != 1.0 or self.shear)


def _sample_geometry(cfg: AugmentConfig, rng: np.random.Generator) -> _Geometry:
    # every draw happens unconditionally so the stream does not depend on outcomes
    u = rng.random(3)
    angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
    tx, ty = rng.uniform(-cfg.affine_translate, cfg.affine_translate, size=2)
    shear = rng.uniform(-cfg.affine_shear, cfg.affine_shear)
    for _ in range(16):
        scale = rng.uniform(*cfg.affine_scale)
        if abs(scale) > 1e-3:
            break
    else:
        scale = 1.0
    use_rot, use_affine, flip = u[0] < cfg.rotation_prob, u[1] < cfg.affine_prob, u[2] < cfg.flip_prob
    return _Geometry(
        angle=float(angle) if use_rot else 0.0,
        translate=(float(tx), float(ty)) if use_affine else (0.0, 0.0),
        scale=float(scale) if use_affine else 1.0,
        shear=float(shear) if use_affine else 0.0,
        flip=bool(flip),
    )


def _warp_theta(geo: _Geometry, h: int, w: int) -> torch.Tensor:
    """Output->input sampling matrix for ``affine_grid`` (normalised coords)."""
    a, s = math.radians(geo.angle), math.radians(geo.shear)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(s)], [0.0, 1.0]])
    m = rot @ shear * geo.scale
    d = np.diag([w / 2.0, h / 2.0])
    t = np.array([geo.translate[0] * w, geo.translate[1] * h])
    minv = np.linalg.inv(m)
    lin = np.linalg.inv(d) @ minv @ d
    off = -np.linalg.inv(d) @ minv @ t
    return torch.tensor(np.hstack([lin, off[:, None]]), dtype=torch.float32)[None]


def _resize(x: torch.Tensor, size_wh: tuple[int, int], mode: str) -> torch.Tensor:
    w, h = size_wh
    if x.shape[-2:] == (h, w):
        return x
    if mode == "nearest":
        return F.interpolate(x[None], size=(h, w), mode="nearest")[0]
    return F.interpolate(x[None], size=(h, w), mode="bilinear", align_corners=False, antialias=True)[0].clamp(0, 1)


def _apply_geometry(x: torch.Tensor, geo: _Geometry, mode: str) -> torch.Tensor:
    if geo.is_warp:
        h, w = x.shape[-2:]
        theta = _warp_theta(geo, h, w).to(x.dtype)
        grid = F.affine_grid(theta, [1, x.shape[0], h, w], align_corners=False)
        x = F.grid_sample(x[None], grid, mode=mode, padding_mode="border", align_corners=False)[0]
    if geo.flip:
        x = torch.flip(x, dims=[-1])
    return x


def _grayscale(img: torch.Tensor) -> torch.Tensor:
    if img.shape[0] != 3:
        return img
    return TF.rgb_to_grayscale(img, num_output_channels=3)


def augment_pair(image: torch.Tensor, mask: torch.Tensor, cfg: AugmentConfig, rng_seed):
    """Geometric augmentation applied identically to image and mask.

    The image is resampled bilinearly and may additionally be converted to
    grayscale; the mask is resampled nearest-neighbour and stays binary.
    """
    if image.shape[-2:] != mask.shape[-2:]:
        raise ValidationError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} differ in size")
    rng = _rng(rng_seed)
    geo = _sample_geometry(cfg, rng)
    gray = rng.random() < cfg.grayscale_prob
    img = _apply_geometry(_resize(image, cfg.target_size, "bilinear"), geo, "bilinear")
    msk = _apply_geometry(_resize(mask, cfg.target_size, "nearest"), geo, "nearest")
    if gray:
        img = _grayscale(img)
    return img.clamp(0, 1), msk


def _gridmask(image: torch.Tensor, keep_ratio: float, unit: int, rng: np.random.Generator) -> torch.Tensor:
    if unit < 2:
        raise ParameterError(f"gridmask unit must be >= 2, got {unit}")
    if not 0 < keep_ratio <= 1:
        raise ParameterError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    side = round_half_up(unit * (1.0 - keep_ratio))
    if side >= unit:
        raise ParameterError(f"hole side {side} must be smaller than unit {unit}")
    ox, oy = rng.integers(0, unit, size=2)
    if side == 0:
        return image
    h, w = image.shape[-2:]
    rows = ((torch.arange(h) - int(oy)) % unit) < side
    cols = ((torch.arange(w) - int(ox)) % unit) < side
    holes = rows[:, None] & cols[None, :]
    return image.masked_fill(holes, 0.0)


def gridmask(image: torch.Tensor, keep_ratio: float, unit: int, rng_seed) -> torch.Tensor:
    """Zero a periodic grid of square holes.

    Holes have side ``round(unit * (1 - keep_ratio))`` and repeat every
    ``unit`` pixels in both directions from a random phase.
    """
    return _gridmask(image, keep_ratio, unit, _rng(rng_seed))


def augment_heavy(image: torch.Tensor, cfg: AugmentConfig, rng_seed) -> torch.Tensor:
    """Strong augmentation for unlabeled images: geometry, grayscale, blur,
    colour jitter and GridMask.

    If none of the operations is drawn, colour jitter is applied anyway (when
    enabled) so every heavy view differs from its input.
    """
    rng = _rng(rng_seed)
    geo = _sample_geometry(cfg, rng)
    u = rng.random(4)
    sigma = rng.uniform(*cfg.blur_sigma)
    s = cfg.jitter_strength
    bright, contrast, sat = rng.uniform(max(0.0, 1 - s), 1 + s, size=3)
    unit = int(rng.integers(cfg.gridmask_unit[0], cfg.gridmask_unit[1] + 1))

    img = _apply_geometry(_resize(image, cfg.target_size, "bilinear"), geo, "bilinear")
    fired = geo.is_warp or geo.flip or bool((u < [cfg.jitter_prob, cfg.grayscale_prob,
                                                  cfg.blur_prob, cfg.gridmask_prob]).any())
    # a plan that drew no operation would leave the view unchanged; fall back to jitter
    if u[0] < cfg.jitter_prob or (not fired and cfg.jitter_prob > 0):
        img = TF.adjust_brightness(img, float(bright))
        img = TF.adjust_contrast(img, float(contrast))
        img = TF.adjust_saturation(img, float(sat))
    if u[1] < cfg.grayscale_prob:
        img = _grayscale(img)
    if u[2] < cfg.blur_prob:
        k = 2 * math.ceil(3 * sigma) + 1
        img = TF.gaussian_blur(img, [k, k], [float(sigma), float(sigma)])
    if u[3] < cfg.gridmask_prob:
        img = _gridmask(img, cfg.gridmask_keep_ratio, unit, rng)
    return img.clamp(0, 1)


# ---------------------------------------------------------------------------
# batching

class Batch(NamedTuple):
    x1: torch.Tensor
    y1: torch.Tensor
    x2: torch.Tensor
    y2: torch.Tensor
    u1: torch.Tensor | None  # unlabeled batch for network 1
    u2: torch.Tensor | None  # same tensor as u1 unless per-network views are on
    x1_paths: list[str]
    x2_paths: list[str]
    u_paths: list[str]


class _Cycler:
    """Endless reshuffled pass over a list; reshuffles at every wrap."""

    def __init__(self, items, rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self._order: list[int] = []

    def take(self, n: int) -> list:
        out = []
        for _ in range(n):
            if not self._order:
                self._order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self._order.pop(0)])
        return out


def labeled_per_network(batch_size: int) -> int:
    return max(1, batch_size // 2)


def steps_per_epoch(manifest: SplitManifest, batch_size: int) -> int:
    if manifest.unlabeled:
        return math.ceil(len(manifest.unlabeled) / batch_size)
    per = labeled_per_network(batch_size)
    return math.ceil(max(len(manifest.labeled_x1), len(manifest.labeled_x2)) / per)


def batch_stream(manifest: SplitManifest, cfg: AugmentConfig, batch_size: int, epoch_seed: int,
                 store: ImageStore | None = None, per_network_views: bool = False,
                 include_unlabeled: bool = True) -> Iterator[Batch]:
    """One epoch of training batches.

    The epoch walks the unlabeled pool once in ``batch_size`` chunks. Each
    step also carries ``max(1, batch_size // 2)`` labeled pairs per network,
    drawn from X1 and X2 in reshuffled cycles. Both networks get the same
    heavily augmented unlabeled batch unless ``per_network_views`` is set.
    With ``include_unlabeled=False`` the epoch length is unchanged but the
    unlabeled images are never loaded (``u1``/``u2`` are ``None``).
    Every random choice derives from ``epoch_seed``.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    store = store or ImageStore()
    ss = np.random.SeedSequence(epoch_seed)
    order_rng, c1_rng, c2_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    c1, c2 = _Cycler(manifest.labeled_x1, c1_rng), _Cycler(manifest.labeled_x2, c2_rng)
    unl = [manifest.unlabeled[i] for i in order_rng.permutation(len(manifest.unlabeled))]
    if not unl:
        warnings.warn("unlabeled pool is empty; the stream is supervised-only", stacklevel=2)
    per = labeled_per_network(batch_size)

    def item_seed(step, slot, j):
        return np.random.SeedSequence([epoch_seed, step, slot, j])

    def labeled(pairs, step, slot):
        imgs, masks = [], []
        for j, (ip, mp) in enumerate(pairs):
            img, msk = augment_pair(store.image(ip), store.mask(mp), cfg, item_seed(step, slot, j))
            imgs.append(img)
            masks.append(msk)
        return torch.stack(imgs), torch.stack(masks)

    for step in range(steps_per_epoch(manifest, batch_size)):
        p1, p2 = c1.take(per), c2.take(per)
        x1, y1 = labeled(p1, step, 0)
        x2, y2 = labeled(p2, step, 1)
        u_paths = unl[step * batch_size:(step + 1) * batch_size]
        u1 = u2 = None
        if u_paths and include_unlabeled:
            u1 = torch.stack([augment_heavy(store.image(p), cfg, item_seed(step, 2, j))
                              for j, p in enumerate(u_paths)])
            u2 = u1
            if per_network_views:
                u2 = torch.stack([augment_heavy(store.image(p), cfg, item_seed(step, 3, j))
                                  for j, p in enumerate(u_paths)])
        yield Batch(x1, y1, x2, y2, u1, u2,
                    [p for p, _ in p1], [p for p, _ in p2], list(u_paths))
