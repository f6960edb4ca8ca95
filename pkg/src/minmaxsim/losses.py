"""Training objectives: hard-pixel weighted IoU/BCE, similarity, and the two
InfoNCE variants (all-negative vectors and pixel-wise maps).

All functions are pure and work in whatever floating dtype they are given;
the training loop uses float32, the tests use float64.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Union

import torch
import torch.nn.functional as F

from .errors import ParameterError, TrainingAbort, ValidationError

PROB_EPS = 1e-6
NORM_TOL = 1e-3
WEIGHT_KERNEL = 31

KNeg = Union[int, str]


@dataclass(frozen=True)
class LossWeights:
    sup: float = 0.25
    nce_sup: float = 0.25
    sim: float = 0.25
    nce: float = 0.25

    def __post_init__(self):
        for name, v in zip(("sup", "nce_sup", "sim", "nce"), astuple(self)):
            if not v >= 0:
                raise ParameterError(f"loss weight {name} must be >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return astuple(self)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4 or a.shape[1] != 1:
        raise ValidationError(f"expected B x 1 x H x W, got {tuple(a.shape)}")
    if torch.isnan(a).any() or torch.isnan(b).any():
        raise ValidationError("NaN in loss input")


def _box_mean(x: torch.Tensor, kernel: int) -> torch.Tensor:
    r = kernel // 2
    padded = F.pad(x, (r, r, r, r), mode="replicate")
    return F.avg_pool2d(padded, kernel_size=kernel, stride=1)


def _hard_pixel_weights(target: torch.Tensor, kernel: int) -> torch.Tensor:
    return 1.0 + 5.0 * (_box_mean(target, kernel) - target).abs()


def weight_map(y: torch.Tensor, kernel: int = WEIGHT_KERNEL) -> torch.Tensor:
    """Per-pixel weights in [1, 6], large near mask boundaries.

    ``1 + 5 * |boxmean_k(y) - y|`` with an edge-replicated k x k mean filter.
    Kernels wider than the image are allowed; replication keeps them defined.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"kernel must be odd and positive, got {kernel}")
    if y.dim() != 4 or y.shape[1] != 1:
        raise ValidationError(f"expected B x 1 x H x W, got {tuple(y.shape)}")
    if not ((y == 0) | (y == 1)).all():
        raise ValidationError("weight_map expects a binary label mask")
    return _hard_pixel_weights(y, kernel)


def weighted_bce(p: torch.Tensor, y: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    _check_pair(p, y)
    _check_pair(p, w)
    pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(y * torch.log(pc) + (1.0 - y) * torch.log(1.0 - pc))
    per_image = (w * bce).sum(dim=(1, 2, 3)) / w.sum(dim=(1, 2, 3))
    return per_image.mean()


def weighted_iou(p: torch.Tensor, y: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    _check_pair(p, y)
    _check_pair(p, w)
    inter = (w * p * y).sum(dim=(1, 2, 3))
    union = (w * (p + y)).sum(dim=(1, 2, 3))
    return (1.0 - (inter + 1.0) / (union - inter + 1.0)).mean()


def sup_loss(p: torch.Tensor, y: torch.Tensor, kernel: int = WEIGHT_KERNEL) -> torch.Tensor:
    w = weight_map(y, kernel)
    return weighted_iou(p, y, w) + weighted_bce(p, y, w)


def _directional_similarity(p: torch.Tensor, target: torch.Tensor, kernel: int) -> torch.Tensor:
    t = target.detach()
    w = _hard_pixel_weights(t, kernel)
    return weighted_iou(p, t, w) + weighted_bce(p, t, w)


def similarity_loss(p1: torch.Tensor, p2: torch.Tensor, kernel: int = WEIGHT_KERNEL) -> torch.Tensor:
    """Agreement between two soft predictions of the same unlabeled batch.

    Each prediction is scored against the other as a frozen soft target
    (weights computed from that target), and the two directions are averaged,
    so gradients only enter through the prediction slot.
    """
    _check_pair(p1, p2)
    return 0.5 * (_directional_similarity(p1, p2, kernel) + _directional_similarity(p2, p1, kernel))


def _check_unit_rows(x: torch.Tensor, what: str) -> None:
    if torch.isnan(x).any():
        raise ValidationError(f"NaN in {what}")
    norms = x.norm(dim=-1)
    if (norms - 1.0).abs().max() > NORM_TOL:
        raise ValidationError(f"{what} must be unit-normalised (max |norm-1| = "
                              f"{(norms - 1.0).abs().max().item():.3g})")


def info_nce_all_negative(q: torch.Tensor, k: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """InfoNCE where every key is a negative for every query.

    The positive similarity is fixed at zero, so each query contributes
    ``log(1 + sum_i exp(q . k_i / tau))``; the result is the mean over queries.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if q.dim() != 2 or k.dim() != 2 or q.shape[1] != k.shape[1]:
        raise ValidationError(f"expected Bq x D and K x D, got {tuple(q.shape)} and {tuple(k.shape)}")
    if k.shape[0] == 0:
        raise ParameterError("at least one key is required")
    _check_unit_rows(q, "queries")
    _check_unit_rows(k, "keys")
    logits = q @ k.t() / tau
    # prepend the zero logit of the (degenerate) positive pair
    logits = torch.cat([logits.new_zeros(logits.shape[0], 1), logits], dim=1)
    return torch.logsumexp(logits, dim=1).mean()


def negative_indices(batch: int, hw: int, k_neg: int, generator: torch.Generator) -> torch.Tensor:
    """Sample ``k_neg`` distinct negative locations for every location.

    One random offset set per image is drawn without replacement from
    ``1 .. hw-1``; location ``s`` then uses ``(s + offset) mod hw``. Each
    location gets distinct negatives that never include itself.
    Returns a ``batch x hw x k_neg`` long tensor.
    """
    offsets = torch.stack([torch.randperm(hw - 1, generator=generator)[:k_neg] + 1
                           for _ in range(batch)])
    loc = torch.arange(hw).view(1, hw, 1)
    return (loc + offsets.view(batch, 1, k_neg)) % hw


def _pixel_direction(fq: torch.Tensor, fk: torch.Tensor, tau: float, idx: torch.Tensor | None) -> torch.Tensor:
    b, d, hw = fq.shape
    q = fq.transpose(1, 2)  # B x hw x D
    pos = (fq * fk).sum(dim=1) / tau  # B x hw
    if idx is None:
        logits = torch.bmm(q, fk) / tau  # B x hw x hw, the diagonal is the positive
        return (torch.logsumexp(logits, dim=2) - pos).mean()
    keys = fk.transpose(1, 2)
    neg = keys[torch.arange(b).view(b, 1, 1), idx]  # B x hw x K x D
    neg_logits = torch.einsum("bsd,bskd->bsk", q, neg) / tau
    logits = torch.cat([pos.unsqueeze(2), neg_logits], dim=2)
    return (torch.logsumexp(logits, dim=2) - pos).mean()


def pixel_info_nce(f1: torch.Tensor, f2: torch.Tensor, tau: float = 0.07,
                   k_neg: KNeg = "all", rng_seed: int = 0) -> torch.Tensor:
    """Pixel-wise InfoNCE between two projected feature maps.

    The fiber at the same location in the other map is the positive;
    ``k_neg`` other locations of the other map (or all of them with
    ``k_neg="all"``) are negatives. Both directions are averaged.
    """
    if f1.shape != f2.shape:
        raise ValidationError(f"shape mismatch: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    if f1.dim() != 4:
        raise ValidationError(f"expected B x D x h x w, got {tuple(f1.shape)}")
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    b, d, h, w = f1.shape
    hw = h * w
    a1 = f1.reshape(b, d, hw)
    a2 = f2.reshape(b, d, hw)
    _check_unit_rows(a1.transpose(1, 2), "feature map 1")
    _check_unit_rows(a2.transpose(1, 2), "feature map 2")
    if k_neg == "all":
        if hw < 2:
            raise ParameterError("need at least two locations for negatives")
        idx12 = idx21 = None
    else:
        if not isinstance(k_neg, int) or k_neg < 1:
            raise ParameterError(f"k_neg must be a positive int or 'all', got {k_neg!r}")
        if k_neg >= hw:
            raise ParameterError(f"k_neg={k_neg} needs more than {hw} locations")
        g = torch.Generator().manual_seed(rng_seed)
        idx12 = negative_indices(b, hw, k_neg, g)
        idx21 = negative_indices(b, hw, k_neg, g)
    return 0.5 * (_pixel_direction(a1, a2, tau, idx12) + _pixel_direction(a2, a1, tau, idx21))


COMPONENTS = ("l_sup", "l_nce_sup", "l_sim", "l_nce")


def total_loss(l_sup, l_nce_sup, l_sim, l_nce, lw: LossWeights = LossWeights()):
    """Weighted sum of the four components.

    Raises :class:`TrainingAbort` naming the first non-finite component.
    """
    comps = (l_sup, l_nce_sup, l_sim, l_nce)
    for name, c in zip(COMPONENTS, comps):
        v = float(c.detach()) if torch.is_tensor(c) else float(c)
        if v != v or v in (float("inf"), float("-inf")):
            raise TrainingAbort(name, v)
    total = 0.0
    for lam, c in zip(lw.as_tuple(), comps):
        total = total + lam * c
    return total
