"""Dice scoring, inference with one or both networks, and CSV reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .checkpoint import CheckpointState
from .data import load_image, load_mask
from .errors import ParameterError, ValidationError

log = logging.getLogger(__name__)

MODES = ("ensemble", "net1", "net2")
METRICS_HEADER = ["method", "label_fraction", "path", "dsc", "dsc_net1", "dsc_net2", "error"]


def _as_bool(mask, name) -> np.ndarray:
    a = mask.detach().cpu().numpy() if torch.is_tensor(mask) else np.asarray(mask)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValidationError(f"{name} is not binary")
        a = a.astype(bool)
    return a


def dsc(pred, gt) -> float:
    """Dice-Sorensen coefficient of two binary masks; 1.0 when both are empty."""
    p, g = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


class ProbabilitySource(Protocol):
    def prob_maps(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Both networks' H x W foreground probabilities at the image's own size."""


class Predictor:
    """Eval-mode wrapper around the two segmentation networks of a checkpoint.

    Images are resized to the training resolution, run through both networks,
    and the probability maps are resized back with nearest-neighbour sampling.
    """

    def __init__(self, state: CheckpointState):
        self.state = state
        self.model = state.model.eval()
        w, h = state.meta.get("target_size", (None, None))
        self.size = (h, w) if h else None

    @torch.no_grad()
    def prob_maps(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = image[None] if image.dim() == 3 else image
        orig = x.shape[-2:]
        if self.size is not None and tuple(orig) != tuple(self.size):
            x = F.interpolate(x, size=self.size, mode="bilinear", align_corners=False, antialias=True)
        p1 = self.model.seg1(x)
        p2 = self.model.seg2(x)
        if tuple(p1.shape[-2:]) != tuple(orig):
            p1 = F.interpolate(p1, size=orig, mode="nearest")
            p2 = F.interpolate(p2, size=orig, mode="nearest")
        return p1[0, 0], p2[0, 0]


def _source(state) -> ProbabilitySource:
    return Predictor(state) if isinstance(state, CheckpointState) else state


def combine(p1: torch.Tensor, p2: torch.Tensor, threshold: float = 0.5, mode: str = "ensemble") -> torch.Tensor:
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    if mode == "ensemble":
        p = 0.5 * (p1 + p2)
    elif mode == "net1":
        p = p1
    elif mode == "net2":
        p = p2
    else:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    return p > threshold


def predict(state, image: torch.Tensor, threshold: float = 0.5, mode: str = "ensemble") -> torch.Tensor:
    """Binary H x W mask for one image.

    ``state`` is a :class:`CheckpointState` or any object with ``prob_maps``.
    The ensemble averages the two probability maps before thresholding.
    """
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    p1, p2 = _source(state).prob_maps(image)
    return combine(p1, p2, threshold, mode)


@dataclass
class EvalSettings:
    threshold: float = 0.5
    mode: str = "ensemble"
    dump_dir: str | None = None

    def digest(self) -> str:
        blob = json.dumps({"threshold": self.threshold, "mode": self.mode}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    per_image: list[tuple[str, float]]
    mean_dsc: float
    config: str
    network_breakdown: dict[str, float]
    per_image_modes: dict[str, list[float]] = field(default_factory=dict)
    errors: list[tuple[str, str]] = field(default_factory=list)
    method: str = "mms"
    label_fraction: float | None = None
    mode: str = "ensemble"

    @property
    def ok(self) -> bool:
        return not self.errors


def _mean(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def evaluate_set(state, test: Sequence[tuple[str, str]], settings: EvalSettings = EvalSettings(),
                 method: str | None = None, label_fraction: float | None = None) -> MetricsReport:
    """Score every test pair with the ensemble and with each network.

    Unreadable files are recorded in ``errors`` and skipped; check ``ok``.
    """
    if not test:
        raise ValidationError("test list is empty")
    src = _source(state)
    if isinstance(state, CheckpointState):
        method = method or state.meta.get("method", "mms")
        if label_fraction is None:
            label_fraction = state.meta.get("label_fraction")
    dump = Path(settings.dump_dir) if settings.dump_dir else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    scores = {m: [] for m in MODES}
    paths, errors = [], []
    for img_path, mask_path in test:
        try:
            image = load_image(img_path)
            gt = load_mask(mask_path)[0]
        except Exception as exc:  # unreadable or corrupt file
            log.error("cannot evaluate %s: %s", img_path, exc)
            errors.append((str(img_path), str(exc)))
            continue
        p1, p2 = src.prob_maps(image)
        masks = {m: combine(p1, p2, settings.threshold, m) for m in MODES}
        for m in MODES:
            scores[m].append(dsc(masks[m], gt))
        paths.append(str(img_path))
        if dump is not None:
            arr = masks[settings.mode].numpy().astype(np.uint8) * 255
            Image.fromarray(arr).save(dump / Path(img_path).with_suffix(".png").name)
    chosen = scores[settings.mode]
    return MetricsReport(
        per_image=list(zip(paths, chosen)),
        mean_dsc=_mean(chosen),
        config=settings.digest(),
        network_breakdown={m: _mean(scores[m]) for m in MODES},
        per_image_modes=scores,
        errors=errors,
        method=method or "mms",
        label_fraction=label_fraction,
        mode=settings.mode,
    )


def write_metrics(report: MetricsReport, out) -> None:
    """Per-image CSV for one evaluation run (header ``METRICS_HEADER``)."""
    frac = "" if report.label_fraction is None else repr(float(report.label_fraction))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for i, (path, score) in enumerate(report.per_image):
            w.writerow([report.method, frac, path, repr(score),
                        repr(report.per_image_modes["net1"][i]), repr(report.per_image_modes["net2"][i]), ""])
        for path, err in report.errors:
            w.writerow([report.method, frac, path, "", "", "", err])


def read_metrics(path) -> MetricsReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{path}: no rows")
    method = rows[0]["method"]
    frac = float(rows[0]["label_fraction"]) if rows[0]["label_fraction"] else None
    ok = [r for r in rows if not r["error"]]
    per = [(r["path"], float(r["dsc"])) for r in ok]
    modes = {"ensemble": [s for _, s in per],
             "net1": [float(r["dsc_net1"]) for r in ok],
             "net2": [float(r["dsc_net2"]) for r in ok]}
    return MetricsReport(
        per_image=per,
        mean_dsc=_mean(modes["ensemble"]),
        config="",
        network_breakdown={m: _mean(v) for m, v in modes.items()},
        per_image_modes=modes,
        errors=[(r["path"], r["error"]) for r in rows if r["error"]],
        method=method,
        label_fraction=frac,
    )


def fraction_label(fraction: float | None) -> str:
    if fraction is None:
        return "l_a = ?"
    return f"l_a = {fraction * 100:g}%"


def write_report(reports: Sequence[MetricsReport], labels: Sequence[str], out) -> str:
    """Method x label-fraction table of mean DSC, followed by a per-image appendix.

    ``labels[i]`` names the method (table row) of ``reports[i]``; the column
    comes from the report's label fraction. Returns the CSV text.
    """
    if len(reports) != len(labels):
        raise ValidationError("reports and labels must have equal length")
    fractions = sorted({r.label_fraction for r in reports}, key=lambda f: (f is None, f or 0.0))
    methods = list(dict.fromkeys(labels))
    cells = {(lab, r.label_fraction): r.mean_dsc for r, lab in zip(reports, labels)}
    rows = [["Method", *[fraction_label(f) for f in fractions]]]
    for m in methods:
        rows.append([m, *[f"{cells[(m, f)]:.6f}" if (m, f) in cells else "" for f in fractions]])
    rows.append([])
    rows.append(["# per-image"])
    rows.append(["method", "label_fraction", "path", "dsc_ensemble", "dsc_net1", "dsc_net2"])
    for r, lab in zip(reports, labels):
        frac = "" if r.label_fraction is None else f"{r.label_fraction:g}"
        for i, (path, s) in enumerate(r.per_image):
            n1 = r.per_image_modes.get("net1", [float("nan")] * len(r.per_image))[i]
            n2 = r.per_image_modes.get("net2", [float("nan")] * len(r.per_image))[i]
            rows.append([lab, frac, path, f"{s:.6f}", f"{n1:.6f}", f"{n2:.6f}"])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text)
    return text


def read_report(path) -> dict[str, dict[str, float]]:
    """Parse the summary table of :func:`write_report` into ``{method: {column: dsc}}``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    table = {}
    for row in rows[1:]:
        if not row:
            break
        table[row[0]] = {h: float(v) for h, v in zip(header[1:], row[1:]) if v}
    return table
