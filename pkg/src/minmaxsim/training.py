"""The joint optimisation loop for both networks and their heads, plus the
single-network supervised baseline."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses
from .checkpoint import CheckpointState, config_digest, save_checkpoint
from .data import AugmentConfig, ImageStore, SplitManifest, augment_pair, batch_stream, steps_per_epoch
from .errors import ParameterError, TrainingAbort, ValidationError
from .losses import COMPONENTS, LossWeights
from .models import MMSNet, ModelConfig, init_params

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.mms"
METRICS_NAME = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    tau: float = 0.07
    loss_weights: LossWeights = field(default_factory=LossWeights)
    k_neg: int | str = 256
    use_classifiers: bool = True
    use_projectors: bool = True
    per_network_views: bool = False
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        elif isinstance(self.loss_weights, (list, tuple)):
            object.__setattr__(self, "loss_weights", LossWeights(*self.loss_weights))
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise ParameterError(f"unsupported optimizer {self.optimizer!r}")
        if self.tau <= 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.k_neg != "all" and not (isinstance(self.k_neg, int) and self.k_neg >= 1):
            raise ParameterError(f"k_neg must be a positive int or 'all', got {self.k_neg!r}")
        if self.checkpoint_every < 1:
            raise ParameterError("checkpoint_every must be >= 1")

    @property
    def effective_weights(self) -> LossWeights:
        """Loss weights with disabled heads forced to zero."""
        lw = self.loss_weights
        return replace(lw, nce_sup=lw.nce_sup if self.use_classifiers else 0.0,
                       nce=lw.nce if self.use_projectors else 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _resolve_k_neg(k_neg, h: int, w: int):
    if k_neg == "all" or k_neg < h * w:
        return k_neg
    return "all"


def compute_losses(model: MMSNet, batch, tcfg: TrainConfig, step_seed: int = 0) -> dict[str, torch.Tensor]:
    """Forward one batch and return the four loss components.

    Components with zero effective weight are skipped and reported as 0.
    """
    lw = tcfg.effective_weights
    zero = torch.zeros(())
    out = dict.fromkeys(COMPONENTS, zero)

    p1 = model.seg1(batch.x1)
    p2 = model.seg2(batch.x2)
    out["l_sup"] = losses.sup_loss(p1, batch.y1) + losses.sup_loss(p2, batch.y2)

    if lw.nce_sup > 0:
        if not model.has_classifiers:
            raise ValidationError("classifier loss enabled but the model has no classifiers")
        q1, q2 = model.cls1(p1), model.cls2(p2)
        out["l_nce_sup"] = 0.5 * (losses.info_nce_all_negative(q1, q2, tcfg.tau)
                                  + losses.info_nce_all_negative(q2, q1, tcfg.tau))

    if batch.u1 is not None and (lw.sim > 0 or lw.nce > 0):
        pu1 = model.seg1(batch.u1)
        pu2 = model.seg2(batch.u2)
        if lw.sim > 0:
            out["l_sim"] = losses.similarity_loss(pu1, pu2)
        if lw.nce > 0:
            if not model.has_projectors:
                raise ValidationError("pixel contrastive loss enabled but the model has no projectors")
            f1, f2 = model.proj1(pu1), model.proj2(pu2)
            k_neg = _resolve_k_neg(tcfg.k_neg, *f1.shape[-2:])
            out["l_nce"] = losses.pixel_info_nce(f1, f2, tcfg.tau, k_neg, step_seed)
    return out


def _needs_unlabeled(tcfg: TrainConfig) -> bool:
    lw = tcfg.effective_weights
    return lw.sim > 0 or lw.nce > 0


def _append_metrics(out_dir: Path | None, row: dict) -> None:
    if out_dir is None:
        return
    with open(out_dir / METRICS_NAME, "a") as fh:
        fh.write(json.dumps(row) + "\n")


def _snapshot(model, opt, epoch, tcfg, model_cfg, history, meta) -> CheckpointState:
    tdict = tcfg.to_dict()
    return CheckpointState(
        model=model,
        optimizer_state=opt.state_dict() if opt is not None else None,
        epoch=epoch,
        train_config=tdict,
        train_config_hash=config_digest(tdict, model_cfg.to_dict()),
        loss_history=list(history),
        meta=dict(meta),
    )


StepCallback = Callable[[int, int, dict], None]


def train(manifest: SplitManifest, tcfg: TrainConfig, acfg: AugmentConfig, out_dir=None,
          model_cfg: ModelConfig = ModelConfig(), store: ImageStore | None = None,
          on_step: StepCallback | None = None, method: str = "mms") -> CheckpointState:
    """Jointly train both segmentation networks, classifiers and projectors.

    Each step: labeled X1 through network 1 and X2 through network 2, the
    shared unlabeled batch through both, then one Adam step on the weighted
    sum of the supervised, all-negative, similarity and pixel contrastive
    losses. Per-epoch component means go to ``metrics.jsonl`` in ``out_dir``;
    ``checkpoint.mms`` is rewritten every ``checkpoint_every`` epochs and at
    the end. A non-finite component raises :class:`TrainingAbort` and leaves
    the last good checkpoint in place. ``method`` is stored in the checkpoint
    metadata and names the run in reports.
    """
    manifest.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_NAME).unlink(missing_ok=True)
    store = store or ImageStore()
    model = init_params(model_cfg, tcfg.seed, tcfg.use_classifiers, tcfg.use_projectors)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)
    meta = {"method": method, "label_fraction": manifest.label_fraction,
            "target_size": list(acfg.target_size)}
    history: list[dict] = []
    ckpt_path = out / CHECKPOINT_NAME if out is not None else None
    if ckpt_path is not None:
        save_checkpoint(_snapshot(model, opt, 0, tcfg, model_cfg, history, meta), ckpt_path)
    use_unl = _needs_unlabeled(tcfg)
    if use_unl and not manifest.unlabeled:
        log.warning("unlabeled pool is empty; unlabeled loss terms will be zero")

    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
        n = 0
        stream = batch_stream(manifest, acfg, tcfg.batch_size, _derive_seed(tcfg.seed, epoch), store,
                              per_network_views=tcfg.per_network_views, include_unlabeled=use_unl)
        for step, batch in enumerate(stream):
            comps = compute_losses(model, batch, tcfg, _derive_seed(tcfg.seed, epoch, step, 7))
            try:
                total = losses.total_loss(*(comps[c] for c in COMPONENTS), tcfg.effective_weights)
            except TrainingAbort:
                log.error("aborting at epoch %d step %d; last checkpoint kept at %s", epoch, step, ckpt_path)
                raise
            opt.zero_grad(set_to_none=True)
            if torch.is_tensor(total) and total.requires_grad:
                total.backward()
                opt.step()
            values = {c: float(comps[c].detach()) for c in COMPONENTS}
            values["total"] = float(total.detach()) if torch.is_tensor(total) else float(total)
            if on_step is not None:
                on_step(epoch, step, values)
            for k, v in values.items():
                sums[k] += v
            n += 1
        row = {"epoch": epoch, **{k: v / max(n, 1) for k, v in sums.items()}}
        history.append(row)
        _append_metrics(out, row)
        log.info("epoch %d total %.4f", epoch, row["total"])
        if ckpt_path is not None and (epoch % tcfg.checkpoint_every == 0 or epoch == tcfg.epochs):
            save_checkpoint(_snapshot(model, opt, epoch, tcfg, model_cfg, history, meta), ckpt_path)

    model.eval()
    return _snapshot(model, opt, tcfg.epochs, tcfg, model_cfg, history, meta)


def train_supervised_baseline(manifest: SplitManifest, tcfg: TrainConfig, acfg: AugmentConfig, out_dir=None,
                              model_cfg: ModelConfig = ModelConfig(),
                              store: ImageStore | None = None) -> CheckpointState:
    """Single network on the full labeled set with the supervised loss only.

    The second network slot holds a copy of the first so the checkpoint can be
    used anywhere an MMS checkpoint is expected.
    """
    if manifest.label_fraction < 1.0:
        raise ValidationError("the supervised baseline needs every label (label_fraction = 1.0)")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_NAME).unlink(missing_ok=True)
    store = store or ImageStore()
    tcfg = replace(tcfg, loss_weights=LossWeights(1.0, 0.0, 0.0, 0.0),
                   use_classifiers=False, use_projectors=False)
    model = init_params(model_cfg, tcfg.seed, use_classifiers=False, use_projectors=False)
    opt = torch.optim.Adam(model.seg1.parameters(), lr=tcfg.learning_rate)
    meta = {"method": "supervised", "label_fraction": manifest.label_fraction,
            "target_size": list(acfg.target_size)}
    pairs = list(manifest.labeled_x1) + list(manifest.labeled_x2)
    history: list[dict] = []
    ckpt_path = out / CHECKPOINT_NAME if out is not None else None

    def finish(epoch):
        model.seg2.load_state_dict(copy.deepcopy(model.seg1.state_dict()))
        return _snapshot(model, opt, epoch, tcfg, model_cfg, history, meta)

    if ckpt_path is not None:
        save_checkpoint(finish(0), ckpt_path)
    n_steps = math.ceil(len(pairs) / tcfg.batch_size)
    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        eseed = _derive_seed(tcfg.seed, epoch)
        order = np.random.default_rng(eseed).permutation(len(pairs))
        total = 0.0
        for step in range(n_steps):
            idx = order[step * tcfg.batch_size:(step + 1) * tcfg.batch_size]
            xs, ys = zip(*(augment_pair(store.image(pairs[i][0]), store.mask(pairs[i][1]), acfg,
                                        np.random.SeedSequence([eseed, step, j]))
                           for j, i in enumerate(idx)))
            l_sup = losses.sup_loss(model.seg1(torch.stack(xs)), torch.stack(ys))
            value = float(l_sup.detach())
            if not math.isfinite(value):
                raise TrainingAbort("l_sup", value)
            opt.zero_grad(set_to_none=True)
            l_sup.backward()
            opt.step()
            total += value
        row = {"epoch": epoch, "l_sup": total / n_steps, "total": total / n_steps}
        history.append(row)
        _append_metrics(out, row)
        if ckpt_path is not None and (epoch % tcfg.checkpoint_every == 0 or epoch == tcfg.epochs):
            save_checkpoint(finish(epoch), ckpt_path)
    model.eval()
    return finish(tcfg.epochs)


__all__ = ["TrainConfig", "compute_losses", "train", "train_supervised_baseline",
           "CHECKPOINT_NAME", "METRICS_NAME", "steps_per_epoch"]
