"""Segmentation networks and the classifier / projector heads.

``SegNet`` is a compact encoder-decoder: a four-stage encoder built from
multi-scale split-channel residual blocks, and a UNet-style decoder of four
conv + upsample stages with skip connections. The heads consume the 1-channel
probability maps produced by ``SegNet``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, WeightsLoadError

WEIGHTS_FORMAT = "minmaxsim-encoder"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    encoder_stages: int = 4
    encoder_base_channels: int = 32
    multi_scale_groups: int = 4
    decoder_stages: int = 4
    pretrained_weights_path: str | None = None

    def __post_init__(self):
        if self.encoder_stages != 4 or self.decoder_stages != 4:
            raise ValueError("encoder and decoder must both have 4 stages")
        if self.encoder_base_channels % self.multi_scale_groups:
            raise ValueError("encoder_base_channels must be divisible by multi_scale_groups")


@dataclass(frozen=True)
class HeadConfig:
    conv_channels: int = 64
    pool_count: int = 3
    out_dim: int = 128


CLASSIFIER_DEFAULT = HeadConfig(conv_channels=64, pool_count=3, out_dim=128)
PROJECTOR_DEFAULT = HeadConfig(conv_channels=64, pool_count=2, out_dim=64)


@dataclass(frozen=True)
class ModelConfig:
    seg: SegNetConfig = SegNetConfig()
    classifier: HeadConfig = CLASSIFIER_DEFAULT
    projector: HeadConfig = PROJECTOR_DEFAULT

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(seg=SegNetConfig(**d.get("seg", {})),
                   classifier=HeadConfig(**d.get("classifier", asdict(CLASSIFIER_DEFAULT))),
                   projector=HeadConfig(**d.get("projector", asdict(PROJECTOR_DEFAULT))))


def conv_bn_relu(cin, cout, k=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class MultiScaleBlock(nn.Module):
    """Residual block with hierarchical split-channel 3x3 convolutions.

    The 1x1-projected input is split into ``groups`` slices; slice i is
    convolved after adding the output of slice i-1, which widens the
    receptive field progressively inside one block.
    """

    def __init__(self, cin, cout, groups=4, stride=1):
        super().__init__()
        self.groups = groups
        width = cout // groups
        self.reduce = conv_bn_relu(cin, cout, k=1)
        self.pool = nn.AvgPool2d(2) if stride == 2 else nn.Identity()
        self.convs = nn.ModuleList(conv_bn_relu(width, width) for _ in range(groups - 1))
        self.expand = nn.Sequential(nn.Conv2d(cout, cout, 1, bias=False), nn.BatchNorm2d(cout))
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.AvgPool2d(stride) if stride > 1 else nn.Identity(),
                nn.Conv2d(cin, cout, 1, bias=False),
                nn.BatchNorm2d(cout),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.pool(self.reduce(x))
        xs = torch.chunk(out, self.groups, dim=1)
        ys = [xs[0]]
        prev = None
        for i, conv in enumerate(self.convs, start=1):
            prev = conv(xs[i] if prev is None else xs[i] + prev)
            ys.append(prev)
        out = self.expand(torch.cat(ys, dim=1))
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    def __init__(self, base=32, groups=4):
        super().__init__()
        self.stem = conv_bn_relu(3, base)
        chans = [base, base * 2, base * 4, base * 8]
        cin = base
        stages = []
        for c in chans:
            stages.append(MultiScaleBlock(cin, c, groups=groups, stride=2))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.channels = [base] + chans

    def forward(self, x):
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats  # resolutions H, H/2, H/4, H/8, H/16


class Decoder(nn.Module):
    def __init__(self, enc_channels):
        super().__init__()
        skips = enc_channels[-2::-1]  # H/8, H/4, H/2, H
        cin = enc_channels[-1]
        blocks = []
        for skip in skips:
            cout = max(skip, 8)
            blocks.append(conv_bn_relu(cin, cout))
            cin = cout + skip
        self.blocks = nn.ModuleList(blocks)
        self.fuse = conv_bn_relu(cin, enc_channels[0])
        self.head = nn.Conv2d(enc_channels[0], 1, 1)

    def forward(self, feats):
        d = feats[-1]
        for block, skip in zip(self.blocks, feats[-2::-1]):
            d = F.interpolate(block(d), scale_factor=2, mode="nearest")
            d = torch.cat([d, skip], dim=1)
        return self.head(self.fuse(d))


class SegNet(nn.Module):
    def __init__(self, cfg: SegNetConfig = SegNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_base_channels, cfg.multi_scale_groups)
        self.decoder = Decoder(self.encoder.channels)

    def logits(self, images):
        h, w = images.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"input H and W must be divisible by 16, got {h}x{w}")
        return self.decoder(self.encoder(images))

    def forward(self, images):
        return torch.sigmoid(self.logits(images))


class _PoolingHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        layers = []
        cin = 1
        for _ in range(cfg.pool_count):
            layers += [conv_bn_relu(cin, cfg.conv_channels), nn.MaxPool2d(2)]
            cin = cfg.conv_channels
        self.body = nn.Sequential(*layers)
        self.factor = 2 ** cfg.pool_count

    def features(self, pred):
        h, w = pred.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"prediction H and W must be divisible by {self.factor}, got {h}x{w}")
        return self.body(pred)


class Classifier(_PoolingHead):
    """Pooled conv stack -> global average -> linear -> unit vector."""

    def __init__(self, cfg: HeadConfig = CLASSIFIER_DEFAULT):
        super().__init__(cfg)
        self.fc = nn.Linear(cfg.conv_channels, cfg.out_dim)

    def forward(self, pred):
        x = self.features(pred).mean(dim=(2, 3))
        return F.normalize(self.fc(x), dim=1)


class Projector(_PoolingHead):
    """Pooled conv stack -> 1x1 conv -> per-location unit fibers."""

    def __init__(self, cfg: HeadConfig = PROJECTOR_DEFAULT):
        super().__init__(cfg)
        self.out = nn.Conv2d(cfg.conv_channels, cfg.out_dim, 1)

    def forward(self, pred):
        return F.normalize(self.out(self.features(pred)), dim=1)


class MMSNet(nn.Module):
    """Container for both segmentation networks and their heads.

    ``seg1``/``seg2`` share the architecture but not the weights. Heads can be
    left out (``None``) for the ablation modes.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), use_classifiers=True, use_projectors=True):
        super().__init__()
        self.cfg = cfg
        self.seg1 = SegNet(cfg.seg)
        self.seg2 = SegNet(cfg.seg)
        self.cls1 = Classifier(cfg.classifier) if use_classifiers else None
        self.cls2 = Classifier(cfg.classifier) if use_classifiers else None
        self.proj1 = Projector(cfg.projector) if use_projectors else None
        self.proj2 = Projector(cfg.projector) if use_projectors else None

    @property
    def has_classifiers(self):
        return self.cls1 is not None

    @property
    def has_projectors(self):
        return self.proj1 is not None


def _sub_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def init_params(cfg: ModelConfig = ModelConfig(), seed: int = 0,
                use_classifiers=True, use_projectors=True) -> MMSNet:
    """Build an :class:`MMSNet` with each of its six parts seeded separately.

    Seeding is local (the global torch RNG state is restored afterwards).
    If ``cfg.seg.pretrained_weights_path`` is set, the encoder weights in
    that file are copied into both encoders.
    """
    names = ["seg1", "seg2", "cls1", "cls2", "proj1", "proj2"]
    seeds = dict(zip(names, _sub_seeds(seed, len(names))))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeds["seg1"])
        model = MMSNet(cfg, use_classifiers, use_projectors)
        for name in names:
            module = getattr(model, name)
            if module is None:
                continue
            torch.manual_seed(seeds[name])
            for m in module.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    m.reset_parameters()
    if cfg.seg.pretrained_weights_path:
        state = load_encoder_weights(cfg.seg.pretrained_weights_path)
        for seg in (model.seg1, model.seg2):
            _assign_encoder(seg.encoder, state)
    return model


def save_encoder_weights(encoder: nn.Module, path) -> None:
    """Write an encoder's parameters and buffers in the pretrained-weights format."""
    torch.save({
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "params": {k: v.detach().clone() for k, v in encoder.state_dict().items()},
    }, Path(path))


def load_encoder_weights(path) -> dict[str, torch.Tensor]:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightsLoadError(f"cannot read weights file {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != WEIGHTS_FORMAT:
        raise WeightsLoadError(f"{path} is not a {WEIGHTS_FORMAT} file")
    if blob.get("version") != WEIGHTS_VERSION:
        raise WeightsLoadError(f"unsupported weights version {blob.get('version')!r}")
    params = blob.get("params")
    if not isinstance(params, dict):
        raise WeightsLoadError("weights file has no 'params' mapping")
    return params


def _assign_encoder(encoder: nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = encoder.state_dict()
    for name, tensor in own.items():
        if name not in params:
            raise WeightsLoadError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != tuple(tensor.shape):
            raise WeightsLoadError(
                f"shape mismatch for {name!r}: file {tuple(params[name].shape)}, model {tuple(tensor.shape)}")
    extra = sorted(set(params) - set(own))
    if extra:
        raise WeightsLoadError(f"unexpected parameter {extra[0]!r}")
    encoder.load_state_dict({k: params[k] for k in own})


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
