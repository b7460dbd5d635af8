"""Trainable blocks of the explorer.

Every block is a plain ``nn.Module`` on NCHW tensors. Three profiles are
predefined. ``FULL`` is the reference architecture on 128x256 panoramas.
``MICRO`` works on 32x64 panoramas with every channel count divided by 8 and
serves gradient and smoke tests. ``SMALL`` keeps the 32x64 geometry with
wider layers and is the desk-scale training profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import nn
import torch.nn.functional as F

from .glimpse import GridGeometry
from .memory import SLOT_COUNT

CLASSIFICATION_MODES = ("off", "from-recon", "from-vector")


@dataclass(frozen=True)
class Profile:
    name: str
    block: int
    local_widths: tuple[int, ...] = (32, 64, 128)
    local_pools: int = 3
    desc_channels: int = 8
    desc_pool: int = 4
    bg_hidden: int = 1024
    up_widths: tuple[int, ...] = (128, 64, 32, 32)
    att_hidden: int = 512
    vec_cls_hidden: int = 512
    vgg_widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    vgg_fc: int = 1024
    num_classes: int = 26
    vgg_depths: tuple[int, ...] = field(default=(2, 2, 4, 4, 4))

    @property
    def grid(self) -> GridGeometry:
        return GridGeometry(self.block)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.grid.height, self.grid.width

    @property
    def bottleneck_size(self) -> int:
        return self.grid.glimpse >> self.local_pools

    @property
    def features(self) -> int:
        """Length of one glimpse descriptor."""
        return self.desc_channels * self.desc_pool**2

    @property
    def vector_length(self) -> int:
        return SLOT_COUNT * self.features

    @property
    def scales(self) -> list[tuple[int, int]]:
        H, W = self.image_size
        return [(H // 8, W // 8), (H // 4, W // 4), (H // 2, W // 2), (H, W)]


FULL = Profile("full", block=16)
MICRO = Profile(
    "micro",
    block=4,
    local_widths=(4, 8, 16),
    local_pools=2,
    desc_channels=4,
    desc_pool=2,
    bg_hidden=128,
    up_widths=(16, 8, 4, 4),
    att_hidden=64,
    vec_cls_hidden=64,
    vgg_widths=(8, 16, 32, 64, 64),
    vgg_fc=128,
)
SMALL = Profile(
    "small",
    block=4,
    local_widths=(16, 32, 64),
    local_pools=2,
    desc_channels=4,
    desc_pool=2,
    bg_hidden=256,
    up_widths=(64, 32, 32, 16),
    att_hidden=256,
    vec_cls_hidden=256,
    vgg_widths=(16, 32, 64, 128, 128),
    vgg_fc=256,
)
PROFILES = {"full": FULL, "micro": MICRO, "small": SMALL}


def get_profile(name: str, num_classes: int | None = None) -> Profile:
    try:
        p = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
    return replace(p, num_classes=num_classes) if num_classes else p


def conv_block(cin: int, cout: int, n: int = 2) -> nn.Sequential:
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), nn.ReLU()]
    return nn.Sequential(*layers)


def mlp(sizes: list[int]) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class LocalReconNet(nn.Module):
    """U-Net that brings a retina canvas back to full resolution.

    Input is the 5-plane sensor tensor (RGB canvas, is-full-res, is-valid).
    Returns the reconstruction and the bottleneck activations.
    """

    def __init__(self, widths=(32, 64, 128), pools: int = 3, in_channels: int = 5):
        super().__init__()
        if pools not in (len(widths) - 1, len(widths)):
            raise ValueError("pools must equal len(widths) or len(widths) - 1")
        self.pools = pools
        chans = [in_channels, *widths]
        self.down = nn.ModuleList(conv_block(chans[i], chans[i + 1]) for i in range(len(widths)))
        self.mid = conv_block(widths[-1], widths[-1])
        skips = list(widths[:pools])
        ups, stages = [], []
        cur = widths[-1]
        for c in reversed(skips):
            ups.append(nn.ConvTranspose2d(cur, c, 2, stride=2))
            stages.append(conv_block(2 * c, c))
            cur = c
        self.ups = nn.ModuleList(ups)
        self.up_stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(cur, 3, 1)

    def forward(self, x):
        skips = []
        for i, stage in enumerate(self.down):
            x = stage(x)
            if i < self.pools:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        bottleneck = self.mid(x)
        x = bottleneck
        for up, stage, skip in zip(self.ups, self.up_stages, reversed(skips)):
            x = stage(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.head(x)), bottleneck


class GlimpseDescriptor(nn.Module):
    """Bottleneck -> 1x1 conv -> adaptive average pool -> flat descriptor."""

    def __init__(self, in_channels: int = 128, channels: int = 8, pool: int = 4):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, channels, 1)
        self.pool = pool

    def forward(self, bottleneck):
        return F.adaptive_avg_pool2d(self.proj(bottleneck), self.pool).flatten(1)


class BackgroundNet(nn.Module):
    """Feature vector -> coarse panorama (B, 3, h, w)."""

    def __init__(self, vector_length: int = 4096, hidden: int = 1024, size=(16, 32)):
        super().__init__()
        self.size = tuple(size)
        self.fc = mlp([vector_length, hidden, 3 * self.size[0] * self.size[1]])

    def forward(self, v):
        return torch.sigmoid(self.fc(v)).view(-1, 3, *self.size)


class UpsamplerNet(nn.Module):
    """Coarse panorama + fit-in matrix views -> reconstructions at every scale.

    Stage 0 runs at the background resolution; each later stage doubles the
    resolution with a transposed convolution. Every stage concatenates the
    matrix view (RGB + occupancy fraction) at its scale and emits a
    reconstruction through a 1x1 conv and sigmoid. The head sees the view
    again next to the stage features, so pasting observed pixels is a short
    path.
    """

    def __init__(self, widths=(128, 64, 32, 32)):
        super().__init__()
        self.stages = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.heads = nn.ModuleList()
        for k, c in enumerate(widths):
            cin = 3 if k == 0 else widths[k - 1]
            if k:
                self.ups.append(nn.ConvTranspose2d(cin, c, 2, stride=2))
                cin = c
            self.stages.append(conv_block(cin + 4, c))
            self.heads.append(nn.Conv2d(c + 4, 3, 1))

    def forward(self, background, views):
        if len(views) != len(self.stages):
            raise ValueError(f"expected {len(self.stages)} matrix views, got {len(views)}")
        outs = []
        x = background
        for k, (stage, head) in enumerate(zip(self.stages, self.heads)):
            if k:
                x = self.ups[k - 1](x)
            data, occ = views[k]
            if data.shape[-2:] != x.shape[-2:]:
                raise ValueError(f"view at stage {k} has shape {tuple(data.shape[-2:])}, expected {tuple(x.shape[-2:])}")
            x = stage(torch.cat([x, data, occ], dim=1))
            outs.append(torch.sigmoid(head(torch.cat([x, data, occ], dim=1))))
        return outs


class AttentionHead(nn.Module):
    def __init__(self, vector_length: int = 4096, hidden: int = 512, patches: int = 128):
        super().__init__()
        self.fc = mlp([vector_length, hidden, patches])

    def forward(self, v):
        return self.fc(v)


class VGGClassifier(nn.Module):
    """VGG-19 style backbone (16 convs in 5 pooled blocks) + 3 FC layers."""

    def __init__(self, widths=(64, 128, 256, 512, 512), depths=(2, 2, 4, 4, 4), fc: int = 1024, num_classes: int = 26):
        super().__init__()
        blocks, cin = [], 3
        for c, n in zip(widths, depths):
            blocks += [conv_block(cin, c, n), nn.MaxPool2d(2)]
            cin = c
        self.features = nn.Sequential(*blocks)
        self.classifier = mlp([2 * cin, fc, fc, num_classes])

    def forward(self, x):
        x = F.adaptive_avg_pool2d(self.features(x), (1, 2))
        return self.classifier(x.flatten(1))


class VectorClassifier(nn.Module):
    def __init__(self, vector_length: int = 4096, hidden: int = 512, num_classes: int = 26):
        super().__init__()
        self.fc = mlp([vector_length, hidden, num_classes])

    def forward(self, v):
        return self.fc(v)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


class Explorer(nn.Module):
    """All blocks of one agent, plus the optional classification heads."""

    def __init__(self, profile: Profile = FULL, classification: str = "off"):
        super().__init__()
        if classification not in CLASSIFICATION_MODES:
            raise ValueError(f"classification must be one of {CLASSIFICATION_MODES}")
        self.profile = profile
        self.classification = classification
        p = profile
        self.local = LocalReconNet(p.local_widths, p.local_pools)
        self.descriptor = GlimpseDescriptor(p.local_widths[-1], p.desc_channels, p.desc_pool)
        self.background = BackgroundNet(p.vector_length, p.bg_hidden, p.scales[0])
        self.upsampler = UpsamplerNet(p.up_widths)
        self.attention = AttentionHead(p.vector_length, p.att_hidden, p.grid.patch_count)
        if classification == "from-recon":
            self.recon_classifier = make_vgg(p)
        elif classification == "from-vector":
            self.class_features = GlimpseDescriptor(p.local_widths[-1], p.desc_channels, p.desc_pool)
            self.vector_classifier = VectorClassifier(p.vector_length, p.vec_cls_hidden, p.num_classes)
        init_weights(self)


def make_vgg(profile: Profile) -> VGGClassifier:
    net = VGGClassifier(profile.vgg_widths, profile.vgg_depths, profile.vgg_fc, profile.num_classes)
    init_weights(net)
    return net


# ---------------------------------------------------------------------------
# functional entry points


def local_forward(model: Explorer, sensor: torch.Tensor):
    g = model.profile.grid.glimpse
    if sensor.dim() != 4 or sensor.shape[1:] != (5, g, g):
        raise ValueError(f"sensor input must be (B, 5, {g}, {g}), got {tuple(sensor.shape)}")
    return model.local(sensor)


def descriptor(model: Explorer, bottleneck: torch.Tensor) -> torch.Tensor:
    p = model.profile
    expect = (p.local_widths[-1], p.bottleneck_size, p.bottleneck_size)
    if bottleneck.shape[1:] != expect:
        raise ValueError(f"bottleneck must be (B, {expect}), got {tuple(bottleneck.shape)}")
    return model.descriptor(bottleneck)


def background_forward(model: Explorer, vector: torch.Tensor) -> torch.Tensor:
    return model.background(vector)


def upsample_forward(model: Explorer, background: torch.Tensor, views) -> list[torch.Tensor]:
    return model.upsampler(background, views)


def attention_forward(model: Explorer, vector: torch.Tensor) -> torch.Tensor:
    return model.attention(vector)


def classify(model: nn.Module, mode: str, inputs: torch.Tensor) -> torch.Tensor:
    """Class logits for one of the three classification settings.

    ``upper-bound`` expects a bare ``VGGClassifier`` over raw panoramas; the
    other modes take an ``Explorer`` built with that classification mode.
    """
    if mode == "upper-bound":
        if not isinstance(model, VGGClassifier) or inputs.dim() != 4:
            raise ValueError("upper-bound mode needs a VGGClassifier and (B, 3, H, W) panoramas")
        return model(inputs)
    if mode == "from-recon":
        if getattr(model, "classification", None) != mode or inputs.dim() != 4:
            raise ValueError("from-recon mode needs a from-recon Explorer and (B, 3, H, W) reconstructions")
        return model.recon_classifier(inputs)
    if mode == "from-vector":
        if getattr(model, "classification", None) != mode or inputs.dim() != 2:
            raise ValueError("from-vector mode needs a from-vector Explorer and (B, L) class vectors")
        return model.vector_classifier(inputs)
    raise ValueError(f"unknown classification mode {mode!r}")
