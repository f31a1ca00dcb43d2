"""Network definitions.

* :class:`ResiGenerator` -- backbone producing a residual item, added to
  ``k`` times the input, then resized to the other domain's tile size.
* :class:`Discriminator` -- fully convolutional WGAN critic (no output
  activation).
* :class:`OutputSpaceDiscriminator` -- critic over segmentation softmax maps,
  output upsampled to the input size.
* :class:`Segmenter` -- DeepLabV3-style network (ResNet-34 encoder at full
  scale, a narrow encoder for desk-scale runs).

Tensors are NCHW; images live in [-1, 1].
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

Backbone = Literal["unet", "linknet", "resnet"]
ResizeMethod = Literal["bilinear", "nearest", "learned_stub", "none"]

BACKBONES = ("unet", "linknet", "resnet")
RESIZERS = ("bilinear", "nearest", "learned_stub", "none")
K_MODES = ("fixed", "learnable")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over all parameters, in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- resizing


def resize_image(x: torch.Tensor, out_px: int, method: str = "bilinear") -> torch.Tensor:
    """Resize a batch of square images to ``out_px``.

    ``bilinear`` uses half-pixel centers (``align_corners=False``);
    ``nearest`` uses the same center alignment as the label resizer.
    """
    if out_px <= 0:
        raise ValueError(f"out_px must be positive, got {out_px}")
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected square images, got {tuple(x.shape[-2:])}")
    if method == "none" or x.shape[-1] == out_px:
        return x
    if method == "bilinear":
        return F.interpolate(x, size=(out_px, out_px), mode="bilinear", align_corners=False)
    if method == "nearest":
        return F.interpolate(x, size=(out_px, out_px), mode="nearest-exact")
    raise ValueError(f"unknown resize method {method!r}")


class LearnedResizer(nn.Module):
    """Small trainable resizer: bilinear skip path plus a two-conv correction."""

    def __init__(self, channels: int, out_px: int, width: int = 16):
        super().__init__()
        self.out_px = out_px
        self.pre = nn.Sequential(nn.Conv2d(channels, width, 3, padding=1), nn.LeakyReLU(0.2))
        self.post = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, x):
        skip = resize_image(x, self.out_px, "bilinear")
        feat = resize_image(self.pre(x), self.out_px, "bilinear")
        return skip + self.post(feat)


class Resizer(nn.Module):
    def __init__(self, method: str, channels: int, out_px: int):
        super().__init__()
        if method not in RESIZERS:
            raise ValueError(f"unknown resizer {method!r}")
        self.method = method
        self.out_px = out_px
        self.net = LearnedResizer(channels, out_px) if method == "learned_stub" else None

    def forward(self, x):
        if self.net is not None:
            return self.net(x)
        return resize_image(x, self.out_px, self.method)


# --------------------------------------------------------------- backbones


def _unet_channels(depth: int, width: int) -> tuple[list[int], list[int]]:
    """Actual and nominal (width 64) channel counts per level."""
    mult = [min(8, 2**i) for i in range(depth)]
    return [m * width for m in mult], [m * 64 for m in mult]


class UNetBackbone(nn.Module):
    """Encoder-decoder with stride-2 4x4 convolutions.

    ``merge="concat"`` gives U-Net skips, ``merge="add"`` gives LinkNet-style
    additive skips. With ``depth=7, width=64`` the down path has
    64, 128, 256, 512, 512, 512, 512 channels.
    """

    def __init__(self, channels: int = 3, depth: int = 7, width: int = 64, merge: str = "concat"):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be >= 2")
        self.merge = merge
        chans, nominal = _unet_channels(depth, width)
        self.down = nn.ModuleList()
        in_ch = channels
        for i, c in enumerate(chans):
            layers: list[nn.Module] = [nn.Conv2d(in_ch, c, 4, 2, 1)]
            innermost = i == depth - 1
            if 0 < i < depth - 1:
                layers.append(nn.InstanceNorm2d(c))
            layers.append(nn.ReLU() if innermost else nn.LeakyReLU(0.2))
            if nominal[i] > 256:
                layers.append(nn.Dropout(0.5))
            self.down.append(nn.Sequential(*layers))
            in_ch = c
        self.up = nn.ModuleList()
        for j in range(depth - 1, 0, -1):
            in_ch = chans[j] if (j == depth - 1 or merge == "add") else 2 * chans[j]
            layers = [nn.ConvTranspose2d(in_ch, chans[j - 1], 4, 2, 1), nn.InstanceNorm2d(chans[j - 1]), nn.ReLU()]
            if nominal[j - 1] > 256:
                layers.append(nn.Dropout(0.5))
            self.up.append(nn.Sequential(*layers))
        last_in = chans[0] if merge == "add" else 2 * chans[0]
        self.out = nn.ConvTranspose2d(last_in, channels, 4, 2, 1)

    def forward(self, x):
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips.pop()
        for layer in self.up:
            x = layer(x)
            s = skips.pop()
            x = x + s if self.merge == "add" else torch.cat([x, s], dim=1)
        return self.out(x)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResNetBackbone(nn.Module):
    """Two stride-2 downsamplings, residual blocks, two upsamplings."""

    def __init__(self, channels: int = 3, width: int = 64, n_blocks: int = 6):
        super().__init__()
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3), nn.Conv2d(channels, width, 7), nn.InstanceNorm2d(width), nn.ReLU(),
        ]
        ch = width
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, 2, 1), nn.InstanceNorm2d(ch * 2), nn.ReLU()]
            ch *= 2
        layers += [_ResBlock(ch) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1), nn.InstanceNorm2d(ch // 2), nn.ReLU()]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, channels, 7)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


# --------------------------------------------------------------- generator


@dataclass(frozen=True)
class ResiGeneratorConfig:
    in_px: int
    out_px: int
    channels: int = 3
    backbone: str = "unet"
    k_mode: str = "fixed"
    k_init: float = 1.0
    resizer: str = "bilinear"
    residual: bool = True
    depth: int = 7
    width: int = 64

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.k_mode not in K_MODES:
            raise ValueError(f"k_mode must be one of {K_MODES}, got {self.k_mode!r}")
        if self.resizer not in RESIZERS:
            raise ValueError(f"resizer must be one of {RESIZERS}, got {self.resizer!r}")
        if not torch.isfinite(torch.tensor(float(self.k_init))):
            raise ValueError("k_init must be finite")
        if self.in_px <= 0 or self.out_px <= 0:
            raise ValueError("in_px/out_px must be positive")
        if self.resizer == "none" and self.in_px != self.out_px:
            raise ValueError("resizer='none' needs in_px == out_px")
        divisor = 2**self.depth if self.backbone in ("unet", "linknet") else 4
        if self.in_px % divisor:
            raise ValueError(
                f"in_px={self.in_px} not divisible by {divisor} ({self.backbone}, depth {self.depth})"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ResiGenerator(nn.Module):
    """``resize(backbone(x) + k * x)``."""

    def __init__(self, config: ResiGeneratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.backbone == "resnet":
            self.backbone = ResNetBackbone(config.channels, config.width)
        else:
            merge = "concat" if config.backbone == "unet" else "add"
            self.backbone = UNetBackbone(config.channels, config.depth, config.width, merge)
        init_weights(self.backbone)
        k = torch.tensor(float(config.k_init))
        if config.k_mode == "learnable":
            self.k = nn.Parameter(k)
        else:
            self.register_buffer("k", k)
        self.resizer = Resizer(config.resizer, config.channels, config.out_px)
        if self.resizer.net is not None:
            init_weights(self.resizer.net)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.channels, c.in_px, c.in_px):
            raise ValueError(f"expected input (N, {c.channels}, {c.in_px}, {c.in_px}), got {tuple(x.shape)}")
        y = self.backbone(x)
        if c.residual:
            y = y + self.k * x
        return self.resizer(y)


def build_resi_generator(cfg: ResiGeneratorConfig) -> ResiGenerator:
    return ResiGenerator(cfg)


def forward_resi_generator(g: ResiGenerator, x: torch.Tensor) -> torch.Tensor:
    return g(x)


# ---------------------------------------------------------- discriminators


class Discriminator(nn.Module):
    """Critic with channels 64, 128, 256, 512, 512, 1 (scaled by ``width/64``).

    Every layer but the last is followed by batch norm and LeakyReLU(0.2);
    the last layer is linear so scores are unbounded.
    """

    def __init__(self, channels: int = 3, width: int = 64):
        super().__init__()
        chans = [width, width * 2, width * 4, width * 8, width * 8]
        strides = [2, 2, 2, 2, 1]
        layers: list[nn.Module] = []
        in_ch = channels
        for c, s in zip(chans, strides):
            layers += [nn.Conv2d(in_ch, c, 4, s, 1), nn.BatchNorm2d(c), nn.LeakyReLU(0.2)]
            in_ch = c
        layers.append(nn.Conv2d(in_ch, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        return self.net(x)

    def score(self, x):
        """Per-sample critic score: mean over the output map."""
        return self(x).mean(dim=(1, 2, 3))


def build_discriminator(channels: int = 3, width: int = 64) -> Discriminator:
    return Discriminator(channels, width)


class OutputSpaceDiscriminator(nn.Module):
    """4x4 stride-2 convs with channels 64, 128, 256, 512, 1; LeakyReLU(0.2) between.

    Returns logits upsampled (bilinear) to the input's spatial size.
    """

    def __init__(self, num_classes: int, width: int = 64):
        super().__init__()
        chans = [width, width * 2, width * 4, width * 8]
        layers: list[nn.Module] = []
        in_ch = num_classes
        for c in chans:
            layers += [nn.Conv2d(in_ch, c, 4, 2, 1), nn.LeakyReLU(0.2)]
            in_ch = c
        layers.append(nn.Conv2d(in_ch, 1, 4, 2, 1))
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, p):
        out = self.net(p)
        return F.interpolate(out, size=p.shape[-2:], mode="bilinear", align_corners=False)


def build_output_discriminator(num_classes: int, width: int = 64) -> OutputSpaceDiscriminator:
    return OutputSpaceDiscriminator(num_classes, width)


# --------------------------------------------------------------- segmenter


class ASPP(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, rates: tuple[int, ...]):
        super().__init__()

        def branch(k, d):
            pad = 0 if k == 1 else d
            return nn.Sequential(nn.Conv2d(in_ch, out_ch, k, padding=pad, dilation=d, bias=False),
                                 nn.BatchNorm2d(out_ch), nn.ReLU())

        self.branches = nn.ModuleList([branch(1, 1)] + [branch(3, r) for r in rates])
        # No norm on the pooled branch: it is 1x1 and batch size may be 1.
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_ch, out_ch, 1), nn.ReLU())
        self.project = nn.Sequential(
            nn.Conv2d(out_ch * (len(rates) + 2), out_ch, 1, bias=False), nn.BatchNorm2d(out_ch), nn.ReLU(),
            nn.Dropout(0.1),
        )

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        feats.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(feats, dim=1))


def _resnet34_encoder(pretrained: bool = False) -> tuple[nn.Module, int]:
    from torchvision.models import resnet34

    weights = None
    if pretrained:
        from torchvision.models import ResNet34_Weights

        weights = ResNet34_Weights.IMAGENET1K_V1
    net = resnet34(weights=weights)
    # Output stride 16: drop the last stride, dilate layer4 instead.
    block0 = net.layer4[0]
    block0.conv1.stride = (1, 1)
    block0.downsample[0].stride = (1, 1)
    for block in net.layer4:
        for conv in (block.conv1, block.conv2):
            conv.dilation, conv.padding = (2, 2), (2, 2)
    enc = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4)
    return enc, 512


class _TinyBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, dilation=1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride, dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch), nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, 1, dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        self.skip = (
            nn.Identity() if stride == 1 and in_ch == out_ch
            else nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))
        )

    def forward(self, x):
        return F.relu(self.body(x) + self.skip(x))


def _tiny_encoder(width: int) -> tuple[nn.Module, int]:
    enc = nn.Sequential(
        nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(),
        _TinyBlock(width, width, stride=2),
        _TinyBlock(width, 2 * width, stride=2),
        _TinyBlock(2 * width, 2 * width, dilation=2),
    )
    return enc, 2 * width


class Segmenter(nn.Module):
    """Encoder + ASPP head emitting per-pixel logits at input resolution."""

    def __init__(self, num_classes: int, encoder_scale: str = "paper", width: int = 16, pretrained: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.encoder_scale = encoder_scale
        if encoder_scale == "paper":
            self.encoder, feat = _resnet34_encoder(pretrained)
            head_ch, rates = 256, (6, 12, 18)
        elif encoder_scale == "tiny":
            self.encoder, feat = _tiny_encoder(width)
            head_ch, rates = 2 * width, (2, 4, 6)
        else:
            raise ValueError(f"encoder_scale must be 'paper' or 'tiny', got {encoder_scale!r}")
        self.head = nn.Sequential(
            ASPP(feat, head_ch, rates),
            nn.Conv2d(head_ch, head_ch, 3, padding=1, bias=False), nn.BatchNorm2d(head_ch), nn.ReLU(),
            nn.Conv2d(head_ch, num_classes, 1),
        )
        if not pretrained:
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        if x.shape[1] != 3:
            raise ValueError(f"segmenter expects 3 input channels, got {x.shape[1]}")
        logits = self.head(self.encoder(x))
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


def build_segmenter(num_classes: int, encoder_scale: str = "paper", **kwargs) -> Segmenter:
    return Segmenter(num_classes, encoder_scale, **kwargs)
