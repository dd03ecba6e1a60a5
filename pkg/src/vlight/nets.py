"""Model family: U-Net baseline, Simple-Baseline ladder, and VLight.

All networks map B x 3 x H x W inputs to B x 1 x H x W logits and require H
and W to be multiples of ``downsample_factor`` (16). The Simple-Baseline
variants share one encoder (the first three stages of a ResNet-18) and swap
the decoder resize operator; VLight trades depth for width with a two-conv
stem, depthwise separable convolutions and pixel-shuffle upsampling.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn


class ModelFamily(str, Enum):
    UNET = "UNET"
    SIMPLE_BASELINE = "SIMPLE_BASELINE"
    VLIGHT = "VLIGHT"


class Upsampling(str, Enum):
    DECONV_4X4 = "DECONV_4X4"
    BILINEAR = "BILINEAR"
    PIXEL_SHUFFLE = "PIXEL_SHUFFLE"


class ConvKind(str, Enum):
    FULL = "FULL"
    DEPTHWISE_SEPARABLE = "DEPTHWISE_SEPARABLE"


_FAMILY_DEFAULTS = {
    ModelFamily.UNET: (Upsampling.DECONV_4X4, ConvKind.FULL, 64, 1),
    ModelFamily.SIMPLE_BASELINE: (Upsampling.DECONV_4X4, ConvKind.FULL, 256, 2),
    ModelFamily.VLIGHT: (Upsampling.PIXEL_SHUFFLE, ConvKind.DEPTHWISE_SEPARABLE, 256, 1),
}


@dataclass
class ModelSpec:
    """Declarative architecture description.

    Unset fields resolve to per-family defaults; VLIGHT is pinned to
    pixel-shuffle upsampling with depthwise separable convolutions.
    """

    family: ModelFamily = ModelFamily.VLIGHT
    upsampling: Upsampling | None = None
    conv_kind: ConvKind | None = None
    width: int | None = None
    blocks_per_stage: int | None = None
    in_channels: int = 3
    out_channels: int = 1

    def resolved(self) -> "ModelSpec":
        family = ModelFamily(self.family)
        d_up, d_kind, d_width, d_blocks = _FAMILY_DEFAULTS[family]
        spec = replace(
            self,
            family=family,
            upsampling=Upsampling(self.upsampling) if self.upsampling else d_up,
            conv_kind=ConvKind(self.conv_kind) if self.conv_kind else d_kind,
            width=self.width if self.width else d_width,
            blocks_per_stage=self.blocks_per_stage if self.blocks_per_stage else d_blocks,
        )
        if family is ModelFamily.VLIGHT and (
            spec.upsampling is not Upsampling.PIXEL_SHUFFLE
            or spec.conv_kind is not ConvKind.DEPTHWISE_SEPARABLE
        ):
            raise ValueError("VLIGHT requires PIXEL_SHUFFLE upsampling and DEPTHWISE_SEPARABLE convolutions")
        if spec.width % 8 != 0:
            raise ValueError(f"width must be a multiple of 8, got {spec.width}")
        return spec


def pixel_shuffle(x: torch.Tensor, upscale_factor: int) -> torch.Tensor:
    """Rearrange a (N, C*r^2, H, W) tensor into (N, C, r*H, r*W).

    Pure permutation: out[n, c, y*r + dy, x*r + dx] = in[n, c*r^2 + dy*r + dx, y, x].
    """
    if x.ndim != 4:
        raise ValueError(f"expected a 4D tensor, got shape {tuple(x.shape)}")
    r = int(upscale_factor)
    if r < 1:
        raise ValueError(f"upscale factor must be >= 1, got {upscale_factor}")
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"channel count {c} not divisible by {r}^2")
    x = x.reshape(n, c // (r * r), r, r, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(n, c // (r * r), h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, downscale_factor: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    r = int(downscale_factor)
    n, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {r}")
    x = x.reshape(n, c, h // r, r, w // r, r)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(n, c * r * r, h // r, w // r)


class PixelShuffle(nn.Module):
    def __init__(self, upscale_factor: int):
        super().__init__()
        self.upscale_factor = upscale_factor

    def forward(self, x):
        return pixel_shuffle(x, self.upscale_factor)


class DepthwiseSeparableConv(nn.Module):
    """Per-channel 3x3 convolution followed by a 1x1 cross-channel convolution.

    Linear (no normalization or activation in between); weight count is
    9*C_in + C_in*C_out.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, stride=stride,
                                   padding=1, groups=in_channels, bias=False)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class ConvUnit(nn.Module):
    """One 3x3 convolution layer (full or depthwise separable) + BN (+ ReLU)."""

    def __init__(self, in_channels: int, out_channels: int, kind: ConvKind,
                 stride: int = 1, relu: bool = True):
        super().__init__()
        if kind is ConvKind.FULL:
            self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride,
                                  padding=1, bias=False)
        else:
            self.conv = DepthwiseSeparableConv(in_channels, out_channels, stride=stride)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True) if relu else nn.Identity()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualDownBlock(nn.Module):
    """Two conv layers with an additive skip; 1x1 projection when shape changes."""

    def __init__(self, in_channels: int, out_channels: int, kind: ConvKind, stride: int = 1):
        super().__init__()
        self.conv1 = ConvUnit(in_channels, out_channels, kind, stride=stride, relu=True)
        self.conv2 = ConvUnit(out_channels, out_channels, kind, stride=1, relu=False)
        if stride != 1 or in_channels != out_channels:
            self.skip = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        return F.relu(self.conv2(self.conv1(x)) + self.skip(x))


class ResidualUpBlock(nn.Module):
    """Residual 2x upsampling block.

    The main path resizes via pixel shuffle / 4x4 deconvolution / bilinear
    interpolation followed by ``layers`` conv units; the skip path applies
    the parameter-free resize plus a 1x1 projection.
    """

    def __init__(self, in_channels: int, out_channels: int, upsampling: Upsampling,
                 kind: ConvKind, layers: int = 1):
        super().__init__()
        self.upsampling = upsampling
        body: list[nn.Module] = []
        if upsampling is Upsampling.PIXEL_SHUFFLE:
            if in_channels % 4 != 0:
                raise ValueError(f"pixel-shuffle up block needs channels divisible by 4, got {in_channels}")
            mid = in_channels // 4
            body.append(PixelShuffle(2))
            body.append(ConvUnit(mid, out_channels, kind, relu=layers > 1))
            skip_in = mid
        elif upsampling is Upsampling.DECONV_4X4:
            body.append(nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2,
                                           padding=1, bias=False))
            body.append(nn.BatchNorm2d(out_channels))
            if layers > 1:
                body.append(nn.ReLU(inplace=True))
            skip_in = in_channels
        else:  # BILINEAR
            body.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
            body.append(ConvUnit(in_channels, out_channels, kind, relu=layers > 1))
            skip_in = in_channels
        for i in range(layers - 1):
            body.append(ConvUnit(out_channels, out_channels, kind, relu=i < layers - 2))
        self.body = nn.Sequential(*body)
        self.skip_proj = nn.Sequential(
            nn.Conv2d(skip_in, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )

    def _skip(self, x):
        if self.upsampling is Upsampling.PIXEL_SHUFFLE:
            return self.skip_proj(pixel_shuffle(x, 2))
        return self.skip_proj(F.interpolate(x, scale_factor=2, mode="bilinear",
                                            align_corners=False))

    def forward(self, x):
        return F.relu(self.body(x) + self._skip(x))


def _receptive_field(ops: list[tuple]) -> int:
    """Fold (op, kernel, stride) steps along the main path into one RF size."""
    rf, jump = 1.0, 1.0
    for op, kernel, stride in ops:
        if op == "conv":
            rf += (kernel - 1) * jump
            jump *= stride
        elif op == "up":
            jump /= stride
        elif op == "deconv":
            jump /= stride
            rf += (kernel - 1) * jump
        else:
            raise ValueError(op)
    return math.ceil(rf)


def _unit_ops(stride: int = 1) -> list[tuple]:
    # A ConvUnit has a 3x3 spatial extent for both conv kinds.
    return [("conv", 3, stride)]


class VLightNet(nn.Module):
    """Wide, shallow encoder-decoder with DWC blocks and pixel-shuffle decoder."""

    downsample_factor = 16

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        width = spec.width
        kind = spec.conv_kind
        s8, s4 = width // 8, width // 4
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, s8, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(s8), nn.ReLU(inplace=True),
            nn.Conv2d(s8, s4, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(s4), nn.ReLU(inplace=True),
            nn.Conv2d(s4, width, 1, bias=False),
            nn.BatchNorm2d(width), nn.ReLU(inplace=True),
        )
        stages = []
        ops: list[tuple] = _unit_ops(2) + _unit_ops(2)
        for stride in (1, 2, 2):
            blocks = [ResidualDownBlock(width, width, kind, stride=stride)]
            ops += _unit_ops(stride) + _unit_ops()
            for _ in range(spec.blocks_per_stage - 1):
                blocks.append(ResidualDownBlock(width, width, kind))
                ops += _unit_ops() + _unit_ops()
            stages.append(nn.Sequential(*blocks))
        self.encoder = nn.Sequential(*stages)
        self.decoder = nn.Sequential(*[
            ResidualUpBlock(width, width, spec.upsampling, kind, layers=1)
            for _ in range(4)
        ])
        ops += [("up", 2, 2), ("conv", 3, 1)] * 4
        self.head = nn.Conv2d(width, spec.out_channels, 1)
        self.receptive_field = _receptive_field(ops)

    def forward(self, x):
        _check_dims(x, self.downsample_factor)
        return self.head(self.decoder(self.encoder(self.stem(x))))


class SimpleBaselineNet(nn.Module):
    """Three ResNet-18 encoder stages and a mirrored upsampling decoder."""

    downsample_factor = 16

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        kind = spec.conv_kind
        width = spec.width
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        ops: list[tuple] = [("conv", 7, 2), ("conv", 3, 2)]
        layers = []
        channels = [(64, 64, 1), (64, 128, 2), (128, width, 2)]
        for cin, cout, stride in channels:
            blocks = [ResidualDownBlock(cin, cout, kind, stride=stride)]
            ops += _unit_ops(stride) + _unit_ops()
            for _ in range(spec.blocks_per_stage - 1):
                blocks.append(ResidualDownBlock(cout, cout, kind))
                ops += _unit_ops() + _unit_ops()
            layers.append(nn.Sequential(*blocks))
        self.encoder = nn.Sequential(*layers)

        stages = []
        for _ in range(4):
            blocks: list[nn.Module] = [
                ResidualUpBlock(width, width, spec.upsampling, kind, layers=2)
            ]
            if spec.upsampling is Upsampling.DECONV_4X4:
                ops += [("deconv", 4, 2)]
            else:
                ops += [("up", 2, 2), ("conv", 3, 1)]
            ops += _unit_ops()
            for _ in range(spec.blocks_per_stage):
                blocks.append(ResidualDownBlock(width, width, kind))
                ops += _unit_ops() + _unit_ops()
            stages.append(nn.Sequential(*blocks))
        self.decoder = nn.Sequential(*stages)
        self.head = nn.Conv2d(width, spec.out_channels, 1)
        self.receptive_field = _receptive_field(ops)

    def forward(self, x):
        _check_dims(x, self.downsample_factor)
        return self.head(self.decoder(self.encoder(self.stem(x))))


class _DoubleConv(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class UNet(nn.Module):
    """Classic 4-down/4-up U-Net with concatenating skips."""

    downsample_factor = 16

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.inc = _DoubleConv(spec.in_channels, w)
        self.downs = nn.ModuleList([
            _DoubleConv(w, 2 * w), _DoubleConv(2 * w, 4 * w),
            _DoubleConv(4 * w, 8 * w), _DoubleConv(8 * w, 16 * w),
        ])
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList([
            nn.ConvTranspose2d(16 * w, 8 * w, 2, stride=2),
            nn.ConvTranspose2d(8 * w, 4 * w, 2, stride=2),
            nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2),
            nn.ConvTranspose2d(2 * w, w, 2, stride=2),
        ])
        self.dec = nn.ModuleList([
            _DoubleConv(16 * w, 8 * w), _DoubleConv(8 * w, 4 * w),
            _DoubleConv(4 * w, 2 * w), _DoubleConv(2 * w, w),
        ])
        self.head = nn.Conv2d(w, spec.out_channels, 1)
        ops = [("conv", 3, 1)] * 2
        for _ in range(4):
            ops += [("conv", 2, 2)] + [("conv", 3, 1)] * 2
        for _ in range(4):
            ops += [("deconv", 2, 2)] + [("conv", 3, 1)] * 2
        self.receptive_field = _receptive_field(ops)

    def forward(self, x):
        _check_dims(x, self.downsample_factor)
        feats = [self.inc(x)]
        for down in self.downs:
            feats.append(down(self.pool(feats[-1])))
        y = feats[-1]
        for up, dec, skip in zip(self.ups, self.dec, feats[-2::-1]):
            y = dec(torch.cat([up(y), skip], dim=1))
        return self.head(y)


def _check_dims(x: torch.Tensor, factor: int) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected B x C x H x W input, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"input {h}x{w} must have sides divisible by {factor}; pad first")


def _init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled normal init for convolutions, drawn from a local generator."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            weight = module.weight
            fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                weight.copy_(torch.randn(weight.shape, generator=gen) * std)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(spec: ModelSpec, seed: int = 0) -> nn.Module:
    """Realize a ModelSpec into an initialized network."""
    spec = spec.resolved()
    if spec.family is ModelFamily.UNET:
        model = UNet(spec)
    elif spec.family is ModelFamily.SIMPLE_BASELINE:
        model = SimpleBaselineNet(spec)
    else:
        model = VLightNet(spec)
    _init_parameters(model, seed)
    return model


def parameter_count(model: nn.Module) -> int:
    """Number of trainable parameters (weights, biases, norm affine terms)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def model_fingerprint(model: nn.Module) -> str:
    """Stable hash of all parameters and buffers, for provenance tracking."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]
