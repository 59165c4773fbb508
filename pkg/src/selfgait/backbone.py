"""Spatiotemporal gait backbone.

frames (B, T, H, W)
  -> ShallowCNN            per frame, (B*T, C, h, w)
  -> HPM | PlainSpatial    per frame, (B, T, n, c)
  -> MTB | PlainTCN        over time, (B, n, c)
  -> FCBins                per stripe, (B, n, d1)

``FrameEncoder`` (CNN + spatial stage) is the part duplicated by the target
branch during pre-training; ``FCBins`` is the block it borrows from the
online branch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IndivisibleHeight, SequenceTooShortForWindow, ShapeMismatch

ABLATIONS = ("full", "no_hpm", "no_mtb")
NEGATIVE_SLOPE = 0.01


def num_stripes(scales: int) -> int:
    return sum(2 ** (s - 1) for s in range(1, scales + 1))


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 64
    width: int = 44
    cnn_channels: tuple[int, int, int] = (32, 32, 64)
    scales: int = 5
    stripe_dim: int = 128  # c
    d1: int = 128
    radius: int = 1
    ablation: str = "full"
    input_pool: int = 1  # average-pool factor applied to frames before the CNN

    def __post_init__(self):
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if len(self.cnn_channels) != 3 or min(self.cnn_channels) < 1:
            raise ValueError("cnn_channels needs three positive widths")
        if self.scales < 1 or self.radius < 0 or self.input_pool < 1:
            raise ValueError("scales >= 1, radius >= 0 and input_pool >= 1 required")
        fh = self.feature_height
        if fh < 1 or fh % 2 ** (self.scales - 1):
            raise IndivisibleHeight(
                f"feature height {fh} is not divisible by 2^(S-1) = {2 ** (self.scales - 1)}")

    @property
    def n(self) -> int:
        return num_stripes(self.scales)

    @property
    def feature_height(self) -> int:
        return self.height // self.input_pool // 2

    @property
    def feature_width(self) -> int:
        return self.width // self.input_pool // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d


class StripeLinear(nn.Module):
    """``n`` independent affine maps, one per stripe: (..., n, in) -> (..., n, out)."""

    def __init__(self, n: int, in_dim: int, out_dim: int):
        super().__init__()
        self.n, self.in_dim, self.out_dim = n, in_dim, out_dim
        self.weight = nn.Parameter(torch.empty(n, in_dim, out_dim))
        self.bias = nn.Parameter(torch.empty(n, out_dim))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.in_dim)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    @torch.no_grad()
    def identity_(self):
        """Set every map to the (rectangular) identity with zero bias."""
        self.weight.zero_()
        k = min(self.in_dim, self.out_dim)
        self.weight[:, range(k), range(k)] = 1.0
        self.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.n, self.in_dim):
            raise ShapeMismatch(f"expected (..., {self.n}, {self.in_dim}), got {tuple(x.shape)}")
        return torch.einsum("...ni,nio->...no", x, self.weight) + self.bias

    def extra_repr(self):
        return f"n={self.n}, in_dim={self.in_dim}, out_dim={self.out_dim}"


class FCBins(StripeLinear):
    """Per-stripe output maps of the transition model (c -> d1).

    The same instance is referenced by the target branch during pre-training.
    """


class ShallowCNN(nn.Module):
    def __init__(self, channels=(32, 32, 64), input_pool: int = 1):
        super().__init__()
        c1, c2, c3 = channels
        self.input_pool = input_pool
        self.conv1 = nn.Conv2d(1, c1, 5, padding=2)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if self.input_pool > 1:
            x = F.avg_pool2d(x, self.input_pool)
        # channels-last activations and weights take the faster CPU conv kernels
        x = x.contiguous(memory_format=torch.channels_last)
        x = F.leaky_relu(_conv_cl(self.conv1, x), NEGATIVE_SLOPE)
        x = F.leaky_relu(_conv_cl(self.conv2, x), NEGATIVE_SLOPE)
        x = F.max_pool2d(x, 2)
        return F.leaky_relu(_conv_cl(self.conv3, x), NEGATIVE_SLOPE)


def _conv_cl(conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
    return F.conv2d(x, conv.weight.contiguous(memory_format=torch.channels_last), conv.bias, padding=conv.padding)


def pyramid_pool(x: torch.Tensor, scales: int) -> torch.Tensor:
    """(N, C, h, w) -> (N, n, C): max + mean over each horizontal strip, scale-major."""
    N, C, h, w = x.shape
    finest = 2 ** (scales - 1)
    if h % finest:
        raise IndivisibleHeight(f"height {h} not divisible by {finest}")
    # pool the finest strips once, then merge neighbouring pairs for coarser scales
    mx = F.max_pool2d(x, (h // finest, w)).flatten(2)
    av = F.avg_pool2d(x, (h // finest, w)).flatten(2)
    feats = [mx + av]
    while mx.shape[2] > 1:
        mx = mx.reshape(N, C, -1, 2).amax(-1)
        av = av.reshape(N, C, -1, 2).mean(-1)
        feats.append(mx + av)
    return torch.cat(feats[::-1], dim=2).transpose(1, 2)


class HPM(nn.Module):
    """Horizontal pyramid mapping with an independent FC per strip."""

    def __init__(self, in_channels: int, stripe_dim: int, scales: int):
        super().__init__()
        self.scales = scales
        self.fc = StripeLinear(num_stripes(scales), in_channels, stripe_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(pyramid_pool(x, self.scales))


class PlainSpatial(nn.Module):
    """Ablation stand-in for HPM: three 3x3 convs, global average pool, one FC.

    The pooled vector is repeated to ``n`` rows so downstream shapes match.
    """

    def __init__(self, in_channels: int, stripe_dim: int, scales: int):
        super().__init__()
        self.n = num_stripes(scales)
        self.convs = nn.ModuleList(nn.Conv2d(in_channels, in_channels, 3, padding=1) for _ in range(3))
        self.fc = nn.Linear(in_channels, stripe_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.leaky_relu(conv(x), NEGATIVE_SLOPE)
        v = self.fc(x.mean(dim=(2, 3)))
        return v.unsqueeze(1).expand(-1, self.n, -1)


class FrameEncoder(nn.Module):
    """Shallow CNN followed by the spatial stage; any leading dims are kept."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cnn = ShallowCNN(cfg.cnn_channels, cfg.input_pool)
        spatial_cls = PlainSpatial if cfg.ablation == "no_hpm" else HPM
        self.spatial = spatial_cls(cfg.cnn_channels[2], cfg.stripe_dim, cfg.scales)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        lead = frames.shape[:-2]
        fm = self.cnn(frames.reshape(-1, 1, *frames.shape[-2:]))
        z = self.spatial(fm)
        return z.reshape(*lead, *z.shape[1:])


def _pad_time(x: torch.Tensor, r: int) -> torch.Tensor:
    # edge frames reuse themselves as the missing neighbour
    return F.pad(x, (r, r), mode="replicate") if r > 0 else x


class MTB(nn.Module):
    """Per-stripe temporal convolution over (2r+1)-frame windows, then max over time."""

    def __init__(self, n: int, channels: int, radius: int = 1):
        super().__init__()
        self.n, self.c, self.radius = n, channels, radius
        self.conv = nn.Conv1d(n * channels, n * channels, 2 * radius + 1, groups=n)

    def responses(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, n, c) -> (B, T, n, c) activations before temporal pooling."""
        B, T, n, c = x.shape
        if T < 2 * self.radius + 1:
            raise SequenceTooShortForWindow(f"need >= {2 * self.radius + 1} frames, got {T}")
        if (n, c) != (self.n, self.c):
            raise ShapeMismatch(f"expected stripes ({self.n}, {self.c}), got ({n}, {c})")
        h = x.permute(0, 2, 3, 1).reshape(B, n * c, T)
        h = F.leaky_relu(self.conv(_pad_time(h, self.radius)), NEGATIVE_SLOPE)
        return h.reshape(B, n, c, T).permute(0, 3, 1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.responses(x).amax(dim=1)


class PlainTCN(nn.Module):
    """Ablation stand-in for MTB: one kernel shared by all stripes, temporal mean."""

    def __init__(self, n: int, channels: int, radius: int = 1):
        super().__init__()
        self.n, self.c, self.radius = n, channels, radius
        self.conv = nn.Conv1d(channels, channels, 2 * radius + 1)

    def responses(self, x: torch.Tensor) -> torch.Tensor:
        B, T, n, c = x.shape
        if T < 2 * self.radius + 1:
            raise SequenceTooShortForWindow(f"need >= {2 * self.radius + 1} frames, got {T}")
        if (n, c) != (self.n, self.c):
            raise ShapeMismatch(f"expected stripes ({self.n}, {self.c}), got ({n}, {c})")
        h = x.permute(0, 2, 3, 1).reshape(B * n, c, T)
        h = F.leaky_relu(self.conv(_pad_time(h, self.radius)), NEGATIVE_SLOPE)
        return h.reshape(B, n, c, T).permute(0, 3, 1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.responses(x).mean(dim=1)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg)
        temporal_cls = PlainTCN if cfg.ablation == "no_mtb" else MTB
        self.temporal = temporal_cls(cfg.n, cfg.stripe_dim, cfg.radius)
        self.fc_bins = FCBins(cfg.n, cfg.stripe_dim, cfg.d1)

    @property
    def n(self) -> int:
        return self.cfg.n

    def stripes(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) -> (B, T, n, c) per-frame stripe features."""
        if frames.dim() != 4:
            raise ShapeMismatch(f"expected (B, T, H, W) frames, got {tuple(frames.shape)}")
        if frames.shape[-2:] != (self.cfg.height, self.cfg.width):
            raise ShapeMismatch(
                f"frames must be {self.cfg.height}x{self.cfg.width}, got {tuple(frames.shape[-2:])}")
        return self.encoder(frames)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) -> (B, n, d1) spatiotemporal embedding."""
        return self.fc_bins(self.temporal(self.stripes(frames)))
