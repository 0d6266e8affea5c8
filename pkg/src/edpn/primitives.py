"""Differentiable building blocks shared by the network.

Regular convolutions, resampling and rearrangements are thin, shape-checked
wrappers over ``torch.nn.functional``; deformable convolution lives in
:mod:`edpn.deform`.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from edpn.deform import deform_conv2d as _deform_conv2d
from edpn.errors import ShapeError

NEG_SLOPE = 0.1


def lrelu(x):
    return F.leaky_relu(x, NEG_SLOPE)


@dataclass
class ConvParams:
    """Weights of one convolution; kernel extents must be odd."""

    weight: torch.Tensor
    bias: Optional[torch.Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.weight.shape[-2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}", dim="kernel")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def in_ch(self):
        return self.weight.shape[1]

    @property
    def out_ch(self):
        return self.weight.shape[0]

    @classmethod
    def from_module(cls, conv: nn.Conv2d):
        return cls(conv.weight, conv.bias, conv.stride[0], conv.padding[0])


def _check_conv_input(x, weight, stride, padding, spatial_dims):
    if x.dim() != 2 + spatial_dims:
        raise ShapeError(f"expected {2 + spatial_dims}-D input, got shape {tuple(x.shape)}", dim="rank")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}", dim="in_ch"
        )
    names = ("D", "H", "W")[-spatial_dims:]
    for name, size, k in zip(names, x.shape[2:], weight.shape[2:]):
        if size + 2 * padding < k:
            raise ShapeError(f"{name}={size} too small for kernel {k} with padding {padding}", dim=name)


def conv2d(x, p: ConvParams):
    """Cross-correlation plus bias; output size ``(H + 2*pad - k) // stride + 1``."""
    _check_conv_input(x, p.weight, p.stride, p.padding, 2)
    return F.conv2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding)


def conv3d(x, weight, bias=None, padding=0):
    """3-D cross-correlation over ``(B, C, D, H, W)``; used to fuse the replica axis."""
    if any(k % 2 == 0 for k in weight.shape[2:]) and weight.shape[2] != x.shape[2]:
        # an even depth extent is only meaningful as a full-depth reduction
        raise ShapeError(f"kernel extents must be odd, got {tuple(weight.shape[2:])}", dim="kernel")
    _check_conv_input(x, weight, 1, padding, 3)
    return F.conv3d(x, weight, bias, padding=padding)


def deform_conv2d(x, offsets, p: ConvParams):
    """Deformable convolution with the geometry of ``p``; see :mod:`edpn.deform`."""
    return _deform_conv2d(x, offsets, p.weight, p.bias, stride=p.stride, padding=p.padding)


def bilinear_sample(x, y, xcoord):
    """Sample a ``(C, H, W)`` tensor at one fractional location.

    Neighbours outside ``[0, H-1] x [0, W-1]`` contribute zero.
    """
    C, H, W = x.shape
    y0 = int(torch.floor(torch.as_tensor(y, dtype=torch.float64)))
    x0 = int(torch.floor(torch.as_tensor(xcoord, dtype=torch.float64)))
    ly, lx = y - y0, xcoord - x0
    out = x.new_zeros(C)
    for yy, xx, w in (
        (y0, x0, (1 - ly) * (1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx),
        (y0 + 1, x0, ly * (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ):
        if 0 <= yy < H and 0 <= xx < W and w != 0:
            out = out + w * x[:, yy, xx]
    return out


def upsample_bilinear(x, s: int):
    """Bilinear resize by an integer factor, half-pixel (align_corners=False) convention."""
    if s < 1:
        raise ValueError(f"scale factor must be >= 1, got {s}")
    if s == 1:
        return x
    return F.interpolate(x, scale_factor=s, mode="bilinear", align_corners=False)


def pixel_shuffle(x, r: int):
    """Depth-to-space: ``(B, C*r*r, H, W) -> (B, C, r*H, r*W)``."""
    if x.shape[1] % (r * r):
        raise ShapeError(f"channel count {x.shape[1]} not divisible by r^2 = {r * r}", dim="C")
    return F.pixel_shuffle(x, r) if r > 1 else x


def pixel_unshuffle(x, r: int):
    """Inverse of :func:`pixel_shuffle`."""
    if x.shape[-1] % r or x.shape[-2] % r:
        raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by {r}", dim="HW")
    return F.pixel_unshuffle(x, r) if r > 1 else x


class ResidualBlock(nn.Module):
    """conv -> lrelu -> conv with an identity skip."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def branch(self, x):
        return self.conv2(lrelu(self.conv1(x)))

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ShapeError(
                f"block expects {self.conv1.in_channels} channels, got {x.shape[1]}", dim="C"
            )
        return x + self.branch(x)


class MSChannelAttention(nn.Module):
    """Multi-scale channel gate: sigmoid(global(mean-pooled) + local(point-wise))."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        mid = max(1, channels // reduction)
        self.global_fc1 = nn.Conv2d(channels, mid, 1)
        self.global_fc2 = nn.Conv2d(mid, channels, 1)
        self.local_fc1 = nn.Conv2d(channels, mid, 1)
        self.local_fc2 = nn.Conv2d(mid, channels, 1)

    def forward(self, x):
        g = self.global_fc2(lrelu(self.global_fc1(x.mean(dim=(2, 3), keepdim=True))))
        loc = self.local_fc2(lrelu(self.local_fc1(x)))
        return torch.sigmoid(g + loc)


class MSRCAB(ResidualBlock):
    """Residual block whose branch is gated by :class:`MSChannelAttention`."""

    def __init__(self, channels, reduction=4):
        super().__init__(channels)
        self.attn = MSChannelAttention(channels, reduction)

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ShapeError(
                f"block expects {self.conv1.in_channels} channels, got {x.shape[1]}", dim="C"
            )
        b = self.branch(x)
        return x + self.attn(b) * b
