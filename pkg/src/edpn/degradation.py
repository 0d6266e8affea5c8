"""Synthetic degradations producing (input, ground-truth) pairs.

BISR input: blur then x4 box downscale. BID input: blur then an 8x8 DCT
quantisation simulator (no chroma subsampling, no entropy coding). Images are
``(3, H, W)`` float tensors in [0, 1]; work is done in float64 and cast back.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from edpn.errors import ConfigError, ShapeError

# Annex K luminance table, row-major over (v, u)
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass
class BlurKernel:
    taps: torch.Tensor  # (k, k), nonnegative, sums to 1
    kind: str


def make_kernel(kind, sigma=None, length=None, angle=0.0, size=None):
    """Build a normalised blur kernel.

    Args:
        kind: ``"gaussian"`` or ``"linear_motion"``.
        sigma: gaussian standard deviation in pixels (> 0).
        length: motion segment length in pixels (>= 1).
        angle: motion direction in degrees, counter-clockwise from +x.
        size: odd kernel extent; defaults to ``2*ceil(3*sigma)+1`` for gaussian
            and ``2*ceil(length/2)+1`` for motion.
    """
    if kind == "gaussian":
        if sigma is None or sigma <= 0:
            raise ConfigError(f"gaussian kernel needs sigma > 0, got {sigma}", key="degrade.sigma")
        size = size or 2 * math.ceil(3 * sigma) + 1
        if size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {size}", key="degrade.kernel_size")
        r = np.arange(size, dtype=np.float64) - size // 2
        g = np.exp(-(r**2) / (2 * sigma**2))
        taps = np.outer(g, g)
    elif kind == "linear_motion":
        if length is None or length < 1:
            raise ConfigError(f"motion kernel needs length >= 1, got {length}", key="degrade.length")
        size = size or 2 * math.ceil(length / 2) + 1
        if size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {size}", key="degrade.kernel_size")
        if size < length:
            raise ConfigError(f"kernel size {size} shorter than motion length {length}", key="degrade.kernel_size")
        taps = np.zeros((size, size))
        c = size // 2
        half = (length - 1) / 2
        n = max(1, int(math.ceil((length - 1) * 4)) + 1)
        t = np.linspace(-half, half, n)
        theta = math.radians(angle)
        ys = c - t * math.sin(theta)
        xs = c + t * math.cos(theta)
        for y, x in zip(ys, xs):
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            ly, lx = y - y0, x - x0
            for yy, xx, w in (
                (y0, x0, (1 - ly) * (1 - lx)),
                (y0, x0 + 1, (1 - ly) * lx),
                (y0 + 1, x0, ly * (1 - lx)),
                (y0 + 1, x0 + 1, ly * lx),
            ):
                if w > 0:
                    taps[yy, xx] += w
    else:
        raise ConfigError(f"unknown kernel kind {kind!r}", key="degrade.kind")
    taps = taps / taps.sum()
    return BlurKernel(torch.from_numpy(taps), kind)


def blur(img, kernel: BlurKernel):
    """Per-channel 2-D correlation with reflect padding; shape preserved."""
    taps = kernel.taps
    k = taps.shape[-1]
    pad = k // 2
    x = img.double().unsqueeze(0)
    C = x.shape[1]
    if pad:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    w = taps.double().view(1, 1, k, k).expand(C, 1, k, k)
    return F.conv2d(x, w, groups=C).squeeze(0).to(img.dtype)


def downscale(img, s=4):
    """Box-filter (area) downsampling by an integer factor."""
    H, W = img.shape[-2:]
    if H % s or W % s:
        raise ShapeError(f"image {H}x{W} not divisible by scale {s}", dim="H" if H % s else "W")
    return F.avg_pool2d(img.double().unsqueeze(0), s).squeeze(0).to(img.dtype)


def quality_table(quality):
    """libjpeg-style scaled luminance table (entries >= 1)."""
    if not 1 <= quality <= 100:
        raise ConfigError(f"quality must be in [1, 100], got {quality}", key="degrade.quality")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.maximum(np.floor((JPEG_LUMA_TABLE * scale + 50) / 100), 1.0)


def dct_matrix(n=8):
    """Orthonormal DCT-II basis; row u is frequency u."""
    k = np.arange(n)
    d = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * math.sqrt(2 / n)
    d[0] /= math.sqrt(2)
    return d


def jpeg_artifacts(img, quality):
    """Quantise 8x8 DCT blocks of each channel independently; clamp to [0, 1]."""
    C, H, W = img.shape
    if H % 8 or W % 8:
        raise ShapeError(f"image {H}x{W} not divisible by 8", dim="H" if H % 8 else "W")
    table = quality_table(quality)
    D = dct_matrix(8)
    x = img.double().numpy() * 255.0 - 128.0
    blocks = x.reshape(C, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = D @ blocks @ D.T
    coef = np.round(coef / table) * table
    rec = D.T @ coef @ D
    out = rec.transpose(0, 1, 3, 2, 4).reshape(C, H, W)
    out = np.clip((out + 128.0) / 255.0, 0.0, 1.0)
    return torch.from_numpy(out).to(img.dtype)


@dataclass
class DegradeSpec:
    """Degradation recipe; kernel parameters are drawn per item from the ranges.

    ``kind`` is ``"gaussian"``, ``"linear_motion"`` or ``"mixed"`` (coin flip).
    """

    task: str = "BISR"
    kind: str = "gaussian"
    sigma: tuple = (0.8, 1.6)
    length: tuple = (3.0, 7.0)
    kernel_size: int = 0  # 0: derived from the drawn parameters
    scale: int = 4
    quality: int = 30
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in ("BISR", "BID"):
            raise ConfigError(f"unknown task {self.task!r}", key="task")
        if self.kind not in ("gaussian", "linear_motion", "mixed"):
            raise ConfigError(f"unknown kernel kind {self.kind!r}", key="degrade.kind")
        if self.task == "BISR" and self.scale != 4:
            raise ConfigError("BISR degradation uses scale 4", key="degrade.scale")
        if not 1 <= self.quality <= 100:
            raise ConfigError(f"quality must be in [1, 100], got {self.quality}", key="degrade.quality")
        for name in ("sigma", "length"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: {lo} > {hi}", key=f"degrade.{name}")
        if self.sigma[0] <= 0 or self.length[0] < 1:
            raise ConfigError("sigma must be > 0 and length >= 1", key="degrade.sigma")

    def draw_kernel(self, rng):
        kind = self.kind
        if kind == "mixed":
            kind = "gaussian" if rng.random() < 0.5 else "linear_motion"
        size = self.kernel_size or None
        if kind == "gaussian":
            return make_kernel("gaussian", sigma=rng.uniform(*self.sigma), size=size)
        return make_kernel(
            "linear_motion", length=rng.uniform(*self.length), angle=rng.uniform(0.0, 180.0), size=size
        )


def degrade(sharp, spec: DegradeSpec, index=0):
    """Return ``(input, gt)`` for one sharp image; item ``index`` uses seed ``spec.seed + index``."""
    rng = np.random.default_rng(spec.seed + index)
    kernel = spec.draw_kernel(rng)
    H, W = sharp.shape[-2:]
    k = kernel.taps.shape[-1]
    if k // 2 >= min(H, W):
        raise ShapeError(f"image {H}x{W} too small for a {k}x{k} kernel", dim="H")
    blurred = blur(sharp, kernel).clamp(0, 1)
    if spec.task == "BISR":
        return downscale(blurred, spec.scale), sharp.clone()
    return jpeg_artifacts(blurred, spec.quality), sharp.clone()
