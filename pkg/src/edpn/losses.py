"""Training losses (Charbonnier, SSIM) and evaluation metrics (PSNR, SSIM)."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from edpn.errors import ShapeError

PSNR_CEILING = 100.0
Y_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601 luma
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    epsilon: float = 1e-3
    lam: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}", dim="shape")


def charbonnier_global(gt, pred, eps=1e-3):
    """sqrt(||gt - pred||^2 + eps^2) over the whole tensor (no normalisation)."""
    _same_shape(gt, pred)
    return torch.sqrt(((gt - pred) ** 2).sum() + eps * eps)


def charbonnier(gt, pred, eps=1e-3):
    """Mean over elements of sqrt((gt - pred)^2 + eps^2); the training form."""
    _same_shape(gt, pred)
    return torch.sqrt((gt - pred) ** 2 + eps * eps).mean()


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    return (g / g.sum()).to(dtype)


def ssim_map(x, y, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Per-position SSIM over valid window placements; input ``(B, C, H, W)`` or ``(C, H, W)``."""
    _same_shape(x, y)
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    H, W = x.shape[-2:]
    if H < window or W < window:
        raise ShapeError(f"image {H}x{W} smaller than the {window}x{window} SSIM window", dim="H" if H < window else "W")
    C = x.shape[1]
    g = gaussian_window(window, sigma, x.dtype).to(x.device)
    kv = g.view(1, 1, window, 1).expand(C, 1, window, 1)
    kh = g.view(1, 1, 1, window).expand(C, 1, 1, window)

    def filt(t):
        return F.conv2d(F.conv2d(t, kv, groups=C), kh, groups=C)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(x, y):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, data range 1)."""
    return ssim_map(x, y).mean()


def total_loss(gt, pred, w: LossWeights = LossWeights(), parts=False):
    """Charbonnier + lambda * (1 - SSIM). With ``parts=True`` also returns both terms."""
    charb = charbonnier(gt, pred, w.epsilon)
    if w.lam == 0:
        ssim_loss = torch.zeros((), dtype=charb.dtype)
    else:
        ssim_loss = 1 - ssim(gt, pred)
    total = charb + w.lam * ssim_loss
    return (total, charb, ssim_loss) if parts else total


def to_y(img):
    """BT.601 full-range luma of a ``(..., 3, H, W)`` RGB image, keeping a channel axis."""
    r, g, b = img.unbind(-3)
    return (Y_WEIGHTS[0] * r + Y_WEIGHTS[1] * g + Y_WEIGHTS[2] * b).unsqueeze(-3)


def psnr(gt, pred, channel_mode="RGB", ceiling=PSNR_CEILING):
    """10*log10(1/MSE) in dB, capped at ``ceiling`` (also for MSE == 0)."""
    _same_shape(gt, pred)
    if channel_mode == "Y":
        gt, pred = to_y(gt), to_y(pred)
    elif channel_mode != "RGB":
        raise ValueError(f"channel_mode must be 'RGB' or 'Y', got {channel_mode!r}")
    mse = ((gt.double() - pred.double()) ** 2).mean().item()
    if mse == 0:
        return ceiling
    return min(ceiling, 10 * math.log10(1.0 / mse))


METRIC_COLUMNS = ("psnr_rgb", "ssim_rgb", "psnr_y", "ssim_y")


@dataclass
class MetricReport:
    psnr_rgb: float
    psnr_y: float
    ssim_rgb: float
    ssim_y: float

    def as_text(self):
        return "\n".join(f"{k}={getattr(self, k):.6f}" for k in METRIC_COLUMNS) + "\n"

    def csv_row(self):
        return ",".join(f"{getattr(self, k):.6f}" for k in METRIC_COLUMNS)

    @classmethod
    def mean(cls, reports):
        n = len(reports)
        return cls(**{k: sum(getattr(r, k) for r in reports) / n for k in METRIC_COLUMNS})


def evaluate(gt, pred, ceiling=PSNR_CEILING):
    """All metrics on a clamped float prediction."""
    pred = pred.clamp(0, 1).double()
    gt = gt.double()
    return MetricReport(
        psnr_rgb=psnr(gt, pred, "RGB", ceiling),
        psnr_y=psnr(gt, pred, "Y", ceiling),
        ssim_rgb=ssim(gt, pred).item(),
        ssim_y=ssim(to_y(gt), to_y(pred)).item(),
    )
