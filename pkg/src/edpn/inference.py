"""Inference: single pass, rotation self-ensemble, weighted model ensemble, tiling.

Ensembles average unclamped network outputs and clamp once at the end.
Inputs whose sides are not multiples of the model's pyramid factor are
reflect-padded and the output is cropped back.
"""

import math
import os
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from edpn import checkpoint as ckpt_io
from edpn.errors import ConfigError, ShapeError
from edpn.model import EDPN


@dataclass
class EnsembleSpec:
    self_ensemble: bool = False
    model_paths: list = field(default_factory=list)
    model_weights: list = field(default_factory=list)  # empty: uniform

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model_weights and len(self.model_weights) != len(self.model_paths):
            raise ConfigError(
                f"{len(self.model_weights)} weights for {len(self.model_paths)} models",
                key="ensemble.model_weights",
            )
        if any(w < 0 for w in self.model_weights):
            raise ConfigError("model weights must be nonnegative", key="ensemble.model_weights")
        if self.model_weights and abs(sum(self.model_weights) - 1) > 1e-8:
            raise ConfigError(f"model weights sum to {sum(self.model_weights)}, expected 1", key="ensemble.model_weights")

    def weights(self):
        n = len(self.model_paths)
        return list(self.model_weights) if self.model_weights else [1.0 / n] * n


def load_model(source, model_cfg=None):
    """Accept an :class:`EDPN`, a :class:`~edpn.checkpoint.Checkpoint` or a path."""
    if isinstance(source, EDPN):
        model = source
    else:
        if isinstance(source, (str, os.PathLike)):
            source = ckpt_io.load(source)
        if model_cfg is not None and source.model_cfg != model_cfg:
            raise ConfigError(f"checkpoint config {source.model_cfg} does not match requested {model_cfg}")
        model = source.build()
    if model_cfg is not None and model.cfg != model_cfg:
        raise ConfigError(f"model config {model.cfg} does not match requested {model_cfg}")
    return model.eval()


def _pad_to_multiple(img, multiple):
    H, W = img.shape[-2:]
    ph = (-H) % multiple
    pw = (-W) % multiple
    if ph == 0 and pw == 0:
        return img
    mode = "reflect" if ph < H and pw < W else "replicate"
    return F.pad(img.unsqueeze(0), (0, pw, 0, ph), mode=mode).squeeze(0)


@torch.no_grad()
def forward_raw(model, img):
    """Unclamped output for a ``(3, H, W)`` image of any size."""
    H, W = img.shape[-2:]
    s = model.cfg.scale
    x = _pad_to_multiple(img.to(next(model.parameters()).dtype), model.cfg.multiple)
    out = model(x)
    return out[..., : H * s, : W * s]


def infer(img, checkpoint, model_cfg=None):
    """Restore one image, clamped to [0, 1]."""
    return forward_raw(load_model(checkpoint, model_cfg), img).clamp(0, 1)


def _self_ensemble_raw(model, img):
    acc = None
    for r in range(4):
        out = torch.rot90(forward_raw(model, torch.rot90(img, r, dims=(-2, -1))), -r, dims=(-2, -1))
        acc = out if acc is None else acc + out
    return acc / 4


def self_ensemble(img, checkpoint, model_cfg=None):
    """Mean of the outputs for the input rotated by 0, 90, 180 and 270 degrees (each rotated back)."""
    return _self_ensemble_raw(load_model(checkpoint, model_cfg), img).clamp(0, 1)


def model_ensemble(img, spec: EnsembleSpec, model_cfg=None, models=None):
    """Weighted pixel-wise average of per-model outputs, optionally self-ensembled.

    ``models`` may supply already-loaded models/checkpoints in place of ``spec.model_paths``.
    """
    sources = models if models is not None else spec.model_paths
    if not sources:
        raise ConfigError("model ensemble needs at least one model", key="ensemble.model_paths")
    weights = spec.model_weights or [1.0 / len(sources)] * len(sources)
    if len(weights) != len(sources):
        raise ConfigError(f"{len(weights)} weights for {len(sources)} models", key="ensemble.model_weights")
    acc = None
    for w, src in zip(weights, sources):
        model = load_model(src, model_cfg)
        out = _self_ensemble_raw(model, img) if spec.self_ensemble else forward_raw(model, img)
        acc = w * out if acc is None else acc + w * out
    return acc.clamp(0, 1)


def _tile_starts(size, tile, step):
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile + 1, step))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


@torch.no_grad()
def tiled_infer(img, checkpoint, tile, overlap, model_cfg=None):
    """Restore overlapping tiles independently and average them where they overlap.

    ``tile`` and ``overlap`` are in input pixels; output geometry scales with
    the model. Tile borders that lie inside the image are trimmed by
    ``overlap // 4`` input pixels before averaging, since those outputs lack
    neighbouring context; the remaining overlap is blended uniformly.
    """
    if overlap < 0:
        raise ShapeError("overlap must be >= 0", dim="overlap")
    if tile < 2 * overlap:
        raise ShapeError(f"tile {tile} smaller than twice the overlap {overlap}", dim="tile")
    model = load_model(checkpoint, model_cfg)
    mult, s = model.cfg.multiple, model.cfg.scale
    if tile % mult:
        raise ShapeError(f"tile {tile} not divisible by {mult}", dim="tile")
    H, W = img.shape[-2:]
    if tile >= H and tile >= W:
        return forward_raw(model, img).clamp(0, 1)
    x = _pad_to_multiple(img, mult)
    Hp, Wp = x.shape[-2:]
    th, tw = min(tile, Hp), min(tile, Wp)
    trim = (overlap // 4) * s
    out = x.new_zeros(3, Hp * s, Wp * s)
    count = x.new_zeros(1, Hp * s, Wp * s)
    for y in _tile_starts(Hp, th, max(1, th - overlap)):
        for xx in _tile_starts(Wp, tw, max(1, tw - overlap)):
            piece = forward_raw(model, x[:, y : y + th, xx : xx + tw])
            t0 = trim if y > 0 else 0
            b0 = trim if y + th < Hp else 0
            l0 = trim if xx > 0 else 0
            r0 = trim if xx + tw < Wp else 0
            ys = slice(y * s + t0, (y + th) * s - b0)
            xs = slice(xx * s + l0, (xx + tw) * s - r0)
            out[:, ys, xs] += piece[:, t0 : th * s - b0, l0 : tw * s - r0]
            count[:, ys, xs] += 1
    return (out / count)[:, : H * s, : W * s].clamp(0, 1)


def restore(img, checkpoint=None, ensemble: EnsembleSpec = None, tile=0, overlap=0, model_cfg=None):
    """Dispatch used by the CLI: model ensemble, self-ensemble, tiled or plain inference."""
    ensemble = ensemble or EnsembleSpec()
    if ensemble.model_paths:
        return model_ensemble(img, ensemble, model_cfg)
    if checkpoint is None:
        raise ConfigError("no checkpoint given", key="paths.checkpoint")
    if ensemble.self_ensemble:
        return self_ensemble(img, checkpoint, model_cfg)
    if tile:
        return tiled_infer(img, checkpoint, tile, overlap, model_cfg)
    return infer(img, checkpoint, model_cfg)


def psnr_between(a, b):
    mse = ((a.double() - b.double()) ** 2).mean().item()
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)
