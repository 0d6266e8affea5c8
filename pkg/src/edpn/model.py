"""EDPN network: replicated input, pyramid progressive transfer (PPT),
pyramid self-attention fusion (PSA) and a channel-attention reconstruction
trunk on top of a bilinear skip path.

Tensors are laid out ``(B, C, H, W)``; the replica axis is kept as a Python
list of per-replica features or folded into the batch axis where weights are
shared.
"""

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from edpn.errors import ConfigError, ShapeError
from edpn.primitives import (
    MSRCAB,
    ConvParams,
    ResidualBlock,
    deform_conv2d,
    lrelu,
    pixel_shuffle,
    upsample_bilinear,
)

TASKS = ("BISR", "BID")


@dataclass
class ModelConfig:
    K: int = 4
    M: int = 3
    N: int = 3
    L: int = 3
    channels: int = 64
    extractor_blocks: int = 18
    recon_blocks: int = 8
    scale: int = 4
    task: str = "BISR"
    use_ppt: bool = True
    use_psa: bool = True
    reduction: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}", key="task")
        for name in ("M", "N", "L", "channels", "reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=f"model.{name}")
        for name in ("K", "extractor_blocks", "recon_blocks"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", key=f"model.{name}")
        if self.scale not in (1, 4):
            raise ConfigError(f"scale must be 1 or 4, got {self.scale}", key="model.scale")
        if (self.scale == 4) != (self.task == "BISR"):
            raise ConfigError(
                f"scale {self.scale} is inconsistent with task {self.task} (BISR needs 4, BID needs 1)",
                key="model.scale",
            )

    @property
    def multiple(self):
        """Input height and width must be divisible by this."""
        return 2 ** (max(self.M, self.L) - 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale configuration used by the overfit and ablation checks."""
        base = dict(K=4, M=3, N=2, L=3, channels=16, extractor_blocks=2, recon_blocks=4)
        base.update(overrides)
        return cls(**base)


def replicate_input(img, K, dim=0):
    """Stack ``K + 1`` identical copies of ``img`` along ``dim``."""
    if K < 0:
        raise ValueError("K must be >= 0")
    return torch.stack([img] * (K + 1), dim=dim)


def check_divisible(x, multiple, what="input"):
    H, W = x.shape[-2:]
    if H % multiple or W % multiple:
        raise ShapeError(
            f"{what} spatial size {H}x{W} is not divisible by {multiple}",
            dim="H" if H % multiple else "W",
        )


class FeatureExtractor(nn.Module):
    """3->C stem convolution followed by residual blocks; shared over replicas."""

    def __init__(self, channels, n_blocks):
        super().__init__()
        self.stem = nn.Conv2d(3, channels, 3, 1, 1)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(n_blocks)])

    def forward(self, x):
        return self.blocks(self.stem(x))


def extract_features(replicas, extractor):
    """Run the shared extractor on ``(B, K+1, 3, H, W)`` replicas; returns K+1 features."""
    B, R = replicas.shape[:2]
    feats = extractor(replicas.reshape(B * R, *replicas.shape[2:]))
    return list(feats.reshape(B, R, *feats.shape[1:]).unbind(1))


def build_pyramid(feat, downs, M):
    """Level 0 is ``feat``; level m+1 is the stride-2 conv ``downs[m]`` of level m."""
    check_divisible(feat, 2 ** (M - 1), "pyramid base")
    levels = [feat]
    for m in range(M - 1):
        levels.append(downs[m](levels[-1]))
    return levels


def _down_convs(channels, n):
    return nn.ModuleList([nn.Conv2d(channels, channels, 3, 2, 1) for _ in range(n)])


def _merge_convs(channels, n):
    return nn.ModuleList([nn.Conv2d(2 * channels, channels, 3, 1, 1) for _ in range(n)])


class PTB(nn.Module):
    """Progressive transfer block.

    offsets = conv(F0 || Fprev); FD = deform_conv(Fprev, offsets);
    mask = softmax_c(conv(F0) - conv(Fprev)); out = F0 + conv(F0 || mask * FD).
    """

    def __init__(self, channels, k=3):
        super().__init__()
        self.offset_conv = nn.Conv2d(2 * channels, 2 * k * k, k, 1, k // 2)
        self.dconv = nn.Conv2d(channels, channels, k, 1, k // 2)  # weights only; applied deformably
        self.mask_ref = nn.Conv2d(channels, channels, k, 1, k // 2)
        self.mask_nbr = nn.Conv2d(channels, channels, k, 1, k // 2)
        self.res_conv = nn.Conv2d(2 * channels, channels, k, 1, k // 2)
        nn.init.zeros_(self.res_conv.weight)
        nn.init.zeros_(self.res_conv.bias)

    def transfer_mask(self, f0, fprev):
        return F.softmax(self.mask_ref(f0) - self.mask_nbr(fprev), dim=1)

    def forward(self, f0, fprev, return_mask=False):
        if f0.shape != fprev.shape:
            raise ShapeError(f"PTB inputs differ: {tuple(f0.shape)} vs {tuple(fprev.shape)}", dim="shape")
        offsets = self.offset_conv(torch.cat([f0, fprev], dim=1))
        fd = deform_conv2d(fprev, offsets, ConvParams.from_module(self.dconv))
        mask = self.transfer_mask(f0, fprev)
        out = f0 + self.res_conv(torch.cat([f0, mask * fd], dim=1))
        return (out, mask) if return_mask else out


def ptb_forward(f0, fprev, ptb, return_mask=False):
    return ptb(f0, fprev, return_mask=return_mask)


class PPT(nn.Module):
    """Pyramid progressive transfer with per-level, per-block PTBs shared over replicas."""

    def __init__(self, channels, M, N):
        super().__init__()
        self.M, self.N = M, N
        self.downs = _down_convs(channels, M - 1)
        self.ptbs = nn.ModuleList(
            [nn.ModuleList([PTB(channels) for _ in range(N)]) for _ in range(M)]
        )
        self.merge = _merge_convs(channels, M - 1)

    def transfer(self, f0_pyr, fi_pyr, masks=None):
        chain = []
        for m in range(self.M):
            out = fi_pyr[m]
            for n in range(self.N):
                out, mask = self.ptbs[m][n](f0_pyr[m], out, return_mask=True)
                if masks is not None:
                    masks.append(mask)
            chain.append(out)
        merged = chain[-1]
        for m in range(self.M - 2, -1, -1):
            merged = self.merge[m](torch.cat([upsample_bilinear(merged, 2), chain[m]], dim=1))
        return merged

    def forward(self, feats, masks=None):
        """Map K+1 features to K+1 transferred features at full resolution.

        Replicas are folded into the batch axis; F_0 is broadcast against each.
        """
        R = len(feats)
        B = feats[0].shape[0]
        fi = torch.cat(feats, dim=0)  # (R*B, C, H, W), replica-major
        f0_pyr = build_pyramid(feats[0], self.downs, self.M)
        fi_pyr = build_pyramid(fi, self.downs, self.M)
        f0_pyr = [lvl.repeat(R, 1, 1, 1) for lvl in f0_pyr]
        out = self.transfer(f0_pyr, fi_pyr, masks)
        return list(out.split(B, dim=0))


def ppt_forward(feats, ppt, masks=None):
    return ppt(feats, masks=masks)


class PSA(nn.Module):
    """Pyramid self-attention fusion of K+1 transferred features."""

    def __init__(self, channels, L, n_feats):
        super().__init__()
        self.L = L
        self.n_feats = n_feats
        self.downs = _down_convs(channels, L - 1)
        self.emb_ref = nn.ModuleList([nn.Conv2d(channels, channels, 3, 1, 1) for _ in range(L)])
        self.emb_nbr = nn.ModuleList([nn.Conv2d(channels, channels, 3, 1, 1) for _ in range(L)])
        self.fusion = nn.ModuleList([nn.Conv2d(n_feats * channels, channels, 1) for _ in range(L)])
        self.agg3d = nn.ModuleList(
            [nn.Conv3d(channels, channels, (n_feats, 1, 1)) for _ in range(L)]
        )
        self.sa_conv1 = nn.ModuleList([nn.Conv2d(channels, channels, 3, 1, 1) for _ in range(L)])
        self.sa_conv2 = nn.ModuleList([nn.Conv2d(channels, channels, 3, 1, 1) for _ in range(L)])
        self.merge = _merge_convs(channels, L - 1)

    def similarity(self, f0, fi, level):
        """Per-pixel channel dot product of the two embeddings, squashed, broadcast over C."""
        dot = (self.emb_ref[level](f0) * self.emb_nbr[level](fi)).sum(dim=1, keepdim=True)
        return torch.sigmoid(dot).expand_as(fi)

    def spatial_attention(self, x, level):
        return torch.sigmoid(self.sa_conv2[level](lrelu(self.sa_conv1[level](x))))

    def level_forward(self, feats, level, thetas=None):
        f0 = feats[0]
        modulated = []
        for fi in feats:
            theta = self.similarity(f0, fi, level)
            if thetas is not None:
                thetas.append(theta)
            modulated.append(theta * fi)
        fused = self.fusion[level](torch.cat(modulated, dim=1))
        stacked = torch.stack(feats, dim=2)  # (B, C, K+1, h, w)
        fused = lrelu(fused + self.agg3d[level](stacked).squeeze(2))
        att = self.spatial_attention(fused, level)
        return fused * att + att

    def forward(self, feats, thetas=None):
        if len(feats) != self.n_feats:
            raise ShapeError(f"PSA built for {self.n_feats} features, got {len(feats)}", dim="K")
        R = len(feats)
        B = feats[0].shape[0]
        pyr = build_pyramid(torch.cat(feats, dim=0), self.downs, self.L)
        per_level = [list(lvl.split(B, dim=0)) for lvl in pyr]
        out = [self.level_forward(per_level[lv], lv, thetas) for lv in range(self.L)]
        merged = out[-1]
        for lv in range(self.L - 2, -1, -1):
            merged = self.merge[lv](torch.cat([out[lv], upsample_bilinear(merged, 2)], dim=1))
        assert len(per_level[0]) == R
        return merged


def psa_similarity(f0, fi, psa, level=0):
    return psa.similarity(f0, fi, level)


def psa_forward(feats, psa, thetas=None):
    return psa(feats, thetas=thetas)


class ResidualTransfer(nn.Module):
    """Ablation stand-in for PPT: N residual blocks per replica, no pyramid."""

    def __init__(self, channels, N):
        super().__init__()
        self.body = nn.Sequential(*[ResidualBlock(channels) for _ in range(N)])

    def forward(self, feats, masks=None):
        B = feats[0].shape[0]
        return list(self.body(torch.cat(feats, dim=0)).split(B, dim=0))


class ResidualFusion(nn.Module):
    """Ablation stand-in for PSA: 1x1 fusion conv, N residual blocks, 3x3 conv."""

    def __init__(self, channels, N, n_feats):
        super().__init__()
        self.fuse = nn.Conv2d(n_feats * channels, channels, 1)
        self.body = nn.Sequential(*[ResidualBlock(channels) for _ in range(N)])
        self.tail = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, feats, thetas=None):
        return self.tail(self.body(lrelu(self.fuse(torch.cat(feats, dim=1)))))


class Reconstruction(nn.Module):
    """MS-RCAB trunk, optional x4 pixel-shuffle tail, zero-initialised RGB projection."""

    def __init__(self, channels, n_blocks, scale, reduction=4):
        super().__init__()
        self.scale = scale
        self.blocks = nn.Sequential(*[MSRCAB(channels, reduction) for _ in range(n_blocks)])
        if scale == 4:
            self.up1 = nn.Conv2d(channels, 4 * channels, 3, 1, 1)
            self.up2 = nn.Conv2d(channels, 4 * channels, 3, 1, 1)
        self.out_conv = nn.Conv2d(channels, 3, 3, 1, 1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x):
        x = self.blocks(x)
        if self.scale == 4:
            x = lrelu(pixel_shuffle(self.up1(x), 2))
            x = lrelu(pixel_shuffle(self.up2(x), 2))
        return self.out_conv(x)


def reconstruct(fused, recon):
    return recon(fused)


class EDPN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C, R = cfg.channels, cfg.K + 1
        self.extractor = FeatureExtractor(C, cfg.extractor_blocks)
        self.transfer = PPT(C, cfg.M, cfg.N) if cfg.use_ppt else ResidualTransfer(C, cfg.N)
        self.fusion = PSA(C, cfg.L, R) if cfg.use_psa else ResidualFusion(C, cfg.N, R)
        self.recon = Reconstruction(C, cfg.recon_blocks, cfg.scale, cfg.reduction)

    def forward(self, img, trace=None):
        """Unclamped restoration of ``img`` (``(B, 3, H, W)`` or ``(3, H, W)``).

        If ``trace`` is a dict it receives the PTB masks (``"masks"``), the
        similarity maps (``"thetas"``) and the transferred features
        (``"transferred"``).
        """
        squeeze = img.dim() == 3
        if squeeze:
            img = img.unsqueeze(0)
        check_divisible(img, self.cfg.multiple)
        masks = [] if trace is not None else None
        thetas = [] if trace is not None else None
        replicas = replicate_input(img, self.cfg.K, dim=1)
        feats = extract_features(replicas, self.extractor)
        transferred = self.transfer(feats, masks=masks)
        fused = self.fusion(transferred, thetas=thetas)
        out = upsample_bilinear(img, self.cfg.scale) + self.recon(fused)
        if trace is not None:
            trace.update(masks=masks, thetas=thetas, transferred=transferred, fused=fused)
        return out.squeeze(0) if squeeze else out

    @torch.no_grad()
    def restore(self, img):
        """Inference: forward pass clamped to [0, 1]."""
        return self(img).clamp(0, 1)


def model_forward(img, model, clamp=False):
    out = model(img)
    return out.clamp(0, 1) if clamp else out


def build_model(cfg: ModelConfig, seed=0, dtype=torch.float32):
    """Construct a deterministically initialised model."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = EDPN(cfg)
    return model.to(dtype)


def parameter_set(model):
    """Parameters as a path-sorted dict (the serialisation order)."""
    return dict(sorted(model.state_dict().items()))


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def zero_residual_(model):
    """Zero the final projection so the model reduces to its bilinear skip path."""
    with torch.no_grad():
        model.recon.out_conv.weight.zero_()
        model.recon.out_conv.bias.zero_()
    return model
