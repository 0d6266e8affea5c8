"""Adam, step-decay schedule, patch sampling, dihedral augmentation and the training loop."""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from edpn import checkpoint as ckpt_io
from edpn.checkpoint import Checkpoint, OptimizerState
from edpn.degradation import DegradeSpec, degrade
from edpn.errors import ShapeError, TrainingError
from edpn.losses import LossWeights, total_loss
from edpn.model import ModelConfig, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 4
    patch: int = 64  # input-side patch; 160 for BID
    decay_factor: float = 0.8
    decay_every: int = 500
    max_iters: int = 3000
    seed: int = 0
    epsilon: float = 1e-3
    lam: float = 0.1
    clip_norm: float = 10.0
    augment: bool = True
    log_every: int = 100
    ckpt_every: int = 0  # 0: only at exit

    def __post_init__(self):
        self.validate()

    def validate(self):
        from edpn.errors import ConfigError

        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]", key="train.decay_factor")
        for name in ("batch", "patch", "decay_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=f"train.{name}")
        if self.max_iters < 0 or self.ckpt_every < 0:
            raise ConfigError("max_iters and ckpt_every must be >= 0", key="train.max_iters")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0", key="train.lr0")

    def to_dict(self):
        return asdict(self)

    @property
    def loss_weights(self):
        return LossWeights(self.epsilon, self.lam)


def new_optimizer_state(params):
    return OptimizerState(
        m={k: torch.zeros_like(p) for k, p in params.items()},
        v={k: torch.zeros_like(p) for k, p in params.items()},
        step=0,
    )


@torch.no_grad()
def adam_step(params, grads, state: OptimizerState, lr, cfg: TrainConfig):
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Args:
        params: dict name -> parameter tensor.
        grads: dict name -> gradient (``None`` entries are treated as zero).
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("parameter, gradient and optimizer-state names differ", dim="params")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}", dim=name)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / c2).sqrt_().add_(cfg.adam_eps)
        p.addcdiv_(m / c1, denom, value=-lr)
    return params, state


def lr_at(it, cfg: TrainConfig):
    """Step decay ``lr0 * decay_factor ** floor(it / decay_every)``, frozen after ``max_iters``."""
    it = min(it, cfg.max_iters) if cfg.max_iters > 0 else it
    return cfg.lr0 * cfg.decay_factor ** (it // cfg.decay_every)


def sample_patch(pair, patch, rng, scale=1):
    """Aligned random crops: ``patch`` on the input, ``scale * patch`` on the ground truth."""
    inp, gt = pair
    H, W = inp.shape[-2:]
    if H < patch or W < patch:
        raise ShapeError(f"input {H}x{W} smaller than patch {patch}", dim="H" if H < patch else "W")
    if gt.shape[-2] != H * scale or gt.shape[-1] != W * scale:
        raise ShapeError(f"ground truth {tuple(gt.shape[-2:])} is not {scale}x input {H}x{W}", dim="scale")
    y = int(rng.integers(0, H - patch + 1))
    x = int(rng.integers(0, W - patch + 1))
    ps = patch * scale
    return (
        inp[..., y : y + patch, x : x + patch],
        gt[..., y * scale : y * scale + ps, x * scale : x * scale + ps],
    )


def dihedral(x, t):
    """Transform ``t`` in 0..7: optional horizontal flip (t >= 4) then ``t % 4`` quarter turns."""
    if t >= 4:
        x = torch.flip(x, dims=(-1,))
    return torch.rot90(x, t % 4, dims=(-2, -1))


def inverse_dihedral(x, t):
    x = torch.rot90(x, -(t % 4), dims=(-2, -1))
    if t >= 4:
        x = torch.flip(x, dims=(-1,))
    return x


def augment(inp, gt, rng, t=None):
    """Apply one random dihedral transform identically to both patches."""
    if t is None:
        t = int(rng.integers(0, 8))
    return dihedral(inp, t), dihedral(gt, t)


def prepare_pairs(corpus, spec: DegradeSpec):
    return [degrade(img, spec, i) for i, img in enumerate(corpus)]


def _batch(pairs, cfg, scale, rng):
    inps, gts = [], []
    for _ in range(cfg.batch):
        pair = pairs[int(rng.integers(0, len(pairs)))]
        inp, gt = sample_patch(pair, cfg.patch, rng, scale)
        if cfg.augment:
            inp, gt = augment(inp, gt, rng)
        inps.append(inp)
        gts.append(gt)
    return torch.stack(inps).float(), torch.stack(gts).float()


def global_grad_norm(grads):
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values() if g is not None))


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus=None,
    spec: DegradeSpec = None,
    pairs=None,
    resume: Checkpoint = None,
    out_dir=None,
    progress=None,
):
    """Train from scratch (or ``resume``) and return ``(Checkpoint, trace)``.

    Args:
        corpus: list of sharp ``(3, H, W)`` images, degraded with ``spec``.
        pairs: alternatively, pre-built ``(input, gt)`` pairs.
        out_dir: if set, checkpoints are written there (``ckpt_XXXXXXX.edpn``
            every ``ckpt_every`` iterations and ``last.edpn`` at exit).
        progress: optional callable ``(row) -> None`` invoked each iteration.

    Returns:
        The final checkpoint and a list of trace rows
        ``{"iter", "lr", "charb", "ssim_loss", "total"}``.
    """
    if pairs is None:
        if not corpus:
            raise TrainingError("empty training corpus")
        pairs = prepare_pairs(corpus, spec or DegradeSpec(task=model_cfg.task, scale=model_cfg.scale))
    if not pairs:
        raise TrainingError("empty training corpus")
    scale = model_cfg.scale
    model = build_model(model_cfg, seed=train_cfg.seed)
    if resume is not None:
        model.load_state_dict(resume.params)
    model.train()
    params = dict(model.named_parameters())
    state = resume.optim if resume is not None and resume.optim is not None else new_optimizer_state(params)
    start = resume.iteration if resume is not None else 0
    rng = np.random.default_rng([train_cfg.seed, start])
    weights = train_cfg.loss_weights
    trace = []

    def snapshot(it):
        return Checkpoint.from_model(
            model, it, OptimizerState({k: t.clone() for k, t in state.m.items()},
                                      {k: t.clone() for k, t in state.v.items()}, state.step),
            meta={"train": train_cfg.to_dict()},
        )

    for it in range(start, train_cfg.max_iters):
        inp, gt = _batch(pairs, train_cfg, scale, rng)
        pred = model(inp)
        loss, charb, ssim_loss = total_loss(gt, pred, weights, parts=True)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at iteration {it}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        norm = global_grad_norm(grads)
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm at iteration {it}")
        if norm > train_cfg.clip_norm:
            for g in grads.values():
                if g is not None:
                    g.mul_(train_cfg.clip_norm / norm)
        lr = lr_at(it, train_cfg)
        adam_step(params, grads, state, lr, train_cfg)
        row = {
            "iter": it,
            "lr": lr,
            "charb": charb.item(),
            "ssim_loss": float(ssim_loss.detach()),
            "total": loss.item(),
        }
        trace.append(row)
        if progress is not None:
            progress(row)
        if it % train_cfg.log_every == 0:
            log.info("iter %d lr %.3g loss %.5f", it, lr, row["total"])
        if out_dir is not None and train_cfg.ckpt_every and (it + 1) % train_cfg.ckpt_every == 0:
            ckpt_io.save(snapshot(it + 1), f"{out_dir}/ckpt_{it + 1:07d}.edpn")

    model.eval()
    final = snapshot(max(start, train_cfg.max_iters))
    if out_dir is not None:
        ckpt_io.save(final, f"{out_dir}/last.edpn")
    return final, trace


def write_trace_csv(trace, path):
    lines = ["iter,lr,charb,ssim_loss,total"]
    lines += [f"{r['iter']},{r['lr']:.6g},{r['charb']:.8f},{r['ssim_loss']:.8f},{r['total']:.8f}" for r in trace]
    ckpt_io.atomic_write(path, ("\n".join(lines) + "\n").encode())
