"""Finite-difference verification of autograd gradients."""

from dataclasses import dataclass, field

import torch


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)  # input name -> max relative error
    checked: dict = field(default_factory=dict)  # input name -> number of elements probed
    tol: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error <= self.tol

    def __str__(self):
        rows = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"grad_check {'PASS' if self.passed else 'FAIL'} (tol {self.tol:.0e}): {rows}"


def grad_check(op, inputs, tol=1e-4, step=1e-5, max_elems=None, seed=0):
    """Compare autograd gradients of ``op`` against central differences.

    The scalar probed is ``sum(op(*inputs) * v)`` for a fixed random ``v``.

    Args:
        op: callable returning a tensor; must be differentiable in ``inputs``.
        inputs: dict ``name -> tensor`` (float64 recommended) or a sequence.
            Every floating-point tensor is checked (leaf copies are made for
            tensors without ``requires_grad``); other values pass through.
        tol: pass threshold on the relative error.
        step: finite-difference step.
        max_elems: if given, probe at most this many randomly chosen elements
            per input instead of all of them.
        seed: seeds the projection vector and the element subsample.

    Returns:
        GradReport. The relative error per input is
        ``max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-12)``.
    """
    if not isinstance(inputs, dict):
        inputs = {f"arg{i}": t for i, t in enumerate(inputs)}
    names = list(inputs)
    args = [
        t.detach().clone().requires_grad_()
        if isinstance(t, torch.Tensor) and t.is_floating_point() and not t.requires_grad
        else t
        for t in (inputs[n] for n in names)
    ]
    gen = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        ref = op(*args)
    v = torch.randn(ref.shape, generator=gen, dtype=torch.float64).to(ref.dtype)

    def scalar():
        return (op(*args) * v).sum()

    targets = [(n, t) for n, t in zip(names, args) if isinstance(t, torch.Tensor) and t.requires_grad]
    analytic = torch.autograd.grad(scalar(), [t for _, t in targets], allow_unused=True)

    report = GradReport(tol=tol)
    for (name, t), ga in zip(targets, analytic):
        ga = torch.zeros_like(t) if ga is None else ga
        n = t.numel()
        if max_elems is not None and n > max_elems:
            idx = torch.randperm(n, generator=gen)[:max_elems].tolist()
        else:
            idx = range(n)
        flat = t.data.view(-1)
        num, ana = [], []
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                fp = scalar().item()
                flat[i] = orig - step
                fm = scalar().item()
                flat[i] = orig
                num.append((fp - fm) / (2 * step))
                ana.append(ga.reshape(-1)[i].item())
        num = torch.tensor(num, dtype=torch.float64)
        ana = torch.tensor(ana, dtype=torch.float64)
        scale = max(num.abs().max().item(), ana.abs().max().item(), 1e-12)
        report.errors[name] = (num - ana).abs().max().item() / scale
        report.checked[name] = len(num)
    return report
