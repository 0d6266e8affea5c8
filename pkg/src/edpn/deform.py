"""Deformable convolution (offsets only, no modulation) with two kernels.

The compiled Cython kernel (``edpn._deform_ext``) is used when it was built and
``EDPN_PURE_PYTHON`` is not set; otherwise a pure-torch gather implementation
differentiated by autograd takes over. Both follow the same sampling rule:
tap ``k = i*kw + j`` at output ``(oy, ox)`` reads the zero-padded input at
``(oy*stride - pad + i + dy, ox*stride - pad + j + dx)`` where ``(dy, dx)`` are
offset channels ``2k`` and ``2k + 1``.
"""

import os

import torch

try:
    if os.environ.get("EDPN_PURE_PYTHON"):
        raise ImportError("pure-python kernel forced by EDPN_PURE_PYTHON")
    from edpn import _deform_ext
except ImportError:
    _deform_ext = None

HAVE_EXTENSION = _deform_ext is not None
BACKEND = "cython" if HAVE_EXTENSION else "torch"


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def bilinear_gather(x, py, px):
    """Sample ``x[B, C, H, W]`` at fractional positions with zero padding.

    Args:
        x: input of shape ``(B, C, H, W)``.
        py, px: sampling rows/columns of shape ``(B, *S)``.

    Returns:
        Tensor of shape ``(B, C, *S)``. Lattice neighbours outside the image
        contribute zero, so the result is continuous in the coordinates.
    """
    B, C, H, W = x.shape
    spatial = py.shape[1:]
    py = py.reshape(B, -1)
    px = px.reshape(B, -1)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.long()
    x0 = x0.long()
    flat = x.reshape(B, C, H * W)
    out = x.new_zeros(B, C, py.shape[1])
    for dy, dx, w in (
        (0, 0, (1 - ly) * (1 - lx)),
        (0, 1, (1 - ly) * lx),
        (1, 0, ly * (1 - lx)),
        (1, 1, ly * lx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = (yy.clamp(0, H - 1) * W + xx.clamp(0, W - 1)).unsqueeze(1).expand(B, C, -1)
        vals = torch.gather(flat, 2, idx)
        out = out + vals * (w * valid.to(x.dtype)).unsqueeze(1)
    return out.reshape(B, C, *spatial)


def _torch_columns(x, offset, kh, kw, stride, pad):
    B, C, H, W = x.shape
    Ho, Wo = offset.shape[-2:]
    kk = kh * kw
    dev, dt = x.device, x.dtype
    oy = torch.arange(Ho, device=dev, dtype=dt).view(1, 1, Ho, 1) * stride - pad
    ox = torch.arange(Wo, device=dev, dtype=dt).view(1, 1, 1, Wo) * stride - pad
    ti = torch.arange(kh, device=dev, dtype=dt).repeat_interleave(kw).view(1, kk, 1, 1)
    tj = torch.arange(kw, device=dev, dtype=dt).repeat(kh).view(1, kk, 1, 1)
    off = offset.view(B, kk, 2, Ho, Wo)
    py = oy + ti + off[:, :, 0]
    px = ox + tj + off[:, :, 1]
    cols = bilinear_gather(x, py, px)  # (B, C, kk, Ho, Wo)
    return cols.reshape(B, C * kk, Ho * Wo)


class _DeformConvFunction(torch.autograd.Function):
    """Compiled path; columns are channels-last ``(B, Ho*Wo, kh*kw*Cin)``."""

    @staticmethod
    def forward(ctx, x, offset, weight, bias, stride, pad):
        B, C, H, W = x.shape
        Cout, _, kh, kw = weight.shape
        Ho, Wo = offset.shape[-2:]
        x_cl = x.detach().permute(0, 2, 3, 1).contiguous()
        off_ = offset.detach().contiguous()
        cols = x_cl.new_empty(B, Ho * Wo, kh * kw * C)
        _deform_ext.deform_im2col(x_cl.numpy(), off_.numpy(), cols.numpy(), kh, kw, stride, pad)
        w_t = weight.detach().permute(2, 3, 1, 0).reshape(kh * kw * C, Cout)
        out = torch.matmul(cols, w_t)  # (B, Ho*Wo, Cout)
        if bias is not None:
            out = out + bias.detach()
        ctx.save_for_backward(x_cl, off_, weight, cols)
        ctx.has_bias = bias is not None
        ctx.conf = (kh, kw, stride, pad)
        return out.view(B, Ho, Wo, Cout).permute(0, 3, 1, 2).contiguous()

    @staticmethod
    def backward(ctx, grad_out):
        x_cl, offset, weight, cols = ctx.saved_tensors
        kh, kw, stride, pad = ctx.conf
        B, Cout, Ho, Wo = grad_out.shape
        C = x_cl.shape[-1]
        g = grad_out.to(x_cl.dtype).permute(0, 2, 3, 1).reshape(B, Ho * Wo, Cout)
        w_t = weight.detach().permute(2, 3, 1, 0).reshape(kh * kw * C, Cout)
        grad_x = grad_offset = grad_w = grad_b = None
        if ctx.needs_input_grad[0] or ctx.needs_input_grad[1]:
            grad_cols = torch.matmul(g, w_t.t()).contiguous()
            gx = torch.zeros_like(x_cl)
            goff = torch.zeros_like(offset)
            _deform_ext.deform_col2im(
                x_cl.numpy(), offset.numpy(), grad_cols.numpy(), gx.numpy(), goff.numpy(),
                kh, kw, stride, pad,
            )
            grad_x, grad_offset = gx.permute(0, 3, 1, 2), goff
        if ctx.needs_input_grad[2]:
            gw = torch.matmul(cols.reshape(-1, cols.shape[-1]).t(), g.reshape(-1, Cout))
            grad_w = gw.reshape(kh, kw, C, Cout).permute(3, 2, 0, 1)
        if ctx.has_bias and ctx.needs_input_grad[3]:
            grad_b = g.sum(dim=(0, 1))
        return grad_x, grad_offset, grad_w, grad_b, None, None


def deform_conv2d(x, offset, weight, bias=None, stride=1, padding=0, backend=None):
    """Deformable 2-D convolution.

    Args:
        x: input ``(B, Cin, H, W)``.
        offset: ``(B, 2*kh*kw, Ho, Wo)`` pixel offsets as ``(dy, dx)`` pairs.
        weight: ``(Cout, Cin, kh, kw)``.
        bias: optional ``(Cout,)``.
        stride, padding: as for a regular convolution.
        backend: ``"cython"`` or ``"torch"``; defaults to :data:`BACKEND`.

    Returns:
        Tensor ``(B, Cout, Ho, Wo)``.
    """
    from edpn.errors import ShapeError

    if x.dim() != 4 or offset.dim() != 4 or weight.dim() != 4:
        raise ShapeError("deform_conv2d expects 4-D input, offset and weight")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if C != Cin:
        raise ShapeError(f"input channels {C} != weight in_channels {Cin}", dim="in_ch")
    if offset.shape[1] != 2 * kh * kw:
        raise ShapeError(
            f"offset channels {offset.shape[1]} != 2*kh*kw = {2 * kh * kw}", dim="offset_ch"
        )
    Ho, Wo = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
    if offset.shape[0] != B or tuple(offset.shape[2:]) != (Ho, Wo):
        raise ShapeError(
            f"offset shape {tuple(offset.shape)} does not match output grid {(B, Ho, Wo)}",
            dim="offset_hw",
        )
    backend = backend or BACKEND
    use_ext = (
        backend == "cython"
        and _deform_ext is not None
        and x.device.type == "cpu"
        and x.dtype in (torch.float32, torch.float64)
    )
    if use_ext:
        dt = x.dtype
        offset = offset.to(dt)
        return _DeformConvFunction.apply(x, offset, weight.to(dt), None if bias is None else bias.to(dt), stride, padding)
    if backend == "cython" and _deform_ext is None:
        raise RuntimeError("compiled deformable-conv kernel is not available")
    cols = _torch_columns(x, offset, kh, kw, stride, padding)
    out = torch.matmul(weight.reshape(Cout, -1), cols)
    if bias is not None:
        out = out + bias.view(1, Cout, 1)
    return out.view(B, Cout, Ho, Wo)
