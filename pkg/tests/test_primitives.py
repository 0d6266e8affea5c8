import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from edpn import deform
from edpn.degradation import blur, make_kernel
from edpn.errors import ShapeError
from edpn.gradcheck import grad_check
from edpn.primitives import (
    MSRCAB,
    ConvParams,
    MSChannelAttention,
    ResidualBlock,
    bilinear_sample,
    conv2d,
    conv3d,
    deform_conv2d,
    lrelu,
    pixel_shuffle,
    pixel_unshuffle,
    upsample_bilinear,
)

from oracles import blur_ref, conv2d_ref, conv3d_ref, deform_conv2d_ref, upsample2_ref

BACKENDS = ["torch"] + (["cython"] if deform.HAVE_EXTENSION else [])


def _rand(g, *shape, dtype=torch.float32):
    return torch.randn(*shape, generator=g, dtype=dtype)


# ---------------------------------------------------------------- conv2d / conv3d


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_matches_nested_loops(seed):
    g = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    C, O = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    H, W = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
    x, w, b = _rand(g, 2, C, H, W), _rand(g, O, C, k, k), _rand(g, O)
    out = conv2d(x, ConvParams(w, b, stride, pad))
    ref = conv2d_ref(x.numpy(), w.numpy(), b.numpy(), stride, pad)
    assert out.shape == ref.shape
    assert np.abs(out.numpy() - ref).max() <= 1e-6 * max(1.0, np.abs(ref).max())


@pytest.mark.parametrize("seed", range(20))
def test_conv3d_matches_nested_loops(seed):
    g = torch.Generator().manual_seed(100 + seed)
    rng = np.random.default_rng(seed)
    C, O, D = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 5))
    kd = int(rng.choice([k for k in (1, 3) if k <= D] + [D]))
    x, w, b = _rand(g, 1, C, D, 5, 4), _rand(g, O, C, kd, 1, 3), _rand(g, O)
    out = conv3d(x, w, b, padding=0)
    ref = conv3d_ref(x.numpy(), w.numpy(), b.numpy(), 0)
    assert out.shape == ref.shape
    assert np.abs(out.numpy() - ref).max() <= 1e-6 * max(1.0, np.abs(ref).max())


def test_conv2d_identity_kernel_and_shapes():
    x = torch.rand(1, 2, 5, 7)
    w = torch.zeros(2, 2, 3, 3)
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1
    assert torch.equal(conv2d(x, ConvParams(w, None, 1, 1)), x)
    assert conv2d(x, ConvParams(w, None, 2, 1)).shape == (1, 2, 3, 4)


def test_conv_errors():
    with pytest.raises(ShapeError) as e:
        conv2d(torch.rand(1, 3, 5, 5), ConvParams(torch.rand(2, 2, 3, 3)))
    assert e.value.dim == "in_ch"
    with pytest.raises(ShapeError):
        ConvParams(torch.rand(2, 2, 2, 2))
    with pytest.raises(ShapeError):
        conv2d(torch.rand(1, 2, 2, 2), ConvParams(torch.rand(2, 2, 5, 5)))
    with pytest.raises(ShapeError):
        conv3d(torch.rand(1, 1, 4, 3, 3), torch.rand(1, 1, 2, 1, 1))


# ---------------------------------------------------------------- blur


@pytest.mark.parametrize("seed", range(20))
def test_blur_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    img = torch.from_numpy(rng.random((3, int(rng.integers(6, 11)), int(rng.integers(6, 11)))).astype(np.float32))
    if seed % 2:
        kern = make_kernel("gaussian", sigma=float(rng.uniform(0.5, 1.5)), size=5)
    else:
        kern = make_kernel("linear_motion", length=float(rng.uniform(1, 5)), angle=float(rng.uniform(0, 180)))
    out = blur(img, kern)
    ref = blur_ref(img.numpy(), kern.taps.numpy())
    assert np.abs(out.numpy() - ref).max() <= 1e-6


# ---------------------------------------------------------------- deformable conv


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(10))
def test_deform_zero_offsets_equal_conv(backend, seed):
    g = torch.Generator().manual_seed(seed)
    C, O, H, W = 1 + seed % 3, 1 + (seed + 1) % 3, 5 + seed % 4, 6 + seed % 3
    x, w, b = _rand(g, 2, C, H, W), _rand(g, O, C, 3, 3), _rand(g, O)
    stride = 1 + seed % 2
    ref = F.conv2d(x, w, b, stride=stride, padding=1)
    off = torch.zeros(2, 18, *ref.shape[-2:])
    out = deform.deform_conv2d(x, off, w, b, stride=stride, padding=1, backend=backend)
    assert (out - ref).abs().max().item() <= 1e-6 * max(1.0, ref.abs().max().item())


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("dy,dx", [(1, 0), (0, -2), (-1, 3), (2, 2)])
def test_deform_integer_offsets_equal_shifted_conv(backend, dy, dx):
    g = torch.Generator().manual_seed(7)
    x, w = _rand(g, 1, 2, 8, 9), _rand(g, 3, 2, 3, 3)
    off = torch.zeros(1, 18, 8, 9)
    off[:, 0::2] = dy
    off[:, 1::2] = dx
    out = deform.deform_conv2d(x, off, w, padding=1, backend=backend)
    # shifted[y, x] = x[y + dy, x + dx] with zeros outside, then ordinary conv
    shifted = torch.zeros_like(x)
    H, W = x.shape[-2:]
    ys, yd = slice(max(dy, 0), H + min(dy, 0)), slice(max(-dy, 0), H + min(-dy, 0))
    xs, xd = slice(max(dx, 0), W + min(dx, 0)), slice(max(-dx, 0), W + min(-dx, 0))
    shifted[..., yd, xd] = x[..., ys, xs]
    # zero padding of the shifted image differs from sampling past the border only
    # where a tap reads outside both; compare on the interior untouched by the shift
    ref = F.conv2d(shifted, w, padding=1)
    inner = (slice(None), slice(None), slice(1 + max(-dy, 0), H - 1 - max(dy, 0)), slice(1 + max(-dx, 0), W - 1 - max(dx, 0)))
    assert torch.allclose(out[inner], ref[inner], atol=1e-6)
    # and everywhere against the scalar oracle
    ref_full = deform_conv2d_ref(x.numpy(), off.numpy(), w.numpy(), None, 1, 1)
    assert np.abs(out.numpy() - ref_full).max() <= 1e-5


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", range(4))
def test_deform_fractional_offsets_match_scalar_oracle(backend, seed):
    g = torch.Generator().manual_seed(seed)
    x, w, b = _rand(g, 1, 2, 6, 7, dtype=torch.float64), _rand(g, 2, 2, 3, 3, dtype=torch.float64), _rand(g, 2, dtype=torch.float64)
    off = 3 * _rand(g, 1, 18, 6, 7, dtype=torch.float64)  # many taps land outside
    out = deform.deform_conv2d(x, off, w, b, padding=1, backend=backend)
    ref = deform_conv2d_ref(x.numpy(), off.numpy(), w.numpy(), b.numpy(), 1, 1)
    assert np.abs(out.numpy() - ref).max() <= 1e-12


def test_backends_agree_with_grads():
    if not deform.HAVE_EXTENSION:
        pytest.skip("compiled kernel not built")
    g = torch.Generator().manual_seed(3)
    x, w, off = _rand(g, 2, 3, 7, 6), _rand(g, 4, 3, 3, 3), 2 * _rand(g, 2, 18, 4, 3)
    grads = {}
    for be in BACKENDS:
        xs, ws, os_ = (t.clone().requires_grad_() for t in (x, w, off))
        out = deform.deform_conv2d(xs, os_, ws, stride=2, padding=1, backend=be)
        (out * torch.linspace(-1, 1, out.numel()).view_as(out)).sum().backward()
        grads[be] = (out.detach(), xs.grad, ws.grad, os_.grad)
    for a, b in zip(grads["torch"], grads["cython"]):
        assert torch.allclose(a, b, atol=1e-5, rtol=1e-5)


def test_deform_shape_errors():
    x, w = torch.rand(1, 2, 5, 5), torch.rand(2, 2, 3, 3)
    with pytest.raises(ShapeError) as e:
        deform.deform_conv2d(x, torch.zeros(1, 16, 5, 5), w, padding=1)
    assert e.value.dim == "offset_ch"
    with pytest.raises(ShapeError) as e:
        deform.deform_conv2d(x, torch.zeros(1, 18, 4, 5), w, padding=1)
    assert e.value.dim == "offset_hw"
    with pytest.raises(ShapeError) as e:
        deform.deform_conv2d(torch.rand(1, 3, 5, 5), torch.zeros(1, 18, 5, 5), w, padding=1)
    assert e.value.dim == "in_ch"


def test_primitives_deform_wrapper_uses_params():
    g = torch.Generator().manual_seed(0)
    x, w, b = _rand(g, 1, 2, 6, 6), _rand(g, 2, 2, 3, 3), _rand(g, 2)
    off = torch.zeros(1, 18, 6, 6)
    assert torch.allclose(deform_conv2d(x, off, ConvParams(w, b, 1, 1)), F.conv2d(x, w, b, padding=1), atol=1e-6)


# ---------------------------------------------------------------- resampling


def test_bilinear_sample_cases():
    x = torch.arange(12, dtype=torch.float64).view(1, 3, 4)
    assert bilinear_sample(x, 1.0, 2.0).item() == x[0, 1, 2].item()
    assert bilinear_sample(x, 0.5, 0.5).item() == pytest.approx((0 + 1 + 4 + 5) / 4)
    assert bilinear_sample(x, -1.0, 0.0).item() == 0.0
    assert bilinear_sample(x, -0.5, 0.0).item() == pytest.approx(0.5 * x[0, 0, 0].item())


@given(h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_upsample2_matches_oracle(h, w, seed):
    x = torch.from_numpy(np.random.default_rng(seed).random((1, 2, h, w)))
    out = upsample_bilinear(x, 2)
    assert np.abs(out.numpy() - upsample2_ref(x.numpy())).max() <= 1e-12


def test_upsample_constant_and_identity():
    x = torch.full((1, 3, 4, 5), 0.3)
    assert torch.allclose(upsample_bilinear(x, 4), torch.full((1, 3, 16, 20), 0.3))
    y = torch.rand(1, 3, 4, 5)
    assert upsample_bilinear(y, 1) is y
    with pytest.raises(ValueError):
        upsample_bilinear(y, 0)


@given(c=st.integers(1, 3), r=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_pixel_shuffle_roundtrip_and_layout(c, r, h, w):
    x = torch.arange(c * r * r * h * w, dtype=torch.float64).view(1, c * r * r, h, w)
    y = pixel_shuffle(x, r)
    assert y.shape == (1, c, h * r, w * r)
    assert torch.equal(pixel_unshuffle(y, r), x)
    # element (ch, i, j) of the output comes from input channel ch*r*r + (i%r)*r + j%r
    for ch in range(c):
        for i in range(h * r):
            for j in range(w * r):
                assert y[0, ch, i, j] == x[0, ch * r * r + (i % r) * r + j % r, i // r, j // r]


def test_pixel_shuffle_errors():
    with pytest.raises(ShapeError):
        pixel_shuffle(torch.rand(1, 5, 2, 2), 2)
    with pytest.raises(ShapeError):
        pixel_unshuffle(torch.rand(1, 1, 3, 4), 2)


def test_lrelu_slope():
    x = torch.tensor([-2.0, 0.0, 3.0])
    assert torch.equal(lrelu(x), torch.tensor([-0.2, 0.0, 3.0]))


# ---------------------------------------------------------------- blocks


def test_residual_block_zero_branch_is_identity():
    blk = ResidualBlock(4)
    torch.nn.init.zeros_(blk.conv2.weight)
    torch.nn.init.zeros_(blk.conv2.bias)
    x = torch.rand(1, 4, 5, 5)
    assert torch.equal(blk(x), x)
    with pytest.raises(ShapeError):
        blk(torch.rand(1, 3, 5, 5))


def test_ms_rcab_matches_manual_composition():
    torch.manual_seed(0)
    blk = MSRCAB(8, reduction=4).double()
    x = torch.rand(2, 8, 6, 6, dtype=torch.float64)
    b = blk.conv2(lrelu(blk.conv1(x)))
    a = blk.attn
    g = a.global_fc2(lrelu(a.global_fc1(b.mean(dim=(2, 3), keepdim=True))))
    loc = a.local_fc2(lrelu(a.local_fc1(b)))
    assert torch.allclose(blk(x), x + torch.sigmoid(g + loc) * b, atol=1e-12)
    att = MSChannelAttention(8)(torch.rand(1, 8, 4, 4))
    assert att.min() > 0 and att.max() < 1


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("backend", BACKENDS)
def test_gradcheck_deform_conv(backend):
    g = torch.Generator().manual_seed(11)
    x = _rand(g, 1, 2, 5, 5, dtype=torch.float64)
    w = _rand(g, 2, 2, 3, 3, dtype=torch.float64)
    b = _rand(g, 2, dtype=torch.float64)
    # keep every sample away from integer coordinates where bilinear is not differentiable
    off = 0.3 + 0.4 * torch.rand(1, 18, 5, 5, generator=g, dtype=torch.float64)
    rep = grad_check(lambda x, off, w, b: deform.deform_conv2d(x, off, w, b, padding=1, backend=backend),
                     {"x": x, "off": off, "w": w, "b": b}, tol=1e-4)
    assert rep.passed, str(rep)


def test_gradcheck_conv_and_upsample_and_shuffle():
    g = torch.Generator().manual_seed(12)
    x = _rand(g, 1, 4, 4, 4, dtype=torch.float64)
    w = _rand(g, 4, 4, 3, 3, dtype=torch.float64)
    assert grad_check(lambda x, w: conv2d(x, ConvParams(w, None, 1, 1)), [x, w]).passed
    assert grad_check(lambda x: upsample_bilinear(x, 2), [x]).passed
    assert grad_check(lambda x: pixel_shuffle(x, 2), [x]).passed
    w3 = _rand(g, 2, 4, 2, 1, 1, dtype=torch.float64)
    x3 = _rand(g, 1, 4, 2, 3, 3, dtype=torch.float64)
    assert grad_check(lambda x, w: conv3d(x, w), [x3, w3]).passed


def test_gradcheck_ms_rcab():
    torch.manual_seed(1)
    blk = MSRCAB(4, reduction=2).double()
    x = torch.rand(1, 4, 5, 5, dtype=torch.float64)
    params = dict(blk.named_parameters())
    rep = grad_check(lambda x, *_: blk(x), {"x": x, **params}, tol=1e-4)
    assert rep.passed, str(rep)


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # wrong: should be 2x * g

    x = torch.rand(5, dtype=torch.float64) + 1
    assert not grad_check(Bad.apply, [x]).passed


# ---------------------------------------------------------------- precision


def test_float32_matches_float64():
    g = torch.Generator().manual_seed(5)
    x, w = _rand(g, 1, 3, 8, 8, dtype=torch.float64), _rand(g, 4, 3, 3, 3, dtype=torch.float64)
    off = _rand(g, 1, 18, 8, 8, dtype=torch.float64)
    hi = deform.deform_conv2d(x, off, w, padding=1)
    lo = deform.deform_conv2d(x.float(), off.float(), w.float(), padding=1)
    assert (hi - lo.double()).abs().max().item() < 1e-5


@given(
    h=st.integers(3, 10), w=st.integers(3, 10), k=st.sampled_from([1, 3, 5]),
    stride=st.integers(1, 3), pad=st.integers(0, 2),
)
@settings(max_examples=40, deadline=None)
def test_output_size_law(h, w, k, stride, pad):
    if h + 2 * pad < k or w + 2 * pad < k:
        return
    x = torch.rand(1, 1, h, w)
    out = conv2d(x, ConvParams(torch.rand(1, 1, k, k), None, stride, pad))
    assert out.shape[-2:] == ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    off = torch.zeros(1, 2 * k * k, *out.shape[-2:])
    assert deform.deform_conv2d(x, off, torch.rand(1, 1, k, k), stride=stride, padding=pad).shape == out.shape


def test_bilinear_sample_matches_interpolate_centres():
    x = torch.rand(2, 4, 4, dtype=torch.float64)
    y = F.interpolate(x[None], scale_factor=2, mode="bilinear", align_corners=False)[0]
    # output pixel (3, 5) samples input at ((3+.5)/2-.5, (5+.5)/2-.5)
    assert torch.allclose(bilinear_sample(x, 1.25, 2.25), y[:, 3, 5])
    assert math.isclose(bilinear_sample(x, 0.0, 0.0)[0].item(), x[0, 0, 0].item())
