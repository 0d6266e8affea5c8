# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled deformable-convolution column kernels (channels-last).

Input is ``x[b, y, x, c]``; columns are ``cols[b, oy*Wo + ox, k*C + c]``.
Sampling uses the zero-padded bilinear convention: each of the four lattice
neighbours contributes only when it lies inside the image.
"""

from libc.math cimport floor

ctypedef fused real:
    float
    double


def deform_im2col(real[:, :, :, ::1] x, real[:, :, :, ::1] offset,
                  real[:, :, ::1] cols, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = offset.shape[2], Wo = offset.shape[3]
    cdef Py_ssize_t KK = kh * kw
    cdef Py_ssize_t b, c, k, oy, ox, loc, y0, x0, y1, x1
    cdef double py, px, ly, lx, w00, w01, w10, w11
    cdef bint in_y0, in_y1, in_x0, in_x1
    cdef real *dst
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                loc = oy * Wo + ox
                for k in range(KK):
                    dst = &cols[b, loc, k * C]
                    py = oy * stride - pad + (k // kw) + offset[b, 2 * k, oy, ox]
                    px = ox * stride - pad + (k % kw) + offset[b, 2 * k + 1, oy, ox]
                    if py <= -1 or py >= H or px <= -1 or px >= W:
                        for c in range(C):
                            dst[c] = 0
                        continue
                    y0 = <Py_ssize_t>floor(py)
                    x0 = <Py_ssize_t>floor(px)
                    ly = py - y0
                    lx = px - x0
                    in_y0 = y0 >= 0
                    in_y1 = y0 + 1 < H
                    in_x0 = x0 >= 0
                    in_x1 = x0 + 1 < W
                    w00 = (1 - ly) * (1 - lx) if (in_y0 and in_x0) else 0
                    w01 = (1 - ly) * lx if (in_y0 and in_x1) else 0
                    w10 = ly * (1 - lx) if (in_y1 and in_x0) else 0
                    w11 = ly * lx if (in_y1 and in_x1) else 0
                    # clamp indices so every read is in bounds; zero weights mask them
                    y1 = min(y0 + 1, H - 1)
                    x1 = min(x0 + 1, W - 1)
                    y0 = max(y0, 0)
                    x0 = max(x0, 0)
                    for c in range(C):
                        dst[c] = <real>(
                            w00 * x[b, y0, x0, c] + w01 * x[b, y0, x1, c]
                            + w10 * x[b, y1, x0, c] + w11 * x[b, y1, x1, c]
                        )


def deform_col2im(real[:, :, :, ::1] x, real[:, :, :, ::1] offset,
                  real[:, :, ::1] grad_cols, real[:, :, :, ::1] grad_x,
                  real[:, :, :, ::1] grad_offset, int kh, int kw, int stride, int pad):
    """Scatter column gradients onto ``grad_x`` (channels-last) and ``grad_offset``.

    Both output buffers must be zero-filled by the caller.
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = offset.shape[2], Wo = offset.shape[3]
    cdef Py_ssize_t KK = kh * kw
    cdef Py_ssize_t b, c, k, oy, ox, loc, y0, x0, y1, x1
    cdef double py, px, ly, lx, g, v00, v01, v10, v11, gy, gx
    cdef double w00, w01, w10, w11, m00, m01, m10, m11
    cdef bint in_y0, in_y1, in_x0, in_x1
    cdef real *src
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                loc = oy * Wo + ox
                for k in range(KK):
                    py = oy * stride - pad + (k // kw) + offset[b, 2 * k, oy, ox]
                    px = ox * stride - pad + (k % kw) + offset[b, 2 * k + 1, oy, ox]
                    if py <= -1 or py >= H or px <= -1 or px >= W:
                        continue
                    src = &grad_cols[b, loc, k * C]
                    y0 = <Py_ssize_t>floor(py)
                    x0 = <Py_ssize_t>floor(px)
                    ly = py - y0
                    lx = px - x0
                    in_y0 = y0 >= 0
                    in_y1 = y0 + 1 < H
                    in_x0 = x0 >= 0
                    in_x1 = x0 + 1 < W
                    m00 = 1.0 if (in_y0 and in_x0) else 0.0
                    m01 = 1.0 if (in_y0 and in_x1) else 0.0
                    m10 = 1.0 if (in_y1 and in_x0) else 0.0
                    m11 = 1.0 if (in_y1 and in_x1) else 0.0
                    w00 = (1 - ly) * (1 - lx) * m00
                    w01 = (1 - ly) * lx * m01
                    w10 = ly * (1 - lx) * m10
                    w11 = ly * lx * m11
                    y1 = min(y0 + 1, H - 1)
                    x1 = min(x0 + 1, W - 1)
                    y0 = max(y0, 0)
                    x0 = max(x0, 0)
                    gy = 0
                    gx = 0
                    for c in range(C):
                        g = src[c]
                        v00 = m00 * x[b, y0, x0, c]
                        v01 = m01 * x[b, y0, x1, c]
                        v10 = m10 * x[b, y1, x0, c]
                        v11 = m11 * x[b, y1, x1, c]
                        grad_x[b, y0, x0, c] += <real>(g * w00)
                        grad_x[b, y0, x1, c] += <real>(g * w01)
                        grad_x[b, y1, x0, c] += <real>(g * w10)
                        grad_x[b, y1, x1, c] += <real>(g * w11)
                        gy += g * ((1 - lx) * (v10 - v00) + lx * (v11 - v01))
                        gx += g * ((1 - ly) * (v01 - v00) + ly * (v11 - v10))
                    grad_offset[b, 2 * k, oy, ox] += <real>gy
                    grad_offset[b, 2 * k + 1, oy, ox] += <real>gx
