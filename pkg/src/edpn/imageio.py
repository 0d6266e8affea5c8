"""Image and tensor files: binary PPM (P6, maxval 255) and the raw ``EDPNT`` container.

EDPNT layout: ``b"EDPNT"``, u8 ndim, ndim x u32 dims (little-endian), then
little-endian float32 payload.
"""

import os
import struct

import numpy as np
import torch

from edpn.checkpoint import atomic_write
from edpn.errors import FormatError

RAW_MAGIC = b"EDPNT"
IMAGE_SUFFIXES = (".ppm", ".edpnt")


def _ppm_tokens(data):
    """Yield (token, end_offset) for the 4 header fields; comments run to end of line."""
    pos = 0
    n = len(data)
    for _ in range(4):
        while pos < n:
            ch = data[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        yield data[start:pos], start
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError("PPM header must end with a single whitespace byte", pos)
    yield None, pos + 1


def decode_ppm(data: bytes) -> torch.Tensor:
    tokens = _ppm_tokens(data)
    magic, _ = next(tokens)
    if magic != b"P6":
        raise FormatError(f"unsupported PPM magic {magic!r}, expected P6", 0)
    values = []
    for name in ("width", "height", "maxval"):
        tok, off = next(tokens)
        if not tok.isdigit():
            raise FormatError(f"PPM {name} is not a decimal integer: {tok!r}", off)
        values.append(int(tok))
    _, start = next(tokens)
    w, h, maxval = values
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", start - 1)
    if w < 1 or h < 1:
        raise FormatError(f"empty PPM image {w}x{h}", start - 1)
    need = 3 * w * h
    if len(data) - start < need:
        raise FormatError(f"truncated PPM payload: need {need} bytes, have {len(data) - start}", len(data))
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3)
    return torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def encode_ppm(img) -> bytes:
    img = torch.as_tensor(img).detach().cpu()
    if img.dim() != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM needs a (3, H, W) image, got {tuple(img.shape)}")
    q = torch.round(img.double().clamp(0, 1) * 255).to(torch.uint8).permute(1, 2, 0).contiguous()
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + q.numpy().tobytes()


def decode_raw(data: bytes) -> torch.Tensor:
    if data[:5] != RAW_MAGIC:
        raise FormatError("bad magic, expected EDPNT", 0)
    if len(data) < 6:
        raise FormatError("truncated EDPNT header", len(data))
    ndim = data[5]
    end = 6 + 4 * ndim
    if len(data) < end:
        raise FormatError("truncated EDPNT dims", len(data))
    dims = struct.unpack(f"<{ndim}I", data[6:end])
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(data) - end < 4 * n:
        raise FormatError(f"truncated EDPNT payload: need {4 * n} bytes, have {len(data) - end}", len(data))
    if len(data) - end > 4 * n:
        raise FormatError("trailing bytes after EDPNT payload", end + 4 * n)
    arr = np.frombuffer(data, dtype="<f4", count=n, offset=end).reshape(dims)
    return torch.from_numpy(arr.astype(np.float32))


def encode_raw(t) -> bytes:
    t = torch.as_tensor(t).detach().cpu().float()
    head = RAW_MAGIC + struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape)
    return head + np.ascontiguousarray(t.numpy(), dtype="<f4").tobytes()


def read_image(path) -> torch.Tensor:
    """Read a ``.ppm`` or ``.edpnt`` file (format sniffed from the magic bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] == RAW_MAGIC:
        return decode_raw(data)
    if data[:2] == b"P6":
        return decode_ppm(data)
    raise FormatError(f"{os.fspath(path)}: unrecognised image format", 0)


def write_image(path, img):
    """Write by suffix: ``.edpnt`` is lossless, anything else is PPM."""
    path = os.fspath(path)
    data = encode_raw(img) if path.endswith(".edpnt") else encode_ppm(img)
    atomic_write(path, data)


def list_images(directory):
    return sorted(
        os.path.join(directory, f)
        for f in os.listdir(directory)
        if f.lower().endswith(IMAGE_SUFFIXES)
    )
