"""Checkpoint container.

Layout (all integers little-endian)::

    b"EDPN1\\n"
    u32 header length, UTF-8 JSON header (sorted keys): model config,
        iteration counter, optimizer step (or null), free-form metadata
    u32 record count
    per record, sorted by path:
        u16 path length, UTF-8 path
        u8 dtype code (0 float32, 1 float64), u8 ndim, ndim x u32 dims
        payload, little-endian

Optimizer moments are stored as records under ``optim.m/<path>`` and
``optim.v/<path>``.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from edpn.errors import FormatError
from edpn.model import ModelConfig, build_model, parameter_set

MAGIC = b"EDPN1\n"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {torch.float32: 0, torch.float64: 1}


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: dict
    iteration: int = 0
    optim: Optional[OptimizerState] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, iteration=0, optim=None, meta=None):
        params = {k: v.detach().clone() for k, v in parameter_set(model).items()}
        return cls(model.cfg, params, iteration, optim, dict(meta or {}))

    def build(self, dtype=torch.float32):
        """Instantiate the model and load the stored parameters."""
        model = build_model(self.model_cfg)
        missing = set(parameter_set(model)) ^ set(self.params)
        if missing:
            raise FormatError(f"checkpoint parameters do not match the model config: {sorted(missing)[:5]}")
        model.load_state_dict(self.params)
        return model.to(dtype).eval()


def _records(ckpt):
    recs = dict(ckpt.params)
    if ckpt.optim is not None:
        recs.update({f"optim.m/{k}": t for k, t in ckpt.optim.m.items()})
        recs.update({f"optim.v/{k}": t for k, t in ckpt.optim.v.items()})
    return sorted(recs.items())


def dumps(ckpt: Checkpoint) -> bytes:
    header = {
        "model": ckpt.model_cfg.to_dict(),
        "iteration": ckpt.iteration,
        "optimizer_step": None if ckpt.optim is None else ckpt.optim.step,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    recs = _records(ckpt)
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes, struct.pack("<I", len(recs))]
    for path, t in recs:
        t = t.detach().cpu()
        if t.dtype not in _CODES:
            t = t.float()
        code = _CODES[t.dtype]
        pb = path.encode()
        parts.append(struct.pack("<H", len(pb)) + pb)
        parts.append(struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(np.ascontiguousarray(t.numpy(), dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, expected EDPN1", 0)
    (hlen,) = r.unpack("<I", "header length")
    hpos = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode())
        cfg = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid header: {exc}", hpos) from exc
    (count,) = r.unpack("<I", "record count")
    params, m, v = {}, {}, {}
    for _ in range(count):
        start = r.pos
        (plen,) = r.unpack("<H", "path length")
        path = r.take(plen, "path").decode()
        code, ndim = r.unpack("<BB", "record header")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {path}", start)
        shape = r.unpack(f"<{ndim}I", "dims")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(r.take(n * dt.itemsize, f"payload of {path}"), dtype=dt).reshape(shape)
        t = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        if path.startswith("optim.m/"):
            m[path[len("optim.m/"):]] = t
        elif path.startswith("optim.v/"):
            v[path[len("optim.v/"):]] = t
        else:
            params[path] = t
    if r.pos != len(data):
        raise FormatError("trailing bytes after last record", r.pos)
    step = header.get("optimizer_step")
    optim = None if step is None else OptimizerState(m, v, step)
    return Checkpoint(cfg, params, header.get("iteration", 0), optim, header.get("meta", {}))


def atomic_write(path, data: bytes):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path):
    atomic_write(path, dumps(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
