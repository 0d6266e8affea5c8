"""Procedural natural-looking test images (smooth shading, soft-edged shapes, texture)."""

import numpy as np
import torch


def natural_image(height, width, seed=0, n_shapes=12, texture=0.04):
    """Return a ``(3, H, W)`` float32 image in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, d = rng.uniform(-0.3, 0.3, 3)
        img[c] = 0.5 + a * xx + b * yy + d * xx * yy
    for _ in range(n_shapes):
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.05, 0.3, 2)
            dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1
        else:
            hy, hx = rng.uniform(0.04, 0.25, 2)
            ang = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
            v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
            dist = np.maximum(np.abs(u) / hx, np.abs(v) / hy) - 1
        softness = rng.uniform(0.01, 0.08)
        alpha = 1 / (1 + np.exp(np.clip(dist / softness, -50, 50)))
        img = img * (1 - alpha) + color[:, None, None] * alpha
    for _ in range(3):
        fy, fx = rng.uniform(4, 24, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img += texture * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[None] * rng.uniform(0.3, 1)
    return torch.from_numpy(np.clip(img, 0, 1)).float()
