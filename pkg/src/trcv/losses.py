"""Training objectives for the two heads.

All map losses take ``(2, H, W)`` or ``(B, 2, H, W)`` probability maps
(channel 0 background, channel 1 foreground) and are written with torch ops
so gradients flow back to the logits and the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_pal: float = 1.0
    lambda_asl: float = 0.01
    lambda_crf: float = 2e-9
    barrier_t_init: float = 5.0
    barrier_t_factor: float = 1.01
    barrier_t_max: float = 10.0

    def __post_init__(self):
        for name in ("lambda_pal", "lambda_asl", "lambda_crf"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if not self.barrier_t_init > 0 or self.barrier_t_factor < 1 or self.barrier_t_max < self.barrier_t_init:
            raise ValueError("barrier schedule needs t_init > 0, factor >= 1, max >= t_init")

    def barrier_t(self, epoch: int) -> float:
        """Barrier sharpness for a 0-based epoch: geometric growth, capped."""
        return min(self.barrier_t_init * self.barrier_t_factor**epoch, self.barrier_t_max)


def classification_loss(probs, y) -> torch.Tensor:
    """Mean ``-log p[y]``; probabilities are floored at 1e-12."""
    probs = torch.as_tensor(probs)
    y = torch.as_tensor(y, dtype=torch.long)
    if probs.dim() == 1:
        probs, y = probs[None], y.reshape(1)
    p = probs.gather(1, y[:, None]).squeeze(1)
    return -torch.log(p.clamp_min(PROB_FLOOR)).mean()


def _batched(maps) -> torch.Tensor:
    maps = torch.as_tensor(maps)
    return maps[None] if maps.dim() == 3 else maps


def pixel_alignment_loss(maps, pseudo_labels) -> torch.Tensor:
    """Partial cross-entropy at the sampled pixels only.

    ``pseudo_labels`` holds one ``(M, 3)`` row/col/label array per map (or a
    :class:`~trcv.pseudolabel.PseudoLabel`).  The per-map mean is averaged
    over the batch.
    """
    maps = _batched(maps)
    if not isinstance(pseudo_labels, (list, tuple)):
        pseudo_labels = [pseudo_labels]
    if len(pseudo_labels) != maps.shape[0]:
        raise ValueError("one pseudo-label per map required")
    h, w = maps.shape[-2:]
    terms = []
    for m, pl in zip(maps, pseudo_labels):
        px = torch.as_tensor(np.asarray(getattr(pl, "pixels", pl)), dtype=torch.long)
        if px.numel() == 0:
            raise ValueError("empty pseudo-label")
        r, c, lab = px[:, 0], px[:, 1], px[:, 2]
        if r.min() < 0 or c.min() < 0 or r.max() >= h or c.max() >= w:
            raise ValueError("pseudo-pixel outside the map")
        p = m[lab, r, c]
        terms.append(-torch.log(p.clamp_min(PROB_FLOOR)).mean())
    return torch.stack(terms).mean()


def log_barrier(z, t: float):
    """Extended log-barrier for the constraint ``z <= 0``.

    ``-(1/t) log(-z)`` up to ``z = -1/t**2``, continued linearly with
    matching value and slope beyond it.  Works on floats and tensors.
    """
    if t <= 0:
        raise ValueError("t must be > 0")
    joint = -1.0 / t**2
    linear_offset = -(1.0 / t) * math.log(1.0 / t**2) + 1.0 / t
    if isinstance(z, torch.Tensor):
        safe = torch.where(z <= joint, z, torch.full_like(z, joint))
        return torch.where(z <= joint, -torch.log(-safe) / t, t * z + linear_offset)
    z = float(z)
    if z <= joint:
        return -math.log(-z) / t
    return t * z + linear_offset


def absolute_size_loss(maps, t: float) -> torch.Tensor:
    """Barrier keeping both regions' mean size away from zero, batch-averaged."""
    maps = _batched(maps)
    sizes = maps.mean(dim=(-2, -1))  # (B, 2)
    return log_barrier(-sizes, t).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# CRF


@dataclass
class AffinityMatrix:
    """Gaussian affinities between every pixel and its neighbours within ``radius``.

    ``weights[k]`` is the ``(H, W)`` weight between pixel ``(i, j)`` and
    ``(i + dy_k, j + dx_k)`` for ``offsets[k] = (dy_k, dx_k)``; entries whose
    partner falls outside the frame are zero.  Offsets come in +/- pairs so
    the implied matrix is symmetric.
    """

    offsets: list[tuple[int, int]]
    weights: torch.Tensor  # (K, H, W) or (B, K, H, W)
    shape: tuple[int, int]

    def dense(self) -> np.ndarray:
        """Explicit ``(HW, HW)`` matrix; for tests on small frames."""
        h, w = self.shape
        wts = self.weights.detach().cpu().numpy()
        if wts.ndim == 4:
            wts = wts[0]
        mat = np.zeros((h * w, h * w))
        for k, (dy, dx) in enumerate(self.offsets):
            for i in range(h):
                for j in range(w):
                    ii, jj = i + dy, j + dx
                    if 0 <= ii < h and 0 <= jj < w:
                        mat[i * w + j, ii * w + jj] = wts[k, i, j]
        return mat


def _shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """``out[..., i, j] = x[..., i + dy, j + dx]`` with zero fill."""
    h, w = x.shape[-2:]
    out = torch.zeros_like(x)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = x[..., ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def build_affinity(image, radius: int = 3, sigma_s: float = 3.0, sigma_c: float = 15.0) -> AffinityMatrix:
    """Affinities from an ``H x W x 3`` frame (or a ``(B, 3, H, W)`` tensor of colours).

    Weight ``exp(-|dp|^2 / 2 sigma_s^2 - |dc|^2 / 2 sigma_c^2)`` for every
    pair at Chebyshev distance ``1..radius``; colour differences are taken in
    the units of the input.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    img = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    img = img.to(torch.float64) if img.dtype != torch.float32 else img
    if img.dim() == 3:
        rgb = img.permute(2, 0, 1)  # (3, H, W)
    else:
        rgb = img  # (B, 3, H, W)
    h, w = rgb.shape[-2:]
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
               if (dy, dx) != (0, 0)]
    valid = torch.ones(h, w, dtype=rgb.dtype)
    weights = []
    for dy, dx in offsets:
        diff = ((rgb - _shift(rgb, dy, dx)) ** 2).sum(dim=-3)
        spatial = (dy * dy + dx * dx) / (2.0 * sigma_s**2)
        wk = torch.exp(-spatial - diff / (2.0 * sigma_c**2)) * _shift(valid, dy, dx)
        weights.append(wk)
    return AffinityMatrix(offsets, torch.stack(weights, dim=-3), (h, w))


def crf_loss(maps, affinity: AffinityMatrix) -> torch.Tensor:
    """``sum_r S_r^T W (1 - S_r)`` divided by the pixel count, batch-averaged."""
    maps = _batched(maps)
    h, w = maps.shape[-2:]
    if (h, w) != tuple(affinity.shape):
        raise ValueError(f"map is {h}x{w}, affinity built for {affinity.shape}")
    wts = affinity.weights.to(maps.dtype)
    if wts.dim() == 3:
        wts = wts[None]
    total = maps.new_zeros(maps.shape[0])
    for k, (dy, dx) in enumerate(affinity.offsets):
        # sum_ij S[i] W[i, i+d] (1 - S[i+d]) for both channels
        total = total + (wts[:, k, None] * maps * (1.0 - _shift(maps, dy, dx))).sum(dim=(1, 2, 3))
    return (total / (h * w)).mean()


def crf_downsample(maps: torch.Tensor, images: torch.Tensor, max_side: int = 128, factor: int = 4):
    """Shrink maps and colour images by ``factor`` when frames exceed ``max_side``^2 pixels."""
    h, w = maps.shape[-2:]
    if h * w <= max_side * max_side:
        return maps, images
    maps = F.avg_pool2d(maps, factor)
    images = F.avg_pool2d(images, factor)
    return maps, images


def total_loss(cls, pal, asl, crf, w: LossWeights):
    return cls + w.lambda_pal * pal + w.lambda_asl * asl + w.lambda_crf * crf
