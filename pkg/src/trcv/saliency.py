"""Per-frame saliency maps and the providers that serve them.

Maps come either from ``.smap`` files produced by an external
vision-language pipeline, or from :class:`OracleProvider`, which derives
them from the synthetic generator's blob masks.

File layout (little-endian)::

    b"SMAP" | u32 width | u32 height | width*height float32, row-major

stored as ``<frame_id>__<class_label>.smap`` under the provider root.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import SaliencyError
from .ingestion import Frame

MAGIC = b"SMAP"


@dataclass
class SaliencyMap:
    values: np.ndarray
    frame_id: str
    class_label: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise SaliencyError(f"saliency for {self.frame_id!r} must be a non-empty 2-D grid")
        if not np.all(np.isfinite(v)):
            raise SaliencyError(f"saliency for {self.frame_id!r} has non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise SaliencyError(f"saliency for {self.frame_id!r} leaves [0, 1]")
        self.values = v

    @property
    def shape(self):
        return self.values.shape


class SaliencyProvider(Protocol):
    def get(self, frame: Frame, class_label: int) -> SaliencyMap: ...


def smap_name(frame_id: str, class_label: int) -> str:
    return f"{frame_id}__{int(class_label)}.smap"


def write_saliency(path, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("saliency must be 2-D")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", w, h) + arr.tobytes())


def read_saliency(path) -> np.ndarray:
    """Return the raw stored grid as float32 (no normalization)."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise SaliencyError(f"{path}: not a SMAP file")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * w * h:
        raise SaliencyError(f"{path}: payload size does not match {w}x{h}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def normalize_unit(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1] when the range leaves [0, 1]; constant grids become all-zero."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if lo >= 0.0 and hi <= 1.0:
        if lo == hi:
            return np.zeros_like(v)
        return v
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


class FileProvider:
    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, frame_id: str, class_label: int) -> Path:
        return self.root / smap_name(frame_id, class_label)

    def has(self, frame: Frame, class_label: int) -> bool:
        return self.path_for(frame.frame_id, class_label).is_file()

    def get(self, frame: Frame, class_label: int) -> SaliencyMap:
        p = self.path_for(frame.frame_id, class_label)
        if not p.is_file():
            raise SaliencyError(f"no saliency file for frame {frame.frame_id!r} class {class_label} ({p})")
        raw = read_saliency(p)
        if not np.all(np.isfinite(raw)):
            raise SaliencyError(f"saliency for frame {frame.frame_id!r} has non-finite values")
        if raw.shape != frame.size:
            raise SaliencyError(
                f"saliency for frame {frame.frame_id!r} is {raw.shape}, frame is {frame.size}")
        return SaliencyMap(normalize_unit(raw), frame.frame_id, class_label)


class OracleProvider:
    """Blurred, noise-corrupted ground-truth masks of synthetic frames.

    Noise spans ``[-noise, noise]`` and is seeded per frame from
    ``(seed, frame_id)`` so repeated calls agree bit for bit.  With
    ``noise_corr == 0`` it is iid uniform per pixel; otherwise a white field
    is Gaussian-filtered with that sigma (in pixels) and rescaled so its peak
    magnitude equals ``noise``, giving blob-shaped false activations.  The oracle
    ignores ``class_label``: a request for any class other than the frame's
    own gets the blob anyway, flagged with ``meta["class_mismatch"]``.
    """

    def __init__(self, noise: float = 0.0, blur_sigma: float = 1.0, seed: int = 0, noise_corr: float = 0.0):
        if noise < 0:
            raise ValueError("noise amplitude must be >= 0")
        if noise_corr < 0:
            raise ValueError("noise_corr must be >= 0")
        self.noise = float(noise)
        self.noise_corr = float(noise_corr)
        self.blur_sigma = float(blur_sigma)
        self.seed = int(seed)

    def get(self, frame: Frame, class_label: int) -> SaliencyMap:
        if frame.gt_mask is None:
            raise SaliencyError(f"frame {frame.frame_id!r} has no generator ground truth")
        m = ndimage.gaussian_filter(frame.gt_mask.astype(np.float64), self.blur_sigma, mode="constant")
        if m.max() > 0:
            m = m / m.max()
        if self.noise > 0:
            rng = np.random.default_rng([self.seed, zlib.crc32(frame.frame_id.encode())])
            if self.noise_corr > 0:
                field = ndimage.gaussian_filter(rng.standard_normal(m.shape), self.noise_corr, mode="wrap")
                m = m + self.noise * field / np.abs(field).max()
            else:
                m = m + rng.uniform(-self.noise, self.noise, size=m.shape)
        m = np.clip(m, 0.0, 1.0)
        meta = {"class_mismatch": int(class_label) != frame.class_label}
        return SaliencyMap(m, frame.frame_id, int(class_label), meta)

    def materialize(self, frames, root) -> int:
        """Write ``.smap`` files for every frame (own class only); returns the count."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        n = 0
        for f in frames:
            s = self.get(f, f.class_label)
            write_saliency(root / smap_name(f.frame_id, f.class_label), s.values)
            n += 1
        return n
