"""Sparse foreground/background pseudo-labels drawn from a saliency map.

Per frame the candidate pools are fixed: the Otsu split of the map, the
connected foreground region with the largest total activation, its top
``fg_fraction`` pixels as foreground pool, and the lowest ``bg_fraction``
pixels of the whole map as background pool.  Pixels tied with a pool's
cutoff value join that pool.  Every SGD step then draws a fresh handful of
pixels from each pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateMapError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class SamplerConfig:
    fg_fraction: float = 0.3
    bg_fraction: float = 0.3
    fg_samples: int = 30
    bg_samples: int = 30
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("fg_fraction", "bg_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("fg_samples", "bg_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class CandidateSets:
    fg_coords: np.ndarray  # (K, 2) int rows/cols
    fg_values: np.ndarray
    bg_coords: np.ndarray
    bg_values: np.ndarray
    threshold: float
    fg_region: np.ndarray  # bool mask of the densest component
    otsu_mask: np.ndarray

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "fg": [[int(r), int(c), float(v)] for (r, c), v in zip(self.fg_coords, self.fg_values)],
            "bg": [[int(r), int(c), float(v)] for (r, c), v in zip(self.bg_coords, self.bg_values)],
        }


@dataclass
class PseudoLabel:
    pixels: np.ndarray  # (M, 3) int: row, col, label (1 = FG, 0 = BG)
    source_frame: str = ""

    @property
    def fg(self) -> np.ndarray:
        return self.pixels[self.pixels[:, 2] == 1, :2]

    @property
    def bg(self) -> np.ndarray:
        return self.pixels[self.pixels[:, 2] == 0, :2]

    def to_json(self) -> dict:
        return {"frame_id": self.source_frame, "pixels": self.pixels.tolist()}


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def otsu_edges(values: np.ndarray, bins: int = 256) -> np.ndarray:
    """Interior bin edges of a ``bins``-bin histogram spanning [min, max]."""
    lo, hi = float(values.min()), float(values.max())
    return lo + (hi - lo) * np.arange(1, bins) / bins


def otsu_threshold(saliency, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance.

    Candidates are the interior bin edges over the map's value range; a
    pixel is foreground when its value is ``>=`` the returned threshold.
    Equal scores resolve to the lowest edge.
    """
    v = _values(saliency).ravel()
    if v.size == 0 or v.min() == v.max():
        raise DegenerateMapError("degenerate map: constant values have no Otsu split")
    edges = otsu_edges(v, bins)
    # bin k holds values in [edge_k, edge_{k+1}); "v >= edge_k" <=> bin >= k
    idx = np.searchsorted(edges, v, side="right")
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=bins)
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    n = counts.sum()
    n1 = n - n0
    s1 = sums.sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        score = n0 * n1 * (s0 / n0 - s1 / n1) ** 2 / n**2
    score = np.where((n0 > 0) & (n1 > 0), score, -np.inf)
    return float(edges[int(np.argmax(score))])


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components of a boolean grid as ``(K, 2)`` row/col arrays, in label order."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    splits = np.cumsum(np.bincount(lab, minlength=n + 1)[1:])[:-1]
    coords = np.stack([rows[order], cols[order]], axis=1)
    return np.split(coords, splits)


def _take_fraction(count: int, fraction: float) -> int:
    return max(1, min(count, math.ceil(fraction * count - 1e-9)))


def extract_candidates(saliency, cfg: SamplerConfig) -> CandidateSets:
    v = _values(saliency)
    thr = otsu_threshold(v)
    fg_mask = v >= thr
    comps = connected_components(fg_mask)
    masses = [v[c[:, 0], c[:, 1]].sum() for c in comps]
    dense = comps[int(np.argmax(masses))]
    dense_vals = v[dense[:, 0], dense[:, 1]]
    order = np.argsort(-dense_vals, kind="stable")
    # pixels tied with the cutoff value all join the pool, so flat regions are not cut in raster order
    cut = dense_vals[order[_take_fraction(len(dense), cfg.fg_fraction) - 1]]
    order = order[dense_vals[order] >= cut]
    fg = dense[order]
    fg_vals = dense_vals[order]
    region = np.zeros(v.shape, dtype=bool)
    region[dense[:, 0], dense[:, 1]] = True

    flat = v.ravel()
    k_bg = _take_fraction(flat.size, cfg.bg_fraction)
    low = np.argsort(flat, kind="stable")
    low = low[flat[low] <= flat[low[k_bg - 1]]]
    is_fg = np.zeros(flat.size, dtype=bool)
    is_fg[np.ravel_multi_index((fg[:, 0], fg[:, 1]), v.shape)] = True
    # keep the pools disjoint and ordered: no BG pixel above the weakest FG pixel
    low = low[~is_fg[low] & (flat[low] <= fg_vals.min())]
    bg = np.stack(np.unravel_index(low, v.shape), axis=1)
    return CandidateSets(fg, fg_vals, bg, flat[low], thr, region, fg_mask)


def sample_pseudo_pixels(cands: CandidateSets, cfg: SamplerConfig, rng: np.random.Generator,
                         source_frame: str = "") -> PseudoLabel:
    """Draw ``fg_samples`` / ``bg_samples`` pixels without replacement from each pool."""
    if len(cands.fg_coords) == 0 or len(cands.bg_coords) == 0:
        raise DegenerateMapError(f"empty candidate pool for frame {source_frame!r}")
    fi = rng.choice(len(cands.fg_coords), size=min(cfg.fg_samples, len(cands.fg_coords)), replace=False)
    bi = rng.choice(len(cands.bg_coords), size=min(cfg.bg_samples, len(cands.bg_coords)), replace=False)
    fg = np.column_stack([cands.fg_coords[fi], np.ones(len(fi), dtype=np.int64)])
    bg = np.column_stack([cands.bg_coords[bi], np.zeros(len(bi), dtype=np.int64)])
    return PseudoLabel(np.concatenate([fg, bg]).astype(np.int64), source_frame)
