from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from oracles import brute_force_otsu
from trcv.errors import DegenerateMapError
from trcv.pseudolabel import (CandidateSets, SamplerConfig, connected_components, extract_candidates,
                              otsu_threshold, sample_pseudo_pixels)
from trcv.saliency import OracleProvider


# ---------------------------------------------------------------------------
# independent oracles


def bfs_components(mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                comp, queue = set(), deque([(i, j)])
                seen[i, j] = True
                while queue:
                    r, c = queue.popleft()
                    comp.add((r, c))
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            rr, cc = r + dr, c + dc
                            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                                seen[rr, cc] = True
                                queue.append((rr, cc))
                comps.append(frozenset(comp))
    return comps


def as_sets(comps):
    return {frozenset(map(tuple, c.tolist())) for c in comps}


# ---------------------------------------------------------------------------
# Otsu


def test_otsu_two_levels():
    v = np.array([0.1] * 50 + [0.9] * 50).reshape(10, 10)
    t = otsu_threshold(v)
    assert 0.1 < t <= 0.9
    assert t == brute_force_otsu(v)
    assert np.all((v >= t) == (v == 0.9))


def test_otsu_bimodal_mixture():
    rng = np.random.default_rng(0)
    low, high = rng.normal(0.2, 0.05, 2000), rng.normal(0.8, 0.05, 2000)
    v = np.concatenate([low, high]).clip(0, 1)
    t = otsu_threshold(v.reshape(40, 100))
    assert t == brute_force_otsu(v)
    # the score is flat across the empty gap; the lowest edge above the low mode wins
    assert low.max() < t <= high.min()
    assert t == pytest.approx(0.35673249858487754, abs=1e-15)


def test_otsu_constant_map():
    with pytest.raises(DegenerateMapError, match="degenerate"):
        otsu_threshold(np.full((4, 4), 0.3))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1, allow_nan=False, width=32)))
def test_otsu_matches_brute_force(values):
    if values.min() == values.max():
        return
    assert otsu_threshold(values) == brute_force_otsu(values)


# ---------------------------------------------------------------------------
# components


def test_two_squares():
    m = np.zeros((6, 6), dtype=bool)
    m[0:2, 0:2] = True
    m[4:6, 4:6] = True
    comps = connected_components(m)
    assert sorted(len(c) for c in comps) == [4, 4]


def test_diagonal_touch_is_connected():
    m = np.eye(4, dtype=bool)
    assert len(connected_components(m)) == 1


def test_full_and_empty_masks():
    assert [len(c) for c in connected_components(np.ones((4, 4), bool))] == [16]
    assert connected_components(np.zeros((4, 4), bool)) == []


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_components_match_bfs(mask):
    comps = connected_components(mask)
    assert as_sets(comps) == set(bfs_components(mask))
    total = sum(len(c) for c in comps)
    assert total == mask.sum()


# ---------------------------------------------------------------------------
# candidates


def test_oracle_candidates_respect_blob(small_synth):
    cfg = SamplerConfig(0.3, 0.3)
    prov = OracleProvider(noise=0.0)
    for f in small_synth.frames.values():
        c = extract_candidates(prov.get(f, f.class_label), cfg)
        assert f.gt_mask[c.fg_coords[:, 0], c.fg_coords[:, 1]].all()
        assert not f.gt_mask[c.bg_coords[:, 0], c.bg_coords[:, 1]].any()


def test_heavier_blob_wins():
    v = np.zeros((20, 20))
    v[2:6, 2:6] = 0.9  # mass 14.4
    v[10:18, 10:18] = 0.45  # mass 28.8: fainter but twice the total activation
    v[12, 12] = 0.5
    c = extract_candidates(v, SamplerConfig(1.0, 0.3))
    rows, cols = c.fg_coords[:, 0], c.fg_coords[:, 1]
    assert rows.min() >= 10 and cols.min() >= 10
    assert len(c.fg_coords) == 64


def test_full_fraction_is_whole_component(rng):
    v = rng.random((16, 16)) * 0.2
    v[4:9, 5:11] += 0.7
    c = extract_candidates(v, SamplerConfig(1.0, 0.3))
    region = set(map(tuple, np.argwhere(c.fg_region).tolist()))
    assert set(map(tuple, c.fg_coords.tolist())) == region


def test_fraction_counts(rng):
    v = rng.random((10, 10))
    c = extract_candidates(v, SamplerConfig(0.3, 0.25))
    assert len(c.fg_coords) == max(1, int(np.ceil(0.3 * c.fg_region.sum() - 1e-9)))
    assert len(c.bg_coords) <= 25


def test_candidates_degenerate():
    with pytest.raises(DegenerateMapError):
        extract_candidates(np.zeros((5, 5)), SamplerConfig())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1, allow_nan=False, width=32)),
       st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_candidate_invariants(values, nf, nb):
    if values.min() == values.max():
        return
    c = extract_candidates(values, SamplerConfig(nf, nb))
    fg = set(map(tuple, c.fg_coords.tolist()))
    bg = set(map(tuple, c.bg_coords.tolist()))
    assert not fg & bg
    assert np.all(c.fg_values >= c.threshold)
    if len(c.bg_values):
        assert c.bg_values.max() <= c.fg_values.min()
    assert all(c.fg_region[r, col] for r, col in fg)


def _selected(c):
    return (frozenset(map(tuple, c.fg_coords.tolist())), frozenset(map(tuple, c.bg_coords.tolist())))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.integers(0, 255).map(lambda k: k / 255.0)),
       st.floats(0.5, 20.0), st.floats(-3.0, 3.0))
def test_candidates_invariant_under_affine_rescale(values, scale, offset):
    if values.min() == values.max():
        return
    cfg = SamplerConfig(0.3, 0.3)
    moved = scale * values + offset
    renorm = (moved - moved.min()) / (moved.max() - moved.min())
    assert _selected(extract_candidates(values, cfg)) == _selected(extract_candidates(renorm, cfg))


def test_candidates_invariant_under_monotone_rescale_with_clear_split(rng):
    # nonlinear monotone maps move the Otsu edge, but not the selected sets when the split is clear
    v = rng.uniform(0.0, 0.2, size=(24, 24))
    v[5:15, 6:16] = rng.uniform(0.7, 1.0, size=(10, 10))
    cfg = SamplerConfig(0.3, 0.3)
    base = _selected(extract_candidates(v, cfg))
    for f in (np.sqrt, lambda x: x**3, lambda x: np.log1p(9 * x), np.tanh):
        m = f(v)
        m = (m - m.min()) / (m.max() - m.min())
        assert _selected(extract_candidates(m, cfg)) == base


# ---------------------------------------------------------------------------
# sampling


def _cands(n_fg, n_bg):
    fg = np.stack([np.zeros(n_fg, int), np.arange(n_fg)], axis=1)
    bg = np.stack([np.ones(n_bg, int), np.arange(n_bg)], axis=1)
    return CandidateSets(fg, np.ones(n_fg), bg, np.zeros(n_bg), 0.5, np.zeros((2, 2), bool), np.zeros((2, 2), bool))


def test_exhaustive_sample():
    c = _cands(10, 40)
    pl = sample_pseudo_pixels(c, SamplerConfig(fg_samples=10, bg_samples=5), np.random.default_rng(0))
    assert set(map(tuple, pl.fg.tolist())) == set(map(tuple, c.fg_coords.tolist()))
    assert len(pl.bg) == 5


def test_chi_square_uniformity():
    c = _cands(10, 10)
    cfg = SamplerConfig(fg_samples=1, bg_samples=1)
    rng = np.random.default_rng(2024)
    counts = np.zeros(10)
    for _ in range(1000):
        counts[sample_pseudo_pixels(c, cfg, rng).fg[0, 1]] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_same_seed_same_sample():
    c = _cands(50, 50)
    cfg = SamplerConfig()
    a = sample_pseudo_pixels(c, cfg, np.random.default_rng(9))
    b = sample_pseudo_pixels(c, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_resampling_is_fresh():
    c = _cands(500, 500)
    rng = np.random.default_rng(3)
    cfg = SamplerConfig()
    a = sample_pseudo_pixels(c, cfg, rng)
    b = sample_pseudo_pixels(c, cfg, rng)
    assert not np.array_equal(a.pixels, b.pixels)


def test_no_duplicates_and_labels():
    pl = sample_pseudo_pixels(_cands(40, 40), SamplerConfig(), np.random.default_rng(0))
    coords = [tuple(p) for p in pl.pixels[:, :2].tolist()]
    assert len(coords) == len(set(coords))
    assert (pl.pixels[:, 2] == 1).sum() == 30 and (pl.pixels[:, 2] == 0).sum() == 30


def test_empty_pool_raises():
    c = _cands(3, 3)
    c.bg_coords = c.bg_coords[:0]
    with pytest.raises(DegenerateMapError):
        sample_pseudo_pixels(c, SamplerConfig(), np.random.default_rng(0))


def test_containment_on_random_maps():
    rng = np.random.default_rng(77)
    cfg = SamplerConfig(0.3, 0.3, 15, 15)
    for _ in range(100):
        v = rng.random((16, 16))
        c = extract_candidates(v, cfg)
        pl = sample_pseudo_pixels(c, cfg, rng)
        assert set(map(tuple, pl.fg.tolist())) <= set(map(tuple, c.fg_coords.tolist()))
        assert set(map(tuple, pl.bg.tolist())) <= set(map(tuple, c.bg_coords.tolist()))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(fg_fraction=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(bg_samples=0)


def test_ties_at_the_cutoff_join_the_pool():
    # flat background: the BG pool must not be filled in raster order
    v = np.zeros((10, 10))
    v[6:9, 6:9] = 1.0
    c = extract_candidates(v, SamplerConfig(0.3, 0.3))
    assert len(c.bg_coords) == 91
    assert len(c.fg_coords) == 9
    assert c.bg_coords[:, 0].max() == 9
