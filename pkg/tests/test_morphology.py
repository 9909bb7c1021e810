import heapq
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from conftest import disc_mask
from poregan.dataprep import synthesize_corpus
from poregan.morphology import (NonPercolatingError, UndefinedMetricError, analyze,
                                average_pore_radius, axis_tortuosity, distance_transform,
                                interface_length, partition_pores, specific_surface_area,
                                tortuosity, weighted_throat_radius)


# ---------------------------------------------------------------------------
# independent oracles

def brute_edt(mask):
    """Distance to the nearest solid pixel, the outside of the image counting as solid."""
    h, w = mask.shape
    pad = np.zeros((h + 2, w + 2), bool)
    pad[1:-1, 1:-1] = mask
    sy, sx = np.nonzero(~pad)
    out = np.zeros(mask.shape)
    for y, x in zip(*np.nonzero(mask)):
        out[y, x] = np.sqrt(((sy - (y + 1)) ** 2 + (sx - (x + 1)) ** 2).min())
    return out


def dijkstra_from_row(mask, row):
    """8-connected shortest paths through pore pixels, steps of 1 and sqrt(2)."""
    h, w = mask.shape
    dist = np.full(mask.shape, np.inf)
    heap = []
    for x in range(w):
        if mask[row, x]:
            dist[row, x] = 0.0
            heap.append((0.0, row, x))
    heapq.heapify(heap)
    while heap:
        d, y, x = heapq.heappop(heap)
        if d > dist[y, x]:
            continue
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == dx == 0:
                    continue
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx]:
                    nd = d + (math.sqrt(2) if dy and dx else 1.0)
                    if nd < dist[ny, nx]:
                        dist[ny, nx] = nd
                        heapq.heappush(heap, (nd, ny, nx))
    return dist


def oracle_axis0_tortuosity(mask):
    span = mask.shape[0] - 1
    down = dijkstra_from_row(mask, 0)[-1]
    up = dijkstra_from_row(mask, mask.shape[0] - 1)[0]
    return 0.5 * (down[np.isfinite(down)].mean() + up[np.isfinite(up)].mean()) / span


# ---------------------------------------------------------------------------
# distance transform

def test_edt_single_pixel_and_extremes():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    assert distance_transform(m)[3, 3] == 1.0
    assert not distance_transform(np.zeros((5, 5), bool)).any()
    assert distance_transform(np.ones((21, 21), bool))[10, 10] == 11.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.2, 0.9))
def test_edt_matches_brute_force(seed, p):
    m = np.random.default_rng(seed).random((14, 17)) < p
    d = distance_transform(m)
    assert np.allclose(d, brute_edt(m), atol=1e-12)
    assert (d[~m] == 0).all() and (d[m] > 0).all()


# ---------------------------------------------------------------------------
# radii

def test_disc_radius():
    m = disc_mask((160, 160), (80, 80), 50)
    assert abs(average_pore_radius(m) - 50) <= 1


def test_channel_radius():
    m = np.zeros((100, 100), bool)
    m[:, 40:60] = True
    assert abs(average_pore_radius(m) - 10) <= 0.5


def test_two_disc_radius_is_unweighted_mean():
    m = disc_mask((100, 200), (50, 40), 10) | disc_mask((100, 200), (50, 130), 30)
    part = partition_pores(m)
    assert part.n_bodies == 2
    assert abs(average_pore_radius(m, partition=part) - 20) <= 1


def test_zero_porosity_is_undefined():
    with pytest.raises(UndefinedMetricError):
        average_pore_radius(np.zeros((10, 10), bool))
    with pytest.raises(UndefinedMetricError):
        weighted_throat_radius(np.zeros((10, 10), bool))


def test_partition_covers_pore_phase(rng):
    m = rng.random((60, 60)) < 0.6
    part = partition_pores(m)
    assert ((part.labels > 0) == m).all()


# ---------------------------------------------------------------------------
# specific surface area

def test_ssa_disc_within_three_percent():
    m = disc_mask((480, 480), (240, 240), 50)
    expected = 2 * math.pi * 50 / 480 ** 2
    assert abs(specific_surface_area(m) / expected - 1) <= 0.03


def test_ssa_single_phase_is_zero():
    assert specific_surface_area(np.zeros((30, 30), bool)) == 0
    assert specific_surface_area(np.ones((30, 30), bool)) == 0


def test_ssa_pixel_size_scaling():
    m = disc_mask((100, 100), (50, 50), 20)
    assert specific_surface_area(m, 0.5) == pytest.approx(2 * specific_surface_area(m, 1.0),
                                                          rel=1e-15)


def test_interface_straight_edge_is_exact():
    m = np.zeros((40, 40), bool)
    m[:, :20] = True
    # a vertical edge of length 40: n_h = 40, n_d = n_a = 39
    assert interface_length(m) == pytest.approx(math.pi / 8 * (40 + 78 / math.sqrt(2)))


# ---------------------------------------------------------------------------
# tortuosity

def test_straight_channel_tortuosity():
    m = np.zeros((100, 100), bool)
    m[:, 45:55] = True
    assert abs(tortuosity(m) - 1.0) <= 0.01


def test_l_channel_matches_dijkstra():
    m = np.zeros((100, 100), bool)
    m[0:60, 10:20] = True
    m[50:60, 10:80] = True
    m[50:100, 70:80] = True
    t = axis_tortuosity(m, 0)
    ref = oracle_axis0_tortuosity(m)
    assert abs(t / ref - 1) <= 0.02
    assert t > 1.3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_tortuosity_matches_dijkstra_on_random_masks(seed):
    m = np.random.default_rng(seed).random((25, 25)) < 0.65
    try:
        t = axis_tortuosity(m, 0)
    except NonPercolatingError:
        return
    assert abs(t / oracle_axis0_tortuosity(m) - 1) <= 1e-9
    assert t >= 1.0


def test_non_percolating():
    with pytest.raises(NonPercolatingError):
        tortuosity(np.zeros((20, 20), bool))
    m = disc_mask((50, 50), (25, 25), 10)
    with pytest.raises(NonPercolatingError):
        tortuosity(m)
    s = analyze(m)
    assert math.isnan(s.tortuosity) and not s.percolating


def test_open_mask_tortuosity_is_one():
    assert tortuosity(np.ones((30, 30), bool)) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# throats

def two_discs_with_slit(half_width, r=30, gap=40):
    h, w = 100, 4 * r + gap + 40
    cy, c1 = 50, 20 + r
    c2 = c1 + 2 * r + gap
    m = disc_mask((h, w), (cy, c1), r) | disc_mask((h, w), (cy, c2), r)
    m[cy - half_width + 1:cy + half_width, c1:c2] = True
    return m


@pytest.mark.parametrize("hw", [5, 10])
def test_slit_throat(hw):
    m = two_discs_with_slit(hw)
    assert abs(weighted_throat_radius(m) - hw) <= 1


def test_throat_monotone_in_constriction():
    assert weighted_throat_radius(two_discs_with_slit(10)) > weighted_throat_radius(
        two_discs_with_slit(5))


def test_isolated_disc_throat_fallback():
    m = disc_mask((100, 100), (50, 50), 25)
    assert weighted_throat_radius(m) == average_pore_radius(m)


# ---------------------------------------------------------------------------
# invariances and scaling

def _all_metrics(m, px=1.0):
    s = analyze(m, px)
    return np.array([s.porosity, s.avg_pore_radius, s.specific_surface_area, s.tortuosity,
                     s.weighted_throat_radius])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_flip_rotation_invariance(seed):
    corpus = synthesize_corpus(1, 1, (0.3, 0.3), shape=(128, 128), seed=seed)
    m = corpus.masks[0]
    base = _all_metrics(m)
    for t in (np.fliplr(m), np.flipud(m), np.rot90(m), np.rot90(m, 2), np.rot90(m, 3)):
        other = _all_metrics(np.ascontiguousarray(t))
        assert other[0] == base[0]
        assert np.allclose(other, base, rtol=0.01, equal_nan=True)


def test_pixel_size_scaling():
    m = synthesize_corpus(1, 1, (0.3, 0.3), shape=(96, 96), seed=5).masks[0]
    a, b = _all_metrics(m, 1.0), _all_metrics(m, 2.0)
    assert b[0] == a[0] and b[3] == a[3] or (math.isnan(a[3]) and math.isnan(b[3]))
    assert b[1] == pytest.approx(2 * a[1]) and b[4] == pytest.approx(2 * a[4])
    assert b[2] == pytest.approx(a[2] / 2)


def test_corpus_level_trends():
    corpus = synthesize_corpus(1, 24, (0.15, 0.45), shape=(128, 128), seed=3)
    stats = [analyze(m) for m in corpus.masks]
    phi = [s.porosity for s in stats]
    radius = [s.avg_pore_radius for s in stats]
    perc = [(s.porosity, s.tortuosity) for s in stats if s.percolating]
    assert sps.spearmanr(phi, radius).statistic > 0
    assert len(perc) >= 10
    assert sps.spearmanr(*zip(*perc)).statistic < 0
