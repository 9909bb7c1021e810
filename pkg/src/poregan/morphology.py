"""Pore-network descriptors computed from binary pore masks.

Conventions: pore pixels are 1, the image border counts as solid for the
distance transform, the pore phase is 8-connected. Lengths are returned in
micrometers given ``pixel_size`` (micrometers per pixel).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage as ndi
from skimage import morphology, segmentation
from skimage.graph import MCP_Geometric

from .core import DEFAULT_PIXEL_SIZE, ValidationError, as_mask, porosity_of_mask

H_MAXIMA = 2.0
EIGHT = np.ones((3, 3), dtype=bool)


class UndefinedMetricError(ValueError):
    """Metric needs pore space but the mask has none."""


class NonPercolatingError(ValueError):
    """No pore path connects opposite faces of the image."""


def distance_transform(mask) -> np.ndarray:
    """Euclidean distance from each pore pixel to the nearest solid pixel.

    Pixels just outside the image are treated as solid, so the value is
    bounded by the distance to the border.
    """
    m = as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    return ndi.distance_transform_edt(padded)[1:-1, 1:-1]


@dataclass
class PorePartition:
    labels: np.ndarray          # 0 on solid, 1..n on pore bodies
    distance: np.ndarray
    n_bodies: int

    def body_radii(self) -> np.ndarray:
        """Maximum inscribed radius (pixels) of each pore body."""
        if self.n_bodies == 0:
            return np.empty(0)
        return ndi.maximum(self.distance, self.labels, index=np.arange(1, self.n_bodies + 1))

    def throats(self):
        """Adjacent body pairs with (inscribed radius, ridge length) in pixels.

        The ridge between two bodies is the set of pixels of either body that
        touch the other one; its radius is the largest distance value on the
        ridge, i.e. the saddle a path between the bodies must pass. Ridge
        length is half the number of ridge pixels, so both sides count alike.
        """
        lab = self.labels
        h, w = lab.shape
        pad = np.pad(lab, 1)
        center = lab
        keys, pix, vals = [], [], []
        flat = np.arange(h * w).reshape(h, w)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                nb = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                sel = (center > 0) & (nb > 0) & (center != nb)
                if not sel.any():
                    continue
                a, b = center[sel].astype(np.int64), nb[sel].astype(np.int64)
                lo, hi = np.minimum(a, b), np.maximum(a, b)
                keys.append(lo * (self.n_bodies + 1) + hi)
                pix.append(flat[sel])
                vals.append(self.distance[sel])
        if not keys:
            return {}
        keys, pix = np.concatenate(keys), np.concatenate(pix)
        vals = np.concatenate(vals)
        uk, inv = np.unique(keys, return_inverse=True)
        radius = np.zeros(uk.size)
        np.maximum.at(radius, inv, vals)
        ridge = np.unique(np.stack([inv, pix]), axis=1)
        length = np.bincount(ridge[0], minlength=uk.size) / 2.0
        return {(int(k // (self.n_bodies + 1)), int(k % (self.n_bodies + 1))): (float(r), float(n))
                for k, r, n in zip(uk, radius, length)}


def partition_pores(mask, h: float = H_MAXIMA) -> PorePartition:
    """Watershed pore bodies seeded at h-maxima of the distance field."""
    m = as_mask(mask)
    dist = distance_transform(m)
    if not m.any():
        return PorePartition(np.zeros(m.shape, dtype=np.int32), dist, 0)
    peaks = morphology.h_maxima(dist, h, footprint=EIGHT)
    markers, _ = ndi.label(peaks & m, structure=EIGHT)
    # pore components whose relief is below h still need one seed
    comps, n_comp = ndi.label(m, structure=EIGHT)
    seeded = np.zeros(n_comp + 1, dtype=bool)
    seeded[np.unique(comps[markers > 0])] = True
    nxt = markers.max() + 1
    for c in range(1, n_comp + 1):
        if not seeded[c]:
            idx = np.argmax(np.where(comps == c, dist, -1.0))
            markers.flat[idx] = nxt
            nxt += 1
    labels = segmentation.watershed(-dist, markers, mask=m, connectivity=2)
    labels, _, _ = segmentation.relabel_sequential(labels)
    return PorePartition(labels.astype(np.int32), dist, int(labels.max()))


def _require_pores(m):
    if not m.any():
        raise UndefinedMetricError("metric undefined for a mask without pore pixels")


def average_pore_radius(mask, pixel_size: float = DEFAULT_PIXEL_SIZE,
                        partition: Optional[PorePartition] = None) -> float:
    """Unweighted mean over pore bodies of the maximum inscribed radius."""
    m = as_mask(mask)
    _require_pores(m)
    part = partition or partition_pores(m)
    return float(part.body_radii().mean()) * pixel_size


def interface_length(mask) -> float:
    """Pore/solid interface length in pixels (Cauchy-Crofton estimate).

    Phase changes between neighbouring pixels are counted along rows,
    columns and both diagonals and combined with the four-direction Crofton
    weights. The image border is not an interface.
    """
    m = as_mask(mask).astype(np.int8)
    n_h = np.count_nonzero(m[:, 1:] != m[:, :-1])
    n_v = np.count_nonzero(m[1:, :] != m[:-1, :])
    n_d = np.count_nonzero(m[1:, 1:] != m[:-1, :-1])
    n_a = np.count_nonzero(m[1:, :-1] != m[:-1, 1:])
    return math.pi / 8.0 * (n_h + n_v + (n_d + n_a) / math.sqrt(2.0))


def specific_surface_area(mask, pixel_size: float = DEFAULT_PIXEL_SIZE) -> float:
    """Interface length per unit image area, in 1/micrometer."""
    m = as_mask(mask)
    return interface_length(m) / (m.size * pixel_size)


def _face_distances(open_: np.ndarray, axis: int):
    """Geodesic distance of every pore pixel from the first and last face along ``axis``."""
    cost = np.where(open_, 1.0, np.inf)
    if axis == 1:
        cost = cost.T
    n = cost.shape[0]
    out = []
    for row in (0, n - 1):
        starts = [(row, j) for j in np.flatnonzero(np.isfinite(cost[row]))]
        if not starts:
            out.append(None)
            continue
        mcp = MCP_Geometric(cost, fully_connected=True)
        dist, _ = mcp.find_costs(starts)
        out.append(dist)
    return out


def axis_tortuosity(mask, axis: int) -> float:
    """Mean geodesic/straight ratio over inlet pixels connected to the opposite face.

    Both flow directions along the axis are averaged so the value does not
    depend on which face is called the inlet.
    """
    m = as_mask(mask)
    span = m.shape[axis] - 1
    if span < 1:
        raise NonPercolatingError("image too thin to measure tortuosity")
    from_first, from_last = _face_distances(m, axis)
    if from_first is None or from_last is None:
        raise NonPercolatingError(f"no pore pixels on a face along axis {axis}")
    ratios = []
    # inlet on last face, distances measured from first face, and vice versa
    for dist, row in ((from_first, -1), (from_last, 0)):
        d = dist[row]
        d = d[np.isfinite(d)]
        if d.size:
            ratios.append(d.mean() / span)
    if len(ratios) < 2:
        raise NonPercolatingError(f"pore phase does not percolate along axis {axis}")
    return float(np.mean(ratios))


def tortuosity(mask) -> float:
    """Geodesic tortuosity averaged over the percolating axes."""
    m = as_mask(mask)
    vals = []
    for axis in (0, 1):
        try:
            vals.append(axis_tortuosity(m, axis))
        except NonPercolatingError:
            continue
    if not vals:
        raise NonPercolatingError("pore phase does not percolate along either axis")
    return float(np.mean(vals))


def weighted_throat_radius(mask, pixel_size: float = DEFAULT_PIXEL_SIZE,
                           partition: Optional[PorePartition] = None) -> float:
    """Ridge-length-weighted mean throat radius between adjacent pore bodies.

    Falls back to :func:`average_pore_radius` when no two bodies touch.
    """
    m = as_mask(mask)
    _require_pores(m)
    part = partition or partition_pores(m)
    throats = part.throats()
    if not throats:
        return average_pore_radius(m, pixel_size, part)
    r = np.array([t[0] for t in throats.values()])
    w = np.array([t[1] for t in throats.values()], dtype=float)
    return float((r * w).sum() / w.sum()) * pixel_size


@dataclass
class PoreNetworkStats:
    porosity: float
    avg_pore_radius: float
    specific_surface_area: float
    tortuosity: float            # nan when the pore phase does not percolate
    weighted_throat_radius: float
    percolating: bool = True
    n_bodies: int = 0

    def to_dict(self):
        return asdict(self)


def analyze(mask, pixel_size: float = DEFAULT_PIXEL_SIZE) -> PoreNetworkStats:
    """All descriptors for one mask; radii are nan when there is no pore space."""
    m = as_mask(mask)
    phi = porosity_of_mask(m)
    ssa = specific_surface_area(m, pixel_size)
    try:
        tau, perc = tortuosity(m), True
    except NonPercolatingError:
        tau, perc = math.nan, False
    if not m.any():
        return PoreNetworkStats(phi, math.nan, ssa, tau, math.nan, perc, 0)
    part = partition_pores(m)
    return PoreNetworkStats(phi, average_pore_radius(m, pixel_size, part), ssa, tau,
                            weighted_throat_radius(m, pixel_size, part), perc, part.n_bodies)
