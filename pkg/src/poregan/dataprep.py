"""Training-data preparation.

Covers representative-elementary-volume (REV) analysis, patch extraction,
per-depth porosity classing, class balancing by augmentation and manifest
assembly, plus a procedural texture generator that stands in for real
thin-section images at desk scale.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi

from .core import (EXCLUDED, DepthLabel, PatchRecord, ValidationError, as_mask, as_rgb,
                   porosity_of_mask, read_rgb, write_rgb)
from .segmentation import mask_fn

log = logging.getLogger(__name__)

TARGET_PER_CLASS = 160
MIN_CLASS_SIZE = 20
SIGMA_THRESHOLD = 0.06
N_CLASSES = 10
DEFAULT_STRIDE = 96
DRIFT_TOLERANCE = 0.01
NOISE_AMPLITUDE = 2


class AugmentationRejected(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class TextureParams:
    """Procedural texture settings; list entries are indexed by depth style.

    Pore space is a band around the zero level set of a smoothed Gaussian
    field, which gives a connected channel network at realistic porosities
    (a plain thresholded field does not percolate in 2D below one half).
    ``channel_weight`` < 1 blends in isolated blob-shaped pores.
    """

    correlation_lengths: Sequence[float] = (3.5, 8.0, 5.0, 11.0)
    matrix_colors: Sequence[Tuple[int, int, int]] = (
        (214, 196, 160), (150, 150, 158), (226, 222, 210), (182, 150, 118))
    pore_color: Tuple[int, int, int] = (52, 86, 206)
    color_noise: float = 8.0
    grain_shading: float = 14.0
    channel_weight: float = 1.0
    heterogeneity: float = 0.15     # weight of the large-scale porosity trend
    trend_length: float = 48.0      # correlation length of the trend, px

    def style(self, depth: int):
        k = depth % len(self.correlation_lengths)
        return self.correlation_lengths[k], self.matrix_colors[depth % len(self.matrix_colors)]


@dataclass
class SyntheticCorpus:
    images: List[np.ndarray]
    masks: List[np.ndarray]
    depths: List[int]
    target_porosities: List[float]

    @property
    def porosities(self) -> List[float]:
        return [porosity_of_mask(m) for m in self.masks]

    def by_depth(self, depth: int):
        return [i for i, d in enumerate(self.depths) if d == depth]


def _gaussian_field(shape, sigma, rng):
    f = ndi.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def threshold_for_porosity(field: np.ndarray, porosity: float, tol: float = 0.005,
                           max_iter: int = 80) -> float:
    """Bisect a threshold so that ``mean(field > t)`` is within ``tol`` of ``porosity``."""
    if not 0.0 < porosity < 1.0:
        raise ValidationError(f"requested porosity {porosity} must lie in (0, 1)")
    lo, hi = float(field.min()) - 1e-9, float(field.max())
    n = field.size
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        frac = np.count_nonzero(field > mid) / n
        if abs(frac - porosity) <= tol * 0.5:
            return mid
        if frac > porosity:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    if abs(np.count_nonzero(field > mid) / n - porosity) > tol:
        raise ValidationError(f"porosity {porosity} is unattainable for this field")
    return mid


def synthesize_image(shape, porosity: float, depth: int, params: TextureParams,
                     rng: np.random.Generator):
    """One RGB texture and its exact pore mask at the requested porosity."""
    corr, matrix = params.style(depth)
    w = params.channel_weight
    field = -2.0 * w * np.abs(_gaussian_field(shape, corr, rng))
    if w < 1.0:
        field = field + (1.0 - w) * _gaussian_field(shape, corr, rng)
    if params.heterogeneity > 0:
        field = field + params.heterogeneity * _gaussian_field(shape, params.trend_length, rng)
    t = threshold_for_porosity(field, porosity)
    mask = field > t
    shade = _gaussian_field(shape, max(corr * 1.5, 1.0), rng) * params.grain_shading
    img = np.empty(shape + (3,), dtype=np.float64)
    for c in range(3):
        base = np.where(mask, params.pore_color[c], matrix[c] + shade)
        img[..., c] = base + rng.normal(0.0, params.color_noise, shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def synthesize_corpus(n_depths: int, per_depth_count: int, porosity_range=(0.1, 0.35),
                      texture_params: Optional[TextureParams] = None,
                      shape=(172, 256), seed: int = 0) -> SyntheticCorpus:
    """Procedural stand-in for a thin-section collection.

    Each image is a thresholded smoothed random field; its mask is known
    exactly. ``porosity_range`` is either one ``(lo, hi)`` pair for every
    depth or a sequence of pairs, one per depth. Target porosities are
    spread evenly over the range.
    """
    params = texture_params or TextureParams()
    ranges = _per_depth_ranges(porosity_range, n_depths)
    rng = np.random.default_rng(seed)
    out = SyntheticCorpus([], [], [], [])
    for d in range(n_depths):
        lo, hi = ranges[d]
        targets = np.linspace(lo, hi, per_depth_count) if per_depth_count > 1 else [0.5 * (lo + hi)]
        for phi in targets:
            img, mask = synthesize_image(tuple(shape), float(phi), d, params, rng)
            out.images.append(img)
            out.masks.append(mask)
            out.depths.append(d)
            out.target_porosities.append(float(phi))
    return out


def _per_depth_ranges(porosity_range, n_depths):
    arr = np.asarray(porosity_range, dtype=float)
    if arr.ndim == 1:
        arr = np.tile(arr, (n_depths, 1))
    if arr.shape != (n_depths, 2):
        raise ValidationError("porosity_range must be (lo, hi) or one pair per depth")
    if (arr <= 0).any() or (arr >= 1).any() or (arr[:, 0] > arr[:, 1]).any():
        raise ValidationError("porosity ranges must lie strictly inside (0, 1)")
    return arr


# ---------------------------------------------------------------------------
# patches and REV


def patch_offsets(height: int, width: int, side: int, stride: int):
    if side > min(height, width):
        raise ValidationError(f"patch side {side} exceeds image size {height}x{width}")
    if stride < 1 or side < 1:
        raise ValidationError("side and stride must be positive")
    ys = range(0, height - side + 1, stride)
    xs = range(0, width - side + 1, stride)
    return [(y, x) for y in ys for x in xs]


def extract_patches(image, side: int, stride: int = DEFAULT_STRIDE) -> List[np.ndarray]:
    """All ``side``-square windows at multiples of ``stride``, row-major."""
    arr = np.asarray(image)
    if arr.ndim < 2:
        raise ValidationError("image must be at least 2D")
    return [arr[y:y + side, x:x + side].copy()
            for y, x in patch_offsets(arr.shape[0], arr.shape[1], side, stride)]


@dataclass
class RevCurve:
    sizes: List[int]
    sigma: Dict[int, List[float]]          # depth -> std of window porosity per size
    mean: Dict[int, List[float]]
    n_windows: Dict[int, List[int]] = field(default_factory=dict)
    skipped: List[int] = field(default_factory=list)

    def to_rows(self):
        for d in sorted(self.sigma):
            for s, sd, m, n in zip(self.sizes, self.sigma[d], self.mean[d], self.n_windows[d]):
                yield {"depth_index": d, "size": s, "sigma": sd, "mean": m, "n_windows": n}


def _window_porosities(mask: np.ndarray, size: int, max_windows: int, rng) -> np.ndarray:
    h, w = mask.shape
    ny, nx = h - size + 1, w - size + 1
    integral = np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    total = ny * nx
    if total <= max_windows:
        flat = np.arange(total)
    else:
        flat = rng.choice(total, size=max_windows, replace=False)
    y, x = np.divmod(flat, nx)
    s = (integral[y + size, x + size] - integral[y, x + size]
         - integral[y + size, x] + integral[y, x])
    return s / float(size * size)


def rev_analysis(images, segmenter, sizes: Sequence[int], depths: Optional[Sequence[int]] = None,
                 max_windows: int = 200, seed: int = 0) -> RevCurve:
    """Porosity mean and standard deviation versus window size, per depth.

    Each image is segmented once; window porosities are then read off the
    full mask with an integral image. Up to ``max_windows`` random windows
    are drawn per size per image (all of them when fewer exist).
    """
    images = list(images)
    if len(images) < 2:
        raise ValidationError("REV analysis needs at least two images")
    depths = [0] * len(images) if depths is None else list(depths)
    if len(depths) != len(images):
        raise ValidationError("depths must align with images")
    segment = mask_fn(segmenter)
    masks = [as_mask(segment(im)) for im in images]
    rng = np.random.default_rng(seed)
    sizes = sorted(int(s) for s in sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValidationError("sizes must be strictly increasing")
    kept, skipped = [], []
    for s in sizes:
        if any(min(m.shape) >= s for m in masks):
            kept.append(s)
        else:
            warnings.warn(f"REV size {s} exceeds every image; skipped")
            skipped.append(s)
    curve = RevCurve(kept, {}, {}, {}, skipped)
    for d in sorted(set(depths)):
        ms = [m for m, dd in zip(masks, depths) if dd == d]
        sig, mu, cnt = [], [], []
        for s in kept:
            vals = np.concatenate([_window_porosities(m, s, max_windows, rng)
                                   for m in ms if min(m.shape) >= s] or [np.empty(0)])
            sig.append(float(vals.std(ddof=0)) if vals.size else float("nan"))
            mu.append(float(vals.mean()) if vals.size else float("nan"))
            cnt.append(int(vals.size))
        curve.sigma[d], curve.mean[d], curve.n_windows[d] = sig, mu, cnt
    return curve


def select_patch_size(curve: RevCurve, threshold: float = SIGMA_THRESHOLD) -> Tuple[int, bool]:
    """Smallest size whose sigma is at most ``threshold`` at every depth.

    Returns ``(size, fallback)``; ``fallback`` is True when no size
    qualifies and the largest size is returned instead.
    """
    if not curve.sizes:
        raise ValidationError("empty REV curve")
    for i, s in enumerate(curve.sizes):
        if all(curve.sigma[d][i] <= threshold for d in curve.sigma):
            return s, False
    return curve.sizes[-1], True


# ---------------------------------------------------------------------------
# porosity classes


@dataclass
class PorosityClassScheme:
    edges: Dict[int, np.ndarray]   # depth -> n_classes + 1 monotone edges
    n_classes: int = N_CLASSES

    @classmethod
    def from_ranges(cls, ranges: Dict[int, Tuple[float, float]], n_classes: int = N_CLASSES):
        edges = {}
        for d, (lo, hi) in ranges.items():
            if not hi > lo:
                raise ValidationError(f"degenerate porosity range at depth {d}: [{lo}, {hi}]")
            edges[int(d)] = np.linspace(lo, hi, n_classes + 1)
        return cls(edges, n_classes)

    def assign(self, depth: int, porosity: float):
        """Class index (half-open bins, last bin closed) or ``EXCLUDED`` when out of range."""
        e = self.edges[depth]
        if porosity < e[0] or porosity > e[-1]:
            return EXCLUDED
        k = int(np.searchsorted(e, porosity, side="right")) - 1
        return min(k, self.n_classes - 1)

    def class_range(self, depth: int, k: int) -> Tuple[float, float]:
        e = self.edges[depth]
        return float(e[k]), float(e[k + 1])

    def to_dict(self):
        return {"n_classes": self.n_classes,
                "edges": {str(d): [float(v) for v in e] for d, e in self.edges.items()}}

    @classmethod
    def from_dict(cls, blob):
        return cls({int(d): np.asarray(e, dtype=float) for d, e in blob["edges"].items()},
                   int(blob["n_classes"]))


def build_class_scheme(porosities: Dict[int, Sequence[float]], n_classes: int = N_CLASSES
                       ) -> PorosityClassScheme:
    """Equal-width bins over each depth's observed porosity span."""
    ranges = {}
    for d, vals in porosities.items():
        v = np.asarray(vals, dtype=float)
        if np.unique(v).size < n_classes:
            raise ValidationError(
                f"depth {d} has {np.unique(v).size} distinct porosities; need >= {n_classes}")
        ranges[d] = (float(v.min()), float(v.max()))
    return PorosityClassScheme.from_ranges(ranges, n_classes)


# ---------------------------------------------------------------------------
# augmentation

GEOMETRIC_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")
AUGMENTATION_KINDS = GEOMETRIC_OPS + ("intensity_noise",)


@dataclass(frozen=True)
class AugmentationOp:
    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENTATION_KINDS:
            raise ValidationError(f"unknown augmentation {self.kind!r}")

    @property
    def geometric(self) -> bool:
        return self.kind in GEOMETRIC_OPS

    def apply(self, arr: np.ndarray) -> np.ndarray:
        if self.kind == "hflip":
            return arr[:, ::-1].copy()
        if self.kind == "vflip":
            return arr[::-1].copy()
        if self.kind.startswith("rot"):
            return np.rot90(arr, int(self.kind[3:]) // 90, axes=(0, 1)).copy()
        rng = np.random.default_rng(self.seed)
        noise = rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=arr.shape)
        return np.clip(arr.astype(np.int16) + noise, 0, 255).astype(np.uint8)

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        return self.apply(mask) if self.geometric else mask.copy()


def augment(patch: PatchRecord, op: AugmentationOp,
            porosity_fn: Optional[Callable[[np.ndarray], float]] = None,
            drift_tol: float = DRIFT_TOLERANCE, max_retries: int = 5) -> PatchRecord:
    """Apply ``op`` and return a new record flagged as augmented.

    Geometric ops are exact pixel permutations. Intensity noise is re-scored
    with ``porosity_fn`` (when given); if the label drifts by more than
    ``drift_tol`` the op is retried with fresh noise, and
    :class:`AugmentationRejected` is raised after ``max_retries`` failures.
    """
    img = as_rgb(patch.load_image())
    mask = patch.mask
    for attempt in range(max_retries):
        cur = op if attempt == 0 else AugmentationOp(op.kind, op.seed + 7919 * attempt)
        out = cur.apply(img)
        if cur.geometric or porosity_fn is None:
            break
        if abs(porosity_fn(out) - patch.porosity) <= drift_tol:
            break
    else:
        raise AugmentationRejected(
            f"{op.kind} moved the porosity label of {patch.source_id} by more than {drift_tol}")
    return PatchRecord(image=out, porosity=patch.porosity, depth=patch.depth,
                       porosity_class=patch.porosity_class, augmented=True,
                       source_id=patch.source_id,
                       mask=None if mask is None else cur.apply_mask(mask))


# ---------------------------------------------------------------------------
# manifest and balancing


@dataclass
class DatasetManifest:
    records: List[PatchRecord]
    scheme: Optional[PorosityClassScheme] = None
    target_per_class: int = TARGET_PER_CLASS
    min_class_size: int = MIN_CLASS_SIZE
    excluded: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def counts(self) -> Dict[Tuple[int, int], int]:
        c = Counter((r.depth.index, r.porosity_class) for r in self.records
                    if r.porosity_class != EXCLUDED)
        return dict(sorted(c.items()))

    @property
    def depths(self) -> List[int]:
        return sorted({r.depth.index for r in self.records})

    @property
    def n_depths(self) -> int:
        return self.records[0].depth.n_depths if self.records else 0

    def conditions(self) -> np.ndarray:
        """``(N, 2)`` array of (porosity, depth index) pairs."""
        return np.array([(r.porosity, r.depth.index) for r in self.records], dtype=np.float64)

    def porosity_span(self, depth: int) -> Tuple[float, float]:
        vals = [r.porosity for r in self.records if r.depth.index == depth]
        return (min(vals), max(vals)) if vals else (float("nan"), float("nan"))

    def rows(self):
        for r in self.records:
            yield {"path": r.path or "", "depth_index": r.depth.index,
                   "porosity": r.porosity, "class": r.porosity_class,
                   "augmented": r.augmented, "source_id": r.source_id}


def classify_records(records: List[PatchRecord], scheme: PorosityClassScheme) -> None:
    for r in records:
        r.porosity_class = scheme.assign(r.depth.index, r.porosity)


def label_patches(patches, depth: DepthLabel, segmenter, source_id: str,
                  masks=None) -> List[PatchRecord]:
    """Porosity-label patches with ``segmenter`` (one record per patch)."""
    segment = mask_fn(segmenter)
    out = []
    for k, p in enumerate(patches):
        m = as_mask(segment(p))
        out.append(PatchRecord(image=p, porosity=porosity_of_mask(m), depth=depth,
                               source_id=f"{source_id}:{k}",
                               mask=None if masks is None else masks[k]))
    return out


def _digest(arr: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).hexdigest()


def balance_dataset(manifest: DatasetManifest, target: Optional[int] = None,
                    min_size: Optional[int] = None, seed: int = 0,
                    porosity_fn: Optional[Callable[[np.ndarray], float]] = None,
                    drift_tol: float = DRIFT_TOLERANCE) -> DatasetManifest:
    """Bring every retained (depth, class) cell to exactly ``target`` records.

    Cells below ``min_size`` are excluded; cells between ``min_size`` and
    ``target`` are topped up with augmented copies; larger cells are
    downsampled uniformly at random.
    """
    target = manifest.target_per_class if target is None else target
    min_size = manifest.min_class_size if min_size is None else min_size
    if min_size > target:
        raise ValidationError("min_size must not exceed target")
    rng = np.random.default_rng(seed)
    cells: Dict[Tuple[int, int], List[PatchRecord]] = defaultdict(list)
    for r in manifest.records:
        if r.porosity_class != EXCLUDED:
            cells[(r.depth.index, int(r.porosity_class))].append(r)
    excluded = dict(manifest.excluded)
    out: List[PatchRecord] = []
    for key in sorted(cells):
        recs = cells[key]
        n = len(recs)
        if n < min_size:
            excluded[key] = f"{n} records < minimum class size {min_size}"
            continue
        if n >= target:
            keep = np.sort(rng.choice(n, size=target, replace=False))
            out.extend(recs[i] for i in keep)
            continue
        seen = {_digest(r.load_image()) for r in recs}
        new: List[PatchRecord] = []
        attempts = 0
        while len(new) < target - n:
            attempts += 1
            if attempts > 50 * target:
                raise AugmentationRejected(f"could not fill cell {key} with distinct augmentations")
            src = recs[int(rng.integers(n))]
            op = AugmentationOp(AUGMENTATION_KINDS[int(rng.integers(len(AUGMENTATION_KINDS)))],
                                int(rng.integers(2 ** 31)))
            try:
                aug = augment(src, op, porosity_fn, drift_tol)
            except AugmentationRejected:
                continue
            h = _digest(aug.image)
            if h in seen:
                continue
            seen.add(h)
            new.append(aug)
        out.extend(recs)
        out.extend(new)
    for key in list(excluded):
        if key in cells and len(cells[key]) >= min_size:
            del excluded[key]
    return DatasetManifest(out, manifest.scheme, target, min_size, excluded)


# ---------------------------------------------------------------------------
# persistence

MANIFEST_COLUMNS = ("path", "depth_index", "porosity", "class", "augmented", "source_id")


def write_corpus(manifest: DatasetManifest, root, metadata: Optional[dict] = None) -> DatasetManifest:
    """Write patch images as ``depth_<i>/class_<j>/patch_<k>.png`` and set record paths."""
    root = Path(root)
    counters: Dict[Tuple[int, object], int] = Counter()
    for r in manifest.records:
        key = (r.depth.index, r.porosity_class)
        cls = "excluded" if r.porosity_class == EXCLUDED else str(r.porosity_class)
        rel = Path(f"depth_{r.depth.index}") / f"class_{cls}" / f"patch_{counters[key]:05d}.png"
        counters[key] += 1
        write_rgb(root / rel, r.load_image(), metadata)
        r.path = str(rel)
    return manifest


def save_manifest(manifest: DatasetManifest, csv_path, json_path=None, extra=None) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    consts = {k: v for k, v in (extra or {}).items() if isinstance(v, (str, int, float))}
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(MANIFEST_COLUMNS) + sorted(consts))
        w.writeheader()
        for row in manifest.rows():
            w.writerow(dict(row, **consts))
    tmp.replace(csv_path)
    if json_path is not None:
        blob = {
            "columns": list(MANIFEST_COLUMNS),
            "rows": list(manifest.rows()),
            "n_depths": manifest.n_depths,
            "target_per_class": manifest.target_per_class,
            "min_class_size": manifest.min_class_size,
            "counts": [{"depth_index": d, "class": c, "count": n}
                       for (d, c), n in manifest.counts().items()],
            "excluded": [{"depth_index": d, "class": c, "reason": why}
                         for (d, c), why in sorted(manifest.excluded.items())],
            "scheme": manifest.scheme.to_dict() if manifest.scheme else None,
        }
        if extra:
            blob.update(extra)
        json_path = Path(json_path)
        tmp = json_path.with_name(json_path.name + ".tmp")
        tmp.write_text(json.dumps(blob, indent=2))
        tmp.replace(json_path)


def load_manifest(json_path, root=None, load_images: bool = True) -> DatasetManifest:
    blob = json.loads(Path(json_path).read_text())
    root = Path(root) if root is not None else Path(json_path).parent
    n_depths = int(blob["n_depths"])
    records = []
    for row in blob["rows"]:
        cls = row["class"]
        cls = EXCLUDED if cls == EXCLUDED else int(cls)
        path = row["path"]
        img = read_rgb(root / path) if (load_images and path) else None
        records.append(PatchRecord(image=img, porosity=float(row["porosity"]),
                                   depth=DepthLabel(int(row["depth_index"]), n_depths),
                                   porosity_class=cls, augmented=bool(row["augmented"]),
                                   source_id=row["source_id"],
                                   path=str(root / path) if path else None))
    scheme = PorosityClassScheme.from_dict(blob["scheme"]) if blob.get("scheme") else None
    excluded = {(int(e["depth_index"]), int(e["class"])): e["reason"]
                for e in blob.get("excluded", [])}
    return DatasetManifest(records, scheme, int(blob["target_per_class"]),
                           int(blob["min_class_size"]), excluded)
