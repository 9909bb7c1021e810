"""Petrophysical scoring of images against core measurements.

Permeability comes from an exponential porosity/throat-radius correlation;
images are ranked by a weighted relative error against a core sample's
porosity and permeability, and the best of a candidate pool is selected.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (DEFAULT_PIXEL_SIZE, DepthLabel, StateError, ValidationError, as_mask,
                   porosity_of_mask)
from .morphology import UndefinedMetricError, weighted_throat_radius
from .segmentation import mask_fn
from .stats import mae, r_squared

PERM_COEFF = 1.3049
PERM_EXPONENT = 1.7432
W_POROSITY = 0.5
W_PERMEABILITY = 0.5


def permeability(porosity: float, throat_radius: float) -> float:
    """Permeability in mD from porosity (fraction) and weighted throat radius (um)."""
    if porosity < 0 or throat_radius < 0:
        raise ValidationError("porosity and throat radius must be non-negative")
    if porosity > 1:
        raise ValidationError("porosity must be a fraction in [0, 1]")
    return PERM_COEFF * math.exp(PERM_EXPONENT * porosity * throat_radius)


def throat_radius_for(porosity: float, perm: float) -> float:
    """Throat radius that reproduces ``perm`` at ``porosity`` (inverse correlation)."""
    if porosity <= 0 or perm <= 0:
        raise ValidationError("porosity and permeability must be positive")
    return math.log(perm / PERM_COEFF) / (PERM_EXPONENT * porosity)


@dataclass(frozen=True)
class PetroTargets:
    depth: DepthLabel
    core_porosity: float
    core_permeability: float
    depth_m: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.core_porosity < 1:
            raise ValidationError("core porosity must lie in (0, 1)")
        if not self.core_permeability > 0:
            raise ValidationError("core permeability must be positive")


@dataclass
class DualConstraintScore:
    E: float
    porosity_term: float
    permeability_term: float
    w_porosity: float = W_POROSITY
    w_permeability: float = W_PERMEABILITY
    porosity: float = math.nan
    permeability: float = math.nan

    def to_dict(self):
        return asdict(self)


def dual_constraint_error(calc: Tuple[float, float], target: PetroTargets,
                          w_porosity: float = W_POROSITY,
                          w_permeability: float = W_PERMEABILITY) -> DualConstraintScore:
    """Weighted sum of relative porosity and permeability deviations; 0 is a perfect match."""
    if not math.isclose(w_porosity + w_permeability, 1.0, abs_tol=1e-12):
        raise ValidationError("weights must sum to 1")
    if min(w_porosity, w_permeability) < 0:
        raise ValidationError("weights must be non-negative")
    phi_t, k_t = target.core_porosity, target.core_permeability
    if phi_t <= 0 or k_t <= 0:
        raise ValidationError("targets must be positive")
    phi_c, k_c = calc
    pt = abs(phi_t - phi_c) / phi_t
    kt = abs(k_t - k_c) / k_t
    return DualConstraintScore(w_porosity * pt + w_permeability * kt, pt, kt,
                               w_porosity, w_permeability, float(phi_c), float(k_c))


@dataclass
class ImageProperties:
    porosity: float
    throat_radius: float
    permeability: float


def image_properties(image, segmenter, pixel_size: float = DEFAULT_PIXEL_SIZE) -> ImageProperties:
    """Porosity, weighted throat radius and permeability of one image."""
    mask = as_mask(mask_fn(segmenter)(image))
    return mask_properties(mask, pixel_size)


def mask_properties(mask, pixel_size: float = DEFAULT_PIXEL_SIZE) -> ImageProperties:
    phi = porosity_of_mask(mask)
    try:
        r = weighted_throat_radius(mask, pixel_size)
    except UndefinedMetricError:
        r = 0.0
    return ImageProperties(phi, r, permeability(phi, r))


@dataclass
class Selection:
    index: int
    score: DualConstraintScore
    scores: List[DualConstraintScore]
    image: Optional[np.ndarray] = None


def select_representative(candidates, target: PetroTargets, segmenter,
                          pixel_size: float = DEFAULT_PIXEL_SIZE,
                          w_porosity: float = W_POROSITY,
                          w_permeability: float = W_PERMEABILITY,
                          properties_fn: Optional[Callable] = None) -> Selection:
    """Score every candidate and return the minimum-error one (lowest index on ties)."""
    cands = list(candidates)
    if not cands:
        raise ValidationError("no candidate images")
    props = properties_fn or (lambda im: image_properties(im, segmenter, pixel_size))
    scores = []
    for im in cands:
        p = props(im)
        scores.append(dual_constraint_error((p.porosity, p.permeability), target,
                                            w_porosity, w_permeability))
    errs = np.array([s.E for s in scores])
    best = int(np.argmin(errs))   # argmin returns the first occurrence
    return Selection(best, scores[best], scores, cands[best])


# ---------------------------------------------------------------------------
# porosity control


@dataclass
class PorosityControlReport:
    r2: float
    mae_by_depth: Dict[int, float]
    targets: List[float]
    observed: List[float]
    depths: List[int]
    r2_convention: str = ("R2 = 1 - sum((observed - target)^2) / sum((target - mean(target))^2); "
                          "targets are the reference")

    @property
    def r2_rounded(self) -> float:
        return round(self.r2, 2)

    def scatter_rows(self):
        for t, o, d in zip(self.targets, self.observed, self.depths):
            yield {"depth_index": d, "target_porosity": t, "generated_porosity": o}

    def to_dict(self):
        return {"r2": self.r2, "r2_rounded": self.r2_rounded,
                "mae_by_depth": {str(k): v for k, v in self.mae_by_depth.items()},
                "n": len(self.targets), "r2_convention": self.r2_convention}


def default_probes(trained_ranges: Dict[int, Tuple[float, float]], n: int = 100,
                   seed: int = 0,
                   excluded: Optional[Dict[int, Sequence[Tuple[float, float]]]] = None
                   ) -> List[Tuple[float, int]]:
    """``n`` (porosity, depth) probes, depths in rotation, porosity uniform in each trained range.

    Porosities falling in an ``excluded`` interval ``[lo, hi)`` of their
    depth (classes that had too few patches to train on) are redrawn.
    """
    rng = np.random.default_rng(seed)
    depths = sorted(trained_ranges)
    excluded = excluded or {}
    out = []
    for k in range(n):
        d = depths[k % len(depths)]
        lo, hi = trained_ranges[d]
        for _ in range(10000):
            phi = float(rng.uniform(lo, hi))
            if not any(a <= phi < b for a, b in excluded.get(d, ())):
                break
        else:
            raise ValidationError(f"depth {d}: trained range is fully excluded")
        out.append((phi, d))
    return out


def _generate_one(generator, phi, depth, seed):
    if hasattr(generator, "trained") and not generator.trained:
        raise StateError("generator has not been trained")
    out = generator.generate(phi, depth, 1, seed=seed) if hasattr(generator, "generate") \
        else generator(phi, depth, 1, seed)
    images = getattr(out, "images", out)
    return images[0]


def porosity_control_report(generator, segmenter, probes: Sequence[Tuple[float, int]],
                            seed: int = 0) -> PorosityControlReport:
    """Generate one image per probe, measure its porosity, and score against the targets."""
    if not probes:
        raise ValidationError("no probes")
    segment = mask_fn(segmenter)
    targets, observed, depths = [], [], []
    for k, (phi, d) in enumerate(probes):
        img = _generate_one(generator, phi, d, seed + k)
        targets.append(float(phi))
        observed.append(porosity_of_mask(as_mask(segment(img))))
        depths.append(int(d))
    t, o, dd = np.array(targets), np.array(observed), np.array(depths)
    by_depth = {}
    for d in sorted(set(depths)):
        sel = dd == d
        by_depth[d] = float(np.abs(o[sel] - t[sel]).mean())
    return PorosityControlReport(r_squared(t, o), by_depth, targets, observed, depths)


# ---------------------------------------------------------------------------
# representativeness


@dataclass
class CohortSummary:
    porosity: float
    permeability: float
    error: float
    n: int


@dataclass
class RepresentativenessRow:
    depth_index: int
    depth_m: Optional[float]
    core_porosity: float
    core_permeability: float
    real: CohortSummary
    generated: CohortSummary

    def flat(self):
        return {
            "depth_index": self.depth_index, "depth_m": self.depth_m,
            "core_porosity": self.core_porosity, "core_permeability": self.core_permeability,
            "real_porosity": self.real.porosity, "real_permeability": self.real.permeability,
            "real_error": self.real.error, "real_n": self.real.n,
            "generated_porosity": self.generated.porosity,
            "generated_permeability": self.generated.permeability,
            "generated_error": self.generated.error, "generated_n": self.generated.n,
        }


@dataclass
class RepresentativenessReport:
    rows: List[RepresentativenessRow]
    # depth -> cohort name -> list of (porosity, permeability, E)
    distributions: Dict[int, Dict[str, List[Tuple[float, float, float]]]] = field(default_factory=dict)
    selected_images: Dict[int, List[np.ndarray]] = field(default_factory=dict)

    def table(self):
        return [r.flat() for r in self.rows]


def random_subimages(images, side: int, n: int, rng: np.random.Generator) -> List[np.ndarray]:
    """``n`` random ``side``-square windows drawn across ``images``."""
    images = [im for im in images if min(im.shape[:2]) >= side]
    if not images:
        raise ValidationError(f"no image is at least {side}px on a side")
    out = []
    for _ in range(n):
        im = images[int(rng.integers(len(images)))]
        y = int(rng.integers(im.shape[0] - side + 1))
        x = int(rng.integers(im.shape[1] - side + 1))
        out.append(im[y:y + side, x:x + side])
    return out


def _summ(scores: List[DualConstraintScore]) -> CohortSummary:
    return CohortSummary(float(np.mean([s.porosity for s in scores])),
                         float(np.mean([s.permeability for s in scores])),
                         float(np.mean([s.E for s in scores])), len(scores))


def representativeness_study(real_images: Dict[int, Sequence[np.ndarray]], generator,
                             targets: Dict[int, PetroTargets], segmenter,
                             n_real: int = 50, n_candidates: int = 100, n_rounds: int = 1,
                             side: Optional[int] = None, pixel_size: float = DEFAULT_PIXEL_SIZE,
                             seed: int = 0, min_real_images: int = 10,
                             min_candidates: int = 100, w_porosity: float = W_POROSITY,
                             w_permeability: float = W_PERMEABILITY) -> RepresentativenessReport:
    """Compare random real sub-images with error-minimizing generated images, per depth.

    For each depth, ``n_real`` random windows of the real images are scored
    against the core targets; separately, ``n_rounds`` pools of
    ``n_candidates`` generated images at the core porosity are scored and
    the best of each pool kept. Cohort errors are means of per-image errors.
    """
    if n_real < min_real_images:
        raise ValidationError(f"need at least {min_real_images} real sub-images per depth")
    if n_candidates < min_candidates:
        raise ValidationError(f"need at least {min_candidates} generated candidates per depth")
    rng = np.random.default_rng(seed)
    side = side or getattr(generator, "image_size", None)
    if side is None:
        raise ValidationError("sub-image side must be given")
    rows, dists, chosen = [], {}, {}
    for d in sorted(targets):
        tgt = targets[d]
        subs = random_subimages(real_images[d], side, n_real, rng)
        real_scores = []
        for im in subs:
            p = image_properties(im, segmenter, pixel_size)
            real_scores.append(dual_constraint_error((p.porosity, p.permeability), tgt,
                                                     w_porosity, w_permeability))
        picked, cand_scores, chosen[d] = [], [], []
        for r in range(n_rounds):
            batch = generator.generate(tgt.core_porosity, d, n_candidates,
                                       seed=seed + 1000 * d + r, check_range=False)
            sel = select_representative(batch.images, tgt, segmenter, pixel_size,
                                        w_porosity, w_permeability)
            picked.append(sel.score)
            chosen[d].append(sel.image)
            cand_scores.extend(sel.scores)
        rows.append(RepresentativenessRow(d, tgt.depth_m, tgt.core_porosity,
                                          tgt.core_permeability, _summ(real_scores),
                                          _summ(picked)))
        dists[d] = {
            "real": [(s.porosity, s.permeability, s.E) for s in real_scores],
            "generated_candidates": [(s.porosity, s.permeability, s.E) for s in cand_scores],
            "generated_selected": [(s.porosity, s.permeability, s.E) for s in picked],
        }
    return RepresentativenessReport(rows, dists, chosen)
