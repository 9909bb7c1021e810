import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import disc_mask
from poregan.core import DepthLabel, StateError, ValidationError
from poregan.morphology import weighted_throat_radius
from types import SimpleNamespace

from poregan.petro import (ImageProperties, PERM_COEFF, PERM_EXPONENT, PetroTargets,
                           default_probes, dual_constraint_error, mask_properties, permeability,
                           porosity_control_report, representativeness_study,
                           select_representative, throat_radius_for)

D0 = DepthLabel(0, 4)


def identity_segmenter(x):
    return x


def test_permeability_values():
    assert permeability(0.0, 7.0) == 1.3049
    assert permeability(0.3, 0.0) == 1.3049
    assert permeability(0.1, 5) == pytest.approx(1.3049 * math.exp(0.8716), rel=1e-12)
    assert permeability(0.1, 5) == pytest.approx(3.1197, abs=5e-4)
    with pytest.raises(ValidationError):
        permeability(-0.1, 1)
    with pytest.raises(ValidationError):
        permeability(0.1, -1)


def test_permeability_inversion_first_core_sample():
    r = throat_radius_for(0.1573, 33.64)
    assert r == pytest.approx(math.log(33.64 / 1.3049) / (1.7432 * 0.1573), rel=1e-12)
    assert r == pytest.approx(11.85, abs=0.01)
    assert abs(permeability(0.1573, 11.85) - 33.64) <= 0.1


def test_permeability_brute_force_1000(rng):
    phi, r = rng.random(1000), rng.random(1000) * 30
    ours = np.array([permeability(p, q) for p, q in zip(phi, r)])
    ref = 1.3049 * np.exp(1.7432 * phi * r)
    assert np.max(np.abs(ours / ref - 1)) <= 1e-12


@given(st.floats(0, 1), st.floats(0, 20), st.floats(1e-3, 5))
def test_permeability_increasing(phi, r, dr):
    assert permeability(phi, r + dr) >= permeability(phi, r)


def test_dual_constraint_hand_values():
    t = PetroTargets(D0, 0.20, 100.0)
    assert dual_constraint_error((0.20, 100.0), t).E == 0.0
    s = dual_constraint_error((0.18, 90.0), t)
    assert s.E == pytest.approx(0.10, abs=1e-12)
    assert s.E == s.w_porosity * s.porosity_term + s.w_permeability * s.permeability_term
    assert dual_constraint_error((0.18, 50.0), t, 1.0, 0.0).E == pytest.approx(0.1, abs=1e-12)


def test_dual_constraint_validation():
    t = PetroTargets(D0, 0.2, 100.0)
    with pytest.raises(ValidationError):
        dual_constraint_error((0.1, 1), t, 0.7, 0.2)
    with pytest.raises(ValidationError):
        PetroTargets(D0, 0.0, 1.0)
    with pytest.raises(ValidationError):
        PetroTargets(D0, 0.2, 0.0)


@settings(max_examples=50)
@given(st.floats(1, 1e3), st.floats(1, 1e3), st.floats(1e-3, 1e3))
def test_permeability_term_scale_free(kt, kc, lam):
    a = dual_constraint_error((0.2, kc), PetroTargets(D0, 0.2, kt))
    b = dual_constraint_error((0.2, kc * lam), PetroTargets(D0, 0.2, kt * lam))
    assert a.permeability_term == pytest.approx(b.permeability_term, rel=1e-9)


def test_dual_constraint_brute_force_1000(rng):
    for _ in range(1000):
        pt, kt = rng.uniform(0.01, 0.5), rng.uniform(0.1, 500)
        pc, kc = rng.uniform(0, 0.6), rng.uniform(0, 600)
        w = rng.random()
        e = dual_constraint_error((pc, kc), PetroTargets(D0, pt, kt), w, 1 - w).E
        ref = w * abs(pt - pc) / pt + (1 - w) * abs(kt - kc) / kt
        assert abs(e - ref) <= 1e-12 * max(1.0, ref)


# ---------------------------------------------------------------------------
# selection


def _props_from_table(table):
    return lambda im: table[int(im)]


def test_select_argmin_and_ties():
    t = PetroTargets(D0, 0.2, 10.0)
    table = [ImageProperties(0.1, 0, 5.0), ImageProperties(0.2, 0, 10.0),
             ImageProperties(0.3, 0, 15.0), ImageProperties(0.2, 0, 10.0)]
    sel = select_representative(range(4), t, None, properties_fn=_props_from_table(table))
    assert sel.index == 1 and sel.score.E == 0
    # dyadic values keep the two errors exactly equal in floating point
    t = PetroTargets(D0, 0.25, 8.0)
    tie = [ImageProperties(0.125, 0, 4.0), ImageProperties(0.375, 0, 12.0)]
    assert select_representative(range(2), t, None,
                                 properties_fn=_props_from_table(tie)).index == 0
    with pytest.raises(ValidationError):
        select_representative([], t, None)


def test_select_matches_exhaustive_scoring(rng):
    masks = []
    for k in range(12):
        m = np.zeros((80, 80), bool)
        m |= disc_mask((80, 80), (40, 40), 6 + 2 * k)
        masks.append(m)
    phi7 = masks[7].mean()
    k7 = permeability(phi7, weighted_throat_radius(masks[7]))
    t = PetroTargets(D0, float(phi7), float(k7))
    scores = []
    for m in masks:
        p = mask_properties(m)
        scores.append(0.5 * abs(t.core_porosity - p.porosity) / t.core_porosity
                      + 0.5 * abs(t.core_permeability - p.permeability) / t.core_permeability)
    assert int(np.argmin(scores)) == 7
    assert select_representative(masks, t, identity_segmenter).index == 7


def test_perfect_match_always_selected(rng):
    masks = [rng.random((40, 40)) < p for p in (0.2, 0.3, 0.5)]
    perfect = masks[1]
    p = mask_properties(perfect)
    t = PetroTargets(D0, p.porosity, p.permeability)
    others = [rng.random((40, 40)) < q for q in (0.1, 0.6)]
    sel = select_representative(others + [perfect], t, identity_segmenter)
    assert sel.index == 2 and sel.score.E == 0


# ---------------------------------------------------------------------------
# porosity control


class MaskGenerator:
    """Mock generator returning masks at a porosity offset by ``bias``."""

    def __init__(self, bias=0.0, size=100):
        self.bias, self.size = bias, size

    def generate(self, phi, depth, n=1, seed=0, check_range=True):
        k = int(round((phi + self.bias) * self.size * self.size))
        out = []
        for _ in range(n):
            m = np.zeros(self.size * self.size, bool)
            m[:k] = True
            out.append(m.reshape(self.size, self.size))
        return SimpleNamespace(images=out)


def test_porosity_control_perfect_and_biased():
    probes = [(0.05 + 0.01 * k, k % 2) for k in range(20)]
    rep = porosity_control_report(MaskGenerator(), identity_segmenter, probes)
    assert rep.r2 == 1.0 and all(v <= 1e-12 for v in rep.mae_by_depth.values())
    rep = porosity_control_report(MaskGenerator(0.02), identity_segmenter, probes)
    assert all(abs(v - 0.02) <= 1e-12 for v in rep.mae_by_depth.values())
    t = np.array([p for p, _ in probes])
    expected = 1 - 20 * 0.02 ** 2 / ((t - t.mean()) ** 2).sum()
    assert rep.r2 == pytest.approx(expected, abs=1e-9)
    assert len(list(rep.scatter_rows())) == 20


def test_porosity_control_untrained():
    class Untrained:
        trained = False

        def generate(self, *a, **k):
            raise AssertionError

    with pytest.raises(StateError):
        porosity_control_report(Untrained(), identity_segmenter, [(0.1, 0)])


def test_default_probes_skip_excluded():
    probes = default_probes({0: (0.1, 0.3), 1: (0.2, 0.4)}, 200, seed=1,
                            excluded={0: [(0.15, 0.2)]})
    assert len(probes) == 200
    assert {d for _, d in probes} == {0, 1}
    assert not any(d == 0 and 0.15 <= p < 0.2 for p, d in probes)
    for p, d in probes:
        lo, hi = {0: (0.1, 0.3), 1: (0.2, 0.4)}[d]
        assert lo <= p <= hi


# ---------------------------------------------------------------------------
# representativeness


def test_representativeness_mock_cohorts(rng):
    real = {0: [rng.random((120, 120)) < 0.45 for _ in range(3)]}
    gen = MaskGenerator(0.0, 40)
    m = gen.generate(0.3, 0).images[0]
    p = mask_properties(m)
    t = {0: PetroTargets(D0, p.porosity, p.permeability)}
    rep = representativeness_study(real, gen, t, identity_segmenter, n_real=10, n_candidates=100,
                                   side=40)
    row = rep.rows[0]
    assert row.generated.error == 0.0 < row.real.error
    assert set(row.flat()) >= {"real_porosity", "real_permeability", "real_error",
                               "generated_porosity", "generated_permeability", "generated_error"}
    assert len(rep.distributions[0]["generated_candidates"]) == 100
    assert len(rep.selected_images[0]) == 1


def test_representativeness_cohort_sizes():
    t = {0: PetroTargets(D0, 0.3, 10.0)}
    with pytest.raises(ValidationError):
        representativeness_study({0: []}, MaskGenerator(), t, identity_segmenter, n_real=9,
                                 side=10)
    with pytest.raises(ValidationError):
        representativeness_study({0: []}, MaskGenerator(), t, identity_segmenter,
                                 n_candidates=99, side=10)
