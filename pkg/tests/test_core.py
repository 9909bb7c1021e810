import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poregan.core import (ConditionVector, DepthLabel, PatchRecord, ValidationError, as_mask,
                          depth_from_one_hot, from_network_domain, one_hot_depth,
                          porosity_of_mask, read_mask, read_png_metadata, read_rgb,
                          to_network_domain, write_mask, write_rgb)


def test_porosity_extremes_and_ratio():
    assert porosity_of_mask(np.zeros((480, 480), int)) == 0.0
    assert porosity_of_mask(np.ones((480, 480), int)) == 1.0
    m = np.zeros((480, 480), bool)
    m.flat[:115200] = True
    assert porosity_of_mask(m) == 0.5


def test_porosity_rejects_bad_masks():
    with pytest.raises(ValidationError):
        porosity_of_mask(np.zeros((0, 5)))
    with pytest.raises(ValidationError):
        porosity_of_mask(np.full((3, 3), 2))
    with pytest.raises(ValidationError):
        porosity_of_mask(np.zeros((3, 3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2 ** 31 - 1))
def test_porosity_flip_rotate_invariant(h, w, seed):
    m = np.random.default_rng(seed).random((h, w)) < 0.4
    p = porosity_of_mask(m)
    for t in (np.fliplr(m), np.flipud(m), np.rot90(m), np.rot90(m, 2), np.rot90(m, 3)):
        assert porosity_of_mask(t) == p


def test_one_hot():
    assert one_hot_depth(DepthLabel(0, 4)).tolist() == [1, 0, 0, 0]
    assert one_hot_depth(DepthLabel(2, 4)).tolist() == [0, 0, 1, 0]
    with pytest.raises(ValidationError):
        DepthLabel(4, 4)
    with pytest.raises(ValidationError):
        DepthLabel(-1, 4)


@given(st.integers(1, 12).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1))))
def test_one_hot_round_trip(pair):
    n, i = pair
    lab = DepthLabel(i, n)
    assert depth_from_one_hot(one_hot_depth(lab)) == lab
    assert int(np.argmax(one_hot_depth(lab))) == i


def test_depth_from_one_hot_rejects_invalid():
    for bad in ([0, 0, 0], [1, 1, 0], [0.5, 0.5], [[1, 0]]):
        with pytest.raises(ValidationError):
            depth_from_one_hot(bad)


def test_condition_vector():
    c = ConditionVector(0.25, DepthLabel(1, 4))
    assert c.depth_one_hot.tolist() == [0, 1, 0, 0]
    assert c.n_depths == 4
    for phi in (-0.01, 1.01):
        with pytest.raises(ValidationError):
            ConditionVector(phi, DepthLabel(0, 4))


def test_domain_endpoints():
    assert to_network_domain(np.array([0.0]))[0] == -1.0
    assert to_network_domain(np.array([255.0]))[0] == 1.0
    assert to_network_domain(np.array([127.5]))[0] == 0.0
    with pytest.raises(ValidationError):
        to_network_domain(np.array([256.0]))
    with pytest.raises(ValidationError):
        from_network_domain(np.array([1.5]))


def test_domain_round_trip(rng):
    img = rng.integers(0, 256, (17, 23, 3)).astype(np.uint8)
    back = from_network_domain(to_network_domain(img))
    assert np.abs(back.astype(int) - img).max() * 1.0 / 255 <= 1 / 255
    assert np.array_equal(back, img)


def test_patch_record_validation():
    with pytest.raises(ValidationError):
        PatchRecord(None, 1.2, DepthLabel(0, 2))
    r = PatchRecord(np.zeros((4, 4, 3), np.uint8), 0.3, DepthLabel(1, 2))
    assert r.condition.porosity == 0.3


def test_png_round_trip_with_metadata(tmp_path, rng):
    img = rng.integers(0, 256, (9, 11, 3)).astype(np.uint8)
    write_rgb(tmp_path / "a.png", img, {"config_hash": "abc"})
    assert np.array_equal(read_rgb(tmp_path / "a.png"), img)
    assert read_png_metadata(tmp_path / "a.png")["config_hash"] == "abc"
    m = rng.random((9, 11)) < 0.5
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)
    assert not list(tmp_path.glob("*.tmp"))


def test_as_mask_accepts_binary_ints():
    assert as_mask(np.array([[0, 1], [1, 0]])).dtype == bool
