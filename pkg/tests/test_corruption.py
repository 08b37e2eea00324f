import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from palseg.corruption import (
    AlreadyCorruptedError,
    CorruptionError,
    NoiseSpec,
    corrupt,
    dilate,
    disk,
    erode,
    read_manifest,
    write_manifest,
)
from palseg.datasets import generate_synthetic


def brute_dilate(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy * dy + dx * dx > r * r:
                        continue
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                        out[y, x] = 1
    return out


def brute_erode(mask, r):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            ok = True
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy * dy + dx * dx > r * r:
                        continue
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w and mask[yy, xx]):
                        ok = False
            out[y, x] = ok
    return out


masks = arrays(np.uint8, st.tuples(st.integers(3, 14), st.integers(3, 14)), elements=st.integers(0, 1))


class TestMorphology:
    def test_disk_radius_1_is_cross(self):
        assert disk(1).sum() == 5
        assert disk(2).sum() == 13

    def test_dilate_single_pixel(self):
        m = np.zeros((9, 9), np.uint8)
        m[4, 4] = 1
        expected = np.zeros((9, 9), np.uint8)
        expected[4, 3:6] = 1
        expected[3:6, 4] = 1
        np.testing.assert_array_equal(dilate(m, 1), expected)
        np.testing.assert_array_equal(brute_dilate(m, 1), expected)

    def test_erode_full_shrinks_border_ring(self):
        m = np.ones((9, 9), np.uint8)
        expected = np.zeros((9, 9), np.uint8)
        expected[1:-1, 1:-1] = 1
        np.testing.assert_array_equal(erode(m, 1), expected)
        np.testing.assert_array_equal(brute_erode(m, 1), expected)

    def test_empty(self):
        z = np.zeros((12, 12), np.uint8)
        assert not dilate(z, 5).any()
        assert not erode(z, 5).any()

    def test_thin_mask_erodes_to_empty(self):
        m = np.zeros((20, 20), np.uint8)
        m[10, 2:18] = 1
        assert not erode(m, 6).any()

    def test_closing_extensive(self):
        m = np.zeros((9, 9), np.uint8)
        m[4, 4] = 1
        assert erode(dilate(m, 1), 1)[4, 4] == 1

    @pytest.mark.parametrize("op", [dilate, erode])
    def test_bad_radius(self, op):
        with pytest.raises(CorruptionError):
            op(np.ones((4, 4), np.uint8), 0)

    @settings(max_examples=60, deadline=None)
    @given(masks, st.integers(1, 4))
    def test_matches_brute_force(self, m, r):
        np.testing.assert_array_equal(dilate(m, r), brute_dilate(m, r))
        np.testing.assert_array_equal(erode(m, r), brute_erode(m, r))

    @settings(max_examples=60, deadline=None)
    @given(masks, st.integers(1, 6))
    def test_containment_and_monotonicity(self, m, r):
        d1, e1 = dilate(m, r), erode(m, r)
        assert np.all(e1 <= m) and np.all(m <= d1)
        assert np.all(dilate(d1, 1) >= d1)
        assert np.all(dilate(m, r + 1) >= d1)


class TestNoiseSpec:
    def test_validation(self):
        with pytest.raises(CorruptionError):
            NoiseSpec(1.5, 1, 8)
        with pytest.raises(CorruptionError):
            NoiseSpec(0.5, 0, 8)
        with pytest.raises(CorruptionError):
            NoiseSpec(0.5, 9, 5)
        with pytest.raises(ValueError):
            NoiseSpec(0.5, 1, 8, op_policy="shear")


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(165, 32, 2, seed=11)


class TestCorrupt:
    def test_count_half_up(self, data):
        noisy, records = corrupt(data, NoiseSpec(0.5, 1, 8, seed=0))
        assert len(records) == 83
        assert sum(s.corrupted for s in noisy) == 83

    def test_zero_fraction(self, data):
        noisy, records = corrupt(data, NoiseSpec(0.0, 1, 8, seed=0))
        assert records == []
        assert noisy.fingerprint() == data.fingerprint()

    def test_containment_and_bounds(self, data):
        spec = NoiseSpec(0.75, 5, 13, seed=4)
        noisy, records = corrupt(data, spec)
        by_id = {r.sample_id: r for r in records}
        assert {op for op in (r.op for r in records)} == {"erode", "dilate"}
        for s, orig in zip(noisy, data):
            if not s.corrupted:
                assert s.masks is orig.masks
                continue
            r = by_id[s.id]
            assert spec.radius_min <= r.radius <= spec.radius_max
            np.testing.assert_array_equal(s.clean_masks, orig.masks)
            if r.op == "dilate":
                assert np.all(s.masks >= s.clean_masks)
            else:
                assert np.all(s.masks <= s.clean_masks)
            for k, name in enumerate(data.class_names):
                assert (name in r.emptied_classes) == (not s.masks[k].any())

    def test_same_op_radius_all_channels(self, data):
        noisy, records = corrupt(data, NoiseSpec(0.25, 3, 3, op_policy="dilate", seed=1))
        by_id = {s.id: s for s in noisy}
        for r in records:
            s = by_id[r.sample_id]
            for k in range(2):
                np.testing.assert_array_equal(s.masks[k], dilate(s.clean_masks[k], 3))

    def test_deterministic(self, data):
        spec = NoiseSpec(0.5, 5, 13, seed=9)
        a, ra = corrupt(data, spec)
        b, rb = corrupt(data, spec)
        assert a.fingerprint() == b.fingerprint() and ra == rb

    def test_reject_double_corruption(self, data):
        noisy, _ = corrupt(data, NoiseSpec(0.25, 1, 8, seed=0))
        with pytest.raises(AlreadyCorruptedError):
            corrupt(noisy, NoiseSpec(0.25, 1, 8, seed=0))

    def test_manifest_round_trip(self, data, tmp_path):
        spec = NoiseSpec(0.25, 1, 8, seed=2)
        _, records = corrupt(data, spec)
        write_manifest(tmp_path / "m.json", spec, records)
        spec2, records2 = read_manifest(tmp_path / "m.json")
        assert spec2 == spec and records2 == records
