import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protokd.augment import (
    AugmentPolicy,
    TransformSpec,
    augment_image,
    augment_pseudo_image,
    default_image_policy,
    default_pseudo_image_policy,
    make_query_set,
    make_rng,
    rotate,
    symmetric_noise_cells,
)


def _image(seed=0, c=3, s=16):
    return make_rng(seed).random((c, s, s)).astype(np.float32)


def _sym(s, seed=0):
    a = make_rng(seed).standard_normal((s, s))
    return (a + a.T) / 2


def _rotate_oracle(img, degrees):
    """Per-pixel inverse mapping with explicit bilinear weights."""
    c, h, w = img.shape
    t = math.radians(degrees)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    out = np.zeros((c, h, w))
    for yo in range(h):
        for xo in range(w):
            dx, dy = xo - cx, yo - cy
            sx = math.cos(t) * dx - math.sin(t) * dy + cx
            sy = math.sin(t) * dx + math.cos(t) * dy + cy
            sx = min(max(sx, 0), w - 1)
            sy = min(max(sy, 0), h - 1)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = sx - x0, sy - y0
            out[:, yo, xo] = (
                img[:, y0, x0] * (1 - fx) * (1 - fy)
                + img[:, y0, x1] * fx * (1 - fy)
                + img[:, y1, x0] * (1 - fx) * fy
                + img[:, y1, x1] * fx * fy
            )
    return out


def test_empty_policy_is_bit_identity():
    img = _image()
    out = augment_image(img, AugmentPolicy(), make_rng(1))
    assert out.dtype == img.dtype
    assert np.array_equal(out, img)
    assert out is not img


def test_hflip_twice_is_identity():
    img = _image()
    pol = AugmentPolicy((TransformSpec("horizontal-flip", 1.0), TransformSpec("horizontal-flip", 1.0)))
    assert np.array_equal(augment_image(img, pol, make_rng(0)), img)


def test_hflip_and_vflip_reverse_axes():
    img = _image()
    h = augment_image(img, AugmentPolicy((TransformSpec("horizontal-flip", 1.0),)), make_rng(0))
    v = augment_image(img, AugmentPolicy((TransformSpec("vertical-flip", 1.0),)), make_rng(0))
    assert np.array_equal(h, img[:, :, ::-1])
    assert np.array_equal(v, img[:, ::-1, :])


@pytest.mark.parametrize("deg", [-30.0, -7.5, 12.0, 30.0])
def test_rotation_matches_inverse_mapping_oracle(deg):
    img = _image(3, s=12)
    got = rotate(img, deg)
    want = _rotate_oracle(img.astype(np.float64), deg)
    inner = (slice(None), slice(3, 9), slice(3, 9))
    assert np.abs(got[inner] - want[inner]).max() <= 1 / 255


def test_rotation_by_90_permutes_pixels():
    img = _image(4, s=9)
    r = rotate(img, 90.0)
    # counter-clockwise quarter turn on a y-down grid
    assert np.allclose(r, np.rot90(img, k=1, axes=(1, 2)), atol=1e-5)


def test_contrast_and_solarize_values():
    img = np.array([[[0.2, 0.4], [0.6, 0.8]]], dtype=np.float32)
    pol = AugmentPolicy((TransformSpec("contrast", 1.0, 2.0, 2.0),))
    np.testing.assert_allclose(augment_image(img, pol, make_rng(0)), [[[0.0, 0.3], [0.7, 1.0]]], atol=1e-6)
    pol = AugmentPolicy((TransformSpec("solarize", 1.0, 0.5, 0.5),))
    np.testing.assert_allclose(augment_image(img, pol, make_rng(0)), [[[0.2, 0.4], [0.4, 0.2]]], atol=1e-6)


def test_zoom_identity_factor():
    img = _image()
    pol = AugmentPolicy((TransformSpec("zoom", 1.0, 1.0, 1.0),))
    np.testing.assert_allclose(augment_image(img, pol, make_rng(0)), img, atol=1e-6)


def test_default_policy_output_range_and_determinism():
    img = _image(5)
    pol = default_image_policy()
    a = augment_image(img, pol, make_rng(11, 2))
    b = augment_image(img, pol, make_rng(11, 2))
    assert np.array_equal(a, b)
    assert a.shape == img.shape and a.dtype == img.dtype
    assert a.min() >= 0 and a.max() <= 1


def test_stream_consumption_independent_of_firing():
    img = _image()
    on = AugmentPolicy((TransformSpec("rotation", 1.0, -30, 30),))
    off = AugmentPolicy((TransformSpec("rotation", 0.0, -30, 30),))
    r1, r2 = make_rng(0), make_rng(0)
    augment_image(img, on, r1)
    augment_image(img, off, r2)
    assert r1.random() == r2.random()


def test_image_policy_rejects_out_of_range_values():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        augment_image(_image() * 2, default_image_policy(), make_rng(0))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "blur"},
        {"kind": "zoom", "p": 1.5, "low": 0.8, "high": 1.2},
        {"kind": "rotation", "low": 10, "high": -10},
        {"kind": "zoom", "low": 0.0, "high": 1.0},
        {"kind": "solarize", "low": 0.5, "high": 1.5},
    ],
)
def test_invalid_transform_specs(kwargs):
    with pytest.raises(ValueError):
        TransformSpec(**kwargs)


def test_policy_round_trip():
    pol = default_image_policy()
    assert AugmentPolicy.from_list(pol.to_list()) == pol
    with pytest.raises(ValueError, match="unknown transform key"):
        TransformSpec.from_dict({"kind": "zoom", "prob": 0.5})


def test_pseudo_noise_count_and_symmetry():
    m = _sym(64)
    out = augment_pseudo_image(m, 0.05, make_rng(7))
    changed = int((out != m).sum())
    target = math.ceil(0.05 * 64 * 64)
    assert target - 1 <= changed <= target + 1
    assert np.array_equal(out, out.T)


def test_pseudo_noise_replays_cell_selection():
    m = _sym(32, 1)
    out = augment_pseudo_image(m, 0.05, make_rng(3))
    rows, cols, noise = symmetric_noise_cells(32, 0.05, make_rng(3))
    want = m.copy()
    want[rows, cols] += noise
    want[cols, rows] = want[rows, cols]
    assert np.array_equal(out, want)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 40), st.floats(0.01, 0.5), st.integers(0, 2**31))
def test_pseudo_noise_coverage_property(size, frac, seed):
    rows, cols, _ = symmetric_noise_cells(size, frac, make_rng(seed))
    assert np.all(rows <= cols)
    assert len(set(zip(rows.tolist(), cols.tolist()))) == len(rows)
    covered = int(np.where(rows == cols, 1, 2).sum())
    target = math.ceil(frac * size * size)
    assert target <= covered <= target + 1


def test_pseudo_noise_rejects_asymmetric_and_non_square():
    a = np.arange(16.0).reshape(4, 4)
    with pytest.raises(ValueError, match="not symmetric"):
        augment_pseudo_image(a, 0.05, make_rng(0))
    with pytest.raises(ValueError, match="square"):
        augment_pseudo_image(np.zeros((3, 4)), 0.05, make_rng(0))


def test_pseudo_policy_through_pipeline():
    m = _sym(20)[None].astype(np.float32)
    pol = default_pseudo_image_policy()
    a = augment_image(m, pol, make_rng(5))
    b = augment_image(m, pol, make_rng(5))
    assert np.array_equal(a, b)
    assert np.array_equal(a[0], a[0].T)
    assert 0 < (a != m).sum() <= math.ceil(0.05 * 400) + 1
    with pytest.raises(ValueError, match=r"\[1,S,S\]"):
        augment_image(np.zeros((3, 20, 20)), pol, make_rng(0))


def test_make_query_set_labels_and_determinism():
    img = _image()
    qs = make_query_set((img, 4), default_image_policy(), 5, make_rng(9))
    assert len(qs) == 5
    assert [y for _, y in qs] == [4] * 5
    again = make_query_set((img, 4), default_image_policy(), 5, make_rng(9))
    assert all(np.array_equal(a, b) for (a, _), (b, _) in zip(qs, again))
    # independent draws differ from each other
    assert not all(np.array_equal(qs[0][0], q) for q, _ in qs[1:])
    with pytest.raises(ValueError):
        make_query_set((img, 0), default_image_policy(), 0, make_rng(0))
