import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuropipe.augmentation import (
    HORIZONTAL,
    VERTICAL,
    AugmentPolicy,
    adjust_contrast,
    apply_policy,
    apply_policy_with_mask,
    draw_params,
    flip,
    rescale,
    transform_boxes,
)
from neuropipe.boxes import boxes_to_mask
from neuropipe.errors import DegenerateOutput, NonPositiveFactor
from neuropipe.imaging_io import Modality, SliceStack
from neuropipe.metrics import dice

MODS = (Modality.T1, Modality.T2)


def random_stack(h=6, w=7, c=2, seed=0, normalized=False):
    px = np.random.default_rng(seed).random((h, w, c))
    return SliceStack(px, MODS[:c] if c <= 2 else tuple(Modality)[:c], normalized=normalized)


def test_flip_row_definition():
    s = SliceStack(np.array([[1.0, 2.0, 3.0]]), (Modality.T1,))
    np.testing.assert_array_equal(flip(s, HORIZONTAL).pixels[:, :, 0], [[3.0, 2.0, 1.0]])
    np.testing.assert_array_equal(flip(s, VERTICAL).pixels, s.pixels)


def test_flip_maps_pixels_for_all_channels():
    s = random_stack()
    h, w = s.height, s.width
    fh, fv = flip(s, HORIZONTAL).pixels, flip(s, VERTICAL).pixels
    for r in range(h):
        for c in range(w):
            np.testing.assert_array_equal(fh[r, w - 1 - c], s.pixels[r, c])
            np.testing.assert_array_equal(fv[h - 1 - r, c], s.pixels[r, c])


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 1000))
def test_flip_involution_and_commutation(h, w, seed):
    s = random_stack(h, w, seed=seed)
    for axis in (HORIZONTAL, VERTICAL):
        assert np.array_equal(flip(flip(s, axis), axis).pixels, s.pixels)
    hv = flip(flip(s, HORIZONTAL), VERTICAL).pixels
    vh = flip(flip(s, VERTICAL), HORIZONTAL).pixels
    assert np.array_equal(hv, vh)


def test_flip_constant_unchanged():
    s = SliceStack(np.full((4, 5, 1), 0.3), (Modality.T1,))
    assert np.array_equal(flip(s, HORIZONTAL).pixels, s.pixels)


def test_flip_bad_axis():
    with pytest.raises(ValueError):
        flip(random_stack(), "diagonal")


def test_contrast_examples():
    s = SliceStack(np.array([[0.2, 0.6]]), (Modality.T1,))
    np.testing.assert_allclose(adjust_contrast(s, 2.0).pixels[:, :, 0], [[0.0, 0.8]], atol=1e-15)
    r = random_stack()
    np.testing.assert_allclose(adjust_contrast(r, 1.0).pixels, r.pixels, atol=1e-15)
    with pytest.raises(NonPositiveFactor):
        adjust_contrast(r, 0.0)


def test_contrast_clips_only_normalized_stacks():
    s = SliceStack(np.array([[0.0, 1.0]]), (Modality.T1,), normalized=True)
    out = adjust_contrast(s, 3.0).pixels
    assert out.min() == 0.0 and out.max() == 1.0
    raw = SliceStack(np.array([[0.0, 1.0]]), (Modality.T1,))
    np.testing.assert_allclose(adjust_contrast(raw, 3.0).pixels[:, :, 0], [[-1.0, 2.0]])


@settings(max_examples=40, deadline=None)
@given(factor=st.floats(0.05, 5.0), seed=st.integers(0, 1000))
def test_contrast_preserves_channel_mean(factor, seed):
    s = random_stack(seed=seed)
    out = adjust_contrast(s, factor).pixels
    np.testing.assert_allclose(out.mean(axis=(0, 1)), s.pixels.mean(axis=(0, 1)), atol=1e-12)


def test_rescale_examples():
    r = random_stack()
    np.testing.assert_array_equal(rescale(r, 1.0).pixels, r.pixels)
    const = SliceStack(np.full((2, 2, 1), 0.7), (Modality.T1,))
    np.testing.assert_allclose(rescale(const, 2.0).pixels, 0.7, atol=1e-15)
    checker = SliceStack(np.array([[0.0, 1.0], [1.0, 0.0]]), (Modality.T1,))
    # hand evaluation: samples at source coords {0, .25, .75, 1}, f(y, x) = x + y - 2xy
    expected = np.array(
        [
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0],
        ]
    )
    np.testing.assert_allclose(rescale(checker, 2.0).pixels[:, :, 0], expected, atol=1e-15)


def test_rescale_errors_and_rounding():
    assert rescale(random_stack(5, 5), 0.5).pixels.shape[:2] == (3, 3)  # 2.5 rounds up
    with pytest.raises(DegenerateOutput):
        rescale(random_stack(2, 2), 0.1)
    with pytest.raises(NonPositiveFactor):
        rescale(random_stack(), -1.0)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(flip_h_prob=1.5)
    with pytest.raises(ValueError):
        AugmentPolicy(contrast_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugmentPolicy(scale_range=(0.0, 1.0))


def test_degenerate_policy_is_identity():
    s = random_stack()
    pol = AugmentPolicy.identity(seed=5)
    for i in range(20):
        assert np.array_equal(apply_policy(s, pol, i).pixels, s.pixels)


def test_policy_deterministic_per_draw():
    s = random_stack()
    pol = AugmentPolicy(seed=123)
    for i in range(10):
        assert np.array_equal(apply_policy(s, pol, i).pixels, apply_policy(s, pol, i).pixels)
    # draws do not depend on evaluation order
    forward = [draw_params(pol, i) for i in range(10)]
    backward = [draw_params(pol, i) for i in reversed(range(10))][::-1]
    assert forward == backward


def test_adjacent_seeds_differ():
    s = random_stack(8, 8, seed=9)
    differ = 0
    for i in range(100):
        a = apply_policy(s, AugmentPolicy(seed=41), i).pixels
        b = apply_policy(s, AugmentPolicy(seed=42), i).pixels
        differ += int(a.shape != b.shape or not np.array_equal(a, b))
    assert differ >= 90


def test_policy_applies_flips_before_contrast_before_scale():
    s = random_stack(6, 6, seed=4)
    pol = AugmentPolicy(1.0, 1.0, (1.5, 1.5), (2.0, 2.0), seed=0)
    manual = rescale(adjust_contrast(flip(flip(s, HORIZONTAL), VERTICAL), 1.5), 2.0)
    np.testing.assert_array_equal(apply_policy(s, pol, 0).pixels, manual.pixels)


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def test_mask_co_transformation_keeps_dice_one():
    mask = _disk(24, 20, 10, 8, 5)
    img = SliceStack((0.2 + 0.6 * mask)[:, :, None], (Modality.FLAIR,))
    pol = AugmentPolicy(0.5, 0.5, (0.6, 1.6), (0.7, 1.4), seed=7)
    for i in range(30):
        d = draw_params(pol, i)
        t_img, t_mask = apply_policy_with_mask(img, mask, pol, i)
        mean = img.pixels.mean()
        threshold = mean + d.contrast * (0.5 - mean)  # image level of the mask's 0.5 crossing
        # exact 0.5 crossings land within an ulp of the threshold on the image side
        support = t_img.pixels[:, :, 0] > threshold + 1e-9
        assert t_mask.shape == support.shape
        assert dice(t_mask, support) == 1.0


def test_box_transform_follows_flips():
    mask = _disk(20, 30, 5, 7, 3)
    from neuropipe.boxes import box_from_mask

    box = box_from_mask(mask).as_array()[None]
    pol = AugmentPolicy(1.0, 1.0, (1.0, 1.0), (1.0, 1.0))
    d = draw_params(pol, 0)
    _, t_mask = apply_policy_with_mask(SliceStack(mask[:, :, None] * 1.0, (Modality.T1,)), mask, pol, 0)
    np.testing.assert_array_equal(transform_boxes(box, d, 20, 30)[0], box_from_mask(t_mask).as_array())
    assert boxes_to_mask(transform_boxes(box, d, 20, 30), 20, 30).sum() == boxes_to_mask(box, 20, 30).sum()
