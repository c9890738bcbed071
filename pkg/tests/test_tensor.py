import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridcal.tensor import (
    ALL_TRANSFORMS,
    AUGMENTATIONS,
    DEFAULT_LAYOUT,
    IDENTITY,
    ChannelLayout,
    SampleSequence,
    ShapeError,
    TransformSpec,
    activity_mask,
    apply_transform,
    check_grid,
    invert_transform,
    pad_to_square,
    stack_frames,
    unpad,
)


def test_identity_leaves_tensor_unchanged():
    t = np.random.default_rng(0).uniform(0, 255, size=(4, 6, 3))
    np.testing.assert_array_equal(apply_transform(t, TransformSpec(False, False, 360)), t)


def test_horizontal_flip_2x2():
    t = np.array([[1, 2], [3, 4]])[..., None]
    out = apply_transform(t, TransformSpec(flip_h=True))
    np.testing.assert_array_equal(out[..., 0], [[2, 1], [4, 3]])


def test_four_quarter_turns_are_identity():
    t = np.arange(9.0).reshape(3, 3, 1)
    out = t
    for _ in range(4):
        out = apply_transform(out, TransformSpec(rotation=90))
    np.testing.assert_array_equal(out, t)


def test_round_trip_hflip_rot90():
    t = np.random.default_rng(1).uniform(0, 255, size=(4, 4, 1))
    spec = TransformSpec(flip_h=True, rotation=90)
    np.testing.assert_array_equal(invert_transform(apply_transform(t, spec), spec), t)


@pytest.mark.parametrize("spec", ALL_TRANSFORMS)
def test_round_trip_all_elements(spec):
    t = np.random.default_rng(2).uniform(0, 255, size=(5, 5, 2))
    np.testing.assert_array_equal(invert_transform(apply_transform(t, spec), spec), t)


def test_invert_identity():
    t = np.random.default_rng(3).uniform(size=(3, 5, 2))
    np.testing.assert_array_equal(invert_transform(t, IDENTITY), t)


def test_quarter_turn_needs_square():
    with pytest.raises(ShapeError):
        apply_transform(np.zeros((3, 4, 1)), TransformSpec(rotation=90))
    # half turns and flips are fine on rectangles
    apply_transform(np.zeros((3, 4, 1)), TransformSpec(flip_v=True, rotation=180))


def test_transforms_are_eight_distinct_elements():
    probe = np.arange(16).reshape(4, 4, 1)
    images = {apply_transform(probe, s).tobytes() for s in ALL_TRANSFORMS}
    assert len(images) == 8
    assert len(AUGMENTATIONS) == 7 and IDENTITY not in AUGMENTATIONS


def test_group_closure_under_composition():
    probe = np.arange(25).reshape(5, 5, 1)
    images = {apply_transform(probe, s).tobytes() for s in ALL_TRANSFORMS}
    for a, b in itertools.product(ALL_TRANSFORMS, repeat=2):
        assert apply_transform(apply_transform(probe, a), b).tobytes() in images


def test_flips_are_involutions_and_rot90_has_order_4():
    t = np.random.default_rng(4).uniform(size=(4, 4, 3))
    for spec in (TransformSpec(flip_h=True), TransformSpec(flip_v=True)):
        np.testing.assert_array_equal(apply_transform(apply_transform(t, spec), spec), t)
    r = TransformSpec(rotation=90)
    twice = apply_transform(apply_transform(t, r), r)
    assert not np.array_equal(twice, t)


def test_canonicalization_maps_double_flip_to_half_turn():
    assert TransformSpec(flip_h=True, flip_v=True).canonical() == TransformSpec(rotation=180)
    assert TransformSpec(rotation=360).is_identity


def test_channels_not_permuted():
    t = np.zeros((3, 3, 4))
    t[0, 0, 2] = 7
    out = apply_transform(t, TransformSpec(flip_h=True))
    assert out[0, 2, 2] == 7 and out[..., [0, 1, 3]].sum() == 0


def test_transform_acts_on_leading_axes_too():
    t = np.random.default_rng(5).uniform(size=(2, 12, 4, 4, 3))
    spec = TransformSpec(flip_v=True, rotation=270)
    out = apply_transform(t, spec)
    for i in range(2):
        for k in range(12):
            np.testing.assert_array_equal(out[i, k], apply_transform(t[i, k], spec))


def test_pad_full_scale_shape():
    t = np.ones((495, 436, 1), dtype=np.uint8)
    out = pad_to_square(t, 496)
    assert out.shape == (496, 496, 1)
    assert out[495:].sum() == 0 and out[:, 436:].sum() == 0
    assert out[:495, :436].all()


def test_pad_square_noop_and_error():
    t = np.random.default_rng(6).uniform(size=(4, 4, 2))
    np.testing.assert_array_equal(pad_to_square(t, 4), t)
    with pytest.raises(ShapeError):
        pad_to_square(t, 3)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 3)),
              elements=st.floats(0, 255)))
def test_pad_unpad_round_trip(t):
    size = max(t.shape[:2]) + 2
    np.testing.assert_array_equal(unpad(pad_to_square(t, size), *t.shape[:2]), t)


def test_activity_mask_all_zero():
    assert not activity_mask([np.zeros((3, 3, 8))]).any()


def test_activity_mask_single_volume_cell():
    f = np.zeros((3, 3, 8))
    f[0, 0, 0] = 5  # NE volume
    mask = activity_mask([f])
    expected = np.zeros_like(mask)
    expected[0, 0, 0] = expected[0, 0, 1] = True
    np.testing.assert_array_equal(mask, expected)


def _mask_oracle(frames, layout):
    t, h, w, c = frames.shape
    out = np.zeros((h, w, c), dtype=bool)
    for i in range(h):
        for j in range(w):
            for vol, spd in zip(layout.volume_channel_indices, layout.speed_channel_indices):
                active = False
                for k in range(t):
                    if frames[k, i, j, vol] != 0:
                        active = True
                out[i, j, vol] = out[i, j, spd] = active
    return out


@pytest.mark.parametrize("seed", range(5))
def test_activity_mask_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 17, size=2)
    frames = rng.uniform(0, 255, size=(3, h, w, 8)) * (rng.uniform(size=(3, h, w, 8)) < 0.2)
    np.testing.assert_array_equal(activity_mask(frames, DEFAULT_LAYOUT), _mask_oracle(frames, DEFAULT_LAYOUT))


def test_activity_mask_speed_follows_volume():
    frames = np.zeros((2, 2, 2, 8))
    frames[1, 1, 1, 3] = 100  # speed without volume stays inactive
    assert not activity_mask(frames).any()


def test_activity_mask_empty_errors():
    with pytest.raises(ValueError):
        activity_mask([])


def test_layout_validation():
    with pytest.raises(ValueError):
        ChannelLayout((0, 1), (1, 2))
    with pytest.raises(ValueError):
        ChannelLayout((0, 1), (2,))
    custom = ChannelLayout((0, 1, 2, 3), (4, 5, 6, 7))
    assert custom.n_directions == 4 and custom.n_channels == 8


def test_stack_frames_order():
    x = np.arange(12 * 2 * 2 * 3).reshape(12, 2, 2, 3)
    s = stack_frames(x)
    assert s.shape == (2, 2, 36)
    assert s[1, 0, 3 * 5 + 2] == x[5, 1, 0, 2]


def test_sample_sequence_offsets():
    frames = np.arange(40.0)[:, None, None, None] * np.ones((40, 1, 1, 1))
    s = SampleSequence(frames, start=3)
    assert s.inputs[:, 0, 0, 0].tolist() == list(range(3, 15))
    assert s.targets[:, 0, 0, 0].tolist() == [15, 16, 17, 20, 23, 26]
    assert s.target()[0, 0, 0] == 26
    with pytest.raises(ValueError):
        SampleSequence(frames, start=17)


def test_check_grid():
    check_grid(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        check_grid(np.full((2, 2, 1), 256.0))
    with pytest.raises(ShapeError):
        check_grid(np.zeros((2, 2)))
