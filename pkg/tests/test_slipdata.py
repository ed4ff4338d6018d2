import numpy as np
import pytest

from layergrasp.error_types import ContractViolation
from layergrasp.slipdata import (NUM_BINS, OBJECT_KINDS, ObjectPose, SlipSample, annotate, annotated_pixel,
                                 base_samples, bin_angle, bin_distance, direction_to_bin, draw_mask, random_pose,
                                 synthesize_sample, wrap_direction)

SHAPE = (96, 128)


@pytest.mark.parametrize("angle, expected", [(0.0, 0.0), (90.0, -90.0), (-90.0, -90.0), (135.0, -45.0),
                                             (-100.0, 80.0)])
def test_wrap_direction(angle, expected):
    assert wrap_direction(angle) == pytest.approx(expected)


def test_bins_cover_half_turn():
    angles = [bin_angle(b) for b in range(NUM_BINS)]
    assert angles[0] == -90.0 and angles[-1] == 75.0
    assert all(direction_to_bin(a) == b for b, a in enumerate(angles))
    assert direction_to_bin(88.0) == 0
    with pytest.raises(ContractViolation):
        bin_angle(NUM_BINS)


def test_bin_distance_is_circular():
    assert bin_distance(0, 11) == 1
    assert bin_distance(3, 9) == 6
    assert bin_distance(5, 5) == 0


def test_pose_round_trip():
    pose = ObjectPose(60.0, 50.0, angle=17.0, scale=1.1)
    u, v = pose.to_image(12.0, -4.0)
    lx, ly = pose.to_object(u - pose.cu, v - pose.cv)
    assert (lx, ly) == pytest.approx((12.0, -4.0))


@pytest.mark.parametrize("kind", OBJECT_KINDS)
def test_annotation_lies_on_mask(kind, rng):
    for _ in range(5):
        pose = random_pose(rng, SHAPE)
        mask = draw_mask(kind, pose, SHAPE)
        u, v = annotated_pixel(kind, pose)
        assert mask[v, u] == 1
        synthesize_sample(kind, pose, SHAPE).validate()


def test_book_annotation_points_along_the_corner_diagonal():
    pose = ObjectPose(63.5, 47.5)
    u, v, direction = annotate('book', pose)
    assert u > pose.cu and v < pose.cv
    assert direction == pytest.approx(45.0)


def test_unknown_kind():
    with pytest.raises(ContractViolation):
        draw_mask('cup', ObjectPose(10.0, 10.0), SHAPE)


def test_sample_validation():
    mask = np.zeros(SHAPE, dtype=np.uint8)
    mask[10:20, 10:20] = 1
    SlipSample(mask, (12, 12), 3, 'book').validate()
    with pytest.raises(ContractViolation):
        SlipSample(mask, (40, 40), 3, 'book').validate()
    with pytest.raises(ContractViolation):
        SlipSample(mask, (12, 12), NUM_BINS, 'book').validate()


def test_base_samples_per_kind(rng):
    samples = base_samples(rng, SHAPE, per_kind=2)
    assert [s.kind for s in samples] == ['book', 'book', 'shirt', 'shirt', 'pancake', 'pancake']
