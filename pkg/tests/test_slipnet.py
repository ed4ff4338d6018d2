import numpy as np
import pytest

from layergrasp.core import CameraIntrinsics
from layergrasp.error_types import ContractViolation, InvalidDepthError
from layergrasp.slipdata import NUM_BINS, ObjectPose, SlipSample, synthesize_sample
from layergrasp.slipnet import (IMAGE_SHAPE, AffordanceStack, AnnotationOffImage, SlipNetwork, apply_transform,
                                augment, build_dataset, command_from_pixel, disk_mask, evaluate_slip, forward,
                                make_label, pixel_to_3d, predict_pixel, rotate_all, rotate_mask, select, to_original,
                                to_rotated, train_slip, unrotate_mask)

INTRINSICS = CameraIntrinsics(100.0, 100.0, 64.0, 48.0)


@pytest.fixture
def book_sample():
    return synthesize_sample('book', ObjectPose(63.5, 47.5, angle=5.0), IMAGE_SHAPE)


@pytest.mark.parametrize("b", [0, 3, 7, 11])
def test_rotated_frame_round_trip(b):
    pixel = (70.0, 30.0)
    np.testing.assert_allclose(to_original(to_rotated(pixel, b), b), pixel, atol=1e-9)


def test_rotation_keeps_the_object_in_frame(book_sample):
    for b in range(NUM_BINS):
        rotated = rotate_mask(book_sample.mask, b)
        assert rotated.sum() > 0.25 * book_sample.mask.sum()
        assert not rotated[0].any() and not rotated[-1].any()


def test_unrotate_mask_recovers_most_pixels(book_sample):
    restored = unrotate_mask(rotate_mask(book_sample.mask, 4), 4)
    overlap = (restored & book_sample.mask).sum() / book_sample.mask.sum()
    assert overlap > 0.8


def test_network_output_shape_and_range(rng, book_sample):
    network = SlipNetwork(rng)
    stack = forward(network, rotate_all(book_sample.mask))
    assert stack.values.shape == (NUM_BINS,) + IMAGE_SHAPE
    assert np.all((stack.values > 0) & (stack.values < 1))
    with pytest.raises(ContractViolation):
        forward(network, np.zeros((NUM_BINS, 64, 64)))
    with pytest.raises(ContractViolation):
        SlipNetwork(rng, (90, 128))


def test_select_breaks_ties_low():
    values = np.zeros((3, 4, 5))
    values[1, 2, 3] = 1.0
    values[2, 0, 0] = 1.0
    assert select(AffordanceStack(values)) == ((3, 2), 1)
    values[0, 0, 0] = np.nan
    with pytest.raises(ContractViolation):
        select(AffordanceStack(values))


def test_pixel_to_3d():
    depth = np.full(IMAGE_SHAPE, 0.5)
    x, y, z = pixel_to_3d((74, 48), depth, INTRINSICS)
    assert (x, y, z) == pytest.approx((0.05, 0.0, 0.5))
    depth[10, 10] = 0.0
    with pytest.raises(InvalidDepthError):
        pixel_to_3d((10, 10), depth, INTRINSICS)
    with pytest.raises(InvalidDepthError):
        pixel_to_3d((200, 10), depth, INTRINSICS)


def test_command_carries_bin_direction():
    command = command_from_pixel((64, 48), 9, np.full(IMAGE_SHAPE, 0.4), INTRINSICS)
    assert command.direction == 45.0
    assert command.point3d == pytest.approx((0.0, 0.0, 0.4))


def test_label_marks_the_annotated_bin(book_sample):
    label = make_label(book_sample)
    assert label.shape == (NUM_BINS,) + IMAGE_SHAPE
    assert label[book_sample.bin].sum() == disk_mask(IMAGE_SHAPE, 50, 50).sum()
    assert label.sum() == label[book_sample.bin].sum()


def test_apply_transform_moves_annotation(book_sample):
    moved = apply_transform(book_sample, rotation=0.0, translation=(5.0, -3.0))
    assert moved.pixel == (book_sample.pixel[0] + 5, book_sample.pixel[1] - 3)
    assert moved.bin == book_sample.bin
    with pytest.raises(AnnotationOffImage):
        apply_transform(book_sample, translation=(200.0, 0.0))


def test_rotation_shifts_the_bin():
    mask = np.zeros(IMAGE_SHAPE, dtype=np.uint8)
    mask[20:76, 30:98] = 1
    sample = SlipSample(mask, (64, 48), 3, 'book')
    turned = apply_transform(sample, rotation=30.0)
    assert turned.bin == 5
    turned.validate()
    assert apply_transform(sample, rotation=-60.0).bin == 11


def test_augment_gives_up_after_bounded_attempts(book_sample, rng):
    with pytest.raises(AnnotationOffImage):
        augment(book_sample, rng, max_attempts=3, max_rotation=0.0, max_translation=100.0, scale_range=(1.0, 1.0))


def test_build_dataset_samples_are_valid(rng):
    dataset = build_dataset(10, rng, IMAGE_SHAPE, per_kind=1)
    assert len(dataset) == 10
    for sample in dataset:
        sample.validate()


def test_training_reduces_loss(rng):
    dataset = build_dataset(4, rng, IMAGE_SHAPE, per_kind=1)
    result = train_slip(dataset, epochs=3, lr=0.01, batch_size=2, seed=0)
    assert result.steps == 6
    assert len(result.epoch_losses) == 3
    assert result.epoch_losses[-1] < result.epoch_losses[0]


def test_training_respects_step_budget(rng):
    dataset = build_dataset(4, rng, IMAGE_SHAPE, per_kind=1)
    result = train_slip(dataset, epochs=5, batch_size=1, seed=0, max_steps=2)
    assert result.steps == 2
    assert len(result.epoch_losses) == 1


def test_evaluation_summary(rng, book_sample):
    network = SlipNetwork(rng)
    evaluation = evaluate_slip(network, [book_sample, book_sample])
    summary = evaluation.summary()
    assert summary['samples'] == 2
    assert 0.0 <= summary['pixel_within_5'] <= 1.0
    pixel, b = predict_pixel(network, book_sample.mask)
    assert 0 <= pixel[0] < IMAGE_SHAPE[1] and 0 <= pixel[1] < IMAGE_SHAPE[0] and 0 <= b < NUM_BINS


@pytest.mark.slow
def test_slip_network_localises_annotations():
    rng = np.random.default_rng(0)
    dataset = build_dataset(240, rng, IMAGE_SHAPE)
    result = train_slip(dataset[:200], epochs=8, lr=0.001, batch_size=4, seed=0)
    evaluation = evaluate_slip(result.network, dataset[200:])
    assert evaluation.pixel_within(5.0) >= 0.5
    assert evaluation.bin_within(1) >= 0.5
