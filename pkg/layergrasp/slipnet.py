"""Slip module: rotation-binned affordance maps over object masks.

Each mask is warped into 12 rotated frames, one per slip direction bin, so
that the bin's direction lies along the frame's horizontal axis. A small
fully convolutional network scores every pixel of every frame; the best
(bin, pixel) is mapped back to the camera image and back-projected to 3D.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from . import gradnet as gn
from .core import CameraIntrinsics
from .error_types import ContractViolation, InvalidDepthError, TrainingFailure
from .layers import Conv2d, Module
from .slipdata import NUM_BINS, SlipSample, base_samples, bin_angle, bin_distance, direction_to_bin

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (96, 128)
STANDOFF_MM = 3.0
LABEL_RADIUS = 3

_SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


@dataclass
class AffordanceStack:
    """Per-bin affordance maps in the rotated frames, values in [0, 1]"""
    values: np.ndarray  # (bins, H, W)

    @property
    def bins(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SlipCommand:
    pixel: Tuple[int, int]
    bin: int
    direction: float
    point3d: Tuple[float, float, float]
    standoff: float = STANDOFF_MM


class AnnotationOffImage(ContractViolation):
    """An augmentation pushed the annotated point off the image or the mask"""


def _rotation(angle_deg: float) -> np.ndarray:
    """Counter-clockwise (as displayed) rotation acting on (u, v) with v pointing down"""
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])


def _centre(shape: Tuple[int, int]) -> np.ndarray:
    h, w = shape
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


def frame_scale(shape: Tuple[int, int]) -> float:
    """Uniform shrink that keeps the padded image diagonal inside the frame"""
    h, w = shape
    return min(h, w) / math.hypot(h, w)


def bin_transform(b: int, shape: Tuple[int, int] = IMAGE_SHAPE) -> Tuple[np.ndarray, np.ndarray]:
    """Affine (A, t) taking camera pixels p to rotated-frame pixels A p + t"""
    a = frame_scale(shape) * _rotation(-bin_angle(b))
    c = _centre(shape)
    return a, c - a @ c


def _warp(image: np.ndarray, a: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Nearest-neighbour resampling of image under p -> A p + t"""
    inverse = np.linalg.inv(a)
    matrix = _SWAP @ inverse @ _SWAP
    offset = _SWAP @ (-inverse @ t)
    return ndimage.affine_transform(image, matrix, offset=offset, output_shape=image.shape,
                                    order=0, mode='constant', cval=0)


def rotate_mask(mask: np.ndarray, b: int) -> np.ndarray:
    a, t = bin_transform(b, mask.shape)
    return _warp(mask, a, t)


def unrotate_mask(rotated: np.ndarray, b: int) -> np.ndarray:
    a, t = bin_transform(b, rotated.shape)
    inverse = np.linalg.inv(a)
    return _warp(rotated, inverse, -inverse @ t)


def rotate_all(mask: np.ndarray, bins: int = NUM_BINS) -> np.ndarray:
    return np.stack([rotate_mask(mask, b) for b in range(bins)]).astype(np.uint8)


def to_rotated(pixel: Tuple[float, float], b: int, shape: Tuple[int, int] = IMAGE_SHAPE) -> np.ndarray:
    a, t = bin_transform(b, shape)
    return a @ np.asarray(pixel, dtype=np.float64) + t


def to_original(pixel: Tuple[float, float], b: int, shape: Tuple[int, int] = IMAGE_SHAPE) -> np.ndarray:
    a, t = bin_transform(b, shape)
    return np.linalg.solve(a, np.asarray(pixel, dtype=np.float64) - t)


class SlipNetwork(Module):
    """Fully convolutional scorer: two strided convs, a 1x1 head and two 2x upsamplings"""

    def __init__(self, rng: np.random.Generator, image_shape: Tuple[int, int] = IMAGE_SHAPE):
        if image_shape[0] % 4 or image_shape[1] % 4:
            raise ContractViolation(f"image shape {image_shape} must be divisible by 4")
        self.image_shape = tuple(image_shape)
        self.conv1 = Conv2d(1, 8, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(8, 16, 3, rng, stride=2, padding=1)
        self.head1 = Conv2d(16, 8, 1, rng)
        self.head2 = Conv2d(8, 1, 1, rng)

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.image_shape:
            raise ContractViolation(
                f"slip network expects (N, 1, {self.image_shape[0]}, {self.image_shape[1]}), got {x.shape}"
            )
        h = gn.relu(self.conv1(x))
        h = gn.relu(self.conv2(h))
        h = gn.relu(self.head1(h))
        h = gn.bilinear_upsample2x(h)
        h = self.head2(h)
        h = gn.bilinear_upsample2x(h)
        return gn.logistic(h)


def forward(network: SlipNetwork, masks: np.ndarray) -> AffordanceStack:
    """Scores a stack of rotated masks (bins, H, W)"""
    masks = np.asarray(masks)
    if masks.ndim != 3 or tuple(masks.shape[1:]) != network.image_shape:
        raise ContractViolation(
            f"expected rotated masks of shape (bins, {network.image_shape[0]}, {network.image_shape[1]}), "
            f"got {masks.shape}"
        )
    dtype = network.conv1.weight.dtype
    with gn.no_grad():
        out = network(gn.Tensor(masks[:, None].astype(dtype)))
    return AffordanceStack(out.data[:, 0])


def select(stack: AffordanceStack) -> Tuple[Tuple[int, int], int]:
    """Global argmax; ties go to the lowest (bin, v, u)"""
    if not np.all(np.isfinite(stack.values)):
        raise ContractViolation("affordance stack contains non-finite values")
    b, v, u = np.unravel_index(int(np.argmax(stack.values)), stack.values.shape)
    return (int(u), int(v)), int(b)


def pixel_to_3d(pixel: Tuple[int, int], depth: np.ndarray,
                intrinsics: CameraIntrinsics) -> Tuple[float, float, float]:
    """Pinhole back-projection into the camera frame (meters)"""
    u, v = pixel
    h, w = depth.shape
    if not (0 <= u < w and 0 <= v < h):
        raise InvalidDepthError(f"pixel {pixel} outside the {w}x{h} depth image")
    d = float(depth[v, u])
    if not np.isfinite(d) or d <= 0:
        raise InvalidDepthError(f"no valid depth at pixel {pixel} (got {d})")
    return ((u - intrinsics.cx) * d / intrinsics.fx, (v - intrinsics.cy) * d / intrinsics.fy, d)


def command_from_pixel(pixel: Tuple[int, int], b: int, depth: np.ndarray,
                       intrinsics: CameraIntrinsics) -> SlipCommand:
    return SlipCommand(
        pixel=(int(pixel[0]), int(pixel[1])),
        bin=b,
        direction=bin_angle(b),
        point3d=pixel_to_3d(pixel, depth, intrinsics),
    )


def predict_pixel(network: SlipNetwork, mask: np.ndarray) -> Tuple[Tuple[int, int], int]:
    """Best slip pixel in camera coordinates and its bin"""
    stack = forward(network, rotate_all(mask))
    rotated_pixel, b = select(stack)
    u, v = to_original(rotated_pixel, b, mask.shape)
    h, w = mask.shape
    u = min(max(int(math.floor(u + 0.5)), 0), w - 1)
    v = min(max(int(math.floor(v + 0.5)), 0), h - 1)
    return (u, v), b


def plan_slip(network: SlipNetwork, mask: np.ndarray, depth: np.ndarray,
              intrinsics: CameraIntrinsics) -> SlipCommand:
    pixel, b = predict_pixel(network, mask)
    logger.debug(f"Slip planned at {pixel}, bin {b}")
    return command_from_pixel(pixel, b, depth, intrinsics)


def disk_mask(shape: Tuple[int, int], u: int, v: int, radius: int = LABEL_RADIUS) -> np.ndarray:
    h, w = shape
    vv, uu = np.mgrid[0:h, 0:w]
    return (uu - u) ** 2 + (vv - v) ** 2 <= radius ** 2


def make_label(sample: SlipSample, radius: int = LABEL_RADIUS, bins: int = NUM_BINS) -> np.ndarray:
    """Target stack: a disk around the annotation in the annotated bin's frame"""
    shape = sample.mask.shape
    target = np.zeros((bins,) + shape, dtype=np.uint8)
    u, v = to_rotated(sample.pixel, sample.bin, shape)
    target[sample.bin] = disk_mask(shape, int(math.floor(u + 0.5)), int(math.floor(v + 0.5)), radius)
    return target


def apply_transform(sample: SlipSample, rotation: float = 0.0, translation: Tuple[float, float] = (0.0, 0.0),
                    scale: float = 1.0) -> SlipSample:
    """Rotates (degrees, counter-clockwise), scales about the centre, then translates"""
    shape = sample.mask.shape
    a = scale * _rotation(rotation)
    c = _centre(shape)
    t = c - a @ c + np.asarray(translation, dtype=np.float64)
    mask = _warp(sample.mask, a, t).astype(np.uint8)
    u, v = a @ np.asarray(sample.pixel, dtype=np.float64) + t
    pixel = (int(math.floor(u + 0.5)), int(math.floor(v + 0.5)))
    h, w = shape
    if not (0 <= pixel[0] < w and 0 <= pixel[1] < h) or not mask[pixel[1], pixel[0]]:
        raise AnnotationOffImage(f"annotation moved to {pixel}, off the transformed {sample.kind}")
    return SlipSample(
        mask=mask,
        pixel=pixel,
        bin=direction_to_bin(bin_angle(sample.bin) + rotation),
        kind=sample.kind,
    )


def augment(sample: SlipSample, rng: np.random.Generator, max_attempts: int = 10,
            max_rotation: float = 90.0, max_translation: float = 0.2,
            scale_range: Tuple[float, float] = (0.7, 1.3)) -> SlipSample:
    """Random rotation, translation and scaling, resampled while the annotation falls off"""
    h, w = sample.mask.shape
    for attempt in Retrying(stop=stop_after_attempt(max_attempts),
                            retry=retry_if_exception_type(AnnotationOffImage), reraise=True):
        with attempt:
            return apply_transform(
                sample,
                rotation=rng.uniform(-max_rotation, max_rotation),
                translation=(rng.uniform(-max_translation, max_translation) * w,
                             rng.uniform(-max_translation, max_translation) * h),
                scale=rng.uniform(*scale_range),
            )


def build_dataset(count: int, rng: np.random.Generator, shape: Tuple[int, int] = IMAGE_SHAPE,
                  per_kind: int = 4, max_attempts: int = 10) -> List[SlipSample]:
    """Augmented samples drawn from a small annotated seed set"""
    seeds = base_samples(rng, shape, per_kind=per_kind)
    dataset = []
    for _ in range(count):
        seed = seeds[int(rng.integers(len(seeds)))]
        dataset.append(augment(seed, rng, max_attempts=max_attempts))
    logger.info(f"Built {len(dataset)} augmented slip samples from {len(seeds)} annotated masks")
    return dataset


@dataclass
class SlipTrainingResult:
    network: SlipNetwork
    epoch_losses: List[float] = field(default_factory=list)
    steps: int = 0


def _prepare(samples: Sequence[SlipSample]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    inputs = [rotate_all(s.mask) for s in samples]
    labels = [make_label(s) for s in samples]
    return inputs, labels


def train_slip(dataset: Sequence[SlipSample], epochs: int, lr: float = 0.001, batch_size: int = 4,
               positive_weight: float = 20.0, seed: int = 0, max_steps: Optional[int] = None,
               network: Optional[SlipNetwork] = None) -> SlipTrainingResult:
    """Minimises pixelwise weighted BCE with Adam; returns the network and per-epoch mean loss"""
    if not dataset:
        raise ContractViolation("slip training needs at least one sample")
    rng = np.random.default_rng(seed)
    shape = dataset[0].mask.shape
    network = network or SlipNetwork(rng, shape)
    optimizer = gn.Adam(network.parameters(), lr)
    inputs, labels = _prepare(dataset)
    result = SlipTrainingResult(network)
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            if max_steps is not None and result.steps >= max_steps:
                break
            batch = order[start:start + batch_size]
            x = np.concatenate([inputs[i] for i in batch])[:, None].astype(np.float32)
            y = np.concatenate([labels[i] for i in batch])[:, None]
            loss = gn.binary_cross_entropy(network(gn.Tensor(x)), y, positive_weight)
            value = loss.item()
            if not np.isfinite(value):
                logger.error(f"Slip network loss became {value} at step {result.steps}")
                raise TrainingFailure("slip network loss diverged", result.steps)
            optimizer.step(gn.backward(loss, optimizer.params))
            losses.append(value)
            result.steps += 1
        if not losses:
            break
        result.epoch_losses.append(float(np.mean(losses)))
        logger.info(f"Slip epoch {epoch + 1}/{epochs}: mean BCE {result.epoch_losses[-1]:.5f}")
    return result


@dataclass
class SlipEvaluation:
    pixel_errors: np.ndarray
    bin_errors: np.ndarray

    def pixel_within(self, tolerance: float) -> float:
        return float(np.mean(self.pixel_errors <= tolerance))

    def bin_within(self, tolerance: int = 1) -> float:
        return float(np.mean(self.bin_errors <= tolerance))

    def summary(self) -> dict:
        return {
            'samples': int(self.pixel_errors.size),
            'pixel_error_median': float(np.median(self.pixel_errors)),
            'pixel_error_p90': float(np.quantile(self.pixel_errors, 0.9)),
            'pixel_within_5': self.pixel_within(5.0),
            'bin_within_1': self.bin_within(1),
        }


def evaluate_slip(network: SlipNetwork, samples: Sequence[SlipSample]) -> SlipEvaluation:
    """Pixel error in camera coordinates and circular bin error per held-out sample"""
    pixel_errors, bin_errors = [], []
    for sample in samples:
        pixel, b = predict_pixel(network, sample.mask)
        pixel_errors.append(math.hypot(pixel[0] - sample.pixel[0], pixel[1] - sample.pixel[1]))
        bin_errors.append(bin_distance(b, sample.bin))
    return SlipEvaluation(np.array(pixel_errors), np.array(bin_errors))

