"""Procedural object masks and their slip annotations.

Masks stand in for segmentation output. Each object class has one annotation
rule: books slip at the top-right corner along the inward diagonal, shirts at
the collar midpoint, pancakes at the rim point nearest the top-right.
Directions are orientations in degrees (image y axis pointing up), taken
modulo 180 and binned into 12 bins of 15 degrees starting at -90.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .error_types import ContractViolation

logger = logging.getLogger(__name__)

OBJECT_KINDS = ('book', 'shirt', 'pancake')
NUM_BINS = 12
BIN_WIDTH = 15.0
BIN_START = -90.0

# local half extents in pixels at scale 1
BOOK_HALF = (36.0, 26.0)
SHIRT_BODY = (16.0, -26.0, 14.0)   # half width, bottom, top
SHIRT_SLEEVES = (30.0, 2.0, 14.0)  # half width, bottom, top
SHIRT_NECK_RADIUS = 5.0
PANCAKE_RADIUS = 24.0
INWARD_PX = 1.5


def wrap_direction(angle: float) -> float:
    """Wraps an orientation into [-90, 90)"""
    return (float(angle) + 90.0) % 180.0 - 90.0


def bin_angle(b: int) -> float:
    if not 0 <= b < NUM_BINS:
        raise ContractViolation(f"rotation bin {b} outside [0, {NUM_BINS - 1}]")
    return BIN_START + BIN_WIDTH * b


def direction_to_bin(angle: float) -> int:
    position = (wrap_direction(angle) - BIN_START) / BIN_WIDTH
    return int(math.floor(position + 0.5)) % NUM_BINS


def bin_distance(a: int, b: int) -> int:
    """Circular distance between two bins"""
    d = abs(a - b) % NUM_BINS
    return min(d, NUM_BINS - d)


@dataclass(frozen=True)
class ObjectPose:
    cu: float
    cv: float
    angle: float = 0.0  # degrees, counter-clockwise as seen from above
    scale: float = 1.0

    def to_image(self, lx: float, ly: float) -> Tuple[float, float]:
        """Object-frame point (y up) to image (u, v)"""
        c, s = math.cos(math.radians(self.angle)), math.sin(math.radians(self.angle))
        return self.cu + lx * c - ly * s, self.cv - (lx * s + ly * c)

    def to_object(self, du: np.ndarray, dv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Image offsets from the pose centre to object-frame coordinates"""
        c, s = math.cos(math.radians(self.angle)), math.sin(math.radians(self.angle))
        dx, dy = du, -dv
        return dx * c + dy * s, -dx * s + dy * c


@dataclass
class SlipSample:
    """One annotated mask.

    Attributes:
        mask: uint8 image, 1 on the object
        pixel: annotated slip point (u, v)
        bin: annotated rotation bin
        kind: object class
    """
    mask: np.ndarray
    pixel: Tuple[int, int]
    bin: int
    kind: str

    def validate(self) -> None:
        u, v = self.pixel
        h, w = self.mask.shape
        if not (0 <= u < w and 0 <= v < h) or not self.mask[v, u]:
            raise ContractViolation(f"annotated pixel {self.pixel} is not on the {self.kind} mask")
        if not 0 <= self.bin < NUM_BINS:
            raise ContractViolation(f"annotated bin {self.bin} outside [0, {NUM_BINS - 1}]")


def draw_mask(kind: str, pose: ObjectPose, shape: Tuple[int, int]) -> np.ndarray:
    """Rasterises the silhouette of an object class at a pose"""
    h, w = shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    lx, ly = pose.to_object(uu - pose.cu, vv - pose.cv)
    lx, ly = lx / pose.scale, ly / pose.scale
    if kind == 'book':
        inside = (np.abs(lx) <= BOOK_HALF[0]) & (np.abs(ly) <= BOOK_HALF[1])
    elif kind == 'shirt':
        body = (np.abs(lx) <= SHIRT_BODY[0]) & (ly >= SHIRT_BODY[1]) & (ly <= SHIRT_BODY[2])
        sleeves = (np.abs(lx) <= SHIRT_SLEEVES[0]) & (ly >= SHIRT_SLEEVES[1]) & (ly <= SHIRT_SLEEVES[2])
        neck = lx ** 2 + (ly - SHIRT_BODY[2]) ** 2 < SHIRT_NECK_RADIUS ** 2
        inside = (body | sleeves) & ~neck
    elif kind == 'pancake':
        inside = lx ** 2 + ly ** 2 <= PANCAKE_RADIUS ** 2
    else:
        raise ContractViolation(f"unknown object kind '{kind}', expected one of {OBJECT_KINDS}")
    return inside.astype(np.uint8)


def annotate(kind: str, pose: ObjectPose) -> Tuple[float, float, float]:
    """Returns the annotated slip point (u, v) and slip direction in degrees"""
    if kind == 'book':
        u, v = pose.to_image(BOOK_HALF[0] * pose.scale - INWARD_PX, BOOK_HALF[1] * pose.scale - INWARD_PX)
        return u, v, wrap_direction(45.0 + pose.angle)
    if kind == 'shirt':
        collar = (SHIRT_BODY[2] - SHIRT_NECK_RADIUS) * pose.scale - INWARD_PX
        u, v = pose.to_image(0.0, collar)
        return u, v, wrap_direction(-90.0 + pose.angle)
    if kind == 'pancake':
        reach = PANCAKE_RADIUS * pose.scale - INWARD_PX
        diagonal = math.radians(45.0)
        return pose.cu + reach * math.cos(diagonal), pose.cv - reach * math.sin(diagonal), 45.0
    raise ContractViolation(f"unknown object kind '{kind}', expected one of {OBJECT_KINDS}")


def annotated_pixel(kind: str, pose: ObjectPose) -> Tuple[int, int]:
    u, v, _ = annotate(kind, pose)
    return int(math.floor(u + 0.5)), int(math.floor(v + 0.5))


def random_pose(rng: np.random.Generator, shape: Tuple[int, int], shift_px: float = 8.0,
                angle_deg: float = 10.0, scale: float = 0.05) -> ObjectPose:
    h, w = shape
    return ObjectPose(
        cu=(w - 1) / 2.0 + rng.uniform(-shift_px, shift_px),
        cv=(h - 1) / 2.0 + rng.uniform(-shift_px, shift_px),
        angle=rng.uniform(-angle_deg, angle_deg),
        scale=1.0 + rng.uniform(-scale, scale),
    )


def synthesize_sample(kind: str, pose: ObjectPose, shape: Tuple[int, int]) -> SlipSample:
    _, _, direction = annotate(kind, pose)
    sample = SlipSample(
        mask=draw_mask(kind, pose, shape),
        pixel=annotated_pixel(kind, pose),
        bin=direction_to_bin(direction),
        kind=kind,
    )
    sample.validate()
    return sample


def base_samples(rng: np.random.Generator, shape: Tuple[int, int], per_kind: int = 4,
                 kinds: Optional[Tuple[str, ...]] = None) -> List[SlipSample]:
    """A handful of annotated masks per class, the seed set for augmentation"""
    samples = []
    for kind in kinds or OBJECT_KINDS:
        for _ in range(per_kind):
            samples.append(synthesize_sample(kind, random_pose(rng, shape), shape))
    return samples
