"""Shared domain types, action-grid codecs and the auxiliary-state encoding.

Every other module speaks in these types. All of them are immutable values, so
they can be handed between environment workers without copying.
"""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product
from typing import Iterator, Optional, Tuple

import numpy as np

from .error_types import ContractViolation

VIS_SHAPE = (40, 40)
TOUCH_SHAPE = (25, 25, 3)
PRO_SIZE = 6
AUX_SIZE = 2


class Granularity(str, Enum):
    COARSE = 'Coarse'
    FINE = 'Fine'
    # full-range grid used when the outer loop is disabled
    SINGLE = 'Single'


class Stage(str, Enum):
    OUTER = 'Outer'
    INNER = 'Inner'


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass(frozen=True)
class Observation:
    """One multisensory reading taken after a slip motion.

    Attributes:
        vis: 40x40 depth crop around the slip point (meters)
        ind: 25x25x3 index-finger deformation field (mm per taxel)
        thu: 25x25x3 thumb deformation field (mm per taxel)
        pro: wrist forces (N) and torques (N*m)
        aux: (selection code, stage flag)
        degenerate: the slip missed the object and nothing was touched
    """
    vis: np.ndarray
    ind: np.ndarray
    thu: np.ndarray
    pro: np.ndarray
    aux: np.ndarray = field(default_factory=lambda: np.zeros(AUX_SIZE))
    degenerate: bool = False

    def validate(self) -> None:
        """Checks shapes, finiteness and the aux conventions"""
        expected = {
            'vis': VIS_SHAPE,
            'ind': TOUCH_SHAPE,
            'thu': TOUCH_SHAPE,
            'pro': (PRO_SIZE,),
            'aux': (AUX_SIZE,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ContractViolation(f"Observation.{name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ContractViolation(f"Observation.{name} contains non-finite entries")
        selection, flag = float(self.aux[0]), float(self.aux[1])
        if flag not in (0.0, 1.0):
            raise ContractViolation(f"aux stage flag must be 0 or 1, got {flag}")
        if flag == 0.0 and selection != 0.0:
            raise ContractViolation(f"outer-stage aux must carry selection 0, got {selection}")

    def with_aux(self, aux: np.ndarray) -> 'Observation':
        return replace(self, aux=np.asarray(aux, dtype=np.float64))


@dataclass(frozen=True)
class AxisRange:
    min: float
    max: float
    count: int

    @property
    def step(self) -> float:
        return (self.max - self.min) / (self.count - 1)

    def value(self, index: int) -> float:
        return self.min + index * self.step

    def values(self) -> np.ndarray:
        return np.array([self.value(i) for i in range(self.count)])


@dataclass(frozen=True)
class ActionGrid:
    """Evenly spaced (x mm, z mm, theta deg) grid, endpoints included"""
    x: AxisRange
    z: AxisRange
    theta: AxisRange
    granularity: Granularity

    def __post_init__(self):
        for name, axis in zip(('x', 'z', 'theta'), self.axes):
            if axis.count < 2:
                raise ContractViolation(f"grid axis {name} needs at least 2 values, got {axis.count}")
            if axis.max <= axis.min:
                raise ContractViolation(f"grid axis {name} has empty range [{axis.min}, {axis.max}]")

    @property
    def axes(self) -> Tuple[AxisRange, AxisRange, AxisRange]:
        return (self.x, self.z, self.theta)

    @property
    def counts(self) -> Tuple[int, int, int]:
        return tuple(axis.count for axis in self.axes)

    @property
    def size(self) -> int:
        return self.x.count * self.z.count * self.theta.count

    def indices(self) -> Iterator[Tuple[int, int, int]]:
        """All index triples in lexicographic order"""
        return product(*(range(c) for c in self.counts))

    def values(self, dim: int) -> np.ndarray:
        return self.axes[dim].values()

    def encode(self, action: 'PhysicalAction', tol: float = 1e-9) -> 'InnerAction':
        return encode_action(self, action, tol)


@dataclass(frozen=True)
class InnerAction:
    ix: int
    iz: int
    itheta: int
    omega: bool = True

    @property
    def indices(self) -> Tuple[int, int, int]:
        return (self.ix, self.iz, self.itheta)


@dataclass(frozen=True)
class OuterAction:
    selection: Granularity


@dataclass(frozen=True)
class PhysicalAction:
    x: float  # mm along alpha
    z: float  # mm along gamma
    theta: float  # degrees about beta
    omega: bool = True


FINE_GRID = ActionGrid(
    x=AxisRange(-7.5, 7.5, 4),
    z=AxisRange(-3.0, 3.0, 7),
    theta=AxisRange(0.0, 3.0, 4),
    granularity=Granularity.FINE,
)

COARSE_GRID = ActionGrid(
    x=AxisRange(-18.7, 18.7, 4),
    z=AxisRange(-7.5, 7.5, 7),
    theta=AxisRange(0.0, 7.5, 4),
    granularity=Granularity.COARSE,
)

SINGLE_GRID = replace(COARSE_GRID, granularity=Granularity.SINGLE)


def single_grid() -> ActionGrid:
    """Coarse ranges and counts under the Single tag"""
    return SINGLE_GRID


def grid_for(selection: Granularity) -> ActionGrid:
    """Returns the action grid an outer selection activates"""
    return {
        Granularity.FINE: FINE_GRID,
        Granularity.COARSE: COARSE_GRID,
        Granularity.SINGLE: SINGLE_GRID,
    }[Granularity(selection)]


def decode_action(grid: ActionGrid, a: InnerAction) -> PhysicalAction:
    """Maps grid indices to physical displacements"""
    for name, index, axis in zip(('ix', 'iz', 'itheta'), a.indices, grid.axes):
        if not 0 <= index < axis.count:
            raise ContractViolation(
                f"{name}={index} out of range for {grid.granularity.value} grid with {axis.count} values"
            )
    return PhysicalAction(
        x=grid.x.value(a.ix),
        z=grid.z.value(a.iz),
        theta=grid.theta.value(a.itheta),
        omega=a.omega,
    )


def encode_action(grid: ActionGrid, action: PhysicalAction, tol: float = 1e-9) -> InnerAction:
    """Inverse of decode_action for actions lying on grid points"""
    indices = []
    for name, value, axis in zip(('x', 'z', 'theta'), (action.x, action.z, action.theta), grid.axes):
        position = (value - axis.min) / axis.step
        index = int(round(position))
        if not 0 <= index < axis.count or abs(axis.value(index) - value) > tol:
            raise ContractViolation(f"{name}={value} is not a point of the {grid.granularity.value} grid")
        indices.append(index)
    return InnerAction(*indices, omega=action.omega)


def snap_continuous(u: float, count: int) -> int:
    """Snaps a squashed actor output in [-1, 1] to a grid index (half-up rounding)"""
    u = min(max(float(u), -1.0), 1.0)
    index = int(math.floor((u + 1.0) / 2.0 * (count - 1) + 0.5))
    return min(max(index, 0), count - 1)


_SELECTION_CODES = {
    Granularity.COARSE: -1.0,
    Granularity.FINE: 1.0,
    Granularity.SINGLE: 0.0,
}


def encode_aux(stage: Stage, selection: Optional[OuterAction] = None) -> np.ndarray:
    """Encodes the (selection code, stage flag) auxiliary pair"""
    stage = Stage(stage)
    if stage is Stage.OUTER:
        if selection is not None:
            raise ContractViolation("outer stage takes no selection")
        return np.array([0.0, 0.0])
    if selection is None:
        raise ContractViolation("inner stage requires an outer selection")
    return np.array([_SELECTION_CODES[selection.selection], 1.0])


def decode_aux(aux: np.ndarray) -> Tuple[Stage, Optional[OuterAction]]:
    """Inverse of encode_aux"""
    code, flag = float(aux[0]), float(aux[1])
    if flag == 0.0:
        return Stage.OUTER, None
    for granularity, value in _SELECTION_CODES.items():
        if value == code:
            return Stage.INNER, OuterAction(granularity)
    raise ContractViolation(f"unknown selection code {code} in aux")
