"""Seeded analytic simulator of a stack of thin deformable layers.

The simulator replaces the physical grasping cells. It renders a synthetic
mask and depth image, synthesises tactile, force/torque and visual readings
after a slip, and draws a Bernoulli single-layer-grasp outcome from a closed
form success model. All randomness comes from the state's own generator.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import special

from .core import (COARSE_GRID, FINE_GRID, TOUCH_SHAPE, VIS_SHAPE, ActionGrid, CameraIntrinsics,
                   InnerAction, Observation, OuterAction, PhysicalAction, decode_action,
                   grid_for)
from .error_types import ConfigError, ConfigValidationError, ContractViolation, EmptyStackError
from .slipdata import ObjectPose, annotate, draw_mask, random_pose
from .slipnet import SlipCommand

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaterialProfile:
    """Latent physical constants of one layer material.

    Attributes:
        thickness: layer thickness (mm)
        adhesion: base probability that layers stick together
        friction: interlayer friction coefficient
        roughness: texture frequency (cycles per tactile field)
        softness: tactile compliance in [0, 1]
        depth_noise: camera height error spread (mm)
        u_opt, s_u, s_v: position optimum along and across the corner diagonal (cm)
        f_lo, f_hi: contact force window (N)
        theta_opt, s_theta: rotation optimum (degrees)
        amplitude: peak tactile deformation (mm)
        lever: torque arm of the slip force (m)
    """
    name: str
    thickness: float
    adhesion: float
    friction: float
    roughness: float
    softness: float
    depth_noise: float
    u_opt: float
    s_u: float
    s_v: float
    f_lo: float
    f_hi: float
    theta_opt: float
    s_theta: float
    amplitude: float
    lever: float

    def validate(self, prefix: str) -> None:
        for key in ('thickness', 'depth_noise', 's_u', 's_v', 's_theta', 'roughness'):
            if getattr(self, key) <= 0:
                raise ConfigValidationError(f"{prefix}.{key}", f"must be positive, got {getattr(self, key)}")
        for key in ('adhesion', 'softness'):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigValidationError(f"{prefix}.{key}", f"must lie in [0, 1], got {getattr(self, key)}")
        if self.f_lo >= self.f_hi:
            raise ConfigValidationError(f"{prefix}.f_lo", f"must be below f_hi ({self.f_lo} >= {self.f_hi})")


@dataclass(frozen=True)
class ScenarioSpec:
    object: str
    layers: int
    materials: Tuple[str, ...]
    tilt: float = 0.0


@dataclass(frozen=True)
class CameraConfig:
    height_m: float = 0.5
    image_height: int = 96
    image_width: int = 128
    fx: float = 100.0
    fy: float = 100.0
    cx: float = 64.0
    cy: float = 48.0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.image_height, self.image_width)


@dataclass(frozen=True)
class PoseJitter:
    shift_px: float = 8.0
    angle_deg: float = 10.0
    scale: float = 0.05


@dataclass(frozen=True)
class SimConfig:
    """Simulator constants; defaults ship in the packaged scenarios file"""
    f_sat: float = 2.0
    kappa: float = 3.0
    force_window_width: float = 0.1
    c_tilt: float = 0.15
    c_force: float = 0.3
    standoff_mm: float = 3.0
    layer_force: float = 0.01
    force_noise: float = 0.02
    torque_noise: float = 0.002
    tactile_noise: float = 0.005
    thumb_gain: float = 0.6
    nominal_offset: Tuple[float, float] = (1.0, 1.0)
    slip_error_gain: float = 0.3
    table_noise_mm: float = 0.2
    quadrature_nodes: int = 64
    camera: CameraConfig = field(default_factory=CameraConfig)
    pose_jitter: PoseJitter = field(default_factory=PoseJitter)
    materials: Dict[str, MaterialProfile] = field(default_factory=dict)
    scenarios: Dict[str, ScenarioSpec] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    name: str
    object: str
    layer_count: int
    tilt: float
    materials: Tuple[MaterialProfile, ...]

    def layer_materials(self) -> List[MaterialProfile]:
        """Per-layer profiles, top first; mixed scenarios alternate"""
        return [self.materials[i % len(self.materials)] for i in range(self.layer_count)]


def make_scenario(sim: SimConfig, name: str, tilt: Optional[float] = None,
                  layers: Optional[int] = None) -> Scenario:
    if name not in sim.scenarios:
        raise ConfigError(f"unknown scenario '{name}', expected one of {sorted(sim.scenarios)}")
    spec = sim.scenarios[name]
    return Scenario(
        name=name,
        object=spec.object,
        layer_count=spec.layers if layers is None else layers,
        tilt=spec.tilt if tilt is None else float(tilt),
        materials=tuple(sim.materials[m] for m in spec.materials),
    )


@dataclass(eq=False)
class StackState:
    """Mutable episode state of one environment, owning its generator"""
    scenario: Scenario
    layers: List[MaterialProfile]
    remaining: int
    tilt: float
    height_error: float
    pose: ObjectPose
    offsets: Tuple[float, float]
    rng: np.random.Generator
    seed: int
    slip_missed: bool = False
    recycles: int = 0
    last_view: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def top(self) -> MaterialProfile:
        if self.remaining <= 0:
            raise EmptyStackError(f"{self.scenario.name}: no layers left, recycle before stepping")
        return self.layers[len(self.layers) - self.remaining]

    @property
    def height_mm(self) -> float:
        return float(sum(m.thickness for m in self.layers[len(self.layers) - self.remaining:]))


def _new_episode(state: StackState, sim: SimConfig) -> None:
    """Resamples the latent camera height error and the object pose"""
    if state.remaining > 0:
        state.height_error = float(state.rng.normal(0.0, state.top.depth_noise))
    else:
        state.height_error = 0.0
    jitter = sim.pose_jitter
    state.pose = random_pose(state.rng, sim.camera.shape, jitter.shift_px, jitter.angle_deg, jitter.scale)
    state.offsets = tuple(sim.nominal_offset)
    state.slip_missed = False
    state.last_view = None


def reset(scenario: Scenario, seed: int, sim: SimConfig) -> StackState:
    """Full stack at a fresh pose; deterministic under seed"""
    layers = scenario.layer_materials()
    state = StackState(
        scenario=scenario,
        layers=layers,
        remaining=len(layers),
        tilt=scenario.tilt,
        height_error=0.0,
        pose=ObjectPose(0.0, 0.0),
        offsets=tuple(sim.nominal_offset),
        rng=np.random.default_rng(seed),
        seed=seed,
    )
    _new_episode(state, sim)
    return state


def recycle(state: StackState, sim: SimConfig) -> StackState:
    """Restores every layer, keeping the generator stream"""
    state.remaining = len(state.layers)
    state.recycles += 1
    _new_episode(state, sim)
    logger.info(f"{state.scenario.name}: stack recycled ({state.recycles} so far)")
    return state


def render_topdown(state: StackState, sim: SimConfig) -> Tuple[np.ndarray, np.ndarray, CameraIntrinsics]:
    """Object mask and depth image (meters) from the overhead camera"""
    material = state.top
    camera = sim.camera
    mask = draw_mask(state.scenario.object, state.pose, camera.shape)
    surface = camera.height_m - state.height_mm / 1000.0
    noise = state.rng.normal(0.0, 1.0, camera.shape)
    depth = np.where(
        mask > 0,
        surface + noise * material.depth_noise / 1000.0,
        camera.height_m + noise * sim.table_noise_mm / 1000.0,
    )
    state.last_view = (mask, depth)
    return mask, depth, camera.intrinsics


def contact_force(d, f_sat: float = 2.0, kappa: float = 3.0):
    """Saturating fingertip force (N) for an overshoot d (mm)"""
    return f_sat * np.tanh(np.maximum(d, 0.0) / kappa)


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def success_given(material: MaterialProfile, tilt: float, x, z, theta, alpha_off, beta_off, eps,
                  sim: SimConfig):
    """Closed-form single-layer grasp probability; broadcasts over array arguments"""
    reach = alpha_off + np.asarray(x) / 10.0
    u = (reach + beta_off) / math.sqrt(2.0)
    v = np.abs(reach - beta_off) / math.sqrt(2.0)
    force = contact_force(np.asarray(z) - eps, sim.f_sat, sim.kappa)
    g_pos = np.exp(-(u - material.u_opt) ** 2 / (2 * material.s_u ** 2)) * np.exp(-v ** 2 / (2 * material.s_v ** 2))
    w = sim.force_window_width
    g_force = np.where(
        force > 0,
        _logistic((force - material.f_lo) / w) * _logistic((material.f_hi - force) / w),
        0.0,
    )
    g_theta = np.exp(-(np.asarray(theta) - material.theta_opt) ** 2 / (2 * material.s_theta ** 2))
    p_multi = np.clip(
        material.adhesion + sim.c_tilt * math.sin(math.radians(tilt))
        + sim.c_force * np.maximum(0.0, force - material.f_hi) / sim.f_sat,
        0.0, 1.0,
    )
    return np.clip(g_pos * g_force * g_theta * (1.0 - p_multi), 0.0, 1.0)


def success_probability(state: StackState, act: PhysicalAction, offsets: Tuple[float, float],
                        sim: SimConfig, height_error: Optional[float] = None) -> float:
    if not act.omega:
        raise ContractViolation("the gripper must close at the end of the episode")
    eps = state.height_error if height_error is None else height_error
    return float(success_given(state.top, state.tilt, act.x, act.z, act.theta,
                               offsets[0], offsets[1], eps, sim))


def height_error_nodes(material: MaterialProfile, z, sim: SimConfig,
                       span: float = 6.0) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights for the height error over the contact region.

    Only eps < z produces a contact force, so the Normal(0, depth_noise^2)
    density is integrated over [-span*sigma, min(z, span*sigma)]. That interval
    is cut where the force crosses f_lo and f_hi and each piece gets the full
    node count. ``z`` broadcasts; the trailing axis of the result holds nodes.
    """
    sigma = material.depth_noise
    lo, hi_limit = -span * sigma, span * sigma
    z = np.asarray(z, dtype=float)[..., None]
    hi = np.clip(z, lo, hi_limit)
    ratios = np.clip(np.array([material.f_lo, material.f_hi]) / sim.f_sat, 0.0, 1.0 - 1e-12)
    cuts = np.sort(np.clip(z - sim.kappa * np.arctanh(ratios), lo, hi), axis=-1)
    edges = np.concatenate([np.full_like(hi, lo), cuts, hi], axis=-1)
    a, b = edges[..., :-1, None], edges[..., 1:, None]
    x, w = np.polynomial.legendre.leggauss(sim.quadrature_nodes)
    half = 0.5 * (b - a)
    eps = 0.5 * (a + b) + half * x
    weights = half * w * np.exp(-0.5 * (eps / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    shape = eps.shape[:-2] + (-1,)
    return eps.reshape(shape), weights.reshape(shape)


def expected_success(material: MaterialProfile, tilt: float, act: PhysicalAction,
                     offsets: Tuple[float, float], sim: SimConfig) -> float:
    """Success probability with the height error integrated out"""
    eps, weights = height_error_nodes(material, act.z, sim)
    values = success_given(material, tilt, act.x, act.z, act.theta, offsets[0], offsets[1], eps, sim)
    return float(np.sum(values * weights))


def monte_carlo_success(material: MaterialProfile, tilt: float, act: PhysicalAction,
                        offsets: Tuple[float, float], sim: SimConfig, samples: int,
                        rng: np.random.Generator, stratified: bool = False) -> float:
    """Sample mean of the success probability over drawn height errors.

    With ``stratified`` one uniform is drawn inside each of ``samples`` equal
    probability strata and mapped through the normal quantile function.
    """
    if stratified:
        u = (np.arange(samples) + rng.random(samples)) / samples
        eps = material.depth_noise * special.ndtri(u)
    else:
        eps = rng.normal(0.0, material.depth_noise, samples)
    return float(np.mean(success_given(material, tilt, act.x, act.z, act.theta,
                                       offsets[0], offsets[1], eps, sim)))


def _grid_points(grid: ActionGrid) -> Tuple[List[Tuple[int, int, int]], np.ndarray]:
    indices = list(grid.indices())
    points = np.array([[grid.x.value(i), grid.z.value(j), grid.theta.value(k)] for i, j, k in indices])
    return indices, points


def oracle_best(state: StackState, sim: SimConfig,
                offsets: Optional[Tuple[float, float]] = None) -> Tuple[OuterAction, InnerAction, float]:
    """Brute force over both grids; ties keep Fine first, then lexicographic indices"""
    material = state.top
    offsets = tuple(sim.nominal_offset) if offsets is None else offsets
    candidates = []
    values = []
    for grid in (FINE_GRID, COARSE_GRID):
        indices, points = _grid_points(grid)
        eps, weights = height_error_nodes(material, points[:, 1], sim)
        p = success_given(material, state.tilt, points[:, 0:1], points[:, 1:2], points[:, 2:3],
                          offsets[0], offsets[1], eps, sim)
        values.append(np.sum(p * weights, axis=1))
        candidates.extend((grid.granularity, idx) for idx in indices)
    expected = np.concatenate(values)
    best = int(np.argmax(expected))
    granularity, (ix, iz, itheta) = candidates[best]
    logger.debug(f"Oracle for {material.name}: {granularity.value} {(ix, iz, itheta)} P*={expected[best]:.4f}")
    return OuterAction(granularity), InnerAction(ix, iz, itheta), float(expected[best])


def _tactile_field(amplitude: float, frequency: float, psi: float, phase: float,
                   noise: float, rng: np.random.Generator) -> np.ndarray:
    n = TOUCH_SHAPE[0]
    yy, xx = np.mgrid[0:n, 0:n] / float(n)
    texture = np.sin(2 * np.pi * frequency * (xx * math.cos(psi) + yy * math.sin(psi)) + phase)
    centre = (n - 1) / 2.0
    r2 = ((np.arange(n)[:, None] - centre) ** 2 + (np.arange(n)[None, :] - centre) ** 2) / centre ** 2
    dome = -amplitude * np.maximum(0.0, 1.0 - r2)
    field_ = np.stack([amplitude * texture * math.cos(psi), amplitude * texture * math.sin(psi), dome], axis=-1)
    return field_ + rng.normal(0.0, noise, TOUCH_SHAPE)


def _crop(depth: np.ndarray, u: int, v: int) -> np.ndarray:
    half_h, half_w = VIS_SHAPE[0] // 2, VIS_SHAPE[1] // 2
    padded = np.pad(depth, ((half_h, half_h), (half_w, half_w)), mode='edge')
    return padded[v:v + VIS_SHAPE[0], u:u + VIS_SHAPE[1]].copy()


def slip_offsets(state: StackState, pixel: Tuple[int, int], sim: SimConfig) -> Tuple[float, float]:
    """Converts the slip point error against the annotated point into (alpha, beta) offsets (cm)"""
    target_u, target_v, _ = annotate(state.scenario.object, state.pose)
    ex, ey = state.pose.to_object(pixel[0] - target_u, pixel[1] - target_v)
    distance_m = sim.camera.height_m - state.height_mm / 1000.0
    cm_per_px = distance_m / sim.camera.fx * 100.0
    alpha0, beta0 = sim.nominal_offset
    return (alpha0 - sim.slip_error_gain * ex * cm_per_px,
            beta0 - sim.slip_error_gain * ey * cm_per_px)


def execute_slip(state: StackState, cmd: SlipCommand, sim: SimConfig) -> Observation:
    """Synthesises the readings recorded after the slip motion"""
    if state.last_view is None:
        render_topdown(state, sim)
    mask, depth = state.last_view
    u, v = cmd.pixel
    h, w = mask.shape
    if not (0 <= u < w and 0 <= v < h):
        raise ContractViolation(f"slip pixel {cmd.pixel} outside the {w}x{h} image")
    material = state.top
    rng = state.rng

    state.slip_missed = not bool(mask[v, u])
    if state.slip_missed:
        logger.warning(f"{state.scenario.name}: slip at {cmd.pixel} missed the object")
        f0 = 0.0
    else:
        state.offsets = slip_offsets(state, cmd.pixel, sim)
        f0 = float(contact_force(sim.standoff_mm - state.height_error, sim.f_sat, sim.kappa))

    amplitude = material.amplitude * (f0 / sim.f_sat) * material.softness
    psi = rng.uniform(0.0, np.pi)
    phase_ind, phase_thu = rng.uniform(0.0, 2 * np.pi, 2)
    ind = _tactile_field(amplitude, material.roughness, psi, phase_ind, sim.tactile_noise, rng)
    thu = _tactile_field(sim.thumb_gain * amplitude, material.roughness, psi, phase_thu, sim.tactile_noise, rng)

    eta = rng.normal(0.0, sim.force_noise, 3)
    eta_m = rng.normal(0.0, sim.torque_noise, 3)
    theta0 = math.radians(cmd.direction)
    pro = np.array([
        material.friction * f0 + eta[0],
        eta[1],
        -f0 - sim.layer_force * state.remaining + eta[2],
        eta_m[0],
        material.lever * f0 * math.sin(theta0) + eta_m[1],
        eta_m[2],
    ])
    return Observation(vis=_crop(depth, u, v), ind=ind, thu=thu, pro=pro, degenerate=state.slip_missed)


def step(state: StackState, outer: OuterAction, inner: InnerAction,
         sim: SimConfig) -> Tuple[int, bool, StackState]:
    """One-step episode: Bernoulli reward, layer removal on success, next episode drawn"""
    if state.remaining <= 0:
        raise EmptyStackError(f"{state.scenario.name}: no layers left, recycle before stepping")
    act = decode_action(grid_for(outer.selection), InnerAction(*inner.indices, omega=True))
    if state.slip_missed:
        p = 0.0
    else:
        p = success_probability(state, act, state.offsets, sim)
    reward = int(state.rng.random() < p)
    if reward:
        state.remaining -= 1
    logger.debug(f"{state.scenario.name}: {outer.selection.value} {inner.indices} P={p:.3f} reward={reward}")
    _new_episode(state, sim)
    return reward, True, state

