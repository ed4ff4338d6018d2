"""Mechanics experiments, ablations and the gradient suite.

Each experiment returns a plain result object; callers decide whether to write
it (heatmap matrices, reports, feature CSVs) into a run directory.
"""
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gradnet as gn
from .agent import DualLoopAgent
from .config import RunConfig, with_overrides
from .core import (AUX_SIZE, COARSE_GRID, FINE_GRID, PRO_SIZE, TOUCH_SHAPE, VIS_SHAPE, Granularity, InnerAction,
                   PhysicalAction, Stage, decode_action, encode_aux, grid_for)
from .error_types import ConfigValidationError, ErrorRecord, LayerGraspError, TrainingFailure, UnsupportedModeError
from .formats import write_features, write_heatmap
from .fusion import AblationMode, LatentSet, MultisensoryEncoder, export_features as encode_features
from .harness import EvaluationResult, evaluate, greedy_policy, make_planner, train_run
from .simenv import (MaterialProfile, contact_force, execute_slip, expected_success, make_scenario, oracle_best,
                     recycle, reset, step, success_given)
from .report_generator import ReportGenerator
from .utils import atomic_write, ensure_directory

logger = logging.getLogger(__name__)

HEATMAP_CELLS = 6
HEATMAP_CELL_CM = 1.0
HEATMAP_TRIALS = 100
COMPLIANCE_STEP_MM = 0.5
COMPLIANCE_MAX_MM = 18.0
DEFAULT_TILTS = (0.0, 30.0, 60.0)
ABLATION_REPORT = 'ablation_report'


def _material(config: RunConfig, name: str) -> MaterialProfile:
    if name not in config.sim.materials:
        raise ConfigValidationError('material',
                                    f"unknown material '{name}', expected one of {sorted(config.sim.materials)}")
    return config.sim.materials[name]


# offset heatmap

@dataclass
class HeatmapResult:
    """Success per (alpha_off, beta_off) cell; rows index alpha, columns beta"""
    material: str
    action: PhysicalAction
    offsets: np.ndarray
    values: np.ndarray
    diagonal_distance: np.ndarray
    mode: str

    def argmax_cell(self) -> Tuple[int, int]:
        i, j = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(i), int(j)

    def edge_distance(self) -> float:
        """Distance of the best cell from the corner edge along the diagonal (cm)"""
        i, j = self.argmax_cell()
        return float((self.offsets[i] + self.offsets[j]) / math.sqrt(2.0))

    def diagonal_ratio(self, near: float = 0.5, far: float = 2.0) -> float:
        on = self.values[self.diagonal_distance <= near]
        off = self.values[self.diagonal_distance >= far]
        if on.size == 0 or off.size == 0:
            raise LayerGraspError(f"heatmap has no cells within {near} cm or beyond {far} cm of the diagonal")
        off_mean = float(off.mean())
        return float('inf') if off_mean == 0.0 else float(on.mean()) / off_mean


def oracle_action(config: RunConfig, material: str, tilt: float = 0.0) -> PhysicalAction:
    """Best grid action for a material at the nominal offsets"""
    profile = _material(config, material)
    best, best_action = -1.0, None
    offsets = tuple(config.sim.nominal_offset)
    for grid in (FINE_GRID, COARSE_GRID):
        for indices in grid.indices():
            act = decode_action(grid, InnerAction(*indices))
            p = expected_success(profile, tilt, act, offsets, config.sim)
            if p > best:
                best, best_action = p, act
    return best_action


def recorded_action(agent: DualLoopAgent, config: RunConfig, scenario: str, seed: int = 0,
                    planner=None) -> PhysicalAction:
    """The greedy action the policy takes on the first observation of a scenario"""
    state = reset(make_scenario(config.sim, scenario), seed, config.sim)
    planner = planner or make_planner(config)
    obs = execute_slip(state, planner.plan(state), config.sim)
    decision = agent.act(obs, deterministic=True)
    return decode_action(decision.grid, decision.inner)


def heatmap_experiment(config: RunConfig, material: str, action: Optional[PhysicalAction] = None,
                       mode: str = 'bernoulli', trials: int = HEATMAP_TRIALS, seed: int = 0,
                       tilt: float = 0.0) -> HeatmapResult:
    """Replays one action at each 1x1 cm offset cell.

    ``bernoulli`` draws ``trials`` outcomes per cell with a fresh height error
    each; ``expected`` integrates the height error out instead.
    """
    if mode not in ('bernoulli', 'expected'):
        raise ConfigValidationError('mode', f"heatmap mode must be 'bernoulli' or 'expected', got '{mode}'")
    profile = _material(config, material)
    action = action or oracle_action(config, material, tilt)
    offsets = (np.arange(HEATMAP_CELLS) + 0.5) * HEATMAP_CELL_CM
    alpha, beta = np.meshgrid(offsets, offsets, indexing='ij')
    diagonal_distance = np.abs(alpha + action.x / 10.0 - beta) / math.sqrt(2.0)
    rng = np.random.default_rng(seed)
    values = np.zeros_like(alpha)
    for i in range(HEATMAP_CELLS):
        for j in range(HEATMAP_CELLS):
            if mode == 'expected':
                values[i, j] = expected_success(profile, tilt, action, (alpha[i, j], beta[i, j]), config.sim)
                continue
            eps = rng.normal(0.0, profile.depth_noise, trials)
            p = success_given(profile, tilt, action.x, action.z, action.theta, alpha[i, j], beta[i, j], eps,
                              config.sim)
            values[i, j] = float(np.mean(rng.random(trials) < p))
    result = HeatmapResult(material, action, offsets, values, diagonal_distance, mode)
    logger.info(f"Heatmap for {material} ({mode}): best cell {result.argmax_cell()}, max {values.max():.3f}")
    return result


# compliance sweep

@dataclass
class ComplianceResult:
    material: str
    overshoot: np.ndarray
    force: np.ndarray
    probability: np.ndarray
    p_star: float
    tolerated: float
    band: float

    @property
    def tolerated_interval(self) -> float:
        """Width of the overshoot interval with at least half the best success probability"""
        good = self.overshoot[self.probability >= 0.5 * self.p_star]
        return float(good.max() - good.min()) if good.size else 0.0


def compliance_experiment(config: RunConfig, material: str, step_mm: float = COMPLIANCE_STEP_MM,
                          max_mm: float = COMPLIANCE_MAX_MM) -> ComplianceResult:
    """Sweeps the overshoot with the height error fixed at zero.

    The lateral placement and the angle stay at the material optimum, so only
    the contact force varies along the sweep.
    """
    profile = _material(config, material)
    sim = config.sim
    overshoot = np.arange(0.0, max_mm + step_mm / 2.0, step_mm)
    force = contact_force(overshoot, sim.f_sat, sim.kappa)
    alpha0, beta0 = sim.nominal_offset
    x = 10.0 * (profile.u_opt * math.sqrt(2.0) - alpha0 - beta0)
    probability = success_given(profile, 0.0, x, overshoot, profile.theta_opt, alpha0, beta0, 0.0, sim)
    p_star = float(probability.max())
    passing = overshoot[probability >= 0.5 * p_star]
    tolerated = float(passing.max()) if passing.size and p_star > 0 else 0.0
    in_band = (overshoot >= 2 * sim.kappa) & (overshoot <= 6 * sim.kappa)
    band = float(force[in_band].max() - force[in_band].min()) if in_band.any() else 0.0
    logger.info(f"Compliance for {material}: tolerated overshoot {tolerated:.1f} mm, "
                f"force band {band:.4f} N over [2k, 6k]")
    return ComplianceResult(material, overshoot, force, np.asarray(probability, dtype=np.float64), p_star,
                            tolerated, band)


# policy statistics

def selection_stats(agent: DualLoopAgent, config: RunConfig, scenario: str, episodes: Optional[int] = None,
                    seed: int = 0, planner=None) -> Dict[str, float]:
    """Fractions of greedy outer selections"""
    if agent.mode is AblationMode.SINGLE_LOOP:
        raise UnsupportedModeError("selection statistics need a dual-loop checkpoint, got SL")
    result = evaluate(config, scenario, episodes, seed, agent=agent, planner=planner)
    total = sum(result.selections.values())
    return {
        'coarse': result.selections.get(Granularity.COARSE.value.lower(), 0) / total,
        'fine': result.selections.get(Granularity.FINE.value.lower(), 0) / total,
    }


def tilt_sweep(agent: DualLoopAgent, config: RunConfig, scenario: str, tilts: Sequence[float] = DEFAULT_TILTS,
               episodes: Optional[int] = None, seed: int = 0, planner=None) -> Dict[float, EvaluationResult]:
    return {float(t): evaluate(config, scenario, episodes, seed, agent=agent, planner=planner, tilt=t) for t in tilts}


def generalization_table(agent: DualLoopAgent, config: RunConfig, scenarios: Sequence[str],
                         episodes: Optional[int] = None, seed: int = 0, planner=None) -> List[EvaluationResult]:
    """Greedy evaluation of one checkpoint on each scenario, including ones it never trained on"""
    return [evaluate(config, name, episodes, seed, agent=agent, planner=planner) for name in scenarios]


def collect_features(agent: DualLoopAgent, config: RunConfig, scenarios: Sequence[str], episodes: int,
                     seed: int = 0, planner=None) -> Tuple[List[Tuple[str, str]], np.ndarray]:
    """Fused latents of greedy episodes, labelled by scenario and top-layer material"""
    planner = planner or make_planner(config)
    policy = greedy_policy(agent)
    labels, observations = [], []
    for name in scenarios:
        state = reset(make_scenario(config.sim, name), seed, config.sim)
        for _ in range(episodes):
            labels.append((name, state.top.name))
            obs = execute_slip(state, planner.plan(state), config.sim)
            observations.append(obs.with_aux(encode_aux(Stage.OUTER)))
            outer, inner = policy(state, obs)
            step(state, outer, inner, config.sim)
            if state.remaining == 0:
                recycle(state, config.sim)
    return labels, encode_features(agent.params.encoder, observations)


def export_features(agent: DualLoopAgent, config: RunConfig, scenarios: Sequence[str], episodes: int,
                    path: str, seed: int = 0, planner=None) -> str:
    labels, features = collect_features(agent, config, scenarios, episodes, seed, planner)
    write_features(path, labels, features)
    logger.info(f"Exported {len(labels)} feature rows to {path}")
    return path


def oracle_report(config: RunConfig, scenarios: Sequence[str], seed: int = 0) -> List[Dict]:
    """Oracle action and success probability on a fresh state of each scenario"""
    rows = []
    for name in scenarios:
        state = reset(make_scenario(config.sim, name), seed, config.sim)
        outer, inner, p_star = oracle_best(state, config.sim)
        act = decode_action(grid_for(outer.selection), inner)
        rows.append({
            'scenario': name,
            'material': state.top.name,
            'selection': outer.selection.value,
            'indices': list(inner.indices),
            'x_mm': act.x,
            'z_mm': act.z,
            'theta_deg': act.theta,
            'p_star': p_star,
        })
    return rows


# ablations

@dataclass
class ModeSummary:
    mode: str
    aucs: List[float] = field(default_factory=list)
    final_rates: List[float] = field(default_factory=list)
    evaluations: List[EvaluationResult] = field(default_factory=list)
    diverged: List[int] = field(default_factory=list)
    run_dirs: List[str] = field(default_factory=list)

    @property
    def median_auc(self) -> float:
        return float(np.median(self.aucs)) if self.aucs else float('nan')


@dataclass
class AblationResult:
    summaries: Dict[str, ModeSummary]
    records: List[ErrorRecord]
    report_paths: List[str] = field(default_factory=list)


def ablation_suite(config: RunConfig, modes: Sequence[str], out_dir: str, seeds: Optional[Sequence[int]] = None,
                   slip_network=None, evaluate_episodes: Optional[int] = None) -> AblationResult:
    """Trains every mode on identical seeds and budgets, evaluates greedily and writes the report"""
    if len(modes) < 2:
        raise ConfigValidationError('modes', f"an ablation needs at least two modes, got {list(modes)}")
    seeds = list(seeds if seeds is not None else config.seeds)
    ensure_directory(out_dir)
    summaries: Dict[str, ModeSummary] = {}
    records: List[ErrorRecord] = []
    for mode in modes:
        mode_config = with_overrides(config, mode=AblationMode(mode).value)
        summary = ModeSummary(mode_config.mode)
        for seed in seeds:
            run_dir = os.path.join(out_dir, mode_config.mode, f"seed{seed}")
            try:
                run = train_run(mode_config, seed, slip_network, run_dir)
            except TrainingFailure as e:
                logger.warning(f"Mode {mode_config.mode} seed {seed} did not complete: {str(e)}")
                records.append(ErrorRecord('divergence', -1, f"{mode_config.mode} seed {seed}: {str(e)}", 'high'))
                summary.diverged.append(seed)
                continue
            summary.run_dirs.append(run_dir)
            summary.aucs.append(run.log.auc())
            summary.final_rates.append(run.log.final_rate())
            records.extend(run.records)
            planner = make_planner(mode_config, slip_network)
            for scenario in mode_config.scenarios:
                summary.evaluations.append(
                    evaluate(mode_config, scenario, evaluate_episodes, seed, agent=run.agent, planner=planner)
                )
        summaries[mode_config.mode] = summary
        logger.info(f"Mode {summary.mode}: median AUC {summary.median_auc:.3f} over {len(summary.aucs)} seeds")
    result = AblationResult(summaries, records)
    text_path = os.path.join(out_dir, ABLATION_REPORT + '.txt')
    pdf_path = os.path.join(out_dir, ABLATION_REPORT + '.pdf')
    atomic_write(text_path, ReportGenerator.generate_text_report(result))
    atomic_write(pdf_path, ReportGenerator.generate_pdf_report(result))
    result.report_paths = [text_path, pdf_path]
    return result


def write_heatmap_result(result: HeatmapResult, out_dir: str) -> str:
    path = os.path.join(out_dir, f"heatmap_{result.material}.txt")
    write_heatmap(path, result.values)
    return path


# gradient suite

def _primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable, List[Tuple[int, ...]]]]:
    target = (rng.random((3, 4)) > 0.5).astype(np.float64)
    return [
        ('add', lambda a, b: gn.add(a, b), [(3, 4), (4,)]),
        ('sub', lambda a, b: gn.sub(a, b), [(3, 4), (3, 1)]),
        ('mul', lambda a, b: gn.mul(a, b), [(3, 4), (3, 4)]),
        ('neg', lambda a: gn.neg(a), [(5,)]),
        ('square', lambda a: gn.square(a), [(5,)]),
        ('minimum', lambda a, b: gn.minimum(a, b), [(6,), (6,)]),
        ('relu', lambda a: gn.relu(a), [(8,)]),
        ('tanh', lambda a: gn.tanh(a), [(8,)]),
        ('logistic', lambda a: gn.logistic(a), [(8,)]),
        ('exp', lambda a: gn.exp(a), [(8,)]),
        ('log', lambda a: gn.log(gn.square(a) + 0.5), [(8,)]),
        ('softmax', lambda a: gn.softmax(a, axis=-1), [(3, 5)]),
        ('layer_norm', lambda a, g, b: gn.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
        ('sum', lambda a: gn.sum_(a, axis=1), [(3, 4)]),
        ('mean', lambda a: gn.mean(a, axis=(0, 2)), [(2, 3, 4)]),
        ('reshape', lambda a: gn.reshape(a, (4, 3)) * np.arange(12.0).reshape(4, 3), [(3, 4)]),
        ('transpose', lambda a: gn.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
        ('concat', lambda a, b: gn.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        ('slice', lambda a: gn.slice_(a, (slice(None), slice(1, 3))), [(3, 4)]),
        ('matmul', lambda a, b: gn.matmul(a, b), [(2, 3, 4), (4, 5)]),
        ('conv2d', lambda x, w, b: gn.conv2d(x, w, b, stride=2, padding=1), [(2, 2, 7, 7), (3, 2, 3, 3), (3,)]),
        ('bilinear_upsample2x', lambda x: gn.bilinear_upsample2x(x), [(1, 2, 3, 4)]),
        ('binary_cross_entropy', lambda a: gn.binary_cross_entropy(gn.logistic(a), target, 5.0), [(3, 4)]),
        ('mha', lambda q, kv, wq, bq, wk, bk, wv, bv, wo, bo: gn.mha(q, kv, 2, wq, bq, wk, bk, wv, bv, wo, bo),
         [(2, 3, 4), (2, 5, 4), (4, 4), (4,), (4, 4), (4,), (4, 4), (4,), (4, 4), (4,)]),
    ]


def _encoder_case(seed: int, mode: AblationMode, batch: int = 1):
    encoder = MultisensoryEncoder(np.random.default_rng(seed), mode).astype(np.float64)
    flags = encoder.flags

    def build(vis, ind, thu, pro, aux):
        latents = LatentSet()
        if flags.vis:
            latents.vis = encoder.encode_vis(vis)
        if encoder.ind_encoder is not None:
            latents.ind, latents.thu = encoder.encode_touch(ind, thu)
        if flags.c:
            latents.c = encoder.cross_attend(latents.ind, latents.thu)
        if flags.pro:
            latents.pro = encoder.encode_pro(pro)
        if flags.aux:
            latents.aux = encoder.encode_aux(aux)
        return encoder.fuse_ablated(latents)

    params = encoder.parameters()
    # a strided subset reaches every submodule
    sampled = params[::max(1, len(params) // 12)]
    shapes = [(batch, *VIS_SHAPE), (batch, *TOUCH_SHAPE), (batch, *TOUCH_SHAPE), (batch, PRO_SIZE),
              (batch, AUX_SIZE)]
    return build, shapes, sampled


def gradient_suite(seed: int = 0, modes: Sequence[AblationMode] = (AblationMode.OURS,),
                   max_coords: int = 8) -> Dict[str, float]:
    """Worst relative finite-difference error per primitive and per float64 encoder"""
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, builder, shapes in _primitive_cases(rng):
        errors[name] = gn.grad_check(builder, shapes, seed=seed, max_coords=32)
    for mode in modes:
        build, shapes, params = _encoder_case(seed, AblationMode(mode))
        errors[f"encoder_{AblationMode(mode).value}"] = gn.grad_check(
            build, shapes, params, seed=seed, step=1e-6, max_coords=max_coords, skip_kinks=True
        )
    logger.info(f"Gradient suite finished in {time.perf_counter() - started:.1f}s, "
                f"worst {max(errors.values()):.2e}")
    return errors


def failing_checks(errors: Dict[str, float], primitive_tol: float = 1e-5, composite_tol: float = 1e-4) -> List[str]:
    return [name for name, error in errors.items()
            if error > (composite_tol if name.startswith('encoder_') else primitive_tol)]
