"""Training loop, evaluation and the slip-network pipeline.

Environments run as workers that each own a stack state and a generator. A
round lets every worker finish one episode against the current parameters;
transitions are then pushed in environment order and the agent updates once
per transition, so runs are reproducible per seed with or without threads.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest

from .agent import Decision, DualLoopAgent, UpdateReport
from .config import RunConfig, config_hash, echo_config
from .core import Granularity, InnerAction, Observation, OuterAction, decode_action, grid_for
from .error_types import ConfigValidationError, ErrorRecord
from .formats import Checkpoint, MetricsRow, MetricsWriter, read_checkpoint, write_checkpoint
from .simenv import (SimConfig, StackState, execute_slip, expected_success, make_scenario, recycle,
                     render_topdown, reset, step)
from .slipdata import NUM_BINS, annotate, annotated_pixel, direction_to_bin
from .slipnet import (SlipCommand, SlipEvaluation, SlipNetwork, build_dataset, command_from_pixel, evaluate_slip,
                      plan_slip, train_slip)
from .utils import canonical_hash, ensure_directory

logger = logging.getLogger(__name__)

SUCCESS_WINDOW = 100
POLICY_FILE = 'policy.ckpt'
SLIP_FILE = 'slip.ckpt'
METRICS_FILE = 'metrics.csv'

Policy = Callable[[StackState, Observation], Tuple[OuterAction, InnerAction]]


# slip planning

def slip_identity(image_shape: Tuple[int, int]) -> str:
    return canonical_hash({'image_shape': list(image_shape), 'bins': NUM_BINS})


def save_slip_network(network: SlipNetwork, path: str) -> None:
    checkpoint = Checkpoint(slip_identity(network.image_shape), 'slip', 'slip', network.state_dict())
    write_checkpoint(path, checkpoint)
    logger.info(f"Saved slip network to {path}")


def load_slip_network(path: str, image_shape: Tuple[int, int]) -> SlipNetwork:
    checkpoint = read_checkpoint(path, kind='slip', expected_hash=slip_identity(image_shape))
    network = SlipNetwork(np.random.default_rng(0), image_shape)
    network.load_state_dict(checkpoint.tensors)
    return network


class NetworkSlipPlanner:
    """Slip point and direction from the affordance network"""

    def __init__(self, network: SlipNetwork, sim: SimConfig):
        self.network = network
        self.sim = sim

    def plan(self, state: StackState) -> SlipCommand:
        mask, depth, intrinsics = render_topdown(state, self.sim)
        return plan_slip(self.network, mask, depth, intrinsics)


class AnnotatedSlipPlanner:
    """Slip at the ground-truth annotation; isolates the dual-loop agent from slip errors"""

    def __init__(self, sim: SimConfig):
        self.sim = sim

    def plan(self, state: StackState) -> SlipCommand:
        _, depth, intrinsics = render_topdown(state, self.sim)
        _, _, direction = annotate(state.scenario.object, state.pose)
        pixel = annotated_pixel(state.scenario.object, state.pose)
        return command_from_pixel(pixel, direction_to_bin(direction), depth, intrinsics)


def make_planner(config: RunConfig, slip_network: Optional[SlipNetwork] = None):
    if config.slip.planner == 'annotated':
        return AnnotatedSlipPlanner(config.sim)
    if slip_network is None:
        if config.slip.checkpoint is None:
            raise ConfigValidationError('slip.checkpoint',
                                        "a trained slip network is required when slip.planner is 'network'")
        if not os.path.exists(config.slip.checkpoint):
            raise ConfigValidationError('slip.checkpoint', f"file not found: {config.slip.checkpoint}")
        slip_network = load_slip_network(config.slip.checkpoint, config.sim.camera.shape)
    return NetworkSlipPlanner(slip_network, config.sim)


@dataclass
class SlipFitResult:
    network: SlipNetwork
    evaluation: SlipEvaluation
    epoch_losses: List[float]
    steps: int
    checkpoint_path: Optional[str] = None


def fit_slip_network(config: RunConfig, seed: int, out_dir: Optional[str] = None,
                     samples: Optional[Sequence] = None) -> SlipFitResult:
    """Builds (or takes) an augmented dataset, trains on the training split and scores the held-out split"""
    slip = config.slip
    rng = np.random.default_rng(seed)
    shape = config.sim.camera.shape
    if samples is None:
        samples = build_dataset(slip.samples, rng, shape, max_attempts=slip.augment_attempts)
    order = rng.permutation(len(samples))
    held = int(round(len(samples) * slip.holdout))
    holdout = [samples[i] for i in order[:held]]
    training = [samples[i] for i in order[held:]]
    logger.info(f"Training slip network on {len(training)} samples, {len(holdout)} held out")
    result = train_slip(training, slip.epochs, slip.lr, slip.batch_size, slip.positive_weight,
                        seed=seed, max_steps=slip.max_steps)
    evaluation = evaluate_slip(result.network, holdout or training)
    logger.info(f"Slip evaluation: {evaluation.summary()}")
    fit = SlipFitResult(result.network, evaluation, result.epoch_losses, result.steps)
    if out_dir is not None:
        fit.checkpoint_path = os.path.join(out_dir, SLIP_FILE)
        save_slip_network(result.network, fit.checkpoint_path)
    return fit


# metrics

@dataclass
class MetricsLog:
    """Per-episode rows in completion order with a running success rate"""
    window: int = SUCCESS_WINDOW
    rows: List[MetricsRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def running_rate(self, reward: int) -> float:
        recent = [r.reward for r in self.rows[-(self.window - 1):]] if self.window > 1 else []
        recent.append(reward)
        return float(np.mean(recent))

    def append(self, episode: int, env_id: int, scenario: str, decision_selection: Granularity,
               action: Tuple[float, float, float], reward: int, report: UpdateReport) -> MetricsRow:
        row = MetricsRow(
            episode=episode,
            env_id=env_id,
            scenario=scenario,
            selection=decision_selection.value.lower(),
            x_mm=action[0],
            z_mm=action[1],
            theta_deg=action[2],
            reward=int(reward),
            success_rate_100=self.running_rate(reward),
            critic_loss=report.critic_loss,
            actor_loss=report.actor_loss,
        )
        self.rows.append(row)
        return row

    def success_curve(self) -> np.ndarray:
        return np.array([r.success_rate_100 for r in self.rows])

    def auc(self) -> float:
        """Area under the running success curve, normalised by episode count"""
        curve = self.success_curve()
        return float(curve.mean()) if curve.size else 0.0

    def final_rate(self) -> float:
        return self.rows[-1].success_rate_100 if self.rows else 0.0


# environment workers

@dataclass
class EpisodeOutcome:
    env_id: int
    episode: int
    scenario: str
    decision: Decision
    action: Tuple[float, float, float]
    reward: int
    records: List[ErrorRecord] = field(default_factory=list)


class EnvironmentWorker:
    """One simulated stack with its own generators"""

    def __init__(self, env_id: int, scenario_name: str, seed: int, config: RunConfig, planner):
        self.env_id = env_id
        self.sim = config.sim
        self.planner = planner
        scenario = make_scenario(config.sim, scenario_name)
        self.state = reset(scenario, seed * 1000 + env_id, config.sim)
        self.rng = np.random.default_rng([seed, env_id, 1])

    @property
    def scenario(self) -> str:
        return self.state.scenario.name

    def observe(self) -> Observation:
        return execute_slip(self.state, self.planner.plan(self.state), self.sim)

    def run_episode(self, agent: DualLoopAgent, episode: int, deterministic: bool = False) -> EpisodeOutcome:
        records = []
        obs = self.observe()
        if obs.degenerate:
            records.append(ErrorRecord('degenerate_slip', episode, "slip missed the object", 'medium', self.env_id))
        decision = agent.act(obs, self.rng, deterministic)
        physical = decode_action(decision.grid, decision.inner)
        reward, _, _ = step(self.state, decision.outer, decision.inner, self.sim)
        if self.state.remaining == 0:
            recycle(self.state, self.sim)
            records.append(ErrorRecord('recycle', episode, f"{self.scenario} stack restored", 'low', self.env_id))
        return EpisodeOutcome(self.env_id, episode, self.scenario, decision,
                              (physical.x, physical.z, physical.theta), reward, records)


@dataclass
class TrainingResult:
    run_dir: str
    checkpoint_path: str
    metrics_path: str
    agent: DualLoopAgent
    log: MetricsLog
    records: List[ErrorRecord]


def run_directory(config: RunConfig, seed: int) -> str:
    return os.path.join(config.output_root_resolved(), f"{config_hash(config)[:12]}-seed{seed}")


def train_run(config: RunConfig, seed: int = 0, slip_network: Optional[SlipNetwork] = None,
              run_dir: Optional[str] = None) -> TrainingResult:
    """Trains one seed and writes config echo, metrics and the policy checkpoint into the run directory"""
    planner = make_planner(config, slip_network)
    run_dir = run_dir or run_directory(config, seed)
    ensure_directory(run_dir)
    echo_config(config, run_dir)
    agent = DualLoopAgent(config, seed)
    workers = [EnvironmentWorker(i, config.scenarios[i % len(config.scenarios)], seed, config, planner)
               for i in range(config.num_envs)]
    log = MetricsLog()
    records: List[ErrorRecord] = []
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    sequential = config.deterministic or config.num_envs == 1
    rounds = math.ceil(config.episodes / config.num_envs)
    logger.info(f"Training {config.mode} seed {seed} for {config.episodes} episodes on {list(config.scenarios)} "
                f"({'sequential' if sequential else f'{config.num_envs} threads'})")

    pool = None if sequential else ThreadPoolExecutor(max_workers=config.num_envs)
    try:
        with MetricsWriter(metrics_path) as writer:
            for r in range(rounds):
                active = [(w, r * config.num_envs + w.env_id) for w in workers
                          if r * config.num_envs + w.env_id < config.episodes]
                if pool is None:
                    outcomes = [w.run_episode(agent, episode) for w, episode in active]
                else:
                    outcomes = list(pool.map(lambda job: job[0].run_episode(agent, job[1]), active))
                for outcome in outcomes:
                    agent.remember(outcome.decision, outcome.reward, outcome.env_id, outcome.episode)
                    report = agent.update()
                    row = log.append(outcome.episode, outcome.env_id, outcome.scenario,
                                     outcome.decision.outer.selection, outcome.action, outcome.reward, report)
                    writer.write(row)
                    records.extend(outcome.records)
                    if (outcome.episode + 1) % config.log_every == 0:
                        logger.info(f"Episode {outcome.episode + 1}: success rate {row.success_rate_100:.3f}, "
                                    f"critic {row.critic_loss:.4f}, actor {row.actor_loss:.4f}")
    except Exception as e:
        logger.error(f"Training run in {run_dir} failed: {str(e)}", exc_info=True)
        raise
    finally:
        if pool is not None:
            pool.shutdown()

    checkpoint_path = os.path.join(run_dir, POLICY_FILE)
    agent.save(checkpoint_path)
    logger.info(f"Run {run_dir} finished: final success rate {log.final_rate():.3f}, AUC {log.auc():.3f}, "
                f"{len(records)} anomalies")
    return TrainingResult(run_dir, checkpoint_path, metrics_path, agent, log, records)


# evaluation

@dataclass
class EvaluationResult:
    scenario: str
    episodes: int
    successes: int
    ci_low: float
    ci_high: float
    selections: Dict[str, int] = field(default_factory=dict)
    expected: float = float('nan')

    @property
    def rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    def to_dict(self) -> Dict:
        return {
            'scenario': self.scenario,
            'episodes': self.episodes,
            'successes': self.successes,
            'rate': self.rate,
            'ci_low': self.ci_low,
            'ci_high': self.ci_high,
            'selections': dict(self.selections),
            'expected': self.expected,
        }


def greedy_policy(agent: DualLoopAgent) -> Policy:
    def act(state: StackState, obs: Observation) -> Tuple[OuterAction, InnerAction]:
        decision = agent.act(obs, deterministic=True)
        return decision.outer, decision.inner
    return act


def evaluate(config: RunConfig, scenario: str, episodes: Optional[int] = None, seed: int = 0,
             agent: Optional[DualLoopAgent] = None, policy: Optional[Policy] = None,
             planner=None, tilt: Optional[float] = None) -> EvaluationResult:
    """Success rate of a greedy policy (or an injected one) with a 95% exact binomial interval.

    ``expected`` is the mean closed-form success probability of the executed
    actions, the value the measured rate estimates.
    """
    if policy is None:
        if agent is None:
            raise ConfigValidationError('checkpoint', "evaluation needs a policy checkpoint")
        policy = greedy_policy(agent)
    episodes = episodes or config.eval_episodes
    planner = planner or make_planner(config)
    state = reset(make_scenario(config.sim, scenario, tilt=tilt), seed, config.sim)
    successes = 0
    expected = []
    selections: Dict[str, int] = {}
    for _ in range(episodes):
        obs = execute_slip(state, planner.plan(state), config.sim)
        outer, inner = policy(state, obs)
        act = decode_action(grid_for(outer.selection), inner)
        if state.slip_missed:
            expected.append(0.0)
        else:
            expected.append(expected_success(state.top, state.tilt, act, state.offsets, config.sim))
        key = outer.selection.value.lower()
        selections[key] = selections.get(key, 0) + 1
        reward, _, _ = step(state, outer, inner, config.sim)
        successes += reward
        if state.remaining == 0:
            recycle(state, config.sim)
    ci = binomtest(successes, episodes).proportion_ci(confidence_level=0.95)
    result = EvaluationResult(scenario, episodes, successes, float(ci.low), float(ci.high), selections,
                              float(np.mean(expected)))
    logger.info(f"Evaluated {scenario}: {successes}/{episodes} = {result.rate:.3f} "
                f"[{result.ci_low:.3f}, {result.ci_high:.3f}]")
    return result
