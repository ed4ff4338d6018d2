"""Hierarchical dual-loop soft actor-critic.

The outer loop picks an action-space granularity, the inner loop picks grid
indices inside it. Both loops share the multisensory encoder and learn from the
same binary reward. Episodes are one step long and terminal, so the critic
target is the reward itself and no target networks are kept.
"""
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gradnet as gn
from .config import RunConfig, SACConfig
from .core import (ActionGrid, Granularity, InnerAction, Observation, OuterAction, Stage,
                   decode_aux, encode_aux, grid_for, snap_continuous)
from .error_types import ContractViolation, TrainingFailure
from .formats import Checkpoint, read_checkpoint, write_checkpoint
from .fusion import FUSED, AblationMode, LatentSet, MultisensoryEncoder, ObservationBatch
from .layers import MLP, Module
from .utils import canonical_hash

logger = logging.getLogger(__name__)

OUTER_DIM = 1
INNER_DIM = 4
SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _log_std_raw_init(log_std_min: float, log_std_max: float) -> float:
    """Raw value whose squashed log-std is zero"""
    target = (-log_std_min - log_std_max) / (log_std_max - log_std_min)
    return float(np.arctanh(np.clip(target, -0.999999, 0.999999)))


class PolicyParams(Module):
    """Shared encoder, one actor per loop with a learnable log-std, twin critics per loop.

    The single-loop ablation has no outer actor or outer critics.
    """

    def __init__(self, rng: np.random.Generator, mode: AblationMode = AblationMode.OURS, hidden: int = 64,
                 log_std_bounds: Tuple[float, float] = (-5.0, 2.0), symmetric_cross_attention: bool = False):
        self.mode = AblationMode(mode)
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        raw = _log_std_raw_init(*self.log_std_bounds)
        self.encoder = MultisensoryEncoder(rng, self.mode, symmetric_cross_attention)
        self.outer_actor = None
        self.outer_log_std = None
        self.outer_critics = None
        if self.dual_loop:
            self.outer_actor = MLP([FUSED, hidden, OUTER_DIM], rng)
            self.outer_log_std = gn.parameter(np.full(OUTER_DIM, raw))
            self.outer_critics = [MLP([FUSED + OUTER_DIM, hidden, hidden, 1], rng) for _ in range(2)]
        self.inner_actor = MLP([FUSED, hidden, INNER_DIM], rng)
        self.inner_log_std = gn.parameter(np.full(INNER_DIM, raw))
        self.inner_critics = [MLP([FUSED + INNER_DIM, hidden, hidden, 1], rng) for _ in range(2)]

    @property
    def dual_loop(self) -> bool:
        return self.mode is not AblationMode.SINGLE_LOOP

    @property
    def dtype(self):
        return self.inner_log_std.dtype

    def log_std(self, raw: gn.Tensor) -> gn.Tensor:
        low, high = self.log_std_bounds
        return (gn.tanh(raw) + 1.0) * (0.5 * (high - low)) + low

    def actor(self, stage: Stage) -> Tuple[MLP, gn.Tensor]:
        if Stage(stage) is Stage.OUTER:
            if not self.dual_loop:
                raise ContractViolation("the single-loop policy has no outer actor")
            return self.outer_actor, self.outer_log_std
        return self.inner_actor, self.inner_log_std

    def critics(self, stage: Stage) -> List[MLP]:
        return self.outer_critics if Stage(stage) is Stage.OUTER else self.inner_critics

    def critic_parameters(self) -> List[gn.Tensor]:
        params = self.encoder.parameters()
        for stage in self.stages:
            for critic in self.critics(stage):
                params.extend(critic.parameters())
        return params

    def actor_parameters(self) -> List[gn.Tensor]:
        params = []
        for stage in self.stages:
            head, raw = self.actor(stage)
            params.extend(head.parameters())
            params.append(raw)
        return params

    @property
    def stages(self) -> Tuple[Stage, ...]:
        return (Stage.OUTER, Stage.INNER) if self.dual_loop else (Stage.INNER,)


def squashed_sample(mean: gn.Tensor, log_std: gn.Tensor, noise: np.ndarray) -> Tuple[gn.Tensor, gn.Tensor]:
    """Reparameterised tanh-Gaussian sample and its log-density (B,).

    The density includes the change-of-variables term -sum log(1 - u^2 + eps).
    """
    std = gn.exp(log_std)
    u = gn.tanh(mean + std * noise)
    gaussian = gn.sub(-0.5 * noise * noise - _HALF_LOG_2PI, log_std)
    correction = gn.log(1.0 - gn.square(u) + SQUASH_EPS)
    return u, (gaussian - correction).sum(axis=-1)


def squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Numpy log-density of squashed actions u in (-1, 1), summed over the last axis"""
    u = np.asarray(u, dtype=np.float64)
    pre = np.arctanh(np.clip(u, -1.0 + 1e-12, 1.0 - 1e-12))
    std = np.exp(log_std)
    gaussian = -0.5 * ((pre - mean) / std) ** 2 - log_std - _HALF_LOG_2PI
    return np.sum(gaussian - np.log(1.0 - u * u + SQUASH_EPS), axis=-1)


def _check_outer_aux(obs: Observation) -> None:
    if not np.array_equal(np.asarray(obs.aux, dtype=np.float64), encode_aux(Stage.OUTER)):
        raise ContractViolation(f"outer stage expects aux [0, 0], got {list(obs.aux)}")


def _check_inner_aux(obs: Observation, grid: ActionGrid) -> None:
    stage, selection = decode_aux(obs.aux)
    if stage is not Stage.INNER or selection is None or selection.selection is not grid.granularity:
        raise ContractViolation(
            f"aux {list(obs.aux)} does not select the {grid.granularity.value} grid for the inner stage"
        )


def _encode_kappa(params: PolicyParams, obs: Observation,
                 base: Optional[LatentSet] = None) -> Tuple[gn.Tensor, LatentSet]:
    with gn.no_grad():
        if base is None:
            base = params.encoder.encode_base(ObservationBatch.from_observations([obs], dtype=params.dtype))
        latents = params.encoder.with_aux(base, np.asarray(obs.aux)[None, :])
    return latents.kappa, base


def _sample(params: PolicyParams, stage: Stage, kappa: gn.Tensor, rng: Optional[np.random.Generator],
            deterministic: bool) -> Tuple[np.ndarray, float]:
    head, raw = params.actor(stage)
    with gn.no_grad():
        mean = head(kappa)
        log_std = params.log_std(raw)
        if deterministic:
            noise = np.zeros(mean.shape)
        else:
            if rng is None:
                raise ContractViolation("stochastic acting needs a generator")
            noise = rng.standard_normal(mean.shape)
        u, logp = squashed_sample(mean, log_std, noise)
    return u.data[0].astype(np.float64), float(logp.data[0])


def act_outer(params: PolicyParams, obs: Observation, rng: Optional[np.random.Generator] = None,
              deterministic: bool = False, base: Optional[LatentSet] = None) -> Tuple[OuterAction, float, float]:
    """Samples the granularity; Fine when the squashed output is non-negative"""
    _check_outer_aux(obs)
    kappa, _ = _encode_kappa(params, obs, base)
    u, logp = _sample(params, Stage.OUTER, kappa, rng, deterministic)
    u_out = float(u[0])
    selection = Granularity.FINE if u_out >= 0.0 else Granularity.COARSE
    return OuterAction(selection), u_out, logp


def act_inner(params: PolicyParams, obs: Observation, grid: ActionGrid, rng: Optional[np.random.Generator] = None,
              deterministic: bool = False, base: Optional[LatentSet] = None) -> Tuple[InnerAction, np.ndarray, float]:
    """Samples four squashed outputs and snaps the first three onto the grid"""
    _check_inner_aux(obs, grid)
    kappa, _ = _encode_kappa(params, obs, base)
    u, logp = _sample(params, Stage.INNER, kappa, rng, deterministic)
    return inner_from_raw(u, grid), u, logp


def inner_from_raw(u_in: Sequence[float], grid: ActionGrid) -> InnerAction:
    """Grid indices for the first three raw outputs; the fourth is ignored and the gripper closes"""
    ix, iz, itheta = (snap_continuous(value, count) for value, count in zip(u_in[:3], grid.counts))
    return InnerAction(ix, iz, itheta, omega=True)


@dataclass(frozen=True)
class Transition:
    """One complete one-step episode"""
    obs_outer: Observation
    u_out: Optional[float]
    obs_inner: Observation
    u_in: np.ndarray
    reward: int
    env_id: int
    episode: int

    def validate(self) -> None:
        if self.reward not in (0, 1):
            raise ContractViolation(f"reward must be 0 or 1, got {self.reward}")
        if self.u_out is not None and not -1.0 <= self.u_out <= 1.0:
            raise ContractViolation(f"outer raw action {self.u_out} outside [-1, 1]")
        u_in = np.asarray(self.u_in)
        if u_in.shape != (INNER_DIM,) or np.any(np.abs(u_in) > 1.0):
            raise ContractViolation(f"inner raw action must be 4 values in [-1, 1], got {u_in}")


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling"""

    def __init__(self, capacity: int = 10000, seed: int = 0):
        if capacity < 1:
            raise ContractViolation(f"replay capacity must be positive, got {capacity}")
        self.max_size = capacity
        self.storage: List[Optional[Transition]] = [None] * capacity
        self.ptr, self.size = 0, 0
        self.rng = np.random.default_rng(seed)
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def push(self, transition: Transition) -> None:
        transition.validate()
        with self.lock:
            self.storage[self.ptr] = transition
            self.ptr = (self.ptr + 1) % self.max_size
            self.size = min(self.size + 1, self.max_size)

    def ready(self, learning_starts: int) -> bool:
        return self.size >= max(learning_starts, 1)

    def sample_batch(self, batch_size: int) -> List[Transition]:
        with self.lock:
            if self.size == 0:
                raise ContractViolation("cannot sample from an empty replay buffer")
            idxs = self.rng.integers(0, self.size, size=batch_size)
            return [self.storage[i] for i in idxs]


@dataclass
class UpdateReport:
    performed: bool
    critic_loss: float = float('nan')
    actor_loss: float = float('nan')
    steps: int = 0
    losses: Dict[str, float] = field(default_factory=dict)


def _critic_input(kappa: gn.Tensor, action: np.ndarray) -> gn.Tensor:
    return gn.concat([kappa, gn.Tensor(np.asarray(action, dtype=kappa.dtype))], axis=-1)


def _losses(params: PolicyParams, batch: Sequence[Transition], sac: SACConfig,
            rng: np.random.Generator) -> Tuple[gn.Tensor, gn.Tensor, Dict[str, float]]:
    obs = ObservationBatch.from_observations([t.obs_outer for t in batch], dtype=params.dtype)
    rewards = np.array([[t.reward] for t in batch], dtype=params.dtype)
    base = params.encoder.encode_base(obs)
    actions = {Stage.INNER: np.stack([t.u_in for t in batch])}
    auxes = {Stage.INNER: np.stack([t.obs_inner.aux for t in batch])}
    if params.dual_loop:
        actions[Stage.OUTER] = np.array([[t.u_out] for t in batch])
        auxes[Stage.OUTER] = np.stack([t.obs_outer.aux for t in batch])

    critic_loss, actor_loss = None, None
    details = {}
    for stage in params.stages:
        kappa = params.encoder.with_aux(base, auxes[stage]).kappa
        critics = params.critics(stage)
        taken = _critic_input(kappa, actions[stage])
        loss = None
        for critic in critics:
            term = gn.square(critic(taken) - rewards).mean()
            loss = term if loss is None else loss + term
        details[f"{stage.value.lower()}_critic"] = loss.item()
        critic_loss = loss if critic_loss is None else critic_loss + loss

        actor_kappa = kappa if sac.encoder_grad_from_actor else gn.detach(kappa)
        head, raw = params.actor(stage)
        mean = head(actor_kappa)
        u, logp = squashed_sample(mean, params.log_std(raw), rng.standard_normal(mean.shape))
        proposed = gn.concat([actor_kappa, u], axis=-1)
        q = gn.minimum(critics[0](proposed), critics[1](proposed))
        loss = (logp.reshape(len(batch), 1) * sac.alpha - q).mean()
        details[f"{stage.value.lower()}_actor"] = loss.item()
        actor_loss = loss if actor_loss is None else actor_loss + loss
    return critic_loss, actor_loss, details


def update(params: PolicyParams, optimizer: gn.Adam, buffer: ReplayBuffer, sac: SACConfig,
           rng: np.random.Generator, step_offset: int = 0) -> UpdateReport:
    """Runs ``sac.gradient_steps`` joint steps over both loops.

    Critic loss trains the critics and the encoder; actor loss trains the
    actors and, only when configured, the encoder as well.
    """
    if not buffer.ready(sac.learning_starts):
        return UpdateReport(performed=False)
    critic_params = params.critic_parameters()
    actor_params = params.actor_parameters()
    if sac.encoder_grad_from_actor:
        actor_params = params.encoder.parameters() + actor_params
    report = UpdateReport(performed=True)
    critic_values, actor_values = [], []
    for i in range(sac.gradient_steps):
        batch = buffer.sample_batch(sac.batch_size)
        critic_loss, actor_loss, details = _losses(params, batch, sac, rng)
        if not (np.isfinite(critic_loss.item()) and np.isfinite(actor_loss.item())):
            logger.error(f"Non-finite SAC loss at step {step_offset + i}: {details}")
            raise TrainingFailure("soft actor-critic loss diverged", step_offset + i)
        grads = {p.id: np.zeros_like(p.data) for p in optimizer.params}
        for p, g in zip(critic_params, gn.backward(critic_loss, critic_params)):
            grads[p.id] += g
        for p, g in zip(actor_params, gn.backward(actor_loss, actor_params)):
            grads[p.id] += g
        optimizer.step([grads[p.id] for p in optimizer.params])
        critic_values.append(critic_loss.item())
        actor_values.append(actor_loss.item())
        for key, value in details.items():
            report.losses[key] = report.losses.get(key, 0.0) + value / sac.gradient_steps
    report.critic_loss = float(np.mean(critic_values))
    report.actor_loss = float(np.mean(actor_values))
    report.steps = sac.gradient_steps
    return report


@dataclass(frozen=True)
class Decision:
    outer: OuterAction
    u_out: Optional[float]
    inner: InnerAction
    u_in: np.ndarray
    obs_outer: Observation
    obs_inner: Observation

    @property
    def grid(self) -> ActionGrid:
        return grid_for(self.outer.selection)


def architecture_identity(config: RunConfig) -> Dict:
    """Config fields that fix the parameter layout of a policy checkpoint"""
    return {
        'mode': config.mode,
        'hidden': config.sac.hidden,
        'log_std_bounds': [config.sac.log_std_min, config.sac.log_std_max],
        'symmetric_cross_attention': config.fusion.symmetric_cross_attention,
    }


def architecture_hash(config: RunConfig) -> str:
    return canonical_hash(architecture_identity(config))


class DualLoopAgent:
    """Policy parameters, optimizer and replay buffer of one training run"""

    def __init__(self, config: RunConfig, seed: int = 0):
        self.config = config
        self.sac = config.sac
        rng = np.random.default_rng(seed)
        self.params = PolicyParams(
            rng,
            config.ablation,
            config.sac.hidden,
            (config.sac.log_std_min, config.sac.log_std_max),
            config.fusion.symmetric_cross_attention,
        )
        self.optimizer = gn.Adam(self.params.parameters(), config.sac.lr)
        self.buffer = ReplayBuffer(config.sac.buffer_size, seed)
        self.update_rng = np.random.default_rng([seed, 7])
        self.gradient_steps = 0

    @property
    def mode(self) -> AblationMode:
        return self.params.mode

    def act(self, obs: Observation, rng: Optional[np.random.Generator] = None,
            deterministic: bool = False) -> Decision:
        """Outer selection, aux re-encoding and inner action for one observation"""
        obs_outer = obs.with_aux(encode_aux(Stage.OUTER))
        batch = ObservationBatch.from_observations([obs_outer], dtype=self.params.dtype)
        with gn.no_grad():
            base = self.params.encoder.encode_base(batch)
        if self.params.dual_loop:
            outer, u_out, _ = act_outer(self.params, obs_outer, rng, deterministic, base)
        else:
            outer, u_out = OuterAction(Granularity.SINGLE), None
        obs_inner = obs_outer.with_aux(encode_aux(Stage.INNER, outer))
        inner, u_in, _ = act_inner(self.params, obs_inner, grid_for(outer.selection), rng, deterministic, base)
        return Decision(outer, u_out, inner, u_in, obs_outer, obs_inner)

    def remember(self, decision: Decision, reward: int, env_id: int, episode: int) -> Transition:
        transition = Transition(decision.obs_outer, decision.u_out, decision.obs_inner,
                                np.asarray(decision.u_in, dtype=np.float64), int(reward), env_id, episode)
        self.buffer.push(transition)
        return transition

    def update(self) -> UpdateReport:
        report = update(self.params, self.optimizer, self.buffer, self.sac, self.update_rng, self.gradient_steps)
        self.gradient_steps += report.steps
        return report

    def save(self, path: str) -> None:
        checkpoint = Checkpoint(
            config_hash=architecture_hash(self.config),
            ablation_mode=self.mode.value,
            kind='policy',
            tensors=self.params.state_dict(),
        )
        write_checkpoint(path, checkpoint)
        logger.info(f"Saved {self.mode.value} policy ({self.params.num_parameters()} parameters) to {path}")

    @classmethod
    def load(cls, path: str, config: RunConfig, seed: int = 0) -> 'DualLoopAgent':
        """Rebuilds the agent for ``config`` and fills it from a checkpoint written for the same architecture"""
        checkpoint = read_checkpoint(path, kind='policy', expected_hash=architecture_hash(config),
                                     expected_mode=config.mode)
        agent = cls(config, seed)
        try:
            agent.params.load_state_dict(checkpoint.tensors)
        except ContractViolation as e:
            logger.error(f"Checkpoint {path} does not fit the {config.mode} policy: {str(e)}", exc_info=True)
            raise
        return agent
