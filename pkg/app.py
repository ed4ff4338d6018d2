import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from layergrasp.agent import DualLoopAgent
from layergrasp.config import RunConfig, load_config, with_overrides
from layergrasp.error_types import LayerGraspError, UsageError
from layergrasp.experiments import (ablation_suite, compliance_experiment, export_features, failing_checks,
                                    generalization_table, gradient_suite, heatmap_experiment, oracle_report,
                                    recorded_action, selection_stats, tilt_sweep, write_heatmap_result)
from layergrasp.formats import read_checkpoint, read_slip_dataset, write_slip_dataset
from layergrasp.fusion import AblationMode
from layergrasp.harness import evaluate, fit_slip_network, train_run
from layergrasp.report_generator import ReportGenerator
from layergrasp.slipnet import build_dataset
from layergrasp.utils import atomic_write, ensure_directory

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

COMMANDS = {
    'gen-slip-data': "synthesise augmented slip masks and annotations",
    'train-slip': "train the slip affordance network and score the held-out split",
    'train': "train the dual-loop agent and write metrics and the policy checkpoint",
    'eval': "greedy success rate of a policy checkpoint with an exact binomial interval",
    'ablate': "train and evaluate several ablation modes on matched seeds",
    'heatmap': "replay one action over the 6x6 offset grid",
    'compliance': "sweep the vertical overshoot with zero height error",
    'stats': "fractions of coarse and fine selections of a dual-loop checkpoint",
    'oracle': "brute-force best grid action per scenario",
    'gradcheck': "finite-difference check of every primitive and the fusion encoder",
    'tilt': "greedy success rate at several stack tilts",
    'generalize': "greedy success rate on scenarios outside the training pair",
    'features': "export fused latents with material labels as CSV",
}


@dataclass(frozen=True)
class CommandSpec:
    command: str
    config: Optional[str] = None
    seed: int = 0
    output: Optional[str] = None
    deterministic: bool = False
    verbose: bool = False
    options: Dict[str, Any] = field(default_factory=dict)


class CliParser(argparse.ArgumentParser):
    """Raises instead of exiting so that every usage problem maps to exit code 1"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="YAML run config; packaged defaults when omitted")
    common.add_argument('--seed', type=int, default=0, help="seed of the run (default 0)")
    common.add_argument('--output', help="output directory; defaults under the output root")
    common.add_argument('--deterministic', action='store_true', help="sequential single-worker execution")
    common.add_argument('--verbose', action='store_true', help="debug logging")
    common.add_argument('--mode', choices=[m.value for m in AblationMode], help="override the ablation mode")
    common.add_argument('--slip-checkpoint', help="trained slip network (slip.checkpoint)")
    common.add_argument('--planner', choices=['network', 'annotated'], help="slip planner (slip.planner)")

    parser = CliParser(prog='layergrasp', allow_abbrev=False,
                       description="Dual-loop singulation and grasping of thin layered objects")
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')

    def add(name: str) -> CliParser:
        return subparsers.add_parser(name, parents=[common], help=COMMANDS[name], description=COMMANDS[name],
                                     allow_abbrev=False)

    p = add('gen-slip-data')
    p.add_argument('--count', type=int, help="number of augmented samples (slip.samples)")

    p = add('train-slip')
    p.add_argument('--data', help="dataset directory written by gen-slip-data; synthesised when omitted")

    p = add('train')
    p.add_argument('--episodes', type=int, help="episode budget")

    p = add('eval')
    p.add_argument('--checkpoint', required=True, help="policy checkpoint")
    p.add_argument('--scenario', nargs='+', help="scenarios (default: the training pair)")
    p.add_argument('--episodes', type=int, help="episodes per scenario (default eval_episodes)")
    p.add_argument('--tilt', type=float, help="override the stack tilt (degrees)")

    p = add('ablate')
    p.add_argument('--modes', nargs='+', default=[m.value for m in AblationMode],
                   choices=[m.value for m in AblationMode], help="at least two modes")
    p.add_argument('--seeds', nargs='+', type=int, help="seeds (default: config seeds)")
    p.add_argument('--episodes', type=int, help="evaluation episodes per scenario")

    p = add('heatmap')
    p.add_argument('--material', required=True)
    p.add_argument('--checkpoint', help="replay the greedy action of this policy instead of the oracle action")
    p.add_argument('--scenario', help="scenario the recorded action is taken on")
    p.add_argument('--kind', choices=['bernoulli', 'expected'], default='bernoulli')
    p.add_argument('--trials', type=int, default=100, help="Bernoulli trials per cell")

    p = add('compliance')
    p.add_argument('--material', nargs='+', default=['printer', 'winter_fabric'])
    p.add_argument('--step', type=float, default=0.5, help="overshoot step (mm)")
    p.add_argument('--max', type=float, default=18.0, help="largest overshoot (mm)")

    p = add('stats')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--scenario', nargs='+')
    p.add_argument('--episodes', type=int)

    p = add('oracle')
    p.add_argument('--scenario', nargs='+')

    p = add('gradcheck')
    p.add_argument('--modes', nargs='+', default=[AblationMode.OURS.value], choices=[m.value for m in AblationMode])

    p = add('tilt')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--scenario', required=True)
    p.add_argument('--tilts', nargs='+', type=float, default=[0.0, 30.0, 60.0])
    p.add_argument('--episodes', type=int)

    p = add('generalize')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--scenario', nargs='+', help="scenarios (default: every configured scenario)")
    p.add_argument('--episodes', type=int)

    p = add('features')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--scenario', nargs='+')
    p.add_argument('--episodes', type=int, default=50, help="episodes per scenario")
    return parser


_COMMON = ('command', 'config', 'seed', 'output', 'deterministic', 'verbose')


def parse_cli(argv: Sequence[str]) -> CommandSpec:
    """Strict parse of the command line into a CommandSpec"""
    argv = list(argv)
    if not argv:
        raise UsageError(f"a command is required, one of: {', '.join(COMMANDS)}")
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise UsageError(f"a command is required, one of: {', '.join(COMMANDS)}")
    values = vars(args)
    options = {k: v for k, v in values.items() if k not in _COMMON}
    return CommandSpec(args.command, args.config, args.seed, args.output, args.deterministic, args.verbose, options)


# command handlers

def resolve_config(spec: CommandSpec) -> RunConfig:
    """Loads the config and applies the command-line overrides"""
    config = load_config(spec.config)
    changes: Dict[str, Any] = {}
    if spec.deterministic:
        changes['deterministic'] = True
    if spec.options.get('mode'):
        changes['mode'] = spec.options['mode']
    if spec.command == 'train' and spec.options.get('episodes'):
        changes['episodes'] = spec.options['episodes']
    slip_changes = {}
    if spec.options.get('slip_checkpoint'):
        slip_changes['checkpoint'] = spec.options['slip_checkpoint']
    if spec.options.get('planner'):
        slip_changes['planner'] = spec.options['planner']
    if slip_changes:
        changes['slip'] = replace(config.slip, **slip_changes)
    return with_overrides(config, **changes) if changes else config


def output_dir(spec: CommandSpec, config: RunConfig) -> str:
    path = spec.output or os.path.join(config.output_root_resolved(), spec.command)
    ensure_directory(path)
    return path


def load_agent(config: RunConfig, path: str, seed: int) -> DualLoopAgent:
    """Loads a policy checkpoint under the ablation mode recorded in it"""
    checkpoint = read_checkpoint(path, kind='policy')
    if checkpoint.ablation_mode != config.mode:
        logger.info(f"Checkpoint {path} was trained as {checkpoint.ablation_mode}; switching mode")
        config = with_overrides(config, mode=checkpoint.ablation_mode)
    return DualLoopAgent.load(path, config, seed)


def write_summary(directory: str, name: str, payload: Any) -> str:
    path = os.path.join(directory, name)
    atomic_write(path, json.dumps(payload, indent=2, default=float) + '\n')
    return path


def _scenarios(spec: CommandSpec, config: RunConfig) -> List[str]:
    return list(spec.options.get('scenario') or config.scenarios)


def cmd_gen_slip_data(spec: CommandSpec, config: RunConfig) -> None:
    count = spec.options.get('count') or config.slip.samples
    samples = build_dataset(count, np.random.default_rng(spec.seed), config.sim.camera.shape,
                            max_attempts=config.slip.augment_attempts)
    path = write_slip_dataset(output_dir(spec, config), samples)
    print(f"Wrote {len(samples)} slip samples, annotations in {path}")


def cmd_train_slip(spec: CommandSpec, config: RunConfig) -> None:
    samples = read_slip_dataset(spec.options['data']) if spec.options.get('data') else None
    out = output_dir(spec, config)
    fit = fit_slip_network(config, spec.seed, out, samples)
    summary = fit.evaluation.summary()
    summary.update({'steps': fit.steps, 'epoch_losses': fit.epoch_losses, 'checkpoint': fit.checkpoint_path})
    write_summary(out, 'slip_evaluation.json', summary)
    print(f"Slip network saved to {fit.checkpoint_path}: {summary['pixel_within_5']:.1%} within 5 px, "
          f"{summary['bin_within_1']:.1%} within one bin")


def cmd_train(spec: CommandSpec, config: RunConfig) -> None:
    result = train_run(config, spec.seed, run_dir=spec.output)
    print(f"Policy {result.checkpoint_path}, metrics {result.metrics_path}, "
          f"final success rate {result.log.final_rate():.3f}")


def cmd_eval(spec: CommandSpec, config: RunConfig) -> None:
    agent = load_agent(config, spec.options['checkpoint'], spec.seed)
    config = agent.config
    results = [evaluate(config, scenario, spec.options.get('episodes'), spec.seed, agent=agent,
                        tilt=spec.options.get('tilt'))
               for scenario in _scenarios(spec, config)]
    out = output_dir(spec, config)
    report = ReportGenerator.generate_evaluation_report(results)
    atomic_write(os.path.join(out, 'evaluation.txt'), report + '\n')
    write_summary(out, 'evaluation.json', [r.to_dict() for r in results])
    print(report)


def cmd_ablate(spec: CommandSpec, config: RunConfig) -> None:
    result = ablation_suite(config, spec.options['modes'], output_dir(spec, config), spec.options.get('seeds'),
                            evaluate_episodes=spec.options.get('episodes'))
    for mode, summary in result.summaries.items():
        print(f"{mode}: median AUC {summary.median_auc:.3f}, diverged seeds {summary.diverged or 'none'}")
    print(f"Reports: {', '.join(result.report_paths)}")


def cmd_heatmap(spec: CommandSpec, config: RunConfig) -> None:
    action = None
    if spec.options.get('checkpoint'):
        agent = load_agent(config, spec.options['checkpoint'], spec.seed)
        config = agent.config
        scenario = spec.options.get('scenario') or config.scenarios[0]
        action = recorded_action(agent, config, scenario, spec.seed)
    result = heatmap_experiment(config, spec.options['material'], action, spec.options['kind'],
                                spec.options['trials'], spec.seed)
    path = write_heatmap_result(result, output_dir(spec, config))
    print(f"Heatmap written to {path}; best cell {result.argmax_cell()}, diagonal ratio {result.diagonal_ratio():.2f}")


def cmd_compliance(spec: CommandSpec, config: RunConfig) -> None:
    summary = {}
    for material in spec.options['material']:
        result = compliance_experiment(config, material, spec.options['step'], spec.options['max'])
        summary[material] = {
            'p_star': result.p_star,
            'tolerated_mm': result.tolerated,
            'force_band_n': result.band,
            'overshoot_mm': result.overshoot.tolist(),
            'force_n': result.force.tolist(),
            'probability': result.probability.tolist(),
        }
        print(f"{material}: tolerated overshoot {result.tolerated:.1f} mm, force band {result.band:.4f} N")
    write_summary(output_dir(spec, config), 'compliance.json', summary)


def cmd_stats(spec: CommandSpec, config: RunConfig) -> None:
    agent = load_agent(config, spec.options['checkpoint'], spec.seed)
    config = agent.config
    summary = {scenario: selection_stats(agent, config, scenario, spec.options.get('episodes'), spec.seed)
               for scenario in _scenarios(spec, config)}
    write_summary(output_dir(spec, config), 'selection_stats.json', summary)
    for scenario, fractions in summary.items():
        print(f"{scenario}: coarse {fractions['coarse']:.1%}, fine {fractions['fine']:.1%}")


def cmd_oracle(spec: CommandSpec, config: RunConfig) -> None:
    rows = oracle_report(config, _scenarios(spec, config), spec.seed)
    write_summary(output_dir(spec, config), 'oracle.json', rows)
    for row in rows:
        print(f"{row['scenario']} ({row['material']}): {row['selection']} {row['indices']} P*={row['p_star']:.4f}")


def cmd_gradcheck(spec: CommandSpec, config: RunConfig) -> None:
    errors = gradient_suite(spec.seed, [AblationMode(m) for m in spec.options['modes']])
    write_summary(output_dir(spec, config), 'gradcheck.json', errors)
    for name, error in errors.items():
        print(f"{name:<24} {error:.2e}")
    failed = failing_checks(errors)
    if failed:
        raise LayerGraspError(f"gradient check failed for {', '.join(failed)}")


def cmd_tilt(spec: CommandSpec, config: RunConfig) -> None:
    agent = load_agent(config, spec.options['checkpoint'], spec.seed)
    results = tilt_sweep(agent, agent.config, spec.options['scenario'], spec.options['tilts'],
                         spec.options.get('episodes'), spec.seed)
    write_summary(output_dir(spec, config), 'tilt.json', {str(t): r.to_dict() for t, r in results.items()})
    for tilt, result in results.items():
        print(f"{tilt:>5.1f} deg: {result.rate:.3f} [{result.ci_low:.3f}, {result.ci_high:.3f}]")


def cmd_generalize(spec: CommandSpec, config: RunConfig) -> None:
    agent = load_agent(config, spec.options['checkpoint'], spec.seed)
    config = agent.config
    scenarios = spec.options.get('scenario') or list(config.sim.scenarios)
    results = generalization_table(agent, config, scenarios, spec.options.get('episodes'), spec.seed)
    out = output_dir(spec, config)
    report = ReportGenerator.generate_evaluation_report(results, title="Generalisation")
    atomic_write(os.path.join(out, 'generalization.txt'), report + '\n')
    write_summary(out, 'generalization.json', [r.to_dict() for r in results])
    print(report)


def cmd_features(spec: CommandSpec, config: RunConfig) -> None:
    agent = load_agent(config, spec.options['checkpoint'], spec.seed)
    path = os.path.join(output_dir(spec, config), 'features.csv')
    export_features(agent, agent.config, _scenarios(spec, agent.config), spec.options['episodes'], path, spec.seed)
    print(f"Features written to {path}")


HANDLERS: Dict[str, Callable[[CommandSpec, RunConfig], None]] = {
    'gen-slip-data': cmd_gen_slip_data,
    'train-slip': cmd_train_slip,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'heatmap': cmd_heatmap,
    'compliance': cmd_compliance,
    'stats': cmd_stats,
    'oracle': cmd_oracle,
    'gradcheck': cmd_gradcheck,
    'tilt': cmd_tilt,
    'generalize': cmd_generalize,
    'features': cmd_features,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one command; returns 0 on success, 1 usage, 2 config, 3 runtime"""
    try:
        spec = parse_cli(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        print(build_parser().format_help(), file=sys.stderr)
        print(f"error: {str(e)}", file=sys.stderr)
        return e.exit_code

    logging.basicConfig(
        level=logging.DEBUG if spec.verbose else logging.INFO,
        format=LOG_FORMAT
    )
    try:
        config = resolve_config(spec)
        HANDLERS[spec.command](spec, config)
        return 0
    except LayerGraspError as e:
        logger.error(f"{spec.command} failed: {str(e)}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error in {spec.command}: {str(e)}", exc_info=True)
        return 3
