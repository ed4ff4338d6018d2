import math

import numpy as np
import pytest
from scipy.stats import norm

from layergrasp.core import (COARSE_GRID, FINE_GRID, Granularity, InnerAction, OuterAction, PhysicalAction,
                             decode_action, grid_for)
from layergrasp.error_types import ConfigError, ContractViolation, EmptyStackError
from layergrasp.harness import AnnotatedSlipPlanner
from layergrasp.simenv import (contact_force, execute_slip, expected_success, height_error_nodes, make_scenario,
                               monte_carlo_success, oracle_best, recycle, render_topdown, reset, step, success_given,
                               success_probability)
from layergrasp.slipnet import SlipCommand

MATERIALS = ['printer', 'coated', 'plastic', 'winter_fabric', 'summer_fabric', 'towel', 'cloth',
             'baking_paper', 'pancake_wrap']


def test_packaged_scenarios(default_config):
    sim = default_config.sim
    assert len(sim.scenarios) == 8
    assert len(sim.materials) == 9
    scenario = make_scenario(sim, 'mixed_fabric_paper')
    names = [m.name for m in scenario.layer_materials()[:4]]
    assert names == ['summer_fabric', 'printer', 'summer_fabric', 'printer']
    assert make_scenario(sim, 'printer_book', tilt=30.0).tilt == 30.0


def test_unknown_scenario(default_config):
    with pytest.raises(ConfigError):
        make_scenario(default_config.sim, 'marble_slab')


def test_reset_is_deterministic(default_config):
    scenario = make_scenario(default_config.sim, 'printer_book')
    a = reset(scenario, 11, default_config.sim)
    b = reset(scenario, 11, default_config.sim)
    assert a.height_error == b.height_error
    assert a.pose == b.pose
    assert a.remaining == scenario.layer_count


def test_render_topdown_depth(default_config, printer_state):
    mask, depth, intrinsics = render_topdown(printer_state, default_config.sim)
    camera = default_config.sim.camera
    assert mask.shape == depth.shape == camera.shape
    assert mask.any() and not mask.all()
    surface = camera.height_m - printer_state.height_mm / 1000.0
    assert np.median(depth[mask > 0]) == pytest.approx(surface, abs=1e-3)
    assert np.median(depth[mask == 0]) == pytest.approx(camera.height_m, abs=1e-3)
    assert intrinsics.fx == camera.fx


def test_contact_force_saturates():
    assert contact_force(-1.0) == 0.0
    assert contact_force(0.0) == 0.0
    assert contact_force(3.0) == pytest.approx(2.0 * math.tanh(1.0))
    force = contact_force(np.linspace(6.0, 18.0, 25))
    assert force.max() - force.min() <= 0.05 * 2.0
    assert np.all(np.diff(contact_force(np.linspace(0.0, 10.0, 21))) > 0)


def test_success_is_zero_without_contact(default_config):
    printer = default_config.sim.materials['printer']
    p = success_given(printer, 0.0, 0.0, -5.0, 2.0, 1.0, 1.0, 0.0, default_config.sim)
    assert p == 0.0


def test_success_given_broadcasts(default_config):
    printer = default_config.sim.materials['printer']
    eps = np.linspace(-3, 3, 5)
    p = success_given(printer, 0.0, np.zeros((3, 1)), np.ones((3, 1)), np.full((3, 1), 2.0), 1.0, 1.0,
                      eps[None, :], default_config.sim)
    assert p.shape == (3, 5)
    assert np.all((p >= 0) & (p <= 1))


def test_tilt_raises_multi_layer_pick(default_config):
    printer = default_config.sim.materials['printer']
    args = (0.0, 2.0, 2.0, 1.0, 1.0, 0.0, default_config.sim)
    sweep = [float(success_given(printer, tilt, *args)) for tilt in np.linspace(0.0, 90.0, 10)]
    assert sweep[0] > 0.0
    assert np.all(np.diff(sweep) < 0)


def test_success_probability_needs_closed_gripper(default_config, printer_state):
    with pytest.raises(ContractViolation):
        success_probability(printer_state, PhysicalAction(0.0, 0.0, 0.0, omega=False), (1.0, 1.0),
                            default_config.sim)


@pytest.mark.parametrize("material", MATERIALS)
def test_quadrature_matches_monte_carlo(default_config, material):
    sim = default_config.sim
    profile = sim.materials[material]
    actions = [PhysicalAction(2.5, 2.0, 2.0), PhysicalAction(0.0, 0.0, profile.theta_opt),
               PhysicalAction(-5.0, 5.0, 0.0)]
    for act in actions:
        exact = expected_success(profile, 0.0, act, (1.0, 1.0), sim)
        sampled = monte_carlo_success(profile, 0.0, act, (1.0, 1.0), sim, 100000, np.random.default_rng(7),
                                      stratified=True)
        assert exact == pytest.approx(sampled, abs=1e-3)


def test_plain_monte_carlo_agrees_within_sampling_noise(default_config, rng):
    sim = default_config.sim
    printer = sim.materials['printer']
    act = PhysicalAction(2.5, 2.0, 2.0)
    exact = expected_success(printer, 0.0, act, (1.0, 1.0), sim)
    sampled = monte_carlo_success(printer, 0.0, act, (1.0, 1.0), sim, 200000, rng)
    assert exact == pytest.approx(sampled, abs=5e-3)


def test_height_error_nodes_cover_the_contact_region(default_config):
    sim = default_config.sim
    printer = sim.materials['printer']
    sigma = printer.depth_noise
    for z in (-3.0, 0.0, 2.0, 7.5):
        eps, weights = height_error_nodes(printer, z, sim)
        assert eps.shape == weights.shape == (3 * sim.quadrature_nodes,)
        assert np.all(eps <= z)
        assert weights.sum() == pytest.approx(norm.cdf(z / sigma), abs=1e-8)
    eps, weights = height_error_nodes(printer, np.array([0.0, 2.0, 100.0]), sim)
    assert eps.shape == (3, 3 * sim.quadrature_nodes)
    assert weights[2].sum() == pytest.approx(1.0, abs=1e-8)
    _, weights = height_error_nodes(printer, -100.0, sim)
    assert weights.sum() == 0.0


def test_oracle_beats_every_grid_point(default_config, printer_state):
    sim = default_config.sim
    outer, inner, p_star = oracle_best(printer_state, sim)
    assert 0.0 < p_star <= 1.0
    best = decode_action(grid_for(outer.selection), inner)
    assert expected_success(printer_state.top, 0.0, best, sim.nominal_offset, sim) == pytest.approx(p_star)
    for grid in (FINE_GRID, COARSE_GRID):
        for indices in grid.indices():
            act = decode_action(grid, InnerAction(*indices))
            assert expected_success(printer_state.top, 0.0, act, sim.nominal_offset, sim) <= p_star + 1e-9


def test_oracle_prefers_fine_on_ties(default_config):
    sim = default_config.sim
    state = reset(make_scenario(sim, 'printer_book'), 0, sim)
    outer, inner, p_star = oracle_best(state, sim, offsets=(50.0, 50.0))
    assert p_star == pytest.approx(0.0, abs=1e-12)
    assert outer.selection is Granularity.FINE
    assert inner.indices == (0, 0, 0)


def test_execute_slip_readings(default_config, printer_state, observation):
    observation.validate()
    assert not observation.degenerate
    assert observation.pro[2] < 0
    assert np.abs(observation.ind).max() > np.abs(observation.thu).max() * 0.5


def test_execute_slip_off_image(default_config, printer_state):
    with pytest.raises(ContractViolation):
        execute_slip(printer_state, SlipCommand((500, 10), 0, -90.0, (0.0, 0.0, 0.5)), default_config.sim)


def test_missed_slip_is_degenerate(default_config, printer_state):
    sim = default_config.sim
    render_topdown(printer_state, sim)
    obs = execute_slip(printer_state, SlipCommand((0, 0), 0, -90.0, (0.0, 0.0, 0.5)), sim)
    assert obs.degenerate and printer_state.slip_missed
    assert abs(obs.pro[0]) < 0.2
    reward, done, _ = step(printer_state, OuterAction(Granularity.FINE), InnerAction(1, 4, 2), sim)
    assert reward == 0 and done


def test_step_removes_a_layer_on_success(default_config):
    sim = default_config.sim
    state = reset(make_scenario(sim, 'printer_book', layers=3), 0, sim)
    planner = AnnotatedSlipPlanner(sim)
    outer, inner, _ = oracle_best(state, sim)
    rewards = []
    for _ in range(200):
        if state.remaining == 0:
            break
        execute_slip(state, planner.plan(state), sim)
        reward, done, state = step(state, outer, inner, sim)
        assert done
        rewards.append(reward)
    assert state.remaining == 3 - sum(rewards)


def test_empty_stack_must_be_recycled(default_config):
    sim = default_config.sim
    state = reset(make_scenario(sim, 'printer_book', layers=1), 0, sim)
    state.remaining = 0
    with pytest.raises(EmptyStackError):
        step(state, OuterAction(Granularity.FINE), InnerAction(0, 0, 0), sim)
    with pytest.raises(EmptyStackError):
        _ = state.top
    recycle(state, sim)
    assert state.remaining == 1 and state.recycles == 1


def _reward_sequence(sim, seed, steps):
    state = reset(make_scenario(sim, 'printer_book'), seed, sim)
    planner = AnnotatedSlipPlanner(sim)
    outer, inner, _ = oracle_best(state, sim)
    rewards = []
    for _ in range(steps):
        if state.remaining == 0:
            recycle(state, sim)
        execute_slip(state, planner.plan(state), sim)
        reward, _, state = step(state, outer, inner, sim)
        rewards.append(reward)
    return rewards


def test_seeded_replay_gives_identical_rewards(default_config):
    first = _reward_sequence(default_config.sim, 21, 100)
    assert first == _reward_sequence(default_config.sim, 21, 100)
    assert len(first) == 100 and sum(first) > 0


def test_normal_force_tracks_layer_count(default_config):
    sim = default_config.sim
    scenario = make_scenario(sim, 'printer_book')
    planner = AnnotatedSlipPlanner(sim)
    readings = {}
    for remaining in (50, 5):
        state = reset(scenario, 9, sim)
        state.remaining = remaining
        state.height_error = 0.0
        readings[remaining] = execute_slip(state, planner.plan(state), sim).pro
    assert readings[5][2] - readings[50][2] == pytest.approx(45 * sim.layer_force, abs=1e-9)
    assert abs(readings[50][2]) - abs(readings[5][2]) == pytest.approx(45 * sim.layer_force, abs=1e-9)
    np.testing.assert_array_equal(readings[50][:2], readings[5][:2])


def _dominant_frequency(field):
    n = field.shape[0]
    power = np.zeros((n, n))
    for channel in (0, 1):
        spectrum = np.fft.fft2(field[:, :, channel] - field[:, :, channel].mean())
        power += np.abs(spectrum) ** 2
    power[0, 0] = 0.0
    row, col = np.unravel_index(int(np.argmax(power)), power.shape)
    freqs = np.fft.fftfreq(n) * n
    return math.hypot(freqs[row], freqs[col])


@pytest.mark.parametrize("scenario, material", [('printer_book', 'printer'), ('winter_fabric', 'winter_fabric')])
def test_tactile_texture_frequency(default_config, scenario, material):
    sim = default_config.sim
    state = reset(make_scenario(sim, scenario), 5, sim)
    state.height_error = 0.0
    obs = execute_slip(state, AnnotatedSlipPlanner(sim).plan(state), sim)
    assert not obs.degenerate
    expected = sim.materials[material].roughness
    assert _dominant_frequency(obs.ind) == pytest.approx(expected, abs=1.0)
    assert _dominant_frequency(obs.thu) == pytest.approx(expected, abs=1.0)
