"""End-to-end acceptance checks, one test (or parametrized group) per criterion.

A summary line per criterion is printed at the end of the run by the
``criterion`` marker hook in conftest.py.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cli_cases import output_snapshot, subcommands, write_inputs
from oracles import column_stiffness, damped_impact
from softpad.calibrate import FIT_PARAMS, fit, predict_holdout, reference_configs, simulate, synthetic_problem
from softpad.cli import EXIT_OK, main
from softpad.damage import aggregate, detect_falls, format_heat_table, group_episodes
from softpad.droptest import DropConfig, compression_test, impact_velocity, run_drop
from softpad.kvfile import read_kv
from softpad.material import MaterialParams
from softpad.mesh import SlabSpec, generate_slab
from softpad.pressure import BELOW, FILMS, IN_RANGE, PressureField, classify, reduction
from softpad.rewards import (
    ANCHOR_HEIGHT,
    ANCHOR_ORIENTATION,
    CONTINUE,
    UNSAFE_CONTACT,
    MimicFrame,
    RewardConfig,
    kernel,
    should_terminate,
    total_reward,
)
from softpad.solver import HALF_SPACE, Collider, Solver, SolverConfig
from softpad.unwrap import distortion, grid_patch, lscm
from test_damage import FEET, twelve_episode_log
from test_droptest import column_drop
from test_unwrap import paraboloid, similarity_residual

criterion = pytest.mark.criterion
ELASTIC = MaterialParams(rate_gain=0.0)


class Budget:
    """Wall-clock guard for a criterion's runtime limit."""

    def __init__(self, seconds: float):
        self.seconds = seconds
        self.start = time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.seconds, f"took {elapsed:.1f} s, limit {self.seconds:.0f} s"


@pytest.fixture(scope="module")
def block():
    return generate_slab(SlabSpec(0.04, 0.04, 0.01, 0.01))


@criterion(1, "single-column impact vs damped oscillator")
def test_column_impact_matches_oscillator():
    budget = Budget(10)
    cfg = column_drop()
    res = run_drop(cfg)
    k = column_stiffness(ELASTIC.shear_modulus, 1e-4, 0.01)
    _, _, peak, duration = damped_impact(cfg.payload_mass, k, ELASTIC.damping * k, cfg.velocity)
    on = np.nonzero(res.trace.samples > 0)[0]
    sim_duration = (on[-1] - on[0] + 1) / cfg.sample_rate
    assert abs(res.peak_force / peak - 1) < 0.10
    assert abs(sim_duration / duration - 1) < 0.15
    budget.check()


@criterion(2, "momentum conservation and energy dissipation")
def test_conservation_and_dissipation(block):
    budget = Budget(30)
    rng = np.random.default_rng(3)
    solver = Solver(block, MaterialParams(), SolverConfig(gravity=0.0))
    v = np.array([0.4, -0.3, 0.2]) + rng.normal(0, 0.05, (block.n_vertices, 3))
    state = solver.initial_state(positions=block.vertices * [1.05, 1.0, 0.95], velocities=v)
    p0 = solver.momentum(state)
    for _ in range(1000):
        state, _ = solver.step(state)
    assert np.linalg.norm(solver.momentum(state) - p0) <= 1e-10 * np.linalg.norm(p0)

    assert ELASTIC.damping > 0
    solver = Solver(block, ELASTIC, SolverConfig(gravity=0.0, residual_tol=1e-12, local_global_iters=50))
    state = solver.initial_state(positions=block.vertices * [1.1, 0.95, 0.9])
    e0 = solver.elastic_energy(state) + solver.kinetic_energy(state)
    prev = e0
    for _ in range(200):
        state, _ = solver.step(state)
        e = solver.elastic_energy(state) + solver.kinetic_energy(state)
        assert e <= prev + 1e-9 * e0
        prev = e
    budget.check()


def _incline_velocity(mesh, deg, mu, steps=300):
    th = math.radians(deg)
    cfg = SolverConfig(gravity=(9.81 * math.sin(th), 0.0, -9.81 * math.cos(th)), local_global_iters=40)
    solver = Solver(mesh, ELASTIC, cfg)
    state = solver.initial_state([Collider(HALF_SPACE, friction=mu)])
    for _ in range(steps):
        state, _ = solver.step(state)
    return float(state.velocities[:, 0].mean()), steps * cfg.dt


@criterion(3, "resting weight, penetration, incline stick/slip")
def test_contact_correctness(block):
    budget = Budget(60)
    solver = Solver(block, ELASTIC, SolverConfig(dt=1e-3))
    state = solver.initial_state([Collider(HALF_SPACE, friction=1.0)])
    for _ in range(200):
        state, report = solver.step(state)
    weight = solver.system.masses.sum() * 9.81
    assert abs(state.contacts.total_normal(0) / weight - 1) <= 0.01
    assert report.max_penetration <= solver.config.contact_tol

    for mu in (0.2, 0.5, 1.0):
        critical = math.degrees(math.atan(mu))
        v_stick, _ = _incline_velocity(block, critical - 2.0, mu)
        v_slip, t = _incline_velocity(block, critical + 2.0, mu)
        th = math.radians(critical + 2.0)
        sliding = 9.81 * (math.sin(th) - mu * math.cos(th)) * t
        assert abs(v_stick) < 1e-2 * sliding, (mu, v_stick)
        assert v_slip > 0.5 * sliding, (mu, v_slip, sliding)
    budget.check()


@criterion(4, "compression slope increases with crosshead speed")
def test_rate_stiffening_trend():
    budget = Budget(120)
    slopes = [compression_test(MaterialParams(), v).slope for v in (0.001, 0.01, 0.1)]
    assert slopes[0] < slopes[1] < slopes[2], slopes
    budget.check()


@criterion(5, "peak force and pressure fall with thickness")
def test_thickness_trend():
    budget = Budget(300)
    forces, pressures = [], []
    for th in (0.003, 0.006, 0.012, 0.018):
        res = run_drop(DropConfig(slab=SlabSpec(0.1, 0.1, th, min(0.004, th))))
        assert not res.truncated
        forces.append(res.peak_force)
        pressures.append(float(res.pressure_field.grid.max()))
    assert all(a > b for a, b in zip(forces, forces[1:])), forces
    assert all(a > b for a, b in zip(pressures, pressures[1:])), pressures
    budget.check()


TRUTH = MaterialParams(young_modulus=0.8e6, damping=2e-3, rate_gain=5.0, rate_exponent=0.8)


@criterion(6, "calibration round trip and 18 mm holdout")
def test_calibration_round_trip():
    budget = Budget(900)
    holdout = reference_configs()[1]
    holdout = replace(holdout, slab=replace(holdout.slab, thickness=0.018))
    truth_peak = simulate(TRUTH, holdout).peak_force
    for noise, tol in ((0.0, 0.05), (0.05, 0.15)):
        problem = synthetic_problem(TRUTH, reference_configs(), noise=noise, seed=1)
        result = fit(problem, restarts=1, seed=0, screen=8, max_evals=250, fatol=1e-7)
        for name in FIT_PARAMS:
            err = getattr(result.params, name) / getattr(TRUTH, name) - 1
            assert abs(err) <= tol, (noise, name, err)
        predicted = predict_holdout(result.params, holdout).peak_force
        assert abs(predicted / truth_peak - 1) <= 0.10, (noise, predicted, truth_peak)
    budget.check()


@criterion(7, "reduction, film boundary and drop-speed arithmetic")
def test_reference_arithmetic():
    budget = Budget(1)
    assert reduction(86.8, 11.2) == 87.1
    assert reduction(19.5, 11.3) == 42.1
    assert reduction(19.4, 8.0) == 58.8
    labels = classify(PressureField(np.array([[np.nextafter(10e6, 0.0), 10e6]])), FILMS["MS"]).labels
    assert labels.tolist() == [[BELOW, IN_RANGE]]
    assert round(impact_velocity(1.0), 3) == 4.429
    budget.check()


@criterion(8, "fall detection and permutation-invariant aggregation")
def test_damage_map_rule_and_determinism():
    budget = Budget(5)
    events, labels = twelve_episode_log()
    episodes = group_episodes(events)
    episodes["e05"] = []
    status = detect_falls(episodes, FEET)
    assert {k: v.is_fall for k, v in status.items()} == labels
    reference = format_heat_table(aggregate(events))
    rnd = random.Random(0)
    for _ in range(20):
        shuffled = list(events)
        rnd.shuffle(shuffled)
        assert format_heat_table(aggregate(shuffled)) == reference
    budget.check()


@criterion(9, "conformal flattening")
def test_lscm_correctness():
    budget = Budget(30)
    flat = grid_patch(6, 6, 0.1, 0.1)
    tpl = lscm(flat, [(0, (0.0, 0.0)), (6, (0.1, 0.0))])
    assert tpl.distortion.conformal_energy < 1e-10
    assert similarity_residual(tpl.uv, flat.vertices[:, :2]) < 1e-12

    curved = paraboloid(6)
    b = curved.boundary
    pins = [(int(b[0]), (0.0, 0.0)), (int(b[5]), (1.0, 0.0))]
    tpl = lscm(curved, pins)
    for i, uv in pins:
        assert tuple(tpl.uv[i]) == uv
    e0 = tpl.distortion.conformal_energy
    rng = np.random.default_rng(11)
    for _ in range(100):
        du = rng.normal(scale=1e-3, size=tpl.uv.shape)
        du[[i for i, _ in pins]] = 0.0
        assert distortion(curved, tpl.uv + du).conformal_energy >= e0
    budget.check()


@criterion(10, "reward kernels and termination rules")
def test_reward_kernels():
    budget = Budget(1)
    assert kernel(0.0, 0.7) == 1.0
    assert kernel(0.49, 0.7) == pytest.approx(math.exp(-1.0), rel=1e-15)
    cfg = RewardConfig(
        safe_weights={"forearm_l": 1.0},
        anchor_height_threshold=0.3,
        anchor_orientation_threshold=0.8,
    )
    frame = MimicFrame({"p": 0.2, "v": 1.5}, {"forearm_l"})
    pen = {"r_limit": -0.4, "r_smooth": -0.1, "r_contact": -2.0}
    lam = {"task": 0.5, "safe": 2.0, "limit": 1.0, "smooth": 3.0, "contact": 0.25}
    one = total_reward(frame, pen, replace(cfg, lambdas=lam))
    two = total_reward(frame, pen, replace(cfg, lambdas={k: 2 * v for k, v in lam.items()}))
    assert two == pytest.approx(2 * one, rel=1e-14)
    assert should_terminate(MimicFrame({}), cfg).reason == CONTINUE
    assert not should_terminate(MimicFrame({}, anchor_height_error=0.3), cfg).terminated
    assert should_terminate(MimicFrame({}, anchor_height_error=0.31), cfg).reason == ANCHOR_HEIGHT
    assert should_terminate(MimicFrame({}, anchor_orientation_error=0.81), cfg).reason == ANCHOR_ORIENTATION
    assert should_terminate(MimicFrame({}, {"head"}), cfg).reason == UNSAFE_CONTACT
    assert should_terminate(MimicFrame({}, {"head"}, 1.0, 1.0), cfg).reason == ANCHOR_HEIGHT
    budget.check()


PERFORMANCE_DROP = Path(__file__).resolve().parents[1] / "configs" / "perf_drop.cfg"


@criterion(11, "10k-vertex slab, 500 steps under 60 s")
def test_performance_sanity(tmp_path):
    assert generate_slab(SlabSpec(0.1, 0.1, 0.012, 0.0025)).n_vertices >= 10_000
    start = time.perf_counter()
    assert main(["drop", "--config", str(PERFORMANCE_DROP), "--out", str(tmp_path / "out")]) == EXIT_OK
    elapsed = time.perf_counter() - start
    manifest = read_kv(tmp_path / "out" / "manifest.txt")
    assert int(manifest["timing.steps"]) == 500
    assert float(manifest["timing.mean_step_ms"]) > 0
    print(f"500 steps in {elapsed:.1f} s, {manifest['timing.mean_step_ms']} ms per step")
    assert elapsed < 60.0


@pytest.fixture(scope="module")
def cli_inputs(tmp_path_factory):
    return write_inputs(tmp_path_factory.mktemp("acceptance-inputs"))


@criterion(12, "byte-identical CLI outputs for a fixed seed")
@pytest.mark.parametrize("name", ["gen-mesh", "drop", "calibrate", "sweep", "codesign", "damage-map", "pressure-stats", "unwrap", "rewards"])
def test_cli_determinism(tmp_path, cli_inputs, name):
    args = subcommands(cli_inputs)[name]
    runs = []
    for tag in ("a", "b"):
        assert main(args + ["--seed", "11", "--out", str(tmp_path / tag)]) == EXIT_OK
        runs.append(output_snapshot(tmp_path / tag))
    assert runs[0] == runs[1]
