#!/usr/bin/env python3
"""Power following, receding-horizon control and the offline benchmark."""

import numpy as np
import pytest
from scipy import optimize

from app.config import ParameterSet
from app.exceptions import InputError
from app.models.control import BenchmarkConfig, ControllerState, MpcConfig, PfConfig
from app.models.optimization import TerminalMode
from app.models.prediction import PredictionConfig, PredictorKind, PredictorModel
from app.models.simulation import DrivingCycle
from app.services.powertrain import demand_power
from app.services.simulation import Simulator
from app.services.strategies import (
    GlobalDpController,
    MpcController,
    PowerFollowingController,
    Strategy,
    benchmark_grid,
    build_strategy,
    global_dp_benchmark,
    mpc_step,
    power_following_step,
    validate_command,
)


class CheckedStrategy(Strategy):
    """Wraps a strategy and validates every command it issues"""

    def __init__(self, inner: Strategy, params):
        super().__init__(inner.name)
        self.inner = inner
        self.params = params
        self.problems = []

    @property
    def history_length(self):
        return self.inner.history_length

    def reset(self):
        self.inner.reset()
        self.problems = []

    def command(self, state, cycle, k):
        cmd = self.inner.command(state, cycle, k)
        self.problems += validate_command(cmd, self.params, state.engine_speed, cycle.dt)
        return cmd


def planned_model(**overrides) -> PredictorModel:
    return PredictorModel(PredictorKind.PLANNED, PredictionConfig(**overrides))


def flat_cycle(kmh: float, steps: int = 20) -> DrivingCycle:
    return DrivingCycle(
        t=np.arange(steps, dtype=float),
        v=np.full(steps, kmh),
        planned=np.full(steps, kmh / 3.6),
        name="flat",
    )


def settle(controller: PowerFollowingController, state: ControllerState, kmh: float, steps: int = 40):
    cmd = None
    for _ in range(steps):
        cmd = power_following_step(state, kmh, 0.0, controller)
        state.engine_speed = cmd.engine_speed_cmd
        state.gen_torque = cmd.gen_torque_cmd
    return cmd


# ---------------------------------------------------------------------------
# Power following
# ---------------------------------------------------------------------------

def test_power_following_tracks_demand_at_target(powertrain):
    controller = PowerFollowingController(powertrain)
    cmd = settle(controller, ControllerState(soc=0.7, engine_speed=800.0), 36.0)
    assert abs(cmd.p_b) < 1.0
    assert cmd.p_g == pytest.approx(demand_power(36.0, 0.0, 0.0, 0.0, powertrain.vehicle), rel=1e-4)


def test_power_following_charges_below_target(powertrain):
    controller = PowerFollowingController(powertrain)
    cmd = settle(controller, ControllerState(soc=0.65, engine_speed=800.0), 0.0)
    assert cmd.p_g == pytest.approx(30000.0, rel=1e-9)
    assert cmd.p_b == pytest.approx(-30000.0, rel=1e-9)


def test_power_following_slews_speed(powertrain):
    controller = PowerFollowingController(powertrain)
    state = ControllerState(soc=0.7, engine_speed=800.0)
    settle(controller, state, 10.0)
    for _ in range(15):
        previous = state.engine_speed
        cmd = power_following_step(state, 40.0, 0.0, controller)
        assert abs(cmd.engine_speed_cmd - previous) <= 400.0 + 1e-9
        assert validate_command(cmd, powertrain, previous) == []
        state.engine_speed = cmd.engine_speed_cmd
        state.gen_torque = cmd.gen_torque_cmd


def test_min_fuel_speed_prefers_sweet_spot(powertrain):
    controller = PowerFollowingController(powertrain)
    g = powertrain.genset
    assert controller.min_fuel_speed(0.0) == g.idle_speed
    sweet = 240.0 * 2200.0 / 9.55 * g.gen_eff
    assert controller.min_fuel_speed(sweet) == pytest.approx(2200.0, abs=200.0)


def test_power_following_run_is_valid(powertrain):
    checked = CheckedStrategy(PowerFollowingController(powertrain, PfConfig()), powertrain)
    speeds = np.concatenate([np.linspace(0.0, 30.0, 41), np.full(20, 30.0), np.linspace(30.0, 0.0, 31)])
    cycle = DrivingCycle(t=np.arange(len(speeds), dtype=float), v=speeds)
    Simulator(powertrain).run(cycle, checked)
    assert checked.problems == []


# ---------------------------------------------------------------------------
# Receding horizon
# ---------------------------------------------------------------------------

def test_mpc_holds_soc_at_the_sweet_spot(powertrain):
    g = powertrain.genset
    p_sweet = 240.0 * 2200.0 / 9.55 * g.gen_eff
    v_ms = optimize.brentq(lambda v: demand_power(v * 3.6, 0.0, 0.0, 0.0, powertrain.vehicle) - p_sweet, 0.1, 30.0)
    controller = MpcController(powertrain, MpcConfig(band_levels=10))
    state = ControllerState(soc=0.7, engine_speed=2200.0, gen_torque=240.0)
    cmd = controller.step(state, None, forecast=np.full(5, v_ms))
    assert abs(cmd.p_b) <= 4500.0
    assert not cmd.fallback
    assert validate_command(cmd, powertrain, 2200.0) == []


def test_perfect_forecast_over_whole_cycle_matches_benchmark(powertrain):
    kmh = np.array([18.0, 21.6, 25.2, 25.2, 21.6, 18.0])
    cycle = DrivingCycle(t=np.arange(6, dtype=float), v=kmh, name="short")
    bench_cfg = BenchmarkConfig(soc_band=0.001)
    benchmark = global_dp_benchmark(cycle, powertrain, bench_cfg)

    cfg = MpcConfig(
        horizon=6,
        control_horizon=6,
        grid=benchmark_grid(powertrain, bench_cfg),
        w_soc=0.0,
        eq_efficiency=0.0,
        terminal=TerminalMode.HARD,
    )
    controller = MpcController(powertrain, cfg)
    state = ControllerState(soc=bench_cfg.soc_init, engine_speed=powertrain.genset.idle_speed)
    cmd = controller.step(state, None, planned_yaw=np.zeros(6), forecast=cycle.v_ms)

    assert controller.last_solution.total_cost == pytest.approx(benchmark.total_cost, rel=1e-9)
    first = benchmark.first_control()
    assert cmd.engine_speed_cmd == first.speed_to
    assert cmd.p_g == pytest.approx(first.p_g, rel=1e-6)


def test_mpc_ignores_the_actual_future(powertrain):
    controller = MpcController(powertrain, MpcConfig(predictor=planned_model(), band_levels=5))
    original = flat_cycle(36.0)
    perturbed = flat_cycle(36.0)
    perturbed.v[6:] = 50.0

    def decide(cycle):
        controller.reset()
        state = ControllerState(soc=0.7, engine_speed=1600.0, step=5)
        for speed in cycle.v_ms[:5]:
            state.observe(speed)
        return controller.command(state, cycle, 5)

    assert decide(original) == decide(perturbed)


def test_mpc_does_not_discharge_at_soc_min(powertrain):
    controller = MpcController(powertrain, MpcConfig(band_levels=10))
    state = ControllerState(soc=0.6, engine_speed=1600.0)
    cmd = controller.step(state, None, forecast=np.full(5, 8.0))
    assert cmd.p_b <= 1e-9
    assert validate_command(cmd, powertrain, 1600.0) == []


def test_mpc_step_uses_the_predictor(powertrain):
    controller = MpcController(powertrain, MpcConfig(predictor=planned_model(), band_levels=5))
    state = ControllerState(soc=0.7, engine_speed=1600.0)
    cmd = mpc_step(state, np.full(5, 10.0), controller)
    assert not cmd.fallback
    assert controller.last_solution is not None
    assert len(controller.last_solution.trajectory) == 5


def test_mpc_falls_back_when_infeasible(powertrain):
    controller = MpcController(powertrain, MpcConfig(band_levels=5))
    state = ControllerState(soc=0.7, engine_speed=800.0)
    cmd = controller.step(state, None, forecast=np.full(5, 60.0))
    assert cmd.fallback
    assert controller.fallback_steps == 1


def test_mpc_configuration_errors(powertrain):
    with pytest.raises(InputError):
        MpcController(powertrain, MpcConfig(horizon=4, control_horizon=4, predictor=planned_model()))
    controller = MpcController(powertrain, MpcConfig())
    with pytest.raises(InputError):
        controller.step(ControllerState(soc=0.7, engine_speed=800.0), np.zeros(5))
    with pytest.raises(InputError):
        controller.step(ControllerState(soc=0.7, engine_speed=800.0), None, forecast=np.zeros(3))


# ---------------------------------------------------------------------------
# Benchmark and factory
# ---------------------------------------------------------------------------

def test_benchmark_replay_matches_solution(powertrain):
    cycle = flat_cycle(18.0, steps=8)
    solution = global_dp_benchmark(cycle, powertrain, BenchmarkConfig(soc_band=0.001))
    controller = GlobalDpController(solution)
    log = Simulator(powertrain).run(cycle, controller)
    assert log.soc_final == pytest.approx(solution.soc_path[-1], abs=1e-9)
    assert log.total_fuel == pytest.approx(solution.total_fuel, rel=1e-6)


def test_build_strategy(powertrain):
    params = ParameterSet()
    pf = build_strategy('pf', params, powertrain)
    assert isinstance(pf, PowerFollowingController)
    assert pf.name == 'pf'
    with pytest.raises(InputError):
        build_strategy('mpc-nn', params, powertrain)
    with pytest.raises(InputError):
        build_strategy('dp', params, powertrain)
    model = PredictorModel(PredictorKind.MULTISTEP_NN, PredictionConfig())
    mpc = build_strategy('mpc-nn', params, powertrain, predictors={'multistep-nn': model})
    assert isinstance(mpc, MpcController)
    assert mpc.history_length == 10
