"""
Energy Management Strategies
Power-following baseline, receding-horizon DP controller and the offline
full-information benchmark.

Every strategy answers ``command(state, cycle, k)`` for the plant loop. The
controller only sees the state (SOC, engine speed, past speeds) and the
planner's intentions from step ``k`` on; the actual future of the cycle is
never read.
"""

from abc import abstractmethod
from typing import Dict, List, Optional, Union

import numpy as np
import structlog

from app.config import ParameterSet
from app.exceptions import DpInfeasibleError, InputError
from app.models.control import (
    BenchmarkConfig,
    ControlCommand,
    ControllerState,
    MpcConfig,
    PfConfig,
    StrategyKind,
)
from app.models.optimization import DpSolution, OcpProblem, SocGrid, StageRecord, TerminalMode
from app.models.powertrain import PowertrainParams
from app.models.prediction import PredictionInput, PredictorKind, PredictorModel
from app.models.simulation import DrivingCycle
from app.services.base_service import BaseService
from app.services.cycle_prediction import predict
from app.services.dp_optimizer import dp_solve, stage_demand
from app.services.powertrain import (
    ENVELOPE_TOL,
    RPM_TO_RAD,
    demand_power,
    fuel_rate_array,
    genset_power_max_array,
)

logger = structlog.get_logger(__name__)


class Strategy(BaseService):
    """A closed-loop energy-management strategy"""

    # Past speeds the plant loop keeps for this strategy
    history_length = 10

    @abstractmethod
    def command(self, state: ControllerState, cycle: DrivingCycle, k: int) -> ControlCommand:
        """Command for step ``k``"""


# ---------------------------------------------------------------------------
# Power following
# ---------------------------------------------------------------------------

class PowerFollowingController(Strategy):
    """
    Rule-based baseline: the genset follows low-pass filtered demand plus an
    SOC correction, running on the minimum-fuel speed for its output.
    """

    def __init__(
        self,
        params: PowertrainParams,
        cfg: Optional[PfConfig] = None,
        name: str = "PowerFollowingController",
    ):
        super().__init__(name)
        self.params = params
        self.cfg = cfg or PfConfig()
        g = params.genset
        self.speeds = np.arange(g.idle_speed, g.engine_speed_max + 0.5 * self.cfg.speed_step, self.cfg.speed_step)
        self.p_g_max = float(np.max(genset_power_max_array(self.speeds, 0.0, g)))
        self._filtered: Optional[float] = None

    def reset(self) -> None:
        self._filtered = None

    def min_fuel_speed(self, p_g: float) -> float:
        """Steady-state speed that delivers ``p_g`` with the least fuel (lowest speed on ties)"""
        g = self.params.genset
        gen_torque = 9.55 * p_g / (self.speeds * g.gen_eff)
        fuel = fuel_rate_array(gen_torque, self.speeds, g)
        capable = genset_power_max_array(self.speeds, 0.0, g) >= p_g - ENVELOPE_TOL
        fuel = np.where(capable & np.isfinite(fuel), fuel, np.inf)
        if not np.any(np.isfinite(fuel)):
            return float(self.speeds[np.argmax(genset_power_max_array(self.speeds, 0.0, g))])
        return float(self.speeds[int(np.argmin(fuel))])

    def step(
        self,
        state: ControllerState,
        v_now: float,
        omega_now: float,
        accel: float = 0.0,
        slope: float = 0.0,
    ) -> ControlCommand:
        """Command from the current speed (km/h) and yaw rate (rad/s)"""
        p_req = demand_power(v_now, accel, slope, omega_now, self.params.vehicle)
        return self.command_for_demand(state, p_req)

    def command_for_demand(self, state: ControllerState, p_req: float, fallback: bool = False) -> ControlCommand:
        cfg, b, g = self.cfg, self.params.battery, self.params.genset
        alpha = cfg.dt / (cfg.tau + cfg.dt)
        self._filtered = p_req if self._filtered is None else self._filtered + alpha * (p_req - self._filtered)

        target = self._filtered + cfg.k_soc * (cfg.soc_target - state.soc) * cfg.p_corr
        target = min(max(target, 0.0), self.p_g_max)
        # The battery takes the residual; keep it inside the pack limits when the genset can
        bounded = min(max(target, p_req - b.p_discharge_max), p_req - b.p_charge_max)
        bounded = min(max(bounded, 0.0), self.p_g_max)
        if abs(bounded - target) > ENVELOPE_TOL:
            self.log_warning("Battery residual saturated", step=state.step, p_req=p_req, p_g=bounded)
        target = bounded

        max_dn = g.speed_rate_max * cfg.dt
        speed = min(max(self.min_fuel_speed(target), state.engine_speed - max_dn), state.engine_speed + max_dn)
        speed = min(max(speed, g.idle_speed), g.engine_speed_max)
        dn_dt = (speed - state.engine_speed) / cfg.dt

        cap = float(genset_power_max_array(speed, dn_dt, g))
        gen_torque = 9.55 * min(target, cap) / (speed * g.gen_eff)
        slew = g.torque_rate_max * cfg.dt
        gen_torque = min(max(gen_torque, state.gen_torque - slew), state.gen_torque + slew)
        gen_torque = min(max(gen_torque, 0.0), 9.55 * cap / (speed * g.gen_eff))

        p_g = gen_torque * speed / 9.55 * g.gen_eff
        p_b = p_req - p_g
        return ControlCommand(
            engine_speed_cmd=speed,
            gen_torque_cmd=gen_torque,
            p_g=p_g,
            p_b=p_b,
            engine_torque=gen_torque + RPM_TO_RAD * g.inertia * dn_dt,
            fallback=fallback,
            saturated=not (b.p_charge_max - ENVELOPE_TOL <= p_b <= b.p_discharge_max + ENVELOPE_TOL),
        )

    def command(self, state: ControllerState, cycle: DrivingCycle, k: int) -> ControlCommand:
        return self.step(state, cycle.v[k], cycle.yaw[k], cycle.accel[k], cycle.slope[k])


def power_following_step(
    state: ControllerState,
    v_now: float,
    omega_now: float,
    controller: PowerFollowingController,
) -> ControlCommand:
    """One power-following decision (the controller carries the filter state)"""
    return controller.step(state, v_now, omega_now)


# ---------------------------------------------------------------------------
# Receding horizon
# ---------------------------------------------------------------------------

def _command_from_stage(rec: StageRecord) -> ControlCommand:
    return ControlCommand(
        engine_speed_cmd=rec.speed_to,
        gen_torque_cmd=rec.gen_torque,
        p_g=rec.p_g,
        p_b=rec.p_b,
        engine_torque=rec.engine_torque,
    )


class MpcController(Strategy):
    """
    Receding-horizon controller: predict p speeds, solve the horizon by DP,
    apply the first stage. DP infeasibility falls back to power following.
    """

    def __init__(
        self,
        params: PowertrainParams,
        cfg: MpcConfig,
        fallback: Optional[PowerFollowingController] = None,
        name: str = "MpcController",
    ):
        super().__init__(name)
        self.params = params
        self.cfg = cfg
        self.fallback = fallback or PowerFollowingController(params, PfConfig(soc_target=cfg.soc_target, dt=cfg.dt))
        self.fallback_steps = 0
        self.last_solution: Optional[DpSolution] = None
        if cfg.predictor is not None and cfg.predictor.config.horizon != cfg.horizon:
            raise InputError(
                f"predictor horizon {cfg.predictor.config.horizon} differs from MPC horizon {cfg.horizon}"
            )

    def reset(self) -> None:
        self.fallback.reset()
        self.fallback_steps = 0
        self.last_solution = None

    @property
    def history_length(self) -> int:
        return self.cfg.predictor.config.history if self.cfg.predictor is not None else 10

    @property
    def soc_value(self) -> float:
        """Grams of fuel per unit SOC at the reference conversion efficiency"""
        b, g = self.params.battery, self.params.genset
        if self.cfg.eq_efficiency <= 0:
            return 0.0
        return float(b.capacity * b.voc(self.cfg.soc_target) / (g.q_lhv * self.cfg.eq_efficiency * g.gen_eff))

    def grid_for(self, soc: float) -> SocGrid:
        if self.cfg.grid is not None:
            return self.cfg.grid
        b, g = self.params.battery, self.params.genset
        step = self.cfg.power_resolution * self.cfg.dt / (float(b.voc(self.cfg.soc_target)) * b.capacity)
        speeds = np.linspace(g.idle_speed, g.engine_speed_max, self.cfg.speed_levels)
        return SocGrid.band(soc, step, self.cfg.band_levels, self.cfg.band_levels, (b.soc_min, b.soc_max), speeds)

    def forecast(self, state: ControllerState, planned_window) -> np.ndarray:
        """Predicted speeds (m/s) for the next ``horizon`` steps"""
        if self.cfg.predictor is None:
            raise InputError("MPC needs a trained predictor or an explicit forecast")
        cfg = self.cfg.predictor.config
        planned = np.asarray(planned_window, dtype=float)[:cfg.planned]
        if len(planned) < cfg.planned:
            raise InputError(f"planned window needs {cfg.planned} values, got {len(planned)}")
        history = state.history_window()
        if len(history) != cfg.history:
            raise InputError(f"controller keeps {len(history)} past speeds, predictor expects {cfg.history}")
        return predict(self.cfg.predictor, PredictionInput(history, planned, cfg.horizon))

    def build_problem(self, state: ControllerState, v_pred, yaw=None) -> OcpProblem:
        v_pred = np.asarray(v_pred, dtype=float)
        if len(v_pred) != self.cfg.horizon:
            raise InputError(f"forecast has {len(v_pred)} steps, MPC horizon is {self.cfg.horizon}")
        if yaw is None:
            yaw = np.full(self.cfg.horizon, state.yaw)
        return OcpProblem(
            v=v_pred * 3.6,
            params=self.params,
            soc_init=state.soc,
            soc_target=self.cfg.soc_target,
            yaw=np.asarray(yaw, dtype=float)[:self.cfg.horizon],
            w_fuel=self.cfg.w_fuel,
            w_soc=self.cfg.w_soc,
            dt=self.cfg.dt,
            speed_init=state.engine_speed,
            terminal=self.cfg.terminal,
            soc_value=self.soc_value,
            control_horizon=self.cfg.control_horizon,
        )

    def step(
        self,
        state: ControllerState,
        planned_window,
        planned_yaw=None,
        forecast=None,
    ) -> ControlCommand:
        """
        Command for the current step.

        ``forecast`` (m/s) replaces the predictor, e.g. with the true future.
        """
        v_pred = self.forecast(state, planned_window) if forecast is None else np.asarray(forecast, float)
        prob = self.build_problem(state, v_pred, planned_yaw)
        try:
            self.last_solution = dp_solve(prob, self.grid_for(state.soc))
        except DpInfeasibleError as exc:
            self.fallback_steps += 1
            self.log_warning("DP infeasible, falling back to power following", step=state.step, stage=exc.stage)
            return self.fallback.command_for_demand(state, stage_demand(prob, 0), fallback=True)
        return _command_from_stage(self.last_solution.first_control())

    def command(self, state: ControllerState, cycle: DrivingCycle, k: int) -> ControlCommand:
        window = cycle.planned_window(k, max(self.cfg.horizon, self._planned_length()))
        planned_yaw = None
        if cycle.planned_yaw is not None:
            yaw = cycle.planned_yaw[k:k + self.cfg.horizon]
            planned_yaw = np.concatenate([yaw, np.repeat(yaw[-1:], self.cfg.horizon - len(yaw))])
        return self.step(state, window, planned_yaw)

    def _planned_length(self) -> int:
        return self.cfg.predictor.config.planned if self.cfg.predictor is not None else self.cfg.horizon


def mpc_step(state: ControllerState, planned_window, controller: MpcController) -> ControlCommand:
    """One receding-horizon decision"""
    return controller.step(state, planned_window)


# ---------------------------------------------------------------------------
# Offline benchmark
# ---------------------------------------------------------------------------

def benchmark_problem(cycle: DrivingCycle, params: PowertrainParams, cfg: BenchmarkConfig) -> OcpProblem:
    return OcpProblem(
        v=cycle.v,
        params=params,
        soc_init=cfg.soc_init,
        soc_target=cfg.soc_target,
        yaw=cycle.yaw,
        slope=cycle.slope,
        accel=cycle.accel,
        w_fuel=cfg.w_fuel,
        w_soc=cfg.w_soc,
        dt=cfg.dt,
        speed_init=params.genset.idle_speed,
        terminal=TerminalMode.HARD,
    )


def benchmark_grid(params: PowertrainParams, cfg: BenchmarkConfig) -> SocGrid:
    if cfg.grid is not None:
        return cfg.grid
    b, g = params.battery, params.genset
    step = cfg.power_resolution * cfg.dt / (float(b.voc(cfg.soc_init)) * b.capacity)
    levels = int(round(cfg.soc_band / step))
    speeds = np.linspace(g.idle_speed, g.engine_speed_max, cfg.speed_levels)
    return SocGrid.band(cfg.soc_init, step, levels, levels, (b.soc_min, b.soc_max), speeds)


def global_dp_benchmark(
    cycle: DrivingCycle,
    params: PowertrainParams,
    cfg: Optional[BenchmarkConfig] = None,
) -> DpSolution:
    """One DP over the whole known cycle, ending at the initial SOC when possible"""
    cfg = cfg or BenchmarkConfig()
    prob = benchmark_problem(cycle, params, cfg)
    grid = benchmark_grid(params, cfg)
    try:
        return dp_solve(prob, grid)
    except DpInfeasibleError as exc:
        if exc.stage is not None and exc.stage < prob.horizon:
            raise
        logger.warning("hard terminal infeasible, relaxing to soft", cycle=cycle.name)
        prob.terminal = TerminalMode.SOFT
        return dp_solve(prob, grid)


class GlobalDpController(Strategy):
    """Replays a benchmark solution through the plant"""

    def __init__(self, solution: DpSolution, name: str = "GlobalDpController"):
        super().__init__(name)
        self.solution = solution

    def reset(self) -> None:
        pass

    def command(self, state: ControllerState, cycle: DrivingCycle, k: int) -> ControlCommand:
        return _command_from_stage(self.solution.trajectory[k])


# ---------------------------------------------------------------------------
# Command checks
# ---------------------------------------------------------------------------

def validate_command(
    cmd: ControlCommand,
    params: PowertrainParams,
    previous_speed: float,
    dt: float = 1.0,
) -> List[str]:
    """Independent envelope and battery-bound checks of a command (empty when valid)"""
    b, g = params.battery, params.genset
    problems = []
    speed = cmd.engine_speed_cmd
    if not (g.idle_speed - ENVELOPE_TOL <= speed <= g.engine_speed_max + ENVELOPE_TOL):
        problems.append(f"engine speed {speed:.1f} rpm outside envelope")
        return problems
    if abs(speed - previous_speed) > g.speed_rate_max * dt + ENVELOPE_TOL:
        problems.append(f"speed change {speed - previous_speed:.1f} rpm exceeds rate limit")
    if cmd.gen_torque_cmd < -ENVELOPE_TOL or cmd.p_g < -ENVELOPE_TOL:
        problems.append("generator commanded to absorb power")
    if cmd.gen_torque_cmd > float(g.gen_torque_max(speed)) + ENVELOPE_TOL:
        problems.append(f"generator torque {cmd.gen_torque_cmd:.1f} N·m exceeds envelope")
    if cmd.engine_torque > float(g.engine_torque_max(speed)) + ENVELOPE_TOL:
        problems.append(f"engine torque {cmd.engine_torque:.1f} N·m exceeds envelope")
    if cmd.engine_torque * speed / 9.55 > g.engine_power_max + ENVELOPE_TOL:
        problems.append("engine power limit exceeded")
    if not (b.p_charge_max - ENVELOPE_TOL <= cmd.p_b <= b.p_discharge_max + ENVELOPE_TOL):
        problems.append(f"battery power {cmd.p_b:.0f} W outside pack limits")
    return problems


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

# Predictor each receding-horizon strategy runs on
STRATEGY_PREDICTORS = {
    StrategyKind.MPC_NN: PredictorKind.MULTISTEP_NN,
    StrategyKind.MPC_CNN_LSTM: PredictorKind.CNN_LSTM,
}


def build_strategy(
    kind: Union[StrategyKind, str],
    params: ParameterSet,
    powertrain: PowertrainParams,
    cycle: Optional[DrivingCycle] = None,
    predictors: Optional[Dict[str, PredictorModel]] = None,
    grid: Optional[SocGrid] = None,
    **mpc_overrides,
) -> Strategy:
    """
    Configure a strategy from the parameter set.

    MPC strategies need their predictor in ``predictors`` (keyed by predictor
    kind); the global benchmark needs the whole ``cycle``. A ``grid`` replaces
    the band lattices of both.
    """
    kind = StrategyKind(kind)
    predictors = predictors or {}
    if kind is StrategyKind.POWER_FOLLOWING:
        return PowerFollowingController(powertrain, PfConfig.from_parameters(params), name=kind.value)
    if kind is StrategyKind.GLOBAL_DP:
        if cycle is None:
            raise InputError("the global benchmark needs the full cycle")
        overrides = {} if grid is None else {"grid": grid}
        solution = global_dp_benchmark(cycle, powertrain, BenchmarkConfig.from_parameters(params, **overrides))
        return GlobalDpController(solution, name=kind.value)

    predictor_kind = STRATEGY_PREDICTORS[kind]
    predictor = predictors.get(predictor_kind.value)
    if predictor is None:
        raise InputError(f"strategy {kind.value} needs a trained {predictor_kind.value} predictor")
    if grid is not None:
        mpc_overrides["grid"] = grid
    cfg = MpcConfig.from_parameters(params, predictor, **mpc_overrides)
    fallback = PowerFollowingController(powertrain, PfConfig.from_parameters(params, dt=cfg.dt))
    return MpcController(powertrain, cfg, fallback=fallback, name=kind.value)
