"""
Closed-Loop Simulation
Plant loop driving a strategy through a cycle, plus the fuel metrics of a run
"""

from typing import Optional

import numpy as np

from app.exceptions import SimulationBoundError
from app.models.control import ControllerState
from app.models.powertrain import PowertrainParams
from app.models.simulation import DrivingCycle, SimConfig, SimLog, SimRecord
from app.services.base_service import BaseService
from app.services.powertrain import (
    ENVELOPE_TOL,
    battery_soc_step,
    build_powertrain,
    demand_power,
    genset_power_max_array,
    genset_solve,
    point_efficiency,
    top_decile_threshold,
)
from app.services.strategies import Strategy

# SOC slack for lattice levels sitting exactly on a bound
SOC_TOL = 1e-9


class Simulator(BaseService):
    """
    Plant loop. The actual cycle sample sets the demand; the strategy sets
    engine speed and generator torque; the battery takes the rest.
    """

    def __init__(self, params: Optional[PowertrainParams] = None, cfg: Optional[SimConfig] = None):
        super().__init__("Simulator")
        self.params = params or build_powertrain()
        self.cfg = cfg or SimConfig()
        v = self.params.vehicle
        self.plant_vehicle = v.model_copy(update={
            'mass': v.mass * self.cfg.mass_scale,
            'rolling_coeff': v.rolling_coeff * self.cfg.rolling_scale,
        })
        self.runs = 0

    def reset(self) -> None:
        self.runs = 0

    def initial_state(self, strategy: Strategy) -> ControllerState:
        return ControllerState(
            soc=self.cfg.soc_init,
            engine_speed=self.params.genset.idle_speed,
            history_length=strategy.history_length,
        )

    def run(self, cycle: DrivingCycle, strategy: Strategy) -> SimLog:
        """Simulate the whole cycle; a SOC bound violation stops the run"""
        b, g = self.params.battery, self.params.genset
        dt = cycle.dt
        accel = cycle.accel
        strategy.reset()
        state = self.initial_state(strategy)
        log = SimLog(strategy=strategy.name, soc_init=state.soc)
        fuel_cum = 0.0

        for k in range(len(cycle)):
            p_req = demand_power(cycle.v[k], accel[k], cycle.slope[k], cycle.yaw[k], self.plant_vehicle)
            cmd = strategy.command(state, cycle, k)
            saturated = cmd.saturated

            max_dn = g.speed_rate_max * dt
            speed = min(max(cmd.engine_speed_cmd, state.engine_speed - max_dn), state.engine_speed + max_dn)
            speed = min(max(speed, g.idle_speed), g.engine_speed_max)
            dn_dt = (speed - state.engine_speed) / dt
            cap = float(genset_power_max_array(speed, dn_dt, g))
            p_g = min(max(cmd.gen_torque_cmd * speed / 9.55 * g.gen_eff, 0.0), cap)

            p_brake = unmet = 0.0
            p_b = p_req - p_g
            if p_b > b.p_discharge_max:
                # Genset picks up what the pack cannot deliver
                p_g = min(cap, p_req - b.p_discharge_max)
                saturated = True
                unmet = max(0.0, p_req - p_g - b.p_discharge_max)
                if unmet > 0.0:
                    self.log_warning("Demand exceeds supply", step=k, p_req=p_req, unmet=unmet)
                p_b = p_req - unmet - p_g
            elif p_b < b.p_charge_max:
                p_g = max(0.0, p_req - b.p_charge_max)
                # Regeneration beyond the charge limit goes to the service brakes
                p_brake = max(0.0, b.p_charge_max - (p_req - p_g))
                saturated = saturated or p_brake == 0.0
                p_b = p_req + p_brake - p_g

            op = genset_solve(speed, p_g, dn_dt, g)
            soc = battery_soc_step(state.soc, p_b, b, dt, check_bounds=False)
            fuel_cum += op.fuel_rate * dt
            if b.soc_min - SOC_TOL <= soc <= b.soc_max + SOC_TOL:
                soc = min(max(soc, b.soc_min), b.soc_max)
            log.records.append(SimRecord(
                t=float(cycle.t[k]),
                v=float(cycle.v[k]),
                soc=float(soc),
                p_req=float(p_req),
                p_b=float(p_b),
                p_g=float(p_g),
                p_brake=float(p_brake),
                unmet=float(unmet),
                n_e=float(speed),
                t_e=op.engine_torque,
                t_g=op.torque,
                fuel_rate=op.fuel_rate,
                fuel_cum=fuel_cum,
                fallback=cmd.fallback,
                saturated=saturated,
            ))
            if not b.soc_min <= soc <= b.soc_max:
                self.log_error("SOC bound violated", step=k, soc=soc, strategy=strategy.name)
                raise SimulationBoundError(
                    f"SOC {soc:.6f} left [{b.soc_min}, {b.soc_max}] at step {k}",
                    partial_log=log, step=k, soc=soc,
                )

            state.soc = soc
            state.engine_speed = speed
            state.gen_torque = op.torque
            state.step = k + 1
            state.observe(cycle.v_ms[k], cycle.yaw[k])

        self.runs += 1
        self.update_timestamp()
        self.log_info(
            "Simulation complete",
            strategy=strategy.name,
            cycle=cycle.name,
            fuel=round(log.total_fuel, 3),
            soc_final=round(log.soc_final, 5),
            fallbacks=log.fallback_steps,
        )
        return log


def simulate(
    cycle: DrivingCycle,
    strategy: Strategy,
    params: PowertrainParams,
    cfg: Optional[SimConfig] = None,
) -> SimLog:
    return Simulator(params, cfg).run(cycle, strategy)


def equivalent_fuel(log: SimLog, params: PowertrainParams, soc_target: float = 0.7) -> float:
    """Raw fuel corrected for the net SOC change at the peak conversion efficiency, g"""
    b, g = params.battery, params.genset
    grams_per_soc = b.capacity * float(b.voc(soc_target)) / (g.q_lhv * g.eta_peak * g.gen_eff)
    return log.total_fuel + (log.soc_init - log.soc_final) * grams_per_soc


def top_decile_fraction(log: SimLog, params: PowertrainParams) -> float:
    """Share of loaded engine points whose efficiency is in the map's top decile"""
    g = params.genset
    torque, speed = log.column('t_e'), log.column('n_e')
    loaded = torque > ENVELOPE_TOL
    if not np.any(loaded):
        return 0.0
    eff = point_efficiency(torque[loaded], speed[loaded], g)
    return float(np.mean(eff >= top_decile_threshold(g)))


def power_balance_residual(log: SimLog) -> float:
    """Largest |P_g + P_b − P_brake + unmet − P_req| relative to max(|P_req|, 1 W)"""
    if not log.records:
        return 0.0
    p_req = log.column('p_req')
    supplied = log.column('p_g') + log.column('p_b') - log.column('p_brake') + log.column('unmet')
    residual = np.abs(supplied - p_req)
    return float(np.max(residual / np.maximum(np.abs(p_req), 1.0)))
