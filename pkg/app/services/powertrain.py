"""
Powertrain Models
Demand power, battery SOC dynamics, engine-generator coupling and fuel map.

All functions are pure. The ``*_array`` variants skip argument checks and
return NaN / masks instead of raising; the DP evaluates whole lattices with
them and the checked scalar functions delegate to them so both paths produce
identical numbers.
"""

import math
from typing import Optional, Sequence, Tuple

import numpy as np

from app.config import ParameterSet
from app.exceptions import (
    BoundViolationError,
    EnvelopeError,
    InfeasiblePowerError,
    InputError,
)
from app.models.powertrain import (
    BatteryParams,
    FuelMap,
    GensetParams,
    OperatingPoint,
    PowertrainParams,
    VehicleParams,
)

RPM_TO_RAD = math.pi / 30.0
# Allowance for round-off when a torque sits exactly on an envelope knot
ENVELOPE_TOL = 1e-9


def _require_finite(**values) -> None:
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise InputError(f"{name} must be finite", argument=name)


# ---------------------------------------------------------------------------
# Vehicle demand
# ---------------------------------------------------------------------------

def demand_power_array(v, a, theta, omega, p: VehicleParams) -> np.ndarray:
    """Electrical demand at the DC bus, W; v in km/h, yaw rate in rad/s"""
    v = np.asarray(v, dtype=float)
    m, g = p.mass, p.gravity
    force = (
        p.rolling_coeff * m * g
        + p.air_coeff * p.frontal_area * v ** 2 / 21.15
        + m * np.asarray(a, dtype=float)
        + m * g * np.sin(theta)
    )
    steering = 0.25 * p.steering_coeff * m * g * np.abs(omega) * p.track_length
    tractive = force * v / 3.6 + steering
    driveline = p.motor_eff * p.transmission_eff
    # Motoring divides by the driveline efficiency, regeneration multiplies
    return np.where(tractive >= 0.0, tractive / driveline, tractive * driveline)


def demand_power(v: float, a: float, theta: float, omega: float, p: VehicleParams) -> float:
    """Vehicle demand power P_req in watts"""
    _require_finite(v=v, a=a, theta=theta, omega=omega)
    if np.any(np.asarray(v) < 0):
        raise InputError("vehicle speed must be non-negative", v=float(np.min(v)))
    return float(demand_power_array(v, a, theta, omega, p))


# ---------------------------------------------------------------------------
# Battery
# ---------------------------------------------------------------------------

def voc_lookup(soc: float, b: BatteryParams) -> float:
    """Open-circuit voltage by piecewise-linear interpolation of the curve"""
    _require_finite(soc=soc)
    if soc < 0.0 or soc > 1.0:
        raise InputError(f"SOC {soc} outside [0, 1]", soc=soc)
    return float(b.voc(soc))


def battery_current_array(p_b, voc, b: BatteryParams) -> np.ndarray:
    """Pack current for a terminal power; NaN where the discriminant is negative"""
    disc = voc ** 2 - 4.0 * b.internal_resistance * p_b
    with np.errstate(invalid='ignore'):
        root = np.sqrt(disc)
    # (V - sqrt(V^2 - 4RP)) / 2R written without the cancellation
    return np.where(disc >= 0.0, 2.0 * p_b / (voc + root), np.nan)


def battery_soc_step(
    soc: float,
    p_b: float,
    b: BatteryParams,
    dt: float = 1.0,
    check_bounds: bool = True,
) -> float:
    """Advance SOC by one step under battery power ``p_b`` (positive discharges)"""
    _require_finite(soc=soc, p_b=p_b, dt=dt)
    if soc < 0.0 or soc > 1.0:
        raise InputError(f"SOC {soc} outside [0, 1]", soc=soc)
    voc = b.voc(soc)
    if voc ** 2 < 4.0 * b.internal_resistance * p_b:
        raise InfeasiblePowerError(
            f"battery cannot deliver {p_b:.0f} W at SOC {soc:.4f}", p_b=p_b, soc=soc
        )
    current = float(battery_current_array(p_b, voc, b))
    soc_next = soc - dt * current / b.capacity
    if check_bounds and not (b.soc_min <= soc_next <= b.soc_max):
        raise BoundViolationError(
            f"SOC {soc_next:.6f} leaves [{b.soc_min}, {b.soc_max}]", soc=soc_next, p_b=p_b
        )
    return soc_next


def battery_power_from_dsoc_array(dsoc, voc, b: BatteryParams, dt: float = 1.0) -> np.ndarray:
    charge = b.capacity * dsoc / dt
    return -voc * charge - charge ** 2 * b.internal_resistance


def battery_power_from_dsoc(dsoc: float, soc: float, b: BatteryParams, dt: float = 1.0) -> float:
    """Battery power that moves SOC by ``dsoc`` over one step; inverse of battery_soc_step"""
    _require_finite(dsoc=dsoc, soc=soc, dt=dt)
    if soc < 0.0 or soc > 1.0:
        raise InputError(f"SOC {soc} outside [0, 1]", soc=soc)
    return float(battery_power_from_dsoc_array(dsoc, b.voc(soc), b, dt))


# ---------------------------------------------------------------------------
# Engine-generator set
# ---------------------------------------------------------------------------

def genset_torques_array(speed, p_g, dn_dt, g: GensetParams) -> Tuple[np.ndarray, np.ndarray]:
    """Generator and engine shaft torques for electrical output ``p_g``"""
    speed = np.asarray(speed, dtype=float)
    gen_torque = 9.55 * np.asarray(p_g, dtype=float) / (speed * g.gen_eff)
    engine_torque = gen_torque + RPM_TO_RAD * g.inertia * np.asarray(dn_dt, dtype=float)
    return gen_torque, engine_torque


def genset_feasible_array(speed, gen_torque, engine_torque, p_g, g: GensetParams) -> np.ndarray:
    speed = np.asarray(speed, dtype=float)
    return (
        (np.asarray(p_g) >= 0.0)
        & (speed >= g.idle_speed - ENVELOPE_TOL)
        & (speed <= g.engine_speed_max + ENVELOPE_TOL)
        & (gen_torque <= g.gen_torque_max(speed) + ENVELOPE_TOL)
        & (engine_torque <= g.engine_torque_max(speed) + ENVELOPE_TOL)
        & (engine_torque * speed / 9.55 <= g.engine_power_max + ENVELOPE_TOL)
    )


def fuel_rate_array(engine_torque, speed, g: GensetParams) -> np.ndarray:
    """Fuel rate with negative torque read at the zero-torque row; NaN off the map"""
    return g.fuel_map.lookup(np.maximum(engine_torque, 0.0), speed)


def fuel_rate(torque: float, speed: float, g: GensetParams) -> float:
    """Fuel rate φ_fuel(T_e, n_e), g/s, by bilinear interpolation on the map"""
    _require_finite(torque=torque, speed=speed)
    if not (g.idle_speed <= speed <= g.engine_speed_max):
        raise EnvelopeError(f"engine speed {speed:.1f} rpm outside envelope", speed=speed)
    if torque < 0.0 or torque > float(g.engine_torque_max(speed)) + ENVELOPE_TOL:
        raise EnvelopeError(f"engine torque {torque:.1f} N·m outside envelope", torque=torque, speed=speed)
    rate = float(g.fuel_map.lookup(torque, speed))
    if not math.isfinite(rate):
        raise EnvelopeError("operating point outside the fuel map grid", torque=torque, speed=speed)
    return rate


def genset_solve(speed: float, p_g_target: float, dn_dt: float, g: GensetParams) -> OperatingPoint:
    """Operating point that delivers ``p_g_target`` W at ``speed`` rpm"""
    _require_finite(speed=speed, p_g_target=p_g_target, dn_dt=dn_dt)
    if not (g.idle_speed <= speed <= g.engine_speed_max):
        raise EnvelopeError(f"engine speed {speed:.1f} rpm outside envelope", speed=speed)
    if p_g_target < 0.0:
        raise EnvelopeError("genset cannot absorb power", p_g=p_g_target)

    gen_torque, engine_torque = genset_torques_array(speed, p_g_target, dn_dt, g)
    gen_torque, engine_torque = float(gen_torque), float(engine_torque)
    if gen_torque > float(g.gen_torque_max(speed)) + ENVELOPE_TOL:
        raise EnvelopeError(
            f"generator torque {gen_torque:.1f} N·m exceeds envelope at {speed:.0f} rpm",
            torque=gen_torque, speed=speed,
        )
    if engine_torque > float(g.engine_torque_max(speed)) + ENVELOPE_TOL:
        raise EnvelopeError(
            f"engine torque {engine_torque:.1f} N·m exceeds envelope at {speed:.0f} rpm",
            torque=engine_torque, speed=speed,
        )
    if engine_torque * speed / 9.55 > g.engine_power_max + ENVELOPE_TOL:
        raise EnvelopeError("engine power limit exceeded", torque=engine_torque, speed=speed)

    mech_power = gen_torque * speed / 9.55
    return OperatingPoint(
        speed=float(speed),
        torque=gen_torque,
        engine_torque=engine_torque,
        mech_power=mech_power,
        elec_power=mech_power * g.gen_eff,
        fuel_rate=float(fuel_rate_array(engine_torque, speed, g)),
    )


def genset_power_max_array(speed, dn_dt, g: GensetParams) -> np.ndarray:
    """Largest electrical output the genset can deliver at ``speed`` while changing speed at ``dn_dt``"""
    speed = np.asarray(speed, dtype=float)
    inertia_torque = RPM_TO_RAD * g.inertia * np.asarray(dn_dt, dtype=float)
    gen_torque = np.minimum(
        g.gen_torque_max(speed),
        np.minimum(g.engine_torque_max(speed), 9.55 * g.engine_power_max / speed) - inertia_torque,
    )
    return np.maximum(gen_torque, 0.0) * speed / 9.55 * g.gen_eff


def point_efficiency(engine_torque, speed, g: GensetParams) -> np.ndarray:
    """Brake thermal efficiency of operating points (0 at zero load)"""
    engine_torque = np.maximum(np.asarray(engine_torque, dtype=float), 0.0)
    rate = fuel_rate_array(engine_torque, speed, g)
    power = engine_torque * np.asarray(speed, dtype=float) / 9.55
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(rate > 0, power / (rate * g.q_lhv), 0.0)


def top_decile_threshold(g: GensetParams) -> float:
    """90th percentile of loaded-node efficiencies of the fuel map"""
    eff = g.fuel_map.node_efficiency(g.q_lhv)
    return float(np.percentile(eff[eff > 0], 90))


# ---------------------------------------------------------------------------
# Parameter assembly
# ---------------------------------------------------------------------------

def synthesize_fuel_map(params: ParameterSet) -> FuelMap:
    """
    Default fuel map: shaft power over a quadratic efficiency bowl plus a
    constant idle flow.
    """
    s = params.section('genset')
    speeds = np.arange(s['idle_speed'], s['engine_speed_max'] + 0.5 * s['map_speed_step'], s['map_speed_step'])
    torques = np.arange(0.0, s['map_torque_max'] + 0.5 * s['map_torque_step'], s['map_torque_step'])
    torque, speed = np.meshgrid(torques, speeds, indexing='ij')
    eff = (
        s['eff_peak']
        - s['eff_speed_curvature'] * ((speed - s['eff_peak_speed']) / 1000.0) ** 2
        - s['eff_torque_curvature'] * ((torque - s['eff_peak_torque']) / 100.0) ** 2
    )
    eff = np.maximum(eff, s['eff_floor'])
    rates = s['idle_fuel'] + torque * speed / 9.55 / (eff * s['q_lhv'])
    return FuelMap(
        torques=tuple(float(t) for t in torques),
        speeds=tuple(float(n) for n in speeds),
        rates=tuple(tuple(float(x) for x in row) for row in rates),
    )


def build_genset(params: ParameterSet, fuel_map: Optional[FuelMap] = None) -> GensetParams:
    s = params.section('genset')
    return GensetParams(
        idle_speed=s['idle_speed'],
        engine_speed_max=s['engine_speed_max'],
        engine_power_max=s['engine_power_max'],
        gen_eff=s['gen_eff'],
        engine_inertia=s['engine_inertia'],
        gen_inertia=s['gen_inertia'],
        speed_rate_max=s['speed_rate_max'],
        torque_rate_max=s['torque_rate_max'],
        q_lhv=s['q_lhv'],
        fuel_map=fuel_map if fuel_map is not None else synthesize_fuel_map(params),
        peak_efficiency=None if fuel_map is not None else s['eff_peak'],
    )


def build_powertrain(
    params: Optional[ParameterSet] = None,
    fuel_map: Optional[FuelMap] = None,
    voc_curve: Optional[Sequence[Tuple[float, float]]] = None,
) -> PowertrainParams:
    """Assemble the three parameter records from a parameter set"""
    params = params or ParameterSet()
    battery = BatteryParams.from_parameters(params)
    if voc_curve is not None:
        battery = BatteryParams(**{**battery.model_dump(), 'voc_curve': tuple(map(tuple, voc_curve))})
    return PowertrainParams(
        vehicle=VehicleParams.from_parameters(params),
        battery=battery,
        genset=build_genset(params, fuel_map),
    )
