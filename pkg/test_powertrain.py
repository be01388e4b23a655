#!/usr/bin/env python3
"""Demand power, battery, genset and fuel-map behaviour."""

import math

import numpy as np
import pytest

from app.exceptions import BoundViolationError, EnvelopeError, InfeasiblePowerError, InputError
from app.services.powertrain import (
    battery_power_from_dsoc,
    battery_soc_step,
    demand_power,
    fuel_rate,
    genset_power_max_array,
    genset_solve,
    point_efficiency,
    synthesize_fuel_map,
    top_decile_threshold,
    voc_lookup,
)


def test_cruise_demand(powertrain):
    # Rolling plus air drag at 36 km/h, divided by the 0.855 driveline
    assert demand_power(36.0, 0.0, 0.0, 0.0, powertrain.vehicle) == pytest.approx(45107.0, rel=1e-3)


def test_pivot_steering_demand(powertrain):
    assert demand_power(0.0, 0.0, 0.0, 0.5, powertrain.vehicle) == pytest.approx(24160.0, rel=1e-3)


def test_regeneration_multiplies_by_driveline(powertrain):
    v = powertrain.vehicle
    braking = demand_power(36.0, -2.0, 0.0, 0.0, v)
    force = v.rolling_coeff * v.mass * v.gravity + v.air_coeff * v.frontal_area * 36.0 ** 2 / 21.15 - 2.0 * v.mass
    assert braking < 0
    assert braking == pytest.approx(force * 10.0 * v.motor_eff * v.transmission_eff)


def test_demand_rejects_bad_inputs(powertrain):
    with pytest.raises(InputError):
        demand_power(-1.0, 0.0, 0.0, 0.0, powertrain.vehicle)
    with pytest.raises(InputError):
        demand_power(float('nan'), 0.0, 0.0, 0.0, powertrain.vehicle)


def test_voc_curve(powertrain):
    assert voc_lookup(0.7, powertrain.battery) == pytest.approx(328.0)
    with pytest.raises(InputError):
        voc_lookup(-0.1, powertrain.battery)


def test_discharge_step(powertrain):
    b = powertrain.battery
    current = (328.0 - math.sqrt(328.0 ** 2 - 4 * 0.1 * 32000.0)) / (2 * 0.1)
    soc = battery_soc_step(0.7, 32000.0, b)
    assert soc == pytest.approx(0.7 - current / b.capacity, abs=1e-12)
    assert 0.7 - soc == pytest.approx(2.99e-4, abs=1e-5)


def test_battery_inverse_round_trip(powertrain, rng):
    b = powertrain.battery
    worst = 0.0
    for _ in range(1000):
        soc = rng.uniform(b.soc_min + 0.01, b.soc_max - 0.01)
        p_b = rng.uniform(b.p_charge_max, b.p_discharge_max)
        dsoc = battery_soc_step(soc, p_b, b, check_bounds=False) - soc
        worst = max(worst, abs(battery_power_from_dsoc(dsoc, soc, b) - p_b))
    assert worst < 1e-6


def test_dsoc_round_trip(powertrain, rng):
    b = powertrain.battery
    for _ in range(1000):
        soc = rng.uniform(0.62, 0.78)
        dsoc = rng.uniform(-1e-4, 1e-4)
        p_b = battery_power_from_dsoc(dsoc, soc, b)
        assert battery_soc_step(soc, p_b, b, check_bounds=False) - soc == pytest.approx(dsoc, abs=1e-10)


def test_battery_discriminant_and_bounds(powertrain):
    b = powertrain.battery
    with pytest.raises(InfeasiblePowerError):
        battery_soc_step(0.7, 328.0 ** 2 / (4 * 0.1) + 1.0, b)
    with pytest.raises(BoundViolationError):
        battery_soc_step(0.6, 60000.0, b)
    assert battery_soc_step(0.6, 60000.0, b, check_bounds=False) < 0.6


def test_rated_operating_point(powertrain):
    g = powertrain.genset
    p_g = 290.0 * 2000.0 / 9.55 * g.gen_eff
    op = genset_solve(2000.0, p_g, 0.0, g)
    assert op.torque == pytest.approx(290.0)
    assert op.mech_power == pytest.approx(60733.0, abs=0.5)
    assert op.engine_torque == pytest.approx(op.torque)
    assert op.fuel_rate > g.fuel_map.table[0, 0]


def test_acceleration_adds_inertia_torque(powertrain):
    g = powertrain.genset
    op = genset_solve(1500.0, 20000.0, 400.0, g)
    assert op.engine_torque - op.torque == pytest.approx(math.pi / 30.0 * g.inertia * 400.0)


def test_genset_envelope(powertrain):
    g = powertrain.genset
    with pytest.raises(EnvelopeError):
        genset_solve(2000.0, 330.0 * 2000.0 / 9.55 * g.gen_eff, 0.0, g)
    with pytest.raises(EnvelopeError):
        genset_solve(700.0, 1000.0, 0.0, g)
    with pytest.raises(EnvelopeError):
        genset_solve(2000.0, -1.0, 0.0, g)
    cap = float(genset_power_max_array(2000.0, 0.0, g))
    genset_solve(2000.0, cap, 0.0, g)


def test_fuel_map_nodes_and_midpoints(powertrain):
    g = powertrain.genset
    fmap = g.fuel_map
    i, j = fmap.torques.index(100.0), fmap.speeds.index(2000.0)
    assert fuel_rate(100.0, 2000.0, g) == pytest.approx(fmap.table[i, j], abs=1e-12)
    corners = fmap.table[i:i + 2, j:j + 2]
    assert fuel_rate(110.0, 2100.0, g) == pytest.approx(corners.mean(), rel=1e-12)


def test_idle_fuel_flow(powertrain):
    g = powertrain.genset
    assert fuel_rate(0.0, g.idle_speed, g) == pytest.approx(0.15)
    with pytest.raises(EnvelopeError):
        fuel_rate(400.0, 2000.0, g)


def test_synthesized_map_peaks_at_design_point(params):
    fmap = synthesize_fuel_map(params)
    eff = fmap.node_efficiency(params.get('genset.q_lhv'))
    i, j = np.unravel_index(np.argmax(eff), eff.shape)
    assert fmap.torques[i] >= 200.0
    assert 1800.0 <= fmap.speeds[j] <= 2600.0
    assert eff.max() < params.get('genset.eff_peak')


def test_efficiency_and_top_decile(powertrain):
    g = powertrain.genset
    threshold = top_decile_threshold(g)
    assert 0.2 < threshold < g.eta_peak
    assert point_efficiency(240.0, 2200.0, g) >= threshold
    assert point_efficiency(0.0, 2200.0, g) == 0.0


# ---------------------------------------------------------------------------
# Monotonicity and identities over random grids
# ---------------------------------------------------------------------------

def test_demand_is_non_decreasing(powertrain, rng):
    vehicle = powertrain.vehicle
    for _ in range(50):
        v = np.sort(rng.uniform(0.0, 60.0, 12))
        a = float(rng.uniform(0.0, 2.0))
        slope = float(rng.uniform(0.0, 0.3))
        yaw = float(rng.uniform(-0.5, 0.5))
        along_v = [demand_power(x, a, slope, yaw, vehicle) for x in v]
        assert np.all(np.diff(along_v) >= -1e-9)

        speed = float(rng.uniform(0.0, 60.0))
        accels = np.sort(rng.uniform(-3.0, 3.0, 12))
        along_a = [demand_power(speed, x, slope, yaw, vehicle) for x in accels]
        assert np.all(np.diff(along_a) >= -1e-9)

        yaws = np.sort(rng.uniform(0.0, 1.0, 6))
        along_yaw = [demand_power(speed, a, slope, w, vehicle) for w in yaws]
        assert np.all(np.diff(along_yaw) >= -1e-9)
        assert demand_power(speed, a, slope, -yaw, vehicle) == demand_power(speed, a, slope, yaw, vehicle)


def test_soc_step_strictly_decreasing_in_power(powertrain, rng):
    b = powertrain.battery
    for soc in rng.uniform(0.6, 0.8, 20):
        powers = np.unique(rng.uniform(b.p_charge_max, b.p_discharge_max, 25))
        nxt = [battery_soc_step(float(soc), float(p), b, check_bounds=False) for p in powers]
        assert np.all(np.diff(nxt) < 0.0)


def test_genset_power_identity(powertrain, rng):
    g = powertrain.genset
    checked = 0
    for _ in range(200):
        speed = float(rng.uniform(g.idle_speed, g.engine_speed_max))
        p_g = float(rng.uniform(0.0, 60000.0))
        try:
            op = genset_solve(speed, p_g, float(rng.uniform(-200.0, 200.0)), g)
        except EnvelopeError:
            continue
        checked += 1
        assert op.mech_power - op.torque * op.speed / 9.55 == 0.0
        assert op.torque * op.speed / 9.55 == pytest.approx(p_g / g.gen_eff, rel=1e-12)
        assert op.elec_power == pytest.approx(p_g, rel=1e-12)
    assert checked >= 50
