"""
Powertrain Records
Immutable parameter records for the vehicle body, battery pack and genset
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator
from scipy.interpolate import RegularGridInterpolator

from app.config import ParameterSet

Curve = Tuple[Tuple[float, float], ...]

# Engine full-load torque (rpm, N·m); 310 N·m peak, 96 kW at rated speed
DEFAULT_ENGINE_TORQUE_CURVE: Curve = (
    (800.0, 200.0),
    (1200.0, 270.0),
    (1600.0, 305.0),
    (2000.0, 310.0),
    (2400.0, 305.0),
    (2800.0, 300.0),
    (3200.0, 286.0),
)

# Generator torque envelope (rpm, N·m); rated 290 N·m @ 2000 rpm lies inside
DEFAULT_GEN_TORQUE_CURVE: Curve = (
    (800.0, 300.0),
    (2000.0, 320.0),
    (2400.0, 300.0),
    (3200.0, 225.0),
)


def _check_curve(curve: Curve, name: str) -> Curve:
    xs = [x for x, _ in curve]
    if len(curve) < 2:
        raise ValueError(f"{name} needs at least two knots")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ValueError(f"{name} abscissae must be strictly increasing")
    if not all(np.isfinite(v) for knot in curve for v in knot):
        raise ValueError(f"{name} must be finite")
    return curve


class VehicleParams(BaseModel):
    """Vehicle body and driveline"""

    model_config = ConfigDict(frozen=True)

    mass: float = Field(9359.0, gt=0)
    transmission_ratio: float = Field(14.89, gt=0)
    drive_wheel_radius: float = Field(0.2654, gt=0)
    rolling_coeff: float = Field(0.04, ge=0)
    air_coeff: float = Field(1.0, ge=0)
    frontal_area: float = Field(3.0, ge=0)
    steering_coeff: float = Field(0.6, ge=0)
    track_length: float = Field(3.0, gt=0)
    gravity: float = Field(9.81, gt=0)
    motor_eff: float = Field(0.9, gt=0, le=1)
    transmission_eff: float = Field(0.95, gt=0, le=1)

    @classmethod
    def from_parameters(cls, params: ParameterSet) -> 'VehicleParams':
        return cls(**params.section('vehicle'))


class BatteryParams(BaseModel):
    """
    Battery pack.

    ``capacity`` is in coulombs; ``voc_curve`` maps SOC to open-circuit volts.
    Positive battery power discharges the pack.
    """

    model_config = ConfigDict(frozen=True)

    capacity: float = Field(96.0 * 3600.0, gt=0)
    internal_resistance: float = Field(0.1, gt=0)
    voc_curve: Curve = ((0.0, 300.0), (1.0, 340.0))
    soc_min: float = Field(0.6, ge=0, le=1)
    soc_max: float = Field(0.8, ge=0, le=1)
    p_charge_max: float = Field(-45000.0, le=0)
    p_discharge_max: float = Field(60000.0, ge=0)

    _soc_knots: np.ndarray = PrivateAttr()
    _volt_knots: np.ndarray = PrivateAttr()

    @field_validator('voc_curve')
    @classmethod
    def _voc_monotone(cls, curve: Curve) -> Curve:
        _check_curve(curve, 'voc_curve')
        volts = [v for _, v in curve]
        if any(b < a for a, b in zip(volts, volts[1:])):
            raise ValueError("voc_curve must be non-decreasing in SOC")
        if curve[0][0] > 0.0 or curve[-1][0] < 1.0:
            raise ValueError("voc_curve must cover SOC 0..1")
        return curve

    @model_validator(mode='after')
    def _window(self) -> 'BatteryParams':
        if not self.soc_min < self.soc_max:
            raise ValueError("soc_min must be below soc_max")
        return self

    def model_post_init(self, __context) -> None:
        self._soc_knots = np.array([s for s, _ in self.voc_curve])
        self._volt_knots = np.array([v for _, v in self.voc_curve])

    def voc(self, soc):
        """Piecewise-linear open-circuit voltage (no domain check)"""
        return np.interp(soc, self._soc_knots, self._volt_knots)

    @classmethod
    def from_parameters(cls, params: ParameterSet) -> 'BatteryParams':
        section = params.section('battery')
        offset, slope = section.pop('voc_offset'), section.pop('voc_slope')
        section['capacity'] = section.pop('capacity_ah') * 3600.0
        section['voc_curve'] = ((0.0, offset), (1.0, offset + slope))
        return cls(**section)


class FuelMap(BaseModel):
    """
    Engine fuel-rate table, g/s, indexed by (torque N·m, speed rpm).

    Queries are bilinear inside the grid and NaN outside it.
    """

    model_config = ConfigDict(frozen=True)

    torques: Tuple[float, ...]
    speeds: Tuple[float, ...]
    rates: Tuple[Tuple[float, ...], ...]

    _interp: RegularGridInterpolator = PrivateAttr()
    _table: np.ndarray = PrivateAttr()

    @model_validator(mode='after')
    def _grid(self) -> 'FuelMap':
        for name, axis in (('torques', self.torques), ('speeds', self.speeds)):
            if len(axis) < 2 or any(b <= a for a, b in zip(axis, axis[1:])):
                raise ValueError(f"fuel map {name} must be strictly increasing with >= 2 nodes")
        table = np.asarray(self.rates, dtype=float)
        if table.shape != (len(self.torques), len(self.speeds)):
            raise ValueError(f"fuel map shape {table.shape} does not match axes")
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise ValueError("fuel map must be finite and non-negative")
        return self

    def model_post_init(self, __context) -> None:
        self._table = np.asarray(self.rates, dtype=float)
        self._interp = RegularGridInterpolator(
            (np.asarray(self.torques), np.asarray(self.speeds)),
            self._table,
            method='linear',
            bounds_error=False,
            fill_value=np.nan,
        )

    @property
    def table(self) -> np.ndarray:
        return self._table

    def lookup(self, torque, speed) -> np.ndarray:
        """Vectorised bilinear lookup; NaN marks points off the grid"""
        torque, speed = np.broadcast_arrays(np.asarray(torque, float), np.asarray(speed, float))
        points = np.stack([torque.ravel(), speed.ravel()], axis=-1)
        return self._interp(points).reshape(torque.shape)

    def node_efficiency(self, q_lhv: float) -> np.ndarray:
        """Brake efficiency at each node (zero where torque is zero)"""
        torque, speed = np.meshgrid(self.torques, self.speeds, indexing='ij')
        power = torque * speed / 9.55
        with np.errstate(divide='ignore', invalid='ignore'):
            eff = np.where(self.table > 0, power / (self.table * q_lhv), 0.0)
        return eff

    def peak_efficiency(self, q_lhv: float) -> float:
        return float(self.node_efficiency(q_lhv).max())


class GensetParams(BaseModel):
    """Rigidly coupled engine-generator set"""

    model_config = ConfigDict(frozen=True)

    idle_speed: float = Field(800.0, gt=0)
    engine_speed_max: float = Field(3200.0, gt=0)
    engine_power_max: float = Field(96000.0, gt=0)
    engine_torque_curve: Curve = DEFAULT_ENGINE_TORQUE_CURVE
    gen_torque_curve: Curve = DEFAULT_GEN_TORQUE_CURVE
    gen_eff: float = Field(0.95, gt=0, le=1)
    engine_inertia: float = Field(0.5, ge=0)
    gen_inertia: float = Field(0.3, ge=0)
    speed_rate_max: float = Field(400.0, gt=0)
    torque_rate_max: float = Field(600.0, gt=0)
    q_lhv: float = Field(42500.0, gt=0)
    fuel_map: FuelMap
    # Design peak of the synthesized map; None means "read it off the nodes"
    peak_efficiency: Optional[float] = Field(None, gt=0, le=1)

    @field_validator('engine_torque_curve', 'gen_torque_curve')
    @classmethod
    def _curve(cls, curve: Curve) -> Curve:
        return _check_curve(curve, 'torque curve')

    @model_validator(mode='after')
    def _envelope(self) -> 'GensetParams':
        if not self.idle_speed < self.engine_speed_max:
            raise ValueError("idle_speed must be below engine_speed_max")
        for name, curve in (('engine', self.engine_torque_curve), ('generator', self.gen_torque_curve)):
            if curve[0][0] > self.idle_speed or curve[-1][0] < self.engine_speed_max:
                raise ValueError(f"{name} torque curve must span idle..max speed")
        return self

    @property
    def inertia(self) -> float:
        return self.engine_inertia + self.gen_inertia

    @property
    def eta_peak(self) -> float:
        if self.peak_efficiency is not None:
            return self.peak_efficiency
        return self.fuel_map.peak_efficiency(self.q_lhv)

    def engine_torque_max(self, speed):
        xs, ys = zip(*self.engine_torque_curve)
        return np.interp(speed, xs, ys)

    def gen_torque_max(self, speed):
        xs, ys = zip(*self.gen_torque_curve)
        return np.interp(speed, xs, ys)


class PowertrainParams(BaseModel):
    """The three parameter records travelling together"""

    model_config = ConfigDict(frozen=True)

    vehicle: VehicleParams
    battery: BatteryParams
    genset: GensetParams


@dataclass(frozen=True)
class OperatingPoint:
    """Genset operating point; ``torque`` is the generator shaft torque"""

    speed: float
    torque: float
    engine_torque: float
    mech_power: float
    elec_power: float
    fuel_rate: float

    def to_dict(self) -> dict:
        return {
            'speed': self.speed,
            'torque': self.torque,
            'engine_torque': self.engine_torque,
            'mech_power': self.mech_power,
            'elec_power': self.elec_power,
            'fuel_rate': self.fuel_rate,
        }
