"""
Controller Records
Loop state, commands and strategy configuration
"""

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, InstanceOf, model_validator

from app.config import ParameterSet
from app.models.optimization import SocGrid, TerminalMode
from app.models.prediction import PredictorModel


class StrategyKind(str, enum.Enum):
    """Energy-management strategies compared by the harness"""
    POWER_FOLLOWING = "pf"
    MPC_NN = "mpc-nn"
    MPC_CNN_LSTM = "mpc-cnnlstm"
    GLOBAL_DP = "dp"


@dataclass
class ControllerState:
    """What the controller knows at the start of step ``step``"""

    soc: float
    engine_speed: float
    history_length: int = 10
    step: int = 0
    yaw: float = 0.0
    gen_torque: float = 0.0
    history: Deque[float] = field(default_factory=deque)

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.history_length)

    def observe(self, speed: float, yaw: float = 0.0) -> None:
        """Record the speed (m/s) and yaw rate measured over the step just finished"""
        self.history.append(float(speed))
        self.yaw = float(yaw)

    def history_window(self) -> np.ndarray:
        """The last ``history_length`` speeds, front-padded with the oldest known value"""
        values = list(self.history)
        pad = values[0] if values else 0.0
        return np.array([pad] * (self.history_length - len(values)) + values)


@dataclass(frozen=True)
class ControlCommand:
    """Engine-speed and generator-torque command with the powers it implies"""

    engine_speed_cmd: float
    gen_torque_cmd: float
    p_g: float
    p_b: float
    engine_torque: float = 0.0
    fallback: bool = False
    saturated: bool = False

    def to_dict(self) -> dict:
        return {
            'engine_speed_cmd': self.engine_speed_cmd,
            'gen_torque_cmd': self.gen_torque_cmd,
            'p_g': self.p_g,
            'p_b': self.p_b,
            'engine_torque': self.engine_torque,
            'fallback': self.fallback,
            'saturated': self.saturated,
        }


class PfConfig(BaseModel):
    """Power-following rule constants"""

    model_config = ConfigDict(frozen=True)

    tau: float = Field(2.0, gt=0)
    k_soc: float = Field(20.0, ge=0)
    p_corr: float = Field(30000.0, ge=0)
    soc_target: float = Field(0.7, ge=0, le=1)
    dt: float = Field(1.0, gt=0)
    speed_step: float = Field(50.0, gt=0)

    @classmethod
    def from_parameters(cls, params: ParameterSet, **overrides) -> 'PfConfig':
        values = params.section('pf')
        values.update(soc_target=params.get('mpc.soc_target'), dt=params.get('dp.dt'))
        values.update(overrides)
        return cls(**values)


class MpcConfig(BaseModel):
    """
    Receding-horizon settings.

    Without a fixed ``grid`` every solve builds a band of ``band_levels`` SOC
    levels either side of the current SOC, one level per ``power_resolution``
    watts of battery power.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    horizon: int = Field(5, ge=1)
    control_horizon: int = Field(5, ge=1)
    dt: float = Field(1.0, gt=0)
    predictor: Optional[InstanceOf[PredictorModel]] = None
    grid: Optional[InstanceOf[SocGrid]] = None
    speed_levels: int = Field(13, ge=2)
    power_resolution: float = Field(4000.0, gt=0)
    band_levels: int = Field(40, ge=1)
    w_fuel: float = Field(1.0, ge=0)
    w_soc: float = Field(1000.0, ge=0)
    soc_target: float = Field(0.7, ge=0, le=1)
    eq_efficiency: float = Field(0.36, ge=0, le=1)
    terminal: TerminalMode = TerminalMode.SOFT

    @model_validator(mode='after')
    def _horizons(self) -> 'MpcConfig':
        if self.control_horizon > self.horizon:
            raise ValueError("control horizon must not exceed the prediction horizon")
        return self

    @classmethod
    def from_parameters(
        cls,
        params: ParameterSet,
        predictor: Optional[PredictorModel] = None,
        **overrides,
    ) -> 'MpcConfig':
        s = params.section('mpc')
        values = {
            'horizon': int(s['horizon']),
            'control_horizon': int(s['control_horizon']),
            'dt': params.get('dp.dt'),
            'predictor': predictor,
            'speed_levels': int(params.get('dp.speed_levels')),
            'power_resolution': s['power_resolution'],
            'band_levels': int(s['band_levels']),
            'w_fuel': params.get('dp.w_fuel'),
            'w_soc': params.get('dp.w_soc'),
            'soc_target': s['soc_target'],
            'eq_efficiency': s['eq_efficiency'],
        }
        values.update(overrides)
        if 'control_horizon' not in overrides:
            values['control_horizon'] = min(values['control_horizon'], values['horizon'])
        return cls(**values)


class BenchmarkConfig(BaseModel):
    """Offline full-information DP over a whole cycle"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    soc_init: float = Field(0.7, ge=0, le=1)
    soc_target: float = Field(0.7, ge=0, le=1)
    soc_band: float = Field(0.01, gt=0)
    power_resolution: float = Field(4000.0, gt=0)
    speed_levels: int = Field(13, ge=2)
    w_fuel: float = Field(1.0, ge=0)
    w_soc: float = Field(0.0, ge=0)
    dt: float = Field(1.0, gt=0)
    grid: Optional[InstanceOf[SocGrid]] = None

    @classmethod
    def from_parameters(cls, params: ParameterSet, **overrides) -> 'BenchmarkConfig':
        s = params.section('benchmark')
        values = {
            'soc_init': params.get('sim.soc_init'),
            'soc_target': params.get('mpc.soc_target'),
            'soc_band': s['soc_band'],
            'power_resolution': s['power_resolution'],
            'speed_levels': int(params.get('dp.speed_levels')),
            'w_fuel': params.get('dp.w_fuel'),
            'w_soc': s['w_soc'],
            'dt': params.get('dp.dt'),
        }
        values.update(overrides)
        return cls(**values)
