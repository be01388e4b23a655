"""
Simulation Records
Driving cycles, per-step simulation logs and the strategy comparison report
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import ParameterSet
from app.exceptions import InputError

UNIFORM_TOL = 1e-9


@dataclass
class DrivingCycle:
    """
    Time series the plant is driven through.

    ``v`` is the actual speed in km/h. ``planned`` (m/s) and ``planned_yaw``
    (rad/s), when present, are the local planner's intentions aligned with
    the same time grid.
    """

    t: np.ndarray
    v: np.ndarray
    slope: Optional[np.ndarray] = None
    yaw: Optional[np.ndarray] = None
    planned: Optional[np.ndarray] = None
    planned_yaw: Optional[np.ndarray] = None
    name: str = "cycle"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        n = len(self.t)
        if self.t.ndim != 1 or self.v.shape != self.t.shape or n < 1:
            raise InputError(f"cycle {self.name!r}: t and v must be 1-D and aligned")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.v))):
            raise InputError(f"cycle {self.name!r} contains non-finite samples")
        if np.any(self.v < 0):
            raise InputError(f"cycle {self.name!r} has negative speeds")
        if n > 1:
            steps = np.diff(self.t)
            if np.any(steps <= 0) or np.ptp(steps) > UNIFORM_TOL * max(1.0, steps[0]):
                raise InputError(f"cycle {self.name!r}: time must be strictly increasing and uniform")
        self.slope = self._aligned(self.slope, 'slope', n, zeros=True)
        self.yaw = self._aligned(self.yaw, 'yaw', n, zeros=True)
        self.planned = self._aligned(self.planned, 'planned', n)
        self.planned_yaw = self._aligned(self.planned_yaw, 'planned_yaw', n)

    def _aligned(self, values, name: str, n: int, zeros: bool = False) -> Optional[np.ndarray]:
        if values is None:
            return np.zeros(n) if zeros else None
        values = np.asarray(values, dtype=float)
        if values.shape != (n,) or not np.all(np.isfinite(values)):
            raise InputError(f"cycle {self.name!r}: {name} must be finite and aligned with t")
        return values

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 1.0

    @property
    def v_ms(self) -> np.ndarray:
        return self.v / 3.6

    @property
    def accel(self) -> np.ndarray:
        """Forward-difference acceleration (m/s²); zero on the last sample"""
        accel = np.zeros(len(self))
        accel[:-1] = np.diff(self.v_ms) / self.dt
        return accel

    def planned_window(self, k: int, length: int) -> np.ndarray:
        """Planned speeds for steps [k, k + length), padded with the last available value"""
        source = self.planned if self.planned is not None else self.v_ms
        window = source[k:k + length]
        if len(window) == 0:
            window = source[-1:]
        if len(window) < length:
            window = np.concatenate([window, np.repeat(window[-1], length - len(window))])
        return window


@dataclass(frozen=True)
class SimRecord:
    """
    One simulated step; ``soc`` is the value at the end of the step.

    ``p_req`` is the demand of the cycle sample. ``p_brake`` is regeneration
    dissipated in the service brakes and ``unmet`` is demand neither source
    could supply, so ``p_g + p_b - p_brake + unmet == p_req``.
    """

    t: float
    v: float
    soc: float
    p_req: float
    p_b: float
    p_g: float
    p_brake: float
    n_e: float
    t_e: float
    t_g: float
    fuel_rate: float
    fuel_cum: float
    unmet: float = 0.0
    fallback: bool = False
    saturated: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class SimLog:
    """Per-step records of one closed-loop run"""

    strategy: str
    soc_init: float
    records: List[SimRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def soc_final(self) -> float:
        return self.records[-1].soc if self.records else self.soc_init

    @property
    def total_fuel(self) -> float:
        return self.records[-1].fuel_cum if self.records else 0.0

    @property
    def fallback_steps(self) -> int:
        return sum(1 for r in self.records if r.fallback)

    def to_records(self) -> List[Dict[str, Any]]:
        return [r.to_dict() for r in self.records]


class SimConfig(BaseModel):
    """Plant settings; the scales perturb the plant away from the controller's model"""

    model_config = ConfigDict(frozen=True)

    soc_init: float = Field(0.7, ge=0, le=1)
    soc_target: float = Field(0.7, ge=0, le=1)
    mass_scale: float = Field(1.0, gt=0)
    rolling_scale: float = Field(1.0, ge=0)

    @classmethod
    def from_parameters(cls, params: ParameterSet, **overrides) -> 'SimConfig':
        values = params.section('sim')
        values['soc_target'] = params.get('mpc.soc_target')
        values.update(overrides)
        return cls(**values)


@dataclass
class ComparisonRow:
    """One strategy's outcome on the shared cycle"""

    strategy: str
    equivalent_fuel: float = float('nan')
    raw_fuel: float = float('nan')
    delta_soc: float = float('nan')
    improvement: float = float('nan')
    top_decile_fraction: float = float('nan')
    fallback_steps: int = 0
    error: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class ComparisonReport:
    """Strategy rows, predictor RMSE table and the logs behind them"""

    rows: List[ComparisonRow] = field(default_factory=list)
    rmse: Dict[str, float] = field(default_factory=dict)
    logs: Dict[str, SimLog] = field(default_factory=dict)

    def row(self, strategy: str) -> ComparisonRow:
        for row in self.rows:
            if row.strategy == strategy:
                return row
        raise KeyError(strategy)
