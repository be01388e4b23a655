"""
Optimal Control Records
Finite-horizon problems, SOC × engine-speed lattices and DP solutions
"""

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from app.config import ParameterSet
from app.exceptions import InputError
from app.models.powertrain import PowertrainParams

GRID_TOL = 1e-12


class TerminalMode(str, enum.Enum):
    """How the final SOC is treated"""
    SOFT = "soft"  # deviation priced by the SOC weight only
    HARD = "hard"  # final SOC level must equal the initial level


@dataclass(frozen=True)
class SocGrid:
    """Equally spaced SOC levels and engine-speed levels (rpm)"""

    soc_levels: np.ndarray
    speed_levels: np.ndarray

    def __post_init__(self):
        soc = np.asarray(self.soc_levels, dtype=float)
        speed = np.asarray(self.speed_levels, dtype=float)
        object.__setattr__(self, 'soc_levels', soc)
        object.__setattr__(self, 'speed_levels', speed)
        if soc.ndim != 1 or len(soc) < 2 or np.any(np.diff(soc) <= 0):
            raise InputError("SOC grid needs at least two strictly increasing levels")
        if speed.ndim != 1 or len(speed) < 1 or np.any(np.diff(speed) <= 0):
            raise InputError("speed grid levels must be strictly increasing")
        if soc[0] < 0.0 or soc[-1] > 1.0:
            raise InputError("SOC grid must lie inside [0, 1]")

    @classmethod
    def uniform(
        cls,
        soc_min: float,
        soc_max: float,
        m: int,
        speed_min: float,
        speed_max: float,
        q: int,
    ) -> 'SocGrid':
        """m equal SOC parts (m + 1 levels) and q speed levels spanning the ranges"""
        if m < 2 or q < 2:
            raise InputError(f"grid needs m >= 2 and q >= 2, got m={m}, q={q}")
        return cls(np.linspace(soc_min, soc_max, m + 1), np.linspace(speed_min, speed_max, q))

    @classmethod
    def band(
        cls,
        center: float,
        step: float,
        below: int,
        above: int,
        bounds: Tuple[float, float],
        speed_levels,
    ) -> 'SocGrid':
        """Levels center + k·step for k in [-below, above], kept inside ``bounds``"""
        if step <= 0:
            raise InputError("band step must be positive")
        levels = center + step * np.arange(-below, above + 1)
        keep = (levels >= bounds[0] - GRID_TOL) & (levels <= bounds[1] + GRID_TOL)
        return cls(np.clip(levels[keep], bounds[0], bounds[1]), speed_levels)

    @classmethod
    def from_parameters(
        cls,
        params: ParameterSet,
        m: Optional[int] = None,
        q: Optional[int] = None,
    ) -> 'SocGrid':
        return cls.uniform(
            params.get('battery.soc_min'),
            params.get('battery.soc_max'),
            int(m or params.get('dp.soc_parts')),
            params.get('genset.idle_speed'),
            params.get('genset.engine_speed_max'),
            int(q or params.get('dp.speed_levels')),
        )

    def refined(self) -> 'SocGrid':
        """Twice the SOC parts and 2q - 1 speed levels; every current level is kept"""
        soc_mid = 0.5 * (self.soc_levels[:-1] + self.soc_levels[1:])
        soc = np.empty(2 * len(self.soc_levels) - 1)
        soc[0::2], soc[1::2] = self.soc_levels, soc_mid
        if len(self.speed_levels) < 2:
            return SocGrid(soc, self.speed_levels)
        speed_mid = 0.5 * (self.speed_levels[:-1] + self.speed_levels[1:])
        speed = np.empty(2 * len(self.speed_levels) - 1)
        speed[0::2], speed[1::2] = self.speed_levels, speed_mid
        return SocGrid(soc, speed)

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.soc_levels), len(self.speed_levels)

    def snap_soc(self, soc: float) -> int:
        return int(np.argmin(np.abs(self.soc_levels - soc)))

    def snap_speed(self, speed: float) -> int:
        return int(np.argmin(np.abs(self.speed_levels - speed)))


@dataclass
class OcpProblem:
    """
    Finite-horizon energy-management problem.

    ``v`` is in km/h, ``yaw`` in rad/s, ``slope`` in rad. ``accel`` (m/s²)
    defaults to forward differences of ``v`` with the last stage at zero.
    ``soc_value`` prices the net SOC change at the end of the horizon in grams
    per unit SOC (0 disables it). Past ``control_horizon`` stages the engine
    speed is held.
    """

    v: np.ndarray
    params: PowertrainParams
    soc_init: float
    soc_target: float
    yaw: Optional[np.ndarray] = None
    slope: Optional[np.ndarray] = None
    accel: Optional[np.ndarray] = None
    w_fuel: float = 1.0
    w_soc: float = 1000.0
    dt: float = 1.0
    speed_init: Optional[float] = None
    terminal: TerminalMode = TerminalMode.SOFT
    soc_value: float = 0.0
    control_horizon: Optional[int] = None

    def __post_init__(self):
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float))
        n = len(self.v)
        if n < 1:
            raise InputError("problem horizon must be at least one step")
        self.yaw = self._aligned(self.yaw, 'yaw', n)
        self.slope = self._aligned(self.slope, 'slope', n)
        if self.accel is None:
            accel = np.zeros(n)
            accel[:-1] = np.diff(self.v) / 3.6 / self.dt
            self.accel = accel
        else:
            self.accel = self._aligned(self.accel, 'accel', n)
        self.terminal = TerminalMode(self.terminal)

        b = self.params.battery
        if np.any(self.v < 0) or not np.all(np.isfinite(self.v)):
            raise InputError("problem speeds must be finite and non-negative")
        if not (b.soc_min - GRID_TOL <= self.soc_init <= b.soc_max + GRID_TOL):
            raise InputError(f"soc_init {self.soc_init} outside [{b.soc_min}, {b.soc_max}]")
        if self.w_fuel < 0 or self.w_soc < 0:
            raise InputError("cost weights must be non-negative")
        if self.dt <= 0:
            raise InputError("time step must be positive")

    @staticmethod
    def _aligned(values, name: str, n: int) -> np.ndarray:
        if values is None:
            return np.zeros(n)
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if values.shape != (n,) or not np.all(np.isfinite(values)):
            raise InputError(f"{name} must be finite with one value per stage")
        return values

    @property
    def horizon(self) -> int:
        return len(self.v)

    def holds_speed(self, k: int) -> bool:
        """Engine speed is frozen on stages past the control horizon"""
        return self.control_horizon is not None and k >= self.control_horizon


@dataclass(frozen=True)
class StageCost:
    """One lattice transition; ``feasible`` False marks an excluded edge"""

    feasible: bool
    cost: float = math.inf
    fuel_rate: float = math.nan
    p_req: float = math.nan
    p_b: float = math.nan
    p_g: float = math.nan
    gen_torque: float = math.nan
    engine_torque: float = math.nan

    @classmethod
    def infeasible(cls) -> 'StageCost':
        return cls(feasible=False)


@dataclass(frozen=True)
class StageRecord:
    """One stage of the traced optimal trajectory"""

    stage: int
    soc_from: float
    soc_to: float
    speed_from: float
    speed_to: float
    gen_torque: float
    engine_torque: float
    p_req: float
    p_b: float
    p_g: float
    fuel: float
    cost: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DpSolution:
    """Cost-to-come lattice, predecessor policy and the traced optimum"""

    grid: SocGrid
    cost_to_come: np.ndarray
    pred_soc: np.ndarray
    pred_speed: np.ndarray
    trajectory: List[StageRecord] = field(default_factory=list)
    total_cost: float = math.inf
    total_fuel: float = 0.0
    terminal: TerminalMode = TerminalMode.SOFT
    snap_distance: float = 0.0

    @property
    def soc_path(self) -> np.ndarray:
        if not self.trajectory:
            return np.zeros(0)
        return np.array([self.trajectory[0].soc_from] + [r.soc_to for r in self.trajectory])

    @property
    def speed_path(self) -> np.ndarray:
        if not self.trajectory:
            return np.zeros(0)
        return np.array([self.trajectory[0].speed_from] + [r.speed_to for r in self.trajectory])

    def first_control(self) -> StageRecord:
        return self.trajectory[0]
