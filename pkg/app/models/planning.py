"""
Speed Planning Records
Curvature-annotated paths, planner limits and velocity profiles
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import ParameterSet
from app.exceptions import InputError


@dataclass(frozen=True)
class PathProfile:
    """
    Arc-length indexed path points.

    ``v_limit`` optionally carries a per-point speed limit (m/s) set by the
    driving environment; it is applied together with ``v_max``.
    """

    s: np.ndarray
    kappa: np.ndarray
    v_limit: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        kappa = np.asarray(self.kappa, dtype=float)
        object.__setattr__(self, 's', s)
        object.__setattr__(self, 'kappa', kappa)
        if s.shape != kappa.shape or s.ndim != 1:
            raise InputError("path s and kappa must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(kappa))):
            raise InputError("path arc length and curvature must be finite")
        if np.any(np.diff(s) <= 0):
            raise InputError("path arc length must be strictly increasing")
        if self.v_limit is not None:
            v_limit = np.asarray(self.v_limit, dtype=float)
            if v_limit.shape != s.shape or np.any(v_limit <= 0):
                raise InputError("path speed limits must be positive and aligned with s")
            object.__setattr__(self, 'v_limit', v_limit)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def length(self) -> float:
        return float(self.s[-1] - self.s[0]) if len(self.s) else 0.0


class PlannerLimits(BaseModel):
    """Speed, acceleration and jerk limits of the planner (SI units)"""

    model_config = ConfigDict(frozen=True)

    v_max: float = Field(15.0, gt=0)
    a_lat_max: float = Field(2.0, gt=0)
    a_lon_max: float = Field(1.5, gt=0)
    d_lon_max: float = Field(2.5, gt=0)
    j_lon_max: float = Field(2.0, gt=0)
    v_start: float = Field(0.0, ge=0)
    v_end: float = Field(0.0, ge=0)
    eps: float = Field(1e-4, gt=0)
    max_iter: int = Field(100, ge=1)
    v_floor: float = Field(0.1, gt=0)

    @model_validator(mode='after')
    def _endpoints(self) -> 'PlannerLimits':
        if self.v_start > self.v_max or self.v_end > self.v_max:
            raise ValueError("endpoint speeds must not exceed v_max")
        return self

    @classmethod
    def from_parameters(cls, params: ParameterSet, **overrides) -> 'PlannerLimits':
        section = params.section('planner')
        section['max_iter'] = int(section['max_iter'])
        section.update(overrides)
        return cls(**section)


@dataclass
class VelocityProfile:
    """Planned speed (m/s) at each path point"""

    v: np.ndarray
    iterations: int = 0
    converged: bool = True

    def __len__(self) -> int:
        return len(self.v)
