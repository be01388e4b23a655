"""
Synthetic Driving Data
Random curvature paths, planned speed and a noisy tracking plant that turns
the plan into "actual" driving.
"""

from typing import List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from app.config import ParameterSet
from app.exceptions import ConvergenceError
from app.models.planning import PathProfile, PlannerLimits, VelocityProfile
from app.models.prediction import CycleDataset, Episode
from app.models.simulation import DrivingCycle
from app.services.base_service import BaseService
from app.services.speed_planner import plan_speed, sample_profile

# Episodes end once both speeds stay below this near the end of the path (m/s)
STOP_SPEED = 0.05


class CycleGenerator(BaseService):
    """Seeded generator of paired (actual, planned) driving episodes"""

    def __init__(self, params: Optional[ParameterSet] = None, seed: int = 42):
        super().__init__("CycleGenerator")
        self.params = params or ParameterSet()
        self.seed = seed
        self.settings = self.params.section('generator')
        self.limits = PlannerLimits.from_parameters(self.params)
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def random_path(self) -> PathProfile:
        """Path of spline-interpolated curvature with one speed limit per segment"""
        s = self.settings
        segments = int(s['segments'])
        knots_s = np.arange(segments + 1) * s['segment_length']
        knots_kappa = self.rng.uniform(-s['curvature_max'], s['curvature_max'], segments + 1)
        limits = self.rng.uniform(s['v_limit_min'], self.limits.v_max, segments)

        arc = np.arange(0.0, knots_s[-1] + 0.5 * s['path_step'], s['path_step'])
        kappa = np.clip(CubicSpline(knots_s, knots_kappa)(arc), -s['curvature_max'], s['curvature_max'])
        segment = np.minimum((arc // s['segment_length']).astype(int), segments - 1)
        return PathProfile(s=arc, kappa=kappa, v_limit=limits[segment])

    def plan(self, path: PathProfile) -> VelocityProfile:
        try:
            return plan_speed(path, self.limits)
        except ConvergenceError as exc:
            self.log_warning("Planner did not converge, using last iterate", points=len(path))
            return exc.last_value

    def track(self, path: PathProfile, profile: VelocityProfile, dt: float = 1.0) -> Tuple[np.ndarray, ...]:
        """
        Drive the plan with the tracking plant.

        Returns actual speed, planned speed, actual yaw rate and planned yaw
        rate per time step. The increment (tracking term plus noise) is
        clamped to the longitudinal limits, then the speed to [0, v_max].
        """
        s = self.settings
        lim = self.limits
        max_steps = int(10.0 * path.length / s['v_limit_min']) + 100
        pos, v = float(path.s[0]), lim.v_start
        actual, planned, yaw, planned_yaw = [], [], [], []
        for _ in range(max_steps):
            v_plan = float(sample_profile(path, profile, pos))
            kappa = float(np.interp(pos, path.s, path.kappa))
            actual.append(v)
            planned.append(v_plan)
            yaw.append(kappa * v)
            planned_yaw.append(kappa * v_plan)
            if pos >= path.s[-1] or (pos > 0.5 * path.length and max(v, v_plan) < STOP_SPEED):
                break
            dv = s['k_track'] * (v_plan - v) + self.rng.normal(0.0, s['sigma_v'])
            dv = min(max(dv, -lim.d_lon_max * dt), lim.a_lon_max * dt)
            v_next = min(max(v + dv, 0.0), lim.v_max)
            pos += 0.5 * (v + v_next) * dt
            v = v_next
        return np.array(actual), np.array(planned), np.array(yaw), np.array(planned_yaw)

    def episode(self, index: int) -> Tuple[Episode, DrivingCycle]:
        path = self.random_path()
        actual, planned, yaw, planned_yaw = self.track(path, self.plan(path))
        name = f"episode-{index:03d}"
        cycle = DrivingCycle(
            t=np.arange(len(actual), dtype=float),
            v=actual * 3.6,
            yaw=yaw,
            planned=planned,
            planned_yaw=planned_yaw,
            name=name,
        )
        return Episode(actual=actual, planned=planned, name=name), cycle

    def generate(self, episodes: Optional[int] = None) -> Tuple[CycleDataset, List[DrivingCycle]]:
        count = int(episodes if episodes is not None else self.settings['episodes'])
        pairs = [self.episode(i) for i in range(count)]
        self.log_info("Generated episodes", episodes=count, steps=sum(len(e) for e, _ in pairs), seed=self.seed)
        return CycleDataset([e for e, _ in pairs]), [c for _, c in pairs]


def generate_cycles(
    seed: int,
    params: Optional[ParameterSet] = None,
    episodes: Optional[int] = None,
) -> Tuple[CycleDataset, List[DrivingCycle]]:
    """Seeded synthetic dataset plus the same episodes as drivable cycles"""
    return CycleGenerator(params, seed).generate(episodes)


# (speed m/s, hold s) after a ramp at BENCHMARK_RAMP; the vehicle starts at rest
BENCHMARK_SEGMENTS = ((8.5, 100.0), (14.0, 30.0), (3.0, 30.0), (0.0, 5.0))
BENCHMARK_RAMP = 0.2


def benchmark_plan(dt: float = 1.0) -> np.ndarray:
    """Planned speed of the benchmark cycle: steady, high-demand, low-demand recovery, stop"""
    plan = [0.0]
    for target, hold in BENCHMARK_SEGMENTS:
        while abs(plan[-1] - target) > 1e-12:
            step = BENCHMARK_RAMP * dt
            plan.append(plan[-1] + min(max(target - plan[-1], -step), step))
        plan.extend([target] * int(round(hold / dt)))
    return np.array(plan)


def benchmark_cycle(seed: int = 42, params: Optional[ParameterSet] = None) -> DrivingCycle:
    """The shared comparison cycle: the benchmark plan driven once by the tracking plant"""
    params = params or ParameterSet()
    gen = CycleGenerator(params, seed)
    s, lim = gen.settings, gen.limits
    planned = benchmark_plan()
    actual = np.zeros_like(planned)
    for k in range(len(planned) - 1):
        dv = s['k_track'] * (planned[k] - actual[k]) + gen.rng.normal(0.0, s['sigma_v'])
        dv = min(max(dv, -lim.d_lon_max), lim.a_lon_max)
        actual[k + 1] = min(max(actual[k] + dv, 0.0), lim.v_max)
    return DrivingCycle(
        t=np.arange(len(planned), dtype=float),
        v=actual * 3.6,
        planned=planned,
        planned_yaw=np.zeros_like(planned),
        name="benchmark",
    )
