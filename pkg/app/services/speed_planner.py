"""
Local Speed Planner
Velocity profiles under speed, lateral/longitudinal acceleration and jerk limits.

The planner starts from the speed cap of every point and repeatedly applies
forward/backward acceleration passes and a jerk pass. Every pass only lowers
speeds, so the iteration is monotone and bounded below by zero.
"""

import math
from typing import List, Optional, Sequence

import numpy as np
import structlog

from app.exceptions import ConvergenceError, InputError
from app.models.planning import PathProfile, PlannerLimits, VelocityProfile

logger = structlog.get_logger(__name__)

BISECTION_STEPS = 60


def curvature_cap(path: PathProfile, lim: PlannerLimits) -> VelocityProfile:
    """Per-point cap min(sqrt(a_lat / |kappa|), v_max, v_limit)"""
    abs_kappa = np.abs(path.kappa)
    with np.errstate(divide='ignore'):
        lateral = np.where(abs_kappa > 0.0, np.sqrt(lim.a_lat_max / abs_kappa), np.inf)
    cap = np.minimum(lateral, lim.v_max)
    if path.v_limit is not None:
        cap = np.minimum(cap, path.v_limit)
    return VelocityProfile(v=cap, iterations=0)


def _forward_backward(v: List[float], ds: List[float], lim: PlannerLimits) -> List[float]:
    n = len(v)
    if n == 0:
        return v
    v[0] = min(v[0], lim.v_start)
    v[-1] = min(v[-1], lim.v_end)
    for i in range(1, n):
        v[i] = min(v[i], math.sqrt(v[i - 1] ** 2 + 2.0 * lim.a_lon_max * ds[i - 1]))
    for i in range(n - 1, 0, -1):
        v[i - 1] = min(v[i - 1], math.sqrt(v[i] ** 2 + 2.0 * lim.d_lon_max * ds[i - 1]))
    return v


def accel_decel_passes(v: VelocityProfile, path: PathProfile, lim: PlannerLimits) -> VelocityProfile:
    """Forward acceleration pass then backward deceleration pass"""
    if len(v) != len(path):
        raise InputError("profile and path lengths differ")
    ds = np.diff(path.s).tolist()
    out = _forward_backward(np.asarray(v.v, dtype=float).tolist(), ds, lim)
    return VelocityProfile(v=np.array(out), iterations=v.iterations, converged=v.converged)


def _jerk(vi: float, vj: float, vk: float, ds0: float, ds1: float, v_floor: float) -> float:
    a0 = (vj * vj - vi * vi) / (2.0 * ds0)
    a1 = (vk * vk - vj * vj) / (2.0 * ds1)
    dt0 = ds0 / max(0.5 * (vi + vj), v_floor)
    return (a1 - a0) / dt0


def segment_jerk(v: Sequence[float], path: PathProfile, v_floor: float = 0.1) -> np.ndarray:
    """
    Discrete jerk between consecutive segments.

    a_i = (v_{i+1}^2 - v_i^2) / (2 ds_i), dt_i = ds_i / max(mean speed, v_floor),
    j_i = (a_{i+1} - a_i) / dt_i; one value per interior point.
    """
    v = np.asarray(v, dtype=float)
    if len(v) < 3:
        return np.zeros(0)
    ds = np.diff(path.s)
    accel = (v[1:] ** 2 - v[:-1] ** 2) / (2.0 * ds)
    dt = ds / np.maximum(0.5 * (v[1:] + v[:-1]), v_floor)
    return (accel[1:] - accel[:-1]) / dt[:-1]


def _largest_admissible(lo: float, hi: float, admissible) -> float:
    """Largest x in [lo, hi] with admissible(x), assuming admissibility is an interval from lo"""
    if admissible(hi):
        return hi
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _fix_jerk_at(v: List[float], ds: List[float], i: int, lim: PlannerLimits) -> None:
    j_max, floor = lim.j_lon_max, lim.v_floor
    jerk = _jerk(v[i], v[i + 1], v[i + 2], ds[i], ds[i + 1], floor)
    if jerk > j_max:
        # Too much acceleration gained into the next segment: lower the far point
        a0 = (v[i + 1] ** 2 - v[i] ** 2) / (2.0 * ds[i])
        dt0 = ds[i] / max(0.5 * (v[i] + v[i + 1]), floor)
        target = v[i + 1] ** 2 + 2.0 * ds[i + 1] * (a0 + j_max * dt0)
        v[i + 2] = min(v[i + 2], math.sqrt(max(target, 0.0)))
        if _jerk(v[i], v[i + 1], v[i + 2], ds[i], ds[i + 1], floor) > j_max:
            # Braking into this point is harder than stopping allows; lower the near point
            v[i] = _largest_admissible(
                0.0, v[i],
                lambda x: _jerk(x, v[i + 1], v[i + 2], ds[i], ds[i + 1], floor) <= j_max,
            )
    elif jerk < -j_max:
        v[i + 1] = _largest_admissible(
            0.0, v[i + 1],
            lambda x: _jerk(v[i], x, v[i + 2], ds[i], ds[i + 1], floor) >= -j_max,
        )


def jerk_pass(v: VelocityProfile, path: PathProfile, lim: PlannerLimits) -> VelocityProfile:
    """Lower speeds wherever the discrete jerk bound is exceeded (forward then backward sweep)"""
    speeds = np.asarray(v.v, dtype=float).tolist()
    ds = np.diff(path.s).tolist()
    n = len(speeds)
    for i in range(n - 2):
        _fix_jerk_at(speeds, ds, i, lim)
    for i in range(n - 3, -1, -1):
        _fix_jerk_at(speeds, ds, i, lim)
    return VelocityProfile(v=np.array(speeds), iterations=v.iterations, converged=v.converged)


def check_profile(v: Sequence[float], path: PathProfile, lim: PlannerLimits, tol: float = 1e-9) -> List[str]:
    """Return a description of every violated planner constraint (empty when feasible)"""
    v = np.asarray(v, dtype=float)
    problems = []
    cap = curvature_cap(path, lim).v
    bad = np.nonzero((v > cap + tol) | (v < -tol))[0]
    problems += [f"speed cap violated at {i}: {v[i]:.6f} > {cap[i]:.6f}" for i in bad]
    if len(v) >= 2:
        ds = np.diff(path.s)
        gain = v[1:] ** 2 - v[:-1] ** 2
        for i in np.nonzero(gain > 2.0 * lim.a_lon_max * ds + tol)[0]:
            problems.append(f"acceleration bound violated on segment {i}")
        for i in np.nonzero(-gain > 2.0 * lim.d_lon_max * ds + tol)[0]:
            problems.append(f"deceleration bound violated on segment {i}")
    jerk = segment_jerk(v, path, lim.v_floor)
    for i in np.nonzero(np.abs(jerk) > lim.j_lon_max + tol)[0]:
        problems.append(f"jerk bound violated at {i}: {jerk[i]:.6f}")
    return problems


def smooth_profile(v: VelocityProfile, path: PathProfile, lim: PlannerLimits) -> VelocityProfile:
    """Fixed-point iteration of the cap, acceleration and jerk passes from a given profile"""
    if len(v) != len(path):
        raise InputError("profile and path lengths differ")
    cap = curvature_cap(path, lim).v
    current = np.minimum(np.asarray(v.v, dtype=float), cap)
    if len(current) <= 1:
        return VelocityProfile(v=np.minimum(current, lim.v_start), iterations=1)

    for iteration in range(1, lim.max_iter + 1):
        previous = current
        step = accel_decel_passes(VelocityProfile(v=np.minimum(current, cap)), path, lim)
        current = jerk_pass(step, path, lim).v
        change = float(np.max(np.abs(current - previous)))
        if change < lim.eps and not check_profile(current, path, lim):
            return VelocityProfile(v=current, iterations=iteration)

    last = VelocityProfile(v=current, iterations=lim.max_iter, converged=False)
    logger.warning("speed plan did not converge", iterations=lim.max_iter, points=len(path))
    raise ConvergenceError(
        f"speed plan did not converge within {lim.max_iter} iterations",
        last_value=last,
        iterations=lim.max_iter,
    )


def plan_speed(path: PathProfile, lim: PlannerLimits) -> VelocityProfile:
    """Plan a constraint-feasible velocity profile over ``path``"""
    return smooth_profile(curvature_cap(path, lim), path, lim)


def path_from_xy(x: Sequence[float], y: Sequence[float], v_limit: Optional[Sequence[float]] = None) -> PathProfile:
    """
    Build a path from planar points.

    Arc length is the cumulative chord length; curvature at interior points is
    the signed circle through the three neighbouring points,
    kappa = 2 * cross / (|a| |b| |c|); endpoints copy their neighbour.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("x and y must be 1-D arrays of equal length")
    chords = np.hypot(np.diff(x), np.diff(y))
    s = np.concatenate([[0.0], np.cumsum(chords)])
    kappa = np.zeros_like(x)
    if len(x) >= 3:
        a, b = chords[:-1], chords[1:]
        c = np.hypot(x[2:] - x[:-2], y[2:] - y[:-2])
        cross = (x[1:-1] - x[:-2]) * (y[2:] - y[:-2]) - (y[1:-1] - y[:-2]) * (x[2:] - x[:-2])
        with np.errstate(divide='ignore', invalid='ignore'):
            kappa[1:-1] = np.where(a * b * c > 0, 2.0 * cross / (a * b * c), 0.0)
        kappa[0], kappa[-1] = kappa[1], kappa[-2]
    return PathProfile(s=s, kappa=kappa, v_limit=None if v_limit is None else np.asarray(v_limit, float))


def sample_profile(path: PathProfile, profile: VelocityProfile, s_query) -> np.ndarray:
    """Planned speed at arbitrary arc lengths (linear between path points)"""
    return np.interp(s_query, path.s, profile.v)
