#!/usr/bin/env python3
"""Speed planner passes, constraint checks and convergence."""

import numpy as np
import pytest

from app.exceptions import ConvergenceError, InputError
from app.models.planning import PathProfile, PlannerLimits, VelocityProfile
from app.services.speed_planner import (
    accel_decel_passes,
    check_profile,
    curvature_cap,
    path_from_xy,
    plan_speed,
    segment_jerk,
    smooth_profile,
)


def straight(points: int, step: float = 2.0) -> PathProfile:
    return PathProfile(s=np.arange(points) * step, kappa=np.zeros(points))


def random_path(rng: np.random.Generator, points: int = 40) -> PathProfile:
    s = np.concatenate([[0.0], np.cumsum(rng.uniform(0.5, 3.0, points - 1))])
    kappa = rng.normal(0.0, 0.03, points)
    spikes = rng.random(points) < 0.1
    kappa[spikes] = rng.uniform(-0.5, 0.5, int(spikes.sum()))
    return PathProfile(s=s, kappa=kappa)


def test_lateral_cap():
    lim = PlannerLimits(a_lat_max=2.0)
    path = PathProfile(s=[0.0, 1.0, 2.0], kappa=[0.5, 0.0, -0.5])
    assert curvature_cap(path, lim).v.tolist() == pytest.approx([2.0, lim.v_max, 2.0])


def test_environment_limit_is_applied():
    path = PathProfile(s=[0.0, 1.0, 2.0], kappa=[0.0, 0.0, 0.0], v_limit=[5.0, 4.0, 20.0])
    assert curvature_cap(path, PlannerLimits()).v.tolist() == pytest.approx([5.0, 4.0, 15.0])


def test_acceleration_pass():
    lim = PlannerLimits(a_lon_max=1.0, v_start=0.0, v_end=15.0)
    path = straight(2)
    out = accel_decel_passes(VelocityProfile(v=np.array([15.0, 15.0])), path, lim)
    assert out.v.tolist() == pytest.approx([0.0, 2.0])


def test_deceleration_pass():
    lim = PlannerLimits(d_lon_max=2.5, v_start=15.0, v_end=0.0)
    path = straight(3, step=5.0)
    out = accel_decel_passes(VelocityProfile(v=np.full(3, 15.0)), path, lim)
    assert out.v[-1] == 0.0
    assert out.v[1] == pytest.approx(5.0)
    assert out.v[0] == pytest.approx(np.sqrt(50.0))


def test_straight_path_at_full_speed():
    lim = PlannerLimits(v_start=15.0, v_end=15.0)
    profile = plan_speed(straight(30), lim)
    assert np.allclose(profile.v, 15.0)
    assert profile.iterations == 1
    assert profile.converged
    assert np.allclose(segment_jerk(profile.v, straight(30)), 0.0)


def test_hairpin_slows_down():
    kappa = np.zeros(61)
    kappa[28:33] = 1.0
    path = PathProfile(s=np.arange(61) * 2.0, kappa=kappa)
    lim = PlannerLimits()
    profile = plan_speed(path, lim)
    assert np.all(profile.v[28:33] <= np.sqrt(2.0) + 1e-9)
    assert profile.v.max() > 5.0
    assert check_profile(profile.v, path, lim) == []


def test_degenerate_lengths():
    lim = PlannerLimits(v_start=3.0)
    one = plan_speed(PathProfile(s=[0.0], kappa=[0.0]), lim)
    assert one.v.tolist() == [3.0]
    for points in (2, 3):
        path = straight(points)
        profile = plan_speed(path, lim)
        assert len(profile) == points
        assert check_profile(profile.v, path, lim) == []


def test_check_profile_reports_violations():
    lim = PlannerLimits()
    path = straight(4)
    problems = check_profile([0.0, 10.0, 0.0, 20.0], path, lim)
    assert any("speed cap" in p for p in problems)
    assert any("acceleration" in p for p in problems)
    assert any("deceleration" in p for p in problems)


def test_replanning_is_idempotent():
    lim = PlannerLimits()
    s = np.arange(80) * 2.0
    path = PathProfile(s=s, kappa=0.05 * np.sin(s / 20.0))
    first = plan_speed(path, lim)
    again = smooth_profile(first, path, lim)
    assert np.max(np.abs(again.v - first.v)) < lim.eps


def test_profile_and_path_must_align():
    with pytest.raises(InputError):
        accel_decel_passes(VelocityProfile(v=np.zeros(3)), straight(4), PlannerLimits())


def test_non_convergence_carries_last_iterate():
    kappa = np.zeros(61)
    kappa[28:33] = 1.0
    path = PathProfile(s=np.arange(61) * 2.0, kappa=kappa)
    lim = PlannerLimits(max_iter=1, eps=1e-12)
    with pytest.raises(ConvergenceError) as info:
        plan_speed(path, lim)
    last = info.value.last_value
    assert isinstance(last, VelocityProfile)
    assert not last.converged
    assert last.iterations == 1
    assert len(last) == len(path)
    assert last.v[0] == pytest.approx(lim.v_start)


def test_doubling_radii_raises_curvature_caps_by_sqrt2(rng):
    lim = PlannerLimits()
    kappa = rng.uniform(0.05, 1.0, 30) * rng.choice([-1.0, 1.0], 30)
    s = np.arange(30) * 2.0
    tight = curvature_cap(PathProfile(s=s, kappa=kappa), lim).v
    wide = curvature_cap(PathProfile(s=s, kappa=kappa / 2.0), lim).v
    assert np.all(wide < lim.v_max)
    assert wide == pytest.approx(np.sqrt(2.0) * tight, rel=1e-12)


def test_path_from_circle_points():
    theta = np.linspace(0.0, np.pi, 50)
    path = path_from_xy(10.0 * np.cos(theta), 10.0 * np.sin(theta))
    assert path.kappa == pytest.approx(np.full(50, 0.1), rel=1e-3)
    assert path.length == pytest.approx(10.0 * np.pi, rel=1e-3)
    clockwise = path_from_xy(10.0 * np.cos(-theta), 10.0 * np.sin(-theta))
    assert np.all(clockwise.kappa < 0)


def test_random_paths_are_feasible(rng):
    lim = PlannerLimits()
    converged = 0
    for _ in range(20):
        path = random_path(rng)
        try:
            profile = plan_speed(path, lim)
        except ConvergenceError:
            continue
        converged += 1
        assert check_profile(profile.v, path, lim) == []
        assert np.all(profile.v >= 0)
    assert converged >= 18


@pytest.mark.slow
def test_planner_converges_on_most_random_paths():
    rng = np.random.default_rng(2024)
    lim = PlannerLimits()
    failures = 0
    for _ in range(200):
        path = random_path(rng, points=int(rng.integers(20, 80)))
        try:
            profile = plan_speed(path, lim)
        except ConvergenceError:
            failures += 1
            continue
        assert check_profile(profile.v, path, lim) == []
    assert failures <= 2
