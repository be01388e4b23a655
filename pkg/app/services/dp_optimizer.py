"""
Dynamic Programming Optimizer
Forward DP over the SOC × engine-speed lattice with traceback.

Stage k moves the state from lattice node (soc_i, n_j) to (soc_i', n_j').
The transition fixes the battery power (SOC change), hence the genset output
(power balance) and the engine torque (speed change), and costs
``w_fuel · fuel_rate · dt + w_soc · (soc_i' - soc_target)² · dt``.

``evaluate_transitions`` computes this for whole blocks of the lattice and
``stage_cost`` runs the same arithmetic on one edge, so the solver and any
reference check agree bit for bit.
"""

import math
from typing import Dict, Tuple

import numpy as np
import structlog

from app.exceptions import DpInfeasibleError, InputError
from app.models.optimization import DpSolution, OcpProblem, SocGrid, StageCost, StageRecord, TerminalMode
from app.services.powertrain import (
    ENVELOPE_TOL,
    battery_power_from_dsoc_array,
    demand_power_array,
    fuel_rate_array,
    genset_feasible_array,
    genset_torques_array,
)

logger = structlog.get_logger(__name__)


def stage_demand(prob: OcpProblem, k: int) -> float:
    """Demand power of stage ``k`` (W)"""
    return float(demand_power_array(prob.v[k], prob.accel[k], prob.slope[k], prob.yaw[k], prob.params.vehicle))


def evaluate_transitions(
    prob: OcpProblem,
    p_req: float,
    soc_from,
    soc_to,
    speed_from,
    speed_to,
    hold_speed: bool = False,
) -> Dict[str, np.ndarray]:
    """
    Vectorised stage evaluation over broadcastable arrays of lattice values.

    Returns the stage cost (inf where infeasible) together with the implied
    powers, torques and fuel rate. The genset cannot absorb power, so an
    edge whose battery power leaves a negative genset share is infeasible;
    regeneration has to land in the battery as a charging SOC step.
    """
    b, g = prob.params.battery, prob.params.genset
    soc_from = np.asarray(soc_from, dtype=float)
    soc_to = np.asarray(soc_to, dtype=float)
    speed_from = np.asarray(speed_from, dtype=float)
    speed_to = np.asarray(speed_to, dtype=float)

    p_b = battery_power_from_dsoc_array(soc_to - soc_from, b.voc(soc_from), b, prob.dt)
    p_g = p_req - p_b
    # Rounding residue at a zero genset share; genset_feasible_array rejects real negatives
    p_g = np.where((p_g < 0.0) & (p_g >= -ENVELOPE_TOL), 0.0, p_g)
    dn = speed_to - speed_from
    with np.errstate(divide='ignore', invalid='ignore'):
        gen_torque, engine_torque = genset_torques_array(speed_to, p_g, dn / prob.dt, g)
        fuel = fuel_rate_array(engine_torque, speed_to, g)

    feasible = (
        (p_b >= b.p_charge_max - ENVELOPE_TOL)
        & (p_b <= b.p_discharge_max + ENVELOPE_TOL)
        & (np.abs(dn) <= g.speed_rate_max * prob.dt + ENVELOPE_TOL)
        & ((np.abs(dn) <= ENVELOPE_TOL) | (not hold_speed))
        & (soc_to >= b.soc_min - ENVELOPE_TOL)
        & (soc_to <= b.soc_max + ENVELOPE_TOL)
        & genset_feasible_array(speed_to, gen_torque, engine_torque, p_g, g)
        & np.isfinite(fuel)
    )
    cost = prob.w_fuel * fuel * prob.dt + prob.w_soc * (soc_to - prob.soc_target) ** 2 * prob.dt
    return {
        'cost': np.where(feasible, cost, np.inf),
        'feasible': feasible,
        'fuel_rate': fuel,
        'p_b': p_b,
        'p_g': p_g,
        'gen_torque': gen_torque,
        'engine_torque': engine_torque,
    }


def stage_cost(
    soc_from: float,
    soc_to: float,
    speed_from: float,
    speed_to: float,
    k: int,
    prob: OcpProblem,
) -> StageCost:
    """Cost and control of one lattice edge at stage ``k``; infeasible edges are marked, not raised"""
    if not 0 <= k < prob.horizon:
        raise IndexError(f"stage {k} outside horizon {prob.horizon}")
    p_req = stage_demand(prob, k)
    out = evaluate_transitions(prob, p_req, soc_from, soc_to, speed_from, speed_to, prob.holds_speed(k))
    if not bool(out['feasible']):
        return StageCost.infeasible()
    return StageCost(
        feasible=True,
        cost=float(out['cost']),
        fuel_rate=float(out['fuel_rate']),
        p_req=p_req,
        p_b=float(out['p_b']),
        p_g=float(out['p_g']),
        gen_torque=float(out['gen_torque']),
        engine_torque=float(out['engine_torque']),
    )


def _initial_costs(prob: OcpProblem, grid: SocGrid) -> Tuple[np.ndarray, int]:
    costs = np.full(grid.shape, np.inf)
    i0 = grid.snap_soc(prob.soc_init)
    if prob.speed_init is None:
        costs[i0, :] = 0.0
    else:
        costs[i0, grid.snap_speed(prob.speed_init)] = 0.0
    return costs, i0


def terminal_costs(prob: OcpProblem, grid: SocGrid, i0: int) -> np.ndarray:
    """Terminal adjustment per SOC level: the SOC valuation and the hard-terminal mask"""
    soc = grid.soc_levels
    extra = prob.soc_value * (soc[i0] - soc)
    if prob.terminal is TerminalMode.HARD:
        extra = np.where(np.arange(len(soc)) == i0, extra, np.inf)
    return extra


def _speed_reach(grid: SocGrid, prob: OcpProblem) -> int:
    levels = grid.speed_levels
    if len(levels) < 2:
        return 0
    limit = prob.params.genset.speed_rate_max * prob.dt + ENVELOPE_TOL
    return int(np.sum(levels[1:] - levels[0] <= limit))


def _blocks(size: int, offset: int) -> Tuple[slice, slice]:
    """Target and source index slices for a constant index offset"""
    lo, hi = max(0, offset), min(size, size + offset)
    return slice(lo, hi), slice(lo - offset, hi - offset)


def dp_solve(prob: OcpProblem, grid: SocGrid) -> DpSolution:
    """
    Forward dynamic programming with traceback.

    Ties are broken towards the lowest predecessor SOC index, then the lowest
    predecessor speed index; the terminal node is the first minimum in
    (soc, speed) order.
    """
    n = prob.horizon
    soc, speed = grid.soc_levels, grid.speed_levels
    n_soc, n_speed = grid.shape
    b = prob.params.battery

    cost_to_come = np.full((n + 1, n_soc, n_speed), np.inf)
    pred_soc = np.full((n + 1, n_soc, n_speed), -1, dtype=int)
    pred_speed = np.full((n + 1, n_soc, n_speed), -1, dtype=int)
    cost_to_come[0], i0 = _initial_costs(prob, grid)
    reach = _speed_reach(grid, prob)
    voc = b.voc(soc)

    for k in range(n):
        prev = cost_to_come[k]
        if not np.any(np.isfinite(prev)):
            raise DpInfeasibleError(f"no feasible lattice node at stage {k}", stage=k)
        p_req = stage_demand(prob, k)
        nxt, ps, pn = cost_to_come[k + 1], pred_soc[k + 1], pred_speed[k + 1]

        # Descending offsets visit predecessors in ascending index order
        for d in range(n_soc - 1, -n_soc, -1):
            to_s, from_s = _blocks(n_soc, d)
            p_b = battery_power_from_dsoc_array(soc[to_s] - soc[from_s], voc[from_s], b, prob.dt)
            if np.all((p_b < b.p_charge_max - ENVELOPE_TOL) | (p_b > b.p_discharge_max + ENVELOPE_TOL)):
                continue
            speed_reach = 0 if prob.holds_speed(k) else reach
            for e in range(speed_reach, -speed_reach - 1, -1):
                to_n, from_n = _blocks(n_speed, e)
                base = prev[from_s, from_n]
                if not np.any(np.isfinite(base)):
                    continue
                step = evaluate_transitions(
                    prob, p_req,
                    soc[from_s][:, None], soc[to_s][:, None],
                    speed[from_n][None, :], speed[to_n][None, :],
                    prob.holds_speed(k),
                )
                total = base + step['cost']
                target = nxt[to_s, to_n]
                better = total < target
                if np.any(better):
                    rows = np.broadcast_to(np.arange(from_s.start, from_s.stop)[:, None], total.shape)
                    cols = np.broadcast_to(np.arange(from_n.start, from_n.stop)[None, :], total.shape)
                    target[better] = total[better]
                    ps[to_s, to_n][better] = rows[better]
                    pn[to_s, to_n][better] = cols[better]

    final = cost_to_come[n] + terminal_costs(prob, grid, i0)[:, None]
    if not np.any(np.isfinite(final)):
        logger.warning("dp infeasible", horizon=n, terminal=prob.terminal.value)
        raise DpInfeasibleError("no lattice path reaches an admissible terminal node", stage=n)

    i, j = np.unravel_index(int(np.argmin(final)), final.shape)
    nodes = [(int(i), int(j))]
    for k in range(n, 0, -1):
        i, j = pred_soc[k, i, j], pred_speed[k, i, j]
        nodes.append((int(i), int(j)))
    nodes.reverse()

    trajectory = []
    for k, ((ia, ja), (ib, jb)) in enumerate(zip(nodes, nodes[1:])):
        edge = stage_cost(soc[ia], soc[ib], speed[ja], speed[jb], k, prob)
        trajectory.append(StageRecord(
            stage=k,
            soc_from=float(soc[ia]),
            soc_to=float(soc[ib]),
            speed_from=float(speed[ja]),
            speed_to=float(speed[jb]),
            gen_torque=edge.gen_torque,
            engine_torque=edge.engine_torque,
            p_req=edge.p_req,
            p_b=edge.p_b,
            p_g=edge.p_g,
            fuel=edge.fuel_rate * prob.dt,
            cost=edge.cost,
        ))

    return DpSolution(
        grid=grid,
        cost_to_come=cost_to_come,
        pred_soc=pred_soc,
        pred_speed=pred_speed,
        trajectory=trajectory,
        total_cost=float(final[nodes[-1]]),
        total_fuel=float(sum(r.fuel for r in trajectory)),
        terminal=prob.terminal,
        snap_distance=float(abs(soc[i0] - prob.soc_init)),
    )


# Feasible-path budget of the exhaustive reference
MAX_ENUMERATED_PATHS = 4_000_000


def _edge_table(prob: OcpProblem, grid: SocGrid, k: int) -> np.ndarray:
    """Stage-``k`` edge costs between every pair of flattened (soc, speed) nodes"""
    n_soc, n_speed = grid.shape
    soc_idx, speed_idx = np.divmod(np.arange(n_soc * n_speed), n_speed)
    soc, speed = grid.soc_levels[soc_idx], grid.speed_levels[speed_idx]
    out = evaluate_transitions(
        prob, stage_demand(prob, k),
        soc[:, None], soc[None, :], speed[:, None], speed[None, :],
        prob.holds_speed(k),
    )
    return out['cost']


def exhaustive_cost(prob: OcpProblem, grid: SocGrid, max_paths: int = MAX_ENUMERATED_PATHS) -> float:
    """
    Minimum total cost over every feasible node sequence, enumerated path by path.

    The frontier holds one entry per feasible partial path, so this is a
    reference for small instances; more than ``max_paths`` partial paths
    raises InputError.
    """
    start, i0 = _initial_costs(prob, grid)
    terminal = terminal_costs(prob, grid, i0)
    flat_start = start.ravel()
    nodes = np.flatnonzero(np.isfinite(flat_start))
    totals = flat_start[nodes]

    for k in range(prob.horizon):
        table = _edge_table(prob, grid, k)
        finite = np.isfinite(table)
        succ_count = finite.sum(axis=1)
        succ_node = np.nonzero(finite)[1]
        succ_cost = table[finite]
        succ_offset = np.concatenate([[0], np.cumsum(succ_count)[:-1]])

        counts = succ_count[nodes]
        size = int(counts.sum())
        if size == 0:
            return math.inf
        if size > max_paths:
            raise InputError(f"{size} feasible partial paths at stage {k} exceed {max_paths}")
        parent = np.repeat(np.arange(len(nodes)), counts)
        rank = np.arange(size) - np.repeat(np.cumsum(counts) - counts, counts)
        pos = succ_offset[nodes][parent] + rank
        nodes = succ_node[pos]
        totals = totals[parent] + succ_cost[pos]

    soc_idx = nodes // grid.shape[1]
    return float(np.min(totals + terminal[soc_idx]))
