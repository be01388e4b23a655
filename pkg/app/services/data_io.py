"""
Data Files
CSV readers and writers for paths, profiles, cycles, datasets, fuel maps and
reports.

Every CSV this module writes starts with one comment line recording the seed
and the parameter hash, followed by a header row. Readers skip ``#`` lines.
"""

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from pydantic import ValidationError

from app.config import ParameterSet
from app.exceptions import DatasetError, InputError
from app.models.optimization import DpSolution
from app.models.planning import PathProfile, VelocityProfile
from app.models.powertrain import FuelMap, PowertrainParams
from app.models.prediction import CycleDataset, Episode
from app.models.simulation import ComparisonReport, DrivingCycle, SimLog
from app.services.powertrain import point_efficiency
from app.services.speed_planner import path_from_xy

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]

EPISODE_FILE = "episode-{index:03d}.csv"
EPISODE_GLOB = "episode-*.csv"


def provenance(seed: Optional[int], params: Optional[ParameterSet]) -> str:
    digest = (params or ParameterSet()).digest()
    return f"# seed={seed if seed is not None else 'none'}, params={digest}"


def write_csv(
    frame: pd.DataFrame,
    path: PathLike,
    seed: Optional[int] = None,
    params: Optional[ParameterSet] = None,
    index: bool = False,
) -> Path:
    """Write ``frame`` under the provenance comment line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as fh:
        fh.write(provenance(seed, params) + "\n")
        frame.to_csv(fh, index=index, lineterminator="\n")
    logger.debug("csv written", path=str(path), rows=len(frame))
    return path


def read_csv(path: PathLike, required: Sequence[str], numeric: bool = True) -> pd.DataFrame:
    """Read a CSV and check that ``required`` columns exist (and are finite when numeric)"""
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, comment='#', skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot parse CSV: {exc}") from exc
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing columns {missing}", path=str(path))
    if frame.empty:
        raise InputError(f"{path}: no data rows", path=str(path))
    if numeric:
        try:
            values = frame.astype(float)
        except ValueError as exc:
            raise InputError(f"{path}: non-numeric value: {exc}") from exc
        if not np.all(np.isfinite(values.to_numpy())):
            raise InputError(f"{path}: non-finite values", path=str(path))
        frame = values
    return frame


def _optional(frame: pd.DataFrame, column: str) -> Optional[np.ndarray]:
    return frame[column].to_numpy(dtype=float) if column in frame.columns else None


# ---------------------------------------------------------------------------
# Paths and profiles
# ---------------------------------------------------------------------------

def read_path(path: PathLike) -> PathProfile:
    """Path CSV with ``s,kappa`` or ``x,y`` columns and an optional ``v_limit``"""
    if not Path(path).exists():
        raise InputError(f"file not found: {path}")
    try:
        columns = {str(c).strip() for c in pd.read_csv(path, comment='#', nrows=0).columns}
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path}: cannot parse CSV: {exc}") from exc
    if {'x', 'y'} <= columns and 's' not in columns:
        frame = read_csv(path, ['x', 'y'])
        return path_from_xy(frame['x'].to_numpy(), frame['y'].to_numpy(), _optional(frame, 'v_limit'))
    frame = read_csv(path, ['s', 'kappa'])
    return PathProfile(frame['s'].to_numpy(), frame['kappa'].to_numpy(), _optional(frame, 'v_limit'))


def write_profile(
    path_profile: PathProfile,
    profile: VelocityProfile,
    out: PathLike,
    seed: Optional[int] = None,
    params: Optional[ParameterSet] = None,
) -> Path:
    frame = pd.DataFrame({'s': path_profile.s, 'kappa': path_profile.kappa, 'v': profile.v})
    return write_csv(frame, out, seed, params)


# ---------------------------------------------------------------------------
# Cycles and datasets
# ---------------------------------------------------------------------------

def read_cycle(path: PathLike) -> DrivingCycle:
    """Cycle CSV: ``t`` (s), ``v`` (km/h); optional slope, yaw, planned (m/s), planned_yaw"""
    frame = read_csv(path, ['t', 'v'])
    return DrivingCycle(
        t=frame['t'].to_numpy(),
        v=frame['v'].to_numpy(),
        slope=_optional(frame, 'slope'),
        yaw=_optional(frame, 'yaw'),
        planned=_optional(frame, 'planned'),
        planned_yaw=_optional(frame, 'planned_yaw'),
        name=Path(path).stem,
    )


def cycle_frame(cycle: DrivingCycle) -> pd.DataFrame:
    columns = {'t': cycle.t, 'v': cycle.v, 'slope': cycle.slope, 'yaw': cycle.yaw}
    if cycle.planned is not None:
        columns['planned'] = cycle.planned
    if cycle.planned_yaw is not None:
        columns['planned_yaw'] = cycle.planned_yaw
    return pd.DataFrame(columns)


def write_cycle(
    cycle: DrivingCycle,
    out: PathLike,
    seed: Optional[int] = None,
    params: Optional[ParameterSet] = None,
) -> Path:
    return write_csv(cycle_frame(cycle), out, seed, params)


def write_dataset(
    cycles: Iterable[DrivingCycle],
    directory: PathLike,
    seed: Optional[int] = None,
    params: Optional[ParameterSet] = None,
) -> Path:
    """One ``episode-NNN.csv`` per episode (``t, v_actual, v_planned, yaw, planned_yaw``; m/s)"""
    directory = Path(directory)
    count = 0
    for index, cycle in enumerate(cycles):
        planned = cycle.planned if cycle.planned is not None else cycle.v_ms
        planned_yaw = cycle.planned_yaw if cycle.planned_yaw is not None else cycle.yaw
        frame = pd.DataFrame({
            't': cycle.t,
            'v_actual': cycle.v_ms,
            'v_planned': planned,
            'yaw': cycle.yaw,
            'planned_yaw': planned_yaw,
        })
        write_csv(frame, directory / EPISODE_FILE.format(index=index), seed, params)
        count += 1
    if not count:
        raise DatasetError("no episodes to write")
    return directory


def read_dataset(path: PathLike) -> Tuple[CycleDataset, List[DrivingCycle]]:
    """Read a dataset directory (or one episode file) back into episodes and cycles, in file order"""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob(EPISODE_GLOB))
        if not files:
            raise DatasetError(f"{path}: dataset has no episodes")
    else:
        files = [path]
    episodes, cycles = [], []
    for file in files:
        frame = read_csv(file, ['t', 'v_actual', 'v_planned'])
        actual = frame['v_actual'].to_numpy()
        planned = frame['v_planned'].to_numpy()
        episodes.append(Episode(actual=actual, planned=planned, name=file.stem))
        cycles.append(DrivingCycle(
            t=frame['t'].to_numpy(),
            v=actual * 3.6,
            yaw=_optional(frame, 'yaw'),
            planned=planned,
            planned_yaw=_optional(frame, 'planned_yaw'),
            name=file.stem,
        ))
    return CycleDataset(episodes), cycles


# ---------------------------------------------------------------------------
# Powertrain tables
# ---------------------------------------------------------------------------

def read_fuel_map(path: PathLike) -> FuelMap:
    """
    Gridded fuel map: header row of engine speeds (rpm), first column of
    torques (N·m), one fuel rate (g/s) per cell.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, comment='#', index_col=0, skipinitialspace=True)
        torques = frame.index.astype(float)
        speeds = pd.Index([str(c).strip() for c in frame.columns]).astype(float)
        rates = frame.to_numpy(dtype=float)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: cannot read fuel map grid: {exc}") from exc
    if rates.size == 0 or not np.all(np.isfinite(rates)):
        raise InputError(f"{path}: fuel map is not a complete grid")
    try:
        return FuelMap(
            torques=tuple(float(t) for t in torques),
            speeds=tuple(float(n) for n in speeds),
            rates=tuple(tuple(float(x) for x in row) for row in rates),
        )
    except ValidationError as exc:
        raise InputError(f"{path}: invalid fuel map: {exc.errors()[0]['msg']}") from exc


def write_fuel_map(fuel_map: FuelMap, out: PathLike, seed=None, params=None) -> Path:
    frame = pd.DataFrame(
        fuel_map.table,
        index=pd.Index(fuel_map.torques, name='torque'),
        columns=[f"{n:g}" for n in fuel_map.speeds],
    )
    return write_csv(frame, out, seed, params, index=True)


def read_voc_curve(path: PathLike) -> List[Tuple[float, float]]:
    """``soc, voc`` knots of the open-circuit voltage curve"""
    frame = read_csv(path, ['soc', 'voc']).sort_values('soc')
    return list(zip(frame['soc'].astype(float), frame['voc'].astype(float)))


# ---------------------------------------------------------------------------
# Simulation outputs and reports
# ---------------------------------------------------------------------------

def write_simlog(log: SimLog, out: PathLike, seed=None, params=None) -> Path:
    frame = pd.DataFrame(log.to_records())
    frame.insert(0, 'strategy', log.strategy)
    return write_csv(frame, out, seed, params)


def write_soc_trace(log: SimLog, out: PathLike, seed=None, params=None) -> Path:
    frame = pd.DataFrame({'t': log.column('t'), 'soc': log.column('soc')})
    return write_csv(frame, out, seed, params)


def write_engine_points(
    log: SimLog,
    powertrain: PowertrainParams,
    out: PathLike,
    seed=None,
    params=None,
) -> Path:
    """Engine operating points with their brake efficiency, for plotting over the map"""
    n_e, t_e = log.column('n_e'), log.column('t_e')
    frame = pd.DataFrame({
        't': log.column('t'),
        'n_e': n_e,
        't_e': t_e,
        'fuel_rate': log.column('fuel_rate'),
        'efficiency': point_efficiency(t_e, n_e, powertrain.genset),
    })
    return write_csv(frame, out, seed, params)


def comparison_frame(report: ComparisonReport) -> pd.DataFrame:
    rows = []
    for row in report.rows:
        rows.append({
            'strategy': row.strategy,
            'equivalent_fuel_g': row.equivalent_fuel,
            'raw_fuel_g': row.raw_fuel,
            'delta_soc': row.delta_soc,
            'improvement_pct': 100.0 * row.improvement,
            'top_decile_fraction': row.top_decile_fraction,
            'fallback_steps': row.fallback_steps,
            'error': row.error,
        })
    return pd.DataFrame(rows)


def write_comparison(report: ComparisonReport, out: PathLike, seed=None, params=None) -> Path:
    return write_csv(comparison_frame(report), out, seed, params)


def write_rmse(rmse: Dict[str, float], out: PathLike, seed=None, params=None) -> Path:
    frame = pd.DataFrame({'predictor': list(rmse), 'rmse_kmh': list(rmse.values())})
    return write_csv(frame, out, seed, params)


def lattice_frame(solution: DpSolution) -> pd.DataFrame:
    """Every finite node of the cost-to-come lattice with its predecessor"""
    stage, i, j = np.nonzero(np.isfinite(solution.cost_to_come))
    return pd.DataFrame({
        'stage': stage,
        'soc': solution.grid.soc_levels[i],
        'speed': solution.grid.speed_levels[j],
        'cost': solution.cost_to_come[stage, i, j],
        'pred_soc': solution.pred_soc[stage, i, j],
        'pred_speed': solution.pred_speed[stage, i, j],
    })


def write_lattice(solution: DpSolution, out: PathLike, seed=None, params=None) -> Path:
    return write_csv(lattice_frame(solution), out, seed, params)
