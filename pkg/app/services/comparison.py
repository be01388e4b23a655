"""
Strategy Comparison
Runs every strategy on one cycle and assembles the fuel and RMSE tables
"""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, Optional, Tuple, Union

from app.config import ParameterSet
from app.exceptions import EmsError, SimulationBoundError
from app.models.control import StrategyKind
from app.models.optimization import SocGrid
from app.models.prediction import CycleDataset, PredictorModel
from app.models.powertrain import PowertrainParams
from app.models.simulation import ComparisonReport, ComparisonRow, DrivingCycle, SimConfig, SimLog
from app.services.base_service import BaseService
from app.services.cycle_prediction import evaluate_predictor
from app.services.powertrain import build_powertrain
from app.services.simulation import Simulator, equivalent_fuel, top_decile_fraction
from app.services.strategies import build_strategy

BASELINE = StrategyKind.POWER_FOLLOWING.value


class ComparisonService(BaseService):
    """Runs the strategy rows of a comparison and scores them"""

    def __init__(
        self,
        params: Optional[ParameterSet] = None,
        workers: int = 1,
        powertrain: Optional[PowertrainParams] = None,
        grid: Optional[SocGrid] = None,
    ):
        super().__init__("ComparisonService")
        self.params = params or ParameterSet()
        self.powertrain = powertrain or build_powertrain(self.params)
        self.sim_cfg = SimConfig.from_parameters(self.params)
        self.workers = max(1, workers)
        self.grid = grid

    def reset(self) -> None:
        pass

    def run_row(
        self,
        kind: StrategyKind,
        cycle: DrivingCycle,
        predictors: Dict[str, PredictorModel],
    ) -> Tuple[ComparisonRow, Optional[SimLog]]:
        """One strategy on the cycle; failures end up in the row, not raised"""
        try:
            strategy = build_strategy(kind, self.params, self.powertrain, cycle, predictors, grid=self.grid)
            log = Simulator(self.powertrain, self.sim_cfg).run(cycle, strategy)
        except SimulationBoundError as exc:
            self.log_error("Strategy row stopped", strategy=kind.value, error=exc.message)
            return ComparisonRow(strategy=kind.value, error=exc.message), exc.partial_log
        except EmsError as exc:
            self.log_error("Strategy row failed", strategy=kind.value, error=exc.message)
            return ComparisonRow(strategy=kind.value, error=exc.message), None

        row = ComparisonRow(
            strategy=kind.value,
            equivalent_fuel=equivalent_fuel(log, self.powertrain, self.sim_cfg.soc_target),
            raw_fuel=log.total_fuel,
            delta_soc=log.soc_init - log.soc_final,
            top_decile_fraction=top_decile_fraction(log, self.powertrain),
            fallback_steps=log.fallback_steps,
        )
        return row, log

    def compare(
        self,
        cycle: DrivingCycle,
        strategies: Iterable[Union[StrategyKind, str]],
        predictors: Optional[Dict[str, PredictorModel]] = None,
        evaluation: Optional[CycleDataset] = None,
    ) -> ComparisonReport:
        kinds = [StrategyKind(s) for s in strategies]
        predictors = predictors or {}
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(lambda k: self.run_row(k, cycle, predictors), kinds))
        else:
            results = [self.run_row(k, cycle, predictors) for k in kinds]

        report = ComparisonReport()
        for row, log in results:
            report.rows.append(row)
            if log is not None:
                report.logs[row.strategy] = log
        apply_improvement(report)

        if evaluation is not None:
            for name, model in sorted(predictors.items()):
                report.rmse[name] = evaluate_predictor(model, evaluation)

        self.update_timestamp()
        self.log_info(
            "Comparison complete",
            cycle=cycle.name,
            rows=len(report.rows),
            failed=sum(bool(r.error) for r in report.rows),
        )
        return report


def apply_improvement(report: ComparisonReport, baseline: str = BASELINE) -> None:
    """Fill ``improvement`` as (base − x) / base of equivalent fuel against the baseline row"""
    try:
        base = report.row(baseline).equivalent_fuel
    except KeyError:
        base = math.nan
    for row in report.rows:
        if row.error or not math.isfinite(base) or base == 0:
            row.improvement = math.nan
        else:
            row.improvement = (base - row.equivalent_fuel) / base


def compare_strategies(
    cycle: DrivingCycle,
    strategies: Iterable[Union[StrategyKind, str]],
    predictors: Optional[Dict[str, PredictorModel]] = None,
    params: Optional[ParameterSet] = None,
    evaluation: Optional[CycleDataset] = None,
    workers: int = 1,
    powertrain: Optional[PowertrainParams] = None,
    grid: Optional[SocGrid] = None,
) -> ComparisonReport:
    """
    Simulate each strategy on ``cycle`` and build the comparison report.

    A ``grid`` puts the MPC and global DP rows on that uniform lattice.
    """
    return ComparisonService(params, workers, powertrain, grid).compare(cycle, strategies, predictors, evaluation)
