"""
Application Configuration
Environment-driven settings plus the flat dotted-key parameter file
"""

import hashlib
import math
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from dotenv import load_dotenv

from app.exceptions import ConfigurationError

# Load environment variables
load_dotenv()


class Config:
    """Application configuration"""

    # Logging
    LOG_LEVEL = os.getenv('EMS_LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.getenv('EMS_LOG_FORMAT', 'console')

    # Reproducibility
    SEED = int(os.getenv('EMS_SEED', '42'))

    # Files
    OUTPUT_DIR = os.getenv('EMS_OUTPUT_DIR', './output')
    PARAMS_FILE = os.getenv('EMS_PARAMS_FILE', '')

    @classmethod
    def output_path(cls, *parts: str) -> Path:
        """Resolve a path under the output directory, creating parents"""
        path = Path(cls.OUTPUT_DIR).joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    @classmethod
    def get_runtime_info(cls) -> dict:
        """Get runtime configuration info"""
        return {
            'log_level': cls.LOG_LEVEL,
            'log_format': cls.LOG_FORMAT,
            'seed': cls.SEED,
            'output_dir': cls.OUTPUT_DIR,
            'params_file': cls.PARAMS_FILE or None,
        }


# Singleton config instance
config = Config()


# Every tunable number of the simulator, by dotted path. Parameter files may
# override any of these and nothing else.
DEFAULT_PARAMETERS: Dict[str, float] = {
    # Vehicle (Table I plus resistance coefficients)
    'vehicle.mass': 9359.0,
    'vehicle.transmission_ratio': 14.89,
    'vehicle.drive_wheel_radius': 0.2654,
    'vehicle.rolling_coeff': 0.04,
    'vehicle.air_coeff': 1.0,
    'vehicle.frontal_area': 3.0,
    'vehicle.steering_coeff': 0.6,
    'vehicle.track_length': 3.0,
    'vehicle.gravity': 9.81,
    'vehicle.motor_eff': 0.9,
    'vehicle.transmission_eff': 0.95,
    # Battery pack
    'battery.capacity_ah': 96.0,
    'battery.internal_resistance': 0.1,
    'battery.voc_offset': 300.0,
    'battery.voc_slope': 40.0,
    'battery.soc_min': 0.6,
    'battery.soc_max': 0.8,
    'battery.p_charge_max': -45000.0,
    'battery.p_discharge_max': 60000.0,
    # Engine-generator set
    'genset.idle_speed': 800.0,
    'genset.engine_speed_max': 3200.0,
    'genset.engine_power_max': 96000.0,
    'genset.gen_eff': 0.95,
    'genset.engine_inertia': 0.5,
    'genset.gen_inertia': 0.3,
    'genset.speed_rate_max': 400.0,
    'genset.torque_rate_max': 600.0,
    'genset.q_lhv': 42500.0,
    'genset.eff_peak': 0.36,
    'genset.eff_peak_speed': 2200.0,
    'genset.eff_peak_torque': 240.0,
    'genset.eff_floor': 0.15,
    'genset.eff_speed_curvature': 0.08,
    'genset.eff_torque_curvature': 0.06,
    'genset.idle_fuel': 0.15,
    'genset.map_speed_step': 200.0,
    'genset.map_torque_step': 20.0,
    'genset.map_torque_max': 320.0,
    # Speed planner
    'planner.v_max': 15.0,
    'planner.a_lat_max': 2.0,
    'planner.a_lon_max': 1.5,
    'planner.d_lon_max': 2.5,
    'planner.j_lon_max': 2.0,
    'planner.v_start': 0.0,
    'planner.v_end': 0.0,
    'planner.eps': 1e-4,
    'planner.max_iter': 100,
    'planner.v_floor': 0.1,
    # Cycle prediction
    'prediction.history': 10,
    'prediction.planned': 5,
    'prediction.horizon': 5,
    'prediction.v_min': 0.0,
    'prediction.v_max': 15.0,
    'prediction.theta': 0.05,
    'prediction.markov_bin': 0.25,
    'prediction.nn_hidden': 10,
    'prediction.nn_max_iter': 400,
    'prediction.nn_l2': 1e-5,
    'prediction.cnn_filters': 8,
    'prediction.cnn_kernel': 3,
    'prediction.lstm_hidden': 16,
    'prediction.learning_rate': 0.05,
    'prediction.momentum': 0.9,
    'prediction.epochs': 120,
    'prediction.batch_size': 64,
    'prediction.patience': 15,
    'prediction.grad_clip': 1.0,
    'prediction.validation_fraction': 0.2,
    'prediction.min_samples': 50,
    # Dynamic programming
    'dp.soc_parts': 40,
    'dp.speed_levels': 13,
    'dp.w_fuel': 1.0,
    'dp.w_soc': 1000.0,
    'dp.dt': 1.0,
    # Receding-horizon controller
    'mpc.horizon': 5,
    'mpc.control_horizon': 5,
    'mpc.soc_target': 0.7,
    'mpc.power_resolution': 4000.0,
    'mpc.band_levels': 40,
    'mpc.eq_efficiency': 0.36,
    # Power-following baseline
    'pf.tau': 2.0,
    'pf.k_soc': 20.0,
    'pf.p_corr': 30000.0,
    # Offline full-information benchmark
    'benchmark.soc_band': 0.01,
    'benchmark.power_resolution': 4000.0,
    'benchmark.w_soc': 0.0,
    # Synthetic data
    'generator.episodes': 40,
    'generator.k_track': 0.6,
    'generator.sigma_v': 0.15,
    'generator.segments': 8,
    'generator.segment_length': 120.0,
    'generator.curvature_max': 0.05,
    'generator.v_limit_min': 3.0,
    'generator.path_step': 2.0,
    # Closed-loop simulation
    'sim.soc_init': 0.7,
    'sim.mass_scale': 1.0,
    'sim.rolling_scale': 1.0,
}


class ParameterSet:
    """
    Flat dotted-key parameter store.

    Keys use dot notation (``battery.soc_min``); ``section('battery')`` returns
    the nested view that the record constructors consume.
    """

    def __init__(self, overrides: Optional[Dict[str, float]] = None):
        self._values: Dict[str, float] = dict(DEFAULT_PARAMETERS)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    @classmethod
    def from_file(cls, path: Union[str, Path, None]) -> 'ParameterSet':
        """Load a ``key = value`` parameter file on top of the defaults"""
        if not path:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Parameter file not found: {path}")
        return cls(parse_parameter_lines(path.read_text().splitlines(), source=str(path)))

    def get(self, key: str, default: Any = None) -> Any:
        """Get a parameter value"""
        return self._values.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set a parameter value; unknown keys are rejected"""
        if key not in DEFAULT_PARAMETERS:
            raise ConfigurationError(f"Unknown parameter '{key}'")
        try:
            number = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"Parameter '{key}' is not a number: {value!r}") from exc
        if not math.isfinite(number):
            raise ConfigurationError(f"Parameter '{key}' must be finite")
        self._values[key] = number

    def section(self, name: str) -> Dict[str, float]:
        """Get all parameters of one section, keyed by the remainder of the path"""
        prefix = f"{name}."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def as_dict(self) -> Dict[str, float]:
        return dict(self._values)

    def digest(self) -> str:
        """Stable hash of the resolved parameter set"""
        listing = "\n".join(f"{k}={self._values[k]!r}" for k in sorted(self._values))
        return hashlib.sha256(listing.encode()).hexdigest()[:16]

    def export(self) -> str:
        """Render as a parameter file"""
        return "\n".join(f"{k} = {self._values[k]!r}" for k in sorted(self._values)) + "\n"


def parse_parameter_lines(lines: Iterable[str], source: str = "<parameters>") -> Dict[str, float]:
    """Parse ``dotted.key = number`` lines; ``#`` starts a comment"""
    values: Dict[str, float] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key not in DEFAULT_PARAMETERS:
            raise ConfigurationError(f"{source}:{lineno}: unknown parameter '{key}'")
        try:
            values[key] = float(value.strip())
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: '{value.strip()}' is not a number") from exc
    return values
