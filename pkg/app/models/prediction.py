"""
Cycle Prediction Records
Predictor kinds, windows, datasets and trained models
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import ParameterSet
from app.exceptions import DatasetError, InputError, ModelFormatError


class PredictorKind(str, enum.Enum):
    """Interchangeable short-horizon velocity predictors"""
    EXPONENTIAL = "exponential"
    MARKOV = "markov"
    MULTISTEP_NN = "multistep-nn"
    CNN_LSTM = "cnn-lstm"
    PLANNED = "planned"


class PredictionConfig(BaseModel):
    """Window sizes, bounds and training hyper-parameters"""

    model_config = ConfigDict(frozen=True)

    history: int = Field(10, ge=2)
    planned: int = Field(5, ge=1)
    horizon: int = Field(5, ge=1)
    v_min: float = Field(0.0, ge=0)
    v_max: float = Field(15.0, gt=0)
    theta: float = Field(0.05, ge=0)
    markov_bin: float = Field(0.25, gt=0)
    nn_hidden: int = Field(10, ge=1)
    nn_max_iter: int = Field(400, ge=1)
    nn_l2: float = Field(1e-5, ge=0)
    cnn_filters: int = Field(8, ge=1)
    cnn_kernel: int = Field(3, ge=1)
    lstm_hidden: int = Field(16, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(120, ge=1)
    batch_size: int = Field(64, ge=1)
    patience: int = Field(15, ge=1)
    grad_clip: float = Field(1.0, gt=0)
    validation_fraction: float = Field(0.2, ge=0, lt=1)
    min_samples: int = Field(50, ge=1)
    seed: int = 42

    @model_validator(mode='after')
    def _shapes(self) -> 'PredictionConfig':
        if self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.cnn_kernel > self.history + self.planned:
            raise ValueError("convolution kernel longer than the input sequence")
        return self

    @classmethod
    def from_parameters(cls, params: ParameterSet, **overrides) -> 'PredictionConfig':
        section = params.section('prediction')
        for key, value in section.items():
            if cls.model_fields[key].annotation is int:
                section[key] = int(value)
        section.update(overrides)
        return cls(**section)


@dataclass
class PredictionInput:
    """Observed speeds up to the current step and the planner's next speeds (m/s)"""

    history: np.ndarray
    planned: np.ndarray
    horizon: int = 5

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=float)
        self.planned = np.asarray(self.planned, dtype=float)
        for name, series in (('history', self.history), ('planned', self.planned)):
            if series.ndim != 1 or not np.all(np.isfinite(series)):
                raise InputError(f"prediction {name} must be a finite 1-D series")
            if np.any(series < 0):
                raise InputError(f"prediction {name} contains negative speeds")
        if self.horizon < 1:
            raise InputError("prediction horizon must be positive")


@dataclass
class Episode:
    """One driving episode: actual and planned speed on a common 1 s grid"""

    actual: np.ndarray
    planned: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.actual = np.asarray(self.actual, dtype=float)
        self.planned = np.asarray(self.planned, dtype=float)
        if self.actual.shape != self.planned.shape or self.actual.ndim != 1:
            raise DatasetError(f"episode {self.name!r}: actual and planned series differ in length")
        if not (np.all(np.isfinite(self.actual)) and np.all(np.isfinite(self.planned))):
            raise DatasetError(f"episode {self.name!r} contains non-finite speeds")

    def __len__(self) -> int:
        return len(self.actual)


@dataclass
class CycleDataset:
    """Ordered collection of episodes"""

    episodes: List[Episode] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    def split(self, holdout_fraction: float) -> Tuple['CycleDataset', 'CycleDataset']:
        """Split by whole episodes; the trailing episodes are held out"""
        n_hold = int(math.ceil(holdout_fraction * len(self.episodes))) if holdout_fraction > 0 else 0
        if n_hold >= len(self.episodes) and n_hold > 0:
            n_hold = len(self.episodes) - 1
        cut = len(self.episodes) - n_hold
        return CycleDataset(self.episodes[:cut]), CycleDataset(self.episodes[cut:])

    def windows(self, cfg: PredictionConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Sliding training windows.

        For every step k with a full history and a full future:
        history = actual[k - H_h:k], planned = planned[k:k + H_p],
        target = actual[k:k + p].
        """
        reach = max(cfg.planned, cfg.horizon)
        hist, plan, target = [], [], []
        for ep in self.episodes:
            for k in range(cfg.history, len(ep) - reach + 1):
                hist.append(ep.actual[k - cfg.history:k])
                plan.append(ep.planned[k:k + cfg.planned])
                target.append(ep.actual[k:k + cfg.horizon])
        if not hist:
            empty = np.zeros((0, 1))
            return empty.reshape(0, cfg.history), empty.reshape(0, cfg.planned), empty.reshape(0, cfg.horizon)
        return np.array(hist), np.array(plan), np.array(target)


@dataclass
class PredictorModel:
    """A trained (or parameter-free) predictor"""

    kind: PredictorKind
    config: PredictionConfig
    weights: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = PredictorKind(self.kind)
        for name, array in self.weights.items():
            if not np.all(np.isfinite(array)):
                raise ModelFormatError(f"weight '{name}' contains non-finite values", kind=self.kind.value)

    @property
    def bounds(self) -> Tuple[float, float]:
        return self.config.v_min, self.config.v_max

    def to_dict(self) -> dict:
        """Convert to dictionary (weights summarized by shape)"""
        return {
            'kind': self.kind.value,
            'weights': {k: list(v.shape) for k, v in self.weights.items()},
            'metadata': self.metadata,
        }
