"""
Cycle Prediction Service
Short-horizon velocity prediction from speed history and planned speed.

Five predictor kinds share one interface: ``train_predictor`` fits a
``PredictorModel`` on a ``CycleDataset``, ``predict`` forecasts the next p
speeds for one ``PredictionInput`` and ``predict_batch`` does the same for
stacked windows. Every forecast is clamped to the model's speed bounds.
"""

import json
import zipfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog
from scipy import optimize

from app.exceptions import ConvergenceError, DatasetError, InputError, ModelFormatError
from app.models.prediction import (
    CycleDataset,
    PredictionConfig,
    PredictionInput,
    PredictorKind,
    PredictorModel,
)
from app.services import neural_networks as nn
from app.services.base_service import BaseService

logger = structlog.get_logger(__name__)

MODEL_FORMAT = "ems-predictor"
MODEL_VERSION = 1
MS_TO_KMH = 3.6
STALL_SPEED = 1e-6


def rmse(predicted, actual) -> float:
    """
    Two-level root mean square error in km/h.

    Per window e = sqrt(mean of squared errors over the p steps); the overall
    error is the mean of the per-window values. Inputs are in m/s.
    """
    predicted = np.array(predicted, dtype=float, ndmin=2)
    actual = np.array(actual, dtype=float, ndmin=2)
    if predicted.size == 0 or actual.size == 0:
        raise InputError("rmse needs at least one window")
    if predicted.shape != actual.shape:
        raise InputError(f"prediction shape {predicted.shape} does not match actual {actual.shape}")
    per_window = np.sqrt(np.mean(((predicted - actual) * MS_TO_KMH) ** 2, axis=1))
    return float(np.mean(per_window))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _exponential(model: PredictorModel, hist: np.ndarray) -> np.ndarray:
    theta, p = model.config.theta, model.config.horizon
    last, prev = hist[:, -1], hist[:, -2]
    with np.errstate(divide='ignore', invalid='ignore'):
        trend = np.clip(last / prev - 1.0, -theta, theta)
    stalled = np.where(last > 0.0, theta, 0.0)
    trend = np.where(prev > STALL_SPEED, trend, stalled)
    powers = np.arange(1, p + 1)
    return last[:, None] * (1.0 + trend[:, None]) ** powers


def _markov_bins(speed: np.ndarray, centers: np.ndarray, width: float) -> np.ndarray:
    return np.clip(np.rint(speed / width), 0, len(centers) - 1).astype(int)


def _markov(model: PredictorModel, hist: np.ndarray) -> np.ndarray:
    transition, centers = model.weights['transition'], model.weights['centers']
    state = np.zeros((len(hist), len(centers)))
    state[np.arange(len(hist)), _markov_bins(hist[:, -1], centers, model.config.markov_bin)] = 1.0
    out = []
    for _ in range(model.config.horizon):
        state = state @ transition
        out.append(state @ centers)
    return np.stack(out, axis=1)


def _planned(model: PredictorModel, plan: np.ndarray) -> np.ndarray:
    p = model.config.horizon
    if plan.shape[1] >= p:
        return plan[:, :p]
    pad = np.repeat(plan[:, -1:], p - plan.shape[1], axis=1)
    return np.concatenate([plan, pad], axis=1)


def predict_batch(model: PredictorModel, history, planned) -> np.ndarray:
    """Forecast (B, p) speeds in m/s for stacked windows"""
    cfg = model.config
    hist = np.array(history, dtype=float, ndmin=2)
    plan = np.array(planned, dtype=float, ndmin=2)
    if hist.shape[1] != cfg.history or plan.shape[1] != cfg.planned or len(hist) != len(plan):
        raise InputError(
            f"{model.kind.value} expects history {cfg.history} and planned {cfg.planned}, "
            f"got {hist.shape} and {plan.shape}"
        )

    if model.kind is PredictorKind.EXPONENTIAL:
        out = _exponential(model, hist)
    elif model.kind is PredictorKind.MARKOV:
        out = _markov(model, hist)
    elif model.kind is PredictorKind.PLANNED:
        out = _planned(model, plan)
    elif model.kind is PredictorKind.MULTISTEP_NN:
        out = nn.multistep_rollout(model.weights, hist / cfg.v_max, cfg.horizon) * cfg.v_max
    else:
        x = nn.fuse_inputs(hist / cfg.v_max, plan / cfg.v_max)
        out, _ = nn.cnn_lstm_forward(model.weights, x, cfg.history - 1)
        out = out * cfg.v_max
    if not np.all(np.isfinite(out)):
        raise ModelFormatError(f"{model.kind.value} produced non-finite predictions")
    return np.clip(out, cfg.v_min, cfg.v_max)


def predict(model: PredictorModel, inp: PredictionInput) -> np.ndarray:
    """Forecast the next p speeds (m/s) for one window"""
    if inp.horizon != model.config.horizon:
        raise InputError(f"model horizon is {model.config.horizon}, input asks for {inp.horizon}")
    return predict_batch(model, inp.history[None, :], inp.planned[None, :])[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class PredictorTrainer(BaseService):
    """
    Fits predictors and keeps the per-epoch record of the last fit.
    """

    def __init__(self, cfg: Optional[PredictionConfig] = None):
        super().__init__("PredictorTrainer")
        self.cfg = cfg or PredictionConfig()
        self.history: List[Dict[str, float]] = []

    def reset(self) -> None:
        self.history.clear()

    def train(self, kind: Union[PredictorKind, str], data: CycleDataset) -> PredictorModel:
        """Train one predictor kind; deterministic for a fixed ``cfg.seed``"""
        kind = PredictorKind(kind)
        if len(data) == 0 or all(len(ep) == 0 for ep in data.episodes):
            raise DatasetError("training dataset is empty")
        self.reset()
        train_set, val_set = data.split(self.cfg.validation_fraction)
        if len(val_set) == 0:
            val_set = train_set

        self.log_info("Training predictor", kind=kind.value, episodes=len(data))
        if kind is PredictorKind.MARKOV:
            model = PredictorModel(kind, self.cfg, self._fit_markov(train_set))
        elif kind is PredictorKind.MULTISTEP_NN:
            weights, optimizer_used = self._fit_multistep(train_set)
            model = PredictorModel(kind, self.cfg, weights, {'optimizer': optimizer_used})
        elif kind is PredictorKind.CNN_LSTM:
            model = PredictorModel(kind, self.cfg, self._fit_cnn_lstm(train_set, val_set))
            model.metadata['epochs'] = len(self.history)
        else:
            model = PredictorModel(kind, self.cfg)

        hist, plan, target = val_set.windows(self.cfg)
        if len(hist):
            model.metadata['validation_rmse'] = rmse(predict_batch(model, hist, plan), target)
        model.metadata['train_episodes'] = len(train_set)
        self.update_timestamp()
        self.log_info("Predictor trained", kind=kind.value, **{
            k: v for k, v in model.metadata.items() if isinstance(v, (int, float, str))
        })
        return model

    def _windows(self, data: CycleDataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        hist, plan, target = data.windows(self.cfg)
        if len(hist) < self.cfg.min_samples:
            raise DatasetError(
                f"need at least {self.cfg.min_samples} training windows, dataset gives {len(hist)}",
                windows=len(hist),
            )
        return hist, plan, target

    def _fit_markov(self, data: CycleDataset) -> Dict[str, np.ndarray]:
        width = self.cfg.markov_bin
        n_bins = int(round(self.cfg.v_max / width)) + 1
        centers = np.arange(n_bins) * width
        counts = np.zeros((n_bins, n_bins))
        for ep in data.episodes:
            if len(ep) < 2:
                continue
            bins = _markov_bins(ep.actual, centers, width)
            np.add.at(counts, (bins[:-1], bins[1:]), 1.0)
        if counts.sum() == 0:
            raise DatasetError("no speed transitions to count")

        # Unvisited states get one pseudo-count on themselves and each neighbour
        for i in np.nonzero(counts.sum(axis=1) == 0)[0]:
            counts[i, max(i - 1, 0):min(i + 2, n_bins)] = 1.0
        transition = counts / counts.sum(axis=1, keepdims=True)
        return {'transition': transition, 'centers': centers}

    def _fit_multistep(self, data: CycleDataset) -> Tuple[Dict[str, np.ndarray], str]:
        hist, _, target = self._windows(data)
        x, y = hist / self.cfg.v_max, target[:, 0] / self.cfg.v_max
        rng = np.random.default_rng(self.cfg.seed)
        template = nn.init_multistep(self.cfg.history, self.cfg.nn_hidden, rng)
        keys = nn.MULTISTEP_KEYS

        def objective(theta):
            loss, grads = nn.multistep_loss_grad(nn.unpack(theta, template, keys), x, y, self.cfg.nn_l2)
            if not np.isfinite(loss):
                raise ConvergenceError("multistep network loss became non-finite")
            return loss, nn.pack(grads, keys)

        result = optimize.minimize(
            objective,
            nn.pack(template, keys),
            jac=True,
            method='L-BFGS-B',
            options={'maxiter': self.cfg.nn_max_iter},
        )
        theta, optimizer_used = result.x, 'L-BFGS-B'
        if not result.success and 'ABNORMAL' in str(result.message).upper():
            self.log_warning("Line search failed, continuing with gradient descent", message=str(result.message))
            theta, optimizer_used = self._gradient_descent(objective, theta), 'gradient-descent'
        self.history.append({'epoch': 1, 'train_loss': float(objective(theta)[0])})
        return {k: v.copy() for k, v in nn.unpack(theta, template, keys).items()}, optimizer_used

    def _gradient_descent(self, objective, theta: np.ndarray) -> np.ndarray:
        velocity = np.zeros_like(theta)
        for _ in range(self.cfg.nn_max_iter):
            _, grad = objective(theta)
            norm = np.linalg.norm(grad)
            if norm > self.cfg.grad_clip:
                grad = grad * (self.cfg.grad_clip / norm)
            velocity = self.cfg.momentum * velocity - self.cfg.learning_rate * grad
            theta = theta + velocity
        return theta

    def _fit_cnn_lstm(self, train_set: CycleDataset, val_set: CycleDataset) -> Dict[str, np.ndarray]:
        cfg = self.cfg
        hist, plan, target = self._windows(train_set)
        x = nn.fuse_inputs(hist / cfg.v_max, plan / cfg.v_max)
        y = target / cfg.v_max
        v_hist, v_plan, v_target = val_set.windows(cfg)
        if len(v_hist) == 0:
            v_hist, v_plan, v_target = hist, plan, target
        v_x = nn.fuse_inputs(v_hist / cfg.v_max, v_plan / cfg.v_max)

        rng = np.random.default_rng(cfg.seed)
        params = nn.init_cnn_lstm(cfg.cnn_filters, cfg.cnn_kernel, cfg.lstm_hidden, cfg.horizon, rng)
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        last = cfg.history - 1

        best_params = {k: v.copy() for k, v in params.items()}
        best_rmse, stale = np.inf, 0
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(x))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss, grads = nn.cnn_lstm_loss_grad(params, x[idx], y[idx], last)
                if not np.isfinite(loss):
                    raise ConvergenceError("conv-recurrent network loss became non-finite", epoch=epoch)
                grads = nn.clip_gradients(grads, cfg.grad_clip)
                for k in params:
                    velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * grads[k]
                    params[k] = params[k] + velocity[k]
                losses.append(loss)

            out, _ = nn.cnn_lstm_forward(params, v_x, last)
            val_rmse = rmse(np.clip(out * cfg.v_max, cfg.v_min, cfg.v_max), v_target)
            self.history.append({'epoch': epoch, 'train_loss': float(np.mean(losses)), 'validation_rmse': val_rmse})
            if epoch % 10 == 0:
                self.log_info("Epoch finished", epoch=epoch, train_loss=float(np.mean(losses)), validation_rmse=val_rmse)

            if val_rmse < best_rmse:
                best_rmse, stale = val_rmse, 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    self.log_info("Early stopping", epoch=epoch, best_validation_rmse=best_rmse)
                    break
        return best_params


def train_predictor(
    kind: Union[PredictorKind, str],
    data: CycleDataset,
    cfg: Optional[PredictionConfig] = None,
) -> PredictorModel:
    """Train a predictor of ``kind`` on ``data``"""
    return PredictorTrainer(cfg).train(kind, data)


def evaluate_predictor(model: PredictorModel, data: CycleDataset) -> float:
    """RMSE (km/h) of ``model`` over every window of ``data``"""
    hist, plan, target = data.windows(model.config)
    if len(hist) == 0:
        raise DatasetError("evaluation dataset yields no windows")
    return rmse(predict_batch(model, hist, plan), target)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _expected_shapes(kind: PredictorKind, cfg: PredictionConfig) -> Dict[str, Tuple[int, ...]]:
    rng = np.random.default_rng(0)
    if kind is PredictorKind.MULTISTEP_NN:
        template = nn.init_multistep(cfg.history, cfg.nn_hidden, rng)
    elif kind is PredictorKind.CNN_LSTM:
        template = nn.init_cnn_lstm(cfg.cnn_filters, cfg.cnn_kernel, cfg.lstm_hidden, cfg.horizon, rng)
    elif kind is PredictorKind.MARKOV:
        n_bins = int(round(cfg.v_max / cfg.markov_bin)) + 1
        return {'transition': (n_bins, n_bins), 'centers': (n_bins,)}
    else:
        return {}
    return {k: v.shape for k, v in template.items()}


def save_model(model: PredictorModel, path: Union[str, Path]) -> Path:
    """Write ``model`` as an .npz archive with a JSON header"""
    path = Path(path)
    header = {
        'format': MODEL_FORMAT,
        'version': MODEL_VERSION,
        'kind': model.kind.value,
        'config': model.config.model_dump(),
        'metadata': model.metadata,
    }
    arrays = {f"w_{k}": v for k, v in model.weights.items()}
    with path.open('wb') as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    logger.info("predictor saved", kind=model.kind.value, path=str(path))
    return path


def load_model(path: Union[str, Path]) -> PredictorModel:
    """Read a model written by ``save_model``; any mismatch is a ModelFormatError"""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive['header']))
            weights = {k[2:]: archive[k].copy() for k in archive.files if k.startswith('w_')}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise ModelFormatError(f"cannot read predictor file {path}: {exc}") from exc

    if header.get('format') != MODEL_FORMAT or header.get('version') != MODEL_VERSION:
        raise ModelFormatError(
            f"{path} is not an {MODEL_FORMAT} v{MODEL_VERSION} file",
            format=str(header.get('format')), version=str(header.get('version')),
        )
    try:
        kind = PredictorKind(header['kind'])
        cfg = PredictionConfig(**header['config'])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{path}: invalid header: {exc}") from exc

    expected = _expected_shapes(kind, cfg)
    actual = {k: v.shape for k, v in weights.items()}
    if actual != expected:
        raise ModelFormatError(f"{path}: weight shapes {actual} do not match {kind.value} {expected}")
    return PredictorModel(kind, cfg, weights, header.get('metadata', {}))
