#!/usr/bin/env python3
"""Velocity predictors: forecasts, training, gradients and persistence."""

import json

import numpy as np
import pytest

from app.config import ParameterSet
from app.exceptions import DatasetError, InputError, ModelFormatError
from app.models.prediction import CycleDataset, Episode, PredictionConfig, PredictionInput, PredictorKind, PredictorModel
from app.services import neural_networks as nn
from app.services.cycle_generator import generate_cycles
from app.services.cycle_prediction import (
    PredictorTrainer,
    evaluate_predictor,
    load_model,
    predict,
    predict_batch,
    rmse,
    save_model,
    train_predictor,
)


def sine_dataset(episodes: int = 4, length: int = 60) -> CycleDataset:
    t = np.arange(length)
    out = []
    for i in range(episodes):
        planned = 6.0 + 4.0 * np.sin(0.1 * t + i)
        actual = np.concatenate([[planned[0]], planned[:-1]])
        out.append(Episode(actual=actual, planned=planned, name=f"sine-{i}"))
    return CycleDataset(out)


def numeric_gradient(loss, theta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        step = np.zeros_like(theta)
        step[i] = eps
        grad[i] = (loss(theta + step) - loss(theta - step)) / (2 * eps)
    return grad


# ---------------------------------------------------------------------------
# RMSE
# ---------------------------------------------------------------------------

def test_rmse_single_window():
    assert rmse([[1.0, 0.0]], [[0.0, 0.0]]) == pytest.approx(3.6 / np.sqrt(2), abs=1e-3)
    assert rmse([[1.0, 0.0]], [[0.0, 0.0]]) == pytest.approx(2.546, abs=1e-3)


def test_rmse_averages_windows():
    # Per-window errors of 1 and 3 km/h
    predicted = np.array([[1.0, 1.0], [3.0, 3.0]]) / 3.6
    assert rmse(predicted, np.zeros((2, 2))) == pytest.approx(2.0)


def test_rmse_rejects_mismatch():
    with pytest.raises(InputError):
        rmse([[1.0, 2.0]], [[1.0]])
    with pytest.raises(InputError):
        rmse(np.zeros((0, 2)), np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# Parameter-free predictors
# ---------------------------------------------------------------------------

def test_exponential_constant_speed():
    model = PredictorModel(PredictorKind.EXPONENTIAL, PredictionConfig())
    out = predict(model, PredictionInput(np.full(10, 5.0), np.full(5, 5.0)))
    assert out.tolist() == pytest.approx([5.0] * 5)


def test_exponential_trend_is_bounded():
    cfg = PredictionConfig(theta=0.05)
    model = PredictorModel(PredictorKind.EXPONENTIAL, cfg)
    hist = np.concatenate([np.full(9, 1.0), [4.0]])
    out = predict(model, PredictionInput(hist, np.zeros(5)))
    assert out.tolist() == pytest.approx([4.0 * 1.05 ** i for i in range(1, 6)])
    stopped = predict(model, PredictionInput(np.zeros(10), np.zeros(5)))
    assert stopped.tolist() == [0.0] * 5


def test_planned_predictor_clamps_and_pads():
    cfg = PredictionConfig(planned=3, horizon=5, v_max=10.0)
    model = PredictorModel(PredictorKind.PLANNED, cfg)
    out = predict(model, PredictionInput(np.zeros(10), [4.0, 12.0, 8.0], horizon=5))
    assert out.tolist() == [4.0, 10.0, 8.0, 8.0, 8.0]


def test_window_shape_is_checked():
    model = PredictorModel(PredictorKind.EXPONENTIAL, PredictionConfig())
    with pytest.raises(InputError):
        predict_batch(model, np.zeros((1, 4)), np.zeros((1, 5)))
    with pytest.raises(InputError):
        predict(model, PredictionInput(np.zeros(10), np.zeros(5), horizon=3))


# ---------------------------------------------------------------------------
# Markov chain
# ---------------------------------------------------------------------------

def test_markov_constant_speed():
    data = CycleDataset([Episode(actual=np.full(60, 5.0), planned=np.full(60, 5.0))])
    model = train_predictor(PredictorKind.MARKOV, data)
    bin_index = int(round(5.0 / model.config.markov_bin))
    assert model.weights['transition'][bin_index, bin_index] == pytest.approx(1.0)
    out = predict(model, PredictionInput(np.full(10, 5.0), np.full(5, 5.0)))
    assert out.tolist() == pytest.approx([5.0] * 5)


def test_markov_reproduces_sawtooth():
    saw = np.tile([1.0, 2.0, 3.0], 20)
    model = train_predictor(PredictorKind.MARKOV, CycleDataset([Episode(actual=saw, planned=saw)]))
    history = saw[:10]
    assert history[-1] == 1.0
    out = predict(model, PredictionInput(history, np.zeros(5)))
    assert out.tolist() == [2.0, 3.0, 1.0, 2.0, 3.0]


def test_markov_rows_are_stochastic():
    model = train_predictor(PredictorKind.MARKOV, sine_dataset())
    assert np.allclose(model.weights['transition'].sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def test_multistep_gradient(rng):
    params = nn.init_multistep(6, 5, rng)
    params['b1'] = rng.normal(0.0, 0.1, 5)
    x, y = rng.uniform(0, 1, (12, 6)), rng.uniform(0, 1, 12)
    keys = nn.MULTISTEP_KEYS
    theta = nn.pack(params, keys)

    def loss(th):
        return nn.multistep_loss_grad(nn.unpack(th, params, keys), x, y, 1e-3)[0]

    _, grads = nn.multistep_loss_grad(params, x, y, 1e-3)
    assert np.allclose(nn.pack(grads, keys), numeric_gradient(loss, theta), rtol=1e-4, atol=1e-8)


def test_untrained_multistep_predicts_persistence(rng):
    params = {key: np.zeros_like(value) for key, value in nn.init_multistep(6, 5, rng).items()}
    x = rng.uniform(0, 1, (8, 6))
    out, _ = nn.multistep_forward(params, x)
    assert np.array_equal(out, x[:, -1])


def test_cnn_lstm_gradient(rng):
    params = nn.init_cnn_lstm(3, 2, 4, 3, rng)
    params['conv_b'] = rng.normal(0.0, 0.1, 3)
    x = nn.fuse_inputs(rng.uniform(0, 1, (5, 4)), rng.uniform(0, 1, (5, 3)))
    y = rng.uniform(0, 1, (5, 3))
    keys = nn.CNN_LSTM_KEYS
    theta = nn.pack(params, keys)

    def loss(th):
        return nn.cnn_lstm_loss_grad(nn.unpack(th, params, keys), x, y, 3)[0]

    _, grads = nn.cnn_lstm_loss_grad(params, x, y, 3)
    assert np.allclose(nn.pack(grads, keys), numeric_gradient(loss, theta), rtol=1e-4, atol=1e-8)


def test_gradient_clipping():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    clipped = nn.clip_gradients(grads, 1.0)
    assert np.sqrt(clipped['a'] ** 2 + clipped['b'] ** 2)[0] == pytest.approx(1.0)
    assert nn.clip_gradients(grads, 10.0) is grads


def test_multistep_learns_identity():
    episodes = [
        Episode(actual=np.full(40, v), planned=np.full(40, v), name=str(v))
        for v in (1.0, 3.0, 5.0, 7.0, 9.0, 11.0)
    ]
    data = CycleDataset(episodes)
    model = train_predictor(PredictorKind.MULTISTEP_NN, data)
    assert evaluate_predictor(model, data) < 1e-2


def test_cnn_lstm_training_is_deterministic():
    cfg = PredictionConfig(epochs=3, min_samples=10, seed=7)
    first = train_predictor(PredictorKind.CNN_LSTM, sine_dataset(), cfg)
    second = train_predictor(PredictorKind.CNN_LSTM, sine_dataset(), cfg)
    assert set(first.weights) == set(nn.CNN_LSTM_KEYS)
    for key in first.weights:
        assert np.array_equal(first.weights[key], second.weights[key])


def test_trainer_keeps_epoch_history():
    trainer = PredictorTrainer(PredictionConfig(epochs=2, min_samples=10, patience=5))
    trainer.train(PredictorKind.CNN_LSTM, sine_dataset())
    assert [h['epoch'] for h in trainer.history] == [1, 2]
    assert all(np.isfinite(h['validation_rmse']) for h in trainer.history)


def test_too_few_windows():
    short = CycleDataset([Episode(actual=np.ones(20), planned=np.ones(20))])
    with pytest.raises(DatasetError):
        train_predictor(PredictorKind.MULTISTEP_NN, short)
    with pytest.raises(DatasetError):
        train_predictor(PredictorKind.MARKOV, CycleDataset())


def test_windows_layout():
    ep = Episode(actual=np.arange(20.0), planned=np.arange(20.0) + 100.0)
    hist, plan, target = CycleDataset([ep]).windows(PredictionConfig())
    assert hist.shape == (6, 10) and plan.shape == (6, 5) and target.shape == (6, 5)
    assert hist[0].tolist() == list(range(10))
    assert plan[0, 0] == 110.0
    assert target[0, 0] == 10.0


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    cfg = PredictionConfig(epochs=2, min_samples=10)
    model = train_predictor(PredictorKind.CNN_LSTM, sine_dataset(), cfg)
    path = save_model(model, tmp_path / "cnn.npz")
    restored = load_model(path)
    assert restored.kind is PredictorKind.CNN_LSTM
    assert restored.config == model.config
    inp = PredictionInput(np.linspace(2, 6, 10), np.full(5, 6.0))
    assert np.array_equal(predict(restored, inp), predict(model, inp))


def test_load_rejects_bad_files(tmp_path):
    bad_header = tmp_path / "bad.npz"
    np.savez(bad_header, header=np.array(json.dumps({'format': 'other', 'version': 1})))
    with pytest.raises(ModelFormatError):
        load_model(bad_header)

    model = train_predictor(PredictorKind.MARKOV, sine_dataset())
    path = save_model(model, tmp_path / "markov.npz")
    with np.load(path) as archive:
        header = str(archive['header'])
    wrong_shape = tmp_path / "shape.npz"
    np.savez(wrong_shape, header=np.array(header), w_transition=np.eye(3), w_centers=np.zeros(3))
    with pytest.raises(ModelFormatError):
        load_model(wrong_shape)

    garbage = tmp_path / "garbage.npz"
    garbage.write_bytes(b"not an archive")
    with pytest.raises(ModelFormatError):
        load_model(garbage)


@pytest.mark.slow
def test_informed_predictor_ordering():
    params = ParameterSet()
    data, _ = generate_cycles(42, params)
    train_set, held_out = data.split(0.2)
    cfg = PredictionConfig.from_parameters(params)
    scores = {
        kind: evaluate_predictor(train_predictor(kind, train_set, cfg), held_out)
        for kind in (PredictorKind.MARKOV, PredictorKind.MULTISTEP_NN, PredictorKind.CNN_LSTM)
    }
    assert scores[PredictorKind.CNN_LSTM] < 0.95 * scores[PredictorKind.MULTISTEP_NN]
    assert scores[PredictorKind.MULTISTEP_NN] < scores[PredictorKind.MARKOV]
