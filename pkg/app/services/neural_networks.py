"""
Neural Network Kernels
Forward and backward passes of the two learned predictors, in plain numpy.

Both networks predict a correction on top of the last observed speed, with all
speeds normalised by v_max:

- multistep network: one tanh hidden layer mapping the last H_h speeds to the
  next speed; multi-step forecasts feed outputs back as inputs.
- conv-recurrent network: a 2-channel sequence (speed, source flag) of the
  history followed by the planned speeds, through a valid 1-D convolution with
  ReLU, an LSTM over the convolved sequence, and a dense head emitting all p
  steps at once.

Parameters travel as ``Dict[str, np.ndarray]``; ``pack``/``unpack`` flatten
them for scipy's optimizers and for gradient checks.
"""

from typing import Dict, List, Tuple

import numpy as np

Params = Dict[str, np.ndarray]

MULTISTEP_KEYS = ('w1', 'b1', 'w2', 'b2')
CNN_LSTM_KEYS = ('conv_w', 'conv_b', 'lstm_w', 'lstm_u', 'lstm_b', 'dense_w', 'dense_b')


def pack(params: Params, keys: Tuple[str, ...]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in keys])


def unpack(theta: np.ndarray, template: Params, keys: Tuple[str, ...]) -> Params:
    out, offset = {}, 0
    for k in keys:
        size = template[k].size
        out[k] = theta[offset:offset + size].reshape(template[k].shape)
        offset += size
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Multistep network
# ---------------------------------------------------------------------------

def init_multistep(n_inputs: int, n_hidden: int, rng: np.random.Generator) -> Params:
    return {
        'w1': rng.normal(0.0, 0.5 / np.sqrt(n_inputs), size=(n_hidden, n_inputs)),
        'b1': np.zeros(n_hidden),
        'w2': rng.normal(0.0, 0.5 / np.sqrt(n_hidden), size=(1, n_hidden)),
        'b2': np.zeros(1),
    }


def multistep_forward(params: Params, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-step prediction for a batch of normalised windows ``x`` (B, H_h).

    The hidden layer learns a correction on top of the last input sample, so a
    zero network predicts persistence.
    """
    hidden = np.tanh(x @ params['w1'].T + params['b1'])
    out = (hidden @ params['w2'].T)[:, 0] + params['b2'][0] + x[:, -1]
    return out, hidden


def multistep_loss_grad(params: Params, x: np.ndarray, y: np.ndarray, l2: float = 0.0) -> Tuple[float, Params]:
    """Half mean squared error plus L2 on the weight matrices, with its gradient"""
    out, hidden = multistep_forward(params, x)
    n = len(y)
    err = out - y
    loss = 0.5 * float(np.mean(err ** 2))
    loss += 0.5 * l2 * float(np.sum(params['w1'] ** 2) + np.sum(params['w2'] ** 2))

    d_out = err / n
    d_hidden = np.outer(d_out, params['w2'][0]) * (1.0 - hidden ** 2)
    grads = {
        'w1': d_hidden.T @ x + l2 * params['w1'],
        'b1': d_hidden.sum(axis=0),
        'w2': (d_out @ hidden)[None, :] + l2 * params['w2'],
        'b2': np.array([d_out.sum()]),
    }
    return loss, grads


def multistep_rollout(params: Params, x: np.ndarray, steps: int) -> np.ndarray:
    """Recursive forecast: each output is appended to the window for the next step"""
    window = np.array(x, dtype=float, ndmin=2)
    outputs = []
    for _ in range(steps):
        nxt, _ = multistep_forward(params, window)
        outputs.append(nxt)
        window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
    return np.stack(outputs, axis=1)


# ---------------------------------------------------------------------------
# Conv-recurrent network
# ---------------------------------------------------------------------------

def fuse_inputs(history: np.ndarray, planned: np.ndarray) -> np.ndarray:
    """(B, H_h) and (B, H_p) normalised speeds -> (B, H_h + H_p, 2) with a source flag"""
    history = np.array(history, dtype=float, ndmin=2)
    planned = np.array(planned, dtype=float, ndmin=2)
    speeds = np.concatenate([history, planned], axis=1)
    flags = np.concatenate([np.zeros_like(history), np.ones_like(planned)], axis=1)
    return np.stack([speeds, flags], axis=-1)


def init_cnn_lstm(
    n_filters: int,
    kernel: int,
    n_hidden: int,
    n_outputs: int,
    rng: np.random.Generator,
    n_channels: int = 2,
) -> Params:
    params = {
        'conv_w': rng.normal(0.0, 1.0 / np.sqrt(n_channels * kernel), size=(n_filters, n_channels, kernel)),
        'conv_b': np.zeros(n_filters),
        'lstm_w': rng.normal(0.0, 1.0 / np.sqrt(n_filters), size=(4 * n_hidden, n_filters)),
        'lstm_u': rng.normal(0.0, 1.0 / np.sqrt(n_hidden), size=(4 * n_hidden, n_hidden)),
        'lstm_b': np.zeros(4 * n_hidden),
        'dense_w': rng.normal(0.0, 0.1 / np.sqrt(n_hidden), size=(n_outputs, n_hidden)),
        'dense_b': np.zeros(n_outputs),
    }
    # Forget gate starts open
    params['lstm_b'][n_hidden:2 * n_hidden] = 1.0
    return params


def _patches(x: np.ndarray, kernel: int) -> np.ndarray:
    steps = x.shape[1] - kernel + 1
    return np.stack([x[:, k:k + steps, :] for k in range(kernel)], axis=2)


def cnn_lstm_forward(params: Params, x: np.ndarray, last_index: int) -> Tuple[np.ndarray, dict]:
    """
    Forward pass over fused inputs ``x`` (B, L, 2).

    ``last_index`` is the position of the most recent observed speed; the
    head's output is added to it. Returns predictions (B, p) and a cache.
    """
    kernel = params['conv_w'].shape[2]
    n_hidden = params['lstm_u'].shape[1]
    patches = _patches(x, kernel)
    z = np.einsum('btkc,fck->btf', patches, params['conv_w']) + params['conv_b']
    r = np.maximum(z, 0.0)

    batch, steps = r.shape[0], r.shape[1]
    h = np.zeros((batch, n_hidden))
    c = np.zeros((batch, n_hidden))
    gates: List[Tuple[np.ndarray, ...]] = []
    hs, cs = [h], [c]
    for t in range(steps):
        a = r[:, t, :] @ params['lstm_w'].T + h @ params['lstm_u'].T + params['lstm_b']
        i = _sigmoid(a[:, :n_hidden])
        f = _sigmoid(a[:, n_hidden:2 * n_hidden])
        o = _sigmoid(a[:, 2 * n_hidden:3 * n_hidden])
        g = np.tanh(a[:, 3 * n_hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates.append((i, f, o, g))
        hs.append(h)
        cs.append(c)

    out = h @ params['dense_w'].T + params['dense_b'] + x[:, last_index, 0][:, None]
    cache = {'patches': patches, 'z': z, 'r': r, 'gates': gates, 'hs': hs, 'cs': cs}
    return out, cache


def cnn_lstm_loss_grad(params: Params, x: np.ndarray, y: np.ndarray, last_index: int) -> Tuple[float, Params]:
    """Half mean squared error over all outputs, and backpropagation through time"""
    out, cache = cnn_lstm_forward(params, x, last_index)
    err = out - y
    loss = 0.5 * float(np.mean(err ** 2))
    d_out = err / err.size

    hs, cs, gates, r = cache['hs'], cache['cs'], cache['gates'], cache['r']
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads['dense_w'] = d_out.T @ hs[-1]
    grads['dense_b'] = d_out.sum(axis=0)

    dh = d_out @ params['dense_w']
    dc = np.zeros_like(dh)
    dr = np.zeros_like(r)
    for t in range(len(gates) - 1, -1, -1):
        i, f, o, g = gates[t]
        c, c_prev, h_prev = cs[t + 1], cs[t], hs[t]
        tanh_c = np.tanh(c)
        d_o = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c ** 2)
        da = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            d_o * o * (1.0 - o),
            dc * i * (1.0 - g ** 2),
        ], axis=1)
        grads['lstm_w'] += da.T @ r[:, t, :]
        grads['lstm_u'] += da.T @ h_prev
        grads['lstm_b'] += da.sum(axis=0)
        dr[:, t, :] = da @ params['lstm_w']
        dh = da @ params['lstm_u']
        dc = dc * f

    dz = dr * (cache['z'] > 0.0)
    grads['conv_w'] = np.einsum('btf,btkc->fck', dz, cache['patches'])
    grads['conv_b'] = dz.sum(axis=(0, 1))
    return loss, grads


def clip_gradients(grads: Params, max_norm: float) -> Params:
    """Scale all gradients together so their global norm is at most ``max_norm``"""
    norm = float(np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}
