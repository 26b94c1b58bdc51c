"""Differentiable layers with hand-written backward passes.

Every layer works on batches laid out as (batch, time, channels). Each
``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes ``(doutput, cache)`` and returns ``(dinput, param_grads)``.

Sequence lengths are optional. When ``lengths`` is given, layers that look
across time (BLSTM backward direction, attention, global pools, last state)
ignore frames at or beyond each item's length, which makes their output on
the real frames independent of how much zero padding follows.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# -- helpers ----------------------------------------------------------------


def conv_output_length(length, width: int, stride: int):
    """floor((T - width) / stride) + 1 elementwise; 0 where T < width."""
    length = np.asarray(length)
    out = np.where(length >= width, (length - width) // stride + 1, 0)
    return int(out) if out.ndim == 0 else out


def pool_output_length(length, pool: int):
    out = np.asarray(length) // pool
    return int(out) if out.ndim == 0 else out


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def time_mask(lengths, steps: int) -> np.ndarray:
    """Boolean (batch, steps) mask, True on real frames."""
    return np.arange(steps)[None, :] < np.asarray(lengths)[:, None]


# -- conv1d -----------------------------------------------------------------


def conv1d_forward(x, kernel, bias, stride=1, activation="relu", name="conv1d"):
    """Valid cross-correlation along time. kernel: (width, C_in, C_out)."""
    width, c_in, c_out = kernel.shape
    batch, steps, channels = x.shape
    if channels != c_in:
        raise ShapeError(f"{name}: input has {channels} channels, kernel expects {c_in}")
    if steps < width:
        raise ShapeError(f"{name}: input length {steps} is shorter than kernel width {width}")
    t_out = (steps - width) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, width, axis=1)[:, ::stride][:, :t_out]
    # windows: (B, T_out, C_in, width) -> cols ordered (width, C_in) to match kernel layout
    cols = windows.transpose(0, 1, 3, 2).reshape(batch * t_out, width * c_in)
    pre = cols @ kernel.reshape(width * c_in, c_out) + bias
    pre = pre.reshape(batch, t_out, c_out)
    out = np.maximum(pre, 0) if activation == "relu" else pre
    cache = (x.shape, cols, kernel, stride, activation, out)
    return out, cache


def conv1d_backward(dout, cache):
    x_shape, cols, kernel, stride, activation, out = cache
    width, c_in, c_out = kernel.shape
    batch, steps, _ = x_shape
    t_out = out.shape[1]
    if activation == "relu":
        dout = dout * (out > 0)
    dflat = dout.reshape(batch * t_out, c_out)
    dkernel = (cols.T @ dflat).reshape(width, c_in, c_out)
    dbias = dflat.sum(axis=0)
    dcols = (dflat @ kernel.reshape(width * c_in, c_out).T).reshape(batch, t_out, width, c_in)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(width):
        dx[:, j : j + span : stride] += dcols[:, :, j]
    return dx, {"kernel": dkernel, "bias": dbias}


# -- pooling ----------------------------------------------------------------


def maxpool1d_forward(x, pool: int, name="maxpool1d"):
    batch, steps, channels = x.shape
    if steps < pool:
        raise ShapeError(f"{name}: input length {steps} is shorter than pool size {pool}")
    t_out = steps // pool
    blocks = x[:, : t_out * pool].reshape(batch, t_out, pool, channels)
    arg = np.argmax(blocks, axis=2)  # first index wins ties
    out = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, (x.shape, pool, arg)


def maxpool1d_backward(dout, cache):
    x_shape, pool, arg = cache
    batch, t_out, channels = dout.shape
    dblocks = np.zeros((batch, t_out, pool, channels), dtype=dout.dtype)
    np.put_along_axis(dblocks, arg[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, : t_out * pool] = dblocks.reshape(batch, t_out * pool, channels)
    return dx, {}


def global_maxpool_forward(x, lengths=None):
    batch, steps, _ = x.shape
    if lengths is not None:
        x = np.where(time_mask(lengths, steps)[:, :, None], x, -np.inf)
    arg = np.argmax(x, axis=1)
    out = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    return out, (x.shape, arg)


def global_maxpool_backward(dout, cache):
    x_shape, arg = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    np.put_along_axis(dx, arg[:, None, :], dout[:, None, :], axis=1)
    return dx, {}


def global_avgpool_forward(x, lengths=None):
    batch, steps, _ = x.shape
    if lengths is None:
        weights = np.full((batch, steps), 1.0 / steps, dtype=x.dtype)
    else:
        mask = time_mask(lengths, steps)
        weights = (mask / np.asarray(lengths)[:, None]).astype(x.dtype)
    out = np.einsum("bt,btc->bc", weights, x)
    return out, (weights,)


def global_avgpool_backward(dout, cache):
    (weights,) = cache
    return weights[:, :, None] * dout[:, None, :], {}


def last_state_forward(x, lengths=None):
    batch, steps, _ = x.shape
    idx = np.full(batch, steps - 1) if lengths is None else np.asarray(lengths) - 1
    return x[np.arange(batch), idx], (x.shape, idx)


def last_state_backward(dout, cache):
    x_shape, idx = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[np.arange(x_shape[0]), idx] = dout
    return dx, {}


# -- attention pooling ------------------------------------------------------


def attention_forward(x, w, lengths=None):
    """Attention pooling: score f_t = tanh(w . x_t), alpha = softmax_t(f), C = sum_t alpha_t x_t.

    Returns ``((context, alpha), cache)``; context is (B, D), alpha is (B, T).
    """
    batch, steps, dim = x.shape
    if w.shape != (dim,):
        raise ShapeError(f"attention: weight vector has shape {w.shape}, input feature size is {dim}")
    score = np.tanh(x @ w)
    logits = score
    if lengths is not None:
        logits = np.where(time_mask(lengths, steps), score, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    alpha = e / e.sum(axis=1, keepdims=True)
    context = np.einsum("bt,btd->bd", alpha, x)
    return (context, alpha), (x, w, score, alpha)


def attention_backward(dcontext, cache):
    x, w, score, alpha = cache
    dalpha = np.einsum("bd,btd->bt", dcontext, x)
    dlogit = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dpre = dlogit * (1.0 - score**2)
    dx = alpha[:, :, None] * dcontext[:, None, :] + dpre[:, :, None] * w
    dw = np.einsum("bt,btd->d", dpre, x)
    return dx, {"w": dw}


# -- dense ------------------------------------------------------------------


def dense_forward(x, W, b, activation=None, name="dense"):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"{name}: input {x.shape} does not fit weights {W.shape} / bias {b.shape}")
    out = x @ W + b
    if activation == "tanh":
        out = np.tanh(out)
    return out, (x, W, activation, out)


def dense_backward(dout, cache):
    x, W, activation, out = cache
    if activation == "tanh":
        dout = dout * (1.0 - out**2)
    return dout @ W.T, {"W": x.T @ dout, "b": dout.sum(axis=0)}


# -- dropout ----------------------------------------------------------------


def dropout_forward(x, rate: float, mode: str, rng=None):
    """Inverted dropout; identity in ``infer`` mode or when rate is 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode != "train" or rate == 0:
        return x, None
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    keep = rng.random(x.shape, dtype=draw_dtype) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep * scale
    return x * mask, mask


def dropout_backward(dout, cache):
    mask = cache
    return (dout if mask is None else dout * mask), {}


# -- bidirectional LSTM -----------------------------------------------------
# Parameter layout per direction: W (F, 4h), U (h, 4h), b (4h), gates ordered [i, f, g, o].


def lstm_forward(x, W, U, b):
    """Unidirectional LSTM from zero state. x: (B, T, F) -> h: (B, T, h)."""
    batch, steps, _ = x.shape
    hidden = U.shape[0]
    xw = x @ W + b
    gates = np.empty((batch, steps, 4 * hidden), dtype=x.dtype)
    cells = np.empty((batch, steps, hidden), dtype=x.dtype)
    tanh_cells = np.empty_like(cells)
    hs = np.empty_like(cells)
    h = np.zeros((batch, hidden), dtype=x.dtype)
    c = np.zeros((batch, hidden), dtype=x.dtype)
    for t in range(steps):
        z = xw[:, t] + h @ U
        act = sigmoid(z)
        act[:, 2 * hidden : 3 * hidden] = np.tanh(z[:, 2 * hidden : 3 * hidden])
        i, f, g, o = act[:, :hidden], act[:, hidden : 2 * hidden], act[:, 2 * hidden : 3 * hidden], act[:, 3 * hidden :]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, t], cells[:, t], tanh_cells[:, t], hs[:, t] = act, c, tc, h
    return hs, (x, W, U, gates, cells, tanh_cells, hs)


def lstm_backward(dh_seq, cache):
    x, W, U, gates, cells, tanh_cells, hs = cache
    batch, steps, _ = x.shape
    hidden = U.shape[0]
    dz = np.empty_like(gates)
    dh_next = np.zeros((batch, hidden), dtype=x.dtype)
    dc_next = np.zeros((batch, hidden), dtype=x.dtype)
    UT = U.T
    for t in range(steps - 1, -1, -1):
        act = gates[:, t]
        i, f, g, o = act[:, :hidden], act[:, hidden : 2 * hidden], act[:, 2 * hidden : 3 * hidden], act[:, 3 * hidden :]
        tc = tanh_cells[:, t]
        dh = dh_seq[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = cells[:, t - 1] if t > 0 else np.zeros_like(dc)
        dzt = dz[:, t]
        dzt[:, :hidden] = dc * g * i * (1.0 - i)
        dzt[:, hidden : 2 * hidden] = dc * c_prev * f * (1.0 - f)
        dzt[:, 2 * hidden : 3 * hidden] = dc * i * (1.0 - g * g)
        dzt[:, 3 * hidden :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dzt @ UT
    flat_dz = dz.reshape(batch * steps, -1)
    dW = x.reshape(batch * steps, -1).T @ flat_dz
    h_prev = np.concatenate([np.zeros((batch, 1, hidden), dtype=x.dtype), hs[:, :-1]], axis=1)
    dU = h_prev.reshape(batch * steps, hidden).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = dz @ W.T
    return dx, {"W": dW, "U": dU, "b": db}


def reverse_index(lengths, batch: int, steps: int) -> np.ndarray:
    """Per-item time permutation reversing the first ``length`` frames.

    Frames beyond the length stay in place. The permutation is its own inverse.
    """
    t = np.arange(steps)[None, :]
    if lengths is None:
        return np.broadcast_to(steps - 1 - t, (batch, steps))
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


def _permute_time(x, idx):
    return np.take_along_axis(x, idx[:, :, None], axis=1)


def blstm_forward(x, params, lengths=None):
    """params: dict with fw_W, fw_U, fw_b, bw_W, bw_U, bw_b. Output (B, T, 2h) = [forward_t ; backward_t]."""
    batch, steps, _ = x.shape
    h_fw, cache_fw = lstm_forward(x, params["fw_W"], params["fw_U"], params["fw_b"])
    idx = reverse_index(lengths, batch, steps)
    h_bw_rev, cache_bw = lstm_forward(_permute_time(x, idx), params["bw_W"], params["bw_U"], params["bw_b"])
    out = np.concatenate([h_fw, _permute_time(h_bw_rev, idx)], axis=2)
    return out, (cache_fw, cache_bw, idx, h_fw.shape[2])


def blstm_backward(dout, cache):
    cache_fw, cache_bw, idx, hidden = cache
    dx_fw, g_fw = lstm_backward(np.ascontiguousarray(dout[:, :, :hidden]), cache_fw)
    dx_bw_rev, g_bw = lstm_backward(_permute_time(dout[:, :, hidden:], idx), cache_bw)
    dx = dx_fw + _permute_time(dx_bw_rev, idx)
    grads = {f"fw_{k}": v for k, v in g_fw.items()}
    grads.update({f"bw_{k}": v for k, v in g_bw.items()})
    return dx, grads
