"""Hand-written neural kernels with explicit reverse-mode tapes, plus ADAM.

Every kernel accepts a leading batch axis: ``x`` of shape ``(B, d)``. A
single vector can be passed as ``(1, d)``. Forward functions return their
output together with a tape (a plain dict of cached intermediates); the
matching ``*_backward`` function consumes that tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CE_FLOOR = 1e-30

ADAM_LR = 0.0006
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# ---------------------------------------------------------------- LSTM

@dataclass
class LstmParams:
    """Gate weights act on the concatenation ``[h, x]`` (hidden part first)."""

    W_f: np.ndarray
    b_f: np.ndarray
    W_i: np.ndarray
    b_i: np.ndarray
    W_C: np.ndarray
    b_C: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray

    @property
    def d_h(self) -> int:
        return self.W_f.shape[0]

    @property
    def d_x(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]


LSTM_FIELDS = ("W_f", "b_f", "W_i", "b_i", "W_C", "b_C", "W_o", "b_o")


def lstm_step(p: LstmParams, C: np.ndarray, h: np.ndarray, x: np.ndarray):
    """One LSTM update; returns ``(C_new, h_new, tape)``."""
    if x.shape[-1] != p.d_x or h.shape[-1] != p.d_h or C.shape[-1] != p.d_h:
        raise ValueError(
            f"lstm_step dims: expected h/C {p.d_h}, x {p.d_x}; got h {h.shape}, C {C.shape}, x {x.shape}"
        )
    d = p.d_h
    hx = np.concatenate([h, x], axis=-1)
    W = np.concatenate([p.W_f, p.W_i, p.W_C, p.W_o], axis=0)
    b = np.concatenate([p.b_f, p.b_i, p.b_C, p.b_o])
    z = hx @ W.T + b
    f = sigmoid(z[:, :d])
    i = sigmoid(z[:, d:2 * d])
    g = np.tanh(z[:, 2 * d:3 * d])
    o = sigmoid(z[:, 3 * d:])
    C_new = f * C + i * g
    tC = np.tanh(C_new)
    h_new = o * tC
    tape = {"hx": hx, "W": W, "f": f, "i": i, "g": g, "o": o, "C_prev": C, "tC": tC}
    return C_new, h_new, tape


def lstm_step_backward(tape: dict, dC: np.ndarray, dh: np.ndarray):
    """Returns ``(grads, dC_prev, dh_prev, dx)``; ``grads`` keyed like ``LSTM_FIELDS``."""
    f, i, g, o, tC = tape["f"], tape["i"], tape["g"], tape["o"], tape["tC"]
    d = f.shape[-1]
    do = dh * tC
    dCt = dC + dh * o * (1.0 - tC * tC)
    dz = np.concatenate([
        dCt * tape["C_prev"] * f * (1.0 - f),
        dCt * g * i * (1.0 - i),
        dCt * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=-1)
    dW = dz.T @ tape["hx"]
    db = dz.sum(axis=0)
    dhx = dz @ tape["W"]
    grads = {
        "W_f": dW[:d], "b_f": db[:d],
        "W_i": dW[d:2 * d], "b_i": db[d:2 * d],
        "W_C": dW[2 * d:3 * d], "b_C": db[2 * d:3 * d],
        "W_o": dW[3 * d:], "b_o": db[3 * d:],
    }
    return grads, dCt * f, dhx[:, :d], dhx[:, d:]


# ---------------------------------------------------------------- dense

ACTIVATIONS = ("relu", "linear", "tanh", "sigmoid")


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def dnn_forward(layers: list[DenseLayer], x: np.ndarray):
    """Chained affine maps and activations; returns ``(output, tape)``."""
    tape = []
    a = x
    for layer in layers:
        if a.shape[-1] != layer.W.shape[1]:
            raise ValueError(f"dense layer expects input {layer.W.shape[1]}, got {a.shape[-1]}")
        z = a @ layer.W.T + layer.b
        out = _activate(layer.activation, z)
        tape.append((a, z, out))
        a = out
    return a, tape


def dnn_backward(layers: list[DenseLayer], tape: list, dout: np.ndarray):
    """Returns ``(grads, dx)`` with ``grads[i] = (dW_i, db_i)``."""
    grads = [None] * len(layers)
    g = dout
    for li in reversed(range(len(layers))):
        a_in, z, out = tape[li]
        dz = g * _activation_grad(layers[li].activation, z, out)
        grads[li] = (dz.T @ a_in, dz.sum(axis=0))
        g = dz @ layers[li].W
    return grads, g


# ---------------------------------------------------------------- softmax / CE

def softmax_head(W: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Row-wise softmax of ``h @ W.T``; ``W`` is ``(M, d_h)``, rows are the class weights."""
    z = h @ W.T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(p_true: np.ndarray, p_hat: np.ndarray) -> np.ndarray:
    """``-log p_hat`` at the one-hot index (probabilities floored at 1e-30)."""
    p_true = np.asarray(p_true)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    return -np.sum(p_true * np.log(np.maximum(p_hat, CE_FLOOR)), axis=-1)


def one_hot(idx: np.ndarray, M: int) -> np.ndarray:
    return np.eye(M)[np.asarray(idx)]


def softmax_ce_backward(W: np.ndarray, h: np.ndarray, p_hat: np.ndarray,
                        p_true: np.ndarray, scale: float = 1.0):
    """Gradient of ``scale * sum_b CE(p_true_b, softmax(W h_b))``.

    Returns ``(dW, dh)``; the logit gradient is ``scale * (p_hat - p_true)``.
    """
    dlogits = scale * (p_hat - p_true)
    return dlogits.T @ h, dlogits @ W


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), **hyper)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """In-place ADAM update of a flat parameter vector; returns ``params``."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise FloatingPointError(f"non-finite gradient at {bad.size} coordinates (first: {bad[0]})")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
