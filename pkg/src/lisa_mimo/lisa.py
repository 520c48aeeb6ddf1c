"""LISA: learned sequential symbol construction over the QL tree.

Each detection step ``k`` owns its own cell (an LSTM for varying channels,
a small dense net for a fixed channel) and its own softmax head. The
whole construction is one *block*; ``n_blocks`` blocks are chained, each
starting from the previous block's final state and all sharing the same
per-step parameters. Only the last block's probabilities are scored.

All parameters live in one flat float64 vector (``LisaModel.theta``); the
per-step objects handed to the kernels are reshaped views into it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, ChannelSample, make_rng, sample_batch
from .linalg import ql_decompose_batch, residual_metric_batch
from .modem import Constellation, make_constellation
from .neural import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    ADAM_LR,
    LSTM_FIELDS,
    AdamState,
    DenseLayer,
    LstmParams,
    adam_step,
    dnn_backward,
    dnn_forward,
    glorot,
    log_softmax,
    lstm_step,
    lstm_step_backward,
    softmax_ce_backward,
)

log = logging.getLogger(__name__)

VARIANTS = ("varying", "fixed")


def lisa_parameter_count(n_t: int, d_h: int, M: int) -> int:
    """Closed-form size of the varying-channel model."""
    return 4 * n_t * d_h * (2 * n_t + 2 * d_h + 5) + 2 * n_t * d_h * M


def parameter_layout(variant: str, n_t: int, d_h: int, M: int,
                     dnn_hidden: tuple[int, ...] = ()) -> list[list[tuple[str, tuple[int, ...]]]]:
    """Per-step ``(name, shape)`` lists in flat storage order."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    steps = []
    for k in range(2 * n_t):
        entries = []
        if variant == "varying":
            d_x = k + 2  # y_tilde_k plus the k+1 entries l_{k,1..k}
            for name in LSTM_FIELDS:
                entries.append((name, (d_h, d_h + d_x) if name.startswith("W") else (d_h,)))
        else:
            widths = [d_h + 1, *dnn_hidden, d_h]
            for li in range(len(widths) - 1):
                entries.append((f"W{li}", (widths[li + 1], widths[li])))
                entries.append((f"b{li}", (widths[li + 1],)))
        entries.append(("softmax", (M, d_h)))
        steps.append(entries)
    return steps


@dataclass
class StepParams:
    cell: LstmParams | list[DenseLayer]
    softmax: np.ndarray


@dataclass
class LisaModel:
    variant: str
    n_t: int
    d_h: int
    n_blocks: int
    constellation: str
    theta: np.ndarray
    dnn_hidden: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_blocks < 1 or self.d_h < 1 or self.n_t < 1:
            raise ValueError("n_blocks, d_h and n_t must be >= 1")
        self.dnn_hidden = tuple(int(w) for w in self.dnn_hidden)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"parameter vector has {self.theta.size} entries, layout needs {self.n_params}")
        self._steps = self.unpack(self.theta)

    @property
    def const(self) -> Constellation:
        return make_constellation(self.constellation)

    @property
    def M(self) -> int:
        return self.const.M

    @property
    def n_steps(self) -> int:
        return 2 * self.n_t

    @property
    def layout(self):
        return parameter_layout(self.variant, self.n_t, self.d_h, self.M, self.dnn_hidden)

    @property
    def n_params(self) -> int:
        return sum(math.prod(shape) for step in self.layout for _, shape in step)

    @property
    def steps(self) -> list[StepParams]:
        return self._steps

    def unpack(self, flat: np.ndarray) -> list[StepParams]:
        """Per-step parameter objects whose arrays are views into ``flat``."""
        out = []
        offset = 0
        for entries in self.layout:
            arrays = {}
            for name, shape in entries:
                size = math.prod(shape)
                arrays[name] = flat[offset:offset + size].reshape(shape)
                offset += size
            soft = arrays.pop("softmax")
            if self.variant == "varying":
                cell = LstmParams(**arrays)
            else:
                n_layers = len(arrays) // 2
                cell = [DenseLayer(arrays[f"W{i}"], arrays[f"b{i}"],
                                   "linear" if i == n_layers - 1 else "relu")
                        for i in range(n_layers)]
            out.append(StepParams(cell=cell, softmax=soft))
        return out

    def copy(self) -> "LisaModel":
        return LisaModel(self.variant, self.n_t, self.d_h, self.n_blocks, self.constellation,
                         self.theta.copy(), self.dnn_hidden, dict(self.meta))


def init_model(variant: str, n_t: int, d_h: int, n_blocks: int, constellation: str,
               rng: np.random.Generator | None = None, dnn_hidden: tuple[int, ...] | None = None,
               zero: bool = False) -> LisaModel:
    """Glorot-uniform weights, zero biases and forget-gate bias 1 (or all zeros)."""
    const = make_constellation(constellation)
    if dnn_hidden is None:
        dnn_hidden = (d_h,) if variant == "fixed" else ()
    layout = parameter_layout(variant, n_t, d_h, const.M, tuple(dnn_hidden))
    size = sum(math.prod(shape) for step in layout for _, shape in step)
    model = LisaModel(variant, n_t, d_h, n_blocks, const.name, np.zeros(size), tuple(dnn_hidden))
    if zero:
        return model
    if rng is None:
        raise ValueError("a random generator is required unless zero=True")
    for entries, step in zip(layout, model.unpack(model.theta)):
        views = _named_views(step)
        for name, shape in entries:
            if len(shape) == 2:
                views[name][...] = glorot(rng, *shape)
        if variant == "varying":
            step.cell.b_f[...] = 1.0
    return model


def _named_views(step: StepParams) -> dict[str, np.ndarray]:
    if isinstance(step.cell, LstmParams):
        views = {name: getattr(step.cell, name) for name in LSTM_FIELDS}
    else:
        views = {}
        for i, layer in enumerate(step.cell):
            views[f"W{i}"], views[f"b{i}"] = layer.W, layer.b
    views["softmax"] = step.softmax
    return views


# ---------------------------------------------------------------- forward

@dataclass
class BlockOutput:
    P_hat: np.ndarray | None
    C: np.ndarray | None
    h: np.ndarray


def _batched(y_tilde, L=None):
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    single = y_tilde.ndim == 1
    if single:
        y_tilde = y_tilde[None]
        if L is not None:
            L = np.asarray(L, dtype=np.float64)[None]
    elif L is not None:
        L = np.asarray(L, dtype=np.float64)
    return y_tilde, L, single


def _check_inputs(model: LisaModel, y_tilde: np.ndarray, L: np.ndarray | None):
    n = model.n_steps
    if y_tilde.shape[-1] != n:
        raise ValueError(f"y_tilde has length {y_tilde.shape[-1]}, model expects {n}")
    if L is not None and L.shape[-2:] != (n, n):
        raise ValueError(f"L has shape {L.shape[-2:]}, model expects {n}x{n}")


def _step_input(model: LisaModel, y_tilde: np.ndarray, L: np.ndarray | None, k: int) -> np.ndarray:
    if model.variant == "varying":
        return np.concatenate([y_tilde[:, k:k + 1], L[:, k, :k + 1]], axis=1)
    return y_tilde[:, k:k + 1]


def _run_block(model, y_tilde, L, C, h, heads: bool, tapes: list | None):
    rows = []
    for k, step in enumerate(model.steps):
        x = _step_input(model, y_tilde, L, k)
        if model.variant == "varying":
            C, h, tape = lstm_step(step.cell, C, h, x)
        else:
            h, tape = dnn_forward(step.cell, np.concatenate([h, x], axis=1))
        if tapes is not None:
            tapes.append(tape)
        if heads:
            rows.append(log_softmax(h @ step.softmax.T))
    logp = np.stack(rows, axis=1) if heads else None
    return logp, C, h


def _zero_state(model: LisaModel, B: int):
    C = np.zeros((B, model.d_h)) if model.variant == "varying" else None
    return C, np.zeros((B, model.d_h))


def construct_block_varying(model: LisaModel, y_tilde, L, init: tuple | None = None) -> BlockOutput:
    if model.variant != "varying":
        raise ValueError("construct_block_varying needs a varying-channel model")
    y_tilde, L, single = _batched(y_tilde, L)
    _check_inputs(model, y_tilde, L)
    C, h = _zero_state(model, y_tilde.shape[0]) if init is None else (np.atleast_2d(init[0]), np.atleast_2d(init[1]))
    logp, C, h = _run_block(model, y_tilde, L, C, h, True, None)
    P = np.exp(logp)
    return BlockOutput(P[0], C[0], h[0]) if single else BlockOutput(P, C, h)


def construct_block_fixed(model: LisaModel, y_tilde, init_h=None) -> BlockOutput:
    if model.variant != "fixed":
        raise ValueError("construct_block_fixed needs a fixed-channel model")
    y_tilde, _, single = _batched(y_tilde)
    _check_inputs(model, y_tilde, None)
    h = np.zeros((y_tilde.shape[0], model.d_h)) if init_h is None else np.atleast_2d(init_h)
    logp, _, h = _run_block(model, y_tilde, None, None, h, True, None)
    P = np.exp(logp)
    return BlockOutput(P[0], None, h[0]) if single else BlockOutput(P, None, h)


def lisa_log_probs(model: LisaModel, y_tilde: np.ndarray, L: np.ndarray | None,
                   tapes: list | None = None, all_blocks: bool = False):
    """Log-probabilities of the last block (or of every block), batched."""
    C, h = _zero_state(model, y_tilde.shape[0])
    per_block = []
    for blk in range(model.n_blocks):
        last = blk == model.n_blocks - 1
        logp, C, h = _run_block(model, y_tilde, L, C, h, last or all_blocks, tapes)
        per_block.append(logp)
    return per_block if all_blocks else per_block[-1]


def lisa_forward(model: LisaModel, y_tilde, L=None) -> np.ndarray:
    """Last-block probability matrix ``(2N_T, M)`` (or ``(B, 2N_T, M)``)."""
    y_tilde, L, single = _batched(y_tilde, L)
    if model.variant == "varying" and L is None:
        raise ValueError("the varying-channel model needs L")
    _check_inputs(model, y_tilde, L if model.variant == "varying" else None)
    P = np.exp(lisa_log_probs(model, y_tilde, L))
    return P[0] if single else P


# ---------------------------------------------------------------- loss / gradient

def batch_loss(model: LisaModel, y_tilde, L, s_idx) -> float:
    """Mean over samples of the summed per-symbol cross entropy."""
    y_tilde, L, single = _batched(y_tilde, L)
    s_idx = np.atleast_2d(np.asarray(s_idx))
    _check_inputs(model, y_tilde, L if model.variant == "varying" else None)
    logp = lisa_log_probs(model, y_tilde, L)
    picked = np.take_along_axis(logp, s_idx[:, :, None], axis=2)[:, :, 0]
    return float(-np.maximum(picked, np.log(1e-30)).sum() / y_tilde.shape[0])


def loss_and_grad(model: LisaModel, y_tilde, L, s_idx, grad_init_state: bool = False):
    """Loss and its exact gradient (flat, same layout as ``theta``) by BPTT.

    With ``grad_init_state`` the gradient with respect to the block-1 start
    state ``(dC_0, dh_0)`` is returned as a third item.
    """
    y_tilde, L, single = _batched(y_tilde, L)
    s_idx = np.atleast_2d(np.asarray(s_idx))
    _check_inputs(model, y_tilde, L if model.variant == "varying" else None)
    B = y_tilde.shape[0]
    n = model.n_steps
    tapes: list = []
    C, h = _zero_state(model, B)
    for blk in range(model.n_blocks):
        logp, C, h = _run_block(model, y_tilde, L, C, h, blk == model.n_blocks - 1, tapes)
    picked = np.take_along_axis(logp, s_idx[:, :, None], axis=2)[:, :, 0]
    loss = float(-np.maximum(picked, np.log(1e-30)).sum() / B)

    grad = np.zeros_like(model.theta)
    gsteps = model.unpack(grad)
    P = np.exp(logp)
    onehot = np.eye(model.M)[s_idx]
    dC = np.zeros((B, model.d_h)) if model.variant == "varying" else None
    dh = np.zeros((B, model.d_h))
    for blk in reversed(range(model.n_blocks)):
        last = blk == model.n_blocks - 1
        for k in reversed(range(n)):
            tape = tapes[blk * n + k]
            step, gstep = model.steps[k], gsteps[k]
            if last:
                h_k = _hidden_out(model, tape)
                dW, dh_head = softmax_ce_backward(step.softmax, h_k, P[:, k], onehot[:, k], 1.0 / B)
                gstep.softmax += dW
                dh = dh + dh_head
            if model.variant == "varying":
                g, dC, dh, _ = lstm_step_backward(tape, dC, dh)
                for name in LSTM_FIELDS:
                    getattr(gstep.cell, name)[...] += g[name]
            else:
                g, dinput = dnn_backward(step.cell, tape, dh)
                for layer, (dW, db) in zip(gstep.cell, g):
                    layer.W += dW
                    layer.b += db
                dh = dinput[:, :model.d_h]
    if grad_init_state:
        return loss, grad, (dC, dh)
    return loss, grad


def _hidden_out(model: LisaModel, tape) -> np.ndarray:
    if model.variant == "varying":
        return tape["o"] * tape["tC"]
    return tape[-1][2]


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    channel: ChannelConfig
    constellation: str = "QPSK"
    variant: str = "varying"
    d_h: int = 64
    n_blocks: int = 2
    epochs: int = 1
    batches_per_epoch: int = 100
    batch_size: int = 256
    seed: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    dnn_hidden: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("d_h", "n_blocks", "epochs", "batches_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "fixed" and self.channel.model != "fixed":
            raise ValueError("the fixed-channel variant trains on channel model 'fixed'")


@dataclass
class TrainResult:
    model: LisaModel
    losses: list[tuple[int, int, float]]  # (batch, epoch, loss)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: LisaModel, losses):
        super().__init__(message)
        self.last_good = last_good
        self.losses = losses


def train(cfg: TrainConfig, progress_every: int = 0) -> TrainResult:
    """ADAM on freshly generated mini-batches; reproducible from ``cfg.seed``."""
    const = make_constellation(cfg.constellation)
    model = init_model(cfg.variant, cfg.channel.n_t, cfg.d_h, cfg.n_blocks, const.name,
                       make_rng(cfg.seed, 0), cfg.dnn_hidden)
    adam = AdamState.zeros_like(model.theta, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    losses: list[tuple[int, int, float]] = []
    t = 0
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        for _ in range(cfg.batches_per_epoch):
            t += 1
            batch = sample_batch(cfg.channel, const, make_rng(cfg.seed, 1, t), cfg.batch_size)
            loss, grad = loss_and_grad(model, batch.y_tilde, batch.L, batch.s_idx)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at batch {t}", model.copy(), losses)
            adam_step(adam, model.theta, grad)
            losses.append((t, epoch + 1, loss))
            if progress_every and t % progress_every == 0:
                recent = np.mean([l for _, _, l in losses[-progress_every:]])
                log.info("batch %d epoch %d loss %.4f (%.0fs)", t, epoch + 1, recent,
                         time.perf_counter() - started)
    model.meta.update({"seed": cfg.seed, "batches": t, "epochs": cfg.epochs,
                       "samples": t * cfg.batch_size})
    return TrainResult(model=model, losses=losses)


# ---------------------------------------------------------------- detection

def _argmax_indices(model: LisaModel, y_tilde, L) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest alphabet index
    return np.argmax(lisa_log_probs(model, y_tilde, L), axis=-1)


def detect_indices(model: LisaModel, H_hat: np.ndarray, y: np.ndarray,
                   Q: np.ndarray | None = None, L: np.ndarray | None = None) -> np.ndarray:
    """Batched hard decisions ``(B, 2N_T)`` as alphabet indices.

    The varying variant also decodes the column-reversed channel and keeps
    whichever order leaves the smaller residual against ``H_hat``.
    """
    H_hat = np.asarray(H_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Q is None or L is None:
        Q, L, _ = ql_decompose_batch(H_hat)
    y_tilde = np.einsum("bji,bj->bi", Q, y)
    fwd = _argmax_indices(model, y_tilde, L)
    if model.variant == "fixed":
        return fwd
    alphabet = model.const.alphabet
    Qr, Lr, _ = ql_decompose_batch(H_hat[:, :, ::-1])
    rev = _argmax_indices(model, np.einsum("bji,bj->bi", Qr, y), Lr)[:, ::-1]
    r_fwd = residual_metric_batch(y, H_hat, alphabet[fwd])
    r_rev = residual_metric_batch(y, H_hat, alphabet[rev])
    return np.where((r_rev < r_fwd)[:, None], rev, fwd)


def detect(model: LisaModel, sample: ChannelSample) -> np.ndarray:
    idx = detect_indices(model, sample.H_hat[None], sample.y[None], sample.Q[None], sample.L[None])
    return model.const.alphabet[idx[0]]
