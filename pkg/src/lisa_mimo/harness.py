"""Experiment configuration, BER sweeps and CSV output."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, make_rng, sample_batch, sample_iid_channel
from .classic import (
    DEFAULT_MLD_BUDGET,
    ComplexityBudgetError,
    mld_indices,
    mmse_estimate,
    sphere_indices,
    zf_estimate,
    zfdf_indices,
)
from .lisa import LisaModel, TrainConfig, detect_indices
from .modem import Constellation, bit_errors, make_constellation, nearest_index

log = logging.getLogger(__name__)

DETECTORS = ("zf", "mmse", "zfdf", "sd", "mld", "lisa")
CSV_HEADER = ["detector", "snr_db", "bits", "bit_errors", "ber", "seed", "censored"]
LOSS_HEADER = ["batch", "epoch", "loss"]
HARD_BIT_CAP = 10 ** 7
CHUNK = 1000

# rng stream tags under the master seed
_STREAM_FIXED_CHANNEL = 2
_STREAM_SWEEP = 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    n_t: int = 4
    n_r: int = 4
    channel_model: str = "iid"
    alpha: float = 0.0
    csi_error_var: float = 0.0
    constellation: str = "QPSK"
    detectors: list[str] = field(default_factory=lambda: ["zf", "mmse", "mld"])
    snr_grid_db: list[float] = field(default_factory=lambda: [2.0, 4.0, 6.0, 8.0])
    snr_range_db: tuple[float, float] = (2.0, 8.0)
    min_bits: int = 10 ** 5
    min_errors: int = 100
    max_bits: int = HARD_BIT_CAP
    mld_budget: int = DEFAULT_MLD_BUDGET
    seed: int = 0
    variant: str = "varying"
    d_h: int = 64
    n_blocks: int = 2
    dnn_hidden: list[int] | None = None
    epochs: int = 1
    batches_per_epoch: int = 100
    batch_size: int = 256
    lr: float = 0.0006
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        unknown = [d for d in self.detectors if d not in DETECTORS]
        if unknown:
            raise ConfigError(f"unknown detector(s) {', '.join(unknown)}; expected a subset of {DETECTORS}")
        if not self.detectors:
            raise ConfigError("detector list is empty")
        if not self.snr_grid_db:
            raise ConfigError("snr grid is empty")
        if self.min_bits < 10 ** 4:
            raise ConfigError(f"min_bits must be >= 10000, got {self.min_bits}")
        if self.max_bits < self.min_bits:
            raise ConfigError("max_bits must be >= min_bits")
        make_constellation(self.constellation)
        self.snr_range_db = tuple(float(v) for v in self.snr_range_db)
        self.channel_config()  # validates the channel fields

    def fixed_channel(self) -> np.ndarray | None:
        if self.channel_model != "fixed":
            return None
        probe = ChannelConfig(self.n_t, self.n_r)
        return sample_iid_channel(probe, make_rng(self.seed, _STREAM_FIXED_CHANNEL))

    def channel_config(self) -> ChannelConfig:
        try:
            return ChannelConfig(self.n_t, self.n_r, self.channel_model, self.alpha,
                                 self.csi_error_var, self.snr_range_db, self.fixed_channel())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            channel=self.channel_config(), constellation=self.constellation, variant=self.variant,
            d_h=self.d_h, n_blocks=self.n_blocks, epochs=self.epochs,
            batches_per_epoch=self.batches_per_epoch, batch_size=self.batch_size, seed=self.seed,
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            dnn_hidden=None if self.dnn_hidden is None else tuple(self.dnn_hidden),
        )


_TOP_KEYS = {"n_t", "n_r", "channel", "constellation", "snr_grid_db", "snr_range_db", "detectors",
             "d_h", "n_blocks", "epochs", "batches_per_epoch", "batch_size", "min_bits",
             "min_errors", "seed", "variant", "dnn_hidden", "max_bits", "mld_budget", "adam"}
_CHANNEL_KEYS = {"model", "alpha", "csi_error_var"}
_ADAM_KEYS = {"lr", "beta1", "beta2", "eps"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kw = {k: v for k, v in raw.items() if k not in ("channel", "adam")}
    channel = raw.get("channel", {})
    bad = sorted(set(channel) - _CHANNEL_KEYS)
    if bad:
        raise ConfigError(f"unknown channel key(s): {', '.join(bad)}")
    if "model" in channel:
        kw["channel_model"] = channel["model"]
    for key in ("alpha", "csi_error_var"):
        if key in channel:
            kw[key] = channel[key]
    adam = raw.get("adam", {})
    bad = sorted(set(adam) - _ADAM_KEYS)
    if bad:
        raise ConfigError(f"unknown adam key(s): {', '.join(bad)}")
    kw.update(adam)
    try:
        return ExperimentConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------- sweeps

@dataclass
class BerPoint:
    snr_db: float
    bits: int
    bit_errors: int
    censored: bool = False

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits


@dataclass
class BerCurve:
    detector: str
    points: list[BerPoint] = field(default_factory=list)
    seed: int = 0


def _detector_indices(name: str, batch, c: Constellation, model: LisaModel | None,
                      mld_budget: int) -> np.ndarray:
    if name == "zf":
        return nearest_index(c, zf_estimate(batch.H_hat, batch.y))
    if name == "mmse":
        return nearest_index(c, mmse_estimate(batch.H_hat, batch.y, batch.noise_var, c.symbol_variance))
    if name == "zfdf":
        return zfdf_indices(batch.L, batch.y_tilde, c)
    if name == "sd":
        return sphere_indices(batch.L, batch.y_tilde, c)
    if name == "mld":
        return mld_indices(batch.H_hat, batch.y, c, mld_budget)
    if name == "lisa":
        return detect_indices(model, batch.H_hat, batch.y, batch.Q, batch.L)
    raise ConfigError(f"unknown detector {name!r}")


def _sweep_point(cfg: ExperimentConfig, ch: ChannelConfig, c: Constellation, i: int,
                 snr: float, model: LisaModel | None) -> dict[str, BerPoint]:
    rng = make_rng(cfg.seed, _STREAM_SWEEP, i)
    point_cfg = ch.with_snr(snr)
    state = {d: BerPoint(snr, 0, 0) for d in cfg.detectors}
    active = list(cfg.detectors)
    while active:
        batch = sample_batch(point_cfg, c, rng, CHUNK)
        for name in list(active):
            idx = _detector_indices(name, batch, c, model, cfg.mld_budget)
            pt = state[name]
            pt.bit_errors += int(bit_errors(c, batch.s_idx, idx).sum())
            pt.bits += idx.size * c.bits_per_real_symbol
            if pt.bits >= cfg.min_bits and pt.bit_errors >= cfg.min_errors:
                active.remove(name)
            elif pt.bits >= cfg.max_bits:
                pt.censored = True
                active.remove(name)
    log.info("snr %g dB: %s", snr, ", ".join(f"{d}={p.ber:.3e}" for d, p in state.items()))
    return state


def run_ber_sweep(cfg: ExperimentConfig, model: LisaModel | None = None,
                  threads: int = 1) -> list[BerCurve]:
    """BER of each detector at each SNR; all detectors see the same sample stream.

    A point stops once it has ``min_bits`` bits and ``min_errors`` errors, or
    when it reaches ``max_bits`` (then it is marked censored).
    """
    c = make_constellation(cfg.constellation)
    if "lisa" in cfg.detectors:
        if model is None:
            raise ConfigError("detector 'lisa' needs a checkpoint")
        if model.n_t != cfg.n_t or model.const.name != c.name:
            raise ConfigError(
                f"checkpoint is for n_t={model.n_t}/{model.const.name}, config has n_t={cfg.n_t}/{c.name}"
            )
    if "mld" in cfg.detectors and c.M ** (2 * cfg.n_t) > cfg.mld_budget:
        raise ComplexityBudgetError(
            f"MLD needs {c.M ** (2 * cfg.n_t)} candidates per instance, over the budget of {cfg.mld_budget}"
        )
    ch = cfg.channel_config()
    if model is not None and model.variant == "fixed" and "fixed_channel" in model.meta:
        ch = ChannelConfig(ch.n_t, ch.n_r, "fixed", ch.alpha, ch.csi_error_var, ch.snr_range_db,
                           decode_complex(model.meta["fixed_channel"]))
    jobs = list(enumerate(cfg.snr_grid_db))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: _sweep_point(cfg, ch, c, job[0], job[1], model), jobs))
    else:
        results = [_sweep_point(cfg, ch, c, i, snr, model) for i, snr in jobs]
    return [BerCurve(d, [res[d] for res in results], cfg.seed) for d in cfg.detectors]


def encode_complex(a: np.ndarray) -> list:
    a = np.asarray(a, dtype=np.complex128)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def decode_complex(rows) -> np.ndarray:
    return np.array([[complex(re, im) for re, im in row] for row in rows], dtype=np.complex128)


# ---------------------------------------------------------------- CSV

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def curves_to_csv(curves: list[BerCurve]) -> str:
    if not curves:
        raise ValueError("no curves to export")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for curve in curves:
        for p in curve.points:
            w.writerow([curve.detector, _fmt(p.snr_db), p.bits, p.bit_errors, _fmt(p.ber),
                        curve.seed, int(p.censored)])
    return buf.getvalue()


def export_csv(curves: list[BerCurve], path) -> None:
    Path(path).write_text(curves_to_csv(curves))


def read_csv(path) -> list[BerCurve]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        curves: dict[str, BerCurve] = {}
        for row in reader:
            det, snr, bits, errs, ber, seed, censored = row
            pt = BerPoint(float(snr), int(bits), int(errs), bool(int(censored)))
            if not math.isclose(pt.ber, float(ber), rel_tol=0, abs_tol=0):
                raise ValueError(f"{path}: ber column {ber} disagrees with {errs}/{bits}")
            curves.setdefault(det, BerCurve(det, [], int(seed))).points.append(pt)
    return list(curves.values())


def write_loss_trace(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for batch, epoch, loss in losses:
            w.writerow([batch, epoch, _fmt(loss)])
