"""Synthetic MIMO data: Rayleigh / Kronecker channels, AWGN at a target SNR,
imperfect CSI, and batch sampling for training and evaluation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .linalg import complex_to_real_matrix, ql_decompose_batch
from .modem import Constellation

MAX_REJECTIONS = 100
CHANNEL_MODELS = ("iid", "kronecker", "fixed")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; e.g. keys = (worker, batch)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class ChannelConfig:
    n_t: int
    n_r: int
    model: str = "iid"
    alpha: float = 0.0
    csi_error_var: float = 0.0
    snr_range_db: tuple[float, float] = (2.0, 8.0)
    # complex N_R x N_T matrix used by model="fixed"
    fixed_channel: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n_t < 1 or self.n_r < 1:
            raise ValueError("n_t and n_r must be >= 1")
        if self.n_r < self.n_t:
            raise ValueError(f"QL detection needs n_r >= n_t, got n_r={self.n_r}, n_t={self.n_t}")
        if self.model not in CHANNEL_MODELS:
            raise ValueError(f"unknown channel model {self.model!r}; expected one of {CHANNEL_MODELS}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"correlation alpha must lie in [0, 1), got {self.alpha}")
        if self.csi_error_var < 0:
            raise ValueError("csi_error_var must be >= 0")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ValueError(f"snr range [{lo}, {hi}] is empty")
        if self.model == "fixed":
            if self.fixed_channel is None:
                raise ValueError("model 'fixed' requires fixed_channel")
            fc = np.asarray(self.fixed_channel, dtype=np.complex128)
            if fc.shape != (self.n_r, self.n_t):
                raise ValueError(f"fixed_channel must be {self.n_r}x{self.n_t}, got {fc.shape}")
            object.__setattr__(self, "fixed_channel", fc)

    def with_snr(self, lo: float, hi: float | None = None) -> "ChannelConfig":
        return dataclasses.replace(self, snr_range_db=(lo, lo if hi is None else hi))


@dataclass(frozen=True)
class ChannelSample:
    s: np.ndarray
    H: np.ndarray
    H_hat: np.ndarray
    y: np.ndarray
    noise_var: float
    snr_db: float
    Q: np.ndarray
    L: np.ndarray
    y_tilde: np.ndarray


@dataclass
class SampleBatch:
    """Stacked samples; leading axis indexes the instance."""

    s_idx: np.ndarray
    s: np.ndarray
    H: np.ndarray
    H_hat: np.ndarray
    y: np.ndarray
    noise_var: np.ndarray
    snr_db: np.ndarray
    Q: np.ndarray
    L: np.ndarray
    y_tilde: np.ndarray
    rejections: int = 0

    def __len__(self) -> int:
        return self.s.shape[0]

    def __getitem__(self, i: int) -> ChannelSample:
        return ChannelSample(
            s=self.s[i], H=self.H[i], H_hat=self.H_hat[i], y=self.y[i],
            noise_var=float(self.noise_var[i]), snr_db=float(self.snr_db[i]),
            Q=self.Q[i], L=self.L[i], y_tilde=self.y_tilde[i],
        )

    def samples(self) -> list[ChannelSample]:
        return [self[i] for i in range(len(self))]


def _complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def correlation_matrix(n: int, alpha: float) -> np.ndarray:
    """Equicorrelated transmit covariance: ones on the diagonal, alpha elsewhere."""
    return np.full((n, n), float(alpha)) + (1.0 - alpha) * np.eye(n)


def sqrtm_psd(R: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition."""
    w, V = np.linalg.eigh(R)
    if np.any(w <= 0):
        raise ValueError("covariance matrix is not positive definite")
    return (V * np.sqrt(w)) @ V.T


def sample_iid_channel(cfg: ChannelConfig, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    shape = (cfg.n_r, cfg.n_t) if size is None else (size, cfg.n_r, cfg.n_t)
    return _complex_normal(rng, shape)


def sample_kronecker_channel(cfg: ChannelConfig, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    Hw = sample_iid_channel(cfg, rng, size)
    # R_r = I, so only the transmit side is coloured
    return Hw @ sqrtm_psd(correlation_matrix(cfg.n_t, cfg.alpha))


def _sample_channels(cfg: ChannelConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    if cfg.model == "iid":
        return sample_iid_channel(cfg, rng, size)
    if cfg.model == "kronecker":
        return sample_kronecker_channel(cfg, rng, size)
    return np.broadcast_to(cfg.fixed_channel, (size, cfg.n_r, cfg.n_t)).copy()


def noise_var_for_snr(H, c: Constellation, snr_db):
    """Per-real-component noise variance giving ``||H||_F^2 sigma_s^2 / E||n||^2 = SNR``.

    Accepts a single real channel or a stack of them (with matching ``snr_db``).
    """
    H = np.asarray(H, dtype=np.float64)
    fro2 = np.sum(H * H, axis=(-2, -1))
    if np.any(fro2 == 0):
        raise ValueError("channel matrix is identically zero")
    two_nr = H.shape[-2]
    v = fro2 * c.symbol_variance / (two_nr * 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0))
    return float(v) if np.ndim(v) == 0 else v


def sample_batch(cfg: ChannelConfig, c: Constellation, rng: np.random.Generator, b: int) -> SampleBatch:
    """Draw ``b`` independent detection instances as stacked arrays."""
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    Hc = _sample_channels(cfg, rng, b)
    s_idx = rng.integers(0, c.M, size=(b, 2 * cfg.n_t))
    lo, hi = cfg.snr_range_db
    snr = np.full(b, float(lo)) if lo == hi else rng.uniform(lo, hi, size=b)
    Hc_hat = Hc + _complex_normal(rng, Hc.shape, cfg.csi_error_var) if cfg.csi_error_var > 0 else Hc

    H = complex_to_real_matrix(Hc)
    H_hat = complex_to_real_matrix(Hc_hat) if cfg.csi_error_var > 0 else H
    Q, L, bad = ql_decompose_batch(H_hat)
    rejections = 0
    while np.any(bad):
        if cfg.model == "fixed":
            raise RuntimeError("fixed channel is numerically rank deficient")
        rows = np.flatnonzero(bad)
        rejections += rows.size
        if rejections > MAX_REJECTIONS:
            raise RuntimeError(f"gave up after {rejections} rank-deficient channel draws")
        Hc[rows] = _sample_channels(cfg, rng, rows.size)
        if cfg.csi_error_var > 0:
            Hc_hat[rows] = Hc[rows] + _complex_normal(rng, (rows.size, cfg.n_r, cfg.n_t), cfg.csi_error_var)
        H[rows] = complex_to_real_matrix(Hc[rows])
        if cfg.csi_error_var > 0:
            H_hat[rows] = complex_to_real_matrix(Hc_hat[rows])
        Q[rows], L[rows], bad_rows = ql_decompose_batch(H_hat[rows])
        bad[:] = False
        bad[rows] = bad_rows

    s = c.alphabet[s_idx]
    v = noise_var_for_snr(H, c, snr)
    noise = rng.standard_normal((b, 2 * cfg.n_r)) * np.sqrt(v)[:, None]
    y = np.einsum("bij,bj->bi", H, s) + noise
    y_tilde = np.einsum("bji,bj->bi", Q, y)
    return SampleBatch(s_idx=s_idx, s=s, H=H, H_hat=H_hat, y=y, noise_var=v, snr_db=snr,
                       Q=Q, L=L, y_tilde=y_tilde, rejections=rejections)


def generate_batch(cfg: ChannelConfig, c: Constellation, rng: np.random.Generator, b: int) -> list[ChannelSample]:
    return sample_batch(cfg, c, rng, b).samples()


def generate_sample(cfg: ChannelConfig, c: Constellation, rng: np.random.Generator) -> ChannelSample:
    return sample_batch(cfg, c, rng, 1)[0]
