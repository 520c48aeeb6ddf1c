"""Square-QAM constellations with per-dimension Gray labels and BER counting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# levels per real dimension before energy normalisation
_PAM_ORDER = {"QPSK": 2, "QAM16": 4, "QAM64": 8}
_ALIASES = {"qpsk": "QPSK", "4qam": "QPSK", "qam4": "QPSK",
            "16qam": "QAM16", "qam16": "QAM16", "16-qam": "QAM16",
            "64qam": "QAM64", "qam64": "QAM64", "64-qam": "QAM64"}


def gray_code(n_bits: int) -> np.ndarray:
    """Binary-reflected Gray sequence: entry ``i`` is the label of level ``i``."""
    i = np.arange(2 ** n_bits)
    return i ^ (i >> 1)


@dataclass(frozen=True)
class Constellation:
    name: str
    alphabet: np.ndarray = field(repr=False)
    energy_scale: float

    @property
    def M(self) -> int:
        return len(self.alphabet)

    @property
    def bits_per_real_symbol(self) -> int:
        return int(np.log2(self.M))

    @property
    def symbol_variance(self) -> float:
        """Per-real-component symbol variance (mean of a^2 over the alphabet)."""
        return float(np.mean(self.alphabet ** 2))

    @property
    def labels(self) -> np.ndarray:
        return gray_code(self.bits_per_real_symbol)


def make_constellation(name: str) -> Constellation:
    key = _ALIASES.get(str(name).lower().replace("_", ""), str(name).upper())
    if key not in _PAM_ORDER:
        raise ValueError(f"unknown constellation {name!r}; expected one of {sorted(_PAM_ORDER)}")
    m = _PAM_ORDER[key]
    raw = np.arange(-(m - 1), m, 2, dtype=np.float64)
    # unit complex-symbol energy: 2 * mean(a^2) == 1
    scale = 1.0 / np.sqrt(2.0 * np.mean(raw ** 2))
    alphabet = raw * scale
    alphabet.setflags(write=False)
    return Constellation(name=key, alphabet=alphabet, energy_scale=float(scale))


def _bit_matrix(c: Constellation) -> np.ndarray:
    """``(M, bits)`` array: row ``i`` holds the MSB-first Gray label of level ``i``."""
    k = c.bits_per_real_symbol
    shifts = np.arange(k - 1, -1, -1)
    return (c.labels[:, None] >> shifts) & 1


def bits_to_real_symbols(c: Constellation, bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).ravel()
    k = c.bits_per_real_symbol
    if bits.size % k:
        raise ValueError(f"bit count {bits.size} is not a multiple of {k}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    groups = bits.reshape(-1, k)
    values = groups @ (1 << np.arange(k - 1, -1, -1))
    inverse = np.empty(c.M, dtype=np.int64)
    inverse[c.labels] = np.arange(c.M)
    return c.alphabet[inverse[values]]


def real_symbols_to_bits(c: Constellation, s) -> np.ndarray:
    idx = nearest_index(c, np.asarray(s, dtype=np.float64).ravel())
    return _bit_matrix(c)[idx].ravel()


def nearest_index(c: Constellation, v) -> np.ndarray:
    """Index of the nearest alphabet level; ties go to the smaller level."""
    v = np.asarray(v, dtype=np.float64)
    a = c.alphabet
    # decision boundaries are midpoints; a value exactly on one rounds down
    mids = 0.5 * (a[1:] + a[:-1])
    return np.searchsorted(mids, v, side="left")


def slice_to_alphabet(c: Constellation, v) -> np.ndarray:
    return c.alphabet[nearest_index(c, v)]


def bit_errors(c: Constellation, idx_true: np.ndarray, idx_hat: np.ndarray) -> np.ndarray:
    """Per-symbol Hamming distance between Gray labels of alphabet indices."""
    diff = c.labels[idx_true] ^ c.labels[idx_hat]
    count = np.zeros(diff.shape, dtype=np.int64)
    for b in range(c.bits_per_real_symbol):
        count += (diff >> b) & 1
    return count


def bit_error_rate(c: Constellation, s_true, s_hat) -> tuple[int, int]:
    """``(bit errors, bits compared)`` between two real symbol vectors."""
    s_true = np.asarray(s_true, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_true.shape != s_hat.shape:
        raise ValueError(f"shape mismatch {s_true.shape} vs {s_hat.shape}")
    errors = int(bit_errors(c, nearest_index(c, s_true), nearest_index(c, s_hat)).sum())
    return errors, s_true.size * c.bits_per_real_symbol
