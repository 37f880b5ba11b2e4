"""Canonical embedding between real slot vectors and ring coefficients.

Slot ``j`` is the evaluation at the root ``zeta**(5**j mod 2N)``, so the
Galois map ``X -> X**5`` rotates the slot vector one position to the left.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _slot_index(n: int):
    """FFT bins of the slot roots and of their conjugates."""
    k = np.array([pow(5, j, 2 * n) for j in range(n // 2)], dtype=np.int64)
    return (k - 1) // 2, (2 * n - k - 1) // 2


@lru_cache(maxsize=None)
def _twist(n: int) -> np.ndarray:
    return np.exp(1j * np.pi * np.arange(n) / n)


def slots_to_coeffs(values, n: int) -> np.ndarray:
    """Real coefficient vector whose slot evaluations are ``values``.

    ``values`` has at most N/2 entries; missing slots are zero.
    """
    values = np.asarray(values, dtype=np.float64)
    z = np.zeros(n // 2, dtype=np.complex128)
    z[: values.shape[-1]] = values
    pos, neg = _slot_index(n)
    spectrum = np.zeros(n, dtype=np.complex128)
    spectrum[pos] = z
    spectrum[neg] = np.conj(z)
    w = np.fft.fft(spectrum) / n
    return np.real(w / _twist(n))


def coeffs_to_slots(coeffs, n: int) -> np.ndarray:
    """Real parts of the N/2 slot evaluations of a real coefficient vector."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    spectrum = np.fft.ifft(coeffs * _twist(n)) * n
    pos, _ = _slot_index(n)
    return np.real(spectrum[pos])


def galois_element(step: int, n: int) -> int:
    """Exponent g with X -> X**g rotating slots left by ``step``."""
    return pow(5, step % (n // 2), 2 * n)


def automorphism_coeffs(coeffs, g: int) -> np.ndarray:
    """Apply X -> X**g to integer coefficients along the last axis."""
    coeffs = np.asarray(coeffs)
    n = coeffs.shape[-1]
    dest = (np.arange(n) * g) % (2 * n)
    sign = np.where(dest >= n, -1, 1)
    out = np.zeros_like(coeffs)
    out[..., dest % n] = coeffs * sign
    return out
