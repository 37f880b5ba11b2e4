"""Vectorized residue-number-system arithmetic over Z_p[X]/(X^N + 1).

Polynomials are int64 arrays of shape ``(..., K, N)``: one row of residues
per prime.  Every prime is below 2**51, so products are reduced with a
float64 quotient estimate and exact wrapping int64 arithmetic.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _primitive_root_2n(p: int, n: int) -> int:
    """A primitive 2N-th root of unity mod p (requires p = 1 mod 2N)."""
    exp = (p - 1) // (2 * n)
    for g in range(2, p):
        psi = pow(g, exp, p)
        if pow(psi, n, p) == p - 1:
            return psi
    raise ValueError(f"no primitive 2N-th root mod {p}")


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _lift_negative(r, p):
    """In place: add ``p`` where ``r < 0`` (sign-mask trick, no temporaries kept)."""
    r += (r >> 63) & p
    return r


def fix_range(r, p):
    """Map values in [-p, 2p) to [0, p)."""
    r = np.array(r, dtype=np.int64, copy=True)
    _lift_negative(r, p)
    r -= p
    return _lift_negative(r, p)


def mulmod(a, b, p):
    """(a * b) mod p for residues a, b in [0, p)."""
    q = (a.astype(np.float64) * b.astype(np.float64) / p).astype(np.int64)
    r = a * b
    r -= q * p
    _lift_negative(r, p)
    r -= p
    return _lift_negative(r, p)


def mulmod_shoup(a, w, w_over_p, p):
    """(a * w) mod p with ``w / p`` precomputed as float64."""
    q = (a * w_over_p).astype(np.int64)
    r = a * w
    r -= q * p
    _lift_negative(r, p)
    r -= p
    return _lift_negative(r, p)


def addmod(a, b, p):
    r = np.add(a, b)
    r -= p
    return _lift_negative(r, p)


def submod(a, b, p):
    return _lift_negative(np.subtract(a, b), p)


class RnsContext:
    """NTT tables for a fixed ring degree and list of primes.

    Methods take ``idx``, a tuple of indices into ``primes``, naming which
    prime each residue row belongs to.
    """

    def __init__(self, ring_degree: int, primes):
        self.n = int(ring_degree)
        self.primes = [int(p) for p in primes]
        n = self.n
        self._rev = _bit_reverse(n)
        self._stages = []
        m = 1
        while m < n:
            self._stages.append(m)
            m *= 2

        k = len(self.primes)
        psi_pow = np.zeros((k, n), dtype=np.int64)
        ipsi_pow = np.zeros((k, n), dtype=np.int64)
        fwd = [np.zeros((k, m), dtype=np.int64) for m in self._stages]
        inv = [np.zeros((k, m), dtype=np.int64) for m in self._stages]
        for row, p in enumerate(self.primes):
            psi = _primitive_root_2n(p, n)
            ipsi = pow(psi, -1, p)
            ninv = pow(n, -1, p)
            omega = psi * psi % p
            iomega = pow(omega, -1, p)
            pw = 1
            ipw = ninv
            for i in range(n):
                psi_pow[row, i] = pw
                ipsi_pow[row, i] = ipw
                pw = pw * psi % p
                ipw = ipw * ipsi % p
            for s, m in enumerate(self._stages):
                w_m = pow(omega, n // (2 * m), p)
                iw_m = pow(iomega, n // (2 * m), p)
                w = iw = 1
                for j in range(m):
                    fwd[s][row, j] = w
                    inv[s][row, j] = iw
                    w = w * w_m % p
                    iw = iw * iw_m % p
        self._p = np.array(self.primes, dtype=np.int64)
        self._psi = psi_pow
        self._ipsi = ipsi_pow
        self._fwd = fwd
        self._inv = inv

    @lru_cache(maxsize=None)
    def _tables(self, idx: tuple) -> dict:
        sel = list(idx)
        p = self._p[sel]
        pf = p.astype(np.float64)

        def pre(tab):
            t = tab[sel]
            return t, t.astype(np.float64) / pf[:, None]

        return {
            "p": p[:, None],
            "p3": p[:, None, None],
            "pf3": pf[:, None, None],
            "psi": pre(self._psi),
            "ipsi": pre(self._ipsi),
            "fwd": [tuple(a[:, None, :] for a in pre(t)) for t in self._fwd],
            "inv": [tuple(a[:, None, :] for a in pre(t)) for t in self._inv],
        }

    def modulus(self, idx: tuple) -> np.ndarray:
        """Primes for ``idx`` shaped ``(K, 1)`` for broadcasting."""
        return self._tables(tuple(idx))["p"]

    def _transform(self, x, tabs, twiddles):
        n = self.n
        shape = x.shape
        lead = shape[:-1]
        p3 = tabs["p3"]
        for m, (w, wr) in zip(self._stages, twiddles):
            xr = x.reshape(lead + (n // (2 * m), 2, m))
            u = xr[..., 0, :]
            v = mulmod_shoup(xr[..., 1, :], w, wr, p3)
            out = np.empty(xr.shape, dtype=np.int64)
            hi, lo = out[..., 0, :], out[..., 1, :]
            np.add(u, v, out=hi)
            hi -= p3
            _lift_negative(hi, p3)
            np.subtract(u, v, out=lo)
            _lift_negative(lo, p3)
            x = out.reshape(shape)
        return x

    def ntt(self, x, idx):
        """Negacyclic forward transform along the last axis."""
        tabs = self._tables(tuple(idx))
        p = tabs["p"]
        x = mulmod_shoup(np.asarray(x, dtype=np.int64), *tabs["psi"], p)
        x = x[..., self._rev]
        return self._transform(x, tabs, tabs["fwd"])

    def intt(self, x, idx):
        tabs = self._tables(tuple(idx))
        x = np.asarray(x, dtype=np.int64)[..., self._rev]
        x = self._transform(x, tabs, tabs["inv"])
        return mulmod_shoup(x, *tabs["ipsi"], tabs["p"])

    def reduce(self, x, idx):
        """Residues of signed int64 coefficients ``x`` (shape ``(..., N)``)."""
        p = self.modulus(idx)
        return np.remainder(np.asarray(x, dtype=np.int64)[..., None, :], p)

    def mul(self, a, b, idx):
        return mulmod(a, b, self.modulus(idx))

    def add(self, a, b, idx):
        return addmod(a, b, self.modulus(idx))

    def sub(self, a, b, idx):
        return submod(a, b, self.modulus(idx))

    def neg(self, a, idx):
        p = self.modulus(idx)
        return np.where(a == 0, a, p - a)

    def mul_scalar(self, a, k: int, idx):
        """Multiply residues by the integer ``k`` (any size)."""
        p = self.modulus(idx)
        ks = np.array([[k % int(q)] for q in p[:, 0]], dtype=np.int64)
        return mulmod(a, np.broadcast_to(ks, a.shape[-2:-1] + (1,)), p)

    def crt(self, residues, idx) -> np.ndarray:
        """Centered integer reconstruction as a Python-int object array."""
        primes = [self.primes[i] for i in idx]
        big_q = 1
        for q in primes:
            big_q *= q
        acc = np.zeros(residues.shape[-1], dtype=object)
        for row, q in enumerate(primes):
            qhat = big_q // q
            coef = qhat * pow(qhat % q, -1, q)
            acc = acc + residues[row].astype(object) * coef
        acc = acc % big_q
        return np.where(acc > big_q // 2, acc - big_q, acc)


def negacyclic_mul_naive(a, b, p: int) -> np.ndarray:
    """Schoolbook product in Z_p[X]/(X^N+1); O(N^2) oracle for tests."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        ai = int(a[i])
        if not ai:
            continue
        for j in range(n):
            k = i + j
            term = ai * int(b[j])
            if k >= n:
                out[k - n] -= term
            else:
                out[k] += term
    return np.array([v % p for v in out], dtype=np.int64)
