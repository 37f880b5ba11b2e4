"""Leveled CKKS: encode/encrypt/evaluate with an RNS lattice backend and an
exact slot-vector simulator that follows the same metadata rules.

Both backends share :class:`HeBackend`, which owns every level/scale/slot
check; subclasses only move data.  Ciphertexts, plaintexts and keys are
immutable once created.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import automorphism_coeffs, coeffs_to_slots, galois_element, slots_to_coeffs
from .params import SCALE_RTOL, HeParams
from .rns import RnsContext, mulmod


class HeError(ValueError):
    """Invalid homomorphic operation (mismatched operands, bad input)."""


class LevelError(HeError):
    pass


class ScaleMismatchError(HeError):
    pass


class MissingKeyError(HeError):
    pass


def _frozen(a):
    if isinstance(a, np.ndarray):
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Plaintext:
    data: np.ndarray
    scale: float
    level: int
    slot_count: int
    backend: str

    def __post_init__(self):
        _frozen(self.data)


@dataclass(frozen=True, eq=False)
class Ciphertext:
    data: np.ndarray
    level: int
    scale: float
    slot_count: int
    backend: str

    def __post_init__(self):
        _frozen(self.data)


@dataclass(frozen=True, eq=False)
class KeySet:
    """Key material; ``secret_key`` is None for a public-only key set.

    Switching keys are ``(b, a)`` pairs of shape ``(L+1, L+2, N)``: one
    row block per RNS digit, residues over the chain plus the special prime,
    all in NTT form.  The simulator stores ``None`` in place of arrays.
    """

    backend: str
    params_fingerprint: str
    secret_key: np.ndarray | None
    public_key: tuple | None
    relin_key: tuple | None
    rotation_keys: dict = field(default_factory=dict)

    @property
    def rotation_steps(self) -> list[int]:
        return sorted(self.rotation_keys)

    @property
    def has_secret(self) -> bool:
        return self.secret_key is not None

    def public_part(self) -> "KeySet":
        return KeySet(self.backend, self.params_fingerprint, None, self.public_key,
                      self.relin_key, dict(self.rotation_keys))


def params_fingerprint(params: HeParams) -> str:
    text = f"{params.ring_degree}:{params.modulus_chain}:{params.special_prime}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class HeBackend:
    """Operation set shared by both implementations."""

    name = "abstract"

    def __init__(self, params: HeParams):
        self.params = params
        self.fingerprint = params_fingerprint(params)

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    # -- checks -------------------------------------------------------
    def _check_ct(self, *cts):
        for ct in cts:
            if not isinstance(ct, Ciphertext):
                raise HeError(f"expected Ciphertext, got {type(ct).__name__}")
            if ct.backend != self.name:
                raise HeError(f"ciphertext from backend {ct.backend!r}, expected {self.name!r}")
            if ct.slot_count != self.slot_count:
                raise HeError("slot_count mismatch")
            if ct.level < 0:
                raise LevelError("ciphertext level is negative")

    def _check_pt(self, pt):
        if not isinstance(pt, Plaintext):
            raise HeError(f"expected Plaintext, got {type(pt).__name__}")
        if pt.backend != self.name:
            raise HeError(f"plaintext from backend {pt.backend!r}, expected {self.name!r}")
        if pt.slot_count != self.slot_count:
            raise HeError("slot_count mismatch")

    def _check_keys(self, keys):
        if not isinstance(keys, KeySet):
            raise MissingKeyError("a KeySet is required")
        if keys.backend != self.name or keys.params_fingerprint != self.fingerprint:
            raise HeError("keys were generated for different parameters or backend")

    def _level(self, level):
        level = self.params.max_level if level is None else int(level)
        if not 0 <= level <= self.params.max_level:
            raise LevelError(f"level {level} outside [0, {self.params.max_level}]")
        return level

    @staticmethod
    def scales_match(a: float, b: float) -> bool:
        return math.isclose(a, b, rel_tol=SCALE_RTOL)

    def _same_level_scale(self, a, b, what):
        if a.level != b.level:
            raise LevelError(f"{what}: level mismatch ({a.level} vs {b.level}); use align()")
        if not self.scales_match(a.scale, b.scale):
            raise ScaleMismatchError(f"{what}: scale mismatch ({a.scale} vs {b.scale}); use align()")

    # -- public API ---------------------------------------------------
    def encode(self, values, scale: float | None = None, level: int | None = None) -> Plaintext:
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size > self.slot_count:
            raise HeError(f"{values.size} values exceed slot capacity {self.slot_count}")
        if not np.all(np.isfinite(values)):
            raise HeError("values must be finite")
        scale = self.params.default_scale if scale is None else float(scale)
        if scale <= 0:
            raise HeError("scale must be positive")
        level = self._level(level)
        return Plaintext(self._encode(values, scale, level), scale, level, self.slot_count, self.name)

    def encode_scalar(self, value: float, scale: float | None = None,
                      level: int | None = None) -> Plaintext:
        """Plaintext holding ``value`` in every slot."""
        if not math.isfinite(value):
            raise HeError("value must be finite")
        scale = self.params.default_scale if scale is None else float(scale)
        level = self._level(level)
        return Plaintext(self._encode_scalar(float(value), scale, level), scale, level,
                         self.slot_count, self.name)

    def decode(self, pt: Plaintext) -> np.ndarray:
        self._check_pt(pt)
        return self._decode(pt)

    def keygen(self, rotation_steps=(), seed=None) -> KeySet:
        steps = sorted({int(k) % self.slot_count for k in rotation_steps} - {0})
        return self._keygen(steps, _rng(seed))

    def encrypt(self, pt: Plaintext, keys: KeySet, seed=None) -> Ciphertext:
        self._check_pt(pt)
        self._check_keys(keys)
        if keys.public_key is None:
            raise MissingKeyError("public key missing")
        data = self._encrypt(pt, keys, _rng(seed))
        return Ciphertext(data, pt.level, pt.scale, self.slot_count, self.name)

    def decrypt(self, ct: Ciphertext, keys: KeySet) -> Plaintext:
        self._check_ct(ct)
        self._check_keys(keys)
        if not keys.has_secret:
            raise MissingKeyError("secret key required to decrypt")
        return Plaintext(self._decrypt(ct, keys), ct.scale, ct.level, self.slot_count, self.name)

    def decrypt_values(self, ct: Ciphertext, keys: KeySet) -> np.ndarray:
        return self.decode(self.decrypt(ct, keys))

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check_ct(a, b)
        self._same_level_scale(a, b, "add")
        return self._wrap(self._add(a, b), a.level, a.scale)

    def sub(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check_ct(a, b)
        self._same_level_scale(a, b, "sub")
        return self._wrap(self._sub(a, b), a.level, a.scale)

    def add_plain(self, a: Ciphertext, p: Plaintext) -> Ciphertext:
        self._check_ct(a)
        self._check_pt(p)
        if p.level < a.level:
            raise LevelError("plaintext level below ciphertext level")
        if not self.scales_match(a.scale, p.scale):
            raise ScaleMismatchError(f"add_plain: scale mismatch ({a.scale} vs {p.scale})")
        return self._wrap(self._add_plain(a, p), a.level, a.scale)

    def cmult(self, a: Ciphertext, p: Plaintext) -> Ciphertext:
        """Slot-wise product with a plaintext; scale multiplies, no rescale."""
        self._check_ct(a)
        self._check_pt(p)
        if p.level < a.level:
            raise LevelError("plaintext level below ciphertext level")
        return self._wrap(self._cmult(a, p), a.level, a.scale * p.scale)

    def mult(self, a: Ciphertext, b: Ciphertext, keys: KeySet) -> Ciphertext:
        """Slot-wise product, relinearized; scale multiplies, no rescale."""
        self._check_ct(a, b)
        if a.level != b.level:
            raise LevelError(f"mult: level mismatch ({a.level} vs {b.level})")
        self._check_keys(keys)
        if keys.relin_key is None:
            raise MissingKeyError("evaluation (relinearization) key missing")
        return self._wrap(self._mult(a, b, keys), a.level, a.scale * b.scale)

    def square(self, a: Ciphertext, keys: KeySet) -> Ciphertext:
        return self.mult(a, a, keys)

    def rescale(self, a: Ciphertext) -> Ciphertext:
        self._check_ct(a)
        if a.level < 1:
            raise LevelError("cannot rescale at level 0: modulus chain exhausted")
        q = self.params.modulus_chain[a.level]
        return self._wrap(self._rescale(a), a.level - 1, a.scale / q)

    def mod_down_to(self, a: Ciphertext, level: int) -> Ciphertext:
        """Drop chain primes without touching the scale."""
        self._check_ct(a)
        if not 0 <= level <= a.level:
            raise LevelError(f"cannot move from level {a.level} to {level}")
        if level == a.level:
            return a
        return self._wrap(self._mod_down(a, level), level, a.scale)

    def rotate(self, a: Ciphertext, k: int, keys: KeySet) -> Ciphertext:
        """Cyclic left shift of the slot vector by ``k``."""
        self._check_ct(a)
        k = int(k) % self.slot_count
        if k == 0:
            return a
        self._check_keys(keys)
        if k not in keys.rotation_keys:
            raise MissingKeyError(f"no rotation key for step {k}")
        return self._wrap(self._rotate(a, k, keys), a.level, a.scale)

    def align(self, a: Ciphertext, b: Ciphertext) -> tuple[Ciphertext, Ciphertext]:
        """Bring two ciphertexts to a common level and scale.

        Equal scales only need a level drop.  Otherwise ``a`` is multiplied by
        a unit constant whose encoding scale cancels the mismatch on rescale,
        which costs one level for both operands.
        """
        self._check_ct(a, b)
        if self.scales_match(a.scale, b.scale):
            lvl = min(a.level, b.level)
            return self.mod_down_to(a, lvl), self.mod_down_to(b, lvl)
        lvl = min(a.level, b.level)
        if lvl < 1:
            raise LevelError("align needs one spare level to adjust scale")
        a = self.mod_down_to(a, lvl)
        q = self.params.modulus_chain[lvl]
        one = self.encode_scalar(1.0, scale=b.scale * q / a.scale, level=lvl)
        a = self.rescale(self.cmult(a, one))
        b = self.mod_down_to(b, lvl - 1)
        return a, b

    def _wrap(self, data, level, scale):
        return Ciphertext(data, level, scale, self.slot_count, self.name)


class SimulationBackend(HeBackend):
    """Exact slot arithmetic with CKKS level/scale bookkeeping and no noise."""

    name = "sim"

    def _encode(self, values, scale, level):
        out = np.zeros(self.slot_count)
        out[: values.size] = values
        return out

    def _encode_scalar(self, value, scale, level):
        return np.full(self.slot_count, value)

    def _decode(self, pt):
        return np.array(pt.data, dtype=np.float64)

    def _keygen(self, steps, rng):
        return KeySet(self.name, self.fingerprint, np.zeros(0), ("sim",), ("sim",),
                      {k: ("sim",) for k in steps})

    def _encrypt(self, pt, keys, rng):
        return np.array(pt.data)

    def _decrypt(self, ct, keys):
        return np.array(ct.data)

    def _add(self, a, b):
        return a.data + b.data

    def _sub(self, a, b):
        return a.data - b.data

    def _add_plain(self, a, p):
        return a.data + p.data

    def _cmult(self, a, p):
        return a.data * p.data

    def _mult(self, a, b, keys):
        return a.data * b.data

    def _rescale(self, a):
        return np.array(a.data)

    def _mod_down(self, a, level):
        return np.array(a.data)

    def _rotate(self, a, k, keys):
        return np.roll(a.data, -k)


class CkksBackend(HeBackend):
    """RNS-CKKS over Z_Q[X]/(X^N+1) with hybrid key switching.

    Ciphertext data is ``(2, level+1, N)`` int64 residues in NTT form.
    Key switching decomposes by RNS digit and uses one special prime ``P``.
    """

    name = "ckks"

    def __init__(self, params: HeParams):
        super().__init__(params)
        self.n = params.ring_degree
        self.L = params.max_level
        self.rns = RnsContext(self.n, list(params.modulus_chain) + [params.special_prime])
        self._p_index = self.L + 1

    def _q(self, level):
        return tuple(range(level + 1))

    def _ext(self, level):
        return tuple(range(level + 1)) + (self._p_index,)

    # -- sampling -----------------------------------------------------
    def _ternary(self, rng):
        return rng.integers(-1, 2, size=self.n)

    def _gaussian(self, rng, shape=None):
        shape = self.n if shape is None else shape
        return np.rint(rng.normal(0.0, self.params.gaussian_stddev, size=shape)).astype(np.int64)

    def _uniform(self, rng, idx, lead=()):
        p = self.rns.modulus(idx)
        return rng.integers(0, p, size=lead + (len(idx), self.n), dtype=np.int64)

    def _small_ntt(self, coeffs, idx):
        return self.rns.ntt(self.rns.reduce(coeffs, idx), idx)

    # -- encoding -----------------------------------------------------
    def _int_residues(self, ints, idx):
        """Residues of (possibly huge) integer coefficients."""
        ints = np.asarray(ints)
        if ints.dtype != object and np.max(np.abs(ints), initial=0) < 2**62:
            return self.rns.reduce(ints.astype(np.int64), idx)
        primes = [self.rns.primes[i] for i in idx]
        return np.array([[int(c) % q for c in ints] for q in primes], dtype=np.int64)

    def _encode(self, values, scale, level):
        coeffs = slots_to_coeffs(values, self.n) * scale
        if np.max(np.abs(coeffs), initial=0) < 2**62:
            ints = np.rint(coeffs).astype(np.int64)
        else:
            ints = np.array([int(round(c)) for c in coeffs], dtype=object)
        idx = self._q(level)
        return self.rns.ntt(self._int_residues(ints, idx), idx)

    def _encode_scalar(self, value, scale, level):
        k = int(round(value * scale))
        return np.array([[k % self.rns.primes[i]] for i in self._q(level)], dtype=np.int64)

    def _decode(self, pt):
        idx = self._q(pt.level)
        data = np.broadcast_to(pt.data, (len(idx), self.n))
        coeffs = self.rns.intt(data, idx)
        if len(idx) == 1:
            q = self.rns.primes[0]
            ints = np.where(coeffs[0] > q // 2, coeffs[0] - q, coeffs[0]).astype(np.float64)
        else:
            ints = self.rns.crt(coeffs, idx).astype(np.float64)
        return coeffs_to_slots(ints / pt.scale, self.n)

    # -- keys ---------------------------------------------------------
    def _keygen(self, steps, rng):
        full = tuple(range(self.L + 2))
        s = self._ternary(rng)
        s_ntt = self._small_ntt(s, full)
        top = self._q(self.L)
        a = self._uniform(rng, top)
        e = self._small_ntt(self._gaussian(rng), top)
        b = self.rns.sub(e, self.rns.mul(a, s_ntt[: self.L + 1], top), top)
        relin = self._switch_key(self.rns.mul(s_ntt, s_ntt, full), s_ntt, rng)
        rot = {}
        for k in steps:
            g = galois_element(k, self.n)
            s_g = self._small_ntt(automorphism_coeffs(s, g), full)
            rot[k] = self._switch_key(s_g, s_ntt, rng)
        return KeySet(self.name, self.fingerprint, _frozen(s.astype(np.int64)),
                      (_frozen(b), _frozen(a)), relin, rot)

    def _switch_key(self, target_ntt, s_ntt, rng):
        """Key re-encrypting ``target`` under ``s`` for every RNS digit."""
        full = tuple(range(self.L + 2))
        digits = self.L + 1
        a = self._uniform(rng, full, lead=(digits,))
        e = self.rns.ntt(self.rns.reduce(self._gaussian(rng, (digits, self.n)), full), full)
        b = self.rns.sub(e, self.rns.mul(a, s_ntt, full), full)
        p_mod = self.params.special_prime
        for j in range(digits):
            q = self.rns.primes[j]
            gadget = mulmod(target_ntt[j], np.int64(p_mod % q), np.int64(q))
            b[j, j] = (b[j, j] + gadget) % q
        return _frozen(b), _frozen(a)

    def _secret_ntt(self, keys, idx):
        return self._small_ntt(keys.secret_key, idx)

    # -- encryption ---------------------------------------------------
    def _encrypt(self, pt, keys, rng):
        level = pt.level
        idx = self._q(level)
        b, a = keys.public_key
        b, a = b[: level + 1], a[: level + 1]
        v = self._small_ntt(self._ternary(rng), idx)
        e0 = self._small_ntt(self._gaussian(rng), idx)
        e1 = self._small_ntt(self._gaussian(rng), idx)
        m = np.broadcast_to(pt.data, (level + 1, self.n))
        c0 = self.rns.add(self.rns.add(self.rns.mul(v, b, idx), e0, idx), m, idx)
        c1 = self.rns.add(self.rns.mul(v, a, idx), e1, idx)
        return np.stack([c0, c1])

    def _decrypt(self, ct, keys):
        idx = self._q(ct.level)
        s = self._secret_ntt(keys, idx)
        c0, c1 = ct.data
        return self.rns.add(c0, self.rns.mul(c1, s, idx), idx)

    # -- evaluation ---------------------------------------------------
    def _add(self, a, b):
        return self.rns.add(a.data, b.data, self._q(a.level))

    def _sub(self, a, b):
        return self.rns.sub(a.data, b.data, self._q(a.level))

    def _add_plain(self, a, p):
        idx = self._q(a.level)
        m = np.broadcast_to(p.data[: a.level + 1], (a.level + 1, self.n))
        c0 = self.rns.add(a.data[0], m, idx)
        return np.stack([c0, a.data[1]])

    def _cmult(self, a, p):
        idx = self._q(a.level)
        m = p.data[: a.level + 1]
        return self.rns.mul(a.data, np.broadcast_to(m, a.data.shape), idx)

    def _mult(self, a, b, keys):
        idx = self._q(a.level)
        rns = self.rns
        a0, a1 = a.data
        b0, b1 = b.data
        d0 = rns.mul(a0, b0, idx)
        d1 = rns.add(rns.mul(a0, b1, idx), rns.mul(a1, b0, idx), idx)
        d2 = rns.mul(a1, b1, idx)
        k0, k1 = self._key_switch(d2, keys.relin_key, a.level)
        return np.stack([rns.add(d0, k0, idx), rns.add(d1, k1, idx)])

    def _key_switch(self, d, key, level):
        """(k0, k1) with k0 + k1*s ~ d*s' for the key's source secret s'."""
        rns = self.rns
        q_idx = self._q(level)
        ext = self._ext(level)
        coeff = rns.intt(d, q_idx)
        digits = np.remainder(coeff[:, None, :], rns.modulus(ext)[None])
        digits = rns.ntt(digits, ext)
        cols = list(ext)
        kb, ka = key
        p_ext = rns.modulus(ext)
        acc = np.stack([
            np.remainder(mulmod(digits, kb[: level + 1][:, cols], p_ext).sum(axis=0), p_ext),
            np.remainder(mulmod(digits, ka[: level + 1][:, cols], p_ext).sum(axis=0), p_ext),
        ])
        return self._div_special(acc, level)

    def _div_special(self, acc, level):
        """Divide by the special prime P, rounding; drops the P row."""
        rns = self.rns
        q_idx = self._q(level)
        big_p = self.params.special_prime
        t = rns.intt(acc[:, -1:, :], (self._p_index,))[:, 0, :]
        t = np.where(t > big_p // 2, t - big_p, t)
        t_res = rns.ntt(rns.reduce(t, q_idx), q_idx)
        diff = rns.sub(acc[:, :-1, :], t_res, q_idx)
        pinv = np.array([[pow(big_p % rns.primes[i], -1, rns.primes[i])] for i in q_idx],
                        dtype=np.int64)
        return mulmod(diff, np.broadcast_to(pinv, diff.shape[-2:-1] + (1,)), rns.modulus(q_idx))

    def _rescale(self, a):
        rns = self.rns
        level = a.level
        q_last = rns.primes[level]
        t = rns.intt(a.data[:, level:level + 1, :], (level,))[:, 0, :]
        t = np.where(t > q_last // 2, t - q_last, t)
        lower = self._q(level - 1)
        t_res = rns.ntt(rns.reduce(t, lower), lower)
        diff = rns.sub(a.data[:, :level, :], t_res, lower)
        qinv = np.array([[pow(q_last % rns.primes[i], -1, rns.primes[i])] for i in lower],
                        dtype=np.int64)
        return mulmod(diff, np.broadcast_to(qinv, diff.shape[-2:-1] + (1,)), rns.modulus(lower))

    def _mod_down(self, a, level):
        return np.array(a.data[:, : level + 1, :])

    def _rotate(self, a, k, keys):
        rns = self.rns
        idx = self._q(a.level)
        g = galois_element(k, self.n)
        coeffs = rns.intt(a.data, idx)
        n = self.n
        dest = (np.arange(n) * g) % (2 * n)
        neg = dest >= n
        p = rns.modulus(idx)
        moved = np.where(neg & (coeffs != 0), p - coeffs, coeffs)
        out = np.zeros_like(moved)
        out[..., dest % n] = moved
        c = rns.ntt(out, idx)
        k0, k1 = self._key_switch(c[1], keys.rotation_keys[k], a.level)
        return np.stack([rns.add(c[0], k0, idx), k1])


BACKENDS = {"ckks": CkksBackend, "sim": SimulationBackend}


def make_backend(name: str, params: HeParams) -> HeBackend:
    try:
        return BACKENDS[name](params)
    except KeyError:
        raise HeError(f"unknown backend {name!r}; choose from {sorted(BACKENDS)}") from None
