"""Parameter sets for the leveled CKKS backend."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

from sympy import isprime

# Accuracy budget at the desk preset, shared by tests and harnesses.
TOLERANCES = {
    "encode": 1e-6,
    "fresh_noise": 1e-4,
    "per_level": 1e-3,
    "simulation": 1e-9,
}

# Relative slack when comparing ciphertext scales; scales that went through
# different but equivalent rescale paths differ only by float rounding.
SCALE_RTOL = 1e-9

# mulmod relies on float64 quotient estimates, which stay within +-1 only
# while every prime is below 2**51.
MAX_PRIME_BITS = 51


class ParamError(ValueError):
    pass


@dataclass(frozen=True)
class HeParams:
    """Ring degree, RNS modulus chain and scale for one CKKS instance.

    ``modulus_chain[0]`` is the base prime that survives all rescales;
    ``modulus_chain[1:]`` are dropped one per rescale, last first.
    ``special_prime`` is only used inside key-switching keys.
    """

    ring_degree: int
    modulus_chain: tuple[int, ...]
    special_prime: int
    default_scale: float
    security_lambda: int = 0
    gaussian_stddev: float = 3.2
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        n = self.ring_degree
        if n < 8 or n & (n - 1):
            raise ParamError(f"ring_degree must be a power of two >= 8, got {n}")
        if not self.modulus_chain:
            raise ParamError("modulus_chain must not be empty")
        object.__setattr__(self, "modulus_chain", tuple(int(q) for q in self.modulus_chain))
        primes = self.modulus_chain + (int(self.special_prime),)
        if len(set(primes)) != len(primes):
            raise ParamError("moduli must be distinct")
        for q in primes:
            if q.bit_length() > MAX_PRIME_BITS:
                raise ParamError(f"prime {q} exceeds {MAX_PRIME_BITS} bits")
            if (q - 1) % (2 * n):
                raise ParamError(f"prime {q} is not 1 mod 2N")
            if not isprime(q):
                raise ParamError(f"{q} is not prime")
        if not 0 < self.default_scale < min(self.modulus_chain):
            raise ParamError("default_scale must be positive and below every chain prime")
        if self.gaussian_stddev <= 0:
            raise ParamError("gaussian_stddev must be positive")

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    @property
    def max_level(self) -> int:
        return len(self.modulus_chain) - 1

    @property
    def total_bits(self) -> int:
        prod = 1
        for q in self.modulus_chain + (self.special_prime,):
            prod *= q
        return prod.bit_length()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ring_degree": self.ring_degree,
            "modulus_chain": list(self.modulus_chain),
            "special_prime": self.special_prime,
            "default_scale": self.default_scale,
            "security_lambda": self.security_lambda,
            "gaussian_stddev": self.gaussian_stddev,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeParams":
        return cls(
            ring_degree=int(d["ring_degree"]),
            modulus_chain=tuple(int(q) for q in d["modulus_chain"]),
            special_prime=int(d["special_prime"]),
            default_scale=float(d["default_scale"]),
            security_lambda=int(d.get("security_lambda", 0)),
            gaussian_stddev=float(d.get("gaussian_stddev", 3.2)),
            name=d.get("name", "custom"),
        )


def find_ntt_primes(bits: int, count: int, ring_degree: int, exclude=()) -> list[int]:
    """Smallest ``count`` primes above ``2**bits`` with ``p = 1 mod 2N``."""
    step = 2 * ring_degree
    p = (1 << bits) + 1
    out = []
    while len(out) < count:
        if p not in exclude and isprime(p):
            out.append(p)
        p += step
    return out


def make_params(
    ring_degree: int,
    levels: int,
    scale_bits: int = 40,
    base_bits: int = 50,
    special_bits: int = 51,
    security_lambda: int = 0,
    name: str = "custom",
) -> HeParams:
    """Chain of one ``base_bits`` prime plus ``levels`` primes just above the scale."""
    if levels < 0:
        raise ParamError("levels must be >= 0")
    rescale = find_ntt_primes(scale_bits, levels, ring_degree)
    base = find_ntt_primes(base_bits, 1, ring_degree, exclude=rescale)
    special = find_ntt_primes(special_bits - 1, 1, ring_degree, exclude=rescale + base)
    return HeParams(
        ring_degree=ring_degree,
        modulus_chain=tuple(base + rescale),
        special_prime=special[0],
        default_scale=float(2**scale_bits),
        security_lambda=security_lambda,
        name=name,
    )


_PRESETS = {
    # unit tests: 64 slots
    "toy": dict(ring_degree=128, levels=8),
    # acceptance default: 1024 slots, depth 10
    "desk": dict(ring_degree=2048, levels=10),
    # N = 32768; base, 15 rescale primes near 2^41 and the special prime give ~716 bits
    "full": dict(ring_degree=32768, levels=15, scale_bits=41, security_lambda=128),
}


@lru_cache(maxsize=None)
def preset(name: str) -> HeParams:
    try:
        kw = _PRESETS[name]
    except KeyError:
        raise ParamError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}") from None
    return make_params(name=name, **kw)


def preset_names() -> list[str]:
    return sorted(_PRESETS)
