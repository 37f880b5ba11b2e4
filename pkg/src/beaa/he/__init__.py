"""Leveled CKKS homomorphic encryption: real RNS backend and exact simulator."""
from .backend import (
    BACKENDS,
    Ciphertext,
    CkksBackend,
    HeBackend,
    HeError,
    KeySet,
    LevelError,
    MissingKeyError,
    Plaintext,
    ScaleMismatchError,
    SimulationBackend,
    make_backend,
)
from .params import TOLERANCES, HeParams, ParamError, make_params, preset, preset_names

__all__ = [
    "BACKENDS", "Ciphertext", "CkksBackend", "HeBackend", "HeError", "HeParams", "KeySet",
    "LevelError", "MissingKeyError", "ParamError", "Plaintext", "ScaleMismatchError",
    "SimulationBackend", "TOLERANCES", "make_backend", "make_params", "preset", "preset_names",
]
