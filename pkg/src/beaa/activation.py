"""Trainable degree-2 polynomial activations and ReLU.

A polynomial activation computes ``c1*x**2 + c2*x + c3`` where the
coefficient triple is shared by the whole layer, by each channel, or is
separate for every feature element.  Coefficient arrays have shape
``(3,)``, ``(n, 3)`` or ``(n, H, W, 3)``; the last axis is (quadratic,
linear, constant).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYER = "layer"
CHANNEL = "channel"
ELEMENT = "element"
GRANULARITIES = (LAYER, CHANNEL, ELEMENT)


def coeff_shape(granularity: str, feature_shape) -> tuple:
    n, h, w = feature_shape
    if granularity == LAYER:
        return (3,)
    if granularity == CHANNEL:
        return (n, 3)
    if granularity == ELEMENT:
        return (n, h, w, 3)
    raise ValueError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")


def init_coeffs(granularity, feature_shape, noise=0.0, rng=None, dtype=np.float64):
    """Identity start (0, 1, 0), optionally jittered by ``noise``."""
    shape = coeff_shape(granularity, feature_shape)
    c = np.zeros(shape, dtype=dtype)
    c[..., 1] = 1.0
    if noise:
        rng = np.random.default_rng(rng)
        c += rng.normal(0.0, noise, size=shape).astype(dtype)
    return c


def _broadcast(c, granularity):
    """Coefficient planes (c1, c2, c3) broadcastable against (M, n, H, W)."""
    if granularity == LAYER:
        return c[0], c[1], c[2]
    if granularity == CHANNEL:
        return tuple(c[:, j][:, None, None] for j in range(3))
    return c[..., 0], c[..., 1], c[..., 2]


def _reduce_axes(granularity):
    return {LAYER: (0, 1, 2, 3), CHANNEL: (0, 2, 3), ELEMENT: (0,)}[granularity]


@dataclass
class PolyActivation:
    granularity: str
    coeffs: np.ndarray

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        ndim = {LAYER: 1, CHANNEL: 2, ELEMENT: 4}[self.granularity]
        if self.coeffs.ndim != ndim or self.coeffs.shape[-1] != 3:
            raise ValueError(f"coefficients of shape {self.coeffs.shape} do not fit "
                             f"{self.granularity} granularity")

    def check_input(self, x):
        if x.ndim != 4:
            raise ValueError(f"expected (M, n, H, W) input, got {x.shape}")
        feat = x.shape[1:]
        if self.coeffs.shape != coeff_shape(self.granularity, feat):
            raise ValueError(f"input features {feat} do not match coefficients "
                             f"{self.coeffs.shape}")


def expand_coeffs(act: PolyActivation, feature_shape) -> np.ndarray:
    """Per-element ``(n, H, W, 3)`` coefficients equivalent to ``act``."""
    n, h, w = feature_shape
    c = act.coeffs
    if act.granularity == LAYER:
        return np.broadcast_to(c, (n, h, w, 3)).copy()
    if act.granularity == CHANNEL:
        return np.broadcast_to(c[:, None, None, :], (n, h, w, 3)).copy()
    return np.array(c, copy=True)


def eval_poly(act: PolyActivation, x) -> np.ndarray:
    act.check_input(x)
    c1, c2, c3 = _broadcast(act.coeffs, act.granularity)
    return (c1 * x + c2) * x + c3


def grad_coeffs(act: PolyActivation, x, upstream) -> np.ndarray:
    """dL/dc summed over the batch and over every position sharing a coefficient.

    The constant term has unit derivative.
    """
    act.check_input(x)
    if upstream.shape != x.shape:
        raise ValueError("upstream gradient shape differs from input shape")
    axes = _reduce_axes(act.granularity)
    g1 = np.sum(upstream * x * x, axis=axes)
    g2 = np.sum(upstream * x, axis=axes)
    g3 = np.sum(upstream, axis=axes)
    return np.stack([g1, g2, g3], axis=-1)


def grad_input(act: PolyActivation, x, upstream) -> np.ndarray:
    act.check_input(x)
    if upstream.shape != x.shape:
        raise ValueError("upstream gradient shape differs from input shape")
    c1, c2, _ = _broadcast(act.coeffs, act.granularity)
    return (2.0 * c1 * x + c2) * upstream


def relu(x):
    return np.maximum(x, 0)


def relu_grad_input(x, upstream):
    return np.where(x > 0, upstream, 0)


def count_params(granularity: str, n: int, h: int, w: int) -> tuple[int, int]:
    """(trainable coefficients, activation-function count) for one layer.

    The activation count follows the convention that layer- and channel-wise
    schemes apply ``n`` channel-level polynomials while the element-wise
    scheme applies one per feature, ``n*H*W``.
    """
    if min(n, h, w) < 1:
        raise ValueError("dimensions must be positive")
    if granularity == LAYER:
        return 3, n
    if granularity == CHANNEL:
        return 3 * n, n
    if granularity == ELEMENT:
        return 3 * n * h * w, n * h * w
    raise ValueError(f"unknown granularity {granularity!r}")
