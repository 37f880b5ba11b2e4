"""Element-wise and channel-wise packing of image batches into CKKS slots.

Element-wise packing puts feature ``(c, h, w)`` of all M images into one
plaintext: slot ``i`` of cell ``(c, h, w)`` is image ``i``.  The grid always
has ``n*H*W`` cells regardless of M, and M can grow up to N/2.

Channel-wise packing puts one image channel, row-major, into one plaintext,
giving ``M*n`` plaintexts of ``H*W`` used slots each.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .he.backend import Ciphertext, HeBackend, HeError, KeySet
from .he.params import HeParams

ELEMENTWISE = "element-wise"
CHANNELWISE = "channel-wise"


class PackingError(HeError):
    pass


def _as_batch(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise PackingError(f"expected an M x n x H x W batch, got shape {batch.shape}")
    if batch.shape[0] < 1:
        raise PackingError("batch must contain at least one image")
    if not np.all(np.isfinite(batch)):
        raise PackingError("batch values must be finite")
    return batch


@dataclass(frozen=True, eq=False)
class PackedTensor:
    """``grid[c, h, w]`` holds a Plaintext or Ciphertext with M used slots."""

    grid: np.ndarray
    batch_size: int
    layout: str = ELEMENTWISE

    @property
    def shape(self) -> tuple:
        return self.grid.shape

    @property
    def encrypted(self) -> bool:
        return isinstance(self.grid.flat[0], Ciphertext)

    def cells(self):
        return list(self.grid.flat)


@dataclass(frozen=True, eq=False)
class ChannelPackedTensor:
    """``packs[i, c]`` holds image ``i`` channel ``c`` in row-major order."""

    packs: np.ndarray
    image_shape: tuple
    layout: str = CHANNELWISE

    @property
    def used_slots(self) -> int:
        return int(self.image_shape[1] * self.image_shape[2])


def elementwise_slots(batch) -> np.ndarray:
    """Slot matrix of element-wise packing: ``out[c, h, w, i] = batch[i, c, h, w]``."""
    return np.ascontiguousarray(np.moveaxis(_as_batch(batch), 0, -1))


def _object_grid(shape, items) -> np.ndarray:
    grid = np.empty(shape, dtype=object)
    for i, it in enumerate(items):
        grid.flat[i] = it
    return grid


def pack_elementwise(batch, backend: HeBackend, level: int | None = None,
                     scale: float | None = None) -> PackedTensor:
    batch = _as_batch(batch)
    m = batch.shape[0]
    if m > backend.slot_count:
        raise PackingError(f"batch size {m} exceeds slot capacity {backend.slot_count}")
    slots = elementwise_slots(batch)
    pts = [backend.encode(v, scale=scale, level=level) for v in slots.reshape(-1, m)]
    return PackedTensor(_object_grid(slots.shape[:3], pts), m)


def encrypt_packed(packed: PackedTensor, backend: HeBackend, keys: KeySet, seed=None) -> PackedTensor:
    """Encrypt every cell; one generator drives all cells in row-major order."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    cts = [backend.encrypt(pt, keys, seed=rng) for pt in packed.grid.flat]
    return PackedTensor(_object_grid(packed.grid.shape, cts), packed.batch_size, packed.layout)


def decrypt_packed(packed: PackedTensor, backend: HeBackend, keys: KeySet) -> PackedTensor:
    pts = [backend.decrypt(ct, keys) for ct in packed.grid.flat]
    return PackedTensor(_object_grid(packed.grid.shape, pts), packed.batch_size, packed.layout)


def unpack_elementwise(packed: PackedTensor, backend: HeBackend, batch_size: int | None = None,
                       keys: KeySet | None = None) -> np.ndarray:
    """Inverse of :func:`pack_elementwise`; decrypts first when given keys."""
    m = packed.batch_size if batch_size is None else int(batch_size)
    if m < 1 or m > packed.batch_size:
        raise PackingError(f"cannot unpack {m} images from a pack of {packed.batch_size}")
    if packed.encrypted:
        if keys is None:
            raise PackingError("encrypted pack needs keys to unpack")
        packed = decrypt_packed(packed, backend, keys)
    vals = np.stack([backend.decode(pt)[:m] for pt in packed.grid.flat])
    return np.moveaxis(vals.reshape(packed.grid.shape + (m,)), -1, 0)


def pack_channelwise(batch, backend: HeBackend, level: int | None = None,
                     scale: float | None = None) -> ChannelPackedTensor:
    batch = _as_batch(batch)
    m, n, h, w = batch.shape
    if h * w > backend.slot_count:
        raise PackingError(f"H*W = {h * w} exceeds slot capacity {backend.slot_count}")
    pts = [backend.encode(batch[i, c].ravel(), scale=scale, level=level)
           for i in range(m) for c in range(n)]
    return ChannelPackedTensor(_object_grid((m, n), pts), (n, h, w))


def unpack_channelwise(packed: ChannelPackedTensor, backend: HeBackend,
                       keys: KeySet | None = None) -> np.ndarray:
    n, h, w = packed.image_shape
    m = packed.packs.shape[0]
    out = np.empty((m, n, h, w))
    for i in range(m):
        for c in range(n):
            item = packed.packs[i, c]
            if isinstance(item, Ciphertext):
                if keys is None:
                    raise PackingError("encrypted pack needs keys to unpack")
                item = backend.decrypt(item, keys)
            out[i, c] = backend.decode(item)[: h * w].reshape(h, w)
    return out


def slot_utilization(used_slots: int, params: HeParams) -> float:
    """Fraction of the N/2 slots a pack occupies."""
    used_slots = int(used_slots)
    if not 0 <= used_slots <= params.slot_count:
        raise PackingError(f"used_slots must lie in [0, {params.slot_count}]")
    return used_slots / params.slot_count


def packed_to_bytes(packed: PackedTensor, params: HeParams) -> bytes:
    from .he.serialize import ciphertexts_to_bytes

    if not packed.encrypted:
        raise PackingError("only encrypted packs are serialized")
    meta = {"layout": packed.layout, "grid_shape": list(packed.grid.shape),
            "batch_size": packed.batch_size}
    return ciphertexts_to_bytes(packed.grid.flat, params, meta)


def packed_from_bytes(buf: bytes) -> tuple[PackedTensor, HeParams]:
    from .he.serialize import ciphertexts_from_bytes

    cts, params, meta = ciphertexts_from_bytes(buf)
    if meta.get("layout") != ELEMENTWISE:
        raise PackingError(f"unsupported layout tag {meta.get('layout')!r}")
    grid = _object_grid(tuple(meta["grid_shape"]), cts)
    return PackedTensor(grid, int(meta["batch_size"])), params
