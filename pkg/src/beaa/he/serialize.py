"""HE parameters, keys and ciphertexts in the BEAA container format."""
from __future__ import annotations

import numpy as np

from .. import container
from .backend import Ciphertext, HeError, KeySet, params_fingerprint
from .params import HeParams


def save_params(path, params: HeParams) -> None:
    container.save(path, "he-params", {"params": params.to_dict()})


def load_params(path) -> HeParams:
    _, meta, _ = container.load(path, "he-params")
    return HeParams.from_dict(meta["params"])


def save_keys(path, keys: KeySet, params: HeParams, part: str = "public") -> None:
    """Write the ``"public"`` or ``"secret"`` half of a key set."""
    meta = {"params": params.to_dict(), "backend": keys.backend, "part": part,
            "fingerprint": keys.params_fingerprint}
    arrays = {}
    real = keys.backend == "ckks"
    if part == "secret":
        if not keys.has_secret:
            raise HeError("key set has no secret key")
        if real:
            arrays["secret"] = keys.secret_key.astype(np.int8)
    elif part == "public":
        meta["rotation_steps"] = keys.rotation_steps
        meta["has_public"] = keys.public_key is not None
        meta["has_relin"] = keys.relin_key is not None
        if real:
            if keys.public_key is not None:
                arrays["pk_b"], arrays["pk_a"] = keys.public_key
            if keys.relin_key is not None:
                arrays["relin_b"], arrays["relin_a"] = keys.relin_key
            for k, (b, a) in keys.rotation_keys.items():
                arrays[f"rot{k}_b"], arrays[f"rot{k}_a"] = b, a
    else:
        raise ValueError("part must be 'public' or 'secret'")
    container.save(path, "he-keys", meta, arrays)


def load_keys(public_path, secret_path=None) -> tuple[KeySet, HeParams]:
    _, meta, arrays = container.load(public_path, "he-keys")
    if meta["part"] != "public":
        raise HeError(f"{public_path} does not hold public keys")
    params = HeParams.from_dict(meta["params"])
    backend = meta["backend"]
    real = backend == "ckks"
    marker = ("sim",)
    pk = relin = None
    if meta["has_public"]:
        pk = (arrays["pk_b"], arrays["pk_a"]) if real else marker
    if meta["has_relin"]:
        relin = (arrays["relin_b"], arrays["relin_a"]) if real else marker
    rot = {int(k): ((arrays[f"rot{k}_b"], arrays[f"rot{k}_a"]) if real else marker)
           for k in meta["rotation_steps"]}
    secret = None
    if secret_path is not None:
        _, smeta, sarr = container.load(secret_path, "he-keys")
        if smeta["part"] != "secret" or smeta["fingerprint"] != meta["fingerprint"]:
            raise HeError("secret key file does not match the public keys")
        secret = sarr["secret"].astype(np.int64) if real else np.zeros(0)
    if meta["fingerprint"] != params_fingerprint(params):
        raise HeError("key file fingerprint does not match its parameters")
    return KeySet(backend, meta["fingerprint"], secret, pk, relin, rot), params


def ciphertexts_to_bytes(cts, params: HeParams, meta: dict | None = None) -> bytes:
    cts = list(cts)
    info = [{"level": c.level, "scale": c.scale, "backend": c.backend} for c in cts]
    arrays = {f"ct{i}": c.data for i, c in enumerate(cts)}
    m = {"params": params.to_dict(), "ciphertexts": info}
    m.update(meta or {})
    return container.dumps("ciphertexts", m, arrays)


def ciphertexts_from_bytes(buf: bytes):
    """Return ``(ciphertexts, params, meta)``."""
    _, meta, arrays = container.loads(buf, "ciphertexts")
    params = HeParams.from_dict(meta["params"])
    cts = [Ciphertext(arrays[f"ct{i}"], int(c["level"]), float(c["scale"]),
                      params.slot_count, c["backend"])
           for i, c in enumerate(meta["ciphertexts"])]
    return cts, params, meta


def save_ciphertexts(path, cts, params: HeParams, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(ciphertexts_to_bytes(cts, params, meta))


def load_ciphertexts(path):
    with open(path, "rb") as fh:
        return ciphertexts_from_bytes(fh.read())
