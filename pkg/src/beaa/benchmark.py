"""Operation-count cost model and the batch-size benchmark harness.

Element-wise packing executes the same instruction stream for every batch
size up to N/2, so its total time is flat and the per-image (amortized) time
falls as 1/M.  Channel-wise packing needs one ciphertext per image channel
and rotations to line up convolution taps; that layout is costed
analytically only.
"""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .he.backend import HeBackend, KeySet
from .he.params import HeParams
from .inference import compile_plan, execute, lower, plan_depth, stage_counts
from .model import Network, fold_batchnorm, has_batchnorm
from .packing import CHANNELWISE, ELEMENTWISE, encrypt_packed, pack_elementwise

BENCH_COLUMNS = ("M", "layout", "total_s", "amortized_s", "add_count", "cmult_count",
                 "mult_count", "rot_count", "depth")
TIMED_OPS = ("add", "add_plain", "cmult", "mult", "rescale", "mod_down", "rot")


@dataclass(frozen=True)
class CostEstimate:
    M: int
    layout: str
    add: int
    cmult: int
    mult: int
    rot: int
    rescale: int
    depth: int
    total_s: float
    amortized_s: float

    def row(self) -> dict:
        return {"M": self.M, "layout": self.layout, "total_s": self.total_s,
                "amortized_s": self.amortized_s, "add_count": self.add,
                "cmult_count": self.cmult, "mult_count": self.mult, "rot_count": self.rot,
                "depth": self.depth}


def _channelwise_counts(stages) -> tuple[dict, int]:
    """Per-image op counts for rotation-based convolution over channel packs."""
    c = {k: 0 for k in TIMED_OPS}
    extra_depth = 0
    for st in stages:
        n, h, w = st.in_shape
        if st.kind == "conv":
            o, ci, k, _ = st.weight.shape
            taps = k * k
            c["rot"] += ci * (taps - 1)
            c["cmult"] += o * ci * taps
            c["add"] += o * (ci * taps - 1)
            c["rescale"] += o
            c["add_plain"] += o
        elif st.kind == "poly":
            c["mult"] += n
            c["cmult"] += 2 * n
            c["rescale"] += 3 * n
            c["mod_down"] += n
            c["add"] += n
            c["add_plain"] += n
        elif st.kind == "scaleshift":
            c["cmult"] += n
            c["rescale"] += n
            c["add_plain"] += n
        elif st.global_pool:
            steps = max(1, math.ceil(math.log2(h * w)))
            c["rot"] += n * steps
            c["add"] += n * steps
        else:
            taps = st.window * st.window
            c["rot"] += n * (taps - 1)
            c["add"] += n * (taps - 1)
            # mask keeping the strided positions
            c["cmult"] += n
            c["rescale"] += n
            extra_depth = extra_depth + 1
    return c, extra_depth


def estimate_cost(net: Network, params: HeParams, M: int, layout: str = ELEMENTWISE,
                  op_timings: dict | None = None) -> CostEstimate:
    """Static op counts and predicted time for a batch of ``M`` images.

    ``op_timings`` maps op names (``add``, ``cmult``, ``mult``, ``rescale``,
    ``rot`` ...) to seconds; missing ops cost nothing.  Amortized time is
    total / M.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    op_timings = op_timings or {}
    if has_batchnorm(net):
        net = fold_batchnorm(net)
    if layout == ELEMENTWISE:
        stages = lower(net)
        depth = plan_depth(stages)
        counts = {k: 0 for k in TIMED_OPS}
        for st in stages:
            for k, v in stage_counts(st).items():
                counts[k] += v
        packs = math.ceil(M / params.slot_count)
        counts = {k: v * packs for k, v in counts.items()}
    elif layout == CHANNELWISE:
        stages = lower(net)
        h, w = net.input_shape[1:]
        if h * w > params.slot_count:
            raise ValueError("image plane exceeds slot capacity for channel-wise packing")
        per_image, extra = _channelwise_counts(stages)
        counts = {k: v * M for k, v in per_image.items()}
        depth = plan_depth(stages) + extra
    else:
        raise ValueError(f"unknown layout {layout!r}")
    counts.setdefault("rot", 0)
    total = float(sum(counts.get(k, 0) * float(t) for k, t in op_timings.items()))
    return CostEstimate(M, layout, counts.get("add", 0) + counts.get("add_plain", 0),
                        counts.get("cmult", 0), counts.get("mult", 0), counts.get("rot", 0),
                        counts.get("rescale", 0), depth, total, total / M)


def measure_op_timings(backend: HeBackend, keys: KeySet, level: int | None = None,
                       repeats: int = 5, seed: int = 0) -> dict:
    """Median wall time of each primitive at ``level`` (default: a mid-chain level)."""
    rng = np.random.default_rng(seed)
    level = max(2, backend.params.max_level // 2) if level is None else level
    vals = rng.uniform(-1, 1, backend.slot_count)
    pt = backend.encode(vals, level=level)
    a = backend.encrypt(pt, keys, seed=rng)
    b = backend.encrypt(pt, keys, seed=rng)
    w = backend.encode_scalar(0.5, scale=backend.params.modulus_chain[level], level=level)
    prod = backend.cmult(a, w)
    ops = {
        "add": lambda: backend.add(a, b),
        "add_plain": lambda: backend.add_plain(a, pt),
        "cmult": lambda: backend.cmult(a, w),
        "mult": lambda: backend.mult(a, b, keys),
        "rescale": lambda: backend.rescale(prod),
        "mod_down": lambda: backend.mod_down_to(a, level - 1),
    }
    if 1 in keys.rotation_keys:
        ops["rot"] = lambda: backend.rotate(a, 1, keys)
    out = {}
    for name, fn in ops.items():
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        out[name] = statistics.median(times)
    return out


def run_benchmark(net: Network, backend: HeBackend, keys: KeySet, batch_sizes, repeats: int = 1,
                  seed: int = 0, channelwise: bool = True, op_timings: dict | None = None,
                  log=None) -> list[dict]:
    """Measure encrypted element-wise inference for each M; add channel-wise estimates.

    Element-wise rows are measured wall time of :func:`execute` (median over
    ``repeats``), excluding packing and encryption.  Channel-wise rows come
    from :func:`estimate_cost` with measured per-op timings.
    """
    plan = compile_plan(net, backend.params)
    rng = np.random.default_rng(seed)
    sizes = [int(m) for m in batch_sizes]
    inputs = {}
    for m in sizes:
        if m > backend.slot_count:
            raise ValueError(f"M={m} exceeds slot capacity {backend.slot_count}")
        batch = rng.normal(0.0, 1.0, size=(m,) + tuple(net.input_shape))
        packed = pack_elementwise(batch, backend, level=plan.input_level, scale=plan.input_scale)
        inputs[m] = encrypt_packed(packed, backend, keys, seed=rng)
    # Round-robin over M so slow drift of the machine hits every size alike.
    times = {m: [] for m in sizes}
    for _ in range(repeats):
        for m in sizes:
            t0 = time.perf_counter()
            execute(plan, inputs[m], backend, keys, check=False)
            times[m].append(time.perf_counter() - t0)
    rows = []
    c = plan.counts
    for m in sizes:
        total = statistics.median(times[m])
        row = {"M": m, "layout": ELEMENTWISE, "total_s": total, "amortized_s": total / m,
               "add_count": c["add"] + c["add_plain"], "cmult_count": c["cmult"],
               "mult_count": c["mult"], "rot_count": c["rot"], "depth": plan.depth}
        rows.append(row)
        if log:
            log(row)
    if channelwise:
        timings = op_timings or measure_op_timings(backend, keys, seed=seed)
        for m in batch_sizes:
            est = estimate_cost(net, backend.params, int(m), CHANNELWISE, timings)
            rows.append(est.row())
            if log:
                log(est.row())
    return rows


def write_benchmark_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in BENCH_COLUMNS})


def read_benchmark_csv(path) -> list[dict]:
    ints = {"M", "add_count", "cmult_count", "mult_count", "rot_count", "depth"}
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ints else v if k == "layout" else float(v))
                 for k, v in r.items()} for r in csv.DictReader(fh)]


def scaling_summary(rows, layout=ELEMENTWISE) -> dict:
    """Total-time spread and amortized-time ratio between the smallest and largest M."""
    sel = sorted((r for r in rows if r["layout"] == layout), key=lambda r: r["M"])
    if len(sel) < 2:
        raise ValueError("need at least two batch sizes")
    totals = [r["total_s"] for r in sel]
    return {"batch_sizes": [r["M"] for r in sel],
            "total_variation": (max(totals) - min(totals)) / min(totals),
            "amortized_ratio": sel[-1]["amortized_s"] / sel[0]["amortized_s"]}

