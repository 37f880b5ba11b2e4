"""Homomorphic execution of a folded polynomial network over element-wise packs.

Under element-wise packing every ciphertext cell holds one feature position
for the whole batch, so a convolution is a weighted sum of cells with scalar
plaintext weights and a polynomial activation is evaluated cell by cell with
scalar coefficients.  No rotations are needed.

Lowering turns a network into a flat list of stages:

* ``ConvStage``: ``sum cmult(x, w)``, one rescale, ``add_plain(bias)``.  1 level.
* ``PolyStage``: ``c1*x^2 + c2*x + c3`` per cell.  2 levels.
* ``ScaleShiftStage``: per-channel ``a*x + t`` that could not be merged.  1 level.
* ``PoolStage``: sum of cells; the averaging factor is folded elsewhere.  0 levels.

Batch-norm affines and pooling factors are folded into neighbouring stages
so the usual conv -> activation -> BN chain costs 3 levels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .activation import expand_coeffs
from .he.backend import Ciphertext, HeBackend, HeError, KeySet, LevelError
from .he.params import HeParams
from .model import (
    Affine,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Fire,
    GlobalAvgPool,
    Network,
    PolyAct,
    ReLU,
)
from .packing import PackedTensor, PackingError

STAGE_DEPTH = {"conv": 1, "poly": 2, "scaleshift": 1, "pool": 0}


class CompileError(HeError):
    pass


class PlanMismatchError(HeError):
    """Runtime level or scale differs from the compiled prediction."""


# -- stages ---------------------------------------------------------------
@dataclass
class Stage:
    name: str
    in_shape: tuple = ()
    out_shape: tuple = ()
    in_level: int = -1
    in_scale: float = 0.0
    out_level: int = -1
    out_scale: float = 0.0

    kind = "stage"

    @property
    def depth(self) -> int:
        return STAGE_DEPTH[self.kind]


@dataclass
class ConvStage(Stage):
    weight: np.ndarray = None
    bias: np.ndarray = None
    stride: int = 1
    padding: int = 0

    kind = "conv"

    def shape_out(self, shape):
        c, h, w = shape
        o, ci, k, _ = self.weight.shape
        if ci != c:
            raise CompileError(f"{self.name}: expects {ci} channels, got {c}")
        s, p = self.stride, self.padding
        return (o, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def terms(self, o, i, j, in_shape):
        """Nonzero ``(weight, (c, y, x))`` contributions to output cell ``(o, i, j)``."""
        _, h, w = in_shape
        k = self.weight.shape[2]
        out = []
        for c in range(self.weight.shape[1]):
            for a in range(k):
                y = i * self.stride + a - self.padding
                if not 0 <= y < h:
                    continue
                for b in range(k):
                    x = j * self.stride + b - self.padding
                    if 0 <= x < w and self.weight[o, c, a, b] != 0:
                        out.append((float(self.weight[o, c, a, b]), (c, y, x)))
        return out

    def term_counts(self) -> np.ndarray:
        """Number of nonzero contributions to every output cell."""
        mask = Conv2d(self.weight.shape[1], self.weight.shape[0], self.weight.shape[2],
                      self.stride, self.padding, (self.weight != 0).astype(np.float64),
                      np.zeros(self.weight.shape[0]))
        counts = mask.forward(np.ones((1,) + tuple(self.in_shape)))[0][0]
        return np.rint(counts).astype(np.int64)

    def plain(self, x):
        layer = Conv2d(self.weight.shape[1], self.weight.shape[0], self.weight.shape[2],
                       self.stride, self.padding, self.weight, self.bias)
        return layer.forward(x)[0]


@dataclass
class PolyStage(Stage):
    coeffs: np.ndarray = None  # (n, H, W, 3)

    kind = "poly"

    def shape_out(self, shape):
        if tuple(shape) != self.coeffs.shape[:3]:
            raise CompileError(f"{self.name}: coefficients {self.coeffs.shape} do not fit {shape}")
        return tuple(shape)

    def plain(self, x):
        c = self.coeffs
        return (c[..., 0] * x + c[..., 1]) * x + c[..., 2]


@dataclass
class ScaleShiftStage(Stage):
    scale: np.ndarray = None
    shift: np.ndarray = None

    kind = "scaleshift"

    def shape_out(self, shape):
        if shape[0] != len(self.scale):
            raise CompileError(f"{self.name}: {len(self.scale)} channels, got {shape[0]}")
        return tuple(shape)

    def plain(self, x):
        return x * self.scale[:, None, None] + self.shift[:, None, None]


@dataclass
class PoolStage(Stage):
    window: int = 2
    stride: int = 2
    global_pool: bool = False
    factor: float = 1.0  # averaging factor still to be folded

    kind = "pool"

    def geometry(self, shape):
        _, h, w = shape
        if self.global_pool:
            return (h, w), (h, w)
        return (self.window, self.window), (self.stride, self.stride)

    def shape_out(self, shape):
        c, h, w = shape
        (kh, kw), (sh, sw) = self.geometry(shape)
        if h < kh or w < kw:
            raise CompileError(f"{self.name}: pool window larger than input {shape}")
        return (c, (h - kh) // sh + 1, (w - kw) // sw + 1)

    def cells(self, i, j, shape):
        (kh, kw), (sh, sw) = self.geometry(shape)
        return [(i * sh + a, j * sw + b) for a in range(kh) for b in range(kw)]

    def plain(self, x):
        ho, wo = self.shape_out(x.shape[1:])[1:]
        out = np.zeros(x.shape[:2] + (ho, wo))
        for i in range(ho):
            for j in range(wo):
                for (y, xx) in self.cells(i, j, x.shape[1:]):
                    out[:, :, i, j] += x[:, :, y, xx]
        return out * self.factor


def _per_channel(v, ndim_extra):
    return v.reshape((-1,) + (1,) * ndim_extra)


# -- lowering -------------------------------------------------------------
def _flatten(net: Network):
    """Network layers -> stage list; affines are kept as tuples for merging."""
    items = []

    def visit(name, layer):
        if isinstance(layer, Conv2d):
            items.append(ConvStage(name, weight=np.array(layer.params["W"], dtype=np.float64),
                                   bias=np.array(layer.params["b"], dtype=np.float64),
                                   stride=layer.stride, padding=layer.padding))
        elif isinstance(layer, PolyAct):
            items.append(PolyStage(name, coeffs=expand_coeffs(layer.activation,
                                                              layer.feature_shape).astype(np.float64)))
        elif isinstance(layer, Affine):
            items.append(("affine", name, np.array(layer.params["scale"], dtype=np.float64),
                          np.array(layer.params["shift"], dtype=np.float64)))
        elif isinstance(layer, AvgPool2d):
            items.append(PoolStage(name, window=layer.window, stride=layer.stride,
                                   factor=1.0 / layer.window ** 2))
        elif isinstance(layer, GlobalAvgPool):
            items.append(PoolStage(name, global_pool=True, factor=None))
        elif isinstance(layer, Fire):
            for n, child in layer.squeeze:
                visit(f"{name}.{n}", child)
            e1, e3 = layer.expand1x1, layer.expand3x3
            if e1.kernel != 1 or e1.padding != 0 or e3.kernel != 3 or e3.padding != 1 \
                    or e1.stride != 1 or e3.stride != 1:
                raise CompileError(f"{name}: only 1x1/pad0 and 3x3/pad1 expand branches are supported")
            w1 = np.zeros((e1.out_ch, e1.in_ch, 3, 3))
            w1[:, :, 1, 1] = e1.params["W"][:, :, 0, 0]
            items.append(ConvStage(f"{name}.expand", weight=np.concatenate([w1, e3.params["W"]]),
                                   bias=np.concatenate([e1.params["b"], e3.params["b"]]),
                                   stride=1, padding=1))
            for n, child in layer.post:
                visit(f"{name}.{n}", child)
        elif isinstance(layer, BatchNorm2d):
            raise CompileError(f"{name}: batch norm must be folded before compilation")
        elif isinstance(layer, ReLU):
            raise CompileError(f"{name}: ReLU cannot be evaluated homomorphically")
        else:
            raise CompileError(f"{name}: unsupported layer {type(layer).__name__}")

    for name, layer in net.layers:
        visit(name, layer)
    return items


def _neighbour(items, i, step):
    j = i + step
    while 0 <= j < len(items) and isinstance(items[j], PoolStage):
        j += step
    return j if 0 <= j < len(items) else None


def _scale_stage_output(st, s, t=None):
    """Make stage ``st`` produce ``s*y + t`` (per channel) instead of ``y``."""
    t = np.zeros_like(s) if t is None else t
    if isinstance(st, ConvStage):
        st.weight = st.weight * _per_channel(s, 3)
        st.bias = st.bias * s + t
    elif isinstance(st, PolyStage):
        st.coeffs = st.coeffs * _per_channel(s, 3)
        st.coeffs[..., 2] += _per_channel(t, 2)
    elif isinstance(st, ScaleShiftStage):
        st.scale = st.scale * s
        st.shift = st.shift * s + t
    else:
        return False
    return True


def _absorb_input_affine(st, s, t):
    """Make stage ``st`` consume ``s*x + t`` when fed ``x``; False if impossible."""
    if isinstance(st, PolyStage):
        c1, c2, c3 = (st.coeffs[..., j] for j in range(3))
        s3, t3 = _per_channel(s, 2), _per_channel(t, 2)
        st.coeffs = np.stack([c1 * s3 * s3, 2 * c1 * s3 * t3 + c2 * s3,
                              c1 * t3 * t3 + c2 * t3 + c3], axis=-1)
        return True
    if isinstance(st, ConvStage) and (st.padding == 0 or not np.any(t)):
        st.bias = st.bias + np.einsum("ocab,c->o", st.weight, t)
        st.weight = st.weight * s[None, :, None, None]
        return True
    if isinstance(st, ScaleShiftStage):
        st.shift = st.shift + st.scale * t
        st.scale = st.scale * s
        return True
    return False


def lower(net: Network, input_shape=None) -> list[Stage]:
    """Folded network -> stages with batch-norm affines and pool factors absorbed."""
    items = _flatten(net)
    shape = tuple(input_shape or net.input_shape)
    # Per-channel affines commute with average pooling, so they may hop over pools.
    i = 0
    while i < len(items):
        it = items[i]
        if isinstance(it, tuple):
            _, name, s, t = it
            j = _neighbour(items, i, -1)
            if j is not None and _scale_stage_output(items[j], s, t):
                del items[i]
                continue
            k = _neighbour(items, i, +1)
            if j is None and k is not None and _absorb_input_affine(items[k], s, t):
                del items[i]
                continue
            items[i] = ScaleShiftStage(name, scale=s, shift=t)
        i += 1
    # Resolve global pool factors and set shapes.
    for st in items:
        st.in_shape = shape
        if isinstance(st, PoolStage) and st.global_pool:
            st.factor = 1.0 / (shape[1] * shape[2])
        shape = st.shape_out(shape)
        st.out_shape = shape
    # Fold averaging factors (a scalar commutes with pools and channels).
    for i, st in enumerate(list(items)):
        if not isinstance(st, PoolStage) or st.factor == 1.0:
            continue
        f = st.factor
        n = st.in_shape[0]
        j = _neighbour(items, i, -1)
        if j is not None and _scale_stage_output(items[j], np.full(n, f)):
            st.factor = 1.0
            continue
        k = _neighbour(items, i, +1)
        if j is None and k is not None:
            nk = items[k].in_shape[0]
            if _absorb_input_affine(items[k], np.full(nk, f), np.zeros(nk)):
                st.factor = 1.0
    out = []
    for st in items:
        out.append(st)
        if isinstance(st, PoolStage) and st.factor != 1.0:
            c = st.out_shape[0]
            extra = ScaleShiftStage(f"{st.name}.scale", scale=np.full(c, st.factor),
                                    shift=np.zeros(c), in_shape=st.out_shape, out_shape=st.out_shape)
            st.factor = 1.0
            out.append(extra)
    return out


def run_stages_plain(stages, batch) -> np.ndarray:
    """Evaluate lowered stages on an ``(M, n, H, W)`` batch in float64."""
    x = np.asarray(batch, dtype=np.float64)
    for st in stages:
        x = st.plain(x)
    return x


# -- plan -----------------------------------------------------------------
@dataclass(frozen=True)
class Instruction:
    op: str
    stage: int
    cell: tuple
    level: int
    out_level: int
    out_scale: float


@dataclass
class HePlan:
    stages: list
    input_shape: tuple
    num_classes: int
    input_level: int
    input_scale: float
    params: HeParams
    depth: int
    counts: dict = field(default_factory=dict)

    @property
    def output_level(self) -> int:
        return self.stages[-1].out_level if self.stages else self.input_level

    @property
    def output_scale(self) -> float:
        return self.stages[-1].out_scale if self.stages else self.input_scale

    @property
    def output_shape(self) -> tuple:
        return self.stages[-1].out_shape if self.stages else self.input_shape

    def stage_levels(self) -> list[tuple]:
        return [(st.name, st.kind, st.in_level, st.out_level, st.out_scale) for st in self.stages]

    def instructions(self):
        """Expand the plan into cell-level instructions, grouped by phase.

        Within a stage all cells run one phase before the next, so the level
        field never increases along the stream.
        """
        chain = self.params.modulus_chain
        for si, st in enumerate(self.stages):
            lv, s = st.in_level, st.in_scale
            cells = list(np.ndindex(*st.out_shape))
            if st.kind == "conv":
                q = chain[lv]
                terms = {c: st.terms(*c, st.in_shape) or [(0.0, None)] for c in cells}
                for c in cells:
                    for _ in terms[c]:
                        yield Instruction("cmult", si, c, lv, lv, s * q)
                for c in cells:
                    for _ in range(len(terms[c]) - 1):
                        yield Instruction("add", si, c, lv, lv, s * q)
                for c in cells:
                    yield Instruction("rescale", si, c, lv, lv - 1, st.out_scale)
                for c in cells:
                    yield Instruction("add_plain", si, c, lv - 1, lv - 1, st.out_scale)
            elif st.kind == "poly":
                x2 = (s * s) / chain[lv]
                for op, l_in, l_out, sc in (
                        ("mult", lv, lv, s * s), ("cmult", lv, lv, s * s),
                        ("rescale", lv, lv - 1, x2), ("rescale", lv, lv - 1, x2),
                        ("cmult", lv - 1, lv - 1, x2 * chain[lv - 1]),
                        ("mod_down", lv - 1, lv - 2, x2),
                        ("rescale", lv - 1, lv - 2, st.out_scale),
                        ("add", lv - 2, lv - 2, st.out_scale),
                        ("add_plain", lv - 2, lv - 2, st.out_scale)):
                    for c in cells:
                        yield Instruction(op, si, c, l_in, l_out, sc)
            elif st.kind == "scaleshift":
                for op, l_in, l_out, sc in (("cmult", lv, lv, s * chain[lv]),
                                            ("rescale", lv, lv - 1, st.out_scale),
                                            ("add_plain", lv - 1, lv - 1, st.out_scale)):
                    for c in cells:
                        yield Instruction(op, si, c, l_in, l_out, sc)
            else:
                for c in cells:
                    for _ in range(len(st.cells(c[1], c[2], st.in_shape)) - 1):
                        yield Instruction("add", si, c, lv, lv, s)


def stage_counts(st) -> dict:
    cells = int(np.prod(st.out_shape))
    if st.kind == "conv":
        n_terms = int(np.maximum(st.term_counts(), 1).sum())
        return {"cmult": n_terms, "add": n_terms - cells, "rescale": cells, "add_plain": cells}
    if st.kind == "poly":
        return {"mult": cells, "cmult": 2 * cells, "rescale": 3 * cells, "mod_down": cells,
                "add": cells, "add_plain": cells}
    if st.kind == "scaleshift":
        return {"cmult": cells, "rescale": cells, "add_plain": cells}
    per = len(st.cells(0, 0, st.in_shape)) - 1
    return {"add": per * cells}


OP_NAMES = ("add", "add_plain", "cmult", "mult", "rescale", "mod_down", "rot")


def plan_depth(stages) -> int:
    return sum(st.depth for st in stages)


def compile_plan(net: Network, params: HeParams, input_scale: float | None = None,
                 input_level: int | None = None) -> HePlan:
    """Lower ``net`` and predict the level and scale after every stage.

    The input is expected at ``input_level`` (default: exactly the plan depth,
    so no level is wasted).  Raises :class:`CompileError` naming the first
    stage that would run out of levels.
    """
    stages = lower(net)
    depth = plan_depth(stages)
    if input_level is None:
        input_level = min(depth, params.max_level)
    if not 0 <= input_level <= params.max_level:
        raise CompileError(f"input level {input_level} outside [0, {params.max_level}]")
    scale = in_scale = float(params.default_scale if input_scale is None else input_scale)
    chain = params.modulus_chain
    lv = input_level
    counts = {k: 0 for k in OP_NAMES}
    for st in stages:
        if lv - st.depth < 0:
            raise CompileError(
                f"stage {st.name!r} ({st.kind}) needs {st.depth} level(s) but only {lv} remain; "
                f"the plan needs {depth} levels and the modulus chain provides {params.max_level}")
        st.in_level, st.in_scale = lv, scale
        if st.kind in ("conv", "scaleshift"):
            scale = (scale * chain[lv]) / chain[lv]
        elif st.kind == "poly":
            x2 = (scale * scale) / chain[lv]
            scale = (x2 * chain[lv - 1]) / chain[lv - 1]
        lv -= st.depth
        st.out_level, st.out_scale = lv, scale
        for k, v in stage_counts(st).items():
            counts[k] += v
    if stages and stages[-1].out_shape[1:] != (1, 1):
        raise CompileError("network must end in global pooling (1x1 output cells)")
    return HePlan(stages, tuple(net.input_shape), net.num_classes, input_level, in_scale, params,
                  depth, counts)


# -- execution ------------------------------------------------------------
def _check(ct: Ciphertext, level, scale, where):
    if ct.level != level or ct.scale != scale:
        raise PlanMismatchError(f"{where}: runtime (level {ct.level}, scale {ct.scale!r}) differs "
                                f"from prediction (level {level}, scale {scale!r})")


def _exec_conv(st: ConvStage, grid, be: HeBackend):
    lv, q = st.in_level, be.params.modulus_chain[st.in_level]
    out = np.empty(st.out_shape, dtype=object)
    for cell in np.ndindex(*st.out_shape):
        terms = st.terms(*cell, st.in_shape)
        if not terms:
            terms = [(0.0, (0, min(cell[1], st.in_shape[1] - 1), min(cell[2], st.in_shape[2] - 1)))]
        acc = None
        for w, src in terms:
            t = be.cmult(grid[src], be.encode_scalar(w, scale=q, level=lv))
            acc = t if acc is None else be.add(acc, t)
        acc = be.rescale(acc)
        out[cell] = be.add_plain(acc, be.encode_scalar(float(st.bias[cell[0]]), scale=acc.scale,
                                                       level=acc.level))
    return out


def _exec_poly(st: PolyStage, grid, be: HeBackend, keys):
    lv = st.in_level
    chain = be.params.modulus_chain
    out = np.empty(st.out_shape, dtype=object)
    for cell in np.ndindex(*st.out_shape):
        x = grid[cell]
        c1, c2, c3 = (float(v) for v in st.coeffs[cell])
        x2 = be.rescale(be.mult(x, x, keys))
        lin = be.rescale(be.cmult(x, be.encode_scalar(c2, scale=x.scale, level=lv)))
        quad = be.rescale(be.cmult(x2, be.encode_scalar(c1, scale=chain[lv - 1], level=lv - 1)))
        lin = be.mod_down_to(lin, lv - 2)
        y = be.add(quad, lin)
        out[cell] = be.add_plain(y, be.encode_scalar(c3, scale=y.scale, level=y.level))
    return out


def _exec_scaleshift(st: ScaleShiftStage, grid, be: HeBackend):
    lv, q = st.in_level, be.params.modulus_chain[st.in_level]
    out = np.empty(st.out_shape, dtype=object)
    for cell in np.ndindex(*st.out_shape):
        c = cell[0]
        y = be.rescale(be.cmult(grid[cell], be.encode_scalar(float(st.scale[c]), scale=q, level=lv)))
        out[cell] = be.add_plain(y, be.encode_scalar(float(st.shift[c]), scale=y.scale, level=y.level))
    return out


def _exec_pool(st: PoolStage, grid, be: HeBackend):
    out = np.empty(st.out_shape, dtype=object)
    for cell in np.ndindex(*st.out_shape):
        c = cell[0]
        acc = None
        for (y, x) in st.cells(cell[1], cell[2], st.in_shape):
            acc = grid[c, y, x] if acc is None else be.add(acc, grid[c, y, x])
        out[cell] = acc
    return out


def execute(plan: HePlan, packed: PackedTensor, backend: HeBackend, keys: KeySet | None = None,
            check: bool = True, progress=None) -> PackedTensor:
    """Run ``plan`` on an encrypted element-wise pack; returns the logit cells.

    Input cells above the plan's input level are first dropped to it.  With
    ``check`` every stage output is compared against the compiled level and
    scale.
    """
    if backend.params.modulus_chain != plan.params.modulus_chain or \
            backend.params.ring_degree != plan.params.ring_degree:
        raise HeError("backend parameters differ from the plan's parameters")
    if tuple(packed.grid.shape) != plan.input_shape:
        raise PackingError(f"pack grid {packed.grid.shape} does not match input {plan.input_shape}")
    if not packed.encrypted:
        raise PackingError("execute expects encrypted cells")
    grid = np.empty(packed.grid.shape, dtype=object)
    for cell in np.ndindex(*grid.shape):
        ct = packed.grid[cell]
        if ct.level < plan.input_level:
            raise LevelError(f"input at level {ct.level}, plan needs {plan.input_level}")
        if not backend.scales_match(ct.scale, plan.input_scale):
            raise HeError(f"input scale {ct.scale} differs from plan scale {plan.input_scale}")
        grid[cell] = backend.mod_down_to(ct, plan.input_level)
    for i, st in enumerate(plan.stages):
        if st.kind == "conv":
            grid = _exec_conv(st, grid, backend)
        elif st.kind == "poly":
            grid = _exec_poly(st, grid, backend, keys)
        elif st.kind == "scaleshift":
            grid = _exec_scaleshift(st, grid, backend)
        else:
            grid = _exec_pool(st, grid, backend)
        if check:
            for cell in np.ndindex(*grid.shape):
                _check(grid[cell], st.out_level, st.out_scale, f"stage {st.name!r} cell {cell}")
        if progress:
            progress(i, st)
    return PackedTensor(grid, packed.batch_size, packed.layout)


def decrypt_logits(result: PackedTensor, backend: HeBackend, keys: KeySet,
                   batch_size: int | None = None) -> np.ndarray:
    """Decrypted logits ``(M, num_classes)`` from the output cells."""
    m = result.batch_size if batch_size is None else int(batch_size)
    vals = [backend.decrypt_values(ct, keys)[:m] for ct in result.grid.flat]
    return np.stack(vals, axis=1)


def encrypted_inference(net: Network, batch, backend: HeBackend, keys: KeySet, seed=None,
                        plan: HePlan | None = None) -> np.ndarray:
    """Pack, encrypt, execute and decrypt in one call; returns logits ``(M, classes)``."""
    from .packing import encrypt_packed, pack_elementwise

    plan = plan or compile_plan(net, backend.params)
    packed = pack_elementwise(batch, backend, level=plan.input_level, scale=plan.input_scale)
    enc = encrypt_packed(packed, backend, keys, seed=seed)
    return decrypt_logits(execute(plan, enc, backend, keys), backend, keys)


def predicted_depth(net: Network) -> int:
    """Analytic depth: 1 per conv, 2 per activation, 1 per unmerged affine."""
    return plan_depth(lower(net))


def stage_summary(plan: HePlan) -> list[dict]:
    return [{"stage": st.name, "kind": st.kind, "in_shape": list(st.in_shape),
             "out_shape": list(st.out_shape), "in_level": st.in_level, "out_level": st.out_level,
             "log2_scale": math.log2(st.out_scale)} for st in plan.stages]
