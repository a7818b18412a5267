"""Kernel registry: op schemas, kernel signatures per engine kind, tile
constraint specifications and the shared operand-slicing rules.

The registry is the single source of truth for what each operator means
geometrically: which dimensions must stay whole (reduction/normalization
axes), which tile dims must agree between operands, which dims an engine
requires to be aligned (the NPU's output-channel granularity), and how an
output tile maps to operand tiles. Planner, simulator and code generator all
consume the same rules, so a tiling admitted here stitches back to the
untiled result exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .numpy_impl import KernelError

NPU_COUT_ALIGN = 32

# op -> (num inputs, num outputs, required attrs)
OP_SCHEMAS: dict[str, tuple[int, int, tuple[str, ...]]] = {
    "gemm": (3, 1, ("transB",)),
    "gemm_q8": (3, 1, ("transB", "mul", "shift", "zp")),
    "conv1x1_q8": (3, 1, ("mul", "shift", "zp")),
    "bmm_i32": (2, 1, ()),
    "bmm_requant": (2, 1, ("mul", "shift", "zp")),
    "requant": (1, 1, ("mul", "shift", "zp")),
    "softmax_i": (1, 1, ("x0_q", "b_q", "c_q", "out_bits")),
    "rmsnorm_i": (2, 1, ("eps_q", "kshift", "mul", "shift", "zp")),
    "rope_q": (3, 1, ("pos", "mul", "shift", "zp")),
    "hardswish_q": (1, 1, ("three_q", "six_q", "mul", "shift", "zp")),
    "add_requant": (2, 1, ("mul", "shift", "zp")),
    "mul_requant": (2, 1, ("mul", "shift", "zp")),
    "causal_mask": (1, 1, ("past",)),
    "transpose": (1, 1, ("perm",)),
    "gather_rows": (2, 1, ()),
    "concat_seq": (2, 1, ()),
    "reshape": (1, 1, ("shape",)),
}

MATMUL_OPS = ("gemm", "gemm_q8", "conv1x1_q8", "bmm_i32", "bmm_requant")


def check_node_schema(op: str, n_in: int, n_out: int, attrs: dict) -> None:
    if op not in OP_SCHEMAS:
        raise KernelError(f"unknown op kind {op!r}")
    want_in, want_out, want_attrs = OP_SCHEMAS[op]
    if n_in != want_in or n_out != want_out:
        raise KernelError(f"{op}: expects {want_in} inputs / {want_out} outputs, got {n_in}/{n_out}")
    missing = [a for a in want_attrs if a not in attrs]
    if missing:
        raise KernelError(f"{op}: missing attrs {missing}")


def infer_out_shape(op: str, in_shapes: list[tuple[int, ...]], attrs: dict) -> tuple[int, ...]:
    """Shape rule per op; raises KernelError on operand mismatch."""
    s = in_shapes
    if op in ("gemm", "gemm_q8"):
        a, b = s[0], s[1]
        if len(a) != 2 or len(b) != 2:
            raise KernelError(f"{op}: operands must be 2-D, got {a} x {b}")
        trans_b = int(attrs.get("transB", 0))
        n = b[1] if trans_b else b[0]
        o = b[0] if trans_b else b[1]
        if a[1] != n:
            raise KernelError(f"{op}: reduction mismatch {a} x {b} (transB={trans_b})")
        return (a[0], o)
    if op == "conv1x1_q8":
        x, w = s[0], s[1]
        if len(w) != 4 or w[1] != 1 or w[2] != 1 or len(x) != 2 or x[1] != w[3]:
            raise KernelError(f"{op}: bad operand shapes {x} x {w}")
        return (x[0], w[0])
    if op in ("bmm_i32", "bmm_requant"):
        a, b = s[0], s[1]
        if len(a) != 3 or len(b) != 3 or a[0] != b[0] or a[2] != b[1]:
            raise KernelError(f"{op}: bad operand shapes {a} x {b}")
        return (a[0], a[1], b[2])
    if op in ("requant", "softmax_i", "hardswish_q", "causal_mask", "rope_q"):
        return s[0]
    if op == "rmsnorm_i":
        if len(s[1]) != 1 or s[1][0] != s[0][-1]:
            raise KernelError(f"{op}: weight {s[1]} does not match axis {s[0]}")
        return s[0]
    if op in ("add_requant", "mul_requant"):
        if s[0] != s[1]:
            raise KernelError(f"{op}: shape mismatch {s[0]} vs {s[1]}")
        return s[0]
    if op == "transpose":
        perm = tuple(attrs["perm"])
        if sorted(perm) != list(range(len(s[0]))):
            raise KernelError(f"{op}: invalid permutation {perm} for rank {len(s[0])}")
        return tuple(s[0][p] for p in perm)
    if op == "gather_rows":
        t, i = s[0], s[1]
        if len(t) != 2 or len(i) != 1:
            raise KernelError(f"{op}: expects table [V, D] and idx [S], got {t}, {i}")
        return (i[0], t[1])
    if op == "concat_seq":
        a, b = s[0], s[1]
        if len(a) != len(b) or a[1:] != b[1:]:
            raise KernelError(f"{op}: trailing dims differ {a} vs {b}")
        return (a[0] + b[0],) + tuple(a[1:])
    if op == "reshape":
        shape = tuple(int(v) for v in attrs["shape"])
        n = 1
        for d in s[0]:
            n *= d
        m = 1
        for d in shape:
            m *= d
        if n != m:
            raise KernelError(f"{op}: {s[0]} -> {shape} changes element count")
        return shape
    raise KernelError(f"unknown op kind {op!r}")


def infer_out_dtype(op: str, in_dtypes: list[str]) -> str:
    if op in ("gemm", "bmm_i32"):
        return "int32"
    if op in ("transpose", "reshape", "concat_seq"):
        return in_dtypes[0]
    if op == "gather_rows":
        return in_dtypes[0]
    return "int8"


# ---------------------------------------------------------------------------
# Kernel signatures and templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSignature:
    op: str
    engine_kind: str
    in_dtypes: tuple[str, ...]   # dtype name per input; "*" matches any
    out_dtypes: tuple[str, ...]  # "=0" means same dtype as input 0

    def matches(self, in_dtypes: list[str]) -> bool:
        if len(in_dtypes) != len(self.in_dtypes):
            return False
        return all(w == "*" or w == g for w, g in zip(self.in_dtypes, in_dtypes))

    def resolve_out(self, in_dtypes: list[str]) -> tuple[str, ...]:
        return tuple(in_dtypes[0] if d == "=0" else d for d in self.out_dtypes)


@dataclass(frozen=True)
class KernelTemplate:
    kid: str
    signature: KernelSignature
    work_class: str                    # throughput bucket: "matmul" | "default"
    c_name: str
    passes: tuple[str, ...] = ("instantiate", "bind_pointers", "tile_loop", "closure")


def _sig(op: str, kind: str, ins: tuple[str, ...], outs: tuple[str, ...]) -> KernelSignature:
    return KernelSignature(op, kind, ins, outs)


def _build_registry() -> list[KernelTemplate]:
    # One C body per op; the engine only changes offload wrapping and the
    # cycle model. Registration order inside one engine kind is the
    # signature-match preference order.
    defs = [
        ("gemm", ("int8", "int8", "int32"), ("int32",), "matmul"),
        ("gemm_q8", ("int8", "int8", "int32"), ("int8",), "matmul"),
        ("conv1x1_q8", ("int8", "int8", "int32"), ("int8",), "matmul"),
        ("bmm_i32", ("int8", "int8"), ("int32",), "matmul"),
        ("bmm_requant", ("int8", "int8"), ("int8",), "matmul"),
        ("requant", ("int32",), ("int8",), "default"),
        ("softmax_i", ("int8",), ("int8",), "default"),
        ("rmsnorm_i", ("int8", "int8"), ("int8",), "default"),
        ("rope_q", ("int8", "int16", "int16"), ("int8",), "default"),
        ("hardswish_q", ("int8",), ("int8",), "default"),
        ("add_requant", ("int8", "int8"), ("int8",), "default"),
        ("mul_requant", ("int8", "int8"), ("int8",), "default"),
        ("causal_mask", ("int8",), ("int8",), "default"),
        ("transpose", ("*",), ("=0",), "default"),
        ("concat_seq", ("*", "*"), ("=0",), "default"),
        ("reshape", ("*",), ("=0",), "default"),
    ]
    reg: list[KernelTemplate] = []
    for kind, tag in (("scalar-core", "host"), ("multi-core-cluster", "cluster"),
                      ("conv-npu", "npu")):
        for op, ins, outs, wclass in defs:
            if kind == "conv-npu" and op != "conv1x1_q8":
                continue
            reg.append(KernelTemplate(
                kid=f"{tag}_{op}",
                signature=_sig(op, kind, ins, outs),
                work_class=wclass,
                c_name=f"td_{op}",
            ))
    # Data-dependent addressing: embedding lookups stay on the host core.
    reg.append(KernelTemplate(
        kid="host_gather_rows",
        signature=_sig("gather_rows", "scalar-core", ("*", "int32"), ("=0",)),
        work_class="default",
        c_name="td_gather_rows",
    ))
    return reg


REGISTRY: list[KernelTemplate] = _build_registry()
_BY_OP_KIND: dict[tuple[str, str], list[KernelTemplate]] = {}
for _t in REGISTRY:
    _BY_OP_KIND.setdefault((_t.signature.op, _t.signature.engine_kind), []).append(_t)


def kernels_for(op: str, engine_kind: str) -> list[KernelTemplate]:
    return _BY_OP_KIND.get((op, engine_kind), [])


def kernel_by_id(kid: str) -> KernelTemplate:
    for t in REGISTRY:
        if t.kid == kid:
            return t
    raise KernelError(f"unknown kernel {kid!r}")


def transient_bytes(op: str, attrs: dict, out_tile_shape: tuple[int, ...]) -> int:
    """Scratch bytes a kernel needs for one tile (0 for most kernels)."""
    if op == "softmax_i":
        # One row of 32-bit exponentials, reused across the tile's rows.
        return 4 * out_tile_shape[-1]
    return 0


def work_units(op: str, attrs: dict, out_tile_shape: tuple[int, ...],
               in_tile_shapes: list[tuple[int, ...]]) -> int:
    """Work per kernel invocation: MACs for matmul-class ops, output
    elements otherwise."""
    elems = 1
    for d in out_tile_shape:
        elems *= d
    if op in ("gemm", "gemm_q8"):
        return elems * in_tile_shapes[0][1]
    if op == "conv1x1_q8":
        return elems * in_tile_shapes[0][1]
    if op in ("bmm_i32", "bmm_requant"):
        return elems * in_tile_shapes[0][2]
    return elems


# ---------------------------------------------------------------------------
# Tile constraints
# ---------------------------------------------------------------------------

Dim = tuple[str, int]  # (buffer name, dim index)


@dataclass
class TileConstraintSpec:
    """Geometric tiling rules of one node, plus platform-specific additions.

    ``equalities`` tie tile extents of operand dims together (they share one
    symbolic dimension variable); ``untileable`` dims are fixed to the full
    tensor extent; ``divisibility`` restricts a dim's tile extent to
    multiples of a granule (engine datapath constraint, kept separate from
    the geometric rules)."""

    equalities: list[tuple[Dim, Dim]] = field(default_factory=list)
    untileable: list[Dim] = field(default_factory=list)
    divisibility: list[tuple[Dim, int]] = field(default_factory=list)


def tile_constraints_for(op: str, attrs: dict, inputs: tuple[str, ...],
                         outputs: tuple[str, ...],
                         in_shapes: list[tuple[int, ...]],
                         out_shapes: list[tuple[int, ...]],
                         engine_kind: str = "scalar-core") -> TileConstraintSpec:
    """Instantiate the tile-constraint rules of a node over its buffers."""
    spec = TileConstraintSpec()
    out = outputs[0]
    eq = spec.equalities.append
    fix = spec.untileable.append

    if op in ("requant", "hardswish_q", "causal_mask", "add_requant",
              "mul_requant", "softmax_i", "rmsnorm_i", "rope_q"):
        # Elementwise family: output tile dims equal input tile dims.
        rank = len(in_shapes[0])
        for d in range(rank):
            eq(((inputs[0], d), (out, d)))
        if op in ("add_requant", "mul_requant"):
            for d in range(rank):
                eq(((inputs[1], d), (out, d)))
        if op in ("softmax_i", "rmsnorm_i"):
            fix((inputs[0], rank - 1))  # reduction axis fully resident
            fix((out, rank - 1))
        if op == "rmsnorm_i":
            fix((inputs[1], 0))
            eq(((inputs[1], 0), (inputs[0], rank - 1)))
        if op == "rope_q":
            fix((inputs[0], 2))  # head dim rotates pairwise, stays whole
            fix((out, 2))
            for t in (inputs[1], inputs[2]):
                eq(((t, 0), (inputs[0], 0)))  # table rows track sequence rows
                fix((t, 1))
    elif op in ("gemm", "gemm_q8"):
        a, b, bias = inputs
        trans_b = int(attrs.get("transB", 0))
        eq(((a, 0), (out, 0)))                       # M
        eq(((b, 0 if trans_b else 1), (out, 1)))     # O
        fix((a, 1))                                  # reduction N untileable
        fix((b, 1 if trans_b else 0))
        if len(in_shapes[2]) == 1:
            eq(((bias, 0), (out, 1)))
        else:
            eq(((bias, 0), (out, 0)))
            eq(((bias, 1), (out, 1)))
    elif op == "conv1x1_q8":
        x, w, bias = inputs
        eq(((x, 0), (out, 0)))      # W (= M)
        eq(((w, 0), (out, 1)))      # C_out
        fix((x, 1))                 # C_in untileable
        fix((w, 1))
        fix((w, 2))
        fix((w, 3))
        if len(in_shapes[2]) == 1:
            eq(((bias, 0), (out, 1)))
        else:
            eq(((bias, 0), (out, 0)))
            eq(((bias, 1), (out, 1)))
        if engine_kind == "conv-npu":
            spec.divisibility.append(((out, 1), NPU_COUT_ALIGN))
    elif op in ("bmm_i32", "bmm_requant"):
        a, b = inputs
        eq(((a, 0), (out, 0)))
        eq(((b, 0), (out, 0)))
        eq(((a, 1), (out, 1)))
        eq(((b, 2), (out, 2)))
        fix((a, 2))                 # reduction untileable
        fix((b, 1))
    elif op == "transpose":
        perm = tuple(attrs["perm"])
        for d in range(len(perm)):
            eq((((inputs[0]), perm[d]), (out, d)))
    elif op == "gather_rows":
        table, idx = inputs
        eq(((idx, 0), (out, 0)))
        fix((out, 1))
        fix((table, 0))
        fix((table, 1))
    elif op == "concat_seq":
        a, b = inputs
        fix((a, 0))
        fix((b, 0))
        fix((out, 0))
        for d in range(1, len(in_shapes[0])):
            eq(((a, d), (out, d)))
            eq(((b, d), (out, d)))
    elif op == "reshape":
        for d in range(len(in_shapes[0])):
            fix((inputs[0], d))
        for d in range(len(out_shapes[0])):
            fix((out, d))
    else:
        raise KernelError(f"no tile constraints for op {op!r}")
    return spec


Range = tuple[int, int]


def operand_slices(op: str, attrs: dict, inputs: tuple[str, ...],
                   in_shapes: list[tuple[int, ...]],
                   out_ranges: tuple[Range, ...]) -> list[tuple[Range, ...]]:
    """Map an output tile (half-open ranges per dim) to one range tuple per
    input operand. Covering the output tile grid covers every operand
    element the kernel reads."""
    full = [tuple((0, d) for d in shp) for shp in in_shapes]
    if op in ("requant", "hardswish_q", "causal_mask", "softmax_i"):
        return [out_ranges]
    if op in ("add_requant", "mul_requant"):
        return [out_ranges, out_ranges]
    if op == "rmsnorm_i":
        return [out_ranges, full[1]]
    if op == "rope_q":
        (s_lo, s_hi) = out_ranges[0]
        pos = int(attrs["pos"])
        p = in_shapes[1][0]
        if pos + s_hi > p:
            raise KernelError(
                f"rope table underrun: positions [{pos + s_lo}, {pos + s_hi}) of {p}")
        trange = ((pos + s_lo, pos + s_hi), (0, in_shapes[1][1]))
        return [out_ranges, trange, trange]
    if op in ("gemm", "gemm_q8"):
        (m_lo, m_hi), (o_lo, o_hi) = out_ranges
        trans_b = int(attrs.get("transB", 0))
        a = ((m_lo, m_hi), (0, in_shapes[0][1]))
        b = ((o_lo, o_hi), (0, in_shapes[1][1])) if trans_b else \
            ((0, in_shapes[1][0]), (o_lo, o_hi))
        bias = ((o_lo, o_hi),) if len(in_shapes[2]) == 1 else ((m_lo, m_hi), (o_lo, o_hi))
        return [a, b, bias]
    if op == "conv1x1_q8":
        (m_lo, m_hi), (o_lo, o_hi) = out_ranges
        x = ((m_lo, m_hi), (0, in_shapes[0][1]))
        w = ((o_lo, o_hi), (0, 1), (0, 1), (0, in_shapes[1][3]))
        bias = ((o_lo, o_hi),) if len(in_shapes[2]) == 1 else ((m_lo, m_hi), (o_lo, o_hi))
        return [x, w, bias]
    if op in ("bmm_i32", "bmm_requant"):
        (t_lo, t_hi), (m_lo, m_hi), (o_lo, o_hi) = out_ranges
        a = ((t_lo, t_hi), (m_lo, m_hi), (0, in_shapes[0][2]))
        b = ((t_lo, t_hi), (0, in_shapes[1][1]), (o_lo, o_hi))
        return [a, b]
    if op == "transpose":
        perm = tuple(attrs["perm"])
        in_ranges = [None] * len(perm)
        for d, r in enumerate(out_ranges):
            in_ranges[perm[d]] = r
        return [tuple(in_ranges)]
    if op == "gather_rows":
        (s_lo, s_hi), _ = out_ranges
        return [full[0], ((s_lo, s_hi),)]
    if op == "concat_seq":
        cols = out_ranges[1:]
        return [((0, in_shapes[0][0]),) + cols, ((0, in_shapes[1][0]),) + cols]
    if op == "reshape":
        return [full[0]]
    raise KernelError(f"no operand slicing for op {op!r}")
