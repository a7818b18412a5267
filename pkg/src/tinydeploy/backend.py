"""Backend: per-node execution plans and C source emission.

The schedule IR built here (NodePlan per node) is the pre-emission
structure: concrete tile grids, operand placements (in-place view vs tile
arena slot), transfer lists and transient scratch. The simulator interprets
it; the code generator renders it to C. Both therefore agree by
construction on every DMA byte and kernel invocation.

Memory layout convention: every allocation entry is 8-byte aligned (the
allocator pads reserved sizes), tile arenas hold ``factor`` slots of the
aligned full-tile size, and edge tiles are packed at the slot base with
their clamped shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .frontend import Binding
from .ir import Graph, Schedule
from .kernels import registry, transient_bytes
from .memalloc import (
    MemoryMap,
    TilingSolution,
    Transfer,
    align_up,
    arena_name,
    tile_grid,
    transient_name,
)
from .target import TargetDescription
from .tileflow import ConstraintProgram


class BackendError(Exception):
    """Plan construction or emission failure."""


@dataclass(frozen=True)
class OperandAccess:
    tensor: str
    inplace: bool
    level: str
    offset: int            # buffer offset (inplace) or arena base (tiled)
    slot_stride: int = 0   # tiled: aligned full-tile bytes (ping-pong step)
    slots: int = 1


@dataclass
class NodePlan:
    name: str
    op: str
    attrs: dict
    engine: str
    kernel_id: str
    step: int
    compute_level: str | None
    inputs: list[OperandAccess]
    output: OperandAccess
    grid: list[tuple[tuple[int, int], ...]]       # out tile ranges per tile
    in_slices: list[list[tuple[tuple[int, int], ...]]]  # per tile, per input
    invariant: set[int]
    hop_inputs: set[int]
    hop_output: bool
    transient_offset: int | None
    transient_nbytes: int
    double_buffer: bool
    transfers: list[Transfer] = field(default_factory=list)

    @property
    def n_tiles(self) -> int:
        return len(self.grid)

    @property
    def prefetch_offset(self) -> int:
        return 1 if self.double_buffer and self.n_tiles > 1 else 0


def slice_map(op: str, attrs: dict, inputs: tuple[str, ...],
              in_shapes: list[tuple[int, ...]], out_rank: int
              ) -> list[list[tuple]]:
    """Symbolic form of the operand slicing rules, derived by probing
    :func:`registry.operand_slices` with two distinguishing tile positions.
    Per operand dim: ("const", lo, hi) or ("dim", out_dim, offset) meaning
    (out_lo + offset, out_hi + offset). Keeps code generation on the same
    slicing rules the planner and simulator use."""
    p1 = tuple((3 * d + 1, 3 * d + 2) for d in range(out_rank))
    p2 = tuple((5 * d + 2, 5 * d + 4) for d in range(out_rank))
    s1 = registry.operand_slices(op, attrs, inputs, in_shapes, p1)
    s2 = registry.operand_slices(op, attrs, inputs, in_shapes, p2)
    out: list[list[tuple]] = []
    for oi, (r1, r2) in enumerate(zip(s1, s2)):
        dims: list[tuple] = []
        for j, ((lo1, hi1), (lo2, hi2)) in enumerate(zip(r1, r2)):
            if (lo1, hi1) == (lo2, hi2):
                dims.append(("const", lo1, hi1))
                continue
            found = None
            for d in range(out_rank):
                c = lo1 - p1[d][0]
                if (lo2 - p2[d][0] == c and hi1 - p1[d][1] == c
                        and hi2 - p2[d][1] == c):
                    found = ("dim", d, c)
                    break
            if found is None:
                raise BackendError(
                    f"{op}: cannot derive symbolic slice for operand {oi} dim {j}")
            dims.append(found)
        out.append(dims)
    return out


def build_plans(g: Graph, binding: Binding, t: TargetDescription,
                schedule: Schedule, cp: ConstraintProgram, sol: TilingSolution,
                memmap: MemoryMap, transfers: dict[str, list[Transfer]]
                ) -> list[NodePlan]:
    """Concretize the tiling solution into per-node executable plans, in
    schedule order."""
    by_name = {nd.name: nd for nd in g.nodes}
    offsets = {lvl: m.offsets() for lvl, m in memmap.levels.items()}
    plans: list[NodePlan] = []

    for nt in cp.nodes:
        node = by_name[nt.node]
        cl = nt.compute_level
        hop_in = {i for i, _ in nt.hop_inputs}
        hop_out = bool(nt.hop_outputs)
        tiled = bool(nt.hop_inputs or nt.hop_outputs)
        out_buf = g.buffer(node.outputs[0])

        if tiled:
            tile = cp.tile_shape(sol.values, g, node.outputs[0])
            grid = tile_grid(out_buf.shape, tile)
        else:
            grid = [tuple((0, d) for d in out_buf.shape)]
        in_shapes = [g.buffer(b).shape for b in node.inputs]
        in_slices = [registry.operand_slices(node.op, node.attrs, node.inputs,
                                             in_shapes, ranges)
                     for ranges in grid]
        if len(grid) > 1:
            invariant = {i for i in hop_in if in_slices[0][i] == in_slices[-1][i]}
        else:
            invariant = set(hop_in)

        def access(buf_name: str, hopped: bool) -> OperandAccess:
            buf = g.buffer(buf_name)
            if not hopped:
                return OperandAccess(buf_name, True, buf.level,
                                     offsets[buf.level][buf_name])
            shape = cp.tile_shape(sol.values, g, buf_name)
            dtype = binding.dtypes[buf_name]
            raw = dtype.nbytes
            for d in shape:
                raw *= d
            return OperandAccess(buf_name, False, cl,
                                 offsets[cl][arena_name(buf_name, cl)],
                                 slot_stride=align_up(raw),
                                 slots=sol.factor)

        tr_off = None
        tr_bytes = transient_bytes(node.op, node.attrs,
                                   cp.tile_shape(sol.values, g, node.outputs[0])
                                   if tiled else out_buf.shape)
        if tr_bytes > 0 and cl is not None:
            tr_off = offsets[cl][transient_name(node.name)]
        plans.append(NodePlan(
            name=node.name, op=node.op, attrs=dict(node.attrs),
            engine=nt.engine, kernel_id=binding.kernels[node.name],
            step=nt.step, compute_level=cl if tiled or tr_bytes else None,
            inputs=[access(b, i in hop_in) for i, b in enumerate(node.inputs)],
            output=access(node.outputs[0], hop_out),
            grid=grid, in_slices=in_slices, invariant=invariant,
            hop_inputs=hop_in, hop_output=hop_out,
            transient_offset=tr_off, transient_nbytes=tr_bytes,
            double_buffer=cp.double_buffer,
            transfers=list(transfers.get(node.name, ())),
        ))
    return plans


# ---------------------------------------------------------------------------
# Code generation
# ---------------------------------------------------------------------------

@dataclass
class CodeSegment:
    """C text plus the free variables it expects the surrounding scope (or a
    closure environment) to bind."""

    text: str
    free_vars: list[tuple[str, str]] = field(default_factory=list)  # (c type, name)


@dataclass
class Closure:
    name: str
    env_fields: list[tuple[str, str]]
    definition: str
    invocation: str


def make_closure(seg: CodeSegment, fn_name: str, engine_id: int | None = None,
                 global_names: frozenset[str] = frozenset()) -> Closure:
    """Hoist a code segment into a function; the environment record captures
    the segment's non-global free variables in first-use order. Without
    captured locals the invocation is a plain call with no record."""
    env = [(ty, nm) for ty, nm in seg.free_vars if nm not in global_names]
    body = "\n".join("    " + ln if ln else "" for ln in seg.text.splitlines())
    if not env:
        definition = (f"static void {fn_name}(void *td_env) {{\n"
                      f"    (void)td_env;\n{body}\n}}\n")
        if engine_id is None:
            invocation = f"{fn_name}(0);"
        else:
            invocation = (f"offload({engine_id}, {fn_name}, 0);\n"
                          f"offload_wait({engine_id});")
        return Closure(fn_name, [], definition, invocation)
    fields = "\n".join(f"    {ty} {nm};" for ty, nm in env)
    unpack = "\n".join(
        f"    {ty} {nm} = (({fn_name}_env_t *)td_env)->{nm};" for ty, nm in env)
    definition = (f"typedef struct {{\n{fields}\n}} {fn_name}_env_t;\n\n"
                  f"static void {fn_name}(void *td_env) {{\n{unpack}\n{body}\n}}\n")
    init = ", ".join(nm for _ty, nm in env)
    if engine_id is None:
        invocation = (f"{fn_name}_env_t env = {{{init}}};\n"
                      f"{fn_name}(&env);")
    else:
        invocation = (f"{fn_name}_env_t env = {{{init}}};\n"
                      f"offload({engine_id}, {fn_name}, &env);\n"
                      f"offload_wait({engine_id});")
    return Closure(fn_name, env, definition, invocation)


_CTYPES = {"int8": "int8_t", "uint8": "uint8_t", "int16": "int16_t", "int32": "int32_t"}


def _strides(shape: tuple[int, ...]) -> list[int]:
    st = [1] * len(shape)
    for d in range(len(shape) - 2, -1, -1):
        st[d] = st[d + 1] * shape[d + 1]
    return st


class _NodeGen:
    """Applies the per-node code generation passes: template instantiation,
    allocation pointer binding, tiling loop wrap and closure wrap."""

    def __init__(self, plan: NodePlan, idx: int, g: Graph, binding: Binding,
                 t: TargetDescription, engine_ids: dict[str, int]):
        self.p = plan
        self.idx = idx
        self.g = g
        self.b = binding
        self.t = t
        self.engine_ids = engine_ids
        self.prefix = f"n{idx}"
        self.smap = slice_map(plan.op, plan.attrs,
                              tuple(a.tensor for a in plan.inputs),
                              [g.buffer(a.tensor).shape for a in plan.inputs],
                              len(g.buffer(plan.output.tensor).shape))
        self.counts = [max(1, -(-e // max(1, tl))) for e, tl in
                       zip(g.buffer(plan.output.tensor).shape, self._out_tile())]

    def _out_tile(self) -> tuple[int, ...]:
        out_shape = self.g.buffer(self.p.output.tensor).shape
        if not self.p.grid:
            return out_shape
        return tuple(hi - lo for lo, hi in self.p.grid[0])

    def _ctype(self, tensor: str) -> str:
        return _CTYPES[self.b.dtypes[tensor].name]

    def _elem(self, tensor: str) -> int:
        return self.b.dtypes[tensor].nbytes

    # -- pass 2: allocation pointer binding ---------------------------------

    def bind_pointers(self) -> tuple[list[str], list[tuple[str, str]]]:
        lines: list[str] = []
        fv: list[tuple[str, str]] = []
        pre = self.prefix

        def bind(nm: str, cty: str, level: str, off: int, const: bool):
            qual = "const " if const else ""
            lines.append(f"{qual}{cty} *{nm} = ({qual}{cty} *)(td_arena_{level} + {off});")
            fv.append((f"{qual}{cty} *", nm))

        for i, acc in enumerate(self.p.inputs):
            buf = self.g.buffer(acc.tensor)
            cty = self._ctype(acc.tensor)
            if acc.inplace:
                bind(f"{pre}_src{i}", cty, acc.level, acc.offset, True)
            else:
                bind(f"{pre}_src{i}", cty, buf.level,
                     _buffer_offset(self, acc.tensor), True)
                bind(f"{pre}_t{i}", cty, acc.level, acc.offset, False)
        out = self.p.output
        if out.inplace:
            bind(f"{pre}_dst", self._ctype(out.tensor), out.level, out.offset, False)
        else:
            bind(f"{pre}_dst", self._ctype(out.tensor),
                 self.g.buffer(out.tensor).level,
                 _buffer_offset(self, out.tensor), False)
            bind(f"{pre}_ty", self._ctype(out.tensor), out.level, out.offset, False)
        if self.p.transient_offset is not None:
            bind(f"{pre}_scratch", "int32_t", self.p.compute_level,
                 self.p.transient_offset, False)
        return lines, fv

    # -- index decomposition -------------------------------------------------

    def _decomp(self, kvar: str) -> list[str]:
        out_shape = self.g.buffer(self.p.output.tensor).shape
        tile = self._out_tile()
        lines = [f"int32_t td_rem = {kvar};"]
        # row-major: last dim fastest
        for d in range(len(self.counts) - 1, -1, -1):
            if self.counts[d] == 1:
                continue
            lines.append(f"const int32_t i{d} = td_rem % {self.counts[d]}; "
                         f"td_rem /= {self.counts[d]};")
        lines.append("(void)td_rem;")
        for d in range(len(self.counts)):
            if self.counts[d] == 1:
                lines.append(f"const int32_t lo{d} = 0; const int32_t ex{d} = {out_shape[d]};")
            else:
                lines.append(f"const int32_t lo{d} = i{d} * {tile[d]};")
                lines.append(f"const int32_t ex{d} = TD_MIN({tile[d]}, {out_shape[d]} - lo{d});")
            lines.append(f"(void)lo{d}; (void)ex{d};")
        return lines

    def _lo_expr(self, rule: tuple) -> str:
        if rule[0] == "const":
            return str(rule[1])
        _, d, c = rule
        return f"lo{d}" if c == 0 else f"(lo{d} + {c})"

    def _ex_expr(self, rule: tuple) -> str:
        if rule[0] == "const":
            return str(rule[2] - rule[1])
        return f"ex{rule[1]}"

    # -- DMA blocks ----------------------------------------------------------

    def _copy_block(self, tensor: str, rules: list[tuple], packed_ptr: str,
                    strided_ptr: str, fetch: bool) -> list[str]:
        shape = self.g.buffer(tensor).shape
        st = _strides(shape)
        elem = self._elem(tensor)
        los = [self._lo_expr(r) for r in rules]
        exs = [self._ex_expr(r) for r in rules]
        base_off = " + ".join(f"({lo}) * {s}" for lo, s in zip(los, st)) or "0"
        if fetch:
            lines = [f"const uint8_t *td_s = (const uint8_t *)({strided_ptr} + {base_off});",
                     f"uint8_t *td_d = (uint8_t *)({packed_ptr});"]
        else:
            lines = [f"uint8_t *td_s = (uint8_t *)({strided_ptr} + {base_off});",
                     f"const uint8_t *td_d = (const uint8_t *)({packed_ptr});"]
        src, dst = ("td_s", "td_d") if fetch else ("td_d", "td_s")
        rank = len(shape)
        if rank == 1:
            row_bytes = f"({exs[0]}) * {elem}"
            copy = (f"dma_wait(dma_copy_2d({dst}, {src}, 1, {row_bytes}, 0, 0));"
                    if fetch else
                    f"dma_wait(dma_copy_2d({src}, {dst}, 1, {row_bytes}, 0, 0));")
            lines.append(copy)
            return lines
        rows = exs[-2]
        row_bytes = f"({exs[-1]}) * {elem}"
        strided_stride = st[-2] * elem
        packed_stride = f"({exs[-1]}) * {elem}"
        inner_src, inner_dst, sstr, dstr = (
            ("td_s", "td_d", str(strided_stride), packed_stride) if fetch
            else ("td_d", "td_s", packed_stride, str(strided_stride)))
        indent = ""
        block_elems = " * ".join(f"({e})" for e in exs[-2:])
        for d in range(rank - 2):
            lines.append(f"{indent}for (int32_t f{d} = 0; f{d} < {exs[d]}; ++f{d}) {{")
            indent += "    "
        off_s = " + ".join(f"(int64_t)f{d} * {st[d] * elem}" for d in range(rank - 2)) or "0"
        off_d = " * ".join([f"({e})" for e in exs[:-2]]) if rank > 2 else "1"
        # packed offset: linear index over outer dims times block bytes
        lin = "0"
        for d in range(rank - 2):
            lin = f"({lin} * ({exs[d]}) + f{d})" if d > 0 else f"f{d}"
        packed_off = f"(int64_t)({lin}) * {block_elems} * {elem}" if rank > 2 else "0"
        lines.append(
            f"{indent}dma_wait(dma_copy_2d("
            f"{inner_dst} + {packed_off if fetch else off_s}, "
            f"{inner_src} + {off_s if fetch else packed_off}, "
            f"{rows}, {row_bytes}, {sstr}, {dstr}));")
        for d in range(rank - 2):
            indent = indent[:-4]
            lines.append(f"{indent}}}")
        return lines

    # -- kernel invocation ----------------------------------------------------

    def _operand_ptr(self, i: int, kvar: str) -> str:
        acc = self.p.inputs[i]
        pre = self.prefix
        cty = self._ctype(acc.tensor)
        if acc.inplace:
            shape = self.g.buffer(acc.tensor).shape
            st = _strides(shape)
            rules = self.smap[i]
            # in-place slices must be contiguous: only the leading dim may be partial
            for d in range(1, len(shape)):
                r = rules[d]
                if not (r[0] == "const" and r[1] == 0 and r[2] == shape[d]):
                    if self.p.n_tiles > 1 or r[0] != "const":
                        raise BackendError(
                            f"node {self.p.name}: non-contiguous in-place slice "
                            f"of {acc.tensor}")
            lo0 = self._lo_expr(rules[0])
            return f"({pre}_src{i} + ({lo0}) * {st[0]})"
        slot = self._slot_expr(acc, i, kvar)
        return f"({cty} *)((uint8_t *)({pre}_t{i}) + {slot})"

    def _slot_expr(self, acc: OperandAccess, i: int | None, kvar: str) -> str:
        if acc.slots == 1 or (i is not None and i in self.p.invariant):
            return "0"
        return f"((int64_t)({kvar} & 1)) * {acc.slot_stride}"

    def _out_ptr(self, kvar: str) -> str:
        pre = self.prefix
        out = self.p.output
        if out.inplace:
            return f"{pre}_dst"
        return (f"({self._ctype(out.tensor)} *)((uint8_t *)({pre}_ty) + "
                f"{self._slot_expr(out, None, kvar)})")

    def _kernel_call(self, kvar: str) -> list[str]:
        p = self.p
        g = self.g
        exs = [f"ex{d}" for d in range(len(self.counts))]
        ins = [self._operand_ptr(i, kvar) for i in range(len(p.inputs))]
        y = self._out_ptr(kvar)
        a = p.attrs
        in_shapes = [g.buffer(x.tensor).shape for x in p.inputs]

        def prod(es):
            return " * ".join(f"({e})" for e in es) or "1"

        if p.op in ("gemm", "gemm_q8"):
            n = in_shapes[0][1]
            bias_rows = "1" if len(in_shapes[2]) == 1 else exs[0]
            if p.op == "gemm_q8":
                return [f"td_gemm_q8({ins[0]}, {ins[1]}, {ins[2]}, {bias_rows}, {y}, "
                        f"{exs[0]}, {n}, {exs[1]}, {int(a.get('transB', 0))}, "
                        f"{a['mul']}, {a['shift']}, {a['zp']});"]
            return [f"td_gemm({ins[0]}, {ins[1]}, {ins[2]}, {bias_rows}, {y}, "
                    f"{exs[0]}, {n}, {exs[1]}, {int(a.get('transB', 0))});"]
        if p.op == "conv1x1_q8":
            c_in = in_shapes[0][1]
            bias_rows = "1" if len(in_shapes[2]) == 1 else exs[0]
            return [f"td_conv1x1_q8({ins[0]}, {ins[1]}, {ins[2]}, {bias_rows}, {y}, "
                    f"{exs[0]}, {c_in}, {exs[1]}, {a['mul']}, {a['shift']}, {a['zp']});"]
        if p.op in ("bmm_i32", "bmm_requant"):
            n = in_shapes[0][2]
            if p.op == "bmm_requant":
                return [f"td_bmm_requant({ins[0]}, {ins[1]}, {y}, {exs[0]}, {exs[1]}, "
                        f"{n}, {exs[2]}, {a['mul']}, {a['shift']}, {a['zp']});"]
            return [f"td_bmm_i32({ins[0]}, {ins[1]}, {y}, {exs[0]}, {exs[1]}, "
                    f"{n}, {exs[2]});"]
        if p.op == "requant":
            return [f"td_requant({ins[0]}, {y}, {prod(exs)}, "
                    f"{a['mul']}, {a['shift']}, {a['zp']});"]
        if p.op == "softmax_i":
            rows = prod(exs[:-1])
            return [f"td_softmax_i({ins[0]}, {y}, {rows}, {exs[-1]}, {a['x0_q']}, "
                    f"{a['b_q']}, {a['c_q']}, {a['out_bits']}, {self.prefix}_scratch);"]
        if p.op == "rmsnorm_i":
            rows = prod(exs[:-1])
            return [f"td_rmsnorm_i({ins[0]}, {ins[1]}, {y}, {rows}, {exs[-1]}, "
                    f"{a['eps_q']}, {a['kshift']}, {a['mul']}, {a['shift']}, {a['zp']});"]
        if p.op == "rope_q":
            dh = in_shapes[0][2]
            return [f"td_rope_q({ins[0]}, {ins[1]}, {ins[2]}, {y}, {exs[0]}, {exs[1]}, "
                    f"{dh}, {a['mul']}, {a['shift']}, {a['zp']});"]
        if p.op == "hardswish_q":
            return [f"td_hardswish_q({ins[0]}, {y}, {prod(exs)}, {a['three_q']}, "
                    f"{a['six_q']}, {a['mul']}, {a['shift']}, {a['zp']});"]
        if p.op == "add_requant":
            return [f"td_add_requant({ins[0]}, {ins[1]}, {y}, {prod(exs)}, "
                    f"{a['mul']}, {a['shift']}, {a['zp']});"]
        if p.op == "mul_requant":
            return [f"td_mul_requant({ins[0]}, {ins[1]}, {y}, {prod(exs)}, "
                    f"{a['mul']}, {a['shift']}, {a['zp']});"]
        if p.op == "causal_mask":
            return [f"td_causal_mask({ins[0]}, {y}, {exs[0]}, {exs[1]}, {exs[2]}, "
                    f"lo1, lo2, {a['past']});"]
        if p.op == "transpose":
            perm = list(a["perm"])
            in_ex = [self._ex_expr(self.smap[0][d]) for d in range(len(in_shapes[0]))]
            shp = ", ".join(in_ex)
            pm = ", ".join(str(v) for v in perm)
            elem = self._elem(p.output.tensor)
            return [f"const int32_t {self.prefix}_shp[] = {{{shp}}};",
                    f"const int32_t {self.prefix}_perm[] = {{{pm}}};",
                    f"td_transpose((const uint8_t *){ins[0]}, (uint8_t *){y}, "
                    f"{len(perm)}, {self.prefix}_shp, {self.prefix}_perm, {elem});"]
        if p.op == "gather_rows":
            v = in_shapes[0][0]
            return [f"td_gather_rows({ins[0]}, {ins[1]}, {y}, {exs[0]}, {exs[1]}, {v});"]
        if p.op == "concat_seq":
            a_rows = self._ex_expr(self.smap[0][0])
            b_rows = self._ex_expr(self.smap[1][0])
            row_bytes = " * ".join([f"({e})" for e in exs[1:]] +
                                   [str(self._elem(p.output.tensor))])
            return [f"td_concat_seq((const uint8_t *){ins[0]}, (const uint8_t *){ins[1]}, "
                    f"(uint8_t *){y}, {a_rows}, {b_rows}, {row_bytes});"]
        if p.op == "reshape":
            nbytes = prod(exs) + f" * {self._elem(p.output.tensor)}"
            return [f"td_reshape((const uint8_t *){ins[0]}, (uint8_t *){y}, {nbytes});"]
        raise BackendError(f"no emission rule for op {p.op!r}")

    # -- full segment ----------------------------------------------------------

    def _fetch_lines(self, i: int, kvar: str) -> list[str]:
        acc = self.p.inputs[i]
        pre = self.prefix
        dst = f"(uint8_t *)({pre}_t{i}) + {self._slot_expr(acc, i, kvar)}"
        return ["{"] + ["    " + ln for ln in self._copy_block(
            acc.tensor, self.smap[i], dst, f"{pre}_src{i}", fetch=True)] + ["}"]

    def _writeback_lines(self, kvar: str) -> list[str]:
        out = self.p.output
        pre = self.prefix
        src = f"(uint8_t *)({pre}_ty) + {self._slot_expr(out, None, kvar)}"
        out_rules = [("dim", d, 0) for d in range(len(self.counts))]
        return ["{"] + ["    " + ln for ln in self._copy_block(
            out.tensor, out_rules, src, f"{pre}_dst", fetch=False)] + ["}"]

    def body(self) -> list[str]:
        p = self.p
        tiles = p.n_tiles
        lines: list[str] = []
        streamed = sorted(p.hop_inputs - p.invariant)
        if not (p.hop_inputs or p.hop_output):
            lines += ["{"] + ["    " + ln for ln in self._decomp("0")]
            lines += ["    " + ln for ln in self._kernel_call("0")] + ["}"]
            return lines
        for i in sorted(p.invariant):
            lines.append(f"/* fetch {p.inputs[i].tensor} (loop-invariant) */")
            lines += ["{"] + ["    " + ln for ln in self._decomp("0")] + \
                     ["    " + ln for ln in self._fetch_lines(i, "0")] + ["}"]
        if p.double_buffer and tiles > 1:
            lines.append(f"for (int32_t k = -1; k < {tiles}; ++k) {{")
            lines.append(f"    if (k + 1 < {tiles}) {{  /* prefetch tile k+1 */")
            lines.append("        const int32_t kk = k + 1;")
            sub = []
            sub += self._decomp("kk")
            for i in streamed:
                sub += self._fetch_lines(i, "kk")
            lines += ["        " + ln for ln in sub]
            lines.append("    }")
            lines.append("    if (k < 0) continue;")
            sub = self._decomp("k")
            sub += self._kernel_call("k")
            if p.hop_output:
                sub.append("/* writeback tile k */")
                sub += self._writeback_lines("k")
            lines += ["    " + ln for ln in sub]
            lines.append("}")
        else:
            lines.append(f"for (int32_t k = 0; k < {tiles}; ++k) {{")
            sub = self._decomp("k")
            for i in streamed:
                sub += self._fetch_lines(i, "k")
            sub += self._kernel_call("k")
            if p.hop_output:
                sub += self._writeback_lines("k")
            lines += ["    " + ln for ln in sub]
            lines.append("}")
        return lines


def _buffer_offset(gen: _NodeGen, tensor: str) -> int:
    lvl = gen.g.buffer(tensor).level
    return gen.offsets[lvl][tensor]


def gen_node_code(plan: NodePlan, idx: int, g: Graph, binding: Binding,
                  t: TargetDescription, offsets: dict[str, dict[str, int]],
                  engine_ids: dict[str, int]) -> tuple[str, str]:
    """Code generation pass pipeline for one node: template instantiation,
    pointer binding, tiling loop wrap, closure wrap for offloaded engines.
    Returns (inline call-site text, hoisted definitions text)."""
    gen = _NodeGen(plan, idx, g, binding, t, engine_ids)
    gen.offsets = offsets
    bind_lines, free_vars = gen.bind_pointers()
    body = gen.body()
    seg = CodeSegment("\n".join(body), free_vars)
    header = f"/* step {idx}: {plan.name} ({plan.op}) on {plan.engine}, " \
             f"{plan.n_tiles} tile(s) */"
    if plan.engine == t.host_engine:
        text = "\n".join([header, "{"] + ["    " + ln for ln in bind_lines]
                         + ["    " + ln for ln in seg.text.splitlines()] + ["}"])
        return text, ""
    clo = make_closure(seg, f"td_closure_{idx}", engine_ids[plan.engine])
    call_lines = [header, "{"] + ["    " + ln for ln in bind_lines] + \
                 ["    " + ln for ln in clo.invocation.splitlines()] + ["}"]
    return "\n".join(call_lines), clo.definition


@dataclass
class SourceArtifact:
    name: str
    entry: str
    files: dict[str, str]
    manifest: str
    symbols: list[tuple[str, str, int, int]]


def _sanitize(name: str) -> str:
    out = "".join(ch if ch.isalnum() or ch == "_" else "_" for ch in name)
    return out if out and not out[0].isdigit() else "g_" + out


def emit(result, name: str | None = None) -> SourceArtifact:
    """Emit the standalone C99 artifact: main source, runtime header,
    host driver and the symbol manifest. Output is byte-deterministic for
    identical compilation inputs."""
    from .kernels import ctempl

    g = result.graph
    t = result.target
    binding = result.binding
    memmap = result.memmap
    plans = result.plans
    name = _sanitize(name or g.name)

    offsets = {lvl: m.offsets() for lvl, m in memmap.levels.items()}
    engine_ids = {e: i for i, e in enumerate(sorted(t.engines))}

    kernel_names: list[str] = []
    for p in plans:
        from .kernels import registry as _reg
        cn = _reg.kernel_by_id(p.kernel_id).c_name
        if cn == "td_conv1x1_q8" and "td_gemm_q8" not in kernel_names:
            kernel_names.append("td_gemm_q8")
        if cn not in kernel_names:
            kernel_names.append(cn)
    if "td_conv1x1_q8" in kernel_names:
        kernel_names.remove("td_gemm_q8")
        kernel_names.insert(kernel_names.index("td_conv1x1_q8"), "td_gemm_q8")

    lines: list[str] = []
    lines.append(f"/* Generated by tinydeploy: graph {g.name}, target {t.name}, "
                 f"scenario {result.scenario}, "
                 f"double_buffer={'on' if result.double_buffer else 'off'} */")
    lines.append(f'#include "{name}_runtime.h"')
    lines.append("")
    lines.append("#define TD_MIN(a, b) ((a) < (b) ? (a) : (b))")
    lines.append("")
    lines.append("/* engine ids: " +
                 ", ".join(f"{e}={i}" for e, i in engine_ids.items()) + " */")
    lines.append("")
    for lvl in sorted(memmap.levels):
        peak = memmap.levels[lvl].peak
        if peak > 0:
            lines.append(f"uint8_t td_arena_{lvl}[{peak}] "
                         f"__attribute__((aligned(16)));")
    lines.append("")

    const_syms: list[tuple[str, str]] = []
    for bi, b in enumerate(g.buffers.values()):
        if b.kind != "constant":
            continue
        sym = f"td_cst_{bi}"
        const_syms.append((b.name, sym))
        data = b.payload
        rows = []
        for off in range(0, len(data), 16):
            rows.append(", ".join(str(v) for v in data[off:off + 16]))
        body = ",\n    ".join(rows) if rows else "0"
        lines.append(f"/* {b.name}: {list(b.shape)} {b.dtype.name} */")
        lines.append(f"static const uint8_t {sym}[{max(1, len(data))}] = {{\n    {body}\n}};")
    lines.append("")
    lines.append(ctempl.helper_block())
    for kn in kernel_names:
        lines.append(ctempl.kernel_def(kn))

    node_calls: list[str] = []
    closure_defs: list[str] = []
    for idx, p in enumerate(plans):
        call, defs = gen_node_code(p, idx, g, binding, t, offsets, engine_ids)
        node_calls.append(call)
        if defs:
            closure_defs.append(defs)
    lines.extend(closure_defs)

    lines.append(f"void {name}_init(void) {{")
    for bname, sym in const_syms:
        b = g.buffer(bname)
        lines.append(f"    memcpy(td_arena_{b.level} + {offsets[b.level][bname]}, "
                     f"{sym}, {len(b.payload)});")
    lines.append("}")
    lines.append("")
    lines.append(f"void {name}_run(void) {{")
    for call in node_calls:
        lines.extend("    " + ln for ln in call.splitlines())
    lines.append("}")
    main_c = "\n".join(lines) + "\n"

    symbols: list[tuple[str, str, int, int]] = []
    for lvl in sorted(memmap.levels):
        for sname, off, size in memmap.levels[lvl].entries:
            symbols.append((sname, lvl, off, size))
    manifest = "\n".join(f"{s}\t{lvl}\t{off}\t{size}"
                         for s, lvl, off, size in symbols) + "\n"

    driver = _emit_driver(name, g, binding, memmap, offsets)
    files = {
        f"{name}.c": main_c,
        f"{name}_runtime.h": ctempl.RUNTIME_HEADER,
        f"{name}_main.c": driver,
        f"{name}_manifest.txt": manifest,
    }
    return SourceArtifact(name=name, entry=f"{name}_run", files=files,
                          manifest=manifest, symbols=symbols)


def _emit_driver(name: str, g: Graph, binding: Binding, memmap: MemoryMap,
                 offsets) -> str:
    lines = [
        f"/* Host driver for {name}: reads <input>.bin blobs from argv[1],",
        " * writes <output>.bin blobs to argv[2]. */",
        "#include <stdio.h>",
        "#include <stdlib.h>",
        "#include <string.h>",
        "#include <stdint.h>",
        "",
        f"void {name}_init(void);",
        f"void {name}_run(void);",
    ]
    levels = sorted({g.buffer(n).level for n in (*g.inputs, *g.outputs)})
    for lvl in levels:
        lines.append(f"extern uint8_t td_arena_{lvl}[];")
    lines += [
        "",
        "static int blob(const char *dir, const char *nm, uint8_t *p,"
        " long n, int write_mode) {",
        "    char path[512];",
        "    snprintf(path, sizeof path, \"%s/%s.bin\", dir, nm);",
        "    FILE *f = fopen(path, write_mode ? \"wb\" : \"rb\");",
        "    if (!f) { fprintf(stderr, \"cannot open %s\\n\", path); return 1; }",
        "    long done = write_mode ? (long)fwrite(p, 1, n, f)"
        " : (long)fread(p, 1, n, f);",
        "    fclose(f);",
        "    if (done != n) { fprintf(stderr, \"short io on %s\\n\", path);"
        " return 1; }",
        "    return 0;",
        "}",
        "",
        "int main(int argc, char **argv) {",
        "    if (argc < 3) { fprintf(stderr, \"usage: %s IN_DIR OUT_DIR\\n\","
        " argv[0]); return 2; }",
        f"    {name}_init();",
    ]
    for nm in g.inputs:
        b = g.buffer(nm)
        n = b.elems * binding.dtypes[nm].nbytes
        lines.append(f"    if (blob(argv[1], \"{nm}\", td_arena_{b.level} + "
                     f"{offsets[b.level][nm]}, {n}, 0)) return 3;")
    lines.append(f"    {name}_run();")
    for nm in g.outputs:
        b = g.buffer(nm)
        n = b.elems * binding.dtypes[nm].nbytes
        lines.append(f"    if (blob(argv[2], \"{nm}\", td_arena_{b.level} + "
                     f"{offsets[b.level][nm]}, {n}, 1)) return 4;")
    lines += ["    return 0;", "}", ""]
    return "\n".join(lines)
