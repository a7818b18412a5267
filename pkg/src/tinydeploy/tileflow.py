"""Tile Constraint Flow: the geometric layer of the joint constraint program.

Walking the execution schedule top to bottom, every node instantiates its
kernel's tile constraints over per-tensor dimension variables (one symbolic
variable per dimension per tensor; a tensor shared by two nodes uses the
same variables). Equalities merge variables union-find style into canonical
variables; untileable dims pin them to the full extent; engine granularity
constraints restrict domains to multiples.

Each tensor that must move between memory levels for some node gets one
size variable per hop: product of its dimension variables times the element
size times the buffering factor (2 under double buffering). Capacity
coupling and the allocation side live in :mod:`tinydeploy.memalloc`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .frontend import Binding
from .ir import Graph, Schedule
from .kernels import registry, transient_bytes
from .target import TargetDescription, reachable_levels


class TileError(Exception):
    """Constraint program construction failure (including problems that are
    unsatisfiable before any search)."""


@dataclass
class CanonVar:
    """Canonical dimension variable after equality merging."""

    index: int
    members: list[tuple[str, int]]       # (tensor, dim) keys sharing this var
    hi: int                              # min full extent over members
    fixed: int | None = None             # untileable: pinned to full extent
    divisor: int = 1
    first_use: int = 0                   # schedule step of first instantiation

    def domain(self) -> list[int]:
        """Admissible tile extents, ascending."""
        if self.fixed is not None:
            return [self.fixed]
        if self.divisor == 1:
            return list(range(1, self.hi + 1))
        vals = [v for v in range(self.divisor, self.hi + 1, self.divisor)]
        return vals or [self.hi]

    def lo_value(self) -> int:
        return self.domain()[0]

    def hi_value(self) -> int:
        return self.domain()[-1]


@dataclass
class SizeVar:
    """Bytes of one tensor's tile arena at one destination level."""

    index: int
    tensor: str
    dst_level: str
    elem_bytes: int
    factor: int                           # 1, or 2 under double buffering
    var_dims: list[int]                   # canonical var index per tensor dim
    const_dims: list[int]                 # extents of dims owned by fixed vars

    def nbytes(self, values: list[int]) -> int:
        return self.factor * self.tile_bytes(values)

    def tile_bytes(self, values: list[int]) -> int:
        n = self.elem_bytes
        for c in self.const_dims:
            n *= c
        for v in self.var_dims:
            n *= values[v]
        return n


@dataclass
class NodeTiling:
    """Per-node tiling obligations: which operands hop, where the kernel
    executes, and the transient scratch it needs."""

    node: str
    step: int
    engine: str
    compute_level: str | None             # None: kernel runs fully in place
    hop_inputs: list[tuple[int, str]]     # (operand index, tensor)
    hop_outputs: list[tuple[int, str]]
    in_place: list[str]


@dataclass
class ConstraintProgram:
    """Bounded integer variables, product-form size definitions and the
    tiling objective; allocation adds the capacity constraints."""

    vars: list[CanonVar] = field(default_factory=list)
    var_of: dict[tuple[str, int], int] = field(default_factory=dict)
    sizevars: list[SizeVar] = field(default_factory=list)
    sizevar_of: dict[tuple[str, str], int] = field(default_factory=dict)
    nodes: list[NodeTiling] = field(default_factory=list)
    objective: list[int] = field(default_factory=list)   # sizevar indices
    objective_policy: str = ""
    double_buffer: bool = False

    def var_value(self, values: list[int], tensor: str, dim: int) -> int:
        return values[self.var_of[(tensor, dim)]]

    def tile_shape(self, values: list[int], g: Graph, tensor: str) -> tuple[int, ...]:
        shape = g.buffer(tensor).shape
        return tuple(min(self.var_value(values, tensor, d), shape[d])
                     for d in range(len(shape)))

    def dump(self, values: list[int] | None = None) -> str:
        """Text form, one variable/constraint per line (debug interface)."""
        lines = []
        for v in self.vars:
            members = ",".join(f"{t}[{d}]" for t, d in v.members)
            dom = f"fixed={v.fixed}" if v.fixed is not None else \
                f"[{v.lo_value()},{v.hi_value()}]" + (f" mod {v.divisor}" if v.divisor > 1 else "")
            val = f" = {values[v.index]}" if values is not None else ""
            lines.append(f"dimvar v{v.index} {{{members}}} {dom}{val}")
        for s in self.sizevars:
            terms = [str(c) for c in s.const_dims] + [f"v{i}" for i in s.var_dims]
            val = f" = {s.nbytes(values)}" if values is not None else ""
            lines.append(f"sizevar s{s.index} {s.tensor}@{s.dst_level} = "
                         f"{s.elem_bytes}*{s.factor}*" + "*".join(terms or ["1"]) + val)
        lines.append("objective maximize " +
                     " + ".join(f"s{i}" for i in self.objective) +
                     f" ({self.objective_policy or 'unset'})")
        return "\n".join(lines) + "\n"


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, k):
        self.parent.setdefault(k, k)
        root = k
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[k] != root:
            self.parent[k], k = root, self.parent[k]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_tile_cp(g: Graph, binding: Binding, t: TargetDescription,
                  schedule: Schedule, double_buffer: bool = True) -> ConstraintProgram:
    """Instantiate every scheduled node's tile constraints and size
    variables. Raises TileError for operands no engine placement can reach
    and for problems unsatisfiable before search."""
    by_name = {n.name: n for n in g.nodes}
    uf = _UnionFind()
    untileable: dict[tuple[str, int], int] = {}
    divisibility: dict[tuple[str, int], int] = {}
    first_use: dict[tuple[str, int], int] = {}
    node_specs = []

    for step, node_name in enumerate(schedule.nodes):
        node = by_name[node_name]
        in_shapes = [g.buffer(b).shape for b in node.inputs]
        out_shapes = [g.buffer(b).shape for b in node.outputs]
        engine = t.engine(binding.engines[node_name])
        spec = registry.tile_constraints_for(
            node.op, node.attrs, node.inputs, node.outputs,
            in_shapes, out_shapes, engine.kind)
        node_specs.append((step, node, spec))
        for buf in (*node.inputs, *node.outputs):
            for d in range(len(g.buffer(buf).shape)):
                first_use.setdefault((buf, d), step)
        for a, b in spec.equalities:
            uf.union(a, b)
        for key in spec.untileable:
            extent = g.buffer(key[0]).shape[key[1]]
            prev = untileable.get(key)
            if prev is not None and prev != extent:
                raise TileError(f"conflicting untileable extents for {key}")
            untileable[key] = extent
        for key, div in spec.divisibility:
            divisibility[key] = math.lcm(divisibility.get(key, 1), div)

    cp = ConstraintProgram(double_buffer=double_buffer)

    # Group all (tensor, dim) keys by canonical root, deterministic order.
    groups: dict = {}
    for key in first_use:
        groups.setdefault(uf.find(key), []).append(key)
    for root in sorted(groups, key=lambda k: (min(first_use[m] for m in groups[k]),
                                              k[0], k[1])):
        members = sorted(groups[root], key=lambda m: (first_use[m], m[0], m[1]))
        extents = [g.buffer(tn).shape[d] for tn, d in members]
        hi = min(extents)
        fixed = None
        for m in members:
            if m in untileable:
                val = untileable[m]
                if fixed is not None and fixed != val:
                    raise TileError(f"tied dims pinned to different extents: {members}")
                fixed = val
        if fixed is not None and fixed > hi:
            raise TileError(
                f"untileable extent {fixed} exceeds a tied dimension bound {hi}: {members}")
        div = 1
        for m in members:
            div = math.lcm(div, divisibility.get(m, 1))
        if fixed is None and div > hi:
            fixed = hi  # granularity larger than the extent: whole dim
        if fixed is not None and fixed % div != 0 and fixed != hi:
            raise TileError(f"pinned extent {fixed} violates granularity {div}: {members}")
        var = CanonVar(index=len(cp.vars), members=members, hi=hi, fixed=fixed,
                       divisor=div, first_use=min(first_use[m] for m in members))
        cp.vars.append(var)
        for m in members:
            cp.var_of[m] = var.index

    # Hops and size variables, walking the schedule again.
    factor = 2 if double_buffer else 1
    for step, node, _spec in node_specs:
        ename = binding.engines[node.name]
        engine = t.engine(ename)
        reach = reachable_levels(t, ename)
        hop_in: list[tuple[int, str]] = []
        hop_out: list[tuple[int, str]] = []
        in_place: list[str] = []
        operands = [(i, b, "in") for i, b in enumerate(node.inputs)] + \
                   [(i, b, "out") for i, b in enumerate(node.outputs)]
        cl = t.compute_level(ename)
        any_hop = False
        for idx, buf, dirn in operands:
            lvl = g.buffer(buf).level
            if lvl is None:
                raise TileError(f"buffer {buf} has no memory level (annotate first)")
            if lvl in reach:
                in_place.append(buf)
                continue
            if t.level(cl).parent != lvl:
                raise TileError(
                    f"node {node.name}: operand {buf} at level {lvl} unreachable "
                    f"from engine {ename} (compute level {cl})")
            any_hop = True
            (hop_in if dirn == "in" else hop_out).append((idx, buf))
            key = (buf, cl)
            if key not in cp.sizevar_of:
                shape = g.buffer(buf).shape
                dtype = binding.dtypes.get(buf) or g.buffer(buf).dtype
                if dtype is None:
                    raise TileError(f"buffer {buf} untyped at CP build")
                var_dims, const_dims = [], []
                for d in range(len(shape)):
                    vi = cp.var_of[(buf, d)]
                    if cp.vars[vi].fixed is not None:
                        const_dims.append(cp.vars[vi].fixed)
                    else:
                        var_dims.append(vi)
                sv = SizeVar(index=len(cp.sizevars), tensor=buf, dst_level=cl,
                             elem_bytes=dtype.nbytes, factor=factor,
                             var_dims=var_dims, const_dims=const_dims)
                cp.sizevars.append(sv)
                cp.sizevar_of[key] = sv.index
        cp.nodes.append(NodeTiling(
            node=node.name, step=step, engine=ename,
            compute_level=cl if any_hop or _needs_scratch(node) else None,
            hop_inputs=hop_in, hop_outputs=hop_out, in_place=in_place))

    # Pre-search feasibility: every node's minimal live tile set must fit.
    lo = [v.lo_value() for v in cp.vars]
    for nt in cp.nodes:
        if not (nt.hop_inputs or nt.hop_outputs):
            continue
        cl = nt.compute_level
        cap = t.level(cl).capacity
        node = by_name[nt.node]
        need = 0
        for _, buf in nt.hop_inputs + nt.hop_outputs:
            need += cp.sizevars[cp.sizevar_of[(buf, cl)]].nbytes(lo)
        out_tile = cp.tile_shape(lo, g, node.outputs[0])
        need += transient_bytes(node.op, node.attrs, out_tile)
        if need > cap:
            raise TileError(
                f"node {nt.node}: minimal tile set needs {need} bytes "
                f"> {cl} capacity {cap} (unsatisfiable before solving)")
    return cp


def _needs_scratch(node) -> bool:
    return node.op == "softmax_i"


def tiling_objective(cp: ConstraintProgram, t: TargetDescription,
                     policy: str = "max-tiles") -> ConstraintProgram:
    """Attach the objective: maximize total innermost-hop tile bytes,
    lexicographic tie-break balancing then preferring larger fast-varying
    dims. Capacity constraints are added by the allocation side."""
    if policy != "max-tiles":
        raise TileError(f"unknown tiling objective policy {policy!r}")
    leaves = {l.name for l in t.levels.values()} - \
             {l.parent for l in t.levels.values() if l.parent}
    cp.objective = [s.index for s in cp.sizevars if s.dst_level in leaves]
    cp.objective_policy = policy
    return cp
