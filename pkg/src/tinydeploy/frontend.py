"""Graph lowering into the platform dialect, plus type inference and kernel
selection.

Lowering passes are pattern rewrites over op-kind chains: a source pattern
(consecutive producer/consumer nodes with single-use intermediates) and a
replacement function. Passes run to fixed point in the listed order,
matching in schedule order, so lowering is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ir import (
    DTYPES,
    Buffer,
    DataType,
    Graph,
    GraphError,
    Node,
    topo_schedule,
    validate,
)
from .kernels import registry
from .reference import constant_array, np_dtype
from .target import TargetDescription


class LoweringError(Exception):
    """A pass produced an invalid graph or could not be applied."""


class BindingError(Exception):
    """Type inference / kernel selection failure."""


# Replacement: (graph, matched nodes) -> (new nodes, new/updated buffers,
# buffer names to drop) or None to reject the match.
ReplaceFn = Callable[[Graph, list[Node]], "tuple[list[Node], dict[str, Buffer], list[str]] | None"]


@dataclass(frozen=True)
class Pass:
    name: str
    source_pattern: tuple[str, ...]
    replace: ReplaceFn


def _chain_matches(g: Graph, pattern: tuple[str, ...]) -> list[list[Node]]:
    """All op-kind chain matches in schedule order. Interior links must be
    local, single-consumer, non-output buffers."""
    order = topo_schedule(g).nodes
    by_name = {n.name: n for n in g.nodes}
    consumers: dict[str, list[Node]] = {}
    for n in g.nodes:
        for i in n.inputs:
            consumers.setdefault(i, []).append(n)
    matches = []
    for name in order:
        chain = [by_name[name]]
        if chain[0].op != pattern[0]:
            continue
        ok = True
        for want in pattern[1:]:
            cur = chain[-1]
            if len(cur.outputs) != 1:
                ok = False
                break
            link = cur.outputs[0]
            buf = g.buffers[link]
            users = consumers.get(link, [])
            if buf.scope != "local" or link in g.outputs or len(users) != 1 \
                    or users[0].op != want:
                ok = False
                break
            chain.append(users[0])
        if ok:
            matches.append(chain)
    return matches


def apply_passes(g: Graph, passes: list[Pass]) -> Graph:
    """Fixed-point application: each pass repeats until no match, then the
    next pass runs. Aborts a pass after 10 * |nodes| rewrites."""
    for p in passes:
        budget = 10 * max(1, len(g.nodes))
        while True:
            applied = False
            for chain in _chain_matches(g, p.source_pattern):
                result = p.replace(g, chain)
                if result is None:
                    continue
                g = _splice(g, chain, *result)
                diags = validate(g)
                if diags:
                    raise LoweringError(
                        f"pass {p.name} produced invalid graph: "
                        + "; ".join(str(d) for d in diags))
                applied = True
                budget -= 1
                if budget <= 0:
                    raise LoweringError(f"pass {p.name} exceeded its rewrite budget")
                break  # re-match from scratch: the graph changed
            if not applied:
                break
    return g


def _splice(g: Graph, old_nodes: list[Node], new_nodes: list[Node],
            buffers: dict[str, Buffer], drop_buffers: list[str]) -> Graph:
    old_names = {n.name for n in old_nodes}
    pos = min(i for i, n in enumerate(g.nodes) if n.name in old_names)
    nodes = [n for n in g.nodes if n.name not in old_names]
    nodes[pos:pos] = new_nodes
    bufs = dict(g.buffers)
    for name in drop_buffers:
        bufs.pop(name, None)
    bufs.update(buffers)
    return g.with_changes(nodes=nodes, buffers=bufs)


# ---------------------------------------------------------------------------
# Shipped passes
# ---------------------------------------------------------------------------

def _fuse_matmul_requant(fused_op: str) -> ReplaceFn:
    def replace(g: Graph, chain: list[Node]):
        mm, rq = chain
        attrs = dict(mm.attrs)
        attrs.update({k: rq.attrs[k] for k in ("mul", "shift", "zp")})
        node = Node(mm.name + "_q", fused_op, attrs, mm.inputs, rq.outputs)
        return [node], {}, [mm.outputs[0]]
    return replace


PASS_FUSE_GEMM = Pass("fuse-gemm-requant", ("gemm", "requant"),
                      _fuse_matmul_requant("gemm_q8"))
PASS_FUSE_BMM = Pass("fuse-bmm-requant", ("bmm_i32", "requant"),
                     _fuse_matmul_requant("bmm_requant"))


def _transpose_b_replace(g: Graph, chain: list[Node]):
    (mm,) = chain
    if int(mm.attrs.get("transB", 0)) != 0:
        return None
    b_name = mm.inputs[1]
    b = g.buffers[b_name]
    attrs = {**mm.attrs, "transB": 1}
    if b.kind == "constant":
        # Fold the layout change into the payload.
        arr = constant_array(b)
        new_name = b_name + "_T"
        tb = np.ascontiguousarray(arr.T)
        buf = Buffer(new_name, "constant", "global", tb.shape, b.dtype,
                     payload=tb.tobytes())
        node = Node(mm.name, mm.op, attrs,
                    (mm.inputs[0], new_name, mm.inputs[2]), mm.outputs)
        still_used = any(b_name in n.inputs for n in g.nodes if n.name != mm.name)
        return [node], {new_name: buf}, ([] if still_used else [b_name])
    new_name = b_name + "_T"
    tbuf = Buffer(new_name, "variable", "local", (b.shape[1], b.shape[0]), b.dtype)
    tnode = Node(mm.name + "_bT", "transpose", {"perm": [1, 0]}, (b_name,), (new_name,))
    node = Node(mm.name, mm.op, attrs,
                (mm.inputs[0], new_name, mm.inputs[2]), mm.outputs)
    return [tnode, node], {new_name: tbuf}, []


PASS_TRANSPOSE_B_Q8 = Pass("transpose-b", ("gemm_q8",), _transpose_b_replace)
PASS_TRANSPOSE_B_I32 = Pass("transpose-b-i32", ("gemm",), _transpose_b_replace)


def _reducible_bias(g: Graph, name: str) -> np.ndarray | None:
    """Bias constant reducible to one row: returns the [O] row or None."""
    buf = g.buffers[name]
    if buf.kind != "constant":
        return None
    arr = constant_array(buf)
    if arr.ndim == 1:
        return arr
    if arr.ndim == 2 and bool(np.all(arr == arr[0:1, :])):
        return np.ascontiguousarray(arr[0])
    return None


def _gemm_to_pointwise_replace(g: Graph, chain: list[Node]):
    (mm,) = chain
    b_name = mm.inputs[1]
    b = g.buffers[b_name]
    if b.kind != "constant":
        return None
    bias_row = _reducible_bias(g, mm.inputs[2])
    if bias_row is None:
        return None
    arr = constant_array(b)
    trans_b = int(mm.attrs.get("transB", 0))
    w = arr if trans_b else np.ascontiguousarray(arr.T)  # [O, N]
    o, n = w.shape
    w4 = np.ascontiguousarray(w.reshape(o, 1, 1, n))
    w_name = b_name + "_pw"
    bufs = {w_name: Buffer(w_name, "constant", "global", w4.shape, b.dtype,
                           payload=w4.tobytes())}
    drops = []
    ins = [mm.inputs[0], w_name, mm.inputs[2]]
    if bias_row.shape != g.buffers[mm.inputs[2]].shape:
        bias_name = mm.inputs[2] + "_row"
        bufs[bias_name] = Buffer(bias_name, "constant", "global", bias_row.shape,
                                 g.buffers[mm.inputs[2]].dtype,
                                 payload=bias_row.tobytes())
        ins[2] = bias_name
        if not any(mm.inputs[2] in x.inputs for x in g.nodes if x.name != mm.name):
            drops.append(mm.inputs[2])
    if not any(b_name in x.inputs for x in g.nodes if x.name != mm.name):
        drops.append(b_name)
    attrs = {k: mm.attrs[k] for k in ("mul", "shift", "zp")}
    node = Node(mm.name + "_pw", "conv1x1_q8", attrs, tuple(ins), mm.outputs)
    return [node], bufs, drops


PASS_GEMM_TO_PW = Pass("gemm-to-pointwise", ("gemm_q8",), _gemm_to_pointwise_replace)


def gemm_to_pointwise(g: Graph) -> Graph:
    """Rewrite constant-weight requantized GEMMs as pointwise convolutions
    (H=1, W=M, C_in=N, C_out=O); non-candidates are left untouched."""
    return apply_passes(g, [PASS_GEMM_TO_PW])


# ---------------------------------------------------------------------------
# Memory level annotation
# ---------------------------------------------------------------------------

def annotate_memory_levels(g: Graph, t: TargetDescription, policy: str = "no-nms") -> Graph:
    """Assign a memory level to every buffer.

    ``no-nms``: globals and constants to the global arena level, locals to
    the local staging level. ``nms-weights`` additionally pins pointwise
    convolution weights to the dedicated weight memory."""
    if policy not in ("no-nms", "nms-weights"):
        raise LoweringError(f"unknown annotation policy {policy!r}")
    conv_weights = set()
    if policy == "nms-weights":
        if t.weight_level is None:
            raise LoweringError(f"target {t.name} has no weight memory level")
        conv_weights = {n.inputs[1] for n in g.nodes if n.op == "conv1x1_q8"}
    bufs = {}
    for b in g.buffers.values():
        if b.name in conv_weights and b.kind == "constant":
            level = t.weight_level
        elif b.kind == "constant" or b.scope == "global":
            level = t.arena_level["global"]
        else:
            level = t.arena_level["local"]
        nbytes = b.nbytes() if b.dtype is not None else b.elems
        cap = t.level(level).capacity
        if nbytes > cap:
            raise LoweringError(
                f"buffer {b.name} ({nbytes} bytes) exceeds level {level} "
                f"capacity ({cap} bytes)")
        nb = Buffer(b.name, b.kind, b.scope, b.shape, b.dtype, level, b.payload)
        bufs[b.name] = nb
    return g.with_changes(buffers=bufs)


# ---------------------------------------------------------------------------
# Type inference & kernel selection
# ---------------------------------------------------------------------------

@dataclass
class Binding:
    """Per-node kernel/engine assignment and per-buffer resolved types."""

    kernels: dict[str, str] = field(default_factory=dict)   # node -> kernel id
    engines: dict[str, str] = field(default_factory=dict)   # node -> engine name
    dtypes: dict[str, DataType] = field(default_factory=dict)

    def kernel(self, node: str) -> registry.KernelTemplate:
        return registry.kernel_by_id(self.kernels[node])


def infer_types_select_kernels(g: Graph, t: TargetDescription,
                               engine_prefs: list[str],
                               input_types: dict[str, str] | None = None) -> Binding:
    """Single forward sweep in schedule order; for each node the first
    engine in preference order whose registry signatures match the input
    types wins. Registry order within one engine is the tie-break."""
    prefs = [e for e in engine_prefs if e in t.engines]
    if not prefs:
        prefs = [t.host_engine]
    binding = Binding()

    def set_dtype(buf: str, dt: DataType, who: str) -> None:
        old = binding.dtypes.get(buf)
        if old is not None and old != dt:
            raise BindingError(
                f"{who}: conflicting types for buffer {buf}: {old.name} vs {dt.name}")
        binding.dtypes[buf] = dt

    for b in g.buffers.values():
        if b.kind == "constant":
            if b.dtype is None:
                raise BindingError(f"constant {b.name} has no dtype")
            set_dtype(b.name, b.dtype, "constant")
    for name in g.inputs:
        buf = g.buffer(name)
        want = (input_types or {}).get(name)
        dt = DTYPES[want] if want else buf.dtype
        if dt is None:
            raise BindingError(f"graph input {name} has no declared type")
        set_dtype(name, dt, "input")

    by_name = {n.name: n for n in g.nodes}
    for node_name in topo_schedule(g).nodes:
        node = by_name[node_name]
        missing = [i for i in node.inputs if i not in binding.dtypes]
        if missing:
            raise BindingError(f"node {node.name}: untyped inputs {missing}")
        in_dtypes = [binding.dtypes[i].name for i in node.inputs]
        chosen = None
        for ename in prefs:
            eng = t.engine(ename)
            if eng.supported_ops and node.op not in eng.supported_ops:
                continue
            for tmpl in registry.kernels_for(node.op, eng.kind):
                if tmpl.signature.matches(in_dtypes):
                    chosen = (ename, tmpl)
                    break
            if chosen:
                break
        if chosen is None:
            raise BindingError(
                f"node {node.name}: no kernel for op {node.op} with input types "
                f"({', '.join(in_dtypes)}) on engines {prefs}")
        ename, tmpl = chosen
        binding.kernels[node.name] = tmpl.kid
        binding.engines[node.name] = ename
        for buf, dt_name in zip(node.outputs, tmpl.signature.resolve_out(in_dtypes)):
            declared = g.buffer(buf).dtype
            if declared is not None and declared.name != dt_name:
                raise BindingError(
                    f"node {node.name}: output {buf} declared {declared.name} "
                    f"but kernel produces {dt_name}")
            set_dtype(buf, DTYPES[dt_name], f"node {node.name}")

    untyped = [b for b in g.buffers if b not in binding.dtypes]
    if untyped:
        raise BindingError(f"buffers never typed: {untyped}")
    return binding


# ---------------------------------------------------------------------------
# Deployment scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str
    engine_prefs: tuple[str, ...]
    policy: str
    conv_lowering: bool

    def passes(self) -> list[Pass]:
        ps = [PASS_FUSE_GEMM, PASS_FUSE_BMM]
        if self.conv_lowering:
            ps.append(PASS_GEMM_TO_PW)
        ps.extend([PASS_TRANSPOSE_B_Q8, PASS_TRANSPOSE_B_I32])
        return ps


SCENARIOS: dict[str, Scenario] = {
    "single-core": Scenario("single-core", ("core",), "no-nms", False),
    "octa-core": Scenario("octa-core", ("cluster", "core"), "no-nms", False),
    "npu": Scenario("npu", ("npu", "cluster", "core"), "no-nms", True),
    "npu+weightmem": Scenario("npu+weightmem", ("npu", "cluster", "core"),
                              "nms-weights", True),
}


def lower(g: Graph, t: TargetDescription, scenario: Scenario) -> tuple[Graph, Binding]:
    """Full frontend: passes, annotation, type inference, kernel selection."""
    g = apply_passes(g, scenario.passes())
    policy = scenario.policy if t.weight_level is not None else "no-nms"
    g = annotate_memory_levels(g, t, policy)
    binding = infer_types_select_kernels(g, t, list(scenario.engine_prefs))
    return g, binding
