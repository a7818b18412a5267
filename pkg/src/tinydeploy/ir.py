"""Graph, buffer and schedule representation shared by all pipeline stages.

Graphs are SSA-like operator DAGs over named tensor buffers. Three buffer
kinds exist: ``variable`` (network inputs/outputs/activations), ``constant``
(weights and tables, payload known at compile time) and ``transient``
(kernel scratch, materialized by the planner after tiling). Buffers are
either ``global`` (alive for a whole inference: graph I/O, caches, weights)
or ``local`` (alive between definition and last use).

Graphs are treated as immutable after construction; every transformation
produces a new Graph.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace

GRAPH_FORMAT_VERSION = 1

KINDS = ("variable", "constant", "transient")
SCOPES = ("global", "local")

# Attribute values allowed in graph files: ints, strings, and flat int lists.
AttrValue = int | str | list


class GraphError(Exception):
    """Malformed graph document or graph-level contract violation."""


@dataclass(frozen=True)
class DataType:
    name: str
    bits: int
    signed: bool

    @property
    def nbytes(self) -> int:
        return self.bits // 8


INT8 = DataType("int8", 8, True)
UINT8 = DataType("uint8", 8, False)
INT16 = DataType("int16", 16, True)
INT32 = DataType("int32", 32, True)

DTYPES: dict[str, DataType] = {d.name: d for d in (INT8, UINT8, INT16, INT32)}


@dataclass
class Buffer:
    """A named tensor. ``dtype`` starts as the file hint (may be None for
    intermediates) and is fixed by type inference; ``level`` is assigned by
    memory-level annotation."""

    name: str
    kind: str
    scope: str
    shape: tuple[int, ...]
    dtype: DataType | None = None
    level: str | None = None
    payload: bytes | None = None

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        if self.kind not in KINDS:
            raise GraphError(f"buffer {self.name}: unknown kind {self.kind!r}")
        if self.scope not in SCOPES:
            raise GraphError(f"buffer {self.name}: unknown scope {self.scope!r}")
        if any(d <= 0 for d in self.shape):
            raise GraphError(f"buffer {self.name}: non-positive dimension in {self.shape}")

    @property
    def elems(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    def nbytes(self) -> int:
        if self.dtype is None:
            raise GraphError(f"buffer {self.name}: size queried before type inference")
        return self.elems * self.dtype.nbytes


@dataclass
class Node:
    name: str
    op: str
    attrs: dict[str, AttrValue]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def __post_init__(self) -> None:
        self.inputs = tuple(self.inputs)
        self.outputs = tuple(self.outputs)


@dataclass
class Graph:
    name: str
    nodes: list[Node]
    buffers: dict[str, Buffer]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def buffer(self, name: str) -> Buffer:
        try:
            return self.buffers[name]
        except KeyError:
            raise GraphError(f"unknown buffer {name!r}") from None

    def producer(self, buf: str) -> Node | None:
        for n in self.nodes:
            if buf in n.outputs:
                return n
        return None

    def consumers(self, buf: str) -> list[Node]:
        return [n for n in self.nodes if buf in n.inputs]

    def with_changes(self, *, nodes=None, buffers=None, name=None) -> "Graph":
        return Graph(
            name=self.name if name is None else name,
            nodes=list(self.nodes) if nodes is None else list(nodes),
            buffers=dict(self.buffers) if buffers is None else dict(buffers),
            inputs=self.inputs,
            outputs=self.outputs,
        )


@dataclass(frozen=True)
class Schedule:
    """Total execution order over a graph's nodes."""

    nodes: tuple[str, ...]

    def index(self, node: str) -> int:
        return self.nodes.index(node)

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    where: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.where}: {self.message}"


def validate(g: Graph) -> list[Diagnostic]:
    """Check graph invariants. Returns one diagnostic per violation; an empty
    list means the graph is structurally sound for all downstream stages."""
    diags: list[Diagnostic] = []
    seen_nodes: set[str] = set()
    for n in g.nodes:
        if n.name in seen_nodes:
            diags.append(Diagnostic("dup-node", n.name, "duplicate node name"))
        seen_nodes.add(n.name)
        for ref in (*n.inputs, *n.outputs):
            if ref not in g.buffers:
                diags.append(Diagnostic("dangling-ref", n.name, f"references unknown buffer {ref!r}"))

    for name in (*g.inputs, *g.outputs):
        if name not in g.buffers:
            diags.append(Diagnostic("dangling-ref", "io", f"graph io names unknown buffer {name!r}"))

    writers: dict[str, list[str]] = {}
    for n in g.nodes:
        for out in n.outputs:
            writers.setdefault(out, []).append(n.name)
    for buf, ws in writers.items():
        if len(ws) > 1:
            diags.append(Diagnostic("multi-writer", buf, f"written by {', '.join(ws)}"))
        if buf in g.buffers and g.buffers[buf].kind == "constant":
            diags.append(Diagnostic("constant-write", buf, f"constant written by {ws[0]}"))

    for b in g.buffers.values():
        if b.kind == "constant":
            if b.payload is None:
                diags.append(Diagnostic("payload-missing", b.name, "constant without payload"))
            elif b.dtype is None:
                diags.append(Diagnostic("dtype-missing", b.name, "constant without dtype"))
            elif len(b.payload) != b.nbytes():
                diags.append(
                    Diagnostic(
                        "payload-size",
                        b.name,
                        f"payload is {len(b.payload)} bytes, shape {list(b.shape)} "
                        f"x {b.dtype.name} needs {b.nbytes()}",
                    )
                )

    cycle = _find_cycle(g)
    if cycle:
        diags.append(Diagnostic("cycle", " -> ".join(cycle), "dependency cycle"))
    else:
        # Reachability only meaningful on acyclic graphs.
        live = set(g.inputs) | {b.name for b in g.buffers.values() if b.kind == "constant"}
        for n in g.nodes:
            if all(i in live for i in n.inputs):
                live |= set(n.outputs)
        for out in g.outputs:
            if out in g.buffers and out not in live:
                diags.append(Diagnostic("unreachable-output", out, "not derivable from inputs/constants"))
    return diags


def _find_cycle(g: Graph) -> list[str] | None:
    produced_by = {out: n.name for n in g.nodes for out in n.outputs}
    adj = {
        n.name: sorted({produced_by[i] for i in n.inputs if i in produced_by})
        for n in g.nodes
    }
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {name: WHITE for name in adj}
    stack: list[str] = []

    def visit(v: str) -> list[str] | None:
        color[v] = GRAY
        stack.append(v)
        for u in adj[v]:
            if color[u] == GRAY:
                return stack[stack.index(u):] + [u]
            if color[u] == WHITE:
                found = visit(u)
                if found:
                    return found
        stack.pop()
        color[v] = BLACK
        return None

    for v in adj:
        if color[v] == WHITE:
            found = visit(v)
            if found:
                return found
    return None


def topo_schedule(g: Graph) -> Schedule:
    """Deterministic topological order; ties broken by node declaration index."""
    decl = {n.name: i for i, n in enumerate(g.nodes)}
    produced_by = {out: n.name for n in g.nodes for out in n.outputs}
    indeg = {n.name: 0 for n in g.nodes}
    succ: dict[str, list[str]] = {n.name: [] for n in g.nodes}
    for n in g.nodes:
        preds = {produced_by[i] for i in n.inputs if i in produced_by}
        indeg[n.name] = len(preds)
        for p in preds:
            succ[p].append(n.name)

    ready = [decl[name] for name, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    names = [n.name for n in g.nodes]
    while ready:
        idx = heapq.heappop(ready)
        name = names[idx]
        order.append(name)
        for s in sorted(set(succ[name]), key=decl.get):
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, decl[s])
    if len(order) != len(g.nodes):
        stuck = sorted(set(names) - set(order))
        raise GraphError(f"cycle detected; unschedulable nodes: {', '.join(stuck)}")
    return Schedule(tuple(order))


# ---------------------------------------------------------------------------
# Graph file format (ONNX-subset text document + little-endian weight blob)
# ---------------------------------------------------------------------------

_PAYLOAD_ALIGN = 16


def serialize_graph(g: Graph) -> tuple[str, bytes]:
    """Serialize to the versioned graph document plus the weight blob.

    Output is byte-normalized: serializing a parsed document reproduces it
    exactly. Constant payloads are packed in buffer declaration order at
    16-byte aligned offsets.
    """
    blob = bytearray()
    tensors = []
    for b in g.buffers.values():
        entry: dict = {
            "name": b.name,
            "kind": b.kind,
            "scope": b.scope,
            "shape": list(b.shape),
            "dtype": b.dtype.name if b.dtype is not None else None,
        }
        if b.kind == "constant":
            if b.payload is None:
                raise GraphError(f"buffer {b.name}: constant without payload")
            pad = (-len(blob)) % _PAYLOAD_ALIGN
            blob.extend(b"\x00" * pad)
            entry["payload"] = [len(blob), len(b.payload)]
            blob.extend(b.payload)
        tensors.append(entry)
    doc = {
        "version": GRAPH_FORMAT_VERSION,
        "name": g.name,
        "tensors": tensors,
        "nodes": [
            {
                "name": n.name,
                "op": n.op,
                "attrs": n.attrs,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
            }
            for n in g.nodes
        ],
        "io": {"inputs": list(g.inputs), "outputs": list(g.outputs)},
    }
    return json.dumps(doc, indent=1) + "\n", bytes(blob)


def parse_graph(text: str, weights: bytes = b"") -> Graph:
    """Parse a graph document, materializing constant payloads from the blob.

    Raises GraphError with node/buffer names for malformed documents; runs
    :func:`validate` and rejects graphs with structural diagnostics.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"malformed graph document: {exc}") from None
    if not isinstance(doc, dict):
        raise GraphError("malformed graph document: top level is not an object")
    version = doc.get("version")
    if version != GRAPH_FORMAT_VERSION:
        raise GraphError(f"unsupported graph format version {version!r}")

    buffers: dict[str, Buffer] = {}
    for t in doc.get("tensors", []):
        name = t.get("name")
        if not isinstance(name, str) or not name:
            raise GraphError("tensor entry without a name")
        if name in buffers:
            raise GraphError(f"duplicate tensor {name!r}")
        dtype_name = t.get("dtype")
        if dtype_name is not None and dtype_name not in DTYPES:
            raise GraphError(f"tensor {name}: unknown dtype {dtype_name!r}")
        payload = None
        if t.get("kind") == "constant":
            ref = t.get("payload")
            if (
                not isinstance(ref, list)
                or len(ref) != 2
                or not all(isinstance(v, int) and v >= 0 for v in ref)
            ):
                raise GraphError(f"tensor {name}: constant without payload offset/length")
            off, length = ref
            if off + length > len(weights):
                raise GraphError(
                    f"tensor {name}: payload [{off}, {off + length}) outside "
                    f"{len(weights)}-byte weight blob"
                )
            payload = bytes(weights[off:off + length])
        try:
            buffers[name] = Buffer(
                name=name,
                kind=t.get("kind", ""),
                scope=t.get("scope", ""),
                shape=tuple(t.get("shape", ())),
                dtype=DTYPES[dtype_name] if dtype_name else None,
                payload=payload,
            )
        except (TypeError, ValueError) as exc:
            raise GraphError(f"tensor {name}: {exc}") from None

    nodes: list[Node] = []
    seen = set()
    for nd in doc.get("nodes", []):
        name = nd.get("name")
        if not isinstance(name, str) or not name:
            raise GraphError("node entry without a name")
        if name in seen:
            raise GraphError(f"duplicate node {name!r}")
        seen.add(name)
        op = nd.get("op")
        if not isinstance(op, str) or not op:
            raise GraphError(f"node {name}: missing op kind")
        from .kernels import OP_SCHEMAS  # late import; kernels imports ir

        if op not in OP_SCHEMAS:
            raise GraphError(f"node {name}: unknown op kind {op!r}")
        nodes.append(
            Node(
                name=name,
                op=op,
                attrs=dict(nd.get("attrs", {})),
                inputs=tuple(nd.get("inputs", ())),
                outputs=tuple(nd.get("outputs", ())),
            )
        )

    io = doc.get("io", {})
    g = Graph(
        name=doc.get("name", "graph"),
        nodes=nodes,
        buffers=buffers,
        inputs=tuple(io.get("inputs", ())),
        outputs=tuple(io.get("outputs", ())),
    )
    diags = validate(g)
    if diags:
        raise GraphError("invalid graph: " + "; ".join(str(d) for d in diags))
    return g


def graphs_equal(a: Graph, b: Graph) -> bool:
    if (a.name, a.inputs, a.outputs) != (b.name, b.inputs, b.outputs):
        return False
    if [n for n in a.nodes] != [n for n in b.nodes]:
        return False
    if list(a.buffers) != list(b.buffers):
        return False
    return all(a.buffers[k] == b.buffers[k] for k in a.buffers)


def relabel(g: Graph, name: str) -> Graph:
    return replace(g, name=name)
