"""Reference interpreter: evaluate a graph node by node on full tensors.

This is the semantic oracle for the whole pipeline. It knows nothing about
targets, tiling or memory levels; it walks the topological schedule and
applies each op's integer reference semantics. Simulator output must match
this byte for byte.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .ir import DataType, Graph, GraphError, topo_schedule

_NP_DTYPES = {
    "int8": np.int8,
    "uint8": np.uint8,
    "int16": np.int16,
    "int32": np.int32,
}


def np_dtype(dt: DataType | str):
    name = dt if isinstance(dt, str) else dt.name
    return np.dtype(_NP_DTYPES[name]).newbyteorder("<")


def constant_array(buf) -> np.ndarray:
    if buf.payload is None or buf.dtype is None:
        raise GraphError(f"buffer {buf.name}: constant without payload/dtype")
    arr = np.frombuffer(buf.payload, dtype=np_dtype(buf.dtype)).reshape(buf.shape)
    return arr


def evaluate(g: Graph, inputs: dict[str, np.ndarray],
             keep_intermediates: bool = False) -> dict[str, np.ndarray]:
    """Run the graph on named input arrays; returns the named outputs
    (plus every intermediate when requested)."""
    env: dict[str, np.ndarray] = {}
    for b in g.buffers.values():
        if b.kind == "constant":
            env[b.name] = constant_array(b)
    for name in g.inputs:
        buf = g.buffer(name)
        if name not in inputs:
            raise GraphError(f"missing graph input {name!r}")
        arr = np.asarray(inputs[name])
        if tuple(arr.shape) != buf.shape:
            raise GraphError(f"input {name}: shape {arr.shape} != declared {buf.shape}")
        if buf.dtype is not None and arr.dtype != np_dtype(buf.dtype):
            arr = arr.astype(np_dtype(buf.dtype))
        env[name] = arr

    for node_name in topo_schedule(g).nodes:
        node = next(n for n in g.nodes if n.name == node_name)
        ins = []
        for i, ref in enumerate(node.inputs):
            if ref not in env:
                raise GraphError(f"node {node.name}: input {ref!r} not computed")
            arr = env[ref]
            if node.op == "rope_q" and i in (1, 2):
                pos = int(node.attrs["pos"])
                s = env[node.inputs[0]].shape[0]
                if pos + s > arr.shape[0]:
                    raise kernels.KernelError(
                        f"node {node.name}: rope table underrun "
                        f"[{pos}, {pos + s}) of {arr.shape[0]}")
                arr = arr[pos:pos + s]
            ins.append(arr)
        out_buf = g.buffer(node.outputs[0])
        try:
            out = kernels.compute(node.op, tuple(ins), node.attrs,
                                  origin=(0,) * max(1, len(out_buf.shape)),
                                  out_shape=out_buf.shape)
        except kernels.KernelError as exc:
            raise kernels.KernelError(f"node {node.name}: {exc}") from None
        env[node.outputs[0]] = out

    if keep_intermediates:
        return env
    missing = [o for o in g.outputs if o not in env]
    if missing:
        raise GraphError(f"outputs never produced: {missing}")
    return {o: env[o] for o in g.outputs}


def random_inputs(g: Graph, seed: int) -> dict[str, np.ndarray]:
    """Deterministic random inputs for every graph input buffer."""
    rng = np.random.default_rng(seed)
    index_bounds = {
        n.inputs[1]: g.buffer(n.inputs[0]).shape[0]
        for n in g.nodes if n.op == "gather_rows"
    }
    out = {}
    for name in g.inputs:
        buf = g.buffer(name)
        dt = buf.dtype.name if buf.dtype else "int8"
        if dt == "int32":
            hi = index_bounds.get(name, 2)
            out[name] = rng.integers(0, hi, buf.shape, dtype=np.int64).astype(np.int32)
        else:
            out[name] = rng.integers(-127, 128, buf.shape, dtype=np.int64).astype(np_dtype(dt))
    return out
