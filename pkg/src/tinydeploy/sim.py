"""Schedule interpreter and memory/cycle simulator.

Executes the backend's per-node plans bit-exactly over flat per-level byte
arrays: DMA transfers are strided copies between levels, kernels run on
views into those arrays. Every level is initialized to a sentinel and
shadowed by a validity bitmap; a kernel or DMA reading bytes nobody wrote
is an error (this catches allocation bugs that output-exactness tests can
mask).

The cycle model is coarse and ordinal: kernel cycles = work / engine
throughput + a per-call overhead per tile; DMA cycles = per-transfer setup
+ bytes / bandwidth; a double-buffered node costs max(kernel, DMA) plus the
offload setup, a single-buffered one their sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .backend import NodePlan, OperandAccess
from .frontend import Binding
from .ir import Graph
from .memalloc import MemoryMap
from .reference import np_dtype
from .target import TargetDescription


class SimError(Exception):
    """Capacity violation, uninitialized read, or malformed run inputs."""


SENTINEL = 0xA5


@dataclass
class TransferEvent:
    step: int
    nbytes: int
    src: str
    dst: str
    cycles: int


@dataclass
class MemTrace:
    """Per-step memory accounting recomputed from the MemoryMap.

    ``live_bytes``: sum of reserved bytes of entries live at each step.
    ``occupancy``: top of the live allocation (max offset+size), i.e. the
    address-space extent actually in use; its per-level maximum must equal
    the allocator's reported peak."""

    live_bytes: dict[str, list[int]]
    occupancy: dict[str, list[int]]
    peaks: dict[str, int]
    events: list[TransferEvent] = field(default_factory=list)


@dataclass
class NodeCycles:
    node: str
    op: str
    engine: str
    kernel: int
    dma: int
    overlapped: int
    offload: int

    @property
    def latency(self) -> int:
        return self.kernel + self.dma - self.overlapped + self.offload


@dataclass
class CycleReport:
    nodes: list[NodeCycles] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(n.latency for n in self.nodes)

    @property
    def kernel_total(self) -> int:
        return sum(n.kernel for n in self.nodes)

    @property
    def dma_total(self) -> int:
        return sum(n.dma for n in self.nodes)

    @property
    def marshaling_fraction(self) -> float:
        total = self.total
        if total == 0:
            return 0.0
        return (total - self.kernel_total) / total

    def weight_dma_bytes(self, g: Graph, plans: list[NodePlan]) -> int:
        """Bytes of constant-operand DMA traffic (weight tiles)."""
        n = 0
        for p in plans:
            for tr in p.transfers:
                if g.buffer(tr.tensor).kind == "constant":
                    n += tr.nbytes
        return n


def validate_memmap(memmap: MemoryMap) -> None:
    """Independent safety check: concurrently-live entries occupy disjoint
    address ranges and stay under capacity."""
    for lvl, m in memmap.levels.items():
        for name, off, size in m.entries:
            if off + size > m.capacity:
                raise SimError(f"level {lvl}: {name} [{off}, {off + size}) "
                               f"exceeds capacity {m.capacity}")
        ents = m.entries
        for i in range(len(ents)):
            ni, oi, si = ents[i]
            for j in range(i + 1, len(ents)):
                nj, oj, sj = ents[j]
                if m.lifetimes[ni].overlaps(m.lifetimes[nj]):
                    if oi < oj + sj and oj < oi + si:
                        raise SimError(
                            f"level {lvl}: live ranges of {ni} and {nj} overlap: "
                            f"[{oi},{oi + si}) vs [{oj},{oj + sj})")


def memory_trace(memmap: MemoryMap, n_steps: int) -> MemTrace:
    live = {}
    occ = {}
    peaks = {}
    for lvl, m in memmap.levels.items():
        per_step = [0] * max(1, n_steps)
        top_step = [0] * max(1, n_steps)
        for name, off, size in m.entries:
            lt = m.lifetimes[name]
            for s in range(lt.start, min(lt.end, len(per_step) - 1) + 1):
                per_step[s] += size
                top_step[s] = max(top_step[s], off + size)
        live[lvl] = per_step
        occ[lvl] = top_step
        peaks[lvl] = max(top_step) if top_step else 0
    return MemTrace(live_bytes=live, occupancy=occ, peaks=peaks)


def _dma_params(t: TargetDescription, src: str, dst: str) -> tuple[int, int]:
    child = dst if t.level(dst).parent == src else src
    lvl = t.level(child)
    if lvl.dma_bandwidth <= 0:
        raise SimError(f"no DMA channel between {src} and {dst}")
    return lvl.dma_setup, lvl.dma_bandwidth


def estimate_cycles(plans: list[NodePlan], g: Graph, t: TargetDescription,
                    double_buffer: bool) -> CycleReport:
    from .kernels import registry

    rep = CycleReport()
    for p in plans:
        eng = t.engine(p.engine)
        tmpl = registry.kernel_by_id(p.kernel_id)
        thr = eng.units_per_cycle(tmpl.work_class)
        kern = 0
        for k, ranges in enumerate(p.grid):
            out_shape = tuple(hi - lo for lo, hi in ranges)
            in_shapes = [tuple(hi - lo for lo, hi in sl) for sl in p.in_slices[k]]
            work = registry.work_units(p.op, p.attrs, out_shape, in_shapes)
            kern += -(-work // thr) + eng.call_overhead
        dma = 0
        for tr in p.transfers:
            setup, bw = _dma_params(t, tr.src_level, tr.dst_level)
            dma += setup + -(-tr.nbytes // bw)
        offload = eng.offload_setup if p.engine != t.host_engine else 0
        overlapped = min(kern, dma) if (double_buffer and dma and kern) else 0
        rep.nodes.append(NodeCycles(p.name, p.op, p.engine, kern, dma,
                                    overlapped, offload))
    return rep


class _Memory:
    """Flat byte store per level with a validity shadow."""

    def __init__(self, t: TargetDescription, memmap: MemoryMap):
        self.mem: dict[str, np.ndarray] = {}
        self.valid: dict[str, np.ndarray] = {}
        for lvl, m in memmap.levels.items():
            cap = t.level(lvl).capacity
            self.mem[lvl] = np.full(cap, SENTINEL, dtype=np.uint8)
            self.valid[lvl] = np.zeros(cap, dtype=bool)

    def view(self, level: str, offset: int, dtype, shape) -> np.ndarray:
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        raw = self.mem[level][offset:offset + nbytes]
        return raw.view(dtype).reshape(shape)

    def valid_view(self, level: str, offset: int, itemsize: int, shape) -> np.ndarray:
        n = int(np.prod(shape)) * itemsize
        return self.valid[level][offset:offset + n].reshape(tuple(shape) + (itemsize,))


def _slices(ranges) -> tuple[slice, ...]:
    return tuple(slice(lo, hi) for lo, hi in ranges)


def run(g: Graph, binding: Binding, t: TargetDescription, plans: list[NodePlan],
        memmap: MemoryMap, inputs: dict[str, np.ndarray],
        double_buffer: bool) -> tuple[dict[str, np.ndarray], MemTrace, CycleReport]:
    """Execute the compiled schedule on named input blobs.

    Returns outputs bit-exact w.r.t. the reference interpreter, the memory
    trace (live bytes per level per step, transfer events) and the cycle
    report. Raises SimError on capacity violations or uninitialized reads.
    """
    validate_memmap(memmap)
    n_steps = max(1, len(plans))
    trace = memory_trace(memmap, n_steps)
    for lvl, per_step in trace.occupancy.items():
        cap = t.level(lvl).capacity
        for s, used in enumerate(per_step):
            if used > cap:
                raise SimError(f"capacity violation at step {s}, level {lvl}: "
                               f"{used} > {cap}")

    mem = _Memory(t, memmap)
    offsets = {lvl: m.offsets() for lvl, m in memmap.levels.items()}

    def buffer_view(name: str) -> tuple[np.ndarray, np.ndarray]:
        buf = g.buffer(name)
        dt = np_dtype(binding.dtypes[name])
        off = offsets[buf.level][name]
        return (mem.view(buf.level, off, dt, buf.shape),
                mem.valid_view(buf.level, off, dt.itemsize, buf.shape))

    for b in g.buffers.values():
        if b.kind == "constant":
            view, vmask = buffer_view(b.name)
            view[...] = np.frombuffer(b.payload, dtype=np_dtype(b.dtype)).reshape(b.shape)
            vmask[...] = True
    for name in g.inputs:
        if name not in inputs:
            raise SimError(f"missing input blob {name!r}")
        buf = g.buffer(name)
        arr = np.asarray(inputs[name])
        if tuple(arr.shape) != buf.shape:
            raise SimError(f"input {name}: shape {arr.shape} != {buf.shape}")
        view, vmask = buffer_view(name)
        view[...] = arr.astype(np_dtype(binding.dtypes[name]))
        vmask[...] = True

    for plan in plans:
        _exec_node(plan, g, binding, t, mem, offsets, trace)

    out = {}
    for name in g.outputs:
        view, vmask = buffer_view(name)
        if not vmask.all():
            raise SimError(f"output {name} incompletely written")
        out[name] = view.copy()
    return out, trace, estimate_cycles(plans, g, t, double_buffer)


def _exec_node(plan: NodePlan, g: Graph, binding: Binding, t: TargetDescription,
               mem: _Memory, offsets, trace: MemTrace) -> None:
    dts = {b: np_dtype(binding.dtypes[b])
           for b in [a.tensor for a in plan.inputs] + [plan.output.tensor]}

    def full_view(acc: OperandAccess):
        buf = g.buffer(acc.tensor)
        return (mem.view(acc.level, acc.offset, dts[acc.tensor], buf.shape),
                mem.valid_view(acc.level, acc.offset, dts[acc.tensor].itemsize,
                               buf.shape))

    def slot_view(acc: OperandAccess, k: int, shape):
        slot = 0 if acc.slots == 1 else (k % acc.slots)
        off = acc.offset + slot * acc.slot_stride
        return (mem.view(acc.level, off, dts[acc.tensor], shape),
                mem.valid_view(acc.level, off, dts[acc.tensor].itemsize, shape))

    dma_cycle_cache: dict[tuple[str, str], tuple[int, int]] = {}

    def log_transfer(src: str, dst: str, nbytes: int):
        key = (src, dst)
        if key not in dma_cycle_cache:
            dma_cycle_cache[key] = _dma_params(t, src, dst)
        setup, bw = dma_cycle_cache[key]
        trace.events.append(TransferEvent(plan.step, nbytes, src, dst,
                                          setup + -(-nbytes // bw)))

    for k, out_ranges in enumerate(plan.grid):
        ins = []
        for i, acc in enumerate(plan.inputs):
            ranges = plan.in_slices[k][i]
            shape = tuple(hi - lo for lo, hi in ranges)
            if acc.inplace:
                view, vmask = full_view(acc)
                sl = _slices(ranges)
                if not vmask[sl].all():
                    raise SimError(f"uninitialized read: {acc.tensor} at step "
                                   f"{plan.step} (node {plan.name})")
                ins.append(view[sl])
                continue
            # tiled operand: DMA in unless invariant and already fetched
            slot_k = 0 if i in plan.invariant else k
            tile, tile_valid = slot_view(acc, slot_k, shape)
            if not (i in plan.invariant and k > 0):
                src_view, src_valid = full_view(
                    OperandAccess(acc.tensor, True, g.buffer(acc.tensor).level,
                                  offsets[g.buffer(acc.tensor).level][acc.tensor]))
                sl = _slices(ranges)
                if not src_valid[sl].all():
                    raise SimError(f"uninitialized read: {acc.tensor} at step "
                                   f"{plan.step} (node {plan.name})")
                tile[...] = src_view[sl]
                tile_valid[...] = True
                log_transfer(g.buffer(acc.tensor).level, acc.level,
                             int(np.prod(shape)) * dts[acc.tensor].itemsize)
            if not tile_valid.all():
                raise SimError(f"uninitialized tile read: {acc.tensor} at step "
                               f"{plan.step} (node {plan.name})")
            ins.append(tile)

        out_shape = tuple(hi - lo for lo, hi in out_ranges)
        origin = tuple(lo for lo, _hi in out_ranges)
        try:
            result = kernels.compute(plan.op, tuple(ins), plan.attrs,
                                     origin=origin, out_shape=out_shape)
        except kernels.KernelError as exc:
            raise SimError(f"node {plan.name}: {exc}") from None

        acc = plan.output
        if acc.inplace:
            view, vmask = full_view(acc)
            sl = _slices(out_ranges)
            view[sl] = result
            vmask[sl] = True
        else:
            tile, tile_valid = slot_view(acc, k, out_shape)
            tile[...] = result
            tile_valid[...] = True
            dst_view, dst_valid = full_view(
                OperandAccess(acc.tensor, True, g.buffer(acc.tensor).level,
                              offsets[g.buffer(acc.tensor).level][acc.tensor]))
            sl = _slices(out_ranges)
            dst_view[sl] = tile
            dst_valid[sl] = True
            log_transfer(acc.level, g.buffer(acc.tensor).level,
                         int(np.prod(out_shape)) * dts[acc.tensor].itemsize)


def compare_buffering(g: Graph, t: TargetDescription, scenario: str,
                      budget_units: int = 2_000_000) -> tuple[int, int]:
    """Modeled total cycles of double- vs single-buffered compilations."""
    from .pipeline import compile_graph

    double = compile_graph(g, t, scenario, double_buffer=True,
                           budget_units=budget_units, emit=False)
    single = compile_graph(g, t, scenario, double_buffer=False,
                           budget_units=budget_units, emit=False)
    return (estimate_cycles(double.plans, double.graph, t, True).total,
            estimate_cycles(single.plans, single.graph, t, False).total)
