"""Declarative description of the virtual heterogeneous MCU.

A target is a tree of memory levels (root = largest, off-core level), a set
of compute engines with coarse throughput models, and DMA channel parameters
per non-root level. Two presets ship with the package: ``minimal`` (one
level, one scalar core; tiling degenerates to whole tensors) and
``siracusa_like`` (L2 -> L1 scratchpads, a dedicated weight memory reachable
only by the convolution NPU, an octa-core cluster and the NPU itself).

The cycle model is deliberately coarse: kernel cycles = work / throughput +
a fixed per-call overhead, DMA cycles = setup + bytes / bandwidth. Only
ordinal fidelity is claimed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

ENGINE_KINDS = ("scalar-core", "multi-core-cluster", "conv-npu")


class TargetError(Exception):
    """Malformed target description."""


@dataclass(frozen=True)
class MemoryLevel:
    name: str
    capacity: int
    parent: str | None = None
    dma_bandwidth: int = 0  # bytes per cycle, for transfers to/from parent
    dma_setup: int = 0      # cycles per transfer
    accessible_by: tuple[str, ...] = ()


@dataclass(frozen=True)
class Engine:
    name: str
    kind: str
    supported_ops: tuple[str, ...]  # empty = any op the registry offers
    throughput: dict[str, int] = field(default_factory=dict)  # op class -> units/cycle
    offload_setup: int = 0
    call_overhead: int = 0

    def units_per_cycle(self, op_class: str) -> int:
        if op_class in self.throughput:
            return self.throughput[op_class]
        return self.throughput.get("default", 1)


@dataclass(frozen=True)
class TargetDescription:
    name: str
    levels: dict[str, MemoryLevel]
    engines: dict[str, Engine]
    arena_level: dict[str, str]       # scope -> level name
    weight_level: str | None = None   # NMS analog, if present
    host_engine: str = ""

    def root_level(self) -> str:
        return next(l.name for l in self.levels.values() if l.parent is None)

    def level(self, name: str) -> MemoryLevel:
        try:
            return self.levels[name]
        except KeyError:
            raise TargetError(f"unknown memory level {name!r}") from None

    def engine(self, name: str) -> Engine:
        try:
            return self.engines[name]
        except KeyError:
            raise TargetError(f"unknown engine {name!r}") from None

    def compute_level(self, engine: str) -> str:
        """Level a kernel on `engine` executes from: the smallest reachable
        level (ties broken by name for determinism)."""
        reach = reachable_levels(self, engine)
        return min(reach, key=lambda n: (self.levels[n].capacity, n))


def reachable_levels(t: TargetDescription, engine: str) -> set[str]:
    """Levels the engine may read/write directly."""
    t.engine(engine)
    return {l.name for l in t.levels.values() if engine in l.accessible_by}


def load_target(text: str) -> TargetDescription:
    """Parse and validate a target file."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TargetError(f"malformed target file: {exc}") from None

    levels: dict[str, MemoryLevel] = {}
    for entry in doc.get("levels", []):
        name = entry.get("name")
        if not name:
            raise TargetError("level entry without a name")
        cap = entry.get("capacity", 0)
        if not isinstance(cap, int) or cap <= 0:
            raise TargetError(f"level {name}: capacity must be positive, got {cap!r}")
        dma = entry.get("dma", {})
        levels[name] = MemoryLevel(
            name=name,
            capacity=cap,
            parent=entry.get("parent"),
            dma_bandwidth=dma.get("bandwidth", 0),
            dma_setup=dma.get("setup", 0),
            accessible_by=tuple(entry.get("accessible_by", ())),
        )
    if not levels:
        raise TargetError("target has no memory levels")

    roots = [l for l in levels.values() if l.parent is None]
    if len(roots) != 1:
        raise TargetError(f"memory levels must form a tree with one root, got {len(roots)} roots")
    for l in levels.values():
        if l.parent is not None:
            if l.parent not in levels:
                raise TargetError(f"level {l.name}: unknown parent {l.parent!r}")
            if l.dma_bandwidth <= 0:
                raise TargetError(f"level {l.name}: non-root level needs a DMA channel to its parent")
        seen = {l.name}
        p = l.parent
        while p is not None:
            if p in seen:
                raise TargetError(f"level {l.name}: parent chain has a cycle")
            seen.add(p)
            p = levels[p].parent

    engines: dict[str, Engine] = {}
    for entry in doc.get("engines", []):
        name = entry.get("name")
        if not name:
            raise TargetError("engine entry without a name")
        kind = entry.get("kind")
        if kind not in ENGINE_KINDS:
            raise TargetError(f"engine {name}: unknown engine kind {kind!r}")
        thr = {k: int(v) for k, v in entry.get("throughput", {}).items()}
        if any(v <= 0 for v in thr.values()):
            raise TargetError(f"engine {name}: throughput entries must be positive")
        engines[name] = Engine(
            name=name,
            kind=kind,
            supported_ops=tuple(entry.get("supported_ops", ())),
            throughput=thr,
            offload_setup=int(entry.get("offload_setup", 0)),
            call_overhead=int(entry.get("call_overhead", 0)),
        )
    if not engines:
        raise TargetError("target has no engines")

    for e in engines.values():
        reach = [l for l in levels.values() if e.name in l.accessible_by]
        if not reach:
            raise TargetError(f"engine {e.name}: reaches no memory level")

    defaults = doc.get("defaults", {})
    arena = {
        "global": defaults.get("global_level"),
        "local": defaults.get("local_level"),
    }
    root = roots[0].name
    for scope in arena:
        if arena[scope] is None:
            arena[scope] = root
        elif arena[scope] not in levels:
            raise TargetError(f"defaults: unknown level {arena[scope]!r} for {scope} scope")
    weight_level = defaults.get("weight_level")
    if weight_level is not None and weight_level not in levels:
        raise TargetError(f"defaults: unknown weight level {weight_level!r}")
    host = defaults.get("host_engine")
    if host is None:
        scalars = [e.name for e in engines.values() if e.kind == "scalar-core"]
        host = scalars[0] if scalars else next(iter(engines))
    elif host not in engines:
        raise TargetError(f"defaults: unknown host engine {host!r}")

    return TargetDescription(
        name=doc.get("name", "target"),
        levels=levels,
        engines=engines,
        arena_level=arena,
        weight_level=weight_level,
        host_engine=host,
    )


def load_preset(name: str) -> TargetDescription:
    """Load one of the shipped target presets by name."""
    fname = name.replace("-", "_") + ".json"
    try:
        text = resources.files("tinydeploy.targets").joinpath(fname).read_text()
    except FileNotFoundError:
        raise TargetError(f"unknown target preset {name!r}") from None
    return load_target(text)
