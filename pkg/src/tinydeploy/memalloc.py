"""Lifetime analysis and the joint tiling + static allocation solve.

Allocation follows the Tetris rule: buffers are placed one after another in
a chosen order, each at offset = max running top (H value) over the
earlier-placed buffers whose lifetimes overlap; the first-placed buffer's H
is its own size. The solver searches the placement order (exact
branch-and-bound up to 8 buffers per level, deterministic multi-start plus
local search beyond) jointly with the tile-size variables: dimension
variables are assigned to maximize the tiling objective subject to
per-level capacity, then orders are solved per level; when a level's Tetris
peak still exceeds capacity the capacity budget used by the variable
assignment is tightened and the solve repeats.

Everything is deterministic: budgets are counted in solver work units, not
wall-clock time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .frontend import Binding
from .ir import Graph, Schedule
from .kernels import transient_bytes
from .target import TargetDescription
from .tileflow import ConstraintProgram


class AllocError(Exception):
    """Allocation failure: infeasible capacity or malformed problem."""


ALIGN = 8


def align_up(n: int, a: int = ALIGN) -> int:
    return -(-n // a) * a


@dataclass(frozen=True)
class Lifetime:
    start: int
    end: int  # inclusive schedule steps

    def overlaps(self, other: "Lifetime") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass
class AllocEntry:
    """One allocatable object: a graph buffer (concrete size), a tile arena
    (size variable) or a kernel transient (function of the solved tile)."""

    name: str
    lifetime: Lifetime
    size: int | None = None
    sizevar: int | None = None
    transient: tuple[str, dict, str] | None = None  # (op, attrs, out tensor)


@dataclass
class AllocationProblem:
    level: str
    capacity: int
    entries: list[AllocEntry] = field(default_factory=list)

    def has_variable_sizes(self) -> bool:
        return any(e.sizevar is not None or e.transient is not None
                   for e in self.entries)


@dataclass
class LevelMap:
    level: str
    order: list[str]
    entries: list[tuple[str, int, int]]  # (name, offset, reserved bytes)
    peak: int
    capacity: int
    optimal: bool
    lifetimes: dict[str, Lifetime] = field(default_factory=dict)

    def offsets(self) -> dict[str, int]:
        return {n: off for n, off, _ in self.entries}


@dataclass
class MemoryMap:
    levels: dict[str, LevelMap] = field(default_factory=dict)


@dataclass
class TilingSolution:
    values: list[int]                               # canonical var assignment
    tile_shapes: dict[tuple[str, str], tuple[int, ...]] = field(default_factory=dict)
    factor: int = 1
    optimal: bool = True


@dataclass
class SolveReport:
    rounds: int = 0
    tiling_exact: bool = True
    alloc_optimal: dict[str, bool] = field(default_factory=dict)
    objective_bytes: int = 0

    @property
    def fully_optimal(self) -> bool:
        return self.tiling_exact and all(self.alloc_optimal.values())


# ---------------------------------------------------------------------------
# Lifetimes
# ---------------------------------------------------------------------------

def compute_lifetimes(g: Graph, schedule: Schedule) -> dict[str, Lifetime]:
    """Lifetime per graph buffer over the schedule. Globals (graph I/O, KV
    caches, constants) span the whole inference; locals live from producer
    to last consumer."""
    n = max(1, len(schedule))
    step = {name: i for i, name in enumerate(schedule.nodes)}
    by_name = {nd.name: nd for nd in g.nodes}
    out: dict[str, Lifetime] = {}
    produced: dict[str, int] = {}
    last_use: dict[str, int] = {}
    for name in schedule.nodes:
        nd = by_name[name]
        for buf in nd.outputs:
            produced.setdefault(buf, step[name])
        for buf in nd.inputs:
            last_use[buf] = max(last_use.get(buf, -1), step[name])
    for b in g.buffers.values():
        if b.kind == "constant" or b.scope == "global":
            out[b.name] = Lifetime(0, n - 1)
            continue
        if b.name not in produced:
            if b.name in g.inputs:
                out[b.name] = Lifetime(0, n - 1)
                continue
            raise AllocError(f"buffer {b.name} is never produced")
        start = produced[b.name]
        out[b.name] = Lifetime(start, max(last_use.get(b.name, start), start))
    return out


def arena_name(tensor: str, level: str) -> str:
    return f"~{tensor}@{level}"


def transient_name(node: str) -> str:
    return f"~tmp:{node}"


def build_allocation_problems(g: Graph, binding: Binding, t: TargetDescription,
                              schedule: Schedule, cp: ConstraintProgram
                              ) -> list[AllocationProblem]:
    """One AllocationProblem per memory level: graph buffers at their
    annotated level, tile arenas and transients at the compute level of the
    nodes that use them. Double-buffered arenas get their lifetime extended
    one step on each side (prefetch/writeback overlap)."""
    n = max(1, len(schedule))
    graph_lt = compute_lifetimes(g, schedule)
    probs: dict[str, AllocationProblem] = {}

    def prob(level: str) -> AllocationProblem:
        if level not in probs:
            probs[level] = AllocationProblem(level, t.level(level).capacity)
        return probs[level]

    for b in g.buffers.values():
        if b.level is None:
            raise AllocError(f"buffer {b.name} has no level annotation")
        prob(b.level).entries.append(
            AllocEntry(b.name, graph_lt[b.name], size=align_up(b.nbytes())))

    uses: dict[tuple[str, str], list[int]] = {}
    by_name = {nd.name: nd for nd in g.nodes}
    for nt in cp.nodes:
        for _, buf in nt.hop_inputs + nt.hop_outputs:
            uses.setdefault((buf, nt.compute_level), []).append(nt.step)
    delta = 1 if cp.double_buffer else 0
    for (buf, level), steps in uses.items():
        sv = cp.sizevar_of[(buf, level)]
        lt = Lifetime(max(0, min(steps) - delta), min(n - 1, max(steps) + delta))
        prob(level).entries.append(AllocEntry(arena_name(buf, level), lt, sizevar=sv))
    for nt in cp.nodes:
        node = by_name[nt.node]
        if nt.compute_level is None:
            continue
        if transient_bytes(node.op, node.attrs, g.buffer(node.outputs[0]).shape) > 0:
            prob(nt.compute_level).entries.append(
                AllocEntry(transient_name(nt.node), Lifetime(nt.step, nt.step),
                           transient=(node.op, dict(node.attrs), node.outputs[0])))
    order = [t.root_level()] + sorted(l for l in probs if l != t.root_level())
    return [probs[l] for l in order if l in probs]


# ---------------------------------------------------------------------------
# Tetris allocation
# ---------------------------------------------------------------------------

def tetris_allocate(order: list[str], lifetimes: dict[str, Lifetime],
                    sizes: dict[str, int]) -> tuple[dict[str, int], int]:
    """Place buffers in the given order: offset_j = max H_i over
    earlier-placed overlapping i (0 if none), H_j = offset_j + size_j,
    peak = max H_j."""
    offsets: dict[str, int] = {}
    tops: list[tuple[str, int]] = []
    peak = 0
    for name in order:
        lt = lifetimes[name]
        off = 0
        for prev, top in tops:
            if lifetimes[prev].overlaps(lt) and top > off:
                off = top
        offsets[name] = off
        h = off + sizes[name]
        tops.append((name, h))
        peak = max(peak, h)
    return offsets, peak


def max_step_load(entries: list[str], lifetimes: dict[str, Lifetime],
                  sizes: dict[str, int]) -> int:
    """Max over steps of the total live bytes: a lower bound on any
    allocation's peak."""
    events: dict[int, int] = {}
    for name in entries:
        lt = lifetimes[name]
        events[lt.start] = events.get(lt.start, 0) + sizes[name]
        events[lt.end + 1] = events.get(lt.end + 1, 0) - sizes[name]
    load = best = 0
    for step in sorted(events):
        load += events[step]
        best = max(best, load)
    return best


EXACT_ALLOC_LIMIT = 8


class _Evaluator:
    """Incremental Tetris evaluation over an interference adjacency."""

    def __init__(self, names: list[str], lifetimes: dict[str, Lifetime],
                 sizes: dict[str, int]):
        self.names = names
        self.sizes = [sizes[m] for m in names]
        n = len(names)
        self.adj: list[list[int]] = [[] for _ in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if lifetimes[names[i]].overlaps(lifetimes[names[j]]):
                    self.adj[i].append(j)
                    self.adj[j].append(i)
        self.adj_set = [set(a) for a in self.adj]

    def peak(self, order: list[int]) -> int:
        pos = [0] * len(self.names)
        for p, i in enumerate(order):
            pos[i] = p
        tops = [0] * len(self.names)
        best = 0
        for p, i in enumerate(order):
            off = 0
            for j in self.adj[i]:
                if pos[j] < p and tops[j] > off:
                    off = tops[j]
            tops[i] = off + self.sizes[i]
            if tops[i] > best:
                best = tops[i]
        return best

    def tops(self, order: list[int]) -> list[int]:
        pos = [0] * len(self.names)
        for p, i in enumerate(order):
            pos[i] = p
        tops = [0] * len(self.names)
        for p, i in enumerate(order):
            off = 0
            for j in self.adj[i]:
                if pos[j] < p and tops[j] > off:
                    off = tops[j]
            tops[i] = off + self.sizes[i]
        return tops


def _split_overlap_all(names: list[str], lifetimes: dict[str, Lifetime],
                       sizes: dict[str, int]) -> tuple[list[str], list[str]]:
    """Peel off buffers overlapping every other buffer: placing them first
    is optimal (each contributes its size below everything), so only the
    remaining core needs order search."""
    base: list[str] = []
    core = list(names)
    while len(core) > 1:
        min_end = min(lifetimes[m].end for m in core)
        max_start = max(lifetimes[m].start for m in core)
        hit = [m for m in core
               if lifetimes[m].start <= min_end and lifetimes[m].end >= max_start]
        if not hit:
            break
        base.extend(sorted(hit, key=lambda m: (-sizes[m], m)))
        hitset = set(hit)
        core = [m for m in core if m not in hitset]
    if len(core) == 1:
        base.extend(core)
        core = []
    return base, core


def _core_exact(ev: _Evaluator, core_idx: list[int], lower: int,
                budget: list[int]) -> tuple[list[int], int, bool]:
    """Branch-and-bound over core placement orders; exact minimum peak."""
    best_order = sorted(core_idx)
    best_peak = ev.peak(best_order)
    complete = [True]

    def rec(order: list[int], pos: dict[int, int], tops: dict[int, int],
            cur_peak: int, remaining: list[int]):
        nonlocal best_order, best_peak
        if best_peak <= lower:
            return
        if budget[0] <= 0:
            complete[0] = False
            return
        budget[0] -= 1
        if cur_peak >= best_peak:
            return
        if not remaining:
            best_order, best_peak = list(order), cur_peak
            return
        for i, cand in enumerate(remaining):
            off = 0
            for j in ev.adj[cand]:
                if j in pos and tops[j] > off:
                    off = tops[j]
            h = off + ev.sizes[cand]
            order.append(cand)
            pos[cand] = len(order) - 1
            tops[cand] = h
            rec(order, pos, tops, max(cur_peak, h), remaining[:i] + remaining[i + 1:])
            order.pop()
            del pos[cand]
            del tops[cand]

    rec([], {}, {}, 0, sorted(core_idx))
    return best_order, best_peak, complete[0]


def _best_fit_order(ev: _Evaluator, core_idx: list[int],
                    process_key) -> list[int]:
    """Greedy best-fit allocation (lowest gap that fits, gap filling
    allowed), converted to a placement order by sorting on the chosen
    offsets. Replaying that order through the Tetris rule never exceeds the
    best-fit peak, so this turns a strong allocation heuristic into a
    strong order heuristic."""
    placed: list[tuple[int, int, int]] = []  # (index, offset, top)
    offsets: dict[int, int] = {}
    for i in sorted(core_idx, key=process_key):
        spans = sorted((off, top) for j, off, top in placed if j in ev.adj_set[i])
        pos = 0
        for off, top in spans:
            if off - pos >= ev.sizes[i]:
                break
            pos = max(pos, top)
        offsets[i] = pos
        placed.append((i, pos, pos + ev.sizes[i]))
    return sorted(core_idx, key=lambda i: (offsets[i], ev.names[i]))


def _core_search(ev: _Evaluator, core_idx: list[int],
                 lifetimes: dict[str, Lifetime], lower: int,
                 budget: list[int]) -> tuple[list[int], int]:
    """Multi-start (best-fit allocations plus lifetime/size sorts) and
    peak-directed local search: repeatedly try to reinsert a peak-defining
    buffer earlier (its offset only shrinks), falling back to an
    adjacent-swap sweep."""
    names = ev.names
    sizes = ev.sizes

    def key_start(i):
        return (lifetimes[names[i]].start, -sizes[i], names[i])

    starts = [
        _best_fit_order(ev, core_idx,
                        lambda i: (-sizes[i], lifetimes[names[i]].start, names[i])),
        _best_fit_order(ev, core_idx,
                        lambda i: (lifetimes[names[i]].start, -sizes[i], names[i])),
        sorted(core_idx, key=key_start),
        sorted(core_idx, key=lambda i: (-sizes[i], lifetimes[names[i]].start, names[i])),
        sorted(core_idx, key=lambda i: (lifetimes[names[i]].start,
                                        lifetimes[names[i]].end, names[i])),
        sorted(core_idx, key=lambda i: (lifetimes[names[i]].end, -sizes[i], names[i])),
    ]
    best_order, best_peak = None, None
    for cand in starts:
        p = ev.peak(cand)
        budget[0] -= 1
        if best_peak is None or p < best_peak:
            best_order, best_peak = list(cand), p

    while best_peak > lower and budget[0] > 0:
        tops = ev.tops(best_order)
        definers = sorted((i for i in best_order if tops[i] == best_peak),
                          key=lambda i: names[i])
        improved = False
        for b in definers:
            cur = best_order.index(b)
            for new_pos in range(cur):
                if budget[0] <= 0:
                    break
                budget[0] -= 1
                cand = list(best_order)
                cand.pop(cur)
                cand.insert(new_pos, b)
                p = ev.peak(cand)
                if p < best_peak:
                    best_order, best_peak = cand, p
                    improved = True
                    break
            if improved or budget[0] <= 0:
                break
        if improved:
            continue
        for i in range(len(best_order) - 1):
            if budget[0] <= 0:
                break
            budget[0] -= 1
            cand = list(best_order)
            cand[i], cand[i + 1] = cand[i + 1], cand[i]
            p = ev.peak(cand)
            if p < best_peak:
                best_order, best_peak = cand, p
                improved = True
                break
        if not improved:
            break
    return best_order, best_peak


def solve_level_order(entries: list[AllocEntry], sizes: dict[str, int],
                      budget: list[int]) -> tuple[list[str], int, bool, int]:
    """Min-peak Tetris order for concrete sizes. Returns (order, peak,
    provably_optimal, lower_bound). Exact (branch and bound) when the
    non-trivial core is at most EXACT_ALLOC_LIMIT buffers."""
    names = sorted(e.name for e in entries)
    lifetimes = {e.name: e.lifetime for e in entries}
    if not names:
        return [], 0, True, 0
    lb = max_step_load(names, lifetimes, sizes)
    base, core = _split_overlap_all(names, lifetimes, sizes)
    ev = _Evaluator(names, lifetimes, sizes)
    idx = {m: i for i, m in enumerate(names)}
    base_idx = [idx[m] for m in base]
    core_idx = [idx[m] for m in core]
    base_sum = sum(sizes[m] for m in base)
    if not core_idx:
        order = base
        _, peak = tetris_allocate(order, lifetimes, sizes)
        return order, peak, True, lb
    core_lower = max(0, lb - base_sum)
    if len(core_idx) <= EXACT_ALLOC_LIMIT:
        core_order, _core_peak, complete = _core_exact(ev, core_idx, core_lower, budget)
        exact = complete
    else:
        core_order, _core_peak, = _core_search(ev, core_idx, lifetimes,
                                               core_lower, budget)
        exact = False
    order = base + [names[i] for i in core_order]
    _, peak = tetris_allocate(order, lifetimes, sizes)
    return order, peak, exact or peak == lb, lb


# ---------------------------------------------------------------------------
# Variable assignment (tile sizing)
# ---------------------------------------------------------------------------

def _build_windows(problems: list[AllocationProblem]) -> list[tuple[str, int, list[AllocEntry]]]:
    """Deduplicated per-step live sets for levels with variable entries."""
    windows = []
    seen = set()
    for p in problems:
        if not p.has_variable_sizes():
            continue
        steps = sorted({e.lifetime.start for e in p.entries} |
                       {e.lifetime.end for e in p.entries})
        for s in steps:
            live = [e for e in p.entries
                    if e.lifetime.start <= s <= e.lifetime.end]
            key = (p.level, tuple(sorted(e.name for e in live)))
            if key in seen:
                continue
            seen.add(key)
            windows.append((p.level, s, live))
    return windows


def _entry_bytes(e: AllocEntry, cp: ConstraintProgram, g: Graph,
                 values: list[int]) -> int:
    """Reserved bytes of an entry under a variable assignment. Tile arenas
    reserve `factor` aligned slots; explicit sizes are taken verbatim."""
    if e.size is not None:
        return e.size
    if e.sizevar is not None:
        sv = cp.sizevars[e.sizevar]
        return sv.factor * align_up(sv.tile_bytes(values))
    op, attrs, out = e.transient
    return align_up(transient_bytes(op, attrs, cp.tile_shape(values, g, out)))


def _window_load(live: list[AllocEntry], cp, g, values) -> int:
    return sum(_entry_bytes(e, cp, g, values) for e in live)


EXACT_VAR_SPACE = 200_000
EXACT_VAR_COUNT = 12


def _solve_vars(cp: ConstraintProgram, problems: list[AllocationProblem],
                g: Graph, caps: dict[str, int], budget: list[int]
                ) -> tuple[list[int], bool]:
    """Assign canonical dim variables maximizing the tiling objective under
    per-step load caps. Exact enumeration for small spaces, deterministic
    water-fill + greedy growth otherwise."""
    values = [v.fixed if v.fixed is not None else v.hi_value() for v in cp.vars]
    free = [v for v in cp.vars if v.fixed is None]
    windows = [(lvl, s, live) for (lvl, s, live) in _build_windows(problems)]
    if not windows:
        return values, True

    def feasible(vals: list[int]) -> bool:
        return all(_window_load(live, cp, g, vals) <= caps[lvl]
                   for lvl, _s, live in windows)

    def objective(vals: list[int]) -> tuple:
        tot = sum(cp.sizevars[i].nbytes(vals) for i in cp.objective)
        mn = min((cp.sizevars[i].nbytes(vals) for i in cp.objective), default=0)
        return (tot, mn)

    order = sorted(free, key=lambda v: (v.first_use, v.members[0][0], -v.members[0][1]))
    if not free:
        if not feasible(values):
            raise AllocError(_min_report(cp, problems, g, caps))
        return values, True

    space = 1
    for v in order:
        space *= len(v.domain())
        if space > EXACT_VAR_SPACE:
            break
    if space <= EXACT_VAR_SPACE and len(order) <= EXACT_VAR_COUNT:
        vals = list(values)
        lo_vals = list(values)
        for v in order:
            lo_vals[v.index] = v.lo_value()
        best: tuple | None = None
        best_vals: list[int] | None = None

        def rec(i: int):
            nonlocal best, best_vals
            if budget[0] <= 0:
                return
            budget[0] -= 1
            # feasibility with unassigned vars at their minimum
            probe = list(vals)
            for v in order[i:]:
                probe[v.index] = v.lo_value()
            if not feasible(probe):
                return
            if i == len(order):
                cand = objective(vals) + (tuple(vals[v.index] for v in order),)
                if best is None or cand > best:
                    best, best_vals = cand, list(vals)
                return
            # optimistic objective with remaining at maximum
            opt = list(vals)
            for v in order[i:]:
                opt[v.index] = v.hi_value()
            if best is not None and objective(opt)[0] < best[0]:
                return
            for val in reversed(order[i].domain()):
                vals[order[i].index] = val
                rec(i + 1)
            vals[order[i].index] = order[i].hi_value()

        rec(0)
        if best_vals is None:
            raise AllocError(_min_report(cp, problems, g, caps))
        return best_vals, True

    # Water-fill: start maximal, shrink the largest contributor of the first
    # overloaded window, then grow greedily.
    vals = list(values)
    for _ in range(100_000):
        over = None
        for lvl, s, live in windows:
            load = _window_load(live, cp, g, vals)
            if load > caps[lvl]:
                over = (lvl, s, live, load)
                break
        if over is None:
            break
        lvl, s, live, load = over
        contrib = []
        for v in order:
            if vals[v.index] <= v.lo_value():
                continue
            c = 0
            for e in live:
                if e.sizevar is not None and v.index in cp.sizevars[e.sizevar].var_dims:
                    c += _entry_bytes(e, cp, g, vals)
            if c > 0:
                contrib.append((c, v))
        if not contrib:
            raise AllocError(_min_report(cp, problems, g, caps))
        contrib.sort(key=lambda cv: (-cv[0], cv[1].index))
        c, v = contrib[0]
        need = load - caps[lvl]
        keep = max(0, c - need) / c
        target = max(1, int(vals[v.index] * keep))
        dom = v.domain()
        smaller = [d for d in dom if d <= target and d < vals[v.index]]
        if not smaller:
            smaller = [d for d in dom if d < vals[v.index]]
        if not smaller:
            raise AllocError(_min_report(cp, problems, g, caps))
        vals[v.index] = smaller[-1]
    else:
        raise AllocError("tile sizing did not converge")

    for _ in range(2):  # greedy growth passes
        for v in order:
            for cand in reversed(v.domain()):
                if cand <= vals[v.index]:
                    break
                old = vals[v.index]
                vals[v.index] = cand
                if feasible(vals):
                    break
                vals[v.index] = old
    return vals, False


def _min_report(cp, problems, g, caps) -> str:
    lo = [v.fixed if v.fixed is not None else v.lo_value() for v in cp.vars]
    lines = []
    for p in problems:
        sizes = {e.name: _entry_bytes(e, cp, g, lo) for e in p.entries}
        lb = max_step_load([e.name for e in p.entries],
                           {e.name: e.lifetime for e in p.entries}, sizes)
        if lb > caps.get(p.level, p.capacity):
            lines.append(f"level {p.level}: minimum load {lb} bytes > "
                         f"capacity {p.capacity}")
    return "infeasible: " + ("; ".join(lines) or "capacity exceeded at minimal tiling")


# ---------------------------------------------------------------------------
# Joint solve
# ---------------------------------------------------------------------------

def solve_joint(cp: ConstraintProgram, problems: list[AllocationProblem],
                g: Graph, budget_units: int = 2_000_000, seed: int = 0
                ) -> tuple[TilingSolution, MemoryMap, SolveReport]:
    """Co-solve tile sizes and per-level Tetris orders. Deterministic for a
    given budget and seed; `seed` reserved for randomized restarts and kept
    in the signature for interface stability."""
    report = SolveReport()
    caps = {p.level: p.capacity for p in problems}
    var_levels = {p.level for p in problems if p.has_variable_sizes()}

    last_error = None
    for round_no in range(8):
        report.rounds = round_no + 1
        budget = [budget_units]
        values, exact_vars = _solve_vars(cp, problems, g, caps, budget)
        maps: dict[str, LevelMap] = {}
        over = []
        for p in problems:
            sizes = {e.name: _entry_bytes(e, cp, g, values) for e in p.entries}
            order, peak, optimal, lb = solve_level_order(p.entries, sizes, budget)
            offsets, peak2 = tetris_allocate(
                order, {e.name: e.lifetime for e in p.entries}, sizes)
            assert peak2 == peak
            maps[p.level] = LevelMap(
                level=p.level, order=order,
                entries=[(n, offsets[n], sizes[n]) for n in order],
                peak=peak, capacity=p.capacity, optimal=optimal,
                lifetimes={e.name: e.lifetime for e in p.entries})
            if peak > p.capacity:
                over.append((p, peak, lb))
        if not over:
            sol = TilingSolution(values=values, factor=2 if cp.double_buffer else 1,
                                 optimal=exact_vars)
            for (tensor, level) in cp.sizevar_of:
                sol.tile_shapes[(tensor, level)] = cp.tile_shape(values, g, tensor)
            report.tiling_exact = exact_vars
            report.alloc_optimal = {l: m.optimal for l, m in maps.items()}
            report.objective_bytes = sum(cp.sizevars[i].nbytes(values)
                                         for i in cp.objective)
            return sol, MemoryMap(levels=maps), report
        hard = [o for o in over if o[0].level not in var_levels]
        if hard:
            p, peak, lb = hard[0]
            raise AllocError(
                f"infeasible: level {p.level} needs at least {max(lb, 0)} bytes "
                f"(best-found peak {peak}) > capacity {p.capacity}")
        for p, peak, lb in over:
            new_cap = min(caps[p.level] - 1, caps[p.level] * p.capacity // peak)
            caps[p.level] = max(1, new_cap)
        last_error = f"peak {over[0][1]} > capacity {over[0][0].capacity} at level {over[0][0].level}"
    raise AllocError(f"infeasible: tightening did not converge ({last_error})")


# ---------------------------------------------------------------------------
# Transfer planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    tensor: str
    tile_index: int
    direction: str       # "in" | "out"
    src_level: str
    dst_level: str
    nbytes: int


def tile_grid(extent: tuple[int, ...], tile: tuple[int, ...]) -> list[tuple[tuple[int, int], ...]]:
    """Row-major enumeration of clamped tile ranges covering the extent."""
    counts = [max(1, -(-e // max(1, t))) for e, t in zip(extent, tile)]
    grid = []
    idx = [0] * len(counts)
    total = 1
    for c in counts:
        total *= c
    for _ in range(total):
        grid.append(tuple((i * t, min(e, (i + 1) * t))
                          for i, t, e in zip(idx, tile, extent)))
        for d in range(len(counts) - 1, -1, -1):
            idx[d] += 1
            if idx[d] < counts[d]:
                break
            idx[d] = 0
    return grid


def plan_transfers(cp: ConstraintProgram, sol: TilingSolution, g: Graph,
                   binding: Binding, t: TargetDescription,
                   schedule: Schedule) -> dict[str, list[Transfer]]:
    """Ordered DMA transfers per node: per tile, inputs in then outputs
    back; operands whose slice does not vary across the tile grid are
    fetched once. Operands resident in an engine-reachable level (the NPU's
    weight memory) generate no transfers."""
    from .kernels import registry

    by_name = {nd.name: nd for nd in g.nodes}
    plans: dict[str, list[Transfer]] = {}
    for nt in cp.nodes:
        node = by_name[nt.node]
        transfers: list[Transfer] = []
        if not (nt.hop_inputs or nt.hop_outputs):
            plans[nt.node] = transfers
            continue
        cl = nt.compute_level
        out_buf = g.buffer(node.outputs[0])
        tile = sol.tile_shapes.get((node.outputs[0], cl))
        if tile is None:
            tile = cp.tile_shape(sol.values, g, node.outputs[0])
        grid = tile_grid(out_buf.shape, tile)
        in_shapes = [g.buffer(b).shape for b in node.inputs]

        def slices_at(k: int):
            return registry.operand_slices(node.op, node.attrs, node.inputs,
                                           in_shapes, grid[k])

        first, last = slices_at(0), slices_at(len(grid) - 1)
        hop_in_idx = {i for i, _ in nt.hop_inputs}
        invariant = {i for i in hop_in_idx if first[i] == last[i]} \
            if len(grid) > 1 else set(hop_in_idx)

        def range_bytes(ranges, buf: str) -> int:
            n = g.buffer(buf).dtype.nbytes if g.buffer(buf).dtype else 1
            for lo, hi in ranges:
                n *= (hi - lo)
            return n

        for i in sorted(invariant):
            buf = node.inputs[i]
            transfers.append(Transfer(buf, 0, "in", g.buffer(buf).level, cl,
                                      range_bytes(first[i], buf)))
        for k in range(len(grid)):
            sl = slices_at(k)
            for i, buf in nt.hop_inputs:
                if i in invariant:
                    continue
                transfers.append(Transfer(buf, k, "in", g.buffer(buf).level, cl,
                                          range_bytes(sl[i], buf)))
            for _i, buf in nt.hop_outputs:
                out_ranges = grid[k]
                transfers.append(Transfer(buf, k, "out", cl, g.buffer(buf).level,
                                          range_bytes(out_ranges, buf)))
        plans[nt.node] = transfers
    return plans
