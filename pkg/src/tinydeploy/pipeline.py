"""End-to-end compilation driver: frontend lowering, tile constraint flow,
joint tiling + allocation solve, transfer planning, plan construction and
(optionally) source emission."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import backend, frontend, memalloc, tileflow
from .frontend import SCENARIOS, Binding, Scenario
from .ir import Graph, Schedule, topo_schedule, validate
from .memalloc import MemoryMap, SolveReport, TilingSolution, Transfer
from .target import TargetDescription


class CompileError(Exception):
    pass


@dataclass
class CompileResult:
    graph: Graph                    # lowered, annotated graph
    binding: Binding
    schedule: Schedule
    cp: tileflow.ConstraintProgram
    solution: TilingSolution
    memmap: MemoryMap
    transfers: dict[str, list[Transfer]]
    plans: list[backend.NodePlan]
    target: TargetDescription
    scenario: str
    double_buffer: bool
    report: SolveReport
    artifact: "backend.SourceArtifact | None" = None


def scenario_by_name(name: str) -> Scenario:
    if name not in SCENARIOS:
        raise CompileError(f"unknown scenario {name!r} "
                           f"(choose from {', '.join(SCENARIOS)})")
    return SCENARIOS[name]


def compile_graph(g: Graph, t: TargetDescription, scenario: str = "single-core",
                  double_buffer: bool = True, budget_units: int = 2_000_000,
                  seed: int = 0, emit: bool = True,
                  artifact_name: str | None = None) -> CompileResult:
    diags = validate(g)
    if diags:
        raise CompileError("invalid input graph: " + "; ".join(str(d) for d in diags))
    sc = scenario_by_name(scenario)
    lowered, binding = frontend.lower(g, t, sc)
    schedule = topo_schedule(lowered)
    cp = tileflow.build_tile_cp(lowered, binding, t, schedule, double_buffer)
    cp = tileflow.tiling_objective(cp, t)
    problems = memalloc.build_allocation_problems(lowered, binding, t, schedule, cp)
    solution, memmap, report = memalloc.solve_joint(cp, problems, lowered,
                                                    budget_units, seed)
    transfers = memalloc.plan_transfers(cp, solution, lowered, binding, t, schedule)
    plans = backend.build_plans(lowered, binding, t, schedule, cp, solution,
                                memmap, transfers)
    result = CompileResult(
        graph=lowered, binding=binding, schedule=schedule, cp=cp,
        solution=solution, memmap=memmap, transfers=transfers, plans=plans,
        target=t, scenario=scenario, double_buffer=double_buffer, report=report)
    if emit:
        result.artifact = backend.emit(result, artifact_name or g.name)
    return result
