"""Command-line driver: compile, run, report and corpus generation.

Exit codes (stable):
  0  success
  2  usage error
  3  input parse/validation error
  4  infeasible (capacity cannot be met)
  5  run/simulation error (including artifact consistency failures)
  6  internal error

Verbosity via the TINYDEPLOY_LOG environment variable (DEBUG/INFO/WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("tinydeploy")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_INFEASIBLE = 4
EXIT_RUN = 5
EXIT_INTERNAL = 6

# --budget-ms is a nominal scale: it converts to deterministic solver work
# units so identical flags give byte-identical artifacts (no wall clock).
UNITS_PER_MS = 200


def _setup_logging() -> None:
    level = os.environ.get("TINYDEPLOY_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")


def _load_target(spec: str):
    from .target import load_preset, load_target
    if os.path.exists(spec):
        return load_target(open(spec).read())
    return load_preset(spec)


def _read_graph(graph_path: str, weights_path: str | None):
    from .ir import parse_graph
    text = open(graph_path).read()
    if weights_path is None:
        guess = os.path.splitext(graph_path)[0] + ".weights.bin"
        weights_path = guess if os.path.exists(guess) else None
    blob = open(weights_path, "rb").read() if weights_path else b""
    return parse_graph(text, blob)


def _write_graph(g, out_dir: str, stem: str) -> tuple[str, str]:
    from .ir import serialize_graph
    text, blob = serialize_graph(g)
    os.makedirs(out_dir, exist_ok=True)
    gpath = os.path.join(out_dir, stem + ".json")
    wpath = os.path.join(out_dir, stem + ".weights.bin")
    with open(gpath, "w") as f:
        f.write(text)
    with open(wpath, "wb") as f:
        f.write(blob)
    return gpath, wpath


def _mem_report(result) -> str:
    from .sim import memory_trace
    lines = []
    for lvl in sorted(result.memmap.levels):
        m = result.memmap.levels[lvl]
        lines.append(f"level {lvl}: peak {m.peak} / capacity {m.capacity} "
                     f"(order {'optimal' if m.optimal else 'best-effort'})")
        lines.append("  symbol\toffset\tsize\tlife")
        for name, off, size in m.entries:
            lt = m.lifetimes[name]
            lines.append(f"  {name}\t{off}\t{size}\t[{lt.start},{lt.end}]")
    trace = memory_trace(result.memmap, max(1, len(result.plans)))
    lines.append("")
    lines.append("occupancy by step (bytes in use per level):")
    lines.append("step\t" + "\t".join(sorted(trace.occupancy)))
    for s in range(max(len(v) for v in trace.occupancy.values())):
        row = [str(trace.occupancy[l][s]) for l in sorted(trace.occupancy)]
        lines.append(f"{s}\t" + "\t".join(row))
    return "\n".join(lines) + "\n"


def _cycles_report(result) -> str:
    from .sim import estimate_cycles
    rep = estimate_cycles(result.plans, result.graph, result.target,
                          result.double_buffer)
    lines = ["node\top\tengine\tkernel\tdma\toverlapped\toffload\tlatency"]
    for n in rep.nodes:
        lines.append(f"{n.node}\t{n.op}\t{n.engine}\t{n.kernel}\t{n.dma}"
                     f"\t{n.overlapped}\t{n.offload}\t{n.latency}")
    lines.append(f"total\t{rep.total}")
    lines.append(f"kernel_total\t{rep.kernel_total}")
    lines.append(f"dma_total\t{rep.dma_total}")
    lines.append(f"marshaling_fraction\t{rep.marshaling_fraction:.6f}")
    return "\n".join(lines) + "\n"


def _solver_log(result) -> str:
    r = result.report
    lines = [
        f"scenario\t{result.scenario}",
        f"double_buffer\t{'on' if result.double_buffer else 'off'}",
        f"rounds\t{r.rounds}",
        f"tiling_exact\t{r.tiling_exact}",
        f"objective_bytes\t{r.objective_bytes}",
        f"optimality\t{'exact' if r.fully_optimal else 'best-effort'}",
    ]
    for lvl in sorted(result.memmap.levels):
        m = result.memmap.levels[lvl]
        lines.append(f"level\t{lvl}\tpeak\t{m.peak}\tcapacity\t{m.capacity}"
                     f"\torder_optimal\t{m.optimal}")
    return "\n".join(lines) + "\n"


def cmd_compile(args) -> int:
    from .memalloc import AllocError
    from .ir import GraphError
    from .pipeline import CompileError, compile_graph
    from .target import TargetError
    from .tileflow import TileError

    try:
        g = _read_graph(args.graph, args.weights)
        t = _load_target(args.target)
    except (GraphError, TargetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    budget = max(1, args.budget_ms) * UNITS_PER_MS
    try:
        result = compile_graph(g, t, args.scenario,
                               double_buffer=args.double_buffer == "on",
                               budget_units=budget, seed=args.seed, emit=True)
    except (AllocError, TileError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CompileError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    out = args.out
    os.makedirs(out, exist_ok=True)
    for fn, text in result.artifact.files.items():
        with open(os.path.join(out, fn), "w") as f:
            f.write(text)
    _write_graph(result.graph, out, "graph")
    with open(os.path.join(out, "target.json"), "w") as f:
        f.write(open(args.target).read() if os.path.exists(args.target)
                else _preset_text(args.target))
    with open(os.path.join(out, "plan.json"), "w") as f:
        json.dump({
            "name": result.artifact.name,
            "scenario": args.scenario,
            "double_buffer": args.double_buffer == "on",
            "seed": args.seed,
            "budget_units": budget,
        }, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out, "solver_log.txt"), "w") as f:
        f.write(_solver_log(result))
    for rep in args.report or ():
        if rep == "mem":
            with open(os.path.join(out, "mem.txt"), "w") as f:
                f.write(_mem_report(result))
        elif rep == "cycles":
            with open(os.path.join(out, "cycles.txt"), "w") as f:
                f.write(_cycles_report(result))
        elif rep == "cp":
            with open(os.path.join(out, "cp.txt"), "w") as f:
                f.write(result.cp.dump(result.solution.values))
    log.info("compiled %s: %d nodes, optimality %s", g.name, len(result.plans),
             "exact" if result.report.fully_optimal else "best-effort")
    print(f"compiled {g.name} -> {out} "
          f"({'exact' if result.report.fully_optimal else 'best-effort'})")
    return EXIT_OK


def _preset_text(name: str) -> str:
    from importlib import resources
    fname = name.replace("-", "_") + ".json"
    return resources.files("tinydeploy.targets").joinpath(fname).read_text()


def _recompile_artifact(artifact_dir: str):
    from .pipeline import compile_graph
    from .ir import parse_graph
    from .target import load_target
    with open(os.path.join(artifact_dir, "plan.json")) as f:
        plan = json.load(f)
    g = parse_graph(open(os.path.join(artifact_dir, "graph.json")).read(),
                    open(os.path.join(artifact_dir, "graph.weights.bin"), "rb").read())
    t = load_target(open(os.path.join(artifact_dir, "target.json")).read())
    result = compile_graph(g, t, plan["scenario"],
                           double_buffer=plan["double_buffer"],
                           budget_units=plan["budget_units"],
                           seed=plan["seed"], emit=True)
    return result, plan


def cmd_run(args) -> int:
    from .reference import np_dtype
    from .sim import SimError, run

    try:
        result, _plan = _recompile_artifact(args.artifact)
    except Exception as exc:
        print(f"error: cannot load artifact: {exc}", file=sys.stderr)
        return EXIT_PARSE
    # consistency: the stored manifest must match the recompiled memory map
    stored = open(os.path.join(args.artifact,
                               result.artifact.name + "_manifest.txt")).read()
    if stored != result.artifact.manifest:
        print("error: artifact manifest inconsistent with its plan "
              "(corrupted artifact?)", file=sys.stderr)
        return EXIT_RUN

    g = result.graph
    inputs = {}
    for name in g.inputs:
        path = os.path.join(args.inputs, name + ".bin")
        if not os.path.exists(path):
            print(f"error: missing input blob {path}", file=sys.stderr)
            return EXIT_PARSE
        buf = g.buffer(name)
        dt = np_dtype(result.binding.dtypes[name])
        data = np.fromfile(path, dtype=dt)
        if data.size != buf.elems:
            print(f"error: input {name}: {data.size} elements, "
                  f"expected {buf.elems}", file=sys.stderr)
            return EXIT_PARSE
        inputs[name] = data.reshape(buf.shape)
    try:
        outputs, trace, cycles = run(g, result.binding, result.target,
                                     result.plans, result.memmap, inputs,
                                     result.double_buffer)
    except SimError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_RUN
    out = args.out or os.path.join(args.artifact, "run_out")
    os.makedirs(out, exist_ok=True)
    for name, arr in outputs.items():
        arr.tofile(os.path.join(out, name + ".bin"))
    with open(os.path.join(out, "mem.txt"), "w") as f:
        f.write(_mem_report(result))
    with open(os.path.join(out, "cycles.txt"), "w") as f:
        f.write(_cycles_report(result))
    print(f"ran {g.name}: {len(outputs)} outputs -> {out} "
          f"(modeled cycles {cycles.total})")
    return EXIT_OK


def cmd_generate(args) -> int:
    from . import zoo

    try:
        if args.model == "llama":
            cfg = zoo.LlamaConfig(d_m=args.d_m, h=args.heads, n_layers=args.layers,
                                  d_ff=args.d_ff, vocab=args.vocab,
                                  context=args.context, seed=args.seed,
                                  mode=args.mode, s=args.seq)
            g = zoo.build_llama(cfg)
        else:
            g = zoo.build_encoder_layer(d_m=args.d_m, h=args.heads,
                                        d_ff=args.d_ff, s=args.seq,
                                        seed=args.seed)
    except zoo.ZooError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    gpath, wpath = _write_graph(g, args.out, g.name)
    print(f"{g.name}: {len(g.nodes)} nodes, {len(g.buffers)} buffers")
    print(f"wrote {gpath} and {wpath}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tinydeploy",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("compile", help="compile a graph to a target artifact")
    c.add_argument("--graph", required=True)
    c.add_argument("--weights", default=None,
                   help="weight blob (default: <graph>.weights.bin)")
    c.add_argument("--target", default="siracusa-like",
                   help="preset name (minimal, siracusa-like) or target file")
    c.add_argument("--scenario", default="single-core",
                   choices=["single-core", "octa-core", "npu", "npu+weightmem"])
    c.add_argument("--double-buffer", default="on", choices=["on", "off"])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--budget-ms", type=int, default=10000,
                   help="solver budget (deterministic work units, nominal ms)")
    c.add_argument("--report", action="append", choices=["mem", "cycles", "cp"])
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compile)

    r = sub.add_parser("run", help="simulate a compiled artifact on input blobs")
    r.add_argument("--artifact", required=True)
    r.add_argument("--inputs", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_run)

    g = sub.add_parser("generate", help="emit a corpus graph")
    g.add_argument("model", choices=["llama", "encoder"])
    g.add_argument("--layers", type=int, default=1)
    g.add_argument("--mode", default="parallel",
                   choices=["parallel", "autoregressive"])
    g.add_argument("--seq", type=int, default=8,
                   help="sequence length (parallel) or past length (autoregressive)")
    g.add_argument("--d-m", type=int, default=64, dest="d_m")
    g.add_argument("--heads", type=int, default=16)
    g.add_argument("--d-ff", type=int, default=256, dest="d_ff")
    g.add_argument("--vocab", type=int, default=256)
    g.add_argument("--context", type=int, default=192)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
