"""Tile-stitching property: executing a kernel per tile over any tiling its
constraint spec admits, then stitching the tiles, equals the untiled result
bit for bit. Exercises the same operand-slicing rules the planner uses."""

import numpy as np
import pytest

from tinydeploy import kernels
from tinydeploy.kernels import registry
from tinydeploy.memalloc import tile_grid


def run_tiled(op, attrs, ins, out_shape, tile, out_dtype):
    in_shapes = [tuple(a.shape) for a in ins]
    names = tuple(f"in{i}" for i in range(len(ins)))
    out = np.zeros(out_shape, dtype=out_dtype)
    for ranges in tile_grid(out_shape, tile):
        slices = registry.operand_slices(op, attrs, names, in_shapes, ranges)
        tiles = [np.ascontiguousarray(a[tuple(slice(lo, hi) for lo, hi in sl)])
                 for a, sl in zip(ins, slices)]
        shape = tuple(hi - lo for lo, hi in ranges)
        origin = tuple(lo for lo, _ in ranges)
        out[tuple(slice(lo, hi) for lo, hi in ranges)] = kernels.compute(
            op, tuple(tiles), attrs, origin=origin, out_shape=shape)
    return out


def admitted_tilings(op, attrs, names, in_shapes, out_shape, rng, k=4):
    """Random tile shapes satisfying the op's TileConstraintSpec."""
    spec = registry.tile_constraints_for(op, attrs, names, ("out",),
                                         list(in_shapes), [out_shape])
    fixed = {d: None for d in range(len(out_shape))}
    for tensor, dim in spec.untileable:
        if tensor == "out":
            fixed[dim] = out_shape[dim]
    # dims tied to an untileable input dim are fixed too
    for (ta, da), (tb, db) in spec.equalities:
        for (t1, d1), (t2, d2) in (((ta, da), (tb, db)), ((tb, db), (ta, da))):
            if t2 == "out" and (t1, d1) in spec.untileable:
                fixed[d2] = out_shape[d2]
    for _ in range(k):
        tile = tuple(
            fixed[d] if fixed[d] is not None
            else int(rng.integers(1, out_shape[d] + 1))
            for d in range(len(out_shape)))
        yield tile


CASES = []
_r = np.random.default_rng(99)


def _i8(shape):
    return _r.integers(-127, 128, shape).astype(np.int8)


RQ = {"mul": 733, "shift": 9, "zp": -2}
CASES.append(("gemm_q8", {"transB": 0, **RQ},
              (_i8((9, 7)), _i8((7, 13)), _r.integers(-99, 99, 13).astype(np.int32)),
              (9, 13)))
CASES.append(("gemm_q8", {"transB": 1, **RQ},
              (_i8((9, 7)), _i8((13, 7)), _r.integers(-99, 99, 13).astype(np.int32)),
              (9, 13)))
CASES.append(("conv1x1_q8", RQ,
              (_i8((10, 6)), _i8((8, 1, 1, 6)), _r.integers(-99, 99, 8).astype(np.int32)),
              (10, 8)))
CASES.append(("bmm_requant", RQ, (_i8((3, 5, 4)), _i8((3, 4, 6))), (3, 5, 6)))
CASES.append(("softmax_i", {"x0_q": -12, "b_q": 43, "c_q": 714, "out_bits": 7},
              (_i8((4, 6, 10)),), (4, 6, 10)))
CASES.append(("rmsnorm_i", {"eps_q": 1, "kshift": 10, **RQ},
              (_i8((7, 12)), _i8((12,))), (7, 12)))
CASES.append(("hardswish_q", {"three_q": 48, "six_q": 96, **RQ}, (_i8((6, 9)),),
              (6, 9)))
CASES.append(("add_requant", RQ, (_i8((5, 8)), _i8((5, 8))), (5, 8)))
CASES.append(("mul_requant", RQ, (_i8((5, 8)), _i8((5, 8))), (5, 8)))
CASES.append(("requant", RQ,
              (_r.integers(-(1 << 18), 1 << 18, (6, 7)).astype(np.int32),), (6, 7)))
CASES.append(("causal_mask", {"past": 2}, (_i8((2, 7, 9)),), (2, 7, 9)))
CASES.append(("transpose", {"perm": [1, 0, 2]}, (_i8((4, 5, 6)),), (5, 4, 6)))
CASES.append(("transpose", {"perm": [2, 0, 1]}, (_i8((3, 4, 5)),), (5, 3, 4)))
CASES.append(("concat_seq", {}, (_i8((4, 9)), _i8((2, 9))), (6, 9)))
CASES.append(("gather_rows", {},
              (_i8((11, 5)), _r.integers(0, 11, 7).astype(np.int32)), (7, 5)))
CASES.append(("reshape", {"shape": [6, 8]}, (_i8((4, 12)),), (6, 8)))
CASES.append(("rope_q", {"pos": 3, "mul": 1, "shift": 15, "zp": 0},
              (_i8((5, 3, 4)),
               _r.integers(-32767, 32768, (12, 2)).astype(np.int16),
               _r.integers(-32767, 32768, (12, 2)).astype(np.int16)),
              (5, 3, 4)))


@pytest.mark.parametrize("op,attrs,ins,out_shape",
                         CASES, ids=[f"{c[0]}-{i}" for i, c in enumerate(CASES)])
def test_tiled_equals_untiled(op, attrs, ins, out_shape):
    if op == "rope_q":
        pos = attrs["pos"]
        full_ins = (ins[0], ins[1][pos:pos + ins[0].shape[0]],
                    ins[2][pos:pos + ins[0].shape[0]])
    else:
        full_ins = ins
    full = kernels.compute(op, full_ins, attrs,
                           origin=(0,) * len(out_shape), out_shape=out_shape)
    rng = np.random.default_rng(hash(op) % (1 << 32))
    names = tuple(f"in{i}" for i in range(len(ins)))
    in_shapes = [tuple(a.shape) for a in ins]
    for tile in admitted_tilings(op, attrs, names, in_shapes, out_shape, rng):
        got = run_tiled(op, attrs, ins, out_shape, tile, full.dtype)
        assert np.array_equal(got, full), f"{op} tile {tile} does not stitch"


def test_tile_grid_covers_exactly_once():
    rng = np.random.default_rng(5)
    for _ in range(20):
        extent = tuple(int(v) for v in rng.integers(1, 12, 3))
        tile = tuple(int(rng.integers(1, e + 1)) for e in extent)
        seen = np.zeros(extent, dtype=int)
        for ranges in tile_grid(extent, tile):
            seen[tuple(slice(lo, hi) for lo, hi in ranges)] += 1
        assert np.all(seen == 1)


def test_npu_divisibility_constraint_content():
    spec = registry.tile_constraints_for(
        "conv1x1_q8", {"mul": 1, "shift": 0, "zp": 0}, ("x", "w", "b"), ("y",),
        [(16, 64), (256, 1, 1, 64), (256,)], [(16, 256)], engine_kind="conv-npu")
    assert (("y", 1), 32) in spec.divisibility
    host = registry.tile_constraints_for(
        "conv1x1_q8", {"mul": 1, "shift": 0, "zp": 0}, ("x", "w", "b"), ("y",),
        [(16, 64), (256, 1, 1, 64), (256,)], [(16, 256)], engine_kind="scalar-core")
    assert host.divisibility == []  # platform constraint kept separable


def test_softmax_constraints_content():
    spec = registry.tile_constraints_for(
        "softmax_i", {"x0_q": -12, "b_q": 43, "c_q": 714, "out_bits": 7},
        ("x",), ("y",), [(4, 16)], [(4, 16)])
    assert (("x", 1) in spec.untileable) and (("y", 1) in spec.untileable)
    eqs = {frozenset(e) for e in spec.equalities}
    assert frozenset({("x", 0), ("y", 0)}) in eqs
    assert frozenset({("x", 1), ("y", 1)}) in eqs


def test_gemm_constraints_content():
    spec = registry.tile_constraints_for(
        "gemm_q8", {"transB": 0, "mul": 1, "shift": 0, "zp": 0},
        ("a", "b", "c"), ("y",), [(16, 64), (64, 256), (256,)], [(16, 256)])
    assert ("a", 1) in spec.untileable and ("b", 0) in spec.untileable
    eqs = {frozenset(e) for e in spec.equalities}
    assert frozenset({("a", 0), ("y", 0)}) in eqs   # M tileable, shared
    assert frozenset({("b", 1), ("y", 1)}) in eqs   # O tileable, shared
