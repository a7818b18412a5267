"""Kernel registry and reference integer semantics.

Two interchangeable execution lanes exist for the hot kernels:

* ``numba`` - loop kernels compiled with ``@njit`` (default when numba is
  importable);
* ``numpy`` - vectorized pure-numpy fallback.

Both lanes are integer-exact and bit-identical; select one with the
environment variable ``TINYDEPLOY_KERNELS=numba|numpy`` or via
:func:`set_backend`. Data-marshaling ops (transpose, gather, concat,
reshape) always run on the numpy lane. ``benchmarks/bench_kernels.py``
compares the two lanes.
"""

from __future__ import annotations

import os

import numpy as np

from .numpy_impl import (
    KernelError,
    NUMPY_OPS,
    isqrt_exact,
    requant_arr,
    saturate_i8,
)
from .registry import (
    MATMUL_OPS,
    NPU_COUT_ALIGN,
    OP_SCHEMAS,
    REGISTRY,
    KernelSignature,
    KernelTemplate,
    TileConstraintSpec,
    check_node_schema,
    infer_out_dtype,
    infer_out_shape,
    kernel_by_id,
    kernels_for,
    operand_slices,
    tile_constraints_for,
    transient_bytes,
    work_units,
)

_BACKENDS: dict[str, dict] = {"numpy": NUMPY_OPS}
_active = "numpy"


def _load_numba_lane() -> bool:
    if "numba" in _BACKENDS:
        return True
    try:
        from .numba_impl import NUMBA_OPS
    except ImportError:
        return False
    _BACKENDS["numba"] = NUMBA_OPS
    return True


def set_backend(name: str) -> str:
    """Select the kernel lane; returns the lane actually in effect."""
    global _active
    if name == "numba":
        if not _load_numba_lane():
            raise KernelError("numba lane requested but numba is not importable")
        _active = "numba"
    elif name == "numpy":
        _active = "numpy"
    else:
        raise KernelError(f"unknown kernel backend {name!r} (use 'numba' or 'numpy')")
    return _active


def active_backend() -> str:
    return _active


def _init_backend() -> None:
    want = os.environ.get("TINYDEPLOY_KERNELS", "numba").strip().lower()
    if want == "numpy":
        set_backend("numpy")
        return
    if want not in ("numba", ""):
        raise KernelError(f"TINYDEPLOY_KERNELS={want!r} not recognized")
    if _load_numba_lane():
        set_backend("numba")
    else:
        set_backend("numpy")


def compute(op: str, ins: tuple[np.ndarray, ...], attrs: dict,
            origin: tuple[int, ...] | None = None,
            out_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Execute one operator on concrete arrays (full tensors or tiles)."""
    if op not in NUMPY_OPS:
        raise KernelError(f"unknown op kind {op!r}")
    if origin is None:
        origin = (0,) * 8
    table = _BACKENDS[_active]
    fn = table.get(op) or NUMPY_OPS[op]
    out = fn(tuple(np.asarray(a) for a in ins), attrs, origin, out_shape)
    if out_shape is not None and tuple(out.shape) != tuple(out_shape):
        raise KernelError(f"{op}: produced shape {out.shape}, expected {out_shape}")
    return out


_init_backend()


# --- reference entry points with explicit argument surfaces ----------------

def ref_gemm_q8(a, b, bias, mul, shift, zp, trans_b=0):
    """Requantized 8-bit GEMM: sat8(zp + round((A.B + bias) * mul / 2^shift))."""
    return compute("gemm_q8", (a, b, bias),
                   {"transB": trans_b, "mul": mul, "shift": shift, "zp": zp})


def ref_softmax_ibert(x, x0_q, b_q, c_q, out_bits=7):
    """Integer softmax over the last axis (see numpy_impl.op_softmax_i)."""
    return compute("softmax_i", (x,),
                   {"x0_q": x0_q, "b_q": b_q, "c_q": c_q, "out_bits": out_bits})


def ref_rmsnorm_i32(x, w, eps_q, kshift, mul, shift, zp):
    """Integer RMS norm with 32-bit numerators/denominators."""
    return compute("rmsnorm_i", (x, w),
                   {"eps_q": eps_q, "kshift": kshift, "mul": mul, "shift": shift, "zp": zp})


def ref_rope_q(x, cos_t, sin_t, pos, mul, shift, zp):
    """Rotary embedding at absolute position offset ``pos`` (full tables)."""
    s = x.shape[0]
    if pos < 0 or pos + s > cos_t.shape[0]:
        raise KernelError(f"rope table underrun: positions [{pos}, {pos + s}) of {cos_t.shape[0]}")
    return compute("rope_q", (x, cos_t[pos:pos + s], sin_t[pos:pos + s]),
                   {"pos": pos, "mul": mul, "shift": shift, "zp": zp})


def ref_elementwise(op, ins, **attrs):
    """Elementwise / marshaling family entry point."""
    return compute(op, tuple(ins), attrs)
