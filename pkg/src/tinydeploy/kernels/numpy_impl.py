"""Pure-numpy integer reference kernels.

Every kernel is integer-exact and deterministic: identical input bytes give
identical output bytes on any platform, and the numba lane must match these
results bit for bit. All intermediate arithmetic is carried in int64, well
inside the ranges the requantization parameters guarantee.

Conventions shared by all kernels:

* requantization is round-half-away-from-zero, per-tensor ``(mul, shift,
  zp)``, zero-point applied after scaling, saturating to [-128, 127];
* integer division of signed values truncates toward zero;
* in the integer softmax, the input code -128 is the masked sentinel and
  contributes exactly zero mass (causal masking writes -128);
* kernels receive the origin of the output tile inside the full tensor so
  position-dependent ops (RoPE, causal mask) work on any tiling.
"""

from __future__ import annotations

import numpy as np


class KernelError(Exception):
    """Operand shape/attribute violation detected by a kernel."""


def saturate_i8(v: np.ndarray) -> np.ndarray:
    return np.clip(v, -128, 127).astype(np.int8)


def requant_arr(acc: np.ndarray, mul: int, shift: int, zp: int) -> np.ndarray:
    """Map 32-bit accumulators back to int8 codes."""
    if not 0 <= shift <= 31:
        raise KernelError(f"requant shift {shift} out of [0, 31]")
    v = acc.astype(np.int64) * np.int64(mul)
    if shift > 0:
        half = np.int64(1) << np.int64(shift - 1)
        r = (np.abs(v) + half) >> np.int64(shift)
        r = np.where(v < 0, -r, r)
    else:
        r = v
    return saturate_i8(r + np.int64(zp))


def trunc_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """C-style signed integer division (round toward zero), positive divisor."""
    return np.sign(num) * (np.abs(num) // den)


def isqrt_exact(n: np.ndarray) -> np.ndarray:
    """Elementwise floor(sqrt(n)) for non-negative int64.

    Newton iteration seeded from the bit length (4 fixed steps), then exact
    fix-up; fix-up terminates immediately once Newton has converged.
    """
    n = n.astype(np.int64)
    if np.any(n < 0):
        raise KernelError("isqrt of negative value")
    # frexp exponent == bit length for exactly representable positive ints.
    bits = np.frexp(n.astype(np.float64))[1].astype(np.int64)
    x = np.int64(1) << ((bits + 1) >> 1)
    x = np.maximum(x, 1)
    for _ in range(4):
        x = (x + n // x) >> 1
        x = np.maximum(x, 1)
    while True:
        over = x * x > n
        if not np.any(over):
            break
        x = np.where(over, x - 1, x)
    while True:
        under = (x + 1) * (x + 1) <= n
        if not np.any(under):
            break
        x = np.where(under, x + 1, x)
    return np.where(n == 0, 0, x)


def _bias2d(bias: np.ndarray, m: int, o: int) -> np.ndarray:
    if bias.ndim == 1:
        if bias.shape[0] != o:
            raise KernelError(f"bias length {bias.shape[0]} != O {o}")
        return bias.reshape(1, o)
    if bias.shape != (m, o):
        raise KernelError(f"bias shape {bias.shape} incompatible with ({m}, {o})")
    return bias


def _gemm_acc(a: np.ndarray, b: np.ndarray, bias: np.ndarray, trans_b: int) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise KernelError("gemm operands must be 2-D")
    bm = b.T if trans_b else b
    m, n = a.shape
    if bm.shape[0] != n:
        raise KernelError(f"gemm reduction mismatch: A {a.shape} x B {b.shape} (transB={trans_b})")
    if n > 1 << 15:
        raise KernelError(f"gemm reduction dim {n} exceeds 2^15 accumulator guarantee")
    acc = a.astype(np.int64) @ bm.astype(np.int64)
    return acc + _bias2d(bias.astype(np.int64), m, bm.shape[1])


def op_gemm(ins, attrs, origin, out_shape):
    a, b, bias = ins
    acc = _gemm_acc(a, b, bias, int(attrs.get("transB", 0)))
    return acc.astype(np.int32)


def op_gemm_q8(ins, attrs, origin, out_shape):
    a, b, bias = ins
    acc = _gemm_acc(a, b, bias, int(attrs.get("transB", 0)))
    return requant_arr(acc, attrs["mul"], attrs["shift"], attrs["zp"])


def op_conv1x1_q8(ins, attrs, origin, out_shape):
    x, w, bias = ins
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != 1:
        raise KernelError(f"pointwise conv weight must be [C_out,1,1,C_in], got {w.shape}")
    acc = _gemm_acc(x, w.reshape(w.shape[0], w.shape[3]), bias, 1)
    return requant_arr(acc, attrs["mul"], attrs["shift"], attrs["zp"])


def _bmm_acc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 3 or b.ndim != 3:
        raise KernelError("batched matmul operands must be 3-D")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise KernelError(f"batched matmul shape mismatch: {a.shape} x {b.shape}")
    if a.shape[2] > 1 << 15:
        raise KernelError(f"batched matmul reduction dim {a.shape[2]} exceeds 2^15")
    return np.matmul(a.astype(np.int64), b.astype(np.int64))


def op_bmm_i32(ins, attrs, origin, out_shape):
    return _bmm_acc(*ins).astype(np.int32)


def op_bmm_requant(ins, attrs, origin, out_shape):
    return requant_arr(_bmm_acc(*ins), attrs["mul"], attrs["shift"], attrs["zp"])


def op_requant(ins, attrs, origin, out_shape):
    return requant_arr(ins[0], attrs["mul"], attrs["shift"], attrs["zp"])


def op_softmax_i(ins, attrs, origin, out_shape):
    """Integer-only softmax over the last axis.

    exp() follows the published second-order-polynomial approximation with
    ln2 range decomposition: with S the score scale baked into the integer
    attributes, x0_q = floor(-ln2/S), b_q = floor(2.70734/S) and
    c_q = floor(2.79214/S^2); a row entry v <= 0 decomposes as
    v = x0_q*q + r, exp_int = ((r + b_q)*r + c_q) >> q. Rows are normalized
    by integer division to codes in [0, 2^out_bits - 1]. Input code -128 is
    treated as -inf (exactly zero mass).
    """
    (x,) = ins
    x0 = int(attrs["x0_q"])
    bq = int(attrs["b_q"])
    cq = int(attrs["c_q"])
    out_bits = int(attrs["out_bits"])
    if x0 >= 0:
        raise KernelError(f"softmax x0_q must be negative, got {x0}")
    if not 1 <= out_bits <= 7:
        raise KernelError(f"softmax out_bits {out_bits} out of [1, 7]")
    d = x.shape[-1]
    xi = x.reshape(-1, d).astype(np.int64)
    masked = xi == -128
    lo = np.int64(-(1 << 62))
    m = np.max(np.where(masked, lo, xi), axis=1, keepdims=True)
    v = np.where(masked, np.int64(0), xi - m)
    v = np.maximum(v, np.int64(30 * x0))
    q = v // np.int64(x0)
    r = v - np.int64(x0) * q
    z = (r + np.int64(bq)) * r + np.int64(cq)
    z = np.maximum(z, 0)
    e = z >> q
    e = np.where(masked, np.int64(0), e)
    s = np.sum(e, axis=1, keepdims=True)
    maxcode = np.int64((1 << out_bits) - 1)
    out = np.where(s > 0, (e * maxcode) // np.maximum(s, 1), np.int64(0))
    return out.astype(np.int8).reshape(x.shape)


def op_rmsnorm_i(ins, attrs, origin, out_shape):
    """Integer RMS normalization over the last axis.

    r = isqrt(sum(x^2)/D + eps_q); y = requant(trunc(x * w * 2^k / r)).
    k is chosen at graph build time so the numerator stays inside 32 bits.
    """
    x, w = ins
    eps_q = int(attrs["eps_q"])
    k = int(attrs["kshift"])
    if eps_q <= 0:
        raise KernelError("rmsnorm eps_q must be positive")
    if not 0 <= k <= 16:
        raise KernelError(f"rmsnorm kshift {k} out of [0, 16]")
    d = x.shape[-1]
    if d > 1 << 15:
        raise KernelError(f"rmsnorm axis {d} exceeds 2^15")
    if w.shape != (d,):
        raise KernelError(f"rmsnorm weight shape {w.shape} != ({d},)")
    xi = x.reshape(-1, d).astype(np.int64)
    ss = np.sum(xi * xi, axis=1, keepdims=True)
    r = isqrt_exact(ss // d + eps_q)
    num = xi * w.astype(np.int64) * (np.int64(1) << k)
    t = trunc_div(num, r)
    y = requant_arr(t, attrs["mul"], attrs["shift"], attrs["zp"])
    return y.reshape(x.shape)


def op_rope_q(ins, attrs, origin, out_shape):
    """Rotary embedding on Q15 cos/sin tables, pairwise on the head dim.

    Table operands arrive pre-sliced to the input's rows: row i of the table
    tiles holds the angle for row i of x (the operand slicer applies the
    node's position offset, so the kernel works unchanged on any tiling).
    """
    x, cos_t, sin_t = ins
    if x.ndim != 3:
        raise KernelError(f"rope input must be [S, h, d_h], got {x.shape}")
    s, h, dh = x.shape
    if dh % 2 != 0:
        raise KernelError(f"rope head dim {dh} must be even")
    if cos_t.shape != sin_t.shape or cos_t.shape != (s, dh // 2):
        raise KernelError(f"rope tables {cos_t.shape}/{sin_t.shape} do not match x {x.shape}")
    c = cos_t.astype(np.int64)[:, None, :]
    sn = sin_t.astype(np.int64)[:, None, :]
    xe = x[:, :, 0::2].astype(np.int64)
    xo = x[:, :, 1::2].astype(np.int64)
    mul, shift, zp = attrs["mul"], attrs["shift"], attrs["zp"]
    ye = requant_arr(xe * c - xo * sn, mul, shift, zp)
    yo = requant_arr(xe * sn + xo * c, mul, shift, zp)
    y = np.empty((s, h, dh), dtype=np.int8)
    y[:, :, 0::2] = ye
    y[:, :, 1::2] = yo
    return y


def op_hardswish_q(ins, attrs, origin, out_shape):
    (x,) = ins
    three_q = np.int64(attrs["three_q"])
    six_q = np.int64(attrs["six_q"])
    xi = x.astype(np.int64)
    inner = np.clip(xi + three_q, 0, six_q)
    return requant_arr(xi * inner, attrs["mul"], attrs["shift"], attrs["zp"])


def op_add_requant(ins, attrs, origin, out_shape):
    a, b = ins
    if a.shape != b.shape:
        raise KernelError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return requant_arr(a.astype(np.int64) + b.astype(np.int64),
                       attrs["mul"], attrs["shift"], attrs["zp"])


def op_mul_requant(ins, attrs, origin, out_shape):
    a, b = ins
    if a.shape != b.shape:
        raise KernelError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return requant_arr(a.astype(np.int64) * b.astype(np.int64),
                       attrs["mul"], attrs["shift"], attrs["zp"])


def op_causal_mask(ins, attrs, origin, out_shape):
    (x,) = ins
    if x.ndim != 3:
        raise KernelError(f"causal mask input must be [B, S, T], got {x.shape}")
    past = int(attrs["past"])
    _, s, t = x.shape
    r0, c0 = origin[1], origin[2]
    rows = (np.arange(s, dtype=np.int64) + r0)[:, None]
    cols = (np.arange(t, dtype=np.int64) + c0)[None, :]
    mask = cols > rows + past
    return np.where(mask[None, :, :], np.int8(-128), x).astype(np.int8)


def op_transpose(ins, attrs, origin, out_shape):
    (x,) = ins
    perm = tuple(attrs["perm"])
    if sorted(perm) != list(range(x.ndim)):
        raise KernelError(f"invalid transpose permutation {perm} for rank {x.ndim}")
    return np.ascontiguousarray(np.transpose(x, perm))


def op_gather_rows(ins, attrs, origin, out_shape):
    table, idx = ins
    if table.ndim != 2 or idx.ndim != 1:
        raise KernelError(f"gather expects table [V, D] and idx [S], got {table.shape}, {idx.shape}")
    ii = idx.astype(np.int64)
    if np.any(ii < 0) or np.any(ii >= table.shape[0]):
        raise KernelError("gather index out of range")
    return table[ii]


def op_concat_seq(ins, attrs, origin, out_shape):
    a, b = ins
    if a.ndim != b.ndim or a.shape[1:] != b.shape[1:]:
        raise KernelError(f"concat_seq trailing dims differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


def op_reshape(ins, attrs, origin, out_shape):
    (x,) = ins
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise KernelError(f"reshape {x.shape} -> {shape} changes element count")
    return np.ascontiguousarray(x.reshape(shape))


NUMPY_OPS = {
    "gemm": op_gemm,
    "gemm_q8": op_gemm_q8,
    "conv1x1_q8": op_conv1x1_q8,
    "bmm_i32": op_bmm_i32,
    "bmm_requant": op_bmm_requant,
    "requant": op_requant,
    "softmax_i": op_softmax_i,
    "rmsnorm_i": op_rmsnorm_i,
    "rope_q": op_rope_q,
    "hardswish_q": op_hardswish_q,
    "add_requant": op_add_requant,
    "mul_requant": op_mul_requant,
    "causal_mask": op_causal_mask,
    "transpose": op_transpose,
    "gather_rows": op_gather_rows,
    "concat_seq": op_concat_seq,
    "reshape": op_reshape,
}
