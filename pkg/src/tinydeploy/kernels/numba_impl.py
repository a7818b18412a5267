"""Numba-jitted hot kernels, bit-identical to the numpy lane.

Only the compute-heavy kernels are jitted; pure data-marshaling ops
(transpose, gather, concat, reshape) stay on the numpy lane where they are
already memcpy-bound. Importing this module requires numba; the dispatch in
``tinydeploy.kernels`` falls back to numpy when numba is missing or when
``TINYDEPLOY_KERNELS=numpy`` is set.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .numpy_impl import KernelError, _bias2d

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def _rq(acc, mul, shift, zp):
    v = np.int64(acc) * np.int64(mul)
    if shift > 0:
        av = -v if v < 0 else v
        r = (av + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)
        if v < 0:
            r = -r
    else:
        r = v
    r += zp
    if r > 127:
        r = 127
    elif r < -128:
        r = -128
    return np.int8(r)


@njit(**_JIT)
def _nb_requant(x, mul, shift, zp, out):
    for i in range(x.shape[0]):
        out[i] = _rq(np.int64(x[i]), mul, shift, zp)


@njit(**_JIT)
def _nb_gemm(a, b, bias, trans_b, fused, mul, shift, zp, out8, out32):
    m, n = a.shape
    o = b.shape[0] if trans_b else b.shape[1]
    brows = bias.shape[0]
    for i in range(m):
        bi = i if brows > 1 else 0
        for j in range(o):
            acc = np.int64(bias[bi, j])
            if trans_b:
                for k in range(n):
                    acc += np.int64(a[i, k]) * np.int64(b[j, k])
            else:
                for k in range(n):
                    acc += np.int64(a[i, k]) * np.int64(b[k, j])
            if fused:
                out8[i, j] = _rq(acc, mul, shift, zp)
            else:
                out32[i, j] = np.int32(acc)


@njit(**_JIT)
def _nb_bmm(a, b, fused, mul, shift, zp, out8, out32):
    nb, m, n = a.shape
    o = b.shape[2]
    for t in range(nb):
        for i in range(m):
            for j in range(o):
                acc = np.int64(0)
                for k in range(n):
                    acc += np.int64(a[t, i, k]) * np.int64(b[t, k, j])
                if fused:
                    out8[t, i, j] = _rq(acc, mul, shift, zp)
                else:
                    out32[t, i, j] = np.int32(acc)


@njit(**_JIT)
def _nb_softmax(x, x0, bq, cq, maxcode, scratch, out):
    rows, d = x.shape
    clamp = np.int64(30) * x0
    for i in range(rows):
        m = np.int64(-(1 << 62))
        any_live = False
        for j in range(d):
            v = np.int64(x[i, j])
            if v != -128:
                any_live = True
                if v > m:
                    m = v
        s = np.int64(0)
        for j in range(d):
            v = np.int64(x[i, j])
            if v == -128 or not any_live:
                scratch[j] = 0
            else:
                v -= m
                if v < clamp:
                    v = clamp
                q = v // x0
                r = v - x0 * q
                z = (r + bq) * r + cq
                if z < 0:
                    z = np.int64(0)
                e = z >> q
                scratch[j] = e
                s += e
        for j in range(d):
            if s > 0:
                out[i, j] = np.int8((scratch[j] * maxcode) // s)
            else:
                out[i, j] = np.int8(0)


@njit(**_JIT)
def _isqrt64(n):
    if n <= 0:
        return np.int64(0)
    bits = np.int64(0)
    t = n
    while t > 0:
        t >>= 1
        bits += 1
    x = np.int64(1) << ((bits + 1) >> 1)
    for _ in range(4):
        x = (x + n // x) >> 1
        if x < 1:
            x = np.int64(1)
    while x * x > n:
        x -= 1
    while (x + 1) * (x + 1) <= n:
        x += 1
    return x


@njit(**_JIT)
def _nb_rmsnorm(x, w, eps_q, k, mul, shift, zp, out):
    rows, d = x.shape
    for i in range(rows):
        ss = np.int64(0)
        for j in range(d):
            v = np.int64(x[i, j])
            ss += v * v
        r = _isqrt64(ss // d + eps_q)
        for j in range(d):
            num = np.int64(x[i, j]) * np.int64(w[j]) * (np.int64(1) << k)
            if num < 0:
                t = -((-num) // r)
            else:
                t = num // r
            out[i, j] = _rq(t, mul, shift, zp)


@njit(**_JIT)
def _nb_rope(x, cos_t, sin_t, mul, shift, zp, out):
    s, h, dh = x.shape
    half = dh // 2
    for i in range(s):
        for j in range(h):
            for l in range(half):
                c = np.int64(cos_t[i, l])
                sn = np.int64(sin_t[i, l])
                xe = np.int64(x[i, j, 2 * l])
                xo = np.int64(x[i, j, 2 * l + 1])
                out[i, j, 2 * l] = _rq(xe * c - xo * sn, mul, shift, zp)
                out[i, j, 2 * l + 1] = _rq(xe * sn + xo * c, mul, shift, zp)


@njit(**_JIT)
def _nb_hardswish(x, three_q, six_q, mul, shift, zp, out):
    for i in range(x.shape[0]):
        v = np.int64(x[i])
        inner = v + three_q
        if inner < 0:
            inner = np.int64(0)
        elif inner > six_q:
            inner = six_q
        out[i] = _rq(v * inner, mul, shift, zp)


@njit(**_JIT)
def _nb_add(a, b, mul, shift, zp, out):
    for i in range(a.shape[0]):
        out[i] = _rq(np.int64(a[i]) + np.int64(b[i]), mul, shift, zp)


@njit(**_JIT)
def _nb_mul(a, b, mul, shift, zp, out):
    for i in range(a.shape[0]):
        out[i] = _rq(np.int64(a[i]) * np.int64(b[i]), mul, shift, zp)


@njit(**_JIT)
def _nb_causal_mask(x, past, r0, c0, out):
    nb, s, t = x.shape
    for b in range(nb):
        for i in range(s):
            lim = r0 + i + past
            for j in range(t):
                if c0 + j > lim:
                    out[b, i, j] = np.int8(-128)
                else:
                    out[b, i, j] = x[b, i, j]


# --- wrappers adapting the (ins, attrs, origin, out_shape) convention -------


def op_gemm(ins, attrs, origin, out_shape):
    a, b, bias = ins
    trans_b = int(attrs.get("transB", 0))
    _check_gemm(a, b, trans_b)
    m = a.shape[0]
    o = b.shape[0] if trans_b else b.shape[1]
    b2 = _bias2d(np.ascontiguousarray(bias, dtype=np.int32), m, o)
    out32 = np.empty((m, o), dtype=np.int32)
    _nb_gemm(a, b, b2, trans_b, False, 0, 0, 0, _I8_NULL2, out32)
    return out32


def op_gemm_q8(ins, attrs, origin, out_shape):
    a, b, bias = ins
    trans_b = int(attrs.get("transB", 0))
    _check_gemm(a, b, trans_b)
    _check_rq(attrs)
    m = a.shape[0]
    o = b.shape[0] if trans_b else b.shape[1]
    b2 = _bias2d(np.ascontiguousarray(bias, dtype=np.int32), m, o)
    out8 = np.empty((m, o), dtype=np.int8)
    _nb_gemm(a, b, b2, trans_b, True, attrs["mul"], attrs["shift"], attrs["zp"],
             out8, _I32_NULL2)
    return out8


def op_conv1x1_q8(ins, attrs, origin, out_shape):
    x, w, bias = ins
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != 1:
        raise KernelError(f"pointwise conv weight must be [C_out,1,1,C_in], got {w.shape}")
    return op_gemm_q8((x, np.ascontiguousarray(w.reshape(w.shape[0], w.shape[3])), bias),
                      {**attrs, "transB": 1}, origin, out_shape)


def op_bmm_i32(ins, attrs, origin, out_shape):
    a, b = ins
    _check_bmm(a, b)
    out32 = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=np.int32)
    _nb_bmm(a, b, False, 0, 0, 0, _I8_NULL3, out32)
    return out32


def op_bmm_requant(ins, attrs, origin, out_shape):
    a, b = ins
    _check_bmm(a, b)
    _check_rq(attrs)
    out8 = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=np.int8)
    _nb_bmm(a, b, True, attrs["mul"], attrs["shift"], attrs["zp"], out8, _I32_NULL3)
    return out8


def op_requant(ins, attrs, origin, out_shape):
    _check_rq(attrs)
    (x,) = ins
    out = np.empty(x.size, dtype=np.int8)
    _nb_requant(np.ascontiguousarray(x).reshape(-1), attrs["mul"], attrs["shift"],
                attrs["zp"], out)
    return out.reshape(x.shape)


def op_softmax_i(ins, attrs, origin, out_shape):
    (x,) = ins
    x0 = int(attrs["x0_q"])
    out_bits = int(attrs["out_bits"])
    if x0 >= 0:
        raise KernelError(f"softmax x0_q must be negative, got {x0}")
    if not 1 <= out_bits <= 7:
        raise KernelError(f"softmax out_bits {out_bits} out of [1, 7]")
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x).reshape(-1, d)
    out = np.empty_like(x2)
    scratch = np.empty(d, dtype=np.int64)
    _nb_softmax(x2, np.int64(x0), np.int64(attrs["b_q"]), np.int64(attrs["c_q"]),
                np.int64((1 << out_bits) - 1), scratch, out)
    return out.reshape(x.shape)


def op_rmsnorm_i(ins, attrs, origin, out_shape):
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
    _check_rq(attrs)
    x2 = np.ascontiguousarray(x).reshape(-1, d)
    out = np.empty_like(x2)
    _nb_rmsnorm(x2, np.ascontiguousarray(w), np.int64(eps_q), np.int64(k),
                attrs["mul"], attrs["shift"], attrs["zp"], out)
    return out.reshape(x.shape)


def op_rope_q(ins, attrs, origin, out_shape):
    x, cos_t, sin_t = ins
    if x.ndim != 3:
        raise KernelError(f"rope input must be [S, h, d_h], got {x.shape}")
    s, h, dh = x.shape
    if dh % 2 != 0:
        raise KernelError(f"rope head dim {dh} must be even")
    if cos_t.shape != sin_t.shape or cos_t.shape != (s, dh // 2):
        raise KernelError(f"rope tables {cos_t.shape}/{sin_t.shape} do not match x {x.shape}")
    _check_rq(attrs)
    out = np.empty_like(x)
    _nb_rope(np.ascontiguousarray(x), np.ascontiguousarray(cos_t),
             np.ascontiguousarray(sin_t),
             attrs["mul"], attrs["shift"], attrs["zp"], out)
    return out


def op_hardswish_q(ins, attrs, origin, out_shape):
    (x,) = ins
    _check_rq(attrs)
    out = np.empty(x.size, dtype=np.int8)
    _nb_hardswish(np.ascontiguousarray(x).reshape(-1), np.int64(attrs["three_q"]),
                  np.int64(attrs["six_q"]), attrs["mul"], attrs["shift"],
                  attrs["zp"], out)
    return out.reshape(x.shape)


def op_add_requant(ins, attrs, origin, out_shape):
    a, b = ins
    if a.shape != b.shape:
        raise KernelError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_rq(attrs)
    out = np.empty(a.size, dtype=np.int8)
    _nb_add(np.ascontiguousarray(a).reshape(-1), np.ascontiguousarray(b).reshape(-1),
            attrs["mul"], attrs["shift"], attrs["zp"], out)
    return out.reshape(a.shape)


def op_mul_requant(ins, attrs, origin, out_shape):
    a, b = ins
    if a.shape != b.shape:
        raise KernelError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _check_rq(attrs)
    out = np.empty(a.size, dtype=np.int8)
    _nb_mul(np.ascontiguousarray(a).reshape(-1), np.ascontiguousarray(b).reshape(-1),
            attrs["mul"], attrs["shift"], attrs["zp"], out)
    return out.reshape(a.shape)


def op_causal_mask(ins, attrs, origin, out_shape):
    (x,) = ins
    if x.ndim != 3:
        raise KernelError(f"causal mask input must be [B, S, T], got {x.shape}")
    out = np.empty_like(x)
    _nb_causal_mask(np.ascontiguousarray(x), np.int64(int(attrs["past"])),
                    np.int64(origin[1]), np.int64(origin[2]), out)
    return out


def _check_gemm(a, b, trans_b):
    if a.ndim != 2 or b.ndim != 2:
        raise KernelError("gemm operands must be 2-D")
    n = b.shape[1] if trans_b else b.shape[0]
    if a.shape[1] != n:
        raise KernelError(f"gemm reduction mismatch: A {a.shape} x B {b.shape} (transB={trans_b})")
    if a.shape[1] > 1 << 15:
        raise KernelError(f"gemm reduction dim {a.shape[1]} exceeds 2^15 accumulator guarantee")


def _check_bmm(a, b):
    if a.ndim != 3 or b.ndim != 3:
        raise KernelError("batched matmul operands must be 3-D")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise KernelError(f"batched matmul shape mismatch: {a.shape} x {b.shape}")
    if a.shape[2] > 1 << 15:
        raise KernelError(f"batched matmul reduction dim {a.shape[2]} exceeds 2^15")


def _check_rq(attrs):
    if not 0 <= int(attrs["shift"]) <= 31:
        raise KernelError(f"requant shift {attrs['shift']} out of [0, 31]")


_I8_NULL2 = np.empty((0, 0), dtype=np.int8)
_I32_NULL2 = np.empty((0, 0), dtype=np.int32)
_I8_NULL3 = np.empty((0, 0, 0), dtype=np.int8)
_I32_NULL3 = np.empty((0, 0, 0), dtype=np.int32)


NUMBA_OPS = {
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
}
