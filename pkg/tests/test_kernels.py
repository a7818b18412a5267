"""Reference-kernel tests against independent pure-Python oracles.

Oracles here are deliberately written from scratch (plain Python ints,
math.isqrt, double-precision trig) and never call the package's numpy or
numba code paths."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydeploy import kernels
from tinydeploy.kernels import KernelError, isqrt_exact, requant_arr


# --- oracle helpers (independent of the package implementations) -----------

def rq_oracle(acc: int, mul: int, shift: int, zp: int) -> int:
    v = acc * mul
    if shift > 0:
        r = (abs(v) + (1 << (shift - 1))) >> shift
        r = -r if v < 0 else r
    else:
        r = v
    return max(-128, min(127, r + zp))


def gemm_oracle(a, b, bias, mul, shift, zp, trans_b=0):
    m, n = a.shape
    bm = b.T if trans_b else b
    o = bm.shape[1]
    y = np.zeros((m, o), dtype=np.int8)
    for i in range(m):
        for j in range(o):
            acc = int(bias[j] if bias.ndim == 1 else bias[i, j])
            for k in range(n):
                acc += int(a[i, k]) * int(bm[k, j])
            y[i, j] = rq_oracle(acc, mul, shift, zp)
    return y


def softmax_oracle(row, x0_q, b_q, c_q, out_bits=7):
    """Straight transcription of the published integer softmax: per-row max
    subtraction, exp by second-order polynomial with ln2 decomposition,
    normalization by integer division; -128 is the masked sentinel."""
    live = [v for v in row if v != -128]
    exps = []
    m = max(live) if live else 0
    for v in row:
        if v == -128 or not live:
            exps.append(0)
            continue
        x = v - m
        x = max(x, 30 * x0_q)
        q = math.floor(x / x0_q)
        r = x - x0_q * q
        z = max(0, (r + b_q) * r + c_q)
        exps.append(z >> q)
    s = sum(exps)
    maxcode = (1 << out_bits) - 1
    return [e * maxcode // s if s > 0 else 0 for e in exps]


ATTRS_SM = {"x0_q": -12, "b_q": 43, "c_q": 714, "out_bits": 7}


# --- requant ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(-(1 << 30), 1 << 30), st.integers(1, 1 << 15),
       st.integers(0, 31), st.integers(-128, 127))
def test_requant_matches_oracle(acc, mul, shift, zp):
    got = requant_arr(np.array([acc], dtype=np.int64), mul, shift, zp)[0]
    assert got == rq_oracle(acc, mul, shift, zp)


def test_requant_rounds_half_away_from_zero():
    # acc*mul/2^shift = +/-2.5 must round to +/-3
    assert requant_arr(np.array([5]), 1, 1, 0)[0] == 3
    assert requant_arr(np.array([-5]), 1, 1, 0)[0] == -3


def test_requant_zero_point_post_scale():
    assert requant_arr(np.array([4]), 1, 2, 10)[0] == 11
    assert requant_arr(np.array([1 << 20]), 1, 0, 0)[0] == 127  # saturates


def test_requant_shift_out_of_range():
    with pytest.raises(KernelError):
        requant_arr(np.array([1]), 1, 32, 0)


# --- integer sqrt -----------------------------------------------------------

def test_isqrt_exactness_random_and_edges():
    vals = [0, 1, 2, 3, 4, 8, 15, 16, 17, (1 << 31) - 1, 1 << 31]
    r = np.random.default_rng(0)
    vals += [int(v) for v in r.integers(0, 1 << 32, 200)]
    got = isqrt_exact(np.array(vals, dtype=np.int64))
    for v, gv in zip(vals, got):
        assert gv == math.isqrt(v), v


# --- GEMM --------------------------------------------------------------------

def test_gemm_zero_input():
    a = np.zeros((3, 5), dtype=np.int8)
    b = np.ones((5, 2), dtype=np.int8)
    bias = np.array([100, -7], dtype=np.int32)
    y = kernels.ref_gemm_q8(a, b, bias, mul=3, shift=1, zp=1)
    for j, c in enumerate((100, -7)):
        assert np.all(y[:, j] == rq_oracle(c, 3, 1, 1))


def test_gemm_scalar_case():
    y = kernels.ref_gemm_q8(np.array([[2]], dtype=np.int8),
                            np.array([[3]], dtype=np.int8),
                            np.array([4], dtype=np.int32), mul=1, shift=0, zp=0)
    assert y[0, 0] == 10


def test_gemm_random_matches_naive_oracle():
    r = np.random.default_rng(42)
    a = r.integers(-127, 128, (4, 8)).astype(np.int8)
    b = r.integers(-127, 128, (8, 2)).astype(np.int8)
    bias = r.integers(-1000, 1000, (2,)).astype(np.int32)
    for trans_b in (0, 1):
        bb = np.ascontiguousarray(b.T) if trans_b else b
        got = kernels.ref_gemm_q8(a, bb, bias, mul=517, shift=9, zp=-3,
                                  trans_b=trans_b)
        assert np.array_equal(got, gemm_oracle(a, bb, bias, 517, 9, -3, trans_b))


def test_gemm_shape_mismatch():
    with pytest.raises(KernelError):
        kernels.ref_gemm_q8(np.zeros((2, 3), np.int8), np.zeros((4, 5), np.int8),
                            np.zeros(5, np.int32), 1, 0, 0)


def test_conv1x1_equals_transposed_gemm():
    r = np.random.default_rng(7)
    x = r.integers(-127, 128, (5, 16)).astype(np.int8)
    w = r.integers(-127, 128, (32, 1, 1, 16)).astype(np.int8)
    bias = r.integers(-500, 500, (32,)).astype(np.int32)
    got = kernels.compute("conv1x1_q8", (x, w, bias),
                          {"mul": 900, "shift": 10, "zp": 2})
    ref = gemm_oracle(x, w.reshape(32, 16), bias, 900, 10, 2, trans_b=1)
    assert np.array_equal(got, ref)


def test_bmm_matches_per_batch_gemm():
    r = np.random.default_rng(3)
    a = r.integers(-127, 128, (4, 3, 6)).astype(np.int8)
    b = r.integers(-127, 128, (4, 6, 5)).astype(np.int8)
    got = kernels.compute("bmm_requant", (a, b), {"mul": 700, "shift": 8, "zp": 0})
    zero_bias = np.zeros(5, dtype=np.int32)
    for t in range(4):
        ref = gemm_oracle(a[t], b[t], zero_bias, 700, 8, 0)
        assert np.array_equal(got[t], ref)


# --- integer softmax ---------------------------------------------------------

def test_softmax_identical_values():
    x = np.full((1, 4), 23, dtype=np.int8)
    y = kernels.ref_softmax_ibert(x, **ATTRS_SM)
    assert np.all(y == 127 // 4)  # equal shares of the max code
    assert y.max() - y.min() <= 1


def test_softmax_one_hot_saturation():
    x = np.full((1, 8), -128, dtype=np.int8)
    x[0, 3] = 127
    y = kernels.ref_softmax_ibert(x, **ATTRS_SM)
    assert y[0, 3] >= int(0.95 * 127)
    assert np.all(np.delete(y[0], 3) == 0)


def test_softmax_random_row_bit_exact_vs_transcribed_oracle():
    r = np.random.default_rng(11)
    x = r.integers(-127, 128, (5, 16)).astype(np.int8)
    y = kernels.ref_softmax_ibert(x, **ATTRS_SM)
    for i in range(5):
        assert list(y[i].astype(int)) == softmax_oracle(
            [int(v) for v in x[i]], ATTRS_SM["x0_q"], ATTRS_SM["b_q"],
            ATTRS_SM["c_q"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-128, 127), min_size=1, max_size=24),
       st.integers(0, 3))
def test_softmax_subdistribution_property(row, zeros_at):
    x = np.array([row], dtype=np.int8)
    y = kernels.ref_softmax_ibert(x, **ATTRS_SM).astype(int)
    d = len(row)
    s = int(y.sum())
    assert np.all(y >= 0) and np.all(y <= 127)
    if any(v != -128 for v in row):
        assert s <= (1 << 7) - 1
        assert s >= (1 << 7) - d
    else:
        assert s == 0


def test_softmax_masked_entries_get_zero_mass():
    x = np.array([[50, -128, 40, -128]], dtype=np.int8)
    y = kernels.ref_softmax_ibert(x, **ATTRS_SM)
    assert y[0, 1] == 0 and y[0, 3] == 0
    assert y[0, 0] > 0


# --- integer rmsnorm ----------------------------------------------------------

def rmsnorm_oracle(x_row, w, eps_q, k, mul, shift, zp):
    ss = sum(int(v) * int(v) for v in x_row)
    r = math.isqrt(ss // len(x_row) + eps_q)
    out = []
    for v, wv in zip(x_row, w):
        num = int(v) * int(wv) * (1 << k)
        assert abs(num) < 1 << 31, "numerator must fit 32 bits"
        t = -((-num) // r) if num < 0 else num // r
        assert abs(t) < 1 << 31, "quotient must fit 32 bits"
        out.append(rq_oracle(t, mul, shift, zp))
    return out


def test_rmsnorm_constant_vector():
    c, wv = 40, 11
    x = np.full((1, 16), c, dtype=np.int8)
    w = np.full(16, wv, dtype=np.int8)
    y = kernels.ref_rmsnorm_i32(x, w, eps_q=1, kshift=8, mul=1, shift=8, zp=0)
    assert np.all(y == y[0, 0])
    r = math.isqrt(c * c + 1)
    expect = rq_oracle(c * wv * 256 // r, 1, 8, 0)
    assert y[0, 0] == expect


def test_rmsnorm_zero_vector():
    x = np.zeros((2, 8), dtype=np.int8)
    w = np.ones(8, dtype=np.int8)
    y = kernels.ref_rmsnorm_i32(x, w, eps_q=1, kshift=10, mul=1000, shift=10, zp=5)
    assert np.all(y == 5)  # requant(0) = zero point


def test_rmsnorm_random_matches_wide_arithmetic_oracle():
    r = np.random.default_rng(21)
    x = r.integers(-127, 128, (3, 64)).astype(np.int8)
    w = r.integers(-127, 128, (64,)).astype(np.int8)
    y = kernels.ref_rmsnorm_i32(x, w, eps_q=1, kshift=10, mul=777, shift=13, zp=0)
    for i in range(3):
        assert list(y[i].astype(int)) == rmsnorm_oracle(
            [int(v) for v in x[i]], [int(v) for v in w], 1, 10, 777, 13, 0)


def test_rmsnorm_bad_params():
    x = np.zeros((1, 8), dtype=np.int8)
    w = np.zeros(8, dtype=np.int8)
    with pytest.raises(KernelError):
        kernels.ref_rmsnorm_i32(x, w, eps_q=0, kshift=10, mul=1, shift=0, zp=0)
    with pytest.raises(KernelError):
        kernels.ref_rmsnorm_i32(x, w, eps_q=1, kshift=20, mul=1, shift=0, zp=0)


# --- rotary embedding -----------------------------------------------------------

def test_rope_zero_angle_is_identity_up_to_rounding():
    s, h, dh = 3, 2, 4
    x = np.random.default_rng(5).integers(-127, 128, (s, h, dh)).astype(np.int8)
    cos_t = np.full((s, dh // 2), 32767, dtype=np.int16)
    sin_t = np.zeros((s, dh // 2), dtype=np.int16)
    y = kernels.compute("rope_q", (x, cos_t, sin_t),
                        {"pos": 0, "mul": 1, "shift": 15, "zp": 0})
    assert np.max(np.abs(y.astype(int) - x.astype(int))) <= 1


def test_rope_quarter_turn_swaps_pairs():
    x = np.array([[[100, -50]]], dtype=np.int8)
    cos_t = np.zeros((1, 1), dtype=np.int16)
    sin_t = np.full((1, 1), 32767, dtype=np.int16)
    y = kernels.compute("rope_q", (x, cos_t, sin_t),
                        {"pos": 0, "mul": 1, "shift": 15, "zp": 0})
    assert abs(int(y[0, 0, 0]) - 50) <= 1
    assert abs(int(y[0, 0, 1]) - 100) <= 1


def test_rope_random_vs_float_oracle():
    s, h, dh = 2, 2, 4
    r = np.random.default_rng(7)
    x = r.integers(-127, 128, (s, h, dh)).astype(np.int8)
    cos_t, sin_t = [], []
    for p in range(4):
        angles = [p * (10000.0 ** (-2.0 * i / dh)) for i in range(dh // 2)]
        cos_t.append([round(math.cos(a) * 32767) for a in angles])
        sin_t.append([round(math.sin(a) * 32767) for a in angles])
    cos_t = np.array(cos_t, dtype=np.int16)
    sin_t = np.array(sin_t, dtype=np.int16)
    pos = 2
    y = kernels.ref_rope_q(x, cos_t, sin_t, pos, mul=1, shift=15, zp=0)
    for i in range(s):
        angles = [(pos + i) * (10000.0 ** (-2.0 * l / dh)) for l in range(dh // 2)]
        for j in range(h):
            for l in range(dh // 2):
                c, sn = math.cos(angles[l]), math.sin(angles[l])
                xe, xo = int(x[i, j, 2 * l]), int(x[i, j, 2 * l + 1])
                fe = max(-128, min(127, round(xe * c - xo * sn)))
                fo = max(-128, min(127, round(xe * sn + xo * c)))
                assert abs(int(y[i, j, 2 * l]) - fe) <= 1
                assert abs(int(y[i, j, 2 * l + 1]) - fo) <= 1


def test_rope_table_underrun():
    x = np.zeros((4, 1, 2), dtype=np.int8)
    tab = np.zeros((3, 1), dtype=np.int16)
    with pytest.raises(KernelError, match="underrun"):
        kernels.ref_rope_q(x, tab, tab, 0, 1, 15, 0)
    with pytest.raises(KernelError):
        kernels.compute("rope_q", (np.zeros((1, 1, 3), np.int8),
                                   np.zeros((1, 1), np.int16),
                                   np.zeros((1, 1), np.int16)),
                        {"pos": 0, "mul": 1, "shift": 15, "zp": 0})


# --- elementwise family ----------------------------------------------------------

def test_concat_seq_cache_rows_first():
    cache = np.arange(3 * 64, dtype=np.int8).reshape(3, 64) % 100
    new = np.full((1, 64), 7, dtype=np.int8)
    y = kernels.ref_elementwise("concat_seq", (cache, new))
    assert y.shape == (4, 64)
    assert np.array_equal(y[:3], cache) and np.all(y[3] == 7)


def test_transpose_identity_perm():
    x = np.random.default_rng(1).integers(-128, 128, (3, 4, 5)).astype(np.int8)
    y = kernels.ref_elementwise("transpose", (x,), perm=[0, 1, 2])
    assert np.array_equal(x, y)
    yt = kernels.ref_elementwise("transpose", (x,), perm=[2, 0, 1])
    assert np.array_equal(yt, np.transpose(x, (2, 0, 1)))


def test_add_requant_additive_inverse():
    x = np.random.default_rng(2).integers(-127, 128, (4, 4)).astype(np.int8)
    y = kernels.ref_elementwise("add_requant", (x, (-x).astype(np.int8)),
                                mul=1234, shift=7, zp=3)
    assert np.all(y == 3)


def test_mul_requant_and_hardswish_oracle():
    r = np.random.default_rng(8)
    a = r.integers(-127, 128, (16,)).astype(np.int8)
    b = r.integers(-127, 128, (16,)).astype(np.int8)
    y = kernels.ref_elementwise("mul_requant", (a, b), mul=100, shift=9, zp=0)
    for i in range(16):
        assert y[i] == rq_oracle(int(a[i]) * int(b[i]), 100, 9, 0)
    h = kernels.ref_elementwise("hardswish_q", (a,), three_q=48, six_q=96,
                                mul=683, shift=10, zp=0)
    for i in range(16):
        inner = min(96, max(0, int(a[i]) + 48))
        assert h[i] == rq_oracle(int(a[i]) * inner, 683, 10, 0)


def test_causal_mask_absolute_positions():
    x = np.ones((1, 2, 5), dtype=np.int8)
    y = kernels.compute("causal_mask", (x,), {"past": 1}, origin=(0, 2, 0))
    # rows are absolute rows 2 and 3; mask col > row + past
    for i, row_abs in enumerate((2, 3)):
        for j in range(5):
            expect = -128 if j > row_abs + 1 else 1
            assert y[0, i, j] == expect


def test_gather_rows_bounds():
    table = np.arange(12, dtype=np.int8).reshape(4, 3)
    idx = np.array([3, 0, 3], dtype=np.int32)
    y = kernels.ref_elementwise("gather_rows", (table, idx))
    assert np.array_equal(y, table[[3, 0, 3]])
    with pytest.raises(KernelError):
        kernels.ref_elementwise("gather_rows", (table, np.array([4], np.int32)))


def test_saturating_casts_never_wrap():
    r = np.random.default_rng(13)
    a = r.integers(-127, 128, (64,)).astype(np.int8)
    b = r.integers(-127, 128, (64,)).astype(np.int8)
    y = kernels.ref_elementwise("mul_requant", (a, b), mul=1 << 15, shift=0, zp=0)
    assert y.min() >= -128 and y.max() <= 127
    assert np.all((y == 127) | (y == -128) | (np.abs(y.astype(int)) < 128))
