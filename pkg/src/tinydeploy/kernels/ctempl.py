"""C99 kernel bodies and the runtime header.

The emitted program depends on exactly four runtime primitives (DMA copy,
DMA wait, engine offload, offload wait); the header ships a host shim for
them so artifacts compile and run standalone with any C99 toolchain.
Kernels receive packed (contiguous) operand blocks plus runtime tile shape
parameters and reproduce the reference integer semantics bit for bit:
64-bit accumulators, round-half-away-from-zero requantization, truncating
signed division, the -128 softmax sentinel and the exact integer square
root."""

RUNTIME_HEADER = """\
#ifndef TD_RUNTIME_H
#define TD_RUNTIME_H

#include <stdint.h>
#include <string.h>

typedef int32_t td_dma_handle;

#ifndef TD_NO_HOST_SHIM
/* Host shim: synchronous implementations of the four runtime primitives.
 * A real port defines TD_NO_HOST_SHIM and provides these symbols. */
static inline td_dma_handle dma_copy_2d(void *dst, const void *src,
                                        int32_t rows, int32_t row_bytes,
                                        int32_t src_stride, int32_t dst_stride) {
    const uint8_t *s = (const uint8_t *)src;
    uint8_t *d = (uint8_t *)dst;
    for (int32_t r = 0; r < rows; ++r) {
        memcpy(d, s, (size_t)row_bytes);
        s += src_stride;
        d += dst_stride;
    }
    return 0;
}
static inline void dma_wait(td_dma_handle h) { (void)h; }
static inline void offload(int32_t engine_id, void (*fn)(void *), void *env) {
    (void)engine_id;
    fn(env);
}
static inline void offload_wait(int32_t engine_id) { (void)engine_id; }
#else
td_dma_handle dma_copy_2d(void *dst, const void *src, int32_t rows,
                          int32_t row_bytes, int32_t src_stride,
                          int32_t dst_stride);
void dma_wait(td_dma_handle h);
void offload(int32_t engine_id, void (*fn)(void *), void *env);
void offload_wait(int32_t engine_id);
#endif /* TD_NO_HOST_SHIM */

#endif /* TD_RUNTIME_H */
"""

_HELPERS = """\
static inline int8_t td_rq(int64_t acc, int32_t mul, int32_t shift, int32_t zp) {
    int64_t v = acc * (int64_t)mul;
    int64_t r;
    if (shift > 0) {
        int64_t av = v < 0 ? -v : v;
        r = (av + ((int64_t)1 << (shift - 1))) >> shift;
        if (v < 0) r = -r;
    } else {
        r = v;
    }
    r += zp;
    if (r > 127) r = 127;
    if (r < -128) r = -128;
    return (int8_t)r;
}

static inline int64_t td_isqrt(int64_t n) {
    if (n <= 0) return 0;
    int32_t bits = 0;
    int64_t t = n;
    while (t > 0) { t >>= 1; ++bits; }
    int64_t x = (int64_t)1 << ((bits + 1) >> 1);
    for (int32_t i = 0; i < 4; ++i) {
        x = (x + n / x) >> 1;
        if (x < 1) x = 1;
    }
    while (x * x > n) --x;
    while ((x + 1) * (x + 1) <= n) ++x;
    return x;
}
"""

# Kernel bodies keyed by C function name; only the ones an artifact uses are
# emitted (plus the helper block above).
KERNEL_DEFS: dict[str, str] = {}

KERNEL_DEFS["td_gemm_q8"] = """\
static void td_gemm_q8(const int8_t *a, const int8_t *b, const int32_t *bias,
                       int32_t bias_rows, int8_t *y, int32_t m, int32_t n,
                       int32_t o, int32_t trans_b, int32_t mul, int32_t shift,
                       int32_t zp) {
    for (int32_t i = 0; i < m; ++i) {
        const int32_t *brow = bias + (bias_rows > 1 ? (int64_t)i * o : 0);
        for (int32_t j = 0; j < o; ++j) {
            int64_t acc = brow[j];
            if (trans_b) {
                const int8_t *bj = b + (int64_t)j * n;
                for (int32_t k = 0; k < n; ++k)
                    acc += (int64_t)a[(int64_t)i * n + k] * bj[k];
            } else {
                for (int32_t k = 0; k < n; ++k)
                    acc += (int64_t)a[(int64_t)i * n + k] * b[(int64_t)k * o + j];
            }
            y[(int64_t)i * o + j] = td_rq(acc, mul, shift, zp);
        }
    }
}
"""

KERNEL_DEFS["td_gemm"] = """\
static void td_gemm(const int8_t *a, const int8_t *b, const int32_t *bias,
                    int32_t bias_rows, int32_t *y, int32_t m, int32_t n,
                    int32_t o, int32_t trans_b) {
    for (int32_t i = 0; i < m; ++i) {
        const int32_t *brow = bias + (bias_rows > 1 ? (int64_t)i * o : 0);
        for (int32_t j = 0; j < o; ++j) {
            int64_t acc = brow[j];
            if (trans_b) {
                const int8_t *bj = b + (int64_t)j * n;
                for (int32_t k = 0; k < n; ++k)
                    acc += (int64_t)a[(int64_t)i * n + k] * bj[k];
            } else {
                for (int32_t k = 0; k < n; ++k)
                    acc += (int64_t)a[(int64_t)i * n + k] * b[(int64_t)k * o + j];
            }
            y[(int64_t)i * o + j] = (int32_t)acc;
        }
    }
}
"""

KERNEL_DEFS["td_conv1x1_q8"] = """\
static void td_conv1x1_q8(const int8_t *x, const int8_t *w, const int32_t *bias,
                          int32_t bias_rows, int8_t *y, int32_t m, int32_t c_in,
                          int32_t c_out, int32_t mul, int32_t shift, int32_t zp) {
    /* pointwise convolution, H=1, W=m: weights packed [c_out][c_in] */
    td_gemm_q8(x, w, bias, bias_rows, y, m, c_in, c_out, 1, mul, shift, zp);
}
"""

KERNEL_DEFS["td_bmm_requant"] = """\
static void td_bmm_requant(const int8_t *a, const int8_t *b, int8_t *y,
                           int32_t nb, int32_t m, int32_t n, int32_t o,
                           int32_t mul, int32_t shift, int32_t zp) {
    for (int32_t t = 0; t < nb; ++t) {
        const int8_t *at = a + (int64_t)t * m * n;
        const int8_t *bt = b + (int64_t)t * n * o;
        int8_t *yt = y + (int64_t)t * m * o;
        for (int32_t i = 0; i < m; ++i)
            for (int32_t j = 0; j < o; ++j) {
                int64_t acc = 0;
                for (int32_t k = 0; k < n; ++k)
                    acc += (int64_t)at[(int64_t)i * n + k] * bt[(int64_t)k * o + j];
                yt[(int64_t)i * o + j] = td_rq(acc, mul, shift, zp);
            }
    }
}
"""

KERNEL_DEFS["td_bmm_i32"] = """\
static void td_bmm_i32(const int8_t *a, const int8_t *b, int32_t *y,
                       int32_t nb, int32_t m, int32_t n, int32_t o) {
    for (int32_t t = 0; t < nb; ++t) {
        const int8_t *at = a + (int64_t)t * m * n;
        const int8_t *bt = b + (int64_t)t * n * o;
        int32_t *yt = y + (int64_t)t * m * o;
        for (int32_t i = 0; i < m; ++i)
            for (int32_t j = 0; j < o; ++j) {
                int64_t acc = 0;
                for (int32_t k = 0; k < n; ++k)
                    acc += (int64_t)at[(int64_t)i * n + k] * bt[(int64_t)k * o + j];
                yt[(int64_t)i * o + j] = (int32_t)acc;
            }
    }
}
"""

KERNEL_DEFS["td_requant"] = """\
static void td_requant(const int32_t *x, int8_t *y, int32_t n, int32_t mul,
                       int32_t shift, int32_t zp) {
    for (int32_t i = 0; i < n; ++i)
        y[i] = td_rq((int64_t)x[i], mul, shift, zp);
}
"""

KERNEL_DEFS["td_softmax_i"] = """\
static void td_softmax_i(const int8_t *x, int8_t *y, int32_t rows, int32_t d,
                         int32_t x0_q, int32_t b_q, int32_t c_q,
                         int32_t out_bits, int32_t *scratch) {
    /* integer softmax; input code -128 is the masked sentinel (zero mass) */
    const int64_t maxcode = ((int64_t)1 << out_bits) - 1;
    const int64_t clamp = (int64_t)30 * x0_q;
    for (int32_t i = 0; i < rows; ++i) {
        const int8_t *row = x + (int64_t)i * d;
        int64_t m = -((int64_t)1 << 62);
        int32_t any_live = 0;
        for (int32_t j = 0; j < d; ++j)
            if (row[j] != -128) {
                any_live = 1;
                if (row[j] > m) m = row[j];
            }
        int64_t s = 0;
        for (int32_t j = 0; j < d; ++j) {
            if (row[j] == -128 || !any_live) {
                scratch[j] = 0;
                continue;
            }
            int64_t v = (int64_t)row[j] - m;
            if (v < clamp) v = clamp;
            int64_t q = v / x0_q;          /* both negative: positive floor */
            int64_t r = v - (int64_t)x0_q * q;
            int64_t z = (r + b_q) * r + c_q;
            if (z < 0) z = 0;
            int64_t e = z >> q;
            scratch[j] = (int32_t)e;
            s += e;
        }
        int8_t *out = y + (int64_t)i * d;
        for (int32_t j = 0; j < d; ++j)
            out[j] = s > 0 ? (int8_t)(((int64_t)scratch[j] * maxcode) / s) : 0;
    }
}
"""

KERNEL_DEFS["td_rmsnorm_i"] = """\
static void td_rmsnorm_i(const int8_t *x, const int8_t *w, int8_t *y,
                         int32_t rows, int32_t d, int32_t eps_q, int32_t kshift,
                         int32_t mul, int32_t shift, int32_t zp) {
    for (int32_t i = 0; i < rows; ++i) {
        const int8_t *row = x + (int64_t)i * d;
        int64_t ss = 0;
        for (int32_t j = 0; j < d; ++j)
            ss += (int64_t)row[j] * row[j];
        int64_t r = td_isqrt(ss / d + eps_q);
        int8_t *out = y + (int64_t)i * d;
        for (int32_t j = 0; j < d; ++j) {
            int64_t num = (int64_t)row[j] * w[j] * ((int64_t)1 << kshift);
            int64_t tq = num < 0 ? -((-num) / r) : num / r;
            out[j] = td_rq(tq, mul, shift, zp);
        }
    }
}
"""

KERNEL_DEFS["td_rope_q"] = """\
static void td_rope_q(const int8_t *x, const int16_t *cos_t, const int16_t *sin_t,
                      int8_t *y, int32_t s, int32_t h, int32_t dh,
                      int32_t mul, int32_t shift, int32_t zp) {
    /* tables arrive pre-sliced: row i holds the angles for sequence row i */
    const int32_t half = dh / 2;
    for (int32_t i = 0; i < s; ++i)
        for (int32_t j = 0; j < h; ++j) {
            const int8_t *xr = x + ((int64_t)i * h + j) * dh;
            int8_t *yr = y + ((int64_t)i * h + j) * dh;
            for (int32_t l = 0; l < half; ++l) {
                int64_t c = cos_t[(int64_t)i * half + l];
                int64_t sn = sin_t[(int64_t)i * half + l];
                int64_t xe = xr[2 * l], xo = xr[2 * l + 1];
                yr[2 * l] = td_rq(xe * c - xo * sn, mul, shift, zp);
                yr[2 * l + 1] = td_rq(xe * sn + xo * c, mul, shift, zp);
            }
        }
}
"""

KERNEL_DEFS["td_hardswish_q"] = """\
static void td_hardswish_q(const int8_t *x, int8_t *y, int32_t n,
                           int32_t three_q, int32_t six_q, int32_t mul,
                           int32_t shift, int32_t zp) {
    for (int32_t i = 0; i < n; ++i) {
        int64_t v = x[i];
        int64_t inner = v + three_q;
        if (inner < 0) inner = 0;
        if (inner > six_q) inner = six_q;
        y[i] = td_rq(v * inner, mul, shift, zp);
    }
}
"""

KERNEL_DEFS["td_add_requant"] = """\
static void td_add_requant(const int8_t *a, const int8_t *b, int8_t *y,
                           int32_t n, int32_t mul, int32_t shift, int32_t zp) {
    for (int32_t i = 0; i < n; ++i)
        y[i] = td_rq((int64_t)a[i] + b[i], mul, shift, zp);
}
"""

KERNEL_DEFS["td_mul_requant"] = """\
static void td_mul_requant(const int8_t *a, const int8_t *b, int8_t *y,
                           int32_t n, int32_t mul, int32_t shift, int32_t zp) {
    for (int32_t i = 0; i < n; ++i)
        y[i] = td_rq((int64_t)a[i] * b[i], mul, shift, zp);
}
"""

KERNEL_DEFS["td_causal_mask"] = """\
static void td_causal_mask(const int8_t *x, int8_t *y, int32_t nb, int32_t s,
                           int32_t t, int32_t r0, int32_t c0, int32_t past) {
    for (int32_t b = 0; b < nb; ++b)
        for (int32_t i = 0; i < s; ++i) {
            const int64_t lim = (int64_t)r0 + i + past;
            const int8_t *xr = x + ((int64_t)b * s + i) * t;
            int8_t *yr = y + ((int64_t)b * s + i) * t;
            for (int32_t j = 0; j < t; ++j)
                yr[j] = (c0 + j > lim) ? (int8_t)-128 : xr[j];
        }
}
"""

KERNEL_DEFS["td_transpose"] = """\
static void td_transpose(const uint8_t *x, uint8_t *y, int32_t rank,
                         const int32_t *shape, const int32_t *perm,
                         int32_t elem) {
    /* y[out index] = x[perm(out index)], shapes up to rank 4 */
    int32_t out_shape[4], in_stride[4], out_stride_src[4];
    for (int32_t d = 0; d < rank; ++d) out_shape[d] = shape[perm[d]];
    in_stride[rank - 1] = elem;
    for (int32_t d = rank - 2; d >= 0; --d)
        in_stride[d] = in_stride[d + 1] * shape[d + 1];
    for (int32_t d = 0; d < rank; ++d) out_stride_src[d] = in_stride[perm[d]];
    int32_t idx[4] = {0, 0, 0, 0};
    int64_t total = 1;
    for (int32_t d = 0; d < rank; ++d) total *= out_shape[d];
    for (int64_t n = 0; n < total; ++n) {
        int64_t src = 0;
        for (int32_t d = 0; d < rank; ++d) src += (int64_t)idx[d] * out_stride_src[d];
        memcpy(y + n * elem, x + src, (size_t)elem);
        for (int32_t d = rank - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
}
"""

KERNEL_DEFS["td_gather_rows"] = """\
static void td_gather_rows(const int8_t *table, const int32_t *idx, int8_t *y,
                           int32_t s, int32_t d, int32_t v) {
    for (int32_t i = 0; i < s; ++i) {
        int32_t r = idx[i];
        if (r < 0 || r >= v) r = 0; /* validated upstream; clamp defensively */
        memcpy(y + (int64_t)i * d, table + (int64_t)r * d, (size_t)d);
    }
}
"""

KERNEL_DEFS["td_concat_seq"] = """\
static void td_concat_seq(const uint8_t *a, const uint8_t *b, uint8_t *y,
                          int32_t a_rows, int32_t b_rows, int32_t row_bytes) {
    memcpy(y, a, (size_t)a_rows * row_bytes);
    memcpy(y + (int64_t)a_rows * row_bytes, b, (size_t)b_rows * row_bytes);
}
"""

KERNEL_DEFS["td_reshape"] = """\
static void td_reshape(const uint8_t *x, uint8_t *y, int64_t nbytes) {
    memcpy(y, x, (size_t)nbytes);
}
"""


def helper_block() -> str:
    return _HELPERS


def kernel_def(c_name: str) -> str:
    return KERNEL_DEFS[c_name]
