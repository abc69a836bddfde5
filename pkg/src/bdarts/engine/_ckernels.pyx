# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Same contracts as ``_fallback``. Forward convolution sums taps per output
element in (input channel, row, column) order; the innermost loop runs over
output columns so the compiler may vectorize across elements without
reordering any single element's sum.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libc.string cimport memset

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s,
                                 Py_ssize_t p, Py_ssize_t d) noexcept nogil:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


cdef inline void _col_range(Py_ssize_t off, Py_ssize_t s, Py_ssize_t n_in,
                            Py_ssize_t n_out, Py_ssize_t *lo, Py_ssize_t *hi) noexcept nogil:
    # valid output columns o with 0 <= o*s + off < n_in
    cdef Py_ssize_t a = 0, b
    if off < 0:
        a = (-off + s - 1) // s
    b = (n_in - 1 - off)
    if b < 0:
        hi[0] = 0
        lo[0] = 0
        return
    b = b // s + 1
    if b > n_out:
        b = n_out
    lo[0] = a
    hi[0] = b if b > a else a


def conv2d_forward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w,
                   int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], cin_g = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, KH, stride, padding, dilation)
    cdef Py_ssize_t Wo = _out_size(W, KW, stride, padding, dilation)
    cdef Py_ssize_t cout_g = Cout // groups
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, Cout, Ho, Wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, co, ci, cin, i, j, oh, ow, ih, off, lo, hi
    cdef real wv
    cdef real *orow
    cdef const real *xrow
    cdef Py_ssize_t n, hw = H * W
    with nogil:
        if KH == 1 and KW == 1 and stride == 1 and padding == 0:
            # pointwise: each plane is one contiguous row
            for b in range(B):
                for co in range(Cout):
                    orow = &out[b, co, 0, 0]
                    for ci in range(cin_g):
                        wv = w[co, ci, 0, 0]
                        xrow = &x[b, (co // cout_g) * cin_g + ci, 0, 0]
                        for n in range(hw):
                            orow[n] = orow[n] + wv * xrow[n]
        else:
            for b in range(B):
                for co in range(Cout):
                    for ci in range(cin_g):
                        cin = (co // cout_g) * cin_g + ci
                        for i in range(KH):
                            for j in range(KW):
                                wv = w[co, ci, i, j]
                                off = j * dilation - padding
                                _col_range(off, stride, W, Wo, &lo, &hi)
                                for oh in range(Ho):
                                    ih = oh * stride + i * dilation - padding
                                    if ih < 0 or ih >= H:
                                        continue
                                    orow = &out[b, co, oh, 0]
                                    xrow = &x[b, cin, ih, 0]
                                    if stride == 1:
                                        for ow in range(lo, hi):
                                            orow[ow] = orow[ow] + wv * xrow[ow + off]
                                    else:
                                        for ow in range(lo, hi):
                                            orow[ow] = orow[ow] + wv * xrow[ow * stride + off]
    return out_arr


def conv2d_backward_input(const real[:, :, :, ::1] gout, const real[:, :, :, ::1] w,
                          int H, int W, int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t B = gout.shape[0], Cout = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t cin_g = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t cout_g = Cout // groups
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((B, cin_g * groups, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, co, ci, cin, i, j, oh, ow, ih, off, lo, hi
    cdef real wv
    cdef real *xrow
    cdef const real *grow
    with nogil:
        for b in range(B):
            for co in range(Cout):
                for ci in range(cin_g):
                    cin = (co // cout_g) * cin_g + ci
                    for i in range(KH):
                        for j in range(KW):
                            wv = w[co, ci, i, j]
                            off = j * dilation - padding
                            _col_range(off, stride, W, Wo, &lo, &hi)
                            for oh in range(Ho):
                                ih = oh * stride + i * dilation - padding
                                if ih < 0 or ih >= H:
                                    continue
                                xrow = &gx[b, cin, ih, 0]
                                grow = &gout[b, co, oh, 0]
                                if stride == 1:
                                    for ow in range(lo, hi):
                                        xrow[ow + off] = xrow[ow + off] + wv * grow[ow]
                                else:
                                    for ow in range(lo, hi):
                                        xrow[ow * stride + off] = xrow[ow * stride + off] + wv * grow[ow]
    return gx_arr


def conv2d_backward_weight(const real[:, :, :, ::1] gout, const real[:, :, :, ::1] x,
                           int KH, int KW, int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t B = gout.shape[0], Cout = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t cin_g = Cin // groups, cout_g = Cout // groups
    dtype = np.float32 if real is float else np.float64
    gw_arr = np.zeros((Cout, cin_g, KH, KW), dtype=dtype)
    acc_arr = np.zeros(Wo, dtype=dtype)
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] acc = acc_arr
    cdef Py_ssize_t b, co, ci, cin, i, j, oh, ow, ih, off, lo, hi
    cdef real s
    cdef const real *xrow
    cdef const real *grow
    with nogil:
        for co in range(Cout):
            for ci in range(cin_g):
                cin = (co // cout_g) * cin_g + ci
                for i in range(KH):
                    for j in range(KW):
                        off = j * dilation - padding
                        _col_range(off, stride, W, Wo, &lo, &hi)
                        memset(&acc[0], 0, Wo * sizeof(real))
                        # elementwise row accumulator keeps the loop vectorizable
                        for b in range(B):
                            for oh in range(Ho):
                                ih = oh * stride + i * dilation - padding
                                if ih < 0 or ih >= H:
                                    continue
                                xrow = &x[b, cin, ih, 0]
                                grow = &gout[b, co, oh, 0]
                                if stride == 1:
                                    for ow in range(lo, hi):
                                        acc[ow] = acc[ow] + grow[ow] * xrow[ow + off]
                                else:
                                    for ow in range(lo, hi):
                                        acc[ow] = acc[ow] + grow[ow] * xrow[ow * stride + off]
                        s = 0
                        for ow in range(Wo):
                            s = s + acc[ow]
                        gw[co, ci, i, j] = s
    return gw_arr


def maxpool2d_forward(const real[:, :, :, ::1] x, int k, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, padding, 1)
    cdef Py_ssize_t Wo = _out_size(W, k, stride, padding, 1)
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    taps_arr = np.full((B, C, Ho, Wo), -1, dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] taps = taps_arr
    cdef Py_ssize_t b, c, oh, ow, i, j, ih, iw
    cdef real best, v
    cdef signed char t
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(Ho):
                    for ow in range(Wo):
                        best = -INFINITY
                        t = -1
                        for i in range(k):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(k):
                                iw = ow * stride + j - padding
                                if iw < 0 or iw >= W:
                                    continue
                                v = x[b, c, ih, iw]
                                if v > best:
                                    best = v
                                    t = <signed char>(i * k + j)
                        out[b, c, oh, ow] = best
                        taps[b, c, oh, ow] = t
    return out_arr, taps_arr


def maxpool2d_backward(const real[:, :, :, ::1] gout, const cnp.int8_t[:, :, :, ::1] taps,
                       int H, int W, int k, int stride, int padding):
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, c, oh, ow, ih, iw
    cdef int t
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(Ho):
                    for ow in range(Wo):
                        t = taps[b, c, oh, ow]
                        if t < 0:
                            continue
                        ih = oh * stride + t // k - padding
                        iw = ow * stride + t % k - padding
                        gx[b, c, ih, iw] += gout[b, c, oh, ow]
    return gx_arr


def avgpool2d_forward(const real[:, :, :, ::1] x, int k, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, padding, 1)
    cdef Py_ssize_t Wo = _out_size(W, k, stride, padding, 1)
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, oh, ow, i, j, ih, iw
    cdef real s
    cdef int n
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(Ho):
                    for ow in range(Wo):
                        s = 0
                        n = 0
                        for i in range(k):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(k):
                                iw = ow * stride + j - padding
                                if iw < 0 or iw >= W:
                                    continue
                                s = s + x[b, c, ih, iw]
                                n = n + 1
                        out[b, c, oh, ow] = s / n
    return out_arr


def avgpool2d_backward(const real[:, :, :, ::1] gout, int H, int W, int k, int stride, int padding):
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, c, oh, ow, i, j, ih, iw, i0, i1, j0, j1
    cdef real g
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(Ho):
                    i0 = oh * stride - padding
                    i1 = i0 + k
                    if i0 < 0:
                        i0 = 0
                    if i1 > H:
                        i1 = H
                    for ow in range(Wo):
                        j0 = ow * stride - padding
                        j1 = j0 + k
                        if j0 < 0:
                            j0 = 0
                        if j1 > W:
                            j1 = W
                        g = gout[b, c, oh, ow] / ((i1 - i0) * (j1 - j0))
                        for ih in range(i0, i1):
                            for iw in range(j0, j1):
                                gx[b, c, ih, iw] += g
    return gx_arr



cdef extern from *:
    """
    #include <stdint.h>
    /* restrict-qualified row kernels; separate loops let the compiler vectorize */
    static inline void row_axpy_f(float *restrict o, const float *restrict x, float w, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; i++) o[i] = o[i] + w * x[i];
    }
    static inline void row_axpy_d(double *restrict o, const double *restrict x, double w, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; i++) o[i] = o[i] + w * x[i];
    }
    static inline void row_fma_f(float *restrict o, const float *restrict a, const float *restrict b, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; i++) o[i] = o[i] + a[i] * b[i];
    }
    static inline void row_fma_d(double *restrict o, const double *restrict a, const double *restrict b, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; i++) o[i] = o[i] + a[i] * b[i];
    }
    static inline void row_add_f(float *restrict o, const float *restrict x, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; i++) o[i] = o[i] + x[i];
    }
    static inline void row_add_d(double *restrict o, const double *restrict x, Py_ssize_t n) {
        for (Py_ssize_t i = 0; i < n; i++) o[i] = o[i] + x[i];
    }
    /* one output row of a depthwise correlation; taps summed in (i, j) order per element */
    #define DW_BLOCK(T, BLK)                                                                  \
        for (; s + BLK <= n; s += BLK) {                                                      \
            T acc[BLK];                                                                       \
            for (int t = 0; t < BLK; t++) acc[t] = 0;                                         \
            for (Py_ssize_t i = 0; i < kh; i++)                                               \
                for (Py_ssize_t j = 0; j < kw; j++) {                                         \
                    const T wv = w[i * kw + j];                                               \
                    const T *x = p + i * d * Wp + j * d + s;                                  \
                    for (int t = 0; t < BLK; t++) acc[t] = acc[t] + wv * x[t];                \
                }                                                                             \
            for (int t = 0; t < BLK; t++) o[s + t] = acc[t];                                  \
        }
    #define DW_ROW(NAME, T, BLK)                                                              \
    static inline void NAME(T *restrict o, const T *restrict p, Py_ssize_t Wp, const T *restrict w, \
                            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t d, Py_ssize_t n) {       \
        Py_ssize_t s = 0;                                                                     \
        DW_BLOCK(T, BLK)                                                                      \
        DW_BLOCK(T, BLK / 2)                                                                  \
        DW_BLOCK(T, BLK / 4)                                                                  \
        for (; s < n; s++) {                                                                  \
            T a = 0;                                                                          \
            for (Py_ssize_t i = 0; i < kh; i++)                                               \
                for (Py_ssize_t j = 0; j < kw; j++)                                           \
                    a = a + w[i * kw + j] * p[i * d * Wp + j * d + s];                        \
            o[s] = a;                                                                         \
        }                                                                                     \
    }
    #define DOT(NAME, T, BLK)                                                                 \
    static inline T NAME(const T *restrict a, const T *restrict b, Py_ssize_t n) {            \
        T acc[BLK];                                                                           \
        for (int t = 0; t < BLK; t++) acc[t] = 0;                                             \
        Py_ssize_t s = 0;                                                                     \
        for (; s + BLK <= n; s += BLK)                                                        \
            for (int t = 0; t < BLK; t++) acc[t] = acc[t] + a[s + t] * b[s + t];              \
        for (int t = 0; s < n; s++, t++) acc[t] = acc[t] + a[s] * b[s];                       \
        T r = 0;                                                                              \
        for (int t = 0; t < BLK; t++) r = r + acc[t];                                         \
        return r;                                                                             \
    }
    DOT(dot_f, float, 16)
    DOT(dot_d, double, 8)
    DW_ROW(dw_row_f, float, 16)
    DW_ROW(dw_row_d, double, 8)

    /* running max with first-index tap; bitmask selects keep the loop branch free */
    #define ROW_ARGMAX(NAME, T, I)                                                            \
    static inline void NAME(T *restrict o, T *restrict t, const T *restrict x, T tap, Py_ssize_t n) { \
        for (Py_ssize_t i = 0; i < n; i++) {                                                  \
            union { T f; I i; } a, b, c, d;                                                   \
            a.f = x[i]; b.f = o[i]; c.f = tap; d.f = t[i];                                    \
            I m = -(I)(a.f > b.f);                                                            \
            a.i = (a.i & m) | (b.i & ~m);                                                     \
            c.i = (c.i & m) | (d.i & ~m);                                                     \
            o[i] = a.f; t[i] = c.f;                                                           \
        }                                                                                     \
    }
    ROW_ARGMAX(row_argmax_f, float, int32_t)
    ROW_ARGMAX(row_argmax_d, double, int64_t)
    /* batch-norm reductions: eight double lanes, combined in a fixed order */
    #define BN_HELPERS(SUF, T)                                                                \
    static inline double bn_sum_##SUF(const T *restrict x, Py_ssize_t n) {                    \
        double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};                                             \
        Py_ssize_t s = 0;                                                                     \
        for (; s + 8 <= n; s += 8)                                                            \
            for (int t = 0; t < 8; t++) acc[t] += (double)x[s + t];                           \
        for (int t = 0; s < n; s++, t++) acc[t] += (double)x[s];                              \
        return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])); \
    }                                                                                         \
    static inline double bn_center_##SUF(T *restrict o, const T *restrict x, T m, Py_ssize_t n) { \
        double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};                                             \
        Py_ssize_t s = 0;                                                                     \
        for (; s + 8 <= n; s += 8)                                                            \
            for (int t = 0; t < 8; t++) {                                                     \
                T v = x[s + t] - m; o[s + t] = v; acc[t] += (double)v * (double)v;            \
            }                                                                                 \
        for (int t = 0; s < n; s++, t++) {                                                    \
            T v = x[s] - m; o[s] = v; acc[t] += (double)v * (double)v;                        \
        }                                                                                     \
        return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])); \
    }                                                                                         \
    static inline void bn_scale_##SUF(T *restrict o, T r, Py_ssize_t n) {                     \
        for (Py_ssize_t s = 0; s < n; s++) o[s] = o[s] * r;                                   \
    }                                                                                         \
    static inline void bn_sums_##SUF(const T *restrict g, const T *restrict x, Py_ssize_t n,  \
                                     double *s1, double *s2) {                                \
        double a[8] = {0, 0, 0, 0, 0, 0, 0, 0}, b[8] = {0, 0, 0, 0, 0, 0, 0, 0};              \
        Py_ssize_t s = 0;                                                                     \
        for (; s + 8 <= n; s += 8)                                                            \
            for (int t = 0; t < 8; t++) {                                                     \
                a[t] += (double)g[s + t]; b[t] += (double)g[s + t] * (double)x[s + t];        \
            }                                                                                 \
        for (int t = 0; s < n; s++, t++) { a[t] += (double)g[s]; b[t] += (double)g[s] * (double)x[s]; } \
        *s1 += ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));             \
        *s2 += ((b[0] + b[1]) + (b[2] + b[3])) + ((b[4] + b[5]) + (b[6] + b[7]));             \
    }                                                                                         \
    static inline void bn_grad_##SUF(T *restrict o, const T *restrict g, const T *restrict x, \
                                     T r, T m1, T m2, Py_ssize_t n) {                         \
        for (Py_ssize_t s = 0; s < n; s++) o[s] = r * (g[s] - m1 - x[s] * m2);                \
    }
    BN_HELPERS(f, float)
    BN_HELPERS(d, double)
    """
    double bn_sum_f(const float *x, Py_ssize_t n) nogil
    double bn_sum_d(const double *x, Py_ssize_t n) nogil
    double bn_center_f(float *o, const float *x, float m, Py_ssize_t n) nogil
    double bn_center_d(double *o, const double *x, double m, Py_ssize_t n) nogil
    void bn_scale_f(float *o, float r, Py_ssize_t n) nogil
    void bn_scale_d(double *o, double r, Py_ssize_t n) nogil
    void bn_sums_f(const float *g, const float *x, Py_ssize_t n, double *s1, double *s2) nogil
    void bn_sums_d(const double *g, const double *x, Py_ssize_t n, double *s1, double *s2) nogil
    void bn_grad_f(float *o, const float *g, const float *x, float r, float m1, float m2, Py_ssize_t n) nogil
    void bn_grad_d(double *o, const double *g, const double *x, double r, double m1, double m2, Py_ssize_t n) nogil
    void row_axpy_f(float *o, const float *x, float w, Py_ssize_t n) nogil
    void row_axpy_d(double *o, const double *x, double w, Py_ssize_t n) nogil
    void row_fma_f(float *o, const float *a, const float *b, Py_ssize_t n) nogil
    void row_fma_d(double *o, const double *a, const double *b, Py_ssize_t n) nogil
    void row_add_f(float *o, const float *x, Py_ssize_t n) nogil
    void row_add_d(double *o, const double *x, Py_ssize_t n) nogil
    void dw_row_f(float *o, const float *p, Py_ssize_t Wp, const float *w,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t d, Py_ssize_t n) nogil
    void dw_row_d(double *o, const double *p, Py_ssize_t Wp, const double *w,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t d, Py_ssize_t n) nogil
    float dot_f(const float *a, const float *b, Py_ssize_t n) nogil
    double dot_d(const double *a, const double *b, Py_ssize_t n) nogil
    void row_argmax_f(float *o, float *t, const float *x, float tap, Py_ssize_t n) nogil
    void row_argmax_d(double *o, double *t, const double *x, double tap, Py_ssize_t n) nogil


cdef inline void _axpy(real *o, const real *x, real w, Py_ssize_t n) noexcept nogil:
    if real is float:
        row_axpy_f(o, x, w, n)
    else:
        row_axpy_d(o, x, w, n)


cdef inline void _fma(real *o, const real *a, const real *b, Py_ssize_t n) noexcept nogil:
    if real is float:
        row_fma_f(o, a, b, n)
    else:
        row_fma_d(o, a, b, n)


cdef inline void _add(real *o, const real *x, Py_ssize_t n) noexcept nogil:
    if real is float:
        row_add_f(o, x, n)
    else:
        row_add_d(o, x, n)


cdef inline void _argmax(real *o, real *t, const real *x, real tap, Py_ssize_t n) noexcept nogil:
    if real is float:
        row_argmax_f(o, t, x, tap, n)
    else:
        row_argmax_d(o, t, x, tap, n)


# -- depthwise fast paths ------------------------------------------------------
# One input channel per group, stride 1. Each (b, c) plane is copied into a
# zero-padded scratch plane of row pitch Wp; the output is then computed over
# the flattened plane as if it were one long row of pitch Wp, and the columns
# past the true width are dropped. Adding an exact zero leaves a partial sum
# unchanged, so the forward result is identical to the bounds-checked loop.


cdef inline void _pad_plane(const real *src, real *dst, Py_ssize_t H, Py_ssize_t W,
                            Py_ssize_t pt, Py_ssize_t pl, Py_ssize_t Wp, Py_ssize_t n, real fill) noexcept nogil:
    # src [H, W] lands at row offset pt, column offset pl of dst (pitch Wp, n elements)
    cdef Py_ssize_t r, c
    for r in range(n):
        dst[r] = fill
    for r in range(H):
        for c in range(W):
            dst[(r + pt) * Wp + pl + c] = src[r * W + c]


cdef inline void _dw_plane(real *o, const real *p, Py_ssize_t Wp, const real *w,
                           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t d, Py_ssize_t n) noexcept nogil:
    if real is float:
        dw_row_f(o, p, Wp, w, kh, kw, d, n)
    else:
        dw_row_d(o, p, Wp, w, kh, kw, d, n)


cdef inline real _dot(const real *a, const real *b, Py_ssize_t n) noexcept nogil:
    if real is float:
        return dot_f(a, b, n)
    else:
        return dot_d(a, b, n)


def depthwise_forward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w,
                      int stride, int padding, int dilation):
    if stride != 1:
        return conv2d_forward(x, w, stride, padding, dilation, x.shape[1])
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, KH, 1, padding, dilation)
    cdef Py_ssize_t Wo = _out_size(W, KW, 1, padding, dilation)
    cdef Py_ssize_t Wp = W + 2 * padding, Hp = H + 2 * padding
    cdef Py_ssize_t npad = (Hp + 1) * Wp
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    pad_arr = np.zeros(npad, dtype=dtype)
    ext_arr = np.empty(Ho * Wp, dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[::1] pad = pad_arr
    cdef real[::1] ext = ext_arr
    cdef Py_ssize_t b, c, oh, ow
    with nogil:
        for b in range(B):
            for c in range(C):
                _pad_plane(&x[b, c, 0, 0], &pad[0], H, W, padding, padding, Wp, npad, 0)
                _dw_plane(&ext[0], &pad[0], Wp, &w[c, 0, 0, 0], KH, KW, dilation, Ho * Wp)
                for oh in range(Ho):
                    for ow in range(Wo):
                        out[b, c, oh, ow] = ext[oh * Wp + ow]
    return out_arr


def depthwise_backward_input(const real[:, :, :, ::1] gout, const real[:, :, :, ::1] w,
                             int H, int W, int stride, int padding, int dilation):
    # stride 1: correlate the padded output gradient with the flipped kernel
    cdef Py_ssize_t KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t pt = dilation * (KH - 1) - padding, pl = dilation * (KW - 1) - padding
    if stride != 1 or pt < 0 or pl < 0:
        return conv2d_backward_input(gout, w, H, W, stride, padding, dilation, gout.shape[1])
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t Wp = Wo + 2 * pl, Hp = Ho + 2 * pt
    cdef Py_ssize_t npad = (Hp + 1) * Wp
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((B, C, H, W), dtype=dtype)
    pad_arr = np.zeros(npad, dtype=dtype)
    ext_arr = np.empty(H * Wp, dtype=dtype)
    wf_arr = np.ascontiguousarray(np.asarray(w)[:, :, ::-1, ::-1])
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[::1] pad = pad_arr
    cdef real[::1] ext = ext_arr
    cdef const real[:, :, :, ::1] wf = wf_arr
    cdef Py_ssize_t b, c, r, q
    with nogil:
        for b in range(B):
            for c in range(C):
                _pad_plane(&gout[b, c, 0, 0], &pad[0], Ho, Wo, pt, pl, Wp, npad, 0)
                _dw_plane(&ext[0], &pad[0], Wp, &wf[c, 0, 0, 0], KH, KW, dilation, H * Wp)
                for r in range(H):
                    for q in range(W):
                        gx[b, c, r, q] = ext[r * Wp + q]
    return gx_arr


def depthwise_backward_weight(const real[:, :, :, ::1] gout, const real[:, :, :, ::1] x,
                              int KH, int KW, int stride, int padding, int dilation):
    if stride != 1:
        return conv2d_backward_weight(gout, x, KH, KW, stride, padding, dilation, x.shape[1])
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1], Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Wp = W + 2 * padding, Hp = H + 2 * padding
    cdef Py_ssize_t npad = (Hp + 1) * Wp, n = Ho * Wp
    dtype = np.float32 if real is float else np.float64
    gw_arr = np.zeros((C, 1, KH, KW), dtype=dtype)
    pad_arr = np.zeros(npad, dtype=dtype)
    gext_arr = np.zeros(n, dtype=dtype)
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] pad = pad_arr
    cdef real[::1] gext = gext_arr
    cdef Py_ssize_t b, c, i, j, oh, ow
    with nogil:
        for c in range(C):
            for b in range(B):
                _pad_plane(&x[b, c, 0, 0], &pad[0], H, W, padding, padding, Wp, npad, 0)
                # output gradient at pitch Wp; the extra columns stay zero
                for oh in range(Ho):
                    for ow in range(Wo):
                        gext[oh * Wp + ow] = gout[b, c, oh, ow]
                for i in range(KH):
                    for j in range(KW):
                        gw[c, 0, i, j] += _dot(&gext[0], &pad[i * dilation * Wp + j * dilation], n)
    return gw_arr


# -- pooling on padded planes --------------------------------------------------


def maxpool2d_forward_padded(const real[:, :, :, ::1] x, int k, int stride, int padding):
    # tap indices are tracked in a same-width float row so the select vectorizes
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, padding, 1)
    cdef Py_ssize_t Wo = _out_size(W, k, stride, padding, 1)
    cdef Py_ssize_t Wp = W + 2 * padding, Hp = H + 2 * padding
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    taps_arr = np.empty((B, C, Ho, Wo), dtype=np.int8)
    pad_arr = np.empty(Hp * Wp, dtype=dtype)
    trow_arr = np.empty(Wo, dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] taps = taps_arr
    cdef real[::1] pad = pad_arr
    cdef real[::1] tr = trow_arr
    cdef Py_ssize_t b, c, oh, ow, i, j
    cdef real v
    cdef real *orow
    cdef const real *prow
    cdef real t
    with nogil:
        for b in range(B):
            for c in range(C):
                _pad_plane(&x[b, c, 0, 0], &pad[0], H, W, padding, padding, Wp, Hp * Wp, -INFINITY)
                for oh in range(Ho):
                    orow = &out[b, c, oh, 0]
                    for ow in range(Wo):
                        orow[ow] = -INFINITY
                        tr[ow] = -1
                    for i in range(k):
                        prow = &pad[(oh * stride + i) * Wp]
                        for j in range(k):
                            t = <real>(i * k + j)
                            if stride == 1:
                                _argmax(orow, &tr[0], prow + j, t, Wo)
                            else:
                                for ow in range(Wo):
                                    v = prow[ow * stride + j]
                                    if v > orow[ow]:
                                        orow[ow] = v
                                        tr[ow] = t
                    for ow in range(Wo):
                        taps[b, c, oh, ow] = <cnp.int8_t>tr[ow]
    return out_arr, taps_arr


def avgpool2d_forward_padded(const real[:, :, :, ::1] x, int k, int stride, int padding):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out_size(H, k, stride, padding, 1)
    cdef Py_ssize_t Wo = _out_size(W, k, stride, padding, 1)
    cdef Py_ssize_t Wp = W + 2 * padding, Hp = H + 2 * padding
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C, Ho, Wo), dtype=dtype)
    pad_arr = np.empty(Hp * Wp, dtype=dtype)
    rcount_arr = np.empty(Ho, dtype=np.intp)
    ccount_arr = np.empty(Wo, dtype=np.intp)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[::1] pad = pad_arr
    cdef Py_ssize_t[::1] rcount = rcount_arr
    cdef Py_ssize_t[::1] ccount = ccount_arr
    cdef Py_ssize_t b, c, oh, ow, i, j, lo, hi
    cdef real *orow
    cdef const real *prow
    with nogil:
        for oh in range(Ho):
            lo = oh * stride - padding
            hi = lo + k
            rcount[oh] = (hi if hi < H else H) - (lo if lo > 0 else 0)
        for ow in range(Wo):
            lo = ow * stride - padding
            hi = lo + k
            ccount[ow] = (hi if hi < W else W) - (lo if lo > 0 else 0)
        for b in range(B):
            for c in range(C):
                _pad_plane(&x[b, c, 0, 0], &pad[0], H, W, padding, padding, Wp, Hp * Wp, 0)
                for oh in range(Ho):
                    orow = &out[b, c, oh, 0]
                    for i in range(k):
                        prow = &pad[(oh * stride + i) * Wp]
                        for j in range(k):
                            if stride == 1:
                                _add(orow, prow + j, Wo)
                            else:
                                for ow in range(Wo):
                                    orow[ow] = orow[ow] + prow[ow * stride + j]
                    for ow in range(Wo):
                        orow[ow] = orow[ow] / (rcount[oh] * ccount[ow])
    return out_arr


# -- batch normalization -------------------------------------------------------


def bn_forward(const real[:, :, :, ::1] x, double eps):
    """Normalize per channel with biased batch variance; returns (xhat, inv_std[C])."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3]
    dtype = np.float32 if real is float else np.float64
    xhat_arr = np.empty((B, C, x.shape[2], x.shape[3]), dtype=dtype)
    inv_arr = np.empty(C, dtype=dtype)
    cdef real[:, :, :, ::1] xhat = xhat_arr
    cdef real[::1] inv = inv_arr
    cdef Py_ssize_t b, c
    cdef double s
    cdef real m, r
    with nogil:
        for c in range(C):
            s = 0
            for b in range(B):
                if real is float:
                    s = s + bn_sum_f(&x[b, c, 0, 0], HW)
                else:
                    s = s + bn_sum_d(&x[b, c, 0, 0], HW)
            m = <real>(s / (B * HW))
            s = 0
            for b in range(B):
                if real is float:
                    s = s + bn_center_f(&xhat[b, c, 0, 0], &x[b, c, 0, 0], m, HW)
                else:
                    s = s + bn_center_d(&xhat[b, c, 0, 0], &x[b, c, 0, 0], m, HW)
            r = <real>(1.0 / (s / (B * HW) + eps) ** 0.5)
            inv[c] = r
            for b in range(B):
                if real is float:
                    bn_scale_f(&xhat[b, c, 0, 0], r, HW)
                else:
                    bn_scale_d(&xhat[b, c, 0, 0], r, HW)
    return xhat_arr, inv_arr


def bn_backward(const real[:, :, :, ::1] g, const real[:, :, :, ::1] xhat, const real[::1] inv):
    """Gradient through batch statistics: inv * (g - mean(g) - xhat * mean(g * xhat))."""
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], HW = g.shape[2] * g.shape[3]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((B, C, g.shape[2], g.shape[3]), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, c
    cdef double s1, s2
    cdef real m1, m2
    with nogil:
        for c in range(C):
            s1 = 0
            s2 = 0
            for b in range(B):
                if real is float:
                    bn_sums_f(&g[b, c, 0, 0], &xhat[b, c, 0, 0], HW, &s1, &s2)
                else:
                    bn_sums_d(&g[b, c, 0, 0], &xhat[b, c, 0, 0], HW, &s1, &s2)
            m1 = <real>(s1 / (B * HW))
            m2 = <real>(s2 / (B * HW))
            for b in range(B):
                if real is float:
                    bn_grad_f(&gx[b, c, 0, 0], &g[b, c, 0, 0], &xhat[b, c, 0, 0], inv[c], m1, m2, HW)
                else:
                    bn_grad_d(&gx[b, c, 0, 0], &g[b, c, 0, 0], &xhat[b, c, 0, 0], inv[c], m1, m2, HW)
    return gx_arr


def axpy(real[::1] out, const real[::1] x, double w):
    """out += w * x, elementwise, in place."""
    with nogil:
        _axpy(&out[0], &x[0], <real>w, out.shape[0])
