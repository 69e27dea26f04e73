# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernels.

Layouts (all C-contiguous):
    u, dt, y          (batch, L, D)
    A                 (K, D, N)       diagonal state matrices, K parameter groups
    Bm, Cm            (batch, L, N)   input-dependent projections
    Dskip             (K, D)
    reverse           (K,) uint8      scan group k from the last step to the first

The batch is split into K equal consecutive groups; group k uses A[k],
Dskip[k] and reverse[k]. When ``softplus`` is set, ``dt`` holds raw values
and the step size is softplus(dt). Per step and channel the exact diagonal
zero-order hold is used:
    abar = exp(delta * a), bbar = (abar - 1) / a * b   (delta * b when a == 0)

Inner loops run over the state index with branch-free arithmetic so the
compiler can vectorize them, ``exp`` included.
"""
from libc.math cimport exp, expf, expm1, expm1f, fabs, fabsf, log1p, log1pf
from libc.stdlib cimport malloc, free

ctypedef fused floating:
    float
    double


cdef inline void _steps(const floating *raw, Py_ssize_t size, bint softplus,
                        floating *out) noexcept nogil:
    # softplus(x) = max(x, 0) + log1p(exp(-|x|)), written branch-free
    cdef Py_ssize_t i
    cdef floating x
    if not softplus:
        for i in range(size):
            out[i] = raw[i]
        return
    for i in range(size):
        x = raw[i]
        if floating is float:
            out[i] = (x if x > 0 else 0) + log1pf(expf(-fabsf(x)))
        else:
            out[i] = (x if x > 0 else 0) + log1p(exp(-fabs(x)))


cdef inline void _sigmoid_from_softplus(const floating *sp, Py_ssize_t size,
                                        floating *out) noexcept nogil:
    # sigmoid(x) = 1 - exp(-softplus(x))
    cdef Py_ssize_t i
    for i in range(size):
        if floating is float:
            out[i] = -expm1f(-sp[i])
        else:
            out[i] = -expm1(-sp[i])


cdef inline void _inverse_a(const floating *A, Py_ssize_t size, floating *inv_a,
                            floating *is_zero) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(size):
        if A[k] == 0:
            inv_a[k] = 0
            is_zero[k] = 1
        else:
            inv_a[k] = 1 / A[k]
            is_zero[k] = 0


def _check(u, dt, A, Bm, Cm, Dskip, reverse):
    nb, L, D = u.shape[0], u.shape[1], u.shape[2]
    K, N = A.shape[0], A.shape[2]
    if K < 1 or nb % K:
        raise ValueError(f"batch {nb} does not split into {K} groups")
    if tuple(dt.shape) != (nb, L, D) or A.shape[1] != D:
        raise ValueError("u, dt and A disagree on shape")
    if tuple(Bm.shape) != (nb, L, N) or tuple(Cm.shape) != (nb, L, N):
        raise ValueError("B and C must be (batch, L, N)")
    if tuple(Dskip.shape) != (K, D) or reverse.shape[0] != K:
        raise ValueError("Dskip must be (K, D) and reverse (K,)")


def scan_forward(floating[:, :, ::1] u, floating[:, :, ::1] dt_in,
                 floating[:, :, ::1] A, floating[:, :, ::1] Bm,
                 floating[:, :, ::1] Cm, floating[:, ::1] Dskip,
                 unsigned char[::1] reverse, bint softplus,
                 floating[:, :, ::1] y):
    _check(u, dt_in, A, Bm, Cm, Dskip, reverse)
    cdef Py_ssize_t nb = u.shape[0], L = u.shape[1], D = u.shape[2]
    cdef Py_ssize_t K = A.shape[0], N = A.shape[2], DN = D * N
    cdef Py_ssize_t per = nb // K
    cdef Py_ssize_t b, s, t, d, n, k
    cdef floating dt, ut, ab, f, hv, acc
    cdef floating *hrow
    cdef const floating *arow
    cdef floating *iarow
    cdef floating *zrow
    cdef floating *bt
    cdef floating *ct
    cdef floating *h = <floating *> malloc(DN * sizeof(floating))
    cdef floating *inv_a = <floating *> malloc(K * DN * sizeof(floating))
    cdef floating *is_zero = <floating *> malloc(K * DN * sizeof(floating))
    cdef floating *dts = <floating *> malloc(L * D * sizeof(floating))
    if h == NULL or inv_a == NULL or is_zero == NULL or dts == NULL:
        free(h); free(inv_a); free(is_zero); free(dts)
        raise MemoryError()
    try:
        with nogil:
            _inverse_a(&A[0, 0, 0], K * DN, inv_a, is_zero)
            for b in range(nb):
                k = b // per
                _steps(&dt_in[b, 0, 0], L * D, softplus, dts)
                for n in range(DN):
                    h[n] = 0
                for s in range(L):
                    t = L - 1 - s if reverse[k] else s
                    bt = &Bm[b, t, 0]
                    ct = &Cm[b, t, 0]
                    for d in range(D):
                        dt = dts[t * D + d]
                        ut = u[b, t, d]
                        hrow = h + d * N
                        arow = &A[k, d, 0]
                        iarow = inv_a + k * DN + d * N
                        zrow = is_zero + k * DN + d * N
                        acc = 0
                        for n in range(N):
                            if floating is float:
                                ab = expf(dt * arow[n])
                            else:
                                ab = exp(dt * arow[n])
                            f = (ab - 1) * iarow[n] + zrow[n] * dt
                            hv = ab * hrow[n] + f * bt[n] * ut
                            hrow[n] = hv
                            acc = acc + ct[n] * hv
                        y[b, t, d] = acc + Dskip[k, d] * ut
    finally:
        free(h); free(inv_a); free(is_zero); free(dts)


def scan_backward(floating[:, :, ::1] u, floating[:, :, ::1] dt_in,
                  floating[:, :, ::1] A, floating[:, :, ::1] Bm,
                  floating[:, :, ::1] Cm, floating[:, ::1] Dskip,
                  unsigned char[::1] reverse, bint softplus,
                  floating[:, :, ::1] gy,
                  floating[:, :, ::1] gu, floating[:, :, ::1] gdt,
                  double[:, :, ::1] gA, floating[:, :, ::1] gB,
                  floating[:, :, ::1] gC, double[:, ::1] gD):
    """Reverse pass. Hidden states are recomputed per sequence, not stored.

    gA and gD are float64 accumulators summed over each group; the other
    gradient buffers are overwritten. ``gdt`` is the gradient with respect
    to ``dt`` as passed (raw values when ``softplus`` is set).
    """
    _check(u, dt_in, A, Bm, Cm, Dskip, reverse)
    cdef Py_ssize_t nb = u.shape[0], L = u.shape[1], D = u.shape[2]
    cdef Py_ssize_t K = A.shape[0], N = A.shape[2], DN = D * N
    cdef Py_ssize_t per = nb // K
    cdef Py_ssize_t b, s, t, d, n, k
    cdef floating dt, ut, gyt, x, ab, f, df_da, ght, g_ab, g_f, acc_u, acc_dt
    cdef floating *bt
    cdef floating *ct
    cdef const floating *arow
    cdef floating *iarow
    cdef floating *zrow
    cdef floating *hcur
    cdef floating *hprev
    cdef floating *abrow
    cdef floating *ghrow
    cdef floating *garow
    cdef floating *hs = <floating *> malloc(L * DN * sizeof(floating))
    cdef floating *abs_ = <floating *> malloc(L * DN * sizeof(floating))
    cdef floating *dts = <floating *> malloc(L * D * sizeof(floating))
    cdef floating *sig = <floating *> malloc(L * D * sizeof(floating))
    cdef floating *zeros = <floating *> malloc(DN * sizeof(floating))
    cdef floating *gh = <floating *> malloc(DN * sizeof(floating))
    cdef floating *ga_loc = <floating *> malloc(DN * sizeof(floating))
    cdef floating *inv_a = <floating *> malloc(K * DN * sizeof(floating))
    cdef floating *is_zero = <floating *> malloc(K * DN * sizeof(floating))
    cdef floating *gcb = <floating *> malloc(N * sizeof(floating))
    cdef floating *gbb = <floating *> malloc(N * sizeof(floating))
    if (hs == NULL or abs_ == NULL or dts == NULL or zeros == NULL or gh == NULL
            or ga_loc == NULL or inv_a == NULL or is_zero == NULL or gcb == NULL
            or gbb == NULL or sig == NULL):
        free(hs); free(abs_); free(dts); free(sig); free(zeros); free(gh); free(ga_loc)
        free(inv_a); free(is_zero); free(gcb); free(gbb)
        raise MemoryError()
    try:
        with nogil:
            _inverse_a(&A[0, 0, 0], K * DN, inv_a, is_zero)
            for n in range(DN):
                zeros[n] = 0
            for b in range(nb):
                k = b // per
                _steps(&dt_in[b, 0, 0], L * D, softplus, dts)
                if softplus:
                    _sigmoid_from_softplus(dts, L * D, sig)
                # recompute hidden states and decay factors, indexed by scan step
                for s in range(L):
                    t = L - 1 - s if reverse[k] else s
                    bt = &Bm[b, t, 0]
                    for d in range(D):
                        dt = dts[t * D + d]
                        ut = u[b, t, d]
                        arow = &A[k, d, 0]
                        iarow = inv_a + k * DN + d * N
                        zrow = is_zero + k * DN + d * N
                        hcur = hs + s * DN + d * N
                        abrow = abs_ + s * DN + d * N
                        hprev = zeros if s == 0 else hcur - DN
                        for n in range(N):
                            if floating is float:
                                ab = expf(dt * arow[n])
                            else:
                                ab = exp(dt * arow[n])
                            abrow[n] = ab
                            f = (ab - 1) * iarow[n] + zrow[n] * dt
                            hcur[n] = ab * hprev[n] + f * bt[n] * ut
                for n in range(DN):
                    gh[n] = 0
                    ga_loc[n] = 0
                for s in range(L - 1, -1, -1):
                    t = L - 1 - s if reverse[k] else s
                    bt = &Bm[b, t, 0]
                    ct = &Cm[b, t, 0]
                    for n in range(N):
                        gcb[n] = 0
                        gbb[n] = 0
                    for d in range(D):
                        dt = dts[t * D + d]
                        ut = u[b, t, d]
                        gyt = gy[b, t, d]
                        gD[k, d] += gyt * ut
                        acc_u = gyt * Dskip[k, d]
                        acc_dt = 0
                        arow = &A[k, d, 0]
                        iarow = inv_a + k * DN + d * N
                        zrow = is_zero + k * DN + d * N
                        hcur = hs + s * DN + d * N
                        abrow = abs_ + s * DN + d * N
                        ghrow = gh + d * N
                        garow = ga_loc + d * N
                        hprev = zeros if s == 0 else hcur - DN
                        for n in range(N):
                            ab = abrow[n]
                            x = dt * arow[n]
                            f = (ab - 1) * iarow[n] + zrow[n] * dt
                            # d f / d a; the series near x = 0 avoids cancellation
                            df_da = (dt * dt * (<floating> 0.5 + x / 3 + x * x / 8)
                                     if x > -1e-4 and x < 1e-4
                                     else (dt * ab - f) * iarow[n])
                            gcb[n] += gyt * hcur[n]
                            ght = ghrow[n] + gyt * ct[n]
                            g_ab = ght * hprev[n]
                            g_f = ght * bt[n] * ut
                            gbb[n] += ght * f * ut
                            acc_u += ght * f * bt[n]
                            acc_dt += g_ab * ab * arow[n] + g_f * ab
                            garow[n] += g_ab * ab * dt + g_f * df_da
                            ghrow[n] = ght * ab
                        gu[b, t, d] = acc_u
                        if softplus:
                            acc_dt = acc_dt * sig[t * D + d]
                        gdt[b, t, d] = acc_dt
                    for n in range(N):
                        gC[b, t, n] = gcb[n]
                        gB[b, t, n] = gbb[n]
                for d in range(D):
                    for n in range(N):
                        gA[k, d, n] += ga_loc[d * N + n]
    finally:
        free(hs); free(abs_); free(dts); free(sig); free(zeros); free(gh); free(ga_loc)
        free(inv_a); free(is_zero); free(gcb); free(gbb)
