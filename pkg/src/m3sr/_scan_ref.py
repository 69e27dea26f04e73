"""Pure NumPy selective scan, used when the compiled core is unavailable.

Same signatures and buffer conventions as ``m3sr._scan_ext``. Vectorized
over (batch, channel, state); the time loop stays in Python.
"""
import numpy as np


def _softplus(x):
    return np.where(x > 20, x, np.log1p(np.exp(np.minimum(x, 20))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check(u, dt, A, Bm, Cm, Dskip, reverse):
    nb, L, D = u.shape
    K, N = A.shape[0], A.shape[2]
    if K < 1 or nb % K:
        raise ValueError(f"batch {nb} does not split into {K} groups")
    if tuple(dt.shape) != (nb, L, D) or A.shape[1] != D:
        raise ValueError("u, dt and A disagree on shape")
    if tuple(Bm.shape) != (nb, L, N) or tuple(Cm.shape) != (nb, L, N):
        raise ValueError("B and C must be (batch, L, N)")
    if tuple(Dskip.shape) != (K, D) or len(reverse) != K:
        raise ValueError("Dskip must be (K, D) and reverse (K,)")


def _expand(u, dt, A, Dskip, reverse, softplus):
    """Per-batch parameters, inputs reordered so that scan step s is index s."""
    nb = u.shape[0]
    K = A.shape[0]
    per = nb // K
    group = np.arange(nb) // per
    Ab = np.asarray(A, dtype=np.float64)[group]
    Db = np.asarray(Dskip, dtype=np.float64)[group]
    rev = np.asarray(reverse, dtype=bool)[group]
    dt = np.asarray(dt, dtype=np.float64)
    delta = _softplus(dt) if softplus else dt
    return Ab, Db, rev, delta


def _order(arr, rev):
    out = np.array(arr, dtype=np.float64)
    out[rev] = out[rev, ::-1]
    return out


def _factors(dt, A):
    # dt: (nb, D), A: (nb, D, N)
    x = dt[:, :, None] * A
    abar = np.exp(x)
    zero = A == 0.0
    safe_a = np.where(zero, 1.0, A)
    f = np.where(zero, dt[:, :, None], (abar - 1.0) / safe_a)
    return x, abar, f, zero, safe_a


def scan_forward(u, dt, A, Bm, Cm, Dskip, reverse, softplus, y):
    _check(u, dt, A, Bm, Cm, Dskip, reverse)
    Ab, Db, rev, delta = _expand(u, dt, A, Dskip, reverse, softplus)
    us, ds = _order(u, rev), _order(delta, rev)
    Bs, Cs = _order(Bm, rev), _order(Cm, rev)
    nb, L, D = us.shape
    h = np.zeros((nb, D, A.shape[2]))
    ys = np.empty((nb, L, D))
    for s in range(L):
        _, abar, f, _, _ = _factors(ds[:, s], Ab)
        h = abar * h + f * Bs[:, s, None, :] * us[:, s, :, None]
        ys[:, s] = np.einsum("bdn,bn->bd", h, Cs[:, s]) + Db * us[:, s]
    y[...] = _order(ys, rev)


def scan_backward(u, dt, A, Bm, Cm, Dskip, reverse, softplus, gy, gu, gdt, gA, gB, gC, gD):
    _check(u, dt, A, Bm, Cm, Dskip, reverse)
    Ab, Db, rev, delta = _expand(u, dt, A, Dskip, reverse, softplus)
    us, ds = _order(u, rev), _order(delta, rev)
    Bs, Cs, gys = _order(Bm, rev), _order(Cm, rev), _order(gy, rev)
    nb, L, D = us.shape
    K = A.shape[0]
    group = np.arange(nb) // (nb // K)

    hs = np.zeros((L, nb, D, A.shape[2]))
    h = np.zeros_like(hs[0])
    for s in range(L):
        _, abar, f, _, _ = _factors(ds[:, s], Ab)
        h = abar * h + f * Bs[:, s, None, :] * us[:, s, :, None]
        hs[s] = h

    gus, gds = np.empty_like(us), np.empty_like(us)
    gBs, gCs = np.empty_like(Bs), np.empty_like(Cs)
    gAb = np.zeros_like(Ab)
    gh = np.zeros_like(h)
    for s in range(L - 1, -1, -1):
        dts, ut, gyt = ds[:, s], us[:, s], gys[:, s]
        x, abar, f, zero, safe_a = _factors(dts, Ab)
        dtn = dts[:, :, None]
        df_da = np.where(
            zero,
            0.5 * dtn * dtn,
            np.where(np.abs(x) < 1e-4, dtn * dtn * (0.5 + x / 3.0 + x * x / 8.0),
                     (dtn * abar - f) / safe_a),
        )
        bt = Bs[:, s, None, :]
        gCs[:, s] = np.einsum("bd,bdn->bn", gyt, hs[s])
        ght = gh + gyt[:, :, None] * Cs[:, s, None, :]
        hprev = hs[s - 1] if s > 0 else np.zeros_like(h)
        g_abar = ght * hprev
        g_f = ght * bt * ut[:, :, None]
        gBs[:, s] = np.einsum("bdn,bdn->bn", ght, f * ut[:, :, None])
        gus[:, s] = gyt * Db + np.sum(ght * f * bt, axis=2)
        gds[:, s] = np.sum(g_abar * abar * Ab + g_f * abar, axis=2)
        gAb += g_abar * abar * dtn + g_f * df_da
        gh = ght * abar

    gds = _order(gds, rev)
    if softplus:
        gds = gds * _sigmoid(np.asarray(dt, dtype=np.float64))
    gu[...] = _order(gus, rev)
    gdt[...] = gds
    gB[...] = _order(gBs, rev)
    gC[...] = _order(gCs, rev)
    np.add.at(gA, group, gAb)
    np.add.at(gD, group, np.einsum("btd,btd->bd", np.asarray(gy, np.float64), np.asarray(u, np.float64)))
