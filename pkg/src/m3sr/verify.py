"""Self-verification suite behind ``m3sr verify``.

Each check returns (passed, detail). Every check is seeded and small enough
to finish in seconds.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from . import kernels
from .blocks import MambaBlock, MPFBlock, VSSBlock, from_tokens, to_tokens
from .network import ModelConfig, build_model
from .ssm import (SsmParams, causal_conv, ssm_kernel, ssm_scan, ssm_scan_blocked,
                  zoh_discretize)
from .tensors import grad_check
from .wavelet import dwt2, idwt2


def _random_system(rng, n):
    return SsmParams(-rng.uniform(0.1, 2.0, n), rng.standard_normal(n),
                     rng.standard_normal(n), rng.uniform(0.01, 0.5))


def check_scan_duality(seed: int, trials: int = 20, L: int = 64):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = zoh_discretize(_random_system(rng, int(rng.integers(1, 9))))
        x = rng.standard_normal(L)
        y = ssm_scan(d, x)
        worst = max(worst, np.abs(y - causal_conv(x, ssm_kernel(d, L))).max(),
                    np.abs(y - ssm_scan_blocked(d, x, chunk=16)).max())
    return worst < 1e-10, f"max |recurrence - convolution| = {worst:.2e}"


def check_backends(seed: int):
    gen = torch.Generator().manual_seed(seed)
    nb, L, D, N = 4, 12, 3, 4
    args = [
        torch.randn(nb, L, D, generator=gen, dtype=torch.float64),
        torch.randn(nb, L, D, generator=gen, dtype=torch.float64),
        -torch.rand(2, D, N, generator=gen, dtype=torch.float64) * 2,
        torch.randn(nb, L, N, generator=gen, dtype=torch.float64),
        torch.randn(nb, L, N, generator=gen, dtype=torch.float64),
        torch.randn(2, D, generator=gen, dtype=torch.float64),
    ]
    outs = []
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            outs.append(kernels.selective_scan(*args, reverse=(False, True), delta_softplus=True))
    err = max(float((o - outs[0]).abs().max()) for o in outs)
    return err < 1e-12, f"backends {kernels.available_backends()} agree to {err:.2e}"


def check_wavelet(seed: int, trials: int = 20):
    gen = torch.Generator().manual_seed(seed)
    worst_rec = worst_energy = 0.0
    for _ in range(trials):
        C = int(torch.randint(1, 9, (1,), generator=gen))
        H, W = (2 * int(v) for v in torch.randint(1, 17, (2,), generator=gen))
        F = torch.randn(C, H, W, generator=gen, dtype=torch.float64)
        s = dwt2(F)
        worst_rec = max(worst_rec, float((idwt2(s) - F).abs().max()))
        e = sum(float((b**2).sum()) for b in s)
        worst_energy = max(worst_energy, abs(e - float((F**2).sum())) / float((F**2).sum()))
    ok = worst_rec < 1e-12 and worst_energy < 1e-9
    return ok, f"reconstruction {worst_rec:.2e}, relative energy {worst_energy:.2e}"


def _block_grad(block, x, fn, seed, max_coords):
    params = [p for p in block.parameters()]
    target = torch.randn_like(fn(x).detach())

    def f(x_, *ps):
        return ((fn(x_) - target) ** 2).mean()

    return grad_check(f, [x] + params, max_coords=max_coords, seed=seed)


def check_gradients(seed: int, max_coords: int = 20):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    dt = torch.float64
    reports = []
    vss = VSSBlock(2, 4).to(dt)
    x = torch.randn(1, 2, 4, 4, generator=gen, dtype=dt)
    reports.append(("vss", _block_grad(vss, x, lambda v: from_tokens(vss(to_tokens(v))), seed, max_coords)))
    mb = MambaBlock(3, 4).to(dt)
    s = torch.randn(2, 6, 3, generator=gen, dtype=dt)
    reports.append(("mamba", _block_grad(mb, s, mb, seed, max_coords)))
    mpf = MPFBlock(2, 4, groups=2).to(dt)
    reports.append(("mpf", _block_grad(mpf, x, mpf, seed, max_coords)))
    ok = all(r.passed for _, r in reports)
    return ok, ", ".join(f"{n} rel {r.max_rel_err:.1e}" for n, r in reports)


def check_fusion(seed: int):
    torch.manual_seed(seed)
    mpf = MPFBlock(2, 4, groups=2).to(torch.float64)
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        outs = mpf.branch_outputs(x)
        for w in mpf.weights.values():
            w.zero_()
        identity = torch.equal(mpf.fuse(x, outs), x)
        err = 0.0
        for name in mpf.branch_names:
            for other in mpf.weights:
                mpf.weights[other].fill_(1.0 if other == name else 0.0)
            err = max(err, float((mpf.fuse(x, outs) - (outs[name] + x)).abs().max()))
    return identity and err <= 1e-12, f"identity bitwise {identity}, single branch {err:.1e}"


def check_model_shapes(seed: int):
    cfg = ModelConfig(base_width=4, d_state=4, seed=seed)
    m = build_model(cfg)
    with torch.no_grad():
        shapes = [tuple(m(torch.rand(1, 3, s, s)).shape) for s in (4, 8, 12)]
    ok = shapes == [(1, 31, s, s) for s in (4, 8, 12)]
    return ok, f"output shapes {shapes}"


CHECKS: dict[str, Callable] = {
    "scan-duality": check_scan_duality,
    "scan-backends": check_backends,
    "dwt-reconstruction": check_wavelet,
    "grad-checks": check_gradients,
    "fusion-degeneracy": check_fusion,
    "model-shapes": check_model_shapes,
}


def run_all(seed: int = 0, out=print) -> bool:
    ok = True
    for name, check in CHECKS.items():
        try:
            passed, detail = check(seed)
        except Exception as exc:  # a crash is a failed invariant
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        out(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return ok
