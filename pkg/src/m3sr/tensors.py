"""Tensor conventions and the finite-difference gradient oracle.

Tensors are ``torch.Tensor`` values; reverse-mode differentiation is
torch autograd plus the custom scan function in :mod:`m3sr.kernels`.
:func:`grad_check` is independent of both: it perturbs coordinates in place
and takes central differences of the scalar objective.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


class GradCheckError(ArithmeticError):
    pass


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major flat offset of ``index``: (i, j, k) in (A, B, C) -> (i*B + j)*C + k."""
    if len(index) != len(shape):
        raise IndexError(f"index {tuple(index)} does not match shape {tuple(shape)}")
    flat = 0
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        flat = flat * n + i
    return flat


def unflat_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    size = int(np.prod(shape)) if len(shape) else 1
    if not 0 <= flat < size:
        raise IndexError(f"flat index {flat} out of range for shape {tuple(shape)}")
    out = []
    for n in reversed(shape):
        flat, r = divmod(flat, n)
        out.append(r)
    return tuple(reversed(out))


@dataclass
class GradReport:
    max_rel_err: float
    max_abs_err: float
    worst_index: tuple  # (tensor position, flat index)
    passed: bool
    checked: int = 0

    def __str__(self):
        state = "ok" if self.passed else "FAIL"
        return (f"{state}: max rel {self.max_rel_err:.3e}, max abs {self.max_abs_err:.3e}, "
                f"worst {self.worst_index}, {self.checked} coords")


def _scalar(f, xs) -> float:
    with torch.no_grad():
        v = f(*xs)
    return float(v)


def analytic_grads(f: Callable, xs: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Autograd gradients of ``f(*xs)`` with respect to the leaf tensors ``xs``."""
    flags = [x.requires_grad for x in xs]
    try:
        for x in xs:
            x.requires_grad_(True)
        with torch.enable_grad():
            grads = torch.autograd.grad(f(*xs), list(xs), allow_unused=True)
    finally:
        for x, flag in zip(xs, flags):
            x.requires_grad_(flag)
    return [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(xs, grads)]


def grad_check(f: Callable, x, eps: float = 1e-5, tol_rel: float = 1e-4, tol_abs: float = 1e-7,
               grads: Sequence[torch.Tensor] | None = None, max_coords: int | None = None,
               max_total: int | None = None, seed: int = 0) -> GradReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    ``x`` is a tensor or a sequence of tensors; ``f`` is called as ``f(*x)``.
    Coordinates are perturbed in place, so closures over module parameters
    (pass ``list(module.parameters())``) work too. ``grads`` overrides the
    analytic gradients. ``max_coords`` checks a seeded random subset per
    tensor instead of every coordinate; ``max_total`` draws one seeded subset
    of that size across all tensors together.

    A coordinate's relative error is |a - n| / max(|a|, |n|, tol_abs / tol_rel);
    below that floor the comparison is effectively absolute.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    xs = [x] if isinstance(x, torch.Tensor) else list(x)
    if grads is None:
        grads = analytic_grads(f, xs)
    base = _scalar(f, xs)
    if not np.isfinite(base):
        raise GradCheckError("objective is not finite at the unperturbed point")
    rng = np.random.default_rng(seed)
    floor = tol_abs / tol_rel
    max_rel = max_abs = 0.0
    worst = (0, 0)
    checked = 0
    sizes = [t.numel() for t in xs]
    picked = None
    if max_total is not None and sum(sizes) > max_total:
        flat = np.sort(rng.choice(sum(sizes), max_total, replace=False))
        bounds = np.cumsum([0] + sizes)
        picked = [flat[(flat >= lo) & (flat < hi)] - lo for lo, hi in zip(bounds[:-1], bounds[1:])]
    for pos, (t, g) in enumerate(zip(xs, grads)):
        flat_t = t.data.view(-1)
        flat_g = g.reshape(-1)
        coords = np.arange(flat_t.numel()) if picked is None else picked[pos]
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(rng.choice(coords, max_coords, replace=False))
        for i in coords:
            i = int(i)
            orig = flat_t[i].item()
            flat_t[i] = orig + eps
            fp = _scalar(f, xs)
            flat_t[i] = orig - eps
            fm = _scalar(f, xs)
            flat_t[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(
                    f"objective not finite when perturbing tensor {pos} at {unflat_index(i, t.shape)}"
                )
            num = (fp - fm) / (2 * eps)
            ana = float(flat_g[i])
            err = abs(ana - num)
            rel = err / max(abs(ana), abs(num), floor)
            checked += 1
            if rel > max_rel or (rel == max_rel and err > max_abs):
                worst = (pos, i)
            max_rel = max(max_rel, rel)
            max_abs = max(max_abs, err)
    passed = max_rel <= tol_rel or max_abs <= tol_abs
    return GradReport(max_rel, max_abs, worst, passed, checked)
