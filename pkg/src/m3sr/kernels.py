"""Backend selection for the selective-scan hot loop.

The compiled Cython core is used when it imports; otherwise (or when the
``M3SR_PURE_PYTHON`` environment variable is set) the NumPy fallback is
used. Both expose ``scan_forward`` / ``scan_backward`` with identical
buffer conventions, so everything above this module is backend-agnostic.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np
import torch

from . import _scan_ref

try:
    from . import _scan_ext
except ImportError:  # pragma: no cover - depends on the build
    _scan_ext = None

_BACKENDS = {"python": _scan_ref}
if _scan_ext is not None:
    _BACKENDS["cython"] = _scan_ext


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


if os.environ.get("M3SR_PURE_PYTHON") or _scan_ext is None:
    BACKEND = "python"
else:
    BACKEND = "cython"


def set_backend(name: str) -> None:
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown scan backend {name!r}; available: {available_backends()}")
    BACKEND = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().contiguous().numpy()


class SelectiveScanFn(torch.autograd.Function):
    """Autograd wrapper around the active scan backend."""

    @staticmethod
    def forward(ctx, u, dt, A, B, C, D, reverse, softplus):
        impl = _BACKENDS[BACKEND]
        y = torch.empty_like(u)
        impl.scan_forward(*(_np(t) for t in (u, dt, A, B, C, D)), reverse, softplus, y.numpy())
        ctx.save_for_backward(u, dt, A, B, C, D)
        ctx.impl = impl
        ctx.reverse = reverse
        ctx.softplus = softplus
        return y

    @staticmethod
    def backward(ctx, gy):
        u, dt, A, B, C, D = ctx.saved_tensors
        gu = torch.empty_like(u)
        gdt = torch.empty_like(dt)
        gB = torch.empty_like(B)
        gC = torch.empty_like(C)
        gA = np.zeros(A.shape, dtype=np.float64)
        gD = np.zeros(D.shape, dtype=np.float64)
        ctx.impl.scan_backward(
            *(_np(t) for t in (u, dt, A, B, C, D)), ctx.reverse, ctx.softplus, _np(gy),
            gu.numpy(), gdt.numpy(), gA, gB.numpy(), gC.numpy(), gD,
        )
        gA = torch.from_numpy(gA).to(A.dtype)
        gD = torch.from_numpy(gD).to(D.dtype)
        return gu, gdt, gA, gB, gC, gD, None, None


def selective_scan(u, delta, A, B, C, D=None, reverse=None, delta_softplus=False):
    """Run the diagonal selective scan.

    Args:
        u: inputs, shape (batch, L, D).
        delta: step sizes, shape (batch, L, D); raw pre-activations when
            ``delta_softplus`` is set, otherwise already positive.
        A: diagonal state matrices, (D, N), or (K, D, N) for K parameter
            groups splitting the batch into equal consecutive blocks.
        B, C: per-step projections, shape (batch, L, N).
        D: optional skip coefficients, (D,) or (K, D).
        reverse: optional sequence of K booleans; group k is scanned from
            the last step to the first.

    Returns:
        Tensor of shape (batch, L, D).
    """
    dtype = u.dtype
    grouped = A.dim() == 3
    if not grouped:
        A = A.unsqueeze(0)
    K, Dch = A.shape[0], A.shape[1]
    if D is None:
        D = torch.zeros(K, Dch, dtype=dtype)
    elif D.dim() == 1:
        D = D.unsqueeze(0)
    rev = np.zeros(K, dtype=np.uint8)
    if reverse is not None:
        rev[:] = np.asarray(reverse, dtype=bool)
    u, delta, A, B, C, D = (t.to(dtype).contiguous() for t in (u, delta, A, B, C, D))
    return SelectiveScanFn.apply(u, delta, A, B, C, D, rev, bool(delta_softplus))
