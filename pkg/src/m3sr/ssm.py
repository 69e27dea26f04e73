"""State-space machinery: ZOH discretization, recurrences, kernels and S6.

The NumPy functions here (``zoh_discretize``, ``ssm_scan``, ``ssm_kernel``,
``ssm_scan_blocked``) are float64 references for single-input single-output
systems. ``S6`` is the trainable selective layer; its scan runs through
:mod:`m3sr.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from torch import nn

from .kernels import selective_scan


class SingularSystemError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class SsmParams:
    """Continuous SISO system h' = A h + B x, y = C h.

    ``A`` is either a length-N vector (diagonal mode) or an N x N matrix.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1)
        n = self.A.shape[0]
        if self.A.ndim == 2 and self.A.shape != (n, n):
            raise ShapeError(f"A must be square, got {self.A.shape}")
        if self.B.shape != (n,) or self.C.shape != (n,):
            raise ShapeError(f"B and C must have {n} entries")

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 1


@dataclass
class DiscreteSsm:
    """Discretized system; ``Abar`` is a vector in diagonal mode."""

    Abar: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.Abar) == 1

    @property
    def state_dim(self) -> int:
        return np.shape(self.Abar)[0]

    def transition(self, h: np.ndarray) -> np.ndarray:
        return self.Abar * h if self.diagonal else self.Abar @ h


def zoh_discretize(p: SsmParams) -> DiscreteSsm:
    """Exact zero-order-hold discretization.

    Abar = exp(delta A); Bbar = A^-1 (Abar - I) B. In diagonal mode a zero
    entry of A takes the limit Bbar_i = delta * B_i.
    """
    if not p.delta > 0:
        raise ValueError(f"delta must be positive, got {p.delta}")
    dt = float(p.delta)
    if p.diagonal:
        a = p.A
        abar = np.exp(dt * a)
        zero = a == 0.0
        # expm1 keeps the factor accurate when dt * a is tiny
        factor = np.where(zero, dt, np.expm1(dt * a) / np.where(zero, 1.0, a))
        return DiscreteSsm(abar, factor * p.B, p.C.copy())
    abar = scipy.linalg.expm(dt * p.A)
    eig = np.linalg.eigvals(p.A)
    if np.any(np.abs(eig) < 1e-12):
        raise SingularSystemError("A has a zero eigenvalue; use diagonal storage for the limit case")
    bbar = np.linalg.solve(p.A, (abar - np.eye(len(abar))) @ p.B)
    return DiscreteSsm(abar, bbar, p.C.copy())


def _as_steps(d: DiscreteSsm | Sequence[DiscreteSsm], length: int) -> list[DiscreteSsm]:
    if isinstance(d, DiscreteSsm):
        return [d] * length
    steps = list(d)
    if len(steps) != length:
        raise ShapeError(f"{len(steps)} per-step systems for a sequence of length {length}")
    return steps


def ssm_scan(d: DiscreteSsm | Sequence[DiscreteSsm], x) -> np.ndarray:
    """Sequential recurrence h_t = Abar h_{t-1} + Bbar x_t, y_t = C h_t, h_0 = 0."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise ShapeError("sequence must have at least one element")
    steps = _as_steps(d, x.size)
    h = np.zeros(steps[0].state_dim)
    y = np.empty(x.size)
    for t, (s, xt) in enumerate(zip(steps, x)):
        h = s.transition(h) + s.Bbar * xt
        y[t] = s.C @ h
    return y


def ssm_kernel(d: DiscreteSsm, length: int) -> np.ndarray:
    """Convolution kernel (C Bbar, C Abar Bbar, ..., C Abar^{L-1} Bbar)."""
    if length < 1:
        raise ValueError("kernel length must be at least 1")
    k = np.empty(length)
    v = np.asarray(d.Bbar, dtype=np.float64).copy()
    for i in range(length):
        k[i] = d.C @ v
        v = d.transition(v)
    return k


def causal_conv(x, kernel) -> np.ndarray:
    """y_t = sum_{s<=t} kernel[t-s] x_s, truncated to len(x)."""
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, np.asarray(kernel, dtype=np.float64))[: x.size]


def ssm_scan_blocked(d: DiscreteSsm, x, chunk: int = 64) -> np.ndarray:
    """Chunked evaluation of a diagonal LTI scan.

    Inside each chunk the outputs are a small dense matrix product over
    powers of Abar; the carried state crosses chunk boundaries. Agrees with
    :func:`ssm_scan` up to rounding.
    """
    if not d.diagonal:
        raise ValueError("blocked scan needs a diagonal system")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if chunk < 1:
        raise ValueError("chunk must be positive")
    abar = np.asarray(d.Abar, dtype=np.float64)
    bbar = np.asarray(d.Bbar, dtype=np.float64)
    c = np.asarray(d.C, dtype=np.float64)
    steps = np.arange(chunk)
    # powers[k, n] = abar_n ** k
    powers = abar[None, :] ** steps[:, None]
    # within-chunk kernel: T[t, s] = sum_n c_n abar_n^(t-s) bbar_n for s <= t
    kern = powers @ (c * bbar)
    lag = steps[:, None] - steps[None, :]
    toeplitz = np.where(lag >= 0, kern[np.clip(lag, 0, None)], 0.0)
    carry_out = c[None, :] * abar[None, :] ** (steps[:, None] + 1)
    y = np.empty_like(x)
    h = np.zeros_like(abar)
    for start in range(0, x.size, chunk):
        xs = x[start : start + chunk]
        m = xs.size
        y[start : start + m] = toeplitz[:m, :m] @ xs + carry_out[:m] @ h
        # state after the chunk: abar^m h + sum_s abar^(m-1-s) bbar x_s
        h = abar**m * h + (powers[:m][::-1] * bbar[None, :]).T @ xs
    return y


def _inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class S6(nn.Module):
    """Selective SSM over (batch, L, D) sequences.

    Each channel keeps its own diagonal state of size ``d_state``. The step
    size is per channel and per token, ``softplus(W x_t + b)``; ``B_t`` and
    ``C_t`` are shared by all channels and are affine in ``x_t``.
    """

    def __init__(self, d_model: int, d_state: int = 8, skip: bool = True,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.x_proj = nn.Linear(d_model, 2 * d_state + d_model)
        a = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(d_model, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.D = nn.Parameter(torch.ones(d_model)) if skip else None
        with torch.no_grad():
            self.x_proj.bias[: 2 * d_state].zero_()
            dt = dt_min + (dt_max - dt_min) * torch.rand(d_model)
            self.x_proj.bias[2 * d_state :].copy_(_inverse_softplus(dt))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def project(self, x: torch.Tensor):
        """Return (raw step, B, C) for input ``x`` of shape (batch, L, D).

        The step size is ``softplus(raw step)``.
        """
        n = self.d_state
        W, b = self.x_proj.weight, self.x_proj.bias
        B = F.linear(x, W[:n], b[:n])
        C = F.linear(x, W[n : 2 * n], b[n : 2 * n])
        dt = F.linear(x, W[2 * n :], b[2 * n :])
        return dt, B, C

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"expected {self.d_model} channels, got {x.shape[-1]}")
        dt, B, C = self.project(x)
        check_finite_steps(dt)
        return selective_scan(x, dt, self.A, B, C, self.D, delta_softplus=True)


def check_finite_steps(dt: torch.Tensor) -> None:
    """Raise :class:`NumericError` naming the first timestep with a non-finite step size."""
    if not torch.isfinite(dt).all():
        bad = torch.nonzero(~torch.isfinite(dt))[0]
        raise NumericError(f"non-finite step size at timestep {int(bad[-2])}")


def s6_forward(x: torch.Tensor, layer: S6) -> torch.Tensor:
    """Apply ``layer`` to an (L, D) or (batch, L, D) sequence."""
    if x.dim() == 2:
        return layer(x.unsqueeze(0)).squeeze(0)
    return layer(x)
