"""Four-direction 2D selective scan (SS2D).

Direction ids: 0 row-major, 1 column-major, 2 row-major reversed,
3 column-major reversed. Feature maps are (batch, C, H, W) or (C, H, W);
sequences come out as (batch, H*W, C) or (H*W, C).
"""
from __future__ import annotations

import torch
from torch import nn

from .kernels import selective_scan
from .ssm import S6, ShapeError, check_finite_steps

DIRECTIONS = (0, 1, 2, 3)


class ConfigError(ValueError):
    pass


def _batched(F: torch.Tensor):
    if F.dim() == 3:
        return F.unsqueeze(0), True
    if F.dim() == 4:
        return F, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(F.shape)}")


def flatten_direction(F: torch.Tensor, d: int) -> torch.Tensor:
    Fb, squeeze = _batched(F)
    if d not in DIRECTIONS:
        raise ValueError(f"scan direction must be in {DIRECTIONS}, got {d}")
    if d in (1, 3):
        Fb = Fb.transpose(2, 3)
    seq = Fb.flatten(2).transpose(1, 2)
    if d >= 2:
        seq = seq.flip(1)
    return seq.squeeze(0) if squeeze else seq


def unflatten_direction(seq: torch.Tensor, d: int, H: int, W: int) -> torch.Tensor:
    """Inverse of :func:`flatten_direction`."""
    squeeze = seq.dim() == 2
    if squeeze:
        seq = seq.unsqueeze(0)
    if seq.shape[1] != H * W:
        raise ShapeError(f"sequence of length {seq.shape[1]} does not fill {H}x{W}")
    if d >= 2:
        seq = seq.flip(1)
    B, _, C = seq.shape
    if d in (1, 3):
        F = seq.transpose(1, 2).reshape(B, C, W, H).transpose(2, 3)
    else:
        F = seq.transpose(1, 2).reshape(B, C, H, W)
    return F.squeeze(0) if squeeze else F


class SS2D(nn.Module):
    """Independent S6 per direction, outputs summed.

    All four directions run in one grouped kernel call: directions 2 and 3
    reuse the token orders of 0 and 1 with the scan run backwards.
    """

    def __init__(self, channels: int, d_state: int = 8, skip: bool = True):
        super().__init__()
        self.channels = channels
        self.d_state = d_state
        self.scans = nn.ModuleList(S6(channels, d_state, skip=skip) for _ in DIRECTIONS)

    def _stacked(self, rows: slice):
        W = torch.stack([s.x_proj.weight[rows] for s in self.scans])
        b = torch.stack([s.x_proj.bias[rows] for s in self.scans])
        return W, b

    def _scan(self, Fb: torch.Tensor):
        """Run all four directions; returns outputs in (B, L, C) token order per direction."""
        B, E, H, W = Fb.shape
        if E != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {E}")
        L, n = H * W, self.d_state
        row = Fb.flatten(2).transpose(1, 2)
        col = Fb.transpose(2, 3).flatten(2).transpose(1, 2)
        u = torch.stack([row, col, row, col]).reshape(4, B * L, E)

        def proj(rows):
            Wk, bk = self._stacked(rows)
            return torch.baddbmm(bk.unsqueeze(1), u, Wk.transpose(1, 2)).reshape(4 * B, L, -1)

        Bm, Cm = proj(slice(0, n)), proj(slice(n, 2 * n))
        dt = proj(slice(2 * n, None))
        check_finite_steps(dt)
        A = torch.stack([s.A for s in self.scans])
        D = torch.stack([s.D if s.D is not None else torch.zeros_like(s.A_log[:, 0])
                         for s in self.scans])
        y = selective_scan(u.reshape(4 * B, L, E), dt, A, Bm, Cm, D,
                           reverse=(False, False, True, True), delta_softplus=True)
        return y.reshape(4, B, L, E).unbind(0)

    @staticmethod
    def _row_map(seq, H, W):
        B, L, E = seq.shape
        return seq.transpose(1, 2).reshape(B, E, H, W)

    @staticmethod
    def _col_map(seq, H, W):
        B, L, E = seq.shape
        return seq.transpose(1, 2).reshape(B, E, W, H).transpose(2, 3)

    def partial(self, F: torch.Tensor, d: int) -> torch.Tensor:
        """Output of direction ``d`` alone, in feature-map layout."""
        Fb, squeeze = _batched(F)
        H, W = Fb.shape[-2:]
        seq = self._scan(Fb)[d]
        out = self._col_map(seq, H, W) if d in (1, 3) else self._row_map(seq, H, W)
        return out.squeeze(0) if squeeze else out

    def forward(self, F: torch.Tensor) -> torch.Tensor:
        Fb, squeeze = _batched(F)
        H, W = Fb.shape[-2:]
        y0, y1, y2, y3 = self._scan(Fb)
        out = self._row_map(y0 + y2, H, W) + self._col_map(y1 + y3, H, W)
        return out.squeeze(0) if squeeze else out


def ss2d(F: torch.Tensor, params) -> torch.Tensor:
    """Functional SS2D; ``params`` is an :class:`SS2D` or four :class:`S6` layers."""
    if isinstance(params, SS2D):
        return params(F)
    layers = list(params)
    if len(layers) != len(DIRECTIONS):
        raise ConfigError(f"SS2D needs {len(DIRECTIONS)} parameter sets, got {len(layers)}")
    Fb, squeeze = _batched(F)
    H, W = Fb.shape[-2:]
    out = None
    for d, layer in zip(DIRECTIONS, layers):
        part = unflatten_direction(layer(flatten_direction(Fb, d)), d, H, W)
        out = part if out is None else out + part
    return out.squeeze(0) if squeeze else out
