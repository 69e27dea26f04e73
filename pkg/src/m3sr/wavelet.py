"""Single-level orthonormal 2D Haar transform.

For every 2x2 block [[p00, p01], [p10, p11]]:
    LL = (p00 + p01 + p10 + p11) / 2
    HL = (p00 - p01 + p10 - p11) / 2
    LH = (p00 + p01 - p10 - p11) / 2
    HH = (p00 - p01 - p10 + p11) / 2
The analysis matrix is orthogonal, so the inverse is its transpose.
Works on any tensor whose last two axes are (H, W).
"""
from __future__ import annotations

from typing import NamedTuple

import torch

from .ssm import ShapeError

# rows: LL, LH, HL, HH; columns: p00, p01, p10, p11
HAAR = 0.5 * torch.tensor(
    [
        [1.0, 1.0, 1.0, 1.0],
        [1.0, 1.0, -1.0, -1.0],
        [1.0, -1.0, 1.0, -1.0],
        [1.0, -1.0, -1.0, 1.0],
    ],
    dtype=torch.float64,
)


class SubBands(NamedTuple):
    LL: torch.Tensor
    LH: torch.Tensor
    HL: torch.Tensor
    HH: torch.Tensor


def haar_analysis(F: torch.Tensor) -> torch.Tensor:
    """Sub-bands stacked on a new leading axis: (4, *lead, H/2, W/2), order LL, LH, HL, HH."""
    *lead, H, W = F.shape
    if H % 2 or W % 2:
        raise ShapeError(f"Haar DWT needs even spatial extents, got {H}x{W}")
    h, w = H // 2, W // 2
    nd = len(lead)
    blocks = F.reshape(*lead, h, 2, w, 2)
    # -> (2, 2, *lead, h, w) -> (4, rest)
    perm = (nd + 1, nd + 3, *range(nd), nd, nd + 2)
    pix = blocks.permute(perm).reshape(4, -1)
    return (HAAR.to(F.dtype) @ pix).reshape(4, *lead, h, w)


def haar_synthesis(coeffs: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`haar_analysis`."""
    if coeffs.shape[0] != 4:
        raise ShapeError(f"expected 4 stacked sub-bands, got {coeffs.shape[0]}")
    *lead, h, w = coeffs.shape[1:]
    nd = len(lead)
    pix = (HAAR.to(coeffs.dtype).T @ coeffs.reshape(4, -1)).reshape(2, 2, *lead, h, w)
    # (2, 2, *lead, h, w) -> (*lead, h, 2, w, 2)
    perm = (*range(2, nd + 2), nd + 2, 0, nd + 3, 1)
    return pix.permute(perm).reshape(*lead, 2 * h, 2 * w)


def dwt2(F: torch.Tensor) -> SubBands:
    return SubBands(*haar_analysis(F).unbind(0))


def idwt2(s: SubBands) -> torch.Tensor:
    shape = s[0].shape
    if any(b.shape != shape for b in s[1:]):
        raise ShapeError(f"sub-band shapes differ: {[tuple(b.shape) for b in s]}")
    return haar_synthesis(torch.stack(tuple(s)))
