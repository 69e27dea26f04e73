"""VSS block, Mamba block, the three perceptual branches and the MPF block.

Feature maps are (batch, C, H, W). Token grids are the channel-last view
(batch, H, W, C); ``Lin`` and ``LN`` act on the last axis of a token grid.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .scan2d import SS2D, ConfigError
from .ssm import S6, ShapeError
from .wavelet import haar_analysis, haar_synthesis

BRANCHES = ("spatial", "frequency", "spectral")
LN_EPS = 1e-7


def to_tokens(F_map: torch.Tensor) -> torch.Tensor:
    return F_map.permute(0, 2, 3, 1)


def from_tokens(tokens: torch.Tensor) -> torch.Tensor:
    return tokens.permute(0, 3, 1, 2).contiguous()


def _check_map(x: torch.Tensor, channels: int):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(f"expected (B, {channels}, H, W), got {tuple(x.shape)}")


class VSSBlock(nn.Module):
    """Lin -> depthwise 3x3 conv -> SiLU -> SS2D -> LN -> Lin, on token grids."""

    def __init__(self, channels: int, d_state: int = 8, expand: int = 1):
        super().__init__()
        inner = channels * expand
        self.in_proj = nn.Linear(channels, inner)
        self.dwconv = nn.Conv2d(inner, inner, 3, padding=1, groups=inner)
        self.ss2d = SS2D(inner, d_state)
        self.norm = nn.LayerNorm(inner, eps=LN_EPS)
        self.out_proj = nn.Linear(inner, channels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = from_tokens(self.in_proj(tokens))
        x = F.silu(self.dwconv(x))
        y = to_tokens(self.ss2d(x))
        return self.out_proj(self.norm(y))


def vss_block(x: torch.Tensor, block: VSSBlock) -> torch.Tensor:
    """Apply ``block`` to a (C,H,W) or (B,C,H,W) feature map."""
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    out = from_tokens(block(to_tokens(xb)))
    return out.squeeze(0) if squeeze else out


class MambaBlock(nn.Module):
    """Lin(SiLU(Lin x) + S6(SiLU(causal DWConv1d(Lin x)))) on (B, L, D)."""

    def __init__(self, d_model: int, d_state: int = 8, expand: int = 2, conv_width: int = 3):
        super().__init__()
        inner = d_model * expand
        self.gate_proj = nn.Linear(d_model, inner)
        self.in_proj = nn.Linear(d_model, inner)
        self.conv_width = conv_width
        self.conv = nn.Conv1d(inner, inner, conv_width, groups=inner)
        self.s6 = S6(inner, d_state)
        self.out_proj = nn.Linear(inner, d_model)

    def causal_conv(self, x: torch.Tensor) -> torch.Tensor:
        # shifted multiply-adds on (B, L, D); much faster than conv1d for the
        # many short, narrow sequences of the spectral branch
        K, L = self.conv_width, x.shape[1]
        xp = F.pad(x, (0, 0, K - 1, 0))
        w = self.conv.weight[:, 0, :]
        out = self.conv.bias + xp[:, :L] * w[:, 0]
        for k in range(1, K):
            out = out + xp[:, k : k + L] * w[:, k]
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3:
            raise ShapeError(f"expected (B, L, D), got {tuple(x.shape)}")
        gate = F.silu(self.gate_proj(x))
        ssm = self.s6(F.silu(self.causal_conv(self.in_proj(x))))
        return self.out_proj(gate + ssm)


def mamba_block(x: torch.Tensor, block: MambaBlock) -> torch.Tensor:
    if x.dim() == 2:
        return block(x.unsqueeze(0)).squeeze(0)
    return block(x)


class SpatialBranch(nn.Module):
    def __init__(self, channels: int, d_state: int = 8, expand: int = 1):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=LN_EPS)
        self.vss = VSSBlock(channels, d_state, expand)
        self.merge = nn.Linear(2 * channels, channels)
        self.channels = channels

    def forward(self, F_in: torch.Tensor) -> torch.Tensor:
        _check_map(F_in, self.channels)
        f1 = to_tokens(F_in)
        f2 = self.merge(torch.cat([self.vss(self.norm(f1)), f1], dim=-1))
        return from_tokens(f2)


class FrequencyBranch(nn.Module):
    """Haar sub-bands processed by one shared LN/VSS/merge, then inverted."""

    def __init__(self, channels: int, d_state: int = 8, expand: int = 1):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=LN_EPS)
        self.vss = VSSBlock(channels, d_state, expand)
        self.merge = nn.Linear(2 * channels, channels)
        self.channels = channels

    def forward(self, F_in: torch.Tensor) -> torch.Tensor:
        _check_map(F_in, self.channels)
        bands = haar_analysis(F_in)
        nb, C, h, w = bands.shape[1:]
        # the four sub-bands share weights, so they ride along the batch axis
        f1 = to_tokens(bands.reshape(4 * nb, C, h, w))
        f2 = from_tokens(self.merge(torch.cat([self.vss(self.norm(f1)), f1], dim=-1)))
        return haar_synthesis(f2.reshape(4, nb, C, h, w))


class SpectralBranch(nn.Module):
    """Pointwise expand to C*G, G length-C channel sequences per pixel, Mamba, reduce."""

    def __init__(self, channels: int, groups: int = 4, d_state: int = 8, expand: int = 2):
        super().__init__()
        if groups < 1:
            raise ConfigError(f"group count must be >= 1, got {groups}")
        self.channels = channels
        self.groups = groups
        self.expand_conv = nn.Conv2d(channels, channels * groups, 1)
        self.mamba = MambaBlock(1, d_state, expand)
        self.reduce_conv = nn.Conv2d(channels * groups, channels, 1)

    def to_sequences(self, z: torch.Tensor) -> torch.Tensor:
        B, _, H, W = z.shape
        G, C = self.groups, self.channels
        return z.reshape(B, G, C, H, W).permute(0, 3, 4, 1, 2).reshape(B * H * W * G, C, 1)

    def from_sequences(self, seq: torch.Tensor, B: int, H: int, W: int) -> torch.Tensor:
        G, C = self.groups, self.channels
        return seq.reshape(B, H, W, G, C).permute(0, 3, 4, 1, 2).reshape(B, G * C, H, W)

    def forward(self, F_in: torch.Tensor) -> torch.Tensor:
        _check_map(F_in, self.channels)
        B, _, H, W = F_in.shape
        seq = self.to_sequences(self.expand_conv(F_in))
        return self.reduce_conv(self.from_sequences(self.mamba(seq), B, H, W))


class MPFBlock(nn.Module):
    """Weighted sum of enabled branches plus the input.

    Removed branches have no modules and no fusion weight.
    """

    def __init__(self, channels: int, d_state: int = 8, groups: int = 4,
                 branches=BRANCHES, vss_expand: int = 1, spectral_expand: int = 2):
        super().__init__()
        unknown = set(branches) - set(BRANCHES)
        if unknown:
            raise ConfigError(f"unknown branches: {sorted(unknown)}")
        self.branch_names = tuple(b for b in BRANCHES if b in branches)
        mods = {}
        if "spatial" in branches:
            mods["spatial"] = SpatialBranch(channels, d_state, vss_expand)
        if "frequency" in branches:
            mods["frequency"] = FrequencyBranch(channels, d_state, vss_expand)
        if "spectral" in branches:
            mods["spectral"] = SpectralBranch(channels, groups, d_state, spectral_expand)
        self.branches = nn.ModuleDict(mods)
        self.weights = nn.ParameterDict(
            {name: nn.Parameter(torch.rand(())) for name in self.branch_names}
        )

    def branch_outputs(self, F_in: torch.Tensor) -> dict[str, torch.Tensor]:
        return {name: self.branches[name](F_in) for name in self.branch_names}

    def fuse(self, F_in: torch.Tensor, outputs: dict[str, torch.Tensor]) -> torch.Tensor:
        out = F_in
        for name in self.branch_names:
            out = out + self.weights[name] * outputs[name]
        return out

    def forward(self, F_in: torch.Tensor) -> torch.Tensor:
        return self.fuse(F_in, self.branch_outputs(F_in))


def mpf_block(F_in: torch.Tensor, block: MPFBlock) -> torch.Tensor:
    squeeze = F_in.dim() == 3
    xb = F_in.unsqueeze(0) if squeeze else F_in
    out = block(xb)
    return out.squeeze(0) if squeeze else out
