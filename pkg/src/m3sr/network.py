"""Three-scale encoder-decoder of MPF blocks, variants, cost accounting, checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import BRANCHES, MPFBlock
from .scan2d import ConfigError
from .ssm import ShapeError

VARIANTS = {
    "full": BRANCHES,
    "V1": ("frequency", "spectral"),
    "V2": ("spatial", "spectral"),
    "V3": ("spatial", "frequency"),
}


@dataclass
class ModelConfig:
    in_channels: int = 3
    out_channels: int = 31
    base_width: int = 16
    blocks_per_stage: int = 1
    d_state: int = 8
    groups: int = 4
    branches: tuple = BRANCHES
    vss_expand: int = 1
    spectral_expand: int = 2
    seed: int = 0

    def __post_init__(self):
        self.branches = tuple(self.branches)
        if self.out_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if min(self.base_width, self.blocks_per_stage, self.d_state,
               self.vss_expand, self.spectral_expand) < 1:
            raise ConfigError("widths, depths and expansions must be positive")
        if self.groups < 1:
            raise ConfigError(f"group count must be >= 1, got {self.groups}")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown:
            raise ConfigError(f"unknown branches {sorted(unknown)}")

    @property
    def widths(self) -> tuple[int, int, int]:
        c = self.base_width
        return (c, 2 * c, 4 * c)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["branches"] = list(self.branches)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _pad_even(x: torch.Tensor):
    H, W = x.shape[-2:]
    ph, pw = H % 2, W % 2
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x, (H, W)


class Stage(nn.Module):
    """MPF blocks at one scale; odd extents are zero-padded to even and cropped back."""

    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.Sequential(*[
            MPFBlock(channels, cfg.d_state, cfg.groups, cfg.branches,
                     cfg.vss_expand, cfg.spectral_expand)
            for _ in range(cfg.blocks_per_stage)
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, (H, W) = _pad_even(x)
        return self.blocks(x)[..., :H, :W]


class M3SR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.widths
        self.embed = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.enc0 = Stage(c0, cfg)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = Stage(c1, cfg)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.bottleneck = Stage(c2, cfg)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.merge1 = nn.Conv2d(2 * c1, c1, 1)
        self.dec1 = Stage(c1, cfg)
        self.up0 = nn.ConvTranspose2d(c1, c0, 2, stride=2)
        self.merge0 = nn.Conv2d(2 * c0, c0, 1)
        self.dec0 = Stage(c0, cfg)
        self.head = nn.Conv2d(c0, cfg.out_channels, 3, padding=1)

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        squeeze = rgb.dim() == 3
        x = rgb.unsqueeze(0) if squeeze else rgb
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        H, W = x.shape[-2:]
        if H % 4 or W % 4:
            raise ShapeError(
                f"input extents must be divisible by 4, got {H}x{W}; pad or crop the image"
            )
        s0 = self.enc0(self.embed(x))
        s1 = self.enc1(self.down0(s0))
        z = self.bottleneck(self.down1(s1))
        z = self.dec1(self.merge1(torch.cat([self.up1(z), s1], dim=1)))
        z = self.dec0(self.merge0(torch.cat([self.up0(z), s0], dim=1)))
        out = self.head(z)
        return out.squeeze(0) if squeeze else out


def build_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> M3SR:
    """Construct and initialize a model from ``cfg.seed`` without touching global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = M3SR(cfg)
    return model.to(dtype)


def build_variant(cfg: ModelConfig, variant: str, dtype: torch.dtype = torch.float32) -> M3SR:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return build_model(dataclasses.replace(cfg, branches=VARIANTS[variant]), dtype)


def forward(model: M3SR, rgb: torch.Tensor) -> torch.Tensor:
    return model(rgb)


# --- analytic cost accounting -------------------------------------------------

# FLOPs per element for non-MAC work (1 MAC = 2 FLOPs)
LN_FLOPS = 5
SILU_FLOPS = 4
SOFTPLUS_FLOPS = 3
HAAR_FLOPS = 3
SCAN_FLOPS_PER_STATE = 10
SCAN_SKIP_FLOPS = 2


@dataclass
class CostReport:
    """Exact parameter count and analytic FLOPs (1 multiply-accumulate = 2 FLOPs)."""

    parameter_count: int
    flops: int
    breakdown: dict = field(default_factory=dict)

    def format(self) -> str:
        lines = [f"parameters: {self.parameter_count}", f"flops: {self.flops}"]
        lines += [f"  {k}: {v}" for k, v in sorted(self.breakdown.items())]
        return "\n".join(lines)


class _Tally:
    def __init__(self):
        self.params = 0
        self.flops = {"conv": 0, "linear": 0, "norm": 0, "scan": 0, "elementwise": 0, "wavelet": 0}

    def linear(self, i, o, tokens):
        self.params += i * o + o
        self.flops["linear"] += 2 * i * o * tokens

    def conv(self, i, o, k, pixels, groups=1):
        self.params += (i // groups) * k * k * o + o
        self.flops["conv"] += 2 * (i // groups) * k * k * o * pixels

    def conv_transpose(self, i, o, k, in_pixels):
        self.params += i * o * k * k + o
        self.flops["conv"] += 2 * i * o * k * k * in_pixels

    def conv1d_depthwise(self, ch, width, positions):
        self.params += ch * width + ch
        self.flops["conv"] += 2 * width * ch * positions

    def layer_norm(self, c, tokens):
        self.params += 2 * c
        self.flops["norm"] += LN_FLOPS * c * tokens

    def elementwise(self, per_elem, count):
        self.flops["elementwise"] += per_elem * count

    def s6(self, d, n, tokens):
        self.linear(d, 2 * n + d, tokens)
        self.params += d * n + d
        self.elementwise(SOFTPLUS_FLOPS, d * tokens)
        self.flops["scan"] += (SCAN_FLOPS_PER_STATE * n + SCAN_SKIP_FLOPS) * d * tokens

    def vss(self, c, n, expand, batch, h, w):
        e = c * expand
        tokens = batch * h * w
        self.linear(c, e, tokens)
        self.conv(e, e, 3, tokens, groups=e)
        self.elementwise(SILU_FLOPS, e * tokens)
        for _ in range(4):
            self.s6(e, n, tokens)
        self.elementwise(1, 3 * e * tokens)
        self.layer_norm(e, tokens)
        self.linear(e, c, tokens)

    def mamba(self, d, n, expand, sequences, length):
        e = d * expand
        tokens = sequences * length
        self.linear(d, e, tokens)
        self.linear(d, e, tokens)
        self.elementwise(SILU_FLOPS, e * tokens)
        self.conv1d_depthwise(e, 3, tokens)
        self.elementwise(SILU_FLOPS, e * tokens)
        self.s6(e, n, tokens)
        self.elementwise(1, e * tokens)
        self.linear(e, d, tokens)

    def mpf(self, cfg, c, h, w):
        h, w = h + h % 2, w + w % 2
        px = h * w
        if "spatial" in cfg.branches:
            self.layer_norm(c, px)
            self.vss(c, cfg.d_state, cfg.vss_expand, 1, h, w)
            self.linear(2 * c, c, px)
        if "frequency" in cfg.branches:
            self.flops["wavelet"] += 2 * HAAR_FLOPS * c * px
            q = px // 4
            self.layer_norm(c, 4 * q)
            self.vss(c, cfg.d_state, cfg.vss_expand, 4, h // 2, w // 2)
            self.linear(2 * c, c, 4 * q)
        if "spectral" in cfg.branches:
            g = cfg.groups
            self.conv(c, c * g, 1, px)
            self.mamba(1, cfg.d_state, cfg.spectral_expand, px * g, c)
            self.conv(c * g, c, 1, px)
        nb = len(cfg.branches)
        self.params += nb
        self.elementwise(2, nb * c * px)


def count_params_flops(cfg: ModelConfig, input_size: tuple[int, int]) -> CostReport:
    """Closed-form parameter and FLOP count for one image of ``input_size`` (H, W)."""
    H, W = input_size
    if H % 4 or W % 4:
        raise ShapeError(f"input extents must be divisible by 4, got {H}x{W}")
    c0, c1, c2 = cfg.widths
    sizes = [(H, W), (H // 2, W // 2), (H // 4, W // 4)]
    px = [h * w for h, w in sizes]
    t = _Tally()
    t.conv(cfg.in_channels, c0, 3, px[0])

    def stage(c, size):
        for _ in range(cfg.blocks_per_stage):
            t.mpf(cfg, c, *size)

    stage(c0, sizes[0])
    t.conv(c0, c1, 3, px[1])
    stage(c1, sizes[1])
    t.conv(c1, c2, 3, px[2])
    stage(c2, sizes[2])
    t.conv_transpose(c2, c1, 2, px[2])
    t.conv(2 * c1, c1, 1, px[1])
    stage(c1, sizes[1])
    t.conv_transpose(c1, c0, 2, px[1])
    t.conv(2 * c0, c0, 1, px[0])
    stage(c0, sizes[0])
    t.conv(c0, cfg.out_channels, 3, px[0])
    return CostReport(t.params, sum(t.flops.values()), dict(t.flops))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoint container -----------------------------------------------------
#
# bytes 0-3   magic b"M3CK"
# bytes 4-7   u32 LE format version (1)
# bytes 8-11  u32 LE manifest length M
# next M      UTF-8 JSON manifest: {"config": ..., "tensors": [{"name", "shape",
#             "offset", "count"}], "payload_sha256": hex digest}
# remainder   payload: every tensor as little-endian float32, in manifest order

CHECKPOINT_MAGIC = b"M3CK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: M3SR, path, extra: dict | None = None) -> None:
    state = model.state_dict()
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False).ravel()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": arr.size})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    manifest = {
        "config": model.cfg.to_dict(),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> M3SR:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(data[12 : 12 + mlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    payload = data[12 + mlen :]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    model = build_model(ModelConfig.from_dict(manifest["config"]), dtype)
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=e["count"], offset=e["offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy()).to(dtype)
    model.load_state_dict(state)
    return model
