"""Hyperspectral cubes: file format, synthetic RGB/HSI pairs, patch cropping.

Cube file layout (all integers little-endian u32):

    offset  size  field
    0       4     magic b"M3SR"
    4       4     version (1)
    8       4     H
    12      4     W
    16      4     bands
    20      4     wavelength start, nm
    24      4     wavelength step, nm
    28      ...   H*W*bands float32 LE, (h, w, c) order

RGB images use the same container with bands = 3. Their nominal centres
(620/550/450 nm) run downwards and cannot be written as a start + u32 step,
so RGB files carry start = step = 0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

MAGIC = b"M3SR"
VERSION = 1
HEADER = struct.Struct("<4s6I")

DEFAULT_BANDS = 31
DEFAULT_START_NM = 400
DEFAULT_STEP_NM = 10
SRF_CENTERS_NM = (620.0, 550.0, 450.0)
SRF_SIGMA_NM = 40.0


class CubeFormatError(ValueError):
    pass


class BadMagicError(CubeFormatError):
    pass


class TruncatedError(CubeFormatError):
    pass


class VersionError(CubeFormatError):
    pass


@dataclass
class HsiCube:
    """Channel-last cube, values in [0, 1] stored as float32."""

    values: np.ndarray
    wavelength_start: int = DEFAULT_START_NM
    wavelength_step: int = DEFAULT_STEP_NM

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"cube values must be (H, W, bands), got shape {v.shape}")
        self.values = np.ascontiguousarray(v, dtype=np.float32)

    @property
    def shape(self):
        return self.values.shape

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    @property
    def wavelengths(self) -> np.ndarray:
        return self.wavelength_start + self.wavelength_step * np.arange(self.bands)

    def chw(self) -> np.ndarray:
        """Channel-first view (bands, H, W)."""
        return self.values.transpose(2, 0, 1)

    @classmethod
    def from_chw(cls, arr, **kw) -> "HsiCube":
        return cls(np.asarray(arr).transpose(1, 2, 0), **kw)


def write_cube(cube: HsiCube, path) -> None:
    H, W, C = cube.shape
    header = HEADER.pack(MAGIC, VERSION, H, W, C, cube.wavelength_start, cube.wavelength_step)
    Path(path).write_bytes(header + cube.values.astype("<f4").tobytes())


def read_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a cube file (magic {raw[:4]!r})")
    if len(raw) < HEADER.size:
        raise TruncatedError(f"{path}: header cut short at {len(raw)} bytes")
    _, version, H, W, C, start, step = HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionError(f"{path}: cube format version {version}, expected {VERSION}")
    expected = H * W * C * 4
    payload = raw[HEADER.size :]
    if len(payload) < expected:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise CubeFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(H, W, C).astype(np.float32)
    return HsiCube(values, start, step)


# ---------------------------------------------------------------- SRF / RGB


@dataclass
class Srf:
    """3 x bands response matrix (rows R, G, B), each row summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != 3:
            raise ValueError(f"SRF must be 3 x bands, got {w.shape}")
        if np.any(w < 0):
            raise ValueError("SRF weights must be non-negative")
        self.weights = w / w.sum(axis=1, keepdims=True)


def default_srf(wavelengths=None) -> Srf:
    """Gaussian responses centred at 620/550/450 nm, sigma 40 nm."""
    if wavelengths is None:
        wavelengths = DEFAULT_START_NM + DEFAULT_STEP_NM * np.arange(DEFAULT_BANDS)
    lam = np.asarray(wavelengths, dtype=np.float64)
    centers = np.asarray(SRF_CENTERS_NM)[:, None]
    return Srf(np.exp(-0.5 * ((lam[None, :] - centers) / SRF_SIGMA_NM) ** 2))


def project_rgb(hsi: np.ndarray, srf: Srf | None = None) -> np.ndarray:
    """(H, W, bands) spectra -> (H, W, 3) RGB, float64."""
    srf = srf or default_srf()
    return np.asarray(hsi, dtype=np.float64) @ srf.weights.T


# ---------------------------------------------------------------- synthesis


class Pair(NamedTuple):
    rgb: np.ndarray  # (3, H, W) float32
    hsi: HsiCube


def _smooth_spectrum(rng: np.random.Generator, lam: np.ndarray) -> np.ndarray:
    k = rng.integers(1, 4)
    centers = rng.uniform(lam[0], lam[-1], k)
    widths = rng.uniform(25.0, 90.0, k)
    amps = rng.uniform(0.2, 1.0, k)
    s = (amps[:, None] * np.exp(-0.5 * ((lam[None, :] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
    return s / s.max()


def synth_hsi(rng: np.random.Generator, H: int, W: int, bands: int = DEFAULT_BANDS) -> HsiCube:
    """Sum of 3-6 Gaussian blobs, each carrying its own smooth spectrum."""
    lam = DEFAULT_START_NM + DEFAULT_STEP_NM * np.arange(bands, dtype=np.float64)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cube = np.zeros((H, W, bands))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sy, sx = rng.uniform(0.15, 0.5) * H, rng.uniform(0.15, 0.5) * W
        amp = rng.uniform(0.2, 0.7)
        blob = amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        cube += blob[:, :, None] * _smooth_spectrum(rng, lam)[None, None, :]
    return HsiCube(np.clip(cube, 0.0, 1.0))


def synth_pair(rng: np.random.Generator, H: int, W: int, srf: Srf | None = None) -> Pair:
    if H < 4 or W < 4 or H % 4 or W % 4:
        raise ValueError(f"synthetic pairs need H, W >= 4 and divisible by 4, got {H}x{W}")
    hsi = synth_hsi(rng, H, W)
    rgb = np.clip(project_rgb(hsi.values, srf), 0.0, 1.0)
    return Pair(np.ascontiguousarray(rgb.transpose(2, 0, 1), dtype=np.float32), hsi)


def rgb_cube(rgb: np.ndarray) -> HsiCube:
    """Wrap a (3, H, W) image for writing."""
    return HsiCube.from_chw(rgb, wavelength_start=0, wavelength_step=0)


# ---------------------------------------------------------------- patches


def crop_patches(pair: Pair, patch: int, stride: int | None = None,
                 rng: np.random.Generator | None = None, count: int | None = None) -> list[Pair]:
    """Aligned crops from ``pair``.

    Grid mode (``rng`` is None) walks the image with ``stride`` (default
    ``patch``). Random mode draws ``count`` top-left corners uniformly;
    ``count`` defaults to the grid count.
    """
    H, W = pair.rgb.shape[1:]
    if patch > min(H, W):
        raise ValueError(f"patch {patch} larger than image {H}x{W}")
    if patch % 4:
        raise ValueError(f"patch size must be divisible by 4, got {patch}")
    stride = stride or patch
    grid = [(i, j) for i in range(0, H - patch + 1, stride) for j in range(0, W - patch + 1, stride)]
    if rng is None:
        coords = grid
    else:
        n = len(grid) if count is None else count
        coords = list(zip(rng.integers(0, H - patch + 1, n), rng.integers(0, W - patch + 1, n)))
    hsi = pair.hsi
    return [
        Pair(
            np.ascontiguousarray(pair.rgb[:, i : i + patch, j : j + patch]),
            HsiCube(hsi.values[i : i + patch, j : j + patch], hsi.wavelength_start, hsi.wavelength_step),
        )
        for i, j in coords
    ]


def write_pairs(pairs, directory) -> list[Path]:
    """Write pairs as ``NNNN_rgb.cube`` / ``NNNN_hsi.cube``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, p in enumerate(pairs):
        write_cube(rgb_cube(p.rgb), out / f"{k:04d}_rgb.cube")
        write_cube(p.hsi, out / f"{k:04d}_hsi.cube")
        paths.append(out / f"{k:04d}_hsi.cube")
    return paths


def load_pairs(directory) -> list[Pair]:
    d = Path(directory)
    rgbs = sorted(d.glob("*_rgb.cube"))
    if not rgbs:
        raise FileNotFoundError(f"no *_rgb.cube files in {d}")
    pairs = []
    for r in rgbs:
        h = r.with_name(r.name.replace("_rgb.cube", "_hsi.cube"))
        rgb = read_cube(r).chw()
        pairs.append(Pair(np.ascontiguousarray(rgb), read_cube(h)))
    return pairs
