"""``m3sr`` command line: synth, train, infer, eval, verify, info, bench.

Exit codes: 0 success, 1 failed check or bad input, 2 usage error.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Keys are the fields of ModelConfig and TrainConfig (``seed`` is
shared); unknown keys are errors. Tuples are comma separated, booleans are
true/false. Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import kernels, metrics, verify
from .data import (crop_patches, load_pairs, read_cube, synth_pair, write_cube, write_pairs,
                   HsiCube)
from .network import (VARIANTS, ModelConfig, build_model, count_params_flops, load_checkpoint,
                      parameter_count)
from .ssm import SsmParams, causal_conv, ssm_kernel, ssm_scan, ssm_scan_blocked, zoh_discretize
from .train import TrainConfig, predict, train_loop

HEATMAP_MAX_ERR = 0.1  # absolute error mapped to white in heatmaps


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    return raw


def _defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def parse_config(text: str) -> tuple[dict, dict]:
    """Split key=value text into (ModelConfig kwargs, TrainConfig kwargs)."""
    model_defaults, train_defaults = _defaults(ModelConfig), _defaults(TrainConfig)
    model_kw, train_kw = {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in model_defaults and key not in train_defaults:
            raise CliError(f"config line {n}: unknown key {key!r}")
        try:
            if key in model_defaults:
                model_kw[key] = _parse_value(raw, model_defaults[key])
            if key in train_defaults:
                train_kw[key] = _parse_value(raw, train_defaults[key])
        except ValueError as exc:
            raise CliError(f"config line {n}: bad value for {key}: {exc}") from None
    return model_kw, train_kw


def load_configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    if getattr(args, "config", None):
        model_kw, train_kw = parse_config(Path(args.config).read_text())
    if getattr(args, "seed", None) is not None:
        model_kw["seed"] = train_kw["seed"] = args.seed
    if getattr(args, "groups", None) is not None:
        model_kw["groups"] = args.groups
    if getattr(args, "variant", None):
        model_kw["branches"] = VARIANTS[args.variant]
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------- helpers


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    return int(parts[0]), int(parts[1])


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D array already scaled to [0, 255]."""
    img = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def _inputs(path: Path, suffix: str) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob(f"*{suffix}"))
        if not files:
            raise CliError(f"no *{suffix} files in {path}")
        return files
    if not path.exists():
        raise CliError(f"{path} does not exist")
    return [path]


def _stem(path: Path, suffix: str) -> str:
    name = path.name
    return name[: -len(suffix)] if name.endswith(suffix) else path.stem


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if not args.out:
        raise CliError("synth needs --out DIR")
    H, W = _size(args.size)
    rng = np.random.default_rng(args.seed or 0)
    pairs = [synth_pair(rng, H, W) for _ in range(args.pairs)]
    write_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs of {H}x{W} to {args.out}")
    return 0


def _training_set(pairs, patch: int):
    out = []
    for p in pairs:
        if min(p.rgb.shape[1:]) > patch:
            out.extend(crop_patches(p, patch))
        else:
            out.append(p)
    return out


def cmd_train(args) -> int:
    if not args.inp:
        raise CliError("train needs --in DIR with *_rgb.cube / *_hsi.cube pairs")
    mcfg, tcfg = load_configs(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    data = _training_set(load_pairs(args.inp), tcfg.patch)
    val = load_pairs(args.val) if args.val else None
    model = build_model(mcfg)
    per_epoch = -(-len(data) // tcfg.batch_size)
    total = per_epoch * tcfg.epochs
    every = max(1, total // 20)

    def progress(step, loss, lr):
        if step % every == 0 or step == total - 1:
            print(f"step {step} loss {loss:.6f} lr {lr:.6g}", flush=True)

    result = train_loop(model, data, tcfg, val=val, log_path=out / "train.log",
                        checkpoint_path=ckpt, progress=progress)
    if result.best_psnr is not None:
        print(f"best validation psnr {result.best_psnr:.4f} dB")
    print(f"checkpoint {ckpt}")
    return 0


def cmd_infer(args) -> int:
    if not (args.checkpoint and args.inp and args.out):
        raise CliError("infer needs --checkpoint, --in and --out")
    model = load_checkpoint(args.checkpoint)
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    refs = {}
    if args.ref:
        refs = {_stem(p, "_hsi.cube"): p for p in _inputs(Path(args.ref), "_hsi.cube")}
    for path in _inputs(Path(args.inp), "_rgb.cube"):
        rgb = read_cube(path).chw()
        if rgb.shape[0] != model.cfg.in_channels:
            raise CliError(f"{path}: {rgb.shape[0]} channels, model expects {model.cfg.in_channels}")
        recon = predict(model, rgb)
        stem = _stem(path, "_rgb.cube")
        write_cube(HsiCube(recon), out / f"{stem}_rec.cube")
        line = f"{stem}: wrote {stem}_rec.cube"
        if stem in refs:
            ref = read_cube(refs[stem]).values
            if ref.shape != recon.shape:
                raise CliError(f"reference {refs[stem]} has shape {ref.shape}, reconstruction {recon.shape}")
            err = np.abs(recon - ref)
            for b in range(err.shape[2]):
                write_pgm(out / f"{stem}_err_b{b:02d}.pgm", err[:, :, b] / HEATMAP_MAX_ERR * 255)
            line += f", {err.shape[2]} heatmaps, mean abs error {err.mean():.6f}"
        print(line)
    return 0


def cmd_eval(args) -> int:
    if not args.inp:
        raise CliError("eval needs --in DIR holding *_rec.cube files")
    ref_dir = Path(args.ref or args.inp)
    pairs, ids = [], []
    for rec in _inputs(Path(args.inp), "_rec.cube"):
        stem = _stem(rec, "_rec.cube")
        ref = ref_dir / f"{stem}_hsi.cube"
        if not ref.exists():
            raise CliError(f"no reference {ref} for {rec}")
        pairs.append((read_cube(ref).values, read_cube(rec).values))
        ids.append(stem)
    window = min(metrics.SSIM_WINDOW, *(min(z.shape[:2]) for z, _ in pairs))
    report = metrics.evaluate(pairs, ids, aggregate=args.aggregate, window=window)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.records())
    return 0


def cmd_verify(args) -> int:
    ok = verify.run_all(args.seed or 0)
    print("verify: all checks passed" if ok else "verify: FAILED")
    return 0 if ok else 1


def cmd_info(args) -> int:
    mcfg, _ = load_configs(args)
    H, W = _size(args.size)
    report = count_params_flops(mcfg, (H, W))
    print(f"config: {mcfg.to_dict()}")
    print(f"input: {H}x{W}")
    print(report.format())
    built = parameter_count(build_model(mcfg))
    print(f"instantiated parameters: {built}")
    if built != report.parameter_count:
        print("parameter count mismatch between analytic count and built model", file=sys.stderr)
        return 1
    return 0


def _best_time(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    lengths = (256,) if args.quick else (256, 1024, 4096)
    n = 8
    d = zoh_discretize(SsmParams(-rng.uniform(0.1, 2.0, n), rng.standard_normal(n),
                                 rng.standard_normal(n), 0.1))
    print(f"{'L':>6} {'method':<12} {'seconds':>10} {'Msteps/s':>10}")
    for L in lengths:
        x = rng.standard_normal(L)
        k = ssm_kernel(d, L)
        for name, fn in (("recurrence", lambda: ssm_scan(d, x)),
                         ("convolution", lambda: causal_conv(x, k)),
                         ("blocked", lambda: ssm_scan_blocked(d, x))):
            t = _best_time(fn)
            print(f"{L:>6} {name:<12} {t:10.5f} {L / t / 1e6:10.3f}")
    # selective scan backends on a batch of sequences
    nb, D = 8, 16
    for L in lengths:
        g = torch.Generator().manual_seed(0)
        u = torch.randn(nb, L, D, generator=g)
        dt = torch.randn(nb, L, D, generator=g)
        A = -torch.rand(D, n, generator=g)
        B = torch.randn(nb, L, n, generator=g)
        C = torch.randn(nb, L, n, generator=g)
        for backend in kernels.available_backends():
            with kernels.use_backend(backend):
                t = _best_time(lambda: kernels.selective_scan(u, dt, A, B, C, delta_softplus=True))
            print(f"{L:>6} {'s6-' + backend:<12} {t:10.5f} {nb * L * D * n / t / 1e6:10.3f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "info": cmd_info,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m3sr", description="RGB to hyperspectral reconstruction toolkit")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--in", dest="inp", help="input file or directory")
    p.add_argument("--out", help="output directory (or records file for eval)")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--pairs", type=int, default=4, help="synth: number of pairs (default 4)")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation variant")
    p.add_argument("--groups", type=int, help="spectral group count G")
    p.add_argument("--size", default="64", help="image size, N or HxW (default 64)")
    p.add_argument("--ref", help="reference *_hsi.cube file or directory")
    p.add_argument("--val", help="train: validation pair directory")
    p.add_argument("--aggregate", choices=("per_image", "global"), default="per_image")
    p.add_argument("--quick", action="store_true", help="bench: shortest length only")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, ArithmeticError) as exc:
        print(f"m3sr {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
