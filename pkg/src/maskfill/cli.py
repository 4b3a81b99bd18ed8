"""Command-line surface: pretrain, denoise, add-noise, eval, direct-ensemble.

Every run prints its effective configuration and writes a manifest next to
its outputs. Exit codes: 0 success, 2 configuration problems, 3 I/O problems,
4 numeric failures.
"""

from __future__ import annotations

import argparse
import ast
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import imageio, noise
from .engine import ContractViolation, NumericError
from .manifest import RunManifest, manifest_path_for, write_manifest
from .metrics import QualityReport, QualityRow, psnr, ssim
from .model import Hourglass, HourglassConfig, WeightFormatError, load_weights, weights_digest
from .pretrain import ConfigError, PretrainConfig, run_pretrain
from .presets import PRESETS
from .zeroshot import DenoiseConfig, denoise, direct_ensemble
from .imageio import ImageIOError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _seed_of(args) -> int:
    return 0 if args.seed is None else args.seed


def _iter_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in imageio.SUPPORTED_SUFFIXES)
        if not files:
            raise ConfigError(f"{path}: no supported images found")
        return files
    if not path.exists():
        raise ImageIOError(f"{path}: no such file")
    return [path]


def _parse_config_file(path: Path) -> dict:
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        try:
            values[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            values[key] = val
    return values


def _parse_ensemble(value: str) -> tuple[str, int]:
    if value.startswith("avg-after=") or value.startswith("avg_after="):
        return "avg_after", int(value.split("=", 1)[1])
    mode = value.replace("-", "_")
    if mode not in ("ema", "average", "last"):
        raise ConfigError(f"unknown ensemble mode {value!r}")
    return mode, 0


def _build_denoise_config(args) -> DenoiseConfig:
    values: dict = {}
    preset_name = args.preset
    file_values: dict = {}
    if args.config:
        file_values = _parse_config_file(Path(args.config))
        preset_name = file_values.pop("preset", preset_name)
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; "
                              f"choose from {', '.join(sorted(PRESETS))}")
        values.update(PRESETS[preset_name])
    allowed = set(DenoiseConfig.__dataclass_fields__) - {"model"}
    for key, val in file_values.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    if args.mask_ratio is not None:
        values["mask_ratio"] = args.mask_ratio
    if args.beta is not None:
        values["beta"] = args.beta
    if args.iters is not None:
        values["iters"] = args.iters
    if args.lr is not None:
        values["lr"] = args.lr
    if args.pd is not None:
        values["pd_factor"] = args.pd
    if args.ensemble is not None:
        mode, start = _parse_ensemble(args.ensemble)
        values["ensemble_mode"] = mode
        if mode == "avg_after":
            values["avg_after_start"] = start
    if args.no_mask_loss:
        values["mask_loss"] = False
    if args.shared_masks:
        values["shared_channels"] = True
    if args.weights:
        values["init_weights"] = str(args.weights)
    if args.seed is not None:
        values["seed"] = args.seed
    values.setdefault("seed", 0)
    try:
        return DenoiseConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc))


def _print_effective(command: str, config: dict):
    print(f"[{command}] effective config:")
    print(json.dumps(config, sort_keys=True, indent=2, default=str))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    model_cfg = HourglassConfig(in_channels=args.channels, depth=args.depth,
                                base_channels=args.base_channels)
    cfg = PretrainConfig(corpus_dir=args.corpus, out_weights=args.out,
                         crop_size=args.crop, batch_size=args.batch,
                         total_steps=args.steps, mask_ratio=args.mask_ratio,
                         shared_channels=args.shared_masks, model=model_cfg,
                         seed=_seed_of(args), log_path=args.log)
    cfg_dict = asdict(cfg)
    _print_effective("pretrain", cfg_dict)
    result = run_pretrain(cfg)
    manifest = RunManifest(
        command="pretrain", config=cfg_dict, seed=_seed_of(args), strict=args.strict,
        weights_digest=result.digest,
        rows=[{"weights": str(args.out), "steps": cfg.total_steps,
               "final_loss": result.log_rows[-1][2]}],
        timings=None if args.strict else {"total_s": result.seconds})
    write_manifest(manifest, manifest_path_for(Path(args.out)))
    print(f"wrote {args.out} (sha256 {result.digest[:12]}..., "
          f"{result.seconds:.1f}s, final loss {result.log_rows[-1][2]:.5g})")
    return EXIT_OK


def cmd_add_noise(args) -> int:
    files = _iter_images(Path(args.input))
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.param is None and args.param_range is None:
        raise ConfigError("add-noise needs --param or --param-range")
    scale = 255.0 if args.scale_255 and args.kind in ("gaussian", "speckle") else 1.0
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(_seed_of(args)).spawn(len(files))]
    rows = []
    t0 = time.perf_counter()
    for path, rng in zip(files, rngs):
        if args.param_range is not None:
            lo, hi = (float(v) / scale for v in args.param_range.split(":"))
            param = float(rng.uniform(lo, hi))
        else:
            param = float(args.param) / scale
        spec = noise.NoiseSpec(args.kind, param, seed=_seed_of(args))
        buf = imageio.load_image(path)
        noisy = noise.synthesize(buf.data, spec, rng)
        out_path = out_dir / (path.stem + ".ppm")
        imageio.save_image(noisy, out_path)
        rows.append({"file": out_path.name, "kind": args.kind, "param": param})
    config = {"kind": args.kind, "param": args.param, "param_range": args.param_range,
              "scale_255": bool(args.scale_255), "input": str(args.input),
              "output": str(args.output)}
    _print_effective("add-noise", config)
    manifest = RunManifest(command="add-noise", config=config, seed=_seed_of(args),
                           strict=args.strict, rows=rows,
                           timings=None if args.strict else
                           {"total_s": time.perf_counter() - t0})
    write_manifest(manifest, out_dir / "manifest.json")
    print(f"wrote {len(rows)} noisy images to {out_dir}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    cfg = _build_denoise_config(args)
    files = _iter_images(Path(args.input))
    out = Path(args.output)
    multi = len(files) > 1
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    cfg_dict = asdict(cfg)
    if cfg.model is not None:
        cfg_dict["model"] = asdict(cfg.model)
    _print_effective("denoise", cfg_dict)

    digest = None
    if cfg.init_weights != "scratch":
        digest = weights_digest(cfg.init_weights)

    ref_dir = Path(args.reference) if args.reference else None
    trace_fh = open(args.trace, "w") if args.trace else None
    rows = []
    t0 = time.perf_counter()
    try:
        child_seeds = np.random.SeedSequence(cfg.seed).spawn(len(files))
        for path, child in zip(files, child_seeds):
            buf = imageio.load_image(path)
            x = imageio.to_nchw(buf.data)
            reference = None
            if ref_dir is not None:
                ref_path = _match_reference(ref_dir, path)
                reference = imageio.to_nchw(imageio.load_image(ref_path).data)
            rng = np.random.default_rng(child)
            result = denoise(cfg, x, rng=rng,
                             reference=reference if cfg.pd_factor == 1 else None)
            out_path = out / (path.stem + ".ppm") if multi else out
            imageio.save_image(imageio.from_nchw(result.output), out_path)
            row = {"file": out_path.name, "iterations": result.iterations_run,
                   "never_hidden": result.never_hidden}
            if reference is not None:
                row["psnr"] = psnr(reference, result.output)
                row["ssim"] = ssim(imageio.from_nchw(reference),
                                   imageio.from_nchw(result.output))
            if not args.strict:
                row["seconds"] = result.seconds
            rows.append(row)
            if trace_fh is not None:
                for tr in result.trace:
                    trace_fh.write(json.dumps({"file": out_path.name, **tr},
                                              sort_keys=True) + "\n")
    finally:
        if trace_fh is not None:
            trace_fh.close()

    manifest = RunManifest(command="denoise", config=cfg_dict, seed=cfg.seed,
                           strict=args.strict, weights_digest=digest, rows=rows,
                           timings=None if args.strict else
                           {"total_s": time.perf_counter() - t0})
    write_manifest(manifest, manifest_path_for(out))
    for row in rows:
        extra = f"  psnr {row['psnr']:.2f}" if "psnr" in row else ""
        print(f"denoised {row['file']}{extra}")
    return EXIT_OK


def _match_reference(ref_dir: Path, noisy_path: Path) -> Path:
    for suffix in imageio.SUPPORTED_SUFFIXES:
        cand = ref_dir / (noisy_path.stem + suffix)
        if cand.exists():
            return cand
    raise ImageIOError(f"no reference for {noisy_path.name} in {ref_dir}")


def cmd_direct_ensemble(args) -> int:
    weights = load_weights(Path(args.weights))
    model = Hourglass.from_weights(weights)
    buf = imageio.load_image(Path(args.input))
    x = imageio.to_nchw(buf.data)
    config = {"weights": str(args.weights), "mask_ratio": args.mask_ratio,
              "passes": args.passes, "input": str(args.input),
              "output": str(args.output)}
    _print_effective("direct-ensemble", config)
    rng = np.random.default_rng(_seed_of(args))
    t0 = time.perf_counter()
    out = direct_ensemble(model, x, args.mask_ratio, args.passes, rng,
                          shared_channels=args.shared_masks)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    imageio.save_image(imageio.from_nchw(out), out_path)
    manifest = RunManifest(command="direct-ensemble", config=config, seed=_seed_of(args),
                           strict=args.strict,
                           weights_digest=weights_digest(args.weights),
                           rows=[{"file": out_path.name}],
                           timings=None if args.strict else
                           {"total_s": time.perf_counter() - t0})
    write_manifest(manifest, manifest_path_for(out_path))
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    clean_dir, test_dir = Path(args.clean), Path(args.test)
    _print_effective("eval", {"clean": str(clean_dir), "test": str(test_dir),
                              "quantize": bool(args.quantize),
                              "out": args.out and str(args.out)})
    clean = {p.stem: p for p in _iter_images(clean_dir)}
    test = {p.stem: p for p in _iter_images(test_dir)}
    shared = sorted(set(clean) & set(test))
    for stem in sorted(set(clean) ^ set(test)):
        side = "clean" if stem in clean else "test"
        print(f"warning: {stem} present only in {side} dir", file=sys.stderr)
    if not shared:
        raise ConfigError("no filename-matched pairs between the two directories")

    noise_info = {}
    test_manifest = test_dir / "manifest.json"
    if test_manifest.exists():
        for row in json.loads(test_manifest.read_text()).get("rows", []):
            if "file" in row and "kind" in row:
                noise_info[Path(row["file"]).stem] = (row["kind"], row.get("param"))

    report = QualityReport()
    for stem in shared:
        a = imageio.load_image(clean[stem]).data
        b = imageio.load_image(test[stem]).data
        if args.quantize:
            a = imageio.quantize(a, 8) / 255.0
            b = imageio.quantize(b, 8) / 255.0
        kind, param = noise_info.get(stem, ("", None))
        report.rows.append(QualityRow(stem, psnr(a, b), ssim(a, b), kind, param))

    csv_text = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
        manifest = RunManifest(command="eval",
                               config={"clean": str(clean_dir), "test": str(test_dir),
                                       "quantize": bool(args.quantize)},
                               seed=_seed_of(args), strict=args.strict,
                               rows=[{"file": r.name, "psnr": r.psnr, "ssim": r.ssim}
                                     for r in report.rows])
        write_manifest(manifest, manifest_path_for(Path(args.out)))
    print(csv_text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--strict", action="store_true",
                   help="serial deterministic mode; manifests omit timings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskfill",
                                     description="Zero-shot image denoising via "
                                                 "masked pre-training and iterative filling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked pre-training on an image corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, default=256)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--steps", type=int, default=80_000)
    p.add_argument("--mask-ratio", type=float, default=0.3)
    p.add_argument("--shared-masks", action="store_true")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--log", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("denoise", help="zero-shot denoise one image or a directory")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weights", default=None, help="weight file; omit for scratch init")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS))
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--pd", type=int, default=None)
    p.add_argument("--ensemble", default=None,
                   help="ema | average | last | avg-after=K")
    p.add_argument("--no-mask-loss", action="store_true")
    p.add_argument("--shared-masks", action="store_true")
    p.add_argument("--reference", default=None,
                   help="directory of clean images for per-image psnr/ssim")
    p.add_argument("--trace", default=None, help="write per-iteration JSONL here")
    _add_common(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("add-noise", help="synthesize noisy copies of images")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--kind", required=True, choices=noise.KINDS)
    p.add_argument("--param", type=float, default=None)
    p.add_argument("--param-range", default=None, help="LO:HI uniform per image")
    p.add_argument("--scale-255", action="store_true",
                   help="divide gaussian/speckle params by 255 (8-bit convention)")
    _add_common(p)
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("eval", help="PSNR/SSIM of filename-matched image pairs")
    p.add_argument("--clean", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", default=None, help="write the CSV report here")
    p.add_argument("--quantize", action="store_true",
                   help="quantize both sides to 8 bits before scoring")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("direct-ensemble",
                       help="ensemble masked predictions with frozen weights")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--mask-ratio", type=float, default=0.3)
    p.add_argument("--passes", type=int, default=64)
    p.add_argument("--shared-masks", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_direct_ensemble)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ImageIOError, WeightFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
