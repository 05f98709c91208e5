"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 model or file
incompatibility. ``SLABFILL_LOG`` (error / warn / info / debug) sets the
diagnostic level; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .errors import (
    ChannelMismatch,
    ConfigError,
    IoFailure,
    MalformedHeader,
    ModelFormatError,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDatatype,
    VolumeTooSmall,
)

log = logging.getLogger("slabfill")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MODEL = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = LOG_LEVELS.get(os.environ.get("SLABFILL_LOG", "warn").lower(), logging.WARNING)
    root = logging.getLogger("slabfill")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def load_label_pool(directory):
    from .volgrid import read_nifti

    d = Path(directory)
    if not d.is_dir():
        raise CliError(EXIT_IO, f"label directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.name.endswith(".nii"))
    if not files:
        raise CliError(EXIT_IO, f"no NIfTI label volumes in {d}")
    return [read_nifti(p, kind="label") for p in files], files


def _config(args, desk=False) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None), desk=desk)
    return cfg


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    from .synthgen import sample_triplet, synthesize_volume
    from .volgrid import IntensityVolume, VoxelGeometry, write_nifti

    cfg = _config(args)
    pool, files = load_label_pool(args.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": args.seed, "count": args.count, "config": cfg.to_dict(),
                "label_files": [f.name for f in files], "volumes": []}
    for i, seq in enumerate(np.random.SeedSequence(args.seed).spawn(args.count)):
        rng = np.random.default_rng(seq)
        src = int(rng.integers(len(pool)))
        image, labels = synthesize_volume(pool[src], rng, cfg.generator)
        triplet = sample_triplet(image, rng, cfg.generator)
        write_nifti(image, out / f"image_{i:04d}.nii")
        write_nifti(labels, out / f"labels_{i:04d}.nii")
        planes = np.stack([triplet.x1.pixels, triplet.y.pixels, triplet.x2.pixels], axis=2)
        h, w = planes.shape[1], planes.shape[3]
        write_nifti(IntensityVolume(VoxelGeometry((h, 3, w)), planes), out / f"triplet_{i:04d}.nii")
        manifest["volumes"].append({
            "index": i,
            "label_source": files[src].name,
            "image": f"image_{i:04d}.nii",
            "labels": f"labels_{i:04d}.nii",
            "triplet": f"triplet_{i:04d}.nii",
            "triplet_planes": ["x1", "y", "x2"],
            "d1_mm": triplet.d1_mm,
            "d2_mm": triplet.d2_mm,
        })
        log.info("wrote synthetic volume %d from %s", i, files[src].name)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from .trainer import train

    cfg = _config(args, desk=args.desk_scale)
    if args.seed is not None:
        cfg.training = replace(cfg.training, seed=args.seed)
    pool, _ = load_label_pool(args.labels)
    report = train(cfg.generator, cfg.network, cfg.training, pool, args.out)
    print(f"best validation MAE {report.best_val_mae:.5f} at step {report.best_step} "
          f"(linear baseline {report.baseline_val_mae:.5f})")
    return EXIT_OK


def cmd_impute(args) -> int:
    from .imputer import impute_volume, load_stack
    from .unet import load_model
    from .volgrid import write_nifti

    params = load_model(args.model)
    stack = load_stack(args.input, args.coords)
    vol = impute_volume(params, stack, args.spacing)
    write_nifti(vol, args.out)
    first = stack.ap_coords_mm[0]
    coords = [first + k * args.spacing for k in range(vol.geometry.dims[1])]
    Path(str(args.out) + ".json").write_text(json.dumps({"ap_coords_mm": coords}) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evalmetrics import dice_report, oracle_benchmark
    from .phantoms import make_phantom
    from .volgrid import read_nifti

    if args.mode == "dice":
        pred = read_nifti(args.pred, kind="label")
        gold = read_nifti(args.gold, kind="label")
        labels = [int(v) for v in args.labels.split(",")] if args.labels else None
        report = dice_report(pred, gold, labels)
    else:
        from .unet import load_model

        cfg = _config(args)
        params = load_model(args.model)
        if args.labels_dir:
            pool, _ = load_label_pool(args.labels_dir)
        else:
            pool = [make_phantom(s) for s in range(args.phantom_seed, args.phantom_seed + args.phantoms)]
        report = oracle_benchmark(params, pool, cfg.generator, args.thickness, args.volumes, args.seed,
                                  cfg.inference.spacing_mm)
    print(report.to_table())
    for flag in report.flags:
        log.warning(flag)
    if args.json:
        report.write_json(args.json)
    return EXIT_OK


def cmd_phantoms(args) -> int:
    from .phantoms import make_phantom
    from .volgrid import write_nifti

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in range(args.seed, args.seed + args.count):
        write_nifti(make_phantom(seed), out / f"phantom_{seed:04d}.nii")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slabfill", description="Slice imputation for stacks of coronal slab photographs.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads; 1 gives bit-exact reproducibility")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic volumes, triplet previews and a manifest")
    g.add_argument("--labels", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the imputation network")
    t.add_argument("--labels", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--desk-scale", action="store_true", help="levels 4, base 8, 64x64 slices, lr 1e-4")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("impute", help="impute an isotropic volume from a slice stack")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--coords")
    i.add_argument("--spacing", type=float, default=1.0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_impute)

    e = sub.add_parser("evaluate", help="oracle benchmark or Dice overlap")
    esub = e.add_subparsers(dest="mode", required=True)
    o = esub.add_parser("oracle")
    o.add_argument("--model", required=True)
    o.add_argument("--labels", dest="labels_dir", help="directory of label volumes (default: held-out phantoms)")
    o.add_argument("--phantoms", type=int, default=3)
    o.add_argument("--phantom-seed", type=int, default=1000)
    o.add_argument("--thickness", type=int, default=8)
    o.add_argument("--volumes", type=int, default=10)
    o.add_argument("--seed", type=int, default=12345)
    o.add_argument("--config")
    o.add_argument("--json")
    o.set_defaults(func=cmd_evaluate)
    d = esub.add_parser("dice")
    d.add_argument("--pred", required=True)
    d.add_argument("--gold", required=True)
    d.add_argument("--labels")
    d.add_argument("--json")
    d.set_defaults(func=cmd_evaluate)

    ph = sub.add_parser("phantoms", help="write procedural label volumes")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, default=3)
    ph.add_argument("--seed", type=int, default=0)
    ph.set_defaults(func=cmd_phantoms)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (ModelFormatError, ChannelMismatch) as exc:
        log.error("incompatible model or input: %s", exc)
        return EXIT_MODEL
    except (IoFailure, OSError, MalformedHeader, TruncatedData, UnsupportedDatatype) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (VolumeTooSmall, ShapeMismatch) as exc:
        log.error("incompatible input: %s", exc)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
