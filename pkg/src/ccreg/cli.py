"""Command-line entry points.

Subcommands: register, infer, sweep, phantom. Every invocation writes a
run.json manifest into --out-dir (on success and on failure) recording the
subcommand, fully resolved config, sha256 of every input file, seed, tool
version, RNG algorithm, kernel backend and wall time, which is enough to
reproduce the run bit for bit.

Exit codes: 0 ok, 2 bad input (missing/malformed files, non-invertible
phantom, hash mismatch), 3 numerical abort during optimization, 4 sweep
finished but some seeds failed hard.

This module must not import numpy at load time: main() applies the
CCREG_THREADS cap to the BLAS thread-count environment variables first,
then pulls in the numeric stack.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("CCREG_THREADS", "").strip()
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise SystemExit(f"CCREG_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(paths: dict[str, str | None]) -> dict:
    out = {}
    for name, path in paths.items():
        if path is None:
            continue
        out[name] = {"path": os.fspath(path), "sha256": _hash_file(path)}
        # volumes ship a sibling raw payload; include it when present
        raw = os.fspath(path)[:-5] + ".raw" if str(path).endswith(".json") else None
        if raw and os.path.exists(raw):
            out[name]["payload_sha256"] = _hash_file(raw)
    return out


def _write_manifest(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run.json")
    merged = {}
    if os.path.exists(path):
        try:
            with open(path) as f:
                merged = json.load(f)
        except (OSError, json.JSONDecodeError):
            merged = {}
    merged.update(payload)
    with open(path, "w") as f:
        json.dump(merged, f, indent=2, sort_keys=True)
        f.write("\n")


def _manifest_base(subcommand: str, args: argparse.Namespace) -> dict:
    from . import __version__
    from . import backend
    from .rng import RNG_ALGORITHM
    return {
        "subcommand": subcommand,
        "argv": sys.argv[1:],
        "tool_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "backend": backend.active_backend(),
        "seed": getattr(args, "seed", None),
    }


def _load_train_config(args) -> "TrainConfig":
    from .training import TrainConfig
    if getattr(args, "config", None):
        with open(args.config) as f:
            overrides = json.load(f)
        base = TrainConfig().to_dict()
        for key, val in overrides.items():
            if key in ("weights", "net"):
                base[key].update(val)
            else:
                base[key] = val
        cfg = TrainConfig.from_dict(base)
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "no_cycle", False):
        from dataclasses import replace
        cfg = replace(cfg, cycle_enabled=False)
    return cfg


def cmd_register(args) -> int:
    from .errors import NumericalAbort
    from .training import train_pair, train_single
    from .volume_io import load_volume

    t0 = time.monotonic()
    manifest = _manifest_base("register", args)
    cfg = _load_train_config(args)
    manifest["config"] = cfg.to_dict()
    manifest["config_hash"] = cfg.config_hash()
    manifest["seed"] = cfg.seed
    inputs = {"fixed": args.fixed, "moving": args.moving,
              "fixed_mask": args.fixed_mask, "moving_mask": args.moving_mask,
              "config_file": args.config}
    manifest["inputs"] = _input_hashes(
        {k: v for k, v in inputs.items() if v})
    _write_manifest(args.out_dir, dict(manifest, status="running"))

    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    mask_fixed = load_volume(args.fixed_mask)
    try:
        if cfg.cycle_enabled:
            mask_moving = load_volume(args.moving_mask)
            train_pair(fixed, moving, mask_fixed, mask_moving, cfg,
                       out_dir=args.out_dir)
        else:
            train_single(fixed, moving, mask_fixed, cfg, out_dir=args.out_dir)
    except NumericalAbort as e:
        _write_manifest(args.out_dir, {
            "status": "numerical_abort", "error": str(e),
            "abort_epoch": e.epoch,
            "wall_time_s": time.monotonic() - t0})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    _write_manifest(args.out_dir, {"status": "ok",
                                   "wall_time_s": time.monotonic() - t0})
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import dense_field, transform_landmarks, warp_image
    from .training import load_pair
    from .volume_io import load_landmarks, load_volume, save_landmarks, \
        save_volume

    t0 = time.monotonic()
    manifest = _manifest_base("infer", args)
    inputs = {"pair": os.path.join(args.pair, "pair.json"),
              "landmarks": args.landmarks, "roi_mask": args.roi_mask,
              "grid": args.grid, "moving": args.moving}
    manifest["inputs"] = _input_hashes({k: v for k, v in inputs.items() if v})
    _write_manifest(args.out_dir, dict(manifest, status="running"))

    pair = load_pair(args.pair)
    manifest["config_hash"] = pair.config_hash
    manifest["seed"] = pair.seed

    wrote = []
    if args.grid:
        grid = load_volume(args.grid)
        roi = load_volume(args.roi_mask) if args.roi_mask else None
        field = dense_field(pair, grid, roi)
        for name, vol in field.items():
            save_volume(vol, os.path.join(args.out_dir, f"{name}.json"))
            wrote.append(f"{name}.json")
        if args.moving:
            moving = load_volume(args.moving)
            warped = warp_image(moving, field)
            save_volume(warped, os.path.join(args.out_dir, "warped.json"))
            wrote.append("warped.json")
    if args.landmarks:
        lm = load_landmarks(args.landmarks)
        out, unc = transform_landmarks(pair, lm, mode=args.mode)
        extra = None if unc is None else {"uncertainty_mm": unc}
        save_landmarks(out, os.path.join(args.out_dir, "landmarks.csv"),
                       extra_columns=extra)
        wrote.append("landmarks.csv")
    if not wrote:
        print("error: nothing to do; pass --grid and/or --landmarks",
              file=sys.stderr)
        _write_manifest(args.out_dir, {"status": "input_error",
                                       "wall_time_s": time.monotonic() - t0})
        return EXIT_INPUT
    _write_manifest(args.out_dir, {"status": "ok", "outputs": wrote,
                                   "wall_time_s": time.monotonic() - t0})
    return EXIT_OK


def _parse_seeds(args) -> list[int]:
    if args.seed_list:
        return [int(s) for s in args.seed_list.split(",") if s.strip() != ""]
    return list(range(args.seeds))


def cmd_sweep(args) -> int:
    from .sweep import run_sweep, write_sweep_outputs

    t0 = time.monotonic()
    manifest = _manifest_base("sweep", args)
    cfg = _load_train_config(args)
    seeds = _parse_seeds(args)

    if args.fixed or args.moving:
        needed = {"fixed": args.fixed, "moving": args.moving,
                  "fixed_mask": args.fixed_mask,
                  "moving_mask": args.moving_mask,
                  "landmarks_fixed": args.landmarks_fixed,
                  "landmarks_moving": args.landmarks_moving}
        missing = [k for k, v in needed.items() if not v]
        if missing:
            print(f"error: volume sweep needs --{'/--'.join(m.replace('_', '-') for m in missing)}",
                  file=sys.stderr)
            return EXIT_INPUT
        problem = {"volumes": {k: os.fspath(v) for k, v in needed.items()}}
        manifest["inputs"] = _input_hashes(needed)
    else:
        problem = {"phantom": {"kind": args.phantom_kind,
                               "size": args.phantom_size,
                               "amplitude_mm": args.phantom_amplitude,
                               "seed": args.phantom_seed}}
        manifest["inputs"] = {}
    manifest.update({"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
                     "problem": problem, "strategy": args.strategy,
                     "seeds": seeds, "parallel": args.parallel,
                     "epoch_fraction": args.epoch_fraction})
    _write_manifest(args.out_dir, dict(manifest, status="running"))

    def progress(entry):
        tag = "abort" if entry["aborted"] else \
            f"TRE {entry['mean_tre_mm']:.3f} mm"
        print(f"seed {entry['seed']}: {tag}", flush=True)

    summary = run_sweep(problem, args.strategy, seeds, cfg,
                        parallel=args.parallel,
                        epoch_fraction=args.epoch_fraction,
                        progress=progress)
    write_sweep_outputs(summary, args.out_dir)
    ok = summary["n_completed"] == len(seeds)
    _write_manifest(args.out_dir, {
        "status": "ok" if ok else "partial",
        "failure_rate": summary["failure_rate"],
        "n_completed": summary["n_completed"],
        "wall_time_s": time.monotonic() - t0})
    print(f"failure rate: {summary['failure_rate']:.3f} "
          f"({summary['n_completed']}/{len(seeds)} seeds completed)")
    return EXIT_OK if ok else EXIT_PARTIAL


def cmd_phantom(args) -> int:
    from .phantom import generate_phantom
    from .volume_io import save_landmarks, save_volume

    t0 = time.monotonic()
    manifest = _manifest_base("phantom", args)
    manifest["config"] = {"kind": args.kind, "size": args.size,
                          "amplitude_mm": args.amplitude_mm,
                          "seed": args.seed}
    manifest["inputs"] = {}
    _write_manifest(args.out_dir, dict(manifest, status="running"))

    ph = generate_phantom(args.kind, args.size, args.amplitude_mm, args.seed)
    volumes = {"fixed": ph.fixed, "moving": ph.moving, "mask": ph.mask}
    volumes.update(ph.true_field)
    for name, vol in volumes.items():
        save_volume(vol, os.path.join(args.out_dir, f"{name}.json"))
    save_landmarks(ph.landmarks_fixed,
                   os.path.join(args.out_dir, "landmarks_fixed.csv"))
    save_landmarks(ph.landmarks_moving,
                   os.path.join(args.out_dir, "landmarks_moving.csv"))
    _write_manifest(args.out_dir, {"status": "ok",
                                   "outputs": sorted(volumes),
                                   "wall_time_s": time.monotonic() - t0})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ccreg",
        description="Deformable 3D registration with cycle-consistent "
                    "coordinate networks and built-in uncertainty maps.")
    sub = p.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="train a network pair on two volumes")
    reg.add_argument("--fixed", required=True, help="fixed/target volume (.json)")
    reg.add_argument("--moving", required=True, help="moving/source volume (.json)")
    reg.add_argument("--fixed-mask", required=True)
    reg.add_argument("--moving-mask", help="required unless --no-cycle")
    reg.add_argument("--out-dir", required=True)
    reg.add_argument("--seed", type=int, default=None)
    reg.add_argument("--config", help="JSON file overriding training defaults")
    reg.add_argument("--no-cycle", action="store_true",
                     help="single-network baseline (beta = 0)")
    reg.set_defaults(func=cmd_register, needs_moving_mask=True)

    inf = sub.add_parser("infer", help="evaluate a trained pair")
    inf.add_argument("--pair", required=True, help="checkpoint directory")
    inf.add_argument("--out-dir", required=True)
    inf.add_argument("--grid", help="volume defining the output lattice")
    inf.add_argument("--roi-mask", help="mask on the grid; zeros outside")
    inf.add_argument("--moving", help="also write the warped moving image")
    inf.add_argument("--landmarks", help="CSV of target-domain landmarks (mm)")
    inf.add_argument("--mode", choices=("midpoint", "forward"),
                     default="midpoint")
    inf.set_defaults(func=cmd_infer)

    sw = sub.add_parser("sweep", help="multi-seed robustness sweep")
    sw.add_argument("--strategy", required=True,
                    choices=("jac", "sjac", "bend", "sjac+cycle", "bend+cycle"))
    sw.add_argument("--seeds", type=int, default=10,
                    help="number of seeds (0..N-1)")
    sw.add_argument("--seed-list", help="explicit comma-separated seeds")
    sw.add_argument("--parallel", type=int, default=1)
    sw.add_argument("--epoch-fraction", type=float, default=1.0,
                    help="truncate training (induced-failure protocol)")
    sw.add_argument("--out-dir", required=True)
    sw.add_argument("--config", help="JSON file overriding training defaults")
    sw.add_argument("--phantom-kind", default="sinusoid")
    sw.add_argument("--phantom-size", type=int, default=32)
    sw.add_argument("--phantom-amplitude", type=float, default=3.0)
    sw.add_argument("--phantom-seed", type=int, default=0)
    sw.add_argument("--fixed")
    sw.add_argument("--moving")
    sw.add_argument("--fixed-mask")
    sw.add_argument("--moving-mask")
    sw.add_argument("--landmarks-fixed")
    sw.add_argument("--landmarks-moving")
    sw.set_defaults(func=cmd_sweep)

    phm = sub.add_parser("phantom", help="generate a synthetic ground-truth pair")
    phm.add_argument("--kind", default="sinusoid",
                     choices=("sinusoid", "gaussian_compression",
                              "piecewise_contraction"))
    phm.add_argument("--size", type=int, default=64)
    phm.add_argument("--amplitude-mm", type=float, default=4.0)
    phm.add_argument("--seed", type=int, default=0)
    phm.add_argument("--out-dir", required=True)
    phm.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    if getattr(args, "needs_moving_mask", False):
        if not args.no_cycle and not args.moving_mask:
            print("error: --moving-mask is required unless --no-cycle",
                  file=sys.stderr)
            return EXIT_INPUT

    from .errors import (ContractError, DomainError, PhantomParameterError,
                         VolumeFormatError)
    try:
        return args.func(args)
    except (VolumeFormatError, ContractError, DomainError,
            PhantomParameterError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        out_dir = getattr(args, "out_dir", None)
        if out_dir:
            _write_manifest(out_dir, dict(
                _manifest_base(args.command, args),
                status="input_error", error=str(e)))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
