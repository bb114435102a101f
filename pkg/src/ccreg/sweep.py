"""Multi-seed sweep protocols: train N independently seeded registrations
of one phantom, evaluate landmark errors and uncertainty, and summarize
failure rates.

Each seed is a fully deterministic pipeline (phantom -> training ->
inference -> statistics), so sweeps parallelize across processes without
changing any result: workers receive (phantom spec, strategy, seed),
rebuild the phantom locally and return plain dicts, which the parent
assembles in seed order. sweep.json content is therefore identical for
--parallel 1 and --parallel K.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from multiprocessing import get_context

import numpy as np

from .errors import ContractError, NumericalAbort
from .inference import transform_landmarks
from .losses import LossWeights
from .metrics import FAILURE_THRESHOLD_MM, SeedSweepResult, tre
from .phantom import generate_phantom
from .training import TrainConfig, train_pair, train_single
from .volume_io import load_landmarks, load_volume

# strategy -> (reg_kind, alpha, cycle_enabled)
STRATEGIES = {
    "jac": ("jacobian", 0.05, False),
    "sjac": ("symmetric_jacobian", 0.05, False),
    "bend": ("bending", 10.0, False),
    "sjac+cycle": ("symmetric_jacobian", 0.05, True),
    "bend+cycle": ("bending", 10.0, True),
}

_BLAS_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def strategy_config(base: TrainConfig, strategy: str, seed: int) -> TrainConfig:
    """Materialize a strategy (regularizer choice + cycle flag) into a config."""
    if strategy not in STRATEGIES:
        raise ContractError(
            f"unknown strategy {strategy!r}; have {sorted(STRATEGIES)}")
    reg_kind, alpha, cycle = STRATEGIES[strategy]
    weights = LossWeights(alpha=alpha, beta=base.weights.beta,
                          tau=base.weights.tau, reg_kind=reg_kind)
    return replace(base, weights=weights, cycle_enabled=cycle, seed=seed)


def _load_problem(problem_spec: dict):
    """Materialize a registration problem from its JSON-ready description.

    Either {"phantom": generate_phantom kwargs} or {"volumes": {fixed,
    moving, fixed_mask, moving_mask, landmarks_fixed, landmarks_moving
    file paths}}. Returns (fixed, moving, mask_fixed, mask_moving,
    lm_fixed, lm_moving).
    """
    if "phantom" in problem_spec:
        ph = generate_phantom(**problem_spec["phantom"])
        return (ph.fixed, ph.moving, ph.mask, ph.mask,
                ph.landmarks_fixed, ph.landmarks_moving)
    if "volumes" in problem_spec:
        v = problem_spec["volumes"]
        fixed = load_volume(v["fixed"])
        return (fixed, load_volume(v["moving"]),
                load_volume(v["fixed_mask"]), load_volume(v["moving_mask"]),
                load_landmarks(v["landmarks_fixed"]),
                load_landmarks(v["landmarks_moving"]))
    raise ContractError("problem spec needs a 'phantom' or 'volumes' entry")


def run_seed(problem_spec: dict, strategy: str, seed: int,
             base_cfg: TrainConfig, epoch_fraction: float = 1.0) -> dict:
    """Train and evaluate one seed; returns a JSON-ready result dict.

    ``epoch_fraction`` < 1 deliberately truncates training (the induced-
    failure protocol for uncertainty validation). Numerical aborts are
    recorded, not raised.
    """
    fixed, moving, mask_f, mask_m, lm_fixed, lm_moving = _load_problem(
        problem_spec)
    cfg = strategy_config(base_cfg, strategy, seed)
    if epoch_fraction != 1.0:
        cfg = replace(cfg, epochs=max(1, int(round(cfg.epochs * epoch_fraction))))
    entry = {"seed": seed, "strategy": strategy, "epochs": cfg.epochs,
             "aborted": False, "error": None}
    try:
        if cfg.cycle_enabled:
            pair = train_pair(fixed, moving, mask_f, mask_m, cfg)
        else:
            pair = train_single(fixed, moving, mask_f, cfg)
    except NumericalAbort as e:
        entry["aborted"] = True
        entry["error"] = str(e)
        return entry

    mode = "midpoint" if pair.backward is not None else "forward"
    est, unc = transform_landmarks(pair, lm_fixed, mode=mode)
    mean_mm, std_mm, per_point = tre(est, lm_moving)
    entry.update({
        "mean_tre_mm": mean_mm,
        "std_tre_mm": std_mm,
        "per_point_tre_mm": per_point.tolist(),
        "trajectory_mm": est.points.tolist(),
        "mean_uncertainty_mm": None if unc is None else float(unc.mean()),
        "per_point_uncertainty_mm": None if unc is None else unc.tolist(),
        "final_loss": pair.final_loss.to_dict(),
    })
    if pair.backward is not None:
        est_f, _ = transform_landmarks(pair, lm_fixed, mode="forward")
        fwd_mean, _, _ = tre(est_f, lm_moving)
        entry["mean_tre_forward_mm"] = fwd_mean
    return entry


def _seed_task(args) -> dict:
    problem_spec, strategy, seed, cfg_dict, epoch_fraction = args
    return run_seed(problem_spec, strategy, seed,
                    TrainConfig.from_dict(cfg_dict), epoch_fraction)


def run_sweep(problem_spec: dict, strategy: str, seeds, base_cfg: TrainConfig,
              parallel: int = 1, epoch_fraction: float = 1.0,
              threshold_mm: float = FAILURE_THRESHOLD_MM,
              progress=None) -> dict:
    """Run one strategy over many seeds; returns the sweep summary dict.

    ``parallel`` > 1 distributes seeds over spawned worker processes, each
    pinned to single-threaded BLAS; results are keyed and ordered by seed
    so the summary is invariant to the worker count.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ContractError("sweep seeds must be distinct")
    tasks = [(problem_spec, strategy, s, base_cfg.to_dict(), epoch_fraction)
             for s in seeds]
    results: dict[int, dict] = {}
    if parallel > 1 and len(seeds) > 1:
        saved = {k: os.environ.get(k) for k in _BLAS_ENV}
        for k in _BLAS_ENV:
            os.environ[k] = "1"
        try:
            ctx = get_context("spawn")
            with ProcessPoolExecutor(max_workers=parallel,
                                     mp_context=ctx) as pool:
                for entry in pool.map(_seed_task, tasks):
                    results[entry["seed"]] = entry
                    if progress is not None:
                        progress(entry)
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    else:
        for t in tasks:
            entry = _seed_task(t)
            results[entry["seed"]] = entry
            if progress is not None:
                progress(entry)

    ordered = [results[s] for s in seeds]
    n_ok = sum(1 for e in ordered if not e["aborted"])
    summary = {
        "problem": dict(problem_spec),
        "strategy": strategy,
        "config": base_cfg.to_dict(),
        "epoch_fraction": epoch_fraction,
        "threshold_mm": threshold_mm,
        "seeds": seeds,
        "results": ordered,
        "n_completed": n_ok,
        "failure_rate": _sweep_failure_rate(ordered, threshold_mm),
    }
    return summary


def _sweep_failure_rate(ordered: list[dict], threshold_mm: float) -> float:
    """Aborted seeds count as failures alongside TRE exceedances."""
    if not ordered:
        return 0.0
    bad = sum(1 for e in ordered
              if e["aborted"] or e["mean_tre_mm"] > threshold_mm)
    return bad / len(ordered)


def sweep_result(summary: dict) -> SeedSweepResult:
    """Convert a sweep summary into the statistics container.

    Aborted seeds appear with infinite TRE (they always count as failed)
    and NaN trajectories.
    """
    seeds = summary["seeds"]
    n_pts = None
    for e in summary["results"]:
        if not e["aborted"]:
            n_pts = len(e["trajectory_mm"])
            break
    if n_pts is None:
        raise ContractError("sweep has no completed seeds")
    mean_tre, std_tre, mean_unc, traj = [], [], [], []
    for e in summary["results"]:
        if e["aborted"]:
            mean_tre.append(np.inf)
            std_tre.append(np.nan)
            mean_unc.append(np.nan)
            traj.append(np.full((n_pts, 3), np.nan))
        else:
            mean_tre.append(e["mean_tre_mm"])
            std_tre.append(e["std_tre_mm"])
            u = e["mean_uncertainty_mm"]
            mean_unc.append(np.nan if u is None else u)
            traj.append(np.asarray(e["trajectory_mm"]))
    return SeedSweepResult(seeds=tuple(seeds),
                           mean_tre=np.array(mean_tre),
                           std_tre=np.array(std_tre),
                           mean_uncertainty=np.array(mean_unc),
                           trajectories=np.stack(traj),
                           threshold_mm=summary["threshold_mm"])


def write_sweep_outputs(summary: dict, out_dir: str | os.PathLike) -> None:
    """Write sweep.json plus scatter.csv (per-landmark uncertainty vs error)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "scatter.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "landmark", "uncertainty_mm", "error_mm"])
        for e in summary["results"]:
            if e["aborted"] or e.get("per_point_uncertainty_mm") is None:
                continue
            for i, (u, d) in enumerate(zip(e["per_point_uncertainty_mm"],
                                           e["per_point_tre_mm"])):
                w.writerow([e["seed"], i, repr(float(u)), repr(float(d))])
