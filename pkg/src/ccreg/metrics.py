"""Landmark-error statistics and multi-seed sweep summaries.

TRE is the Euclidean distance in world mm between estimated and true
landmark positions. A seed "fails" when its mean TRE exceeds a threshold
(2 mm by default, about one voxel at clinical resolution). Consensus and
propagation-discrepancy statistics quantify cross-seed reproducibility
without ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError
from .volume_io import LandmarkSet

FAILURE_THRESHOLD_MM = 2.0


def tre(est: LandmarkSet, gt: LandmarkSet):
    """Target registration error: (mean mm, std mm, per-point mm).

    Point order matters; inputs must be aligned index to index.
    """
    if len(est) != len(gt):
        raise ContractError(
            f"landmark counts differ: {len(est)} vs {len(gt)}")
    d = np.linalg.norm(est.points - gt.points, axis=1)
    return float(d.mean()), float(d.std()), d


@dataclass(frozen=True)
class SeedSweepResult:
    """Per-seed registration outcomes of a multi-seed sweep."""

    seeds: tuple                  # of int
    mean_tre: np.ndarray          # (n_seeds,) mm
    std_tre: np.ndarray           # (n_seeds,) mm
    mean_uncertainty: np.ndarray  # (n_seeds,) mm
    trajectories: np.ndarray      # (n_seeds, n_points, 3) world mm
    threshold_mm: float = FAILURE_THRESHOLD_MM
    failed: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ContractError("sweep seeds must be distinct")
        n = len(self.seeds)
        for name in ("mean_tre", "std_tre", "mean_uncertainty"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (n,):
                raise ContractError(f"{name} must have one entry per seed")
            object.__setattr__(self, name, a)
        traj = np.asarray(self.trajectories, dtype=np.float64)
        if traj.ndim != 3 or traj.shape[0] != n or traj.shape[2] != 3:
            raise ContractError("trajectories must be (n_seeds, n_points, 3)")
        object.__setattr__(self, "trajectories", traj)
        object.__setattr__(self, "failed", self.mean_tre > self.threshold_mm)


def failure_rate(sweep: SeedSweepResult,
                 threshold_mm: float = FAILURE_THRESHOLD_MM) -> float:
    """Fraction of seeds whose mean TRE exceeds the threshold."""
    if len(sweep.seeds) < 1:
        raise ContractError("failure_rate needs at least one seed")
    return float(np.mean(sweep.mean_tre > threshold_mm))


def propagation_consensus(trajectories: np.ndarray) -> np.ndarray:
    """Coordinate-wise median position across seeds, per point."""
    traj = np.asarray(trajectories, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[2] != 3:
        raise ContractError("trajectories must be (n_seeds, n_points, 3)")
    if traj.shape[0] < 3:
        raise ContractError("consensus needs at least 3 seeds")
    return np.median(traj, axis=0)


def propagation_discrepancy(trajectories: np.ndarray, consensus: np.ndarray,
                            groups=None) -> np.ndarray:
    """Per-seed discrepancy from the consensus, in mm.

    For each seed: median point-to-consensus distance within each point
    group, then the mean across groups. ``groups`` assigns a group id per
    point (landmark labels work directly); None treats all points as one
    group.
    """
    traj = np.asarray(trajectories, dtype=np.float64)
    consensus = np.asarray(consensus, dtype=np.float64)
    if consensus.shape != traj.shape[1:]:
        raise ContractError("consensus shape does not match trajectories")
    d = np.linalg.norm(traj - consensus[None], axis=2)  # (n_seeds, n_points)
    if groups is None:
        return np.median(d, axis=1)
    groups = np.asarray(groups)
    if groups.shape != (traj.shape[1],):
        raise ContractError("groups must assign one id per point")
    uniq = sorted(set(groups.tolist()))
    per_group = np.stack([np.median(d[:, groups == g], axis=1) for g in uniq],
                         axis=1)
    return per_group.mean(axis=1)


def uncertainty_correlation(uncertainty_mm, error_mm) -> float:
    """Pearson correlation between paired uncertainty and error values."""
    u = np.asarray(uncertainty_mm, dtype=np.float64).ravel()
    e = np.asarray(error_mm, dtype=np.float64).ravel()
    if u.shape != e.shape:
        raise ContractError("uncertainty and error lengths differ")
    if u.size < 3:
        raise ContractError("correlation needs at least 3 pairs")
    uc = u - u.mean()
    ec = e - e.mean()
    su = float(uc @ uc)
    se = float(ec @ ec)
    if su == 0.0 or se == 0.0:
        raise DomainError("correlation undefined: zero variance input")
    return float((uc @ ec) / np.sqrt(su * se))
