"""Joint optimization of the forward/backward network pair.

Each epoch draws one fresh batch per network (forward from the target
foreground, backward from the source foreground), computes the six-term
objective, merges all adjoints per network and applies one Adam step per
network. The whole trajectory is a pure function of (inputs, config, seed),
reproducible bit for bit under a fixed backend.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import backend
from .coords import (NormTransform, make_norm_transform, sample_foreground)
from .errors import ContractError, DomainError, NumericalAbort
from .losses import (LossBreakdown, LossWeights, cycle_terms, data_loss,
                     regularizer, total_loss)
from .rng import (RNG_ALGORITHM, ROLE_BATCH_BACKWARD, ROLE_BATCH_FORWARD,
                  ROLE_INIT_BACKWARD, ROLE_INIT_FORWARD, make_rng)
from .siren import (AdamState, SirenParams, adam_step, add_gradients,
                    eval_spatial, init_siren, load_siren, param_gradients,
                    save_siren)
from .volume_io import Volume3D, require_binary_mask

PAIR_FORMAT = "ccreg-pair-v1"


@dataclass(frozen=True)
class NetSpec:
    hidden_layers: int = 3
    width: int = 256
    w0: float = 30.0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1 or not self.w0 > 0:
            raise ContractError("invalid network spec")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; the defaults are the full-scale reference settings."""

    epochs: int = 2500
    lr: float = 1e-4
    batch_per_inr: int = 10000
    weights: LossWeights = LossWeights()
    net: NetSpec = NetSpec()
    seed: int = 0
    cycle_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_per_inr < 1:
            raise ContractError("epochs and batch_per_inr must be positive")
        if not self.lr > 0:
            raise ContractError("lr must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "lr": self.lr,
            "batch_per_inr": self.batch_per_inr,
            "weights": {"alpha": self.weights.alpha, "beta": self.weights.beta,
                        "tau": self.weights.tau,
                        "reg_kind": self.weights.reg_kind},
            "net": {"hidden_layers": self.net.hidden_layers,
                    "width": self.net.width, "w0": self.net.w0},
            "seed": self.seed, "cycle_enabled": self.cycle_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {"epochs", "lr", "batch_per_inr", "weights", "net", "seed",
                 "cycle_enabled"}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            if "weights" in d:
                kw["weights"] = LossWeights(**d.pop("weights"))
            if "net" in d:
                kw["net"] = NetSpec(**d.pop("net"))
        except TypeError as e:
            raise DomainError(f"bad config section: {e}") from None
        kw.update(d)
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class InrPair:
    """Trained network pair with the coordinate transforms it was fit under.

    ``backward`` is None for single-network (no-cycle baseline) results; all
    consensus operations then degrade to forward-only estimates.
    """

    forward: SirenParams
    backward: SirenParams | None
    t_source: NormTransform
    t_target: NormTransform
    config_hash: str
    seed: int
    final_loss: LossBreakdown | None = None


def _check_training_inputs(fixed, moving, mask_fixed, mask_moving):
    require_binary_mask(mask_fixed, "fixed mask")
    if not mask_fixed.same_grid(fixed):
        raise ContractError("fixed mask grid does not match fixed image")
    if int(mask_fixed.data.sum()) == 0:
        raise DomainError("fixed mask is empty")
    if mask_moving is not None:
        require_binary_mask(mask_moving, "moving mask")
        if not mask_moving.same_grid(moving):
            raise ContractError("moving mask grid does not match moving image")
        if int(mask_moving.data.sum()) == 0:
            raise DomainError("moving mask is empty")


def _metrics_line(epoch: int, bd: LossBreakdown) -> str:
    rec = {"epoch": epoch}
    rec.update(bd.to_dict())
    return json.dumps(rec, sort_keys=True)


def train_pair(fixed: Volume3D, moving: Volume3D, mask_fixed: Volume3D,
               mask_moving: Volume3D, cfg: TrainConfig,
               out_dir: str | os.PathLike | None = None,
               progress=None) -> InrPair:
    """Jointly fit Phi_F (target -> source) and Phi_B (source -> target).

    When ``out_dir`` is given, writes per-epoch metrics.jsonl, the pair
    checkpoint and run.json there. ``progress``, if given, is called as
    progress(epoch, LossBreakdown) every epoch.

    Raises NumericalAbort (with epoch and component breakdown attached) if
    the loss or a gradient goes non-finite.
    """
    _check_training_inputs(fixed, moving, mask_fixed, mask_moving)
    t_target = make_norm_transform(fixed, isotropic=True)
    t_source = make_norm_transform(moving, isotropic=True)
    w = cfg.weights
    beta = w.beta if cfg.cycle_enabled else 0.0
    order = w.required_order
    t0 = time.monotonic()

    net_f = init_siren(cfg.net.hidden_layers, cfg.net.width, cfg.net.w0,
                       make_rng(cfg.seed, ROLE_INIT_FORWARD))
    net_b = init_siren(cfg.net.hidden_layers, cfg.net.width, cfg.net.w0,
                       make_rng(cfg.seed, ROLE_INIT_BACKWARD))
    adam_f = AdamState.init(net_f)
    adam_b = AdamState.init(net_b)
    rng_f = make_rng(cfg.seed, ROLE_BATCH_FORWARD)
    rng_b = make_rng(cfg.seed, ROLE_BATCH_BACKWARD)

    metrics = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    breakdown = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            batch_f = sample_foreground(
                mask_fixed, cfg.batch_per_inr, rng_f, t_target, "target",
                provenance=f"seed={cfg.seed} role=batch-forward epoch={epoch}")
            batch_b = sample_foreground(
                mask_moving, cfg.batch_per_inr, rng_b, t_source, "source",
                provenance=f"seed={cfg.seed} role=batch-backward epoch={epoch}")

            ev_f = eval_spatial(net_f, batch_f, order=order, keep_cache=True)
            ev_b = eval_spatial(net_b, batch_b, order=order, keep_cache=True)

            d_f, phibar_f = data_loss(fixed, moving, batch_f, ev_f,
                                      t_target, t_source)
            d_b, phibar_b = data_loss(moving, fixed, batch_b, ev_b,
                                      t_source, t_target)
            r_f, jacbar_f, hessbar_f = regularizer(ev_f, w)
            r_b, jacbar_b, hessbar_b = regularizer(ev_b, w)

            if beta > 0:
                c_fb, inbar_f, og_b = cycle_terms(ev_f.phi, batch_f.coords,
                                                  net_b)
                c_bf, inbar_b, og_f = cycle_terms(ev_b.phi, batch_b.coords,
                                                  net_f)
                phibar_f = phibar_f + beta * inbar_f
                phibar_b = phibar_b + beta * inbar_b
            else:
                c_fb = c_bf = 0.0
                og_f = og_b = None

            breakdown = total_loss(d_f, d_b, r_f, r_b, c_fb, c_bf, w)
            if not np.isfinite(breakdown.total):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}: {breakdown.to_dict()}",
                    epoch=epoch, breakdown=breakdown)

            grads_f, _ = param_gradients(
                net_f, ev_f, phibar=phibar_f,
                jacbar=None if jacbar_f is None else w.alpha * jacbar_f,
                hessbar=None if hessbar_f is None else w.alpha * hessbar_f)
            grads_b, _ = param_gradients(
                net_b, ev_b, phibar=phibar_b,
                jacbar=None if jacbar_b is None else w.alpha * jacbar_b,
                hessbar=None if hessbar_b is None else w.alpha * hessbar_b)
            if og_f is not None:
                add_gradients(grads_f, og_f, beta)
                add_gradients(grads_b, og_b, beta)

            try:
                net_f, adam_f = adam_step(net_f, grads_f, adam_f, cfg.lr)
                net_b, adam_b = adam_step(net_b, grads_b, adam_b, cfg.lr)
            except NumericalAbort as e:
                raise NumericalAbort(f"{e} at epoch {epoch}", epoch=epoch,
                                     breakdown=breakdown) from None

            if metrics is not None:
                metrics.write(_metrics_line(epoch, breakdown) + "\n")
            if progress is not None:
                progress(epoch, breakdown)
    finally:
        if metrics is not None:
            metrics.close()

    pair = InrPair(forward=net_f, backward=net_b, t_source=t_source,
                   t_target=t_target, config_hash=cfg.config_hash(),
                   seed=cfg.seed, final_loss=breakdown)
    if out_dir is not None:
        save_pair(pair, out_dir)
        _write_train_run_json(out_dir, cfg, time.monotonic() - t0, breakdown)
    return pair


def train_single(fixed: Volume3D, moving: Volume3D, mask_fixed: Volume3D,
                 cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
                 progress=None) -> InrPair:
    """No-cycle baseline: one forward network, data + regularizer only.

    beta is forced to 0 regardless of cfg; the result's ``backward`` is None
    and inference falls back to forward-only estimates.
    """
    _check_training_inputs(fixed, moving, mask_fixed, None)
    cfg = replace(cfg, cycle_enabled=False,
                  weights=replace(cfg.weights, beta=0.0))
    t_target = make_norm_transform(fixed, isotropic=True)
    t_source = make_norm_transform(moving, isotropic=True)
    w = cfg.weights
    order = w.required_order
    t0 = time.monotonic()

    net_f = init_siren(cfg.net.hidden_layers, cfg.net.width, cfg.net.w0,
                       make_rng(cfg.seed, ROLE_INIT_FORWARD))
    adam_f = AdamState.init(net_f)
    rng_f = make_rng(cfg.seed, ROLE_BATCH_FORWARD)

    metrics = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    breakdown = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            batch_f = sample_foreground(
                mask_fixed, cfg.batch_per_inr, rng_f, t_target, "target",
                provenance=f"seed={cfg.seed} role=batch-forward epoch={epoch}")
            ev_f = eval_spatial(net_f, batch_f, order=order, keep_cache=True)
            d_f, phibar_f = data_loss(fixed, moving, batch_f, ev_f,
                                      t_target, t_source)
            r_f, jacbar_f, hessbar_f = regularizer(ev_f, w)
            breakdown = total_loss(d_f, 0.0, r_f, 0.0, 0.0, 0.0, w)
            if not np.isfinite(breakdown.total):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}: {breakdown.to_dict()}",
                    epoch=epoch, breakdown=breakdown)
            grads_f, _ = param_gradients(
                net_f, ev_f, phibar=phibar_f,
                jacbar=None if jacbar_f is None else w.alpha * jacbar_f,
                hessbar=None if hessbar_f is None else w.alpha * hessbar_f)
            try:
                net_f, adam_f = adam_step(net_f, grads_f, adam_f, cfg.lr)
            except NumericalAbort as e:
                raise NumericalAbort(f"{e} at epoch {epoch}", epoch=epoch,
                                     breakdown=breakdown) from None
            if metrics is not None:
                metrics.write(_metrics_line(epoch, breakdown) + "\n")
            if progress is not None:
                progress(epoch, breakdown)
    finally:
        if metrics is not None:
            metrics.close()

    pair = InrPair(forward=net_f, backward=None, t_source=t_source,
                   t_target=t_target, config_hash=cfg.config_hash(),
                   seed=cfg.seed, final_loss=breakdown)
    if out_dir is not None:
        save_pair(pair, out_dir)
        _write_train_run_json(out_dir, cfg, time.monotonic() - t0, breakdown)
    return pair


def _write_train_run_json(out_dir, cfg: TrainConfig, wall_s: float,
                          breakdown: LossBreakdown | None) -> None:
    from . import __version__
    path = os.path.join(out_dir, "run.json")
    payload = {}
    if os.path.exists(path):
        with open(path) as f:
            payload = json.load(f)
    payload.update({
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "rng_algorithm": RNG_ALGORITHM,
        "backend": backend.active_backend(),
        "tool_version": __version__,
        "train_wall_time_s": wall_s,
        "final_loss": None if breakdown is None else breakdown.to_dict(),
    })
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def save_pair(pair: InrPair, out_dir: str | os.PathLike) -> None:
    """Write the pair checkpoint: pair.json + one net checkpoint per network."""
    os.makedirs(out_dir, exist_ok=True)
    save_siren(pair.forward, os.path.join(out_dir, "forward.json"),
               extra={"role": "forward", "seed": pair.seed,
                      "config_hash": pair.config_hash})
    nets = {"forward": "forward.json"}
    if pair.backward is not None:
        save_siren(pair.backward, os.path.join(out_dir, "backward.json"),
                   extra={"role": "backward", "seed": pair.seed,
                          "config_hash": pair.config_hash})
        nets["backward"] = "backward.json"
    manifest = {
        "format": PAIR_FORMAT,
        "nets": nets,
        "t_source": pair.t_source.to_dict(),
        "t_target": pair.t_target.to_dict(),
        "config_hash": pair.config_hash,
        "seed": pair.seed,
        "final_loss": None if pair.final_loss is None
        else pair.final_loss.to_dict(),
    }
    with open(os.path.join(out_dir, "pair.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_pair(out_dir: str | os.PathLike) -> InrPair:
    """Load a pair checkpoint; payload hashes are verified on the way in."""
    with open(os.path.join(out_dir, "pair.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != PAIR_FORMAT:
        raise ContractError(
            f"unexpected pair checkpoint format {manifest.get('format')!r}")
    forward, _ = load_siren(os.path.join(out_dir, manifest["nets"]["forward"]))
    backward = None
    if "backward" in manifest["nets"]:
        backward, _ = load_siren(
            os.path.join(out_dir, manifest["nets"]["backward"]))
    fl = manifest.get("final_loss")
    return InrPair(
        forward=forward, backward=backward,
        t_source=NormTransform.from_dict(manifest["t_source"]),
        t_target=NormTransform.from_dict(manifest["t_target"]),
        config_hash=manifest["config_hash"], seed=manifest["seed"],
        final_loss=None if fl is None else LossBreakdown(**fl))
