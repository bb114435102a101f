"""Trainer behavior: convergence on small problems, determinism, artifacts."""

import json
import os

import numpy as np
import pytest

from ccreg.errors import ContractError, DomainError, NumericalAbort
from ccreg.inference import cc_transform
from ccreg.losses import LossWeights
from ccreg.phantom import generate_phantom
from ccreg.training import (InrPair, NetSpec, TrainConfig, load_pair,
                            save_pair, train_pair, train_single)
from ccreg.volume_io import Volume3D


def tiny_cfg(**kw):
    base = dict(epochs=20, lr=3e-4, batch_per_inr=150,
                net=NetSpec(hidden_layers=1, width=12), seed=0)
    base.update(kw)
    return TrainConfig(**base)


def small_problem(amp=0.0, size=16, seed=3):
    ph = generate_phantom("sinusoid", size, amp, seed)
    return ph.fixed, ph.moving, ph.mask


def read_metrics(out_dir):
    with open(os.path.join(out_dir, "metrics.jsonl")) as f:
        return [json.loads(line) for line in f]


def test_self_registration_reaches_near_perfect_data_term():
    fixed, moving, mask = small_problem(amp=0.0)
    cfg = tiny_cfg(epochs=100, batch_per_inr=200)
    pair = train_pair(fixed, moving, mask, mask, cfg)
    bd = pair.final_loss
    assert bd.data_f < -0.97
    assert bd.data_b < -0.97
    assert bd.total < -1.9


def test_training_improves_loss_on_real_deformation():
    fixed, moving, mask = small_problem(amp=1.5, size=20, seed=4)
    cfg = tiny_cfg(epochs=150, batch_per_inr=250,
                   net=NetSpec(hidden_layers=2, width=16), lr=4e-4)
    history = []
    train_pair(fixed, moving, mask, mask, cfg,
               progress=lambda e, bd: history.append(bd.total))
    k = max(1, len(history) // 10)
    assert np.median(history[-k:]) < np.median(history[:k])
    assert history[-1] < history[0]


def test_training_is_bit_deterministic(tmp_path):
    fixed, moving, mask = small_problem()
    cfg = tiny_cfg()
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        train_pair(fixed, moving, mask, mask, cfg, out_dir=d)
    for name in ("forward.json", "forward.bin", "backward.json",
                 "backward.bin", "metrics.jsonl", "pair.json"):
        fa, fb = dirs[0] / name, dirs[1] / name
        assert fa.exists(), name
        assert fa.read_bytes() == fb.read_bytes(), name


def test_cycle_terms_active_and_both_nets_move():
    fixed, moving, mask = small_problem()
    cfg = tiny_cfg(epochs=5)
    seen = []
    pair = train_pair(fixed, moving, mask, mask, cfg,
                      progress=lambda e, bd: seen.append(bd))
    assert len(seen) == 5
    for bd in seen:
        assert bd.cycle_fb > 0.0
        assert bd.cycle_bf > 0.0
    from ccreg.rng import ROLE_INIT_BACKWARD, ROLE_INIT_FORWARD, make_rng
    from ccreg.siren import init_siren
    init_f = init_siren(cfg.net.hidden_layers, cfg.net.width, cfg.net.w0,
                        make_rng(cfg.seed, ROLE_INIT_FORWARD))
    init_b = init_siren(cfg.net.hidden_layers, cfg.net.width, cfg.net.w0,
                        make_rng(cfg.seed, ROLE_INIT_BACKWARD))
    assert any(not np.array_equal(a, b) for a, b in
               zip(pair.forward.weights, init_f.weights))
    assert any(not np.array_equal(a, b) for a, b in
               zip(pair.backward.weights, init_b.weights))


def test_metrics_file_is_valid_jsonl(tmp_path):
    fixed, moving, mask = small_problem()
    cfg = tiny_cfg(epochs=8)
    train_pair(fixed, moving, mask, mask, cfg, out_dir=tmp_path)
    rows = read_metrics(tmp_path)
    assert [r["epoch"] for r in rows] == list(range(1, 9))
    want_keys = {"epoch", "data_f", "data_b", "reg_f", "reg_b",
                 "cycle_fb", "cycle_bf", "total"}
    for r in rows:
        assert set(r) == want_keys
        assert np.isfinite(r["total"])


def test_checkpoint_roundtrip_preserves_everything(tmp_path):
    fixed, moving, mask = small_problem()
    cfg = tiny_cfg(epochs=6)
    pair = train_pair(fixed, moving, mask, mask, cfg, out_dir=tmp_path)
    loaded = load_pair(tmp_path)
    for a, b in zip(pair.forward.weights + pair.forward.biases,
                    loaded.forward.weights + loaded.forward.biases):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(pair.backward.weights + pair.backward.biases,
                    loaded.backward.weights + loaded.backward.biases):
        assert a.tobytes() == b.tobytes()
    assert loaded.config_hash == cfg.config_hash()
    assert loaded.seed == cfg.seed
    assert loaded.t_source.to_dict() == pair.t_source.to_dict()
    assert loaded.t_target.to_dict() == pair.t_target.to_dict()
    assert loaded.final_loss.to_dict() == pair.final_loss.to_dict()

    pts = np.random.default_rng(5).uniform(-0.8, 0.8, size=(20, 3))
    before = cc_transform(pair, pts)
    after = cc_transform(loaded, pts)
    assert before.mid.tobytes() == after.mid.tobytes()
    assert before.uncertainty_mm.tobytes() == after.uncertainty_mm.tobytes()


def test_single_network_training_forces_beta_zero(tmp_path):
    fixed, moving, mask = small_problem()
    cfg = tiny_cfg(epochs=5, weights=LossWeights(beta=0.5))
    pair = train_single(fixed, moving, mask, cfg, out_dir=tmp_path)
    assert pair.backward is None
    with open(tmp_path / "run.json") as f:
        run = json.load(f)
    assert run["config"]["weights"]["beta"] == 0.0
    assert run["config"]["cycle_enabled"] is False
    for r in read_metrics(tmp_path):
        assert r["cycle_fb"] == 0.0 and r["cycle_bf"] == 0.0
        assert r["data_b"] == 0.0 and r["reg_b"] == 0.0
    manifest = json.loads((tmp_path / "pair.json").read_text())
    assert "backward" not in manifest["nets"]
    assert not (tmp_path / "backward.json").exists()


def test_train_run_json_reports_config_and_status(tmp_path):
    fixed, moving, mask = small_problem()
    cfg = tiny_cfg(epochs=4)
    train_pair(fixed, moving, mask, mask, cfg, out_dir=tmp_path)
    with open(tmp_path / "run.json") as f:
        run = json.load(f)
    assert run["config"] == cfg.to_dict()
    assert run["config_hash"] == cfg.config_hash()
    assert run["seed"] == cfg.seed
    assert run["train_wall_time_s"] >= 0
    assert run["rng_algorithm"] == "philox4x64-10/numpy"
    assert run["backend"] in ("python", "cython")
    assert np.isfinite(run["final_loss"]["total"])


def test_nan_intensities_abort_with_epoch(tmp_path):
    fixed, moving, mask = small_problem()
    bad = fixed.data.copy()
    bad.setflags(write=True)
    bad[bad.shape[0] // 2] = np.nan
    nan_fixed = Volume3D(dims=fixed.dims, spacing=fixed.spacing,
                         origin=fixed.origin, data=bad, dtype="float32")
    cfg = tiny_cfg(epochs=5)
    with pytest.raises(NumericalAbort) as exc:
        train_pair(nan_fixed, moving, mask, mask, cfg, out_dir=tmp_path)
    assert exc.value.epoch == 1
    assert (tmp_path / "metrics.jsonl").exists()


def test_training_input_validation():
    fixed, moving, mask = small_problem()
    cfg = tiny_cfg(epochs=1)
    zeros = Volume3D(dims=mask.dims, spacing=mask.spacing, origin=mask.origin,
                     data=np.zeros_like(mask.data), dtype="uint8")
    with pytest.raises(DomainError):
        train_pair(fixed, moving, zeros, mask, cfg)
    small = Volume3D(dims=(4, 4, 4), spacing=(1, 1, 1), origin=(0, 0, 0),
                     data=np.ones((4, 4, 4), dtype=np.uint8), dtype="uint8")
    with pytest.raises(ContractError):
        train_pair(fixed, moving, small, mask, cfg)
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)
    with pytest.raises(ContractError):
        TrainConfig(lr=0.0)


def test_config_dict_roundtrip_and_hash_stability():
    cfg = tiny_cfg(weights=LossWeights(alpha=10.0, reg_kind="bending"))
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()
    with pytest.raises(DomainError):
        TrainConfig.from_dict({"optimizer": "sgd"})
    with pytest.raises(DomainError):
        TrainConfig.from_dict({"net": {"depth": 3}})


def test_pair_without_backward_roundtrip(tmp_path):
    fixed, moving, mask = small_problem()
    pair = train_single(fixed, moving, mask, tiny_cfg(epochs=3),
                        out_dir=tmp_path)
    loaded = load_pair(tmp_path)
    assert loaded.backward is None
    assert isinstance(loaded, InrPair)
    save_pair(loaded, tmp_path)
    again = load_pair(tmp_path)
    assert again.forward.weights[0].tobytes() == \
        pair.forward.weights[0].tobytes()
