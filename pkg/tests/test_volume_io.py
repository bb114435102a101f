"""Volume and landmark file format tests: byte-exact round trips and the
coordinate conversions everything downstream relies on."""

import json

import numpy as np
import pytest

from ccreg.errors import ContractError, DomainError, VolumeFormatError
from ccreg.volume_io import (LandmarkSet, Volume3D, load_landmarks,
                             load_volume, require_binary_mask, save_landmarks,
                             save_volume)
from conftest import random_volume


def test_header_and_payload_size(tmp_path):
    # 2x2x1 float32 -> 4 voxels, 16-byte payload
    header = {"dims": [2, 2, 1], "spacing": [1, 1, 1], "origin": [0, 0, 0],
              "dtype": "float32", "data": "v.raw"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(
        np.arange(4, dtype="<f4").tobytes())
    v = load_volume(tmp_path / "v.json")
    assert v.dims == (2, 2, 1)
    assert v.data.size == 4
    assert v.data.dtype == np.dtype("<f4")


def test_short_payload_is_an_error(tmp_path):
    header = {"dims": [2, 2, 1], "spacing": [1, 1, 1], "origin": [0, 0, 0],
              "dtype": "float32", "data": "v.raw"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(b"\x00" * 15)
    with pytest.raises(IOError, match="expected 16"):
        load_volume(tmp_path / "v.json")


def test_zero_volume_payload_bytes(tmp_path):
    v = Volume3D(dims=(1, 1, 1), spacing=(1, 1, 1), origin=(0, 0, 0),
                 data=np.zeros((1, 1, 1), dtype=np.float32), dtype="float32")
    save_volume(v, tmp_path / "z.json")
    assert (tmp_path / "z.raw").read_bytes() == b"\x00\x00\x00\x00"


def test_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    v = random_volume(rng)
    save_volume(v, tmp_path / "a.json")
    save_volume(v, tmp_path / "b.json")
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
    ha = json.loads((tmp_path / "a.json").read_text())
    hb = json.loads((tmp_path / "b.json").read_text())
    ha.pop("data"), hb.pop("data")
    assert ha == hb


def test_round_trip_many_random_volumes(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(100):
        dims = tuple(int(d) for d in rng.integers(1, 6, size=3))
        dtype = "uint8" if i % 3 == 0 else "float32"
        spacing = tuple(float(s) for s in rng.uniform(0.3, 3.0, size=3))
        origin = tuple(float(o) for o in rng.normal(0, 10, size=3))
        v = random_volume(rng, dims=dims, spacing=spacing, origin=origin,
                          dtype=dtype)
        p = tmp_path / f"v{i}.json"
        save_volume(v, p)
        w = load_volume(p)
        assert w.dims == v.dims
        assert w.spacing == v.spacing
        assert w.origin == v.origin
        assert w.dtype == v.dtype
        assert w.data.tobytes() == v.data.tobytes()


def test_voxel_world_conversion():
    v = Volume3D(dims=(16, 16, 8), spacing=(0.97, 0.97, 2.5),
                 origin=(0, 0, 0), data=np.zeros((8, 16, 16), np.float32),
                 dtype="float32")
    assert np.allclose(v.voxel_to_world([[0, 0, 0]]), [[0, 0, 0]])
    got = v.voxel_to_world([[10, 10, 4]])
    assert np.allclose(got, [[9.7, 9.7, 10.0]], atol=1e-12)


def test_voxel_world_round_trip():
    rng = np.random.default_rng(2)
    v = Volume3D(dims=(16, 16, 8), spacing=(0.8, 1.1, 2.5),
                 origin=(-3.0, 4.0, 10.0), data=np.zeros((8, 16, 16), np.float32),
                 dtype="float32")
    idx = rng.uniform(0, 7, size=(1000, 3))
    back = v.world_to_voxel(v.voxel_to_world(idx))
    assert np.abs(back - idx).max() < 1e-9


def test_extent():
    v = Volume3D(dims=(16, 16, 8), spacing=(2.0, 1.0, 0.5), origin=(0, 0, 0),
                 data=np.zeros((8, 16, 16), np.float32), dtype="float32")
    assert v.extent_mm == (32.0, 16.0, 4.0)


def test_volume_data_is_read_only():
    v = random_volume(np.random.default_rng(3))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_dims_shape_mismatch_rejected():
    with pytest.raises(ContractError):
        Volume3D(dims=(2, 3, 4), spacing=(1, 1, 1), origin=(0, 0, 0),
                 data=np.zeros((2, 3, 4), np.float32), dtype="float32")


def test_binary_mask_requirements():
    rng = np.random.default_rng(4)
    ok = Volume3D(dims=(3, 3, 3), spacing=(1, 1, 1), origin=(0, 0, 0),
                  data=rng.integers(0, 2, (3, 3, 3)).astype(np.uint8),
                  dtype="uint8")
    require_binary_mask(ok)
    bad_val = Volume3D(dims=(3, 3, 3), spacing=(1, 1, 1), origin=(0, 0, 0),
                       data=np.full((3, 3, 3), 7, np.uint8), dtype="uint8")
    with pytest.raises(ContractError):
        require_binary_mask(bad_val)
    not_uint8 = random_volume(rng, dims=(3, 3, 3))
    with pytest.raises(ContractError):
        require_binary_mask(not_uint8)


def test_landmarks_world_mode_identity(tmp_path):
    p = tmp_path / "lm.csv"
    p.write_text("# x,y,z\n1.5,2.5,3.5\n")
    lm = load_landmarks(p, mode="world-mm")
    assert np.allclose(lm.points, [[1.5, 2.5, 3.5]])


def test_landmarks_voxel_mode_conversion(tmp_path):
    v = Volume3D(dims=(16, 16, 8), spacing=(0.97, 0.97, 2.5),
                 origin=(0, 0, 0), data=np.zeros((8, 16, 16), np.float32),
                 dtype="float32")
    p = tmp_path / "lm.csv"
    p.write_text("10,10,4\n")
    lm = load_landmarks(p, mode="voxel-index", ref=v)
    assert np.allclose(lm.points, [[9.7, 9.7, 10.0]], atol=1e-12)


def test_landmarks_round_trip_with_extra_column(tmp_path):
    rng = np.random.default_rng(5)
    pts = rng.normal(0, 20, size=(17, 3))
    lm = LandmarkSet(points=pts)
    p = tmp_path / "lm.csv"
    save_landmarks(lm, p, extra_columns={"uncertainty_mm": rng.uniform(0, 2, 17)})
    back = load_landmarks(p)
    assert np.abs(back.points - pts).max() == 0.0  # repr round-trips float64


def test_landmarks_bad_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n")
    with pytest.raises(DomainError):
        load_landmarks(p)
    p.write_text("a,b,c\n")
    with pytest.raises(DomainError):
        load_landmarks(p)
    with pytest.raises(ContractError):
        load_landmarks(p, mode="voxel-index")  # no reference volume


def test_unknown_dtype_rejected(tmp_path):
    header = {"dims": [1, 1, 1], "spacing": [1, 1, 1], "origin": [0, 0, 0],
              "dtype": "int64", "data": "v.raw"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(b"\x00" * 8)
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v.json")


def test_payload_hash_guards_against_corruption(tmp_path):
    rng = np.random.default_rng(33)
    v = random_volume(rng, (5, 4, 3))
    save_volume(v, tmp_path / "v.json")
    raw = bytearray((tmp_path / "v.raw").read_bytes())
    raw[7] ^= 0x01
    (tmp_path / "v.raw").write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError, match="sha256"):
        load_volume(tmp_path / "v.json")


def test_header_without_hash_loads_leniently(tmp_path):
    header = {"dims": [2, 1, 1], "spacing": [1, 1, 1], "origin": [0, 0, 0],
              "dtype": "uint8", "data": "v.raw"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(b"\x05\x09")
    v = load_volume(tmp_path / "v.json")
    assert v.data.reshape(-1).tolist() == [5, 9]
