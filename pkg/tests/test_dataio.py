"""Dataset persistence tests: blob format, manifests, truth separation."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

import mmgploc.acoustic_sim as sim
import mmgploc.dataio as dio
import mmgploc.rtf_features as rf


def small_scene():
    return sim.SceneConfig(
        room_dims=(4.0, 5.0, 3.0),
        mic_positions=[[[0.8, 0.9, 1.2], [0.8, 1.1, 1.2]]],
        t60=0.0, snr_db=float("inf"), sample_rate=16000.0)


def make_records(scene, n=3):
    rng = np.random.default_rng(0)
    roles = ["labeled", "unlabeled", "test"]
    out = []
    for i in range(n):
        rec = sim.MeasurementRecord(
            signals=rng.standard_normal((2, 50)),
            sample_rate=scene.sample_rate, num_nodes=1,
            true_position=np.array([1.0 + i, 2.0, 1.5]),
            record_id=f"{roles[i % 3]}_{i:04d}")
        out.append((roles[i % 3], rec))
    return out


def test_blob_roundtrip_float(tmp_path):
    arr = np.random.default_rng(1).standard_normal((3, 5))
    path = tmp_path / "x.f64"
    dio.write_blob(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == dio.BLOB_MAGIC
    assert struct.unpack("<3I", raw[4:16]) == (dio.BLOB_VERSION, 1, 15)
    assert len(raw) == 16 + 15 * 8
    np.testing.assert_array_equal(dio.read_blob(path).reshape(3, 5), arr)


def test_blob_roundtrip_complex(tmp_path):
    rng = np.random.default_rng(2)
    arr = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
    path = tmp_path / "x.c64"
    dio.write_blob(path, arr)
    assert struct.unpack("<3I", path.read_bytes()[4:16]) == (dio.BLOB_VERSION, 2, 8)
    np.testing.assert_array_equal(dio.read_blob(path).reshape(2, 4), arr)


def test_blob_errors(tmp_path):
    path = tmp_path / "x.f64"
    dio.write_blob(path, np.arange(4.0))
    raw = path.read_bytes()
    (tmp_path / "magic.f64").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        dio.read_blob(tmp_path / "magic.f64")
    (tmp_path / "ver.f64").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(ValueError, match="version"):
        dio.read_blob(tmp_path / "ver.f64")
    (tmp_path / "code.f64").write_bytes(raw[:8] + struct.pack("<I", 7) + raw[12:])
    with pytest.raises(ValueError, match="dtype code"):
        dio.read_blob(tmp_path / "code.f64")
    (tmp_path / "short.f64").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="size"):
        dio.read_blob(tmp_path / "short.f64")
    (tmp_path / "long.f64").write_bytes(raw + b"\0" * 4)
    with pytest.raises(ValueError, match="size"):
        dio.read_blob(tmp_path / "long.f64")
    with pytest.raises(ValueError, match="dtype"):
        dio.write_blob(tmp_path / "bad.blob", np.arange(4))


def test_config_hash_canonical():
    a = {"x": 1, "y": [1.5, 2.5], "z": "s"}
    b = {"z": "s", "y": [1.5, 2.5], "x": 1}
    assert dio.config_hash(a) == dio.config_hash(b)
    assert dio.config_hash({**a, "x": 2}) != dio.config_hash(a)
    with pytest.raises(ValueError):
        dio.config_hash({"x": float("nan")})


def test_scene_dict_roundtrip():
    scene = small_scene()
    again = dio.scene_from_dict(dio.scene_to_dict(scene))
    np.testing.assert_array_equal(again.room_dims, scene.room_dims)
    np.testing.assert_array_equal(again.mic_positions, scene.mic_positions)
    assert again.snr_db == scene.snr_db and again.t60 == scene.t60
    finite = sim.SceneConfig(room_dims=(4.0, 5.0, 3.0),
                             mic_positions=scene.mic_positions,
                             t60=0.3, snr_db=20.0, sample_rate=8000.0,
                             max_reflection_order=5)
    again = dio.scene_from_dict(dio.scene_to_dict(finite))
    assert again.snr_db == 20.0 and again.max_reflection_order == 5


def test_spectral_dict_roundtrip():
    cfg = rf.SpectralConfig(sample_rate=16000.0)
    again = dio.spectral_from_dict(dio.spectral_to_dict(cfg))
    assert again == cfg


def test_dataset_truth_separation(tmp_path):
    scene = small_scene()
    path = dio.write_dataset(tmp_path / "ds", scene, make_records(scene),
                             config_hash="abc123")
    manifest = dio.load_manifest(path)
    assert manifest["config_hash"] == "abc123"
    by_role = {r["role"]: r for r in manifest["records"]}
    assert set(by_role) == {"labeled", "unlabeled", "test"}
    assert by_role["labeled"]["true_position"] == [1.0, 2.0, 1.5]
    assert by_role["unlabeled"]["true_position"] is None
    assert by_role["test"]["true_position"] is None

    evaluation = dio.load_manifest(Path(path).parent / dio.EVALUATION_NAME)
    ev = {r["role"]: r for r in evaluation["records"]}
    assert ev["test"]["true_position"] == [3.0, 2.0, 1.5]
    assert ev["unlabeled"]["true_position"] is None


def test_signal_roundtrip_and_feature_attach(tmp_path):
    scene = small_scene()
    records = make_records(scene)
    dio.write_dataset(tmp_path / "ds", scene, records, spectral=rf.SpectralConfig())
    manifest = dio.load_manifest(tmp_path / "ds")
    entry = manifest["records"][0]
    np.testing.assert_array_equal(
        dio.read_record_signals(manifest, entry), records[0][1].signals)

    with pytest.raises(ValueError, match="features"):
        dio.read_record_features(manifest, entry)

    rng = np.random.default_rng(3)
    feats = {r["id"]: rng.standard_normal((1, 7)) + 1j * rng.standard_normal((1, 7))
             for r in manifest["records"]}
    dio.attach_features(tmp_path / "ds", feats)
    manifest = dio.load_manifest(tmp_path / "ds")
    for rec in manifest["records"]:
        np.testing.assert_array_equal(
            dio.read_record_features(manifest, rec), feats[rec["id"]])
    evaluation = dio.load_manifest(tmp_path / "ds" / dio.EVALUATION_NAME)
    assert all(r["features"] is not None for r in evaluation["records"])

    with pytest.raises(ValueError, match="unknown record ids"):
        dio.attach_features(tmp_path / "ds", {"nope_0000": feats[entry["id"]]})


def test_manifest_validation(tmp_path):
    scene = small_scene()
    records = make_records(scene)
    records[1][1].record_id = records[0][1].record_id
    with pytest.raises(ValueError, match="duplicate"):
        dio.write_dataset(tmp_path / "dup", scene, records)

    path = Path(dio.write_dataset(tmp_path / "ok", scene, make_records(scene)))
    doc = json.loads(path.read_text())
    doc["records"][0]["role"] = "mystery"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="role"):
        dio.load_manifest(path)

    doc["records"][0]["role"] = "labeled"
    doc["records"][0]["true_position"] = None
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="lacks a position"):
        dio.load_manifest(path)

    doc["format_version"] = 9
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="manifest version"):
        dio.load_manifest(path)

    with pytest.raises(FileNotFoundError):
        dio.load_manifest(tmp_path / "missing")


def test_generate_dataset_is_deterministic(tmp_path):
    scene = small_scene()
    labeled = sim.LabeledSpec(positions=[[1.0, 2.0, 1.5], [2.0, 3.0, 1.5]],
                              duration_s=0.05, seed=10)
    unlabeled = sim.UnlabeledSpec(positions=[[1.5, 2.5, 1.5]],
                                  duration_s=0.05, seed=11)
    test = sim.TestSpec(positions=[[2.5, 2.0, 1.5]], duration_s=0.05, seed=12)
    paths = []
    for name in ("a", "b"):
        paths.append(sim.generate_dataset(scene, labeled, unlabeled, test,
                                          tmp_path / name, config_hash="h"))
    a, b = (Path(p).parent for p in paths)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    manifest = dio.load_manifest(a)
    assert [r["id"] for r in manifest["records"]] == [
        "labeled_0000", "labeled_0001", "unlabeled_0000", "test_0000"]
