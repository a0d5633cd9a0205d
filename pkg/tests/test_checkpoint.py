import numpy as np
import pytest

from maskedmotion.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def test_roundtrip_bit_exact(tmp_path):
    arrays = {
        "w": np.arange(12, dtype=np.float32).reshape(3, 4) * 0.1,
        "counts": np.array([5, 0, 7], dtype=np.int64),
        "scalarish": np.array([1.5], dtype=np.float32),
    }
    path = tmp_path / "m.bin"
    save_checkpoint(path, "MMMVQ1", {"cfg": {"K": 3}, "note": "x"}, arrays)
    config, loaded = load_checkpoint(path, "MMMVQ1")
    assert config == {"cfg": {"K": 3}, "note": "x"}
    for k, arr in arrays.items():
        assert loaded[k].dtype == arr.dtype
        assert np.array_equal(loaded[k], arr)
        assert loaded[k].tobytes() == arr.tobytes()


def test_save_is_deterministic(tmp_path):
    arrays = {"a": np.ones((2, 2), dtype=np.float32)}
    save_checkpoint(tmp_path / "a.bin", "MMMTF1", {"v": 1}, arrays)
    save_checkpoint(tmp_path / "b.bin", "MMMTF1", {"v": 1}, arrays)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_magic_and_version_checked(tmp_path):
    path = tmp_path / "m.bin"
    save_checkpoint(path, "MMMVQ1", {}, {"a": np.zeros(1, dtype=np.float32)})
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "MMMTF1")
    data = bytearray(path.read_bytes())
    data[6] = 99  # version byte
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "MMMVQ1")


def test_missing_and_truncated_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.bin", "MMMVQ1")
    (tmp_path / "short.bin").write_bytes(b"MMM")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.bin", "MMMVQ1")


def test_bad_magic_length_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.bin", "TOOLONGMAGIC", {}, {})
