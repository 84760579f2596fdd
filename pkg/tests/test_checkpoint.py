"""Checkpoint container: byte-exact roundtrips and corruption detection."""

import numpy as np
import pytest

from poetx.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from poetx.errors import CheckpointError, ShapeError


def _sample_tensors():
    rng = np.random.Generator(np.random.Philox(key=np.array([21, 0], dtype=np.uint64)))
    return {
        "weights/f64": rng.normal(size=(5, 3)),
        "weights/f32": rng.normal(size=(2, 4, 3)).astype(np.float32),
        "codes": rng.integers(-128, 128, size=(6, 6)).astype(np.int8),
        "perm": rng.permutation(16).astype(np.uint32),
        "progress/step": np.array(1234, dtype=np.uint32),
        "progress/drift": np.float64(0.00125),
    }


def test_roundtrip_is_byte_exact_for_every_dtype(tmp_path):
    path = tmp_path / "a.ckpt"
    tensors = _sample_tensors()
    save_checkpoint(str(path), tensors, config_text="seed=1\n")
    back, cfg = load_checkpoint(str(path))
    assert cfg == "seed=1\n"
    assert list(back) == list(tensors)  # insertion order preserved
    for name, a in tensors.items():
        b = back[name]
        a = np.asarray(a)
        assert b.dtype == a.dtype, name
        assert b.shape == a.shape, name
        assert a.tobytes() == b.tobytes(), name


def test_scalars_come_back_rank_zero(tmp_path):
    path = tmp_path / "s.ckpt"
    save_checkpoint(str(path), {"x": np.float64(3.5)}, "")
    back, _ = load_checkpoint(str(path))
    assert back["x"].shape == ()
    assert back["x"][()] == 3.5


def test_config_text_roundtrips_unicode(tmp_path):
    path = tmp_path / "u.ckpt"
    text = "out_dir=läufe/μ-run\ndata_path=数据.bin\n"
    save_checkpoint(str(path), {}, text)
    _, cfg = load_checkpoint(str(path))
    assert cfg == text


def test_loaded_arrays_are_writable_copies(tmp_path):
    path = tmp_path / "w.ckpt"
    save_checkpoint(str(path), {"a": np.arange(4.0)}, "")
    back, _ = load_checkpoint(str(path))
    back["a"][0] = -1.0  # frombuffer views would be read-only
    assert back["a"][0] == -1.0


def test_parent_directories_created(tmp_path):
    path = tmp_path / "deep" / "nested" / "c.ckpt"
    save_checkpoint(str(path), {"a": np.zeros(1)}, "")
    assert path.is_file()


def test_unsupported_dtype_rejected_at_save(tmp_path):
    with pytest.raises(ShapeError):
        save_checkpoint(str(tmp_path / "bad.ckpt"), {"c": np.zeros(3, dtype=np.complex128)}, "")
    with pytest.raises(ShapeError):
        save_checkpoint(str(tmp_path / "bad2.ckpt"), {"h": np.zeros(3, dtype=np.float16)}, "")


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), {"a": np.zeros(2)}, "")
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(path))


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(str(path), {"a": np.zeros(2)}, "")
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC)] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(path))


def test_truncation_detected_at_any_cut(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(str(path), _sample_tensors(), "seed=1\n")
    blob = path.read_bytes()
    for cut in (5, len(blob) // 3, len(blob) - 1):
        short = tmp_path / f"cut{cut}.ckpt"
        short.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(short))


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "g.ckpt"
    save_checkpoint(str(path), {"a": np.zeros(2)}, "")
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(str(path))


def test_missing_file_raises(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "never.ckpt"))


def test_empty_tensor_dict_roundtrips(tmp_path):
    path = tmp_path / "e.ckpt"
    save_checkpoint(str(path), {}, "task=coverage\n")
    back, cfg = load_checkpoint(str(path))
    assert back == {}
    assert cfg == "task=coverage\n"


def test_zero_length_tensor_roundtrips(tmp_path):
    path = tmp_path / "z.ckpt"
    save_checkpoint(str(path), {"empty": np.zeros((0, 4), dtype=np.float32)}, "")
    back, _ = load_checkpoint(str(path))
    assert back["empty"].shape == (0, 4)
    assert back["empty"].dtype == np.float32
