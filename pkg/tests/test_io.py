import numpy as np
import pytest

from goldfinch.io import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from goldfinch.model import Model
from goldfinch.tensor import DimensionError

from conftest import jittered, small_cfg


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_roundtrip_is_byte_identical(tmp_path, dtype):
    m = jittered(small_cfg(dtype=dtype))
    save_checkpoint(tmp_path / "a.gfck", m)
    back = load_checkpoint(tmp_path / "a.gfck")
    save_checkpoint(tmp_path / "b.gfck", back)
    assert (tmp_path / "a.gfck").read_bytes() == (tmp_path / "b.gfck").read_bytes()
    assert back.cfg == m.cfg
    ids = np.random.default_rng(0).integers(0, 50, size=(1, 11))
    np.testing.assert_array_equal(back.forward(ids).data, m.forward(ids).data)


def test_header_layout():
    blob = checkpoint_bytes(Model(small_cfg()))
    assert blob[:4] == b"GFCK"
    assert int.from_bytes(blob[4:8], "little") == 1
    cfg, tensors = parse_checkpoint(blob)
    assert set(tensors) == set(Model(cfg, meta=True).store.names())


def test_load_into_wrong_width_names_tensor(tmp_path):
    save_checkpoint(tmp_path / "m.gfck", Model(small_cfg()))
    other = Model(small_cfg(d_model=48))
    with pytest.raises(DimensionError, match="emb"):
        load_checkpoint(tmp_path / "m.gfck", other)


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "x")
