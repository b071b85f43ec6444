import struct

import numpy as np
import pytest

from rirkit import checkpoint as ck
from rirkit.config import RunConfig
from rirkit.data import NormStats
from rirkit.errors import ConfigError, FormatError
from rirkit.model import build_network
from rirkit.train import model_from_checkpoint


def _ckpt(kind="rir", seed=0):
    model = build_network("desk-b1-l2-f4", kind, rng=seed)
    cfg = RunConfig("train", arch="desk-b1-l2-f4", kind=kind, dataset="synthetic", seed=seed)
    stats = NormStats(np.array([0.1, 0.2, 0.3], np.float32), np.array([1.0, 2.0, 3.0], np.float32))
    return model, cfg, ck.from_model(model, cfg.snapshot(), {"epoch": 3}, stats)


def test_header_layout():
    _, _, c = _ckpt()
    b = ck.to_bytes(c)
    assert b[:4] == b"RIR1" and b[4] == 1
    n = struct.unpack("<I", b[5:9])[0]
    assert b[9 : 9 + n].decode().startswith('{"config":')


def test_save_load_save_bytes_identical(tmp_path):
    _, _, c = _ckpt()
    ck.save(tmp_path / "a.rir", c)
    again = ck.load(tmp_path / "a.rir")
    ck.save(tmp_path / "b.rir", again)
    assert (tmp_path / "a.rir").read_bytes() == (tmp_path / "b.rir").read_bytes()
    assert again.header == c.header and again.masks == c.masks


def test_every_parameter_once_with_buffers_and_masks():
    model, _, c = _ckpt()
    back = ck.from_bytes(ck.to_bytes(c))
    names = list(back.tensors)
    assert len(names) == len(set(names))
    for name, arr in model.state().items():
        np.testing.assert_array_equal(back.tensors[name], arr)
    assert any(n.endswith("running_var") for n in names)
    assert {k: (v["n_r"], v["k"]) for k, v in back.masks.items()} == model.masks
    assert set(back.model_state()) == set(model.state())


def test_payload_is_little_endian_f32():
    model = _ckpt()[0]
    model.params["head.bias"][...] = np.arange(10, dtype=np.float32) + 0.5
    b = ck.to_bytes(ck.from_model(model, {}, {}))
    assert (np.arange(10, dtype="<f4") + 0.5).tobytes() in b


def test_reloaded_model_predicts_identically(rng):
    model, _, c = _ckpt(seed=3)
    model.forward(rng.standard_normal((4, 3, 32, 32)).astype(np.float32), "train")  # move BN stats
    c = ck.from_model(model, c.config, {}, None)
    cfg, clone, stats = model_from_checkpoint(ck.from_bytes(ck.to_bytes(c)))
    x = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(clone.forward(x), model.forward(x))
    assert cfg.seed == 3 and stats is None


def test_snapshot_excludes_local_paths():
    cfg = RunConfig("train", data_path="/secret/cifar", out="/tmp/x")
    snap = cfg.snapshot()
    assert "data_path" not in snap and "out" not in snap
    back = RunConfig.from_dict(snap, data_path="/other", out="o")
    assert back.data_path == "/other" and back.arch == cfg.arch
    with pytest.raises(ConfigError):
        RunConfig("train", kind="densenet")


@pytest.mark.parametrize("cut", [0, 3, 7, 20, -1])
def test_truncation_is_format_error(cut):
    b = ck.to_bytes(_ckpt()[2])
    with pytest.raises(FormatError):
        ck.from_bytes(b[:cut] if cut >= 0 else b[:-1])


def test_corruptions():
    b = ck.to_bytes(_ckpt()[2])
    with pytest.raises(FormatError, match="magic"):
        ck.from_bytes(b"RIR2" + b[4:])
    with pytest.raises(FormatError, match="version"):
        ck.from_bytes(b[:4] + bytes([9]) + b[5:])
    with pytest.raises(FormatError, match="trailing"):
        ck.from_bytes(b + b"\0")


def test_duplicate_entry_rejected():
    c = ck.Checkpoint({}, {}, {"a": np.zeros(2, np.float32)})
    b = ck.to_bytes(c)
    # bump the count to 2 and repeat the entry
    entry = b[-(4 + 1 + 4 + 4 + 8):]
    dup = b[: -len(entry) - 4] + struct.pack("<I", 2) + entry + entry
    with pytest.raises(FormatError, match="duplicate"):
        ck.from_bytes(dup)
