import struct
from dataclasses import replace

import numpy as np
import pytest

from cssr.checkpoint import MAGIC, CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from cssr.train import build_model, gaussian2d_preset, image_preset


def test_save_load_save_is_byte_identical(tmp_path, gaussian_run):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(gaussian_run["model"], gaussian_run["stats"], p1, gaussian_run["config"], {"note": "x"})
    ck = load_checkpoint(p1)
    save_checkpoint(ck.model, ck.stats, p2, ck.config, ck.meta)
    assert p1.read_bytes() == p2.read_bytes()
    assert ck.meta == {"note": "x"}


def test_reload_reproduces_tensors_and_stats(tmp_path, gaussian_run):
    path = save_checkpoint(gaussian_run["model"], gaussian_run["stats"], tmp_path / "m.ckpt", gaussian_run["config"])
    ck = load_checkpoint(path, expected_config=gaussian_run["config"])
    for k, v in gaussian_run["model"].graph.state().items():
        assert np.array_equal(v, ck.model.graph.state()[k])
    s, t = gaussian_run["stats"], ck.stats
    assert np.array_equal(s.gram_templates, t.gram_templates) and np.array_equal(s.mu_tilde, t.mu_tilde)
    assert (s.means, s.stds, s.threshold, s.weights, s.gram_power) == (t.means, t.stds, t.threshold, t.weights,
                                                                          t.gram_power)


def test_checkpoint_without_stats(tmp_path):
    cfg = image_preset("linear", 6)
    path = save_checkpoint(build_model(cfg), None, tmp_path / "l.ckpt", cfg)
    assert load_checkpoint(path).stats is None


def test_header_layout(tmp_path):
    cfg = gaussian2d_preset()
    buf = save_checkpoint(build_model(cfg), None, tmp_path / "h.ckpt", cfg).read_bytes()
    magic, version, total = struct.unpack("<5sBQ", buf[:14])
    assert (magic, version, total) == (MAGIC, 1, len(buf))


def test_truncated_file_names_lengths(tmp_path):
    cfg = gaussian2d_preset()
    path = save_checkpoint(build_model(cfg), None, tmp_path / "t.ckpt", cfg)
    buf = path.read_bytes()
    path.write_bytes(buf[:-10])
    with pytest.raises(CheckpointError, match=f"says {len(buf)} bytes, file has {len(buf) - 10}"):
        load_checkpoint(path)


def test_bad_magic_and_version():
    buf = encode({"config": {}}, {"w": np.ones(2)})
    with pytest.raises(CheckpointError, match="bad magic.*offset 0"):
        decode(b"XXXX1" + buf[5:])
    with pytest.raises(CheckpointError, match="version 9 at offset 5"):
        decode(buf[:5] + b"\x09" + buf[6:])


def test_truncated_record_reports_offset():
    buf = encode({"config": {}}, {"w": np.ones(4)})
    short = buf[:-8]
    fixed = short[:6] + struct.pack("<Q", len(short)) + short[14:]
    with pytest.raises(CheckpointError, match="truncated values of 'w'.*offset"):
        decode(fixed)


def test_record_roundtrip_shapes():
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((0, 4))}
    _, out = decode(encode({"config": {}}, tensors))
    for k, v in tensors.items():
        assert out[k].shape == v.shape and np.array_equal(out[k], v)


def test_mismatched_config_names_field(tmp_path):
    cfg = gaussian2d_preset()
    path = save_checkpoint(build_model(cfg), None, tmp_path / "c.ckpt", cfg)
    other = replace(cfg, head=replace(cfg.head, latent_dim=3))
    with pytest.raises(CheckpointError, match=r"head\.latent_dim"):
        load_checkpoint(path, expected_config=other)
