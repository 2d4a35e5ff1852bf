import struct

import numpy as np
import pytest
import torch

from fieldspace import io as fio
from fieldspace.autoencoder import FieldSpaceAutoencoder
from fieldspace.diffusion import CompressedFieldDiffusion
from fieldspace.healpix import npix


def test_field_round_trip(tmp_path, rng):
    v = rng.standard_normal(npix(2))
    fio.write_field(tmp_path / "a.fsf", v, 2, "tas", 31000)
    rec = fio.read_field(tmp_path / "a.fsf")
    assert (rec.level, rec.variable, rec.timestamp) == (2, "tas", 31000)
    np.testing.assert_array_equal(rec.values, v.astype(np.float32))


def test_field_layout_is_little_endian(tmp_path):
    fio.write_field(tmp_path / "a.fsf", np.arange(12.0), 0, "pr", -3)
    raw = (tmp_path / "a.fsf").read_bytes()
    assert raw[:4] == b"FSF1"
    assert struct.unpack("<HBBH", raw[4:10]) == (1, 0, 0, 2)
    assert raw[10:12] == b"pr"
    assert struct.unpack("<q", raw[12:20]) == (-3,)
    assert np.array_equal(np.frombuffer(raw[20:], "<f4"), np.arange(12.0))
    assert len(raw) == 20 + 48


def test_unicode_name(tmp_path):
    fio.write_field(tmp_path / "u.fsf", np.zeros(12), 0, "température")
    assert fio.read_field(tmp_path / "u.fsf").variable == "température"


def test_distinct_errors(tmp_path):
    fio.write_field(tmp_path / "a.fsf", np.zeros(npix(1)), 1, "tas")
    raw = (tmp_path / "a.fsf").read_bytes()
    (tmp_path / "magic.fsf").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.fsf").write_bytes(raw[:-4])
    (tmp_path / "long.fsf").write_bytes(raw + b"\0\0\0\0")
    (tmp_path / "hdr.fsf").write_bytes(raw[:12])
    (tmp_path / "order.fsf").write_bytes(raw[:7] + b"\x01" + raw[8:])
    with pytest.raises(fio.BadMagicError) as e1:
        fio.read_field(tmp_path / "magic.fsf")
    with pytest.raises(fio.TruncatedError) as e2:
        fio.read_field(tmp_path / "short.fsf")
    assert e1.value.code != e2.value.code
    with pytest.raises(fio.TruncatedError):
        fio.read_field(tmp_path / "hdr.fsf")
    with pytest.raises(fio.FormatError):
        fio.read_field(tmp_path / "long.fsf")
    with pytest.raises(fio.UnsupportedError):
        fio.read_field(tmp_path / "order.fsf")
    with pytest.raises(ValueError):
        fio.write_field(tmp_path / "b.fsf", np.zeros(13), 0)


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.weight": rng.standard_normal((3, 4)), "b": np.float32(2.5) * np.ones(())}
    fio.save_checkpoint(tmp_path / "c.ckpt", {"x": [1, 2], "name": "t"}, tensors)
    cfg, back = fio.load_checkpoint(tmp_path / "c.ckpt")
    assert cfg == {"x": [1, 2], "name": "t"}
    np.testing.assert_array_equal(back["a.weight"], tensors["a.weight"].astype(np.float32))
    assert back["b"].shape == ()
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(fio.TruncatedError):
        fio.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"ABCD" + raw[4:])
    with pytest.raises(fio.BadMagicError):
        fio.load_checkpoint(tmp_path / "m.ckpt")


def test_estimator_checkpoints(tmp_path, rng):
    est = FieldSpaceAutoencoder(base_level=0, residual_levels=(2, 3), bottleneck_level=2,
                                d_model=16, d_head=8, sh_degree=2).build()
    with torch.no_grad():
        for p in est.model_.parameters():
            p.add_(0.01 * torch.randn(p.shape))
    fio.save_autoencoder(tmp_path / "ae.ckpt", est, {"variable": "tas"})
    back, cfg = fio.load_autoencoder(tmp_path / "ae.ckpt")
    assert cfg["variable"] == "tas" and back.get_params() == est.get_params()
    X = rng.standard_normal((2, npix(3)))
    np.testing.assert_array_equal(back.reconstruct(X), est.reconstruct(X))
    with pytest.raises(fio.FormatError):
        fio.load_diffusion(tmp_path / "ae.ckpt")

    base = rng.standard_normal((1, 4, 1, npix(0)))
    code = rng.standard_normal((1, 4, 1, npix(1)))
    d = CompressedFieldDiffusion(window=2, d_model=8, n_blocks=1, d_head=4, max_iters=2,
                                 warmup_iters=1, sh_degree=2, sh_level=1).fit(base, code,
                                                                             np.arange(4))
    fio.save_diffusion(tmp_path / "d.ckpt", d)
    d2, _ = fio.load_diffusion(tmp_path / "d.ckpt")
    s1 = d.sample([0, 1], 2, seed=0, n_steps=5)
    s2 = d2.sample([0, 1], 2, seed=0, n_steps=5)
    np.testing.assert_allclose(s1[1], s2[1], atol=1e-6)


def test_kv_documents(tmp_path):
    m = {"levels.residual": (3, 4, 5), "train.lr": 0.001, "variable": "tas", "seed": 3,
         "one": (7,), "flag": True}
    fio.write_kv(tmp_path / "r.cfg", m)
    assert fio.read_kv(tmp_path / "r.cfg") == m
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(ValueError):
        fio.read_kv(tmp_path / "bad.cfg")
