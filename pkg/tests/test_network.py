import json
import struct

import numpy as np
import pytest

from puedgeformer.geometry import PointCloud, SurfaceSpec, normalize_unit_sphere, sample_surface
from puedgeformer.network import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    NetworkConfig,
    PUEdgeFormer,
    duplicate,
    encode,
    extend,
    forward,
    iterate_upsample,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
    shuffle_expand,
    upsample_passes,
)
from puedgeformer.tensor import ShapeError, Tensor

TOY = NetworkConfig(r=4, k=4, heads=2, unit_width=8, channels=16, extension_dims=(16, 8), init_seed=1)


def cloud(n, seed=0):
    return normalize_unit_sphere(sample_surface(SurfaceSpec("torus"), n, seed)).points


# -- config -------------------------------------------------------------------------


def test_default_config_values():
    c = NetworkConfig()
    assert (c.r, c.k, c.heads, c.unit_width, c.channels, c.extension_dims) == (4, 16, 8, 64, 128, (256, 32))
    assert c.attention_scaling and c.residual and not c.append_input


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by r"):
        NetworkConfig(channels=126)
    with pytest.raises(ValueError, match="heads"):
        NetworkConfig(unit_width=60)
    with pytest.raises(ValueError):
        NetworkConfig.from_dict({"r": 4, "bogus": 1})
    assert NetworkConfig.from_dict(TOY.to_dict()) == TOY


def test_parameter_inventory():
    model = PUEdgeFormer(NetworkConfig())
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    shapes = dict((n, t.shape) for n, t in model.named_parameters())
    assert shapes["units.0.q_conv.weight"] == (6, 64)
    assert shapes["units.0.shortcut_weight"] == (3, 64)
    assert "units.1.shortcut_weight" not in shapes
    assert shapes["fuse.weight"] == (256, 128)
    assert shapes["extension.0.weight"] == (32, 256)
    assert shapes["extension.1.weight"] == (256, 32)
    assert shapes["reconstruction.weight"] == (32, 3)


# -- pipeline pieces -------------------------------------------------------------------


def test_shuffle_expand_examples():
    out = shuffle_expand(Tensor([[1.0, 2.0, 3.0, 4.0]]), 4).data
    assert out.tolist() == [[1.0], [2.0], [3.0], [4.0]]
    f = np.arange(8.0).reshape(2, 4)
    out = shuffle_expand(Tensor(f), 2).data
    assert out.tolist() == [[0, 1], [2, 3], [4, 5], [6, 7]]
    assert np.array_equal(out.reshape(2, 4), f)
    with pytest.raises(ShapeError):
        shuffle_expand(Tensor(np.ones((2, 6))), 4)


def test_shuffle_slice_alignment():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((5, 12))
    out = shuffle_expand(Tensor(f), 4).data
    for i in range(5):
        for j in range(4):
            assert np.array_equal(out[i * 4 + j], f[i, j * 3 : (j + 1) * 3])


def test_duplicate_examples():
    x = np.array([[1.0, 2, 3], [4.0, 5, 6]])
    assert np.array_equal(duplicate(x, 1).data, x)
    assert duplicate(x, 2).data.tolist() == [x[0].tolist(), x[0].tolist(), x[1].tolist(), x[1].tolist()]
    d = duplicate(np.arange(15.0).reshape(5, 3), 3).data
    for m in range(15):
        assert np.array_equal(d[m], np.arange(15.0).reshape(5, 3)[m // 3])


def test_default_shapes():
    model = PUEdgeFormer(NetworkConfig())
    x = cloud(256)
    f = encode(model, x)
    assert f.shape == (256, 128)
    fe = extend(model, f)
    assert fe.shape == (1024, 32)
    assert reconstruct(model, fe, x).shape == (1024, 3)


def test_extend_zero_features_constant_rows_and_siblings_differ():
    model = PUEdgeFormer(TOY)
    zero = extend(model, Tensor(np.zeros((6, 16)))).data
    assert np.all(zero == zero[0])
    fe = extend(model, encode(model, cloud(20))).data
    assert not np.array_equal(fe[0], fe[1])


def test_reconstruct_translation_and_row_mismatch():
    model = PUEdgeFormer(TOY)
    x = cloud(20)
    fe = extend(model, encode(model, x))
    t = np.array([0.5, -1.0, 2.0])
    y0 = reconstruct(model, fe, x).data
    y1 = reconstruct(model, fe, x + t).data
    np.testing.assert_allclose(y1 - y0, np.tile(t, (80, 1)), atol=1e-14)
    with pytest.raises(ShapeError):
        reconstruct(model, fe, x[:10])


def test_zero_residual_is_exact_duplicate():
    model = PUEdgeFormer(TOY)
    model.zero_reconstruction()
    x = cloud(30)
    assert np.array_equal(forward(model, x).data, np.repeat(x, 4, axis=0))


def test_parent_alignment_within_residual_norm():
    model = PUEdgeFormer(TOY)
    x = cloud(25)
    fe = extend(model, encode(model, x))
    resid = np.linalg.norm(model.reconstruction(fe).data, axis=1).max()
    y = forward(model, x).data
    for m in range(100):
        assert np.linalg.norm(y[m] - x[m // 4]) <= resid + 1e-12


def test_forward_deterministic_and_input_checks():
    model = PUEdgeFormer(TOY)
    x = cloud(20)
    assert np.array_equal(forward(model, x).data, forward(model, x).data)
    with pytest.raises(ShapeError):
        forward(model, x[:4])
    with pytest.raises(ShapeError):
        forward(model, np.ones((10, 2)))


def test_append_input_variant():
    cfg = NetworkConfig(**{**TOY.to_dict(), "append_input": True})
    model = PUEdgeFormer(cfg)
    assert model.fuse.weight.shape == (4 * 8 + 3, 16)
    assert forward(model, cloud(12)).shape == (48, 3)


# -- iterated upsampling -------------------------------------------------------------------


def test_upsample_passes():
    assert upsample_passes(4, 4) == 1
    assert upsample_passes(16, 4) == 2
    assert upsample_passes(256, 4) == 4
    for bad in (1, 2, 8, 32, 0):
        with pytest.raises(ValueError):
            upsample_passes(bad, 4)


def test_iterate_times_r_is_one_forward_in_input_frame():
    model = PUEdgeFormer(TOY)
    raw = cloud(20) * 3.0 + 5.0
    out = iterate_upsample(model, raw, 4).points
    norm = normalize_unit_sphere(PointCloud(raw))
    direct = forward(model, norm.points).data * norm.norm_transform.scale + norm.norm_transform.centroid
    np.testing.assert_allclose(out, direct, atol=1e-12)


def test_iterate_x256_point_count():
    model = PUEdgeFormer(TOY)
    assert iterate_upsample(model, cloud(16), 256).points.shape == (4096, 3)


def test_iterate_zero_residual_repeats_points():
    model = PUEdgeFormer(TOY)
    model.zero_reconstruction()
    x = cloud(20) * 2 + 1
    out = iterate_upsample(model, x, 4).points
    np.testing.assert_allclose(out, np.repeat(x, 4, axis=0), atol=1e-12)


def test_iterate_rejects_too_few_points():
    with pytest.raises(ShapeError):
        iterate_upsample(PUEdgeFormer(TOY), np.ones((1, 3)), 4)


# -- checkpoints ------------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = PUEdgeFormer(TOY)
    for _, t in model.named_parameters():
        t.data[...] = np.random.default_rng(3).standard_normal(t.shape)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    for (n1, a), (n2, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
    x = cloud(20)
    assert forward(loaded, x).data.tobytes() == forward(model, x).data.tobytes()
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    model = PUEdgeFormer(TOY)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    buf = path.read_bytes()
    assert buf[:5] == CHECKPOINT_MAGIC
    (clen,) = struct.unpack("<Q", buf[5:13])
    assert json.loads(buf[13 : 13 + clen]) == TOY.to_dict()
    pos = 13 + clen
    (count,) = struct.unpack("<Q", buf[pos : pos + 8])
    assert count == len(list(model.named_parameters()))
    pos += 8
    (nlen,) = struct.unpack("<Q", buf[pos : pos + 8])
    name = buf[pos + 8 : pos + 8 + nlen].decode()
    assert name == next(model.named_parameters())[0] == "units.0.out_weight"
    pos += 8 + nlen
    rank, d0, d1 = struct.unpack("<3Q", buf[pos : pos + 24])
    assert (rank, d0, d1) == (2, 8, 8)
    first = np.frombuffer(buf[pos + 24 : pos + 24 + 8 * 64], dtype="<f8")
    assert np.array_equal(first, model.units[0].out_weight.data.ravel())


def test_zero_model_checkpoint_keeps_identity(tmp_path):
    model = PUEdgeFormer(TOY)
    model.zero_reconstruction()
    save_checkpoint(model, tmp_path / "z.ckpt")
    x = cloud(20)
    assert np.array_equal(forward(load_checkpoint(tmp_path / "z.ckpt"), x).data, np.repeat(x, 4, axis=0))


def test_checkpoint_errors(tmp_path):
    model = PUEdgeFormer(TOY)
    good = tmp_path / "m.ckpt"
    save_checkpoint(model, good)
    buf = good.read_bytes()

    def write(name, data):
        p = tmp_path / name
        p.write_bytes(data)
        return p

    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(write("magic.ckpt", b"XXXXX" + buf[5:]))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(write("ver.ckpt", b"PUEF2" + buf[5:]))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(write("trunc.ckpt", buf[:-9]))
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(write("trail.ckpt", buf + b"\0"))
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(good, NetworkConfig(**{**TOY.to_dict(), "k": 5}))
    # same config block, different tensor shapes
    other = PUEdgeFormer(NetworkConfig(**{**TOY.to_dict(), "unit_width": 4}))
    save_checkpoint(other, tmp_path / "o.ckpt")
    obuf = (tmp_path / "o.ckpt").read_bytes()
    cfg = json.dumps(TOY.to_dict(), sort_keys=True).encode()
    (olen,) = struct.unpack("<Q", obuf[5:13])
    swapped = CHECKPOINT_MAGIC + struct.pack("<Q", len(cfg)) + cfg + obuf[13 + olen :]
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(write("shape.ckpt", swapped))
