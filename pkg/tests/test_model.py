import struct
import zlib
from fractions import Fraction

import numpy as np
import pytest

from mcpnet import model as mm
from mcpnet.autodiff import Tensor
from mcpnet.model import MCPNet, MCPNetConfig, ScoreMatrix
from mcpnet.sketchio import PointSet


def small(num_classes=3, columns=1, n_points=16, width_factor=Fraction(1, 16), seed=0):
    cfg = MCPNetConfig.build(num_classes, columns, n_points=n_points, width_factor=width_factor)
    return MCPNet.init(cfg, seed)


def points(n, seed=0, batch=None):
    shape = (n, 2) if batch is None else (batch, n, 2)
    return np.random.default_rng(seed).random(shape).astype(np.float32)


# construction

def test_init_is_deterministic_per_seed():
    a, b, c = small(seed=4), small(seed=4), small(seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.parameters(), c.parameters()))


def test_init_scheme():
    m = small(columns=3)
    for block in m.blocks():
        k, c_in, _ = block.kernel.shape
        bound = np.sqrt(1.0 / (k * c_in))
        assert np.abs(block.kernel.data).max() <= bound
        assert not block.bias.data.any()
        if block.bn is not None:
            assert (block.gamma.data == 1).all() and not block.beta.data.any()
            assert not block.bn.mean.any() and (block.bn.var == 1).all()
    assert m.head[-1].bn is None and all(b.bn is not None for b in m.head[:-1])


def test_head_final_kernel_shape_full_width():
    cfg = MCPNetConfig.build(4, 3)
    assert [tuple(b.kernel.shape) for b in MCPNet.init(cfg).head][-1] == (1, 128, 4)


def test_width_factor_scales_columns():
    cfg = MCPNetConfig.build(3, 1, width_factor=Fraction(1, 16))
    assert cfg.column_widths(0) == (4, 8, 64)
    assert cfg.head_widths() == (64, 32, 16, 8, 3)


@pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(columns=0), dict(columns=4),
                                    dict(kernel_lengths=(2,), columns=1), dict(n_points=0),
                                    dict(width_factor=0)])
def test_invalid_config(kwargs):
    args = dict(num_classes=3, columns=1)
    args.update(kwargs)
    with pytest.raises(mm.InvalidConfig):
        MCPNetConfig.build(**args)


def test_columns_take_leading_kernel_lengths():
    cfg = MCPNetConfig.build(3, 2, kernel_lengths=(1, 3, 5))
    assert [c.kernel_length for c in cfg.columns] == [1, 3]


# shapes

@pytest.mark.parametrize("K", [1, 2, 3])
@pytest.mark.parametrize("N", [1, 7, 512])
def test_shape_chain(K, N):
    cfg = MCPNetConfig.build(5, K, n_points=N)
    model = MCPNet.init(cfg)
    x = Tensor(points(N))
    for i in range(K):
        f = model.column_features(i, x, "eval")
        assert f["f_c1"].shape == (N, 64)
        assert f["f_c2"].shape == (N, 128)
        assert f["f_c3"].shape == (N, 1024)
        assert f["f_g"].shape == (1024,)
        assert f["f_P"].shape == (N, 1088)
    assert [b.kernel.shape[-1] for b in model.head] == [1024, 512, 256, 128, 5]
    assert model.head[0].kernel.shape == (1, 1088 * K, 1024)
    assert model.forward(x.data).values.shape == (N, 5)


def test_single_point_pooling():
    model = small()
    f = model.column_features(0, Tensor(points(1)), "eval")
    np.testing.assert_array_equal(f["f_g"].data, f["f_c3"].data[0])


def test_bad_point_shape():
    with pytest.raises(mm.ad.ShapeMismatch):
        small().forward(np.zeros((4, 3), np.float32))


# order robustness of a k=1 column

@pytest.mark.parametrize("mode", ["eval", "train"])
def test_k1_column_permutation(mode):
    model = small(n_points=32, seed=2)
    for block in model.columns[0]:
        rng = np.random.default_rng(0)
        block.bn.mean[...] = rng.normal(0, 0.1, block.bn.mean.shape)
    x = points(32, seed=1)
    base = model.column_features(0, Tensor(x), mode)
    rng = np.random.default_rng(7)
    for _ in range(100):
        perm = rng.permutation(32)
        f = model.column_features(0, Tensor(x[perm]), mode)
        assert np.abs(f["f_g"].data - base["f_g"].data).max() <= 1e-6
        np.testing.assert_allclose(f["f_P"].data, base["f_P"].data[perm], atol=1e-5)


def test_wider_kernels_see_order():
    model = small(n_points=32, seed=2, columns=2)
    x = points(32, seed=1)
    perm = np.random.default_rng(0).permutation(32)
    a = model.column_features(1, Tensor(x), "eval")["f_P"].data
    b = model.column_features(1, Tensor(x[perm]), "eval")["f_P"].data
    assert np.abs(b - a[perm]).max() > 1e-4


# forward and predict

def test_forward_rows_stochastic():
    model = small(num_classes=4, columns=3, n_points=20, width_factor=Fraction(1, 8))
    s = model.forward(points(20), "eval").values
    assert s.shape == (20, 4)
    assert (s >= 0).all() and np.abs(s.sum(1) - 1).max() < 1e-5


def test_eval_forward_is_pure():
    model = small()
    x = points(16)
    first = model.forward(x, "eval").values
    np.testing.assert_array_equal(model.forward(x, "eval").values, first)


def test_batched_eval_equals_single():
    model = small(columns=2)
    xb = points(16, batch=3)
    batched = model.forward(xb, "eval").values
    for i in range(3):
        np.testing.assert_allclose(batched[i], model.forward(xb[i], "eval").values, atol=1e-6)


def test_train_forward_updates_running_statistics():
    model = small()
    before = [b.copy() for b in model.buffers()]
    model.forward(points(16), "train")
    assert any(not np.array_equal(a, b) for a, b in zip(before, model.buffers()))


def test_argmax_rule():
    assert ScoreMatrix(np.array([[0.1, 0.7, 0.2]])).labels().tolist() == [1]
    assert ScoreMatrix(np.array([[0.5, 0.5]])).labels().tolist() == [0]
    logits = np.random.default_rng(0).normal(size=(30, 5))
    from mcpnet.autodiff import softmax
    base = ScoreMatrix(softmax(logits)).labels()
    np.testing.assert_array_equal(ScoreMatrix(softmax(3 * logits + 2)).labels(), base)


def test_predict_accepts_point_set():
    model = small()
    x = points(16)
    np.testing.assert_array_equal(model.predict(PointSet(x, 16)), model.predict(x))


# checkpoints

def test_round_trip_bit_identical(tmp_path):
    model = small(columns=2)
    model.forward(points(16), "train")
    path = tmp_path / "m.mcpn"
    model.save(path)
    back = MCPNet.load(path)
    assert back.config == model.config
    for a, b in zip(model.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    for a, b in zip(model.buffers(), back.buffers()):
        np.testing.assert_array_equal(a, b)
    x = points(16, seed=3)
    np.testing.assert_array_equal(back.forward(x).values, model.forward(x).values)
    assert back.to_bytes() == path.read_bytes()


def test_checkpoint_layout():
    model = small()
    raw = model.to_bytes()
    assert raw[:4] == b"MCPN"
    version, n_classes, n_points, k, num, den = struct.unpack_from("<6I", raw, 4)
    assert (version, n_classes, n_points, k, num, den) == (1, 3, 16, 1, 1, 16)
    kl, c1, c2, c3, n_head = struct.unpack_from("<5I", raw, 28)
    assert (kl, c1, c2, c3, n_head) == (1, 64, 128, 1024, 4)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
    floats = sum(p.data.size for p in model.parameters()) + sum(b.size for b in model.buffers())
    headers = sum(4 * (1 + p.data.ndim) for p in model.parameters()) + 8 * len(model.buffers())
    assert len(raw) == 4 + 4 * (6 + 4 + 1 + 4) + 4 + headers + 4 * floats + 4


def test_truncated_checkpoint():
    raw = small().to_bytes()
    with pytest.raises(mm.ChecksumMismatch):
        MCPNet.from_bytes(raw[:-10])
    with pytest.raises(mm.ChecksumMismatch):
        MCPNet.from_bytes(raw[:6])


def test_corrupt_checkpoint():
    raw = bytearray(small().to_bytes())
    raw[200] ^= 0xFF
    with pytest.raises(mm.ChecksumMismatch):
        MCPNet.from_bytes(bytes(raw))


def test_wrong_magic_and_version():
    raw = small().to_bytes()
    with pytest.raises(mm.BadMagic):
        MCPNet.from_bytes(b"PNG!" + raw[4:])
    bumped = raw[:4] + struct.pack("<I", 2) + raw[8:]
    with pytest.raises(mm.VersionMismatch):
        MCPNet.from_bytes(bumped)


def test_io_errors(tmp_path):
    with pytest.raises(mm.IoError):
        MCPNet.load(tmp_path / "missing.mcpn")
    with pytest.raises(mm.IoError):
        small().save(tmp_path / "no" / "such" / "dir.mcpn")


def test_astype_float64_copy():
    model = small()
    wide = model.astype(np.float64)
    assert wide.dtype == np.float64 and model.dtype == np.float32
    x = points(16)
    np.testing.assert_allclose(wide.forward(x.astype(np.float64)).values, model.forward(x).values, atol=1e-5)
