import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fv2es import autodiff as A
from fv2es import tensor as T
from fv2es import vision as V
from fv2es.errors import DimensionMismatch, UserInputError
from fv2es.tensor import BatchNormParams


def random_bn(rng, c, dtype):
    return BatchNormParams(rng.uniform(0.5, 1.5, c).astype(dtype), rng.normal(0, 0.3, c).astype(dtype),
                           rng.normal(0, 0.3, c).astype(dtype), rng.uniform(0.3, 2.0, c).astype(dtype), 1e-5)


def random_block(rng, cin, cout, stride, dtype=np.float32):
    ident = cin == cout and stride == 1
    return V.TrainBlockParams(
        rng.standard_normal((cout, cin, 3, 3)).astype(dtype) * dtype(0.3), random_bn(rng, cout, dtype),
        rng.standard_normal((cout, cin, 1, 1)).astype(dtype) * dtype(0.3), random_bn(rng, cout, dtype),
        random_bn(rng, cout, dtype) if ident else None, stride)


def zero_block(c):
    bn = BatchNormParams.identity(c, np.float64, eps=0.0)
    return V.TrainBlockParams(np.zeros((c, c, 3, 3)), bn, np.zeros((c, c, 1, 1)), bn, bn, 1)


# multi-branch forward ---------------------------------------------------------

def test_zero_convs_identity_bn_is_relu():
    x = np.random.default_rng(0).standard_normal((4, 5, 5))
    assert np.array_equal(V.block_forward_train(x, zero_block(4)), T.relu(x))


def test_stride2_has_no_identity_branch():
    rng = np.random.default_rng(1)
    blk = random_block(rng, 4, 4, 2, np.float64)
    assert blk.bn_id is None
    x = rng.standard_normal((4, 6, 6))
    want = T.relu(T.batch_norm_eval(T.conv2d(x, blk.conv3, None, 2, 1), blk.bn3)
                  + T.batch_norm_eval(T.conv2d(x, blk.conv1, None, 2, 0), blk.bn1))
    assert np.array_equal(V.block_forward_train(x, blk), want)


def test_identity_branch_requires_matching_shape():
    rng = np.random.default_rng(2)
    blk = random_block(rng, 3, 4, 1)
    with pytest.raises(DimensionMismatch):
        V.TrainBlockParams(blk.conv3, blk.bn3, blk.conv1, blk.bn1, random_bn(rng, 4, np.float32), 1)


def test_block_matches_scalar_composition():
    rng = np.random.default_rng(3)
    blk = random_block(rng, 2, 2, 1, np.float64)
    x = rng.standard_normal((2, 4, 4))
    out = V.block_forward_train(x, blk)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))

    def bn(v, p, c):
        return (v - p.running_mean[c]) / np.sqrt(p.running_var[c] + p.eps) * p.gamma[c] + p.beta[c]
    for o in range(2):
        for i in range(4):
            for j in range(4):
                c3 = sum(xp[c, i + a, j + b] * blk.conv3[o, c, a, b] for c in range(2) for a in range(3)
                         for b in range(3))
                c1 = sum(x[c, i, j] * blk.conv1[o, c, 0, 0] for c in range(2))
                want = max(0.0, bn(c3, blk.bn3, o) + bn(c1, blk.bn1, o) + bn(x[o, i, j], blk.bn_id, o))
                assert out[o, i, j] == pytest.approx(want, abs=1e-6)


# folding pieces -----------------------------------------------------------------

def test_fold_identity_bn():
    k = np.random.default_rng(4).standard_normal((3, 2, 3, 3))
    k2, b = V.fold_bn(k, BatchNormParams.identity(3, np.float64, eps=0.0))
    assert np.array_equal(k2, k) and not b.any()


def test_fold_gamma_zero():
    beta = np.array([0.5, -1.0])
    k2, b = V.fold_bn(np.ones((2, 1, 3, 3)), BatchNormParams(np.zeros(2), beta, np.ones(2), np.ones(2)))
    assert not k2.any() and np.array_equal(b, beta)


def test_fold_matches_conv_then_bn():
    rng = np.random.default_rng(5)
    k = rng.standard_normal((3, 2, 3, 3))
    bn = random_bn(rng, 3, np.float64)
    x = rng.standard_normal((2, 6, 6))
    kf, bf = V.fold_bn(k, bn)
    np.testing.assert_allclose(T.conv2d(x, kf, bf, 1, 1), T.batch_norm_eval(T.conv2d(x, k, None, 1, 1), bn),
                               atol=1e-5)


def test_pad_1x1():
    k = np.array([[[[2.5]]]])
    p = V.pad_1x1_to_3x3(k)
    assert p.shape == (1, 1, 3, 3) and p[0, 0, 1, 1] == 2.5 and np.count_nonzero(p) == 1
    assert not V.pad_1x1_to_3x3(np.zeros((2, 3, 1, 1))).any()


@pytest.mark.parametrize("stride", [1, 2])
def test_padded_1x1_conv_equivalent(stride):
    rng = np.random.default_rng(6)
    k = rng.standard_normal((3, 2, 1, 1))
    x = rng.standard_normal((2, 7, 7))
    np.testing.assert_allclose(T.conv2d(x, V.pad_1x1_to_3x3(k), None, stride, 1),
                               T.conv2d(x, k, None, stride, 0), atol=1e-12)


def test_identity_kernel():
    k1 = V.identity_to_3x3(1)
    assert k1[0, 0, 1, 1] == 1 and np.count_nonzero(k1) == 1
    assert np.count_nonzero(V.identity_to_3x3(3)) == 3
    x = np.random.default_rng(7).standard_normal((3, 5, 4)).astype(np.float32)
    assert np.array_equal(T.conv2d(x, V.identity_to_3x3(3), None, 1, 1), x)


# fusion --------------------------------------------------------------------------

def test_fuse_zero_block_is_dirac():
    fb = V.fuse_block(zero_block(3))
    assert np.array_equal(fb.kernel, V.identity_to_3x3(3, np.float64)) and not fb.bias.any()


def test_fuse_without_identity():
    rng = np.random.default_rng(8)
    blk = random_block(rng, 2, 3, 2, np.float64)
    k3, b3 = V.fold_bn(blk.conv3, blk.bn3)
    k1, b1 = V.fold_bn(blk.conv1, blk.bn1)
    fb = V.fuse_block(blk)
    np.testing.assert_allclose(fb.kernel, k3 + V.pad_1x1_to_3x3(k1), rtol=1e-15)
    np.testing.assert_allclose(fb.bias, b3 + b1, rtol=1e-15)


def _triples(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        cin = int(rng.integers(1, 9))
        cout = cin if rng.random() < 0.5 else int(rng.integers(1, 9))
        stride = int(rng.choice([1, 2]))
        side = int(rng.integers(3, 10))
        yield rng, cin, cout, stride, side


def test_reparam_equivalence_f32_100_triples():
    worst = 0.0
    for rng, cin, cout, stride, side in _triples(100, 10):
        blk = random_block(rng, cin, cout, stride, np.float32)
        x = rng.standard_normal((cin, side, side)).astype(np.float32)
        worst = max(worst, float(np.max(np.abs(V.block_forward_train(x, blk)
                                               - V.block_forward_fused(x, V.fuse_block(blk))))))
    assert worst < 1e-4


def test_reparam_equivalence_f64_100_triples():
    worst = 0.0
    for rng, cin, cout, stride, side in _triples(100, 11):
        blk = random_block(rng, cin, cout, stride, np.float64)
        x = rng.standard_normal((cin, side, side))
        worst = max(worst, float(np.max(np.abs(V.block_forward_train(x, blk)
                                               - V.block_forward_fused(x, V.fuse_block(blk))))))
    assert worst < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 2]), st.integers(3, 8), st.integers(0, 10**6))
def test_reparam_property(cin, cout, stride, side, seed):
    rng = np.random.default_rng(seed)
    blk = random_block(rng, cin, cout, stride, np.float64)
    x = rng.standard_normal((2, cin, side, side))
    np.testing.assert_allclose(V.block_forward_train(x, blk), V.block_forward_fused(x, V.fuse_block(blk)),
                               atol=1e-10)


def test_full_network_equivalence():
    cfg = V.VisionNetConfig()
    p = V.init_params(cfg, np.random.default_rng(12), random_bn=True)
    blocks = V.to_blocks(p, cfg)
    x = np.random.default_rng(13).random((2, 3, 64, 64)).astype(np.float32)
    diff = np.abs(V.forward_blocks(x, blocks) - V.forward_blocks(x, V.fuse_network(blocks)))
    assert diff.max() < 1e-3


def test_autodiff_path_matches_numpy_path():
    cfg = V.VisionNetConfig(side=16)
    p = V.init_params(cfg, np.random.default_rng(14), random_bn=True)
    x = np.random.default_rng(15).random((2, 3, 16, 16)).astype(np.float32)
    with A.no_grad():
        a = V.net_forward(x, p, cfg).data
        b = V.net_forward(x, V.fuse_params(p, cfg), cfg).data
    assert np.array_equal(a, V.forward_blocks(x, V.to_blocks(p, cfg)))
    assert np.max(np.abs(a - b)) < 1e-4


# features -------------------------------------------------------------------------

def test_constant_frame_identity_net():
    cfg = V.VisionNetConfig(layers=((3, 3, 1),) * 6, side=8)
    p = V.fused_to_dict([V.FusedBlockParams(V.identity_to_3x3(3), np.zeros(3, np.float32))] * 6)
    frame = np.stack([np.full((8, 8), v, np.float32) for v in (0.2, -0.5, 0.9)])
    with A.no_grad():
        feats = V.frame_features(frame[None], p, cfg).data
    np.testing.assert_allclose(feats, [[0.2, 0.0, 0.9]], atol=1e-7)


def test_frame_features_empty_and_rows():
    cfg = V.VisionNetConfig(side=16)
    p = V.init_params(cfg, np.random.default_rng(0))
    assert V.frame_features(np.zeros((0, 3, 16, 16), np.float32), p, cfg).shape == (0, 128)
    assert V.frame_features([], p, cfg).shape == (0, 128)
    with A.no_grad():
        assert V.frame_features(np.zeros((3, 3, 16, 16), np.float32), p, cfg).shape == (3, 128)


# accounting -----------------------------------------------------------------------

def test_worked_8_to_8_counts():
    assert V.count_block_params(8, 8, 1, "train") == 576 + 64 + 3 * 32 == 736
    assert V.count_block_params(8, 8, 1, "fused") == 8 * (72 + 1) == 584


def test_fused_1_to_1():
    assert V.count_block_params(1, 1, 1, "fused") == 10


def test_counts_match_parameter_dicts():
    cfg = V.VisionNetConfig()
    p = V.init_params(cfg, np.random.default_rng(0))
    assert sum(v.size for v in p.values()) == V.count_params(cfg, "train")["total"]
    assert sum(v.size for v in V.fuse_params(p, cfg).values()) == V.count_params(cfg, "fused")["total"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 64), st.sampled_from([1, 2])), min_size=6, max_size=6),
       st.integers(1, 16))
def test_fused_always_cheaper(spec, c0):
    layers, cin = [], c0
    for cout, stride in spec:
        layers.append((cin, cout, stride))
        cin = cout
    cfg = V.VisionNetConfig(layers=tuple(layers), side=16)
    assert V.count_params(cfg, "fused")["total"] < V.count_params(cfg, "train")["total"]
    assert V.flops(cfg, "fused") < V.flops(cfg, "train")


def test_flops_single_block_by_hand():
    cfg = V.VisionNetConfig(layers=((2, 2, 1),) * 6, side=4)
    out_el = 2 * 4 * 4
    per_train = 2 * 9 * 2 * out_el + 2 * 2 * out_el + 2 * 3 * out_el + 2 * out_el
    per_fused = 2 * 9 * 2 * out_el + out_el
    assert V.flops(cfg, "train") == 6 * per_train
    assert V.flops(cfg, "fused", batch=3) == 3 * 6 * per_fused


def test_default_spatial_chain():
    assert V.VisionNetConfig().spatial_sizes() == [32, 16, 16, 8, 8, 4]


def test_config_validation():
    with pytest.raises(UserInputError):
        V.VisionNetConfig(layers=((3, 8, 1),) * 5)
    with pytest.raises(UserInputError):
        V.VisionNetConfig(layers=((3, 8, 1), (4, 8, 1)) + ((8, 8, 1),) * 4)
