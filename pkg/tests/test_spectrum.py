import numpy as np
import pytest

from fv2es import autodiff as A
from fv2es import fvt1
from fv2es import spectrum as S
from fv2es.errors import BadLayer, BadShape
from oracles import brute_attention, naive_conv, naive_gelu, naive_layer_norm, naive_pool

P = S.PREFIX


def params(cfg, seed=0, dtype=np.float64):
    return {k: v.astype(dtype) for k, v in S.init_params(cfg, np.random.default_rng(seed)).items()}


LEGAL = [S.SpectrumTowerConfig(side=s, d=d, heads=h, sub=sub)
         for s, sub in [(8, 1), (8, 2), (16, 2), (16, 4), (32, 2), (32, 4), (64, 4)]
         for d, h in [(4, 1), (8, 2)]]


def test_partition_default_is_16_patches_of_16():
    cfg = S.SpectrumTowerConfig()
    assert cfg.patch == 16
    grid = S.partition_patches(np.zeros((64, 64), np.float32), cfg, S.init_params(cfg, np.random.default_rng(0)))
    assert grid.blocks == 16 and grid.tokens.shape == (1, 16, 16, 64)


def test_partition_smallest_config():
    cfg = S.SpectrumTowerConfig(side=8, d=4, heads=1, sub=2)
    assert cfg.patch == 2 and cfg.piece == 1 and cfg.tokens == 4
    spec = np.arange(64, dtype=np.float64).reshape(8, 8)
    p = params(cfg)
    grid = S.partition_patches(spec, cfg, p)
    # block 5 = row 1, col 1 of the 4×4 patch grid; token 3 = its bottom-right pixel
    want = spec[3, 3] * p[P + "embed.w"][0] + p[P + "embed.b"] + p[P + "pos"][3]
    np.testing.assert_allclose(grid.tokens.data[0, 5, 3], want)


def test_partition_zero_spectrum_gives_positions():
    cfg = S.SpectrumTowerConfig(side=16, d=8, heads=2, sub=2)
    p = params(cfg)
    tokens = S.partition_patches(np.zeros((16, 16)), cfg, p).tokens.data
    for b in range(16):
        np.testing.assert_array_equal(tokens[0, b], p[P + "pos"])


@pytest.mark.parametrize("side", [7, 10, 0])
def test_bad_side(side):
    with pytest.raises(BadShape):
        S.SpectrumTowerConfig(side=side)


def test_sub_must_divide_patch():
    with pytest.raises(BadShape):
        S.SpectrumTowerConfig(side=16, sub=3)


def test_transformer_layer_zeroed_attention():
    cfg = S.SpectrumTowerConfig(side=8, d=8, heads=2, sub=2)
    p = params(cfg)
    p[P + "layer1.wv"] = np.zeros((8, 8))
    x = np.random.default_rng(1).standard_normal((4, 8))
    out, _ = S.transformer_layer(x, p, 1, 2)
    want = np.array([[naive_gelu(v) for v in naive_layer_norm(row, np.ones(8), np.zeros(8))] for row in x])
    np.testing.assert_allclose(out.data, want, atol=1e-9)


def test_transformer_layer_zero_input_gives_gelu_beta():
    cfg = S.SpectrumTowerConfig(side=8, d=8, heads=2, sub=2)
    p = params(cfg)
    beta = np.random.default_rng(2).standard_normal(8)
    p[P + "layer1.ln.b"] = beta
    out, _ = S.transformer_layer(np.zeros((4, 8)), p, 1, 2)
    np.testing.assert_allclose(out.data, np.tile([naive_gelu(b) for b in beta], (4, 1)), atol=1e-9)


def test_transformer_layer_composed_oracle():
    cfg = S.SpectrumTowerConfig(side=8, d=8, heads=2, sub=2)
    p = params(cfg, 3)
    rng = np.random.default_rng(4)
    p[P + "layer2.ln.g"], p[P + "layer2.ln.b"] = rng.standard_normal(8), rng.standard_normal(8)
    x = rng.standard_normal((4, 8))
    out, w = S.transformer_layer(x, p, 2, 2)
    att = brute_attention(x, *(p[P + f"layer2.{k}"] for k in ("wq", "wk", "wv", "wo")), 2)
    want = np.array([[naive_gelu(v) for v in naive_layer_norm(r, p[P + "layer2.ln.g"], p[P + "layer2.ln.b"])]
                     for r in x + att])
    np.testing.assert_allclose(out.data, want, atol=1e-6)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def aggregate_oracle(tokens, grid, sub, p, layer):
    """Per merged group: assemble the 2×2 block map, conv → LN over channels → pool."""
    d = tokens.shape[-1]
    g2 = grid // 2
    w, b = p[P + f"agg{layer}.conv.w"], p[P + f"agg{layer}.conv.b"]
    g, beta = p[P + f"agg{layer}.ln.g"], p[P + f"agg{layer}.ln.b"]
    out = np.zeros((g2 * g2, sub * sub, d))
    for gy in range(g2):
        for gx in range(g2):
            m = np.zeros((d, 2 * sub, 2 * sub))
            for by in range(2):
                for bx in range(2):
                    blk = (2 * gy + by) * grid + (2 * gx + bx)
                    for t in range(sub * sub):
                        ty, tx = divmod(t, sub)
                        m[:, by * sub + ty, bx * sub + tx] = tokens[blk, t]
            c = naive_conv(m, w, b, 1, 1)
            for i in range(2 * sub):
                for j in range(2 * sub):
                    c[:, i, j] = naive_layer_norm(c[:, i, j], g, beta)
            pooled = naive_pool(c, 3, 2, 1)
            out[gy * g2 + gx] = pooled.reshape(d, sub * sub).T
    return out


@pytest.mark.parametrize("sub", [1, 2])
def test_aggregate_composed_oracle(sub):
    cfg = S.SpectrumTowerConfig(side=8 * sub, d=4, heads=1, sub=sub)
    p = params(cfg, 5)
    rng = np.random.default_rng(6)
    p[P + "agg1.ln.g"], p[P + "agg1.ln.b"] = rng.standard_normal(4), rng.standard_normal(4)
    tokens = rng.standard_normal((1, 16, sub * sub, 4))
    out = S.aggregate(S.PatchGrid(1, 4, A.Var(tokens)), cfg, p)
    assert out.grid == 2 and out.layer == 2
    np.testing.assert_allclose(out.tokens.data[0], aggregate_oracle(tokens[0], 4, sub, p, 1), atol=1e-9)
    top = S.aggregate(S.PatchGrid(2, 2, out.tokens), cfg, p)
    assert top.grid == 1
    np.testing.assert_allclose(top.tokens.data[0], aggregate_oracle(out.tokens.data[0], 2, sub, p, 2), atol=1e-9)


def test_aggregate_constant_with_dirac_conv():
    cfg = S.SpectrumTowerConfig(side=16, d=4, heads=1, sub=2)
    p = params(cfg)
    dirac = np.zeros((4, 4, 3, 3))
    dirac[np.arange(4), np.arange(4), 1, 1] = 1.0
    p[P + "agg1.conv.w"], p[P + "agg1.conv.b"] = dirac, np.zeros(4)
    out = S.aggregate(S.PatchGrid(1, 4, A.Var(np.full((1, 16, 4, 4), 0.7))), cfg, p)
    assert np.allclose(out.tokens.data, 0.0)


def test_aggregate_top_layer_raises():
    cfg = S.SpectrumTowerConfig(side=8, d=4, heads=1, sub=2)
    with pytest.raises(BadLayer):
        S.aggregate(S.PatchGrid(3, 1, A.Var(np.zeros((1, 1, 4, 4)))), cfg, params(cfg))


@pytest.mark.parametrize("cfg", LEGAL, ids=lambda c: f"s{c.side}d{c.d}h{c.heads}sub{c.sub}")
def test_tower_pyramid_counts_and_row_sums(cfg):
    spec = np.random.default_rng(cfg.side).standard_normal((cfg.side, cfg.side)).astype(np.float32)
    feat, maps = S.forward_tower(spec, cfg, S.init_params(cfg, np.random.default_rng(0)))
    assert maps.counts() == [16, 4, 1]
    assert feat.shape == (cfg.d,) and np.all(np.isfinite(feat.data))
    for layer in maps.layers:
        assert layer.shape[-3:] == (cfg.heads, cfg.tokens, cfg.tokens)
        assert np.max(np.abs(layer.sum(axis=-1) - 1.0)) < 1e-6


def test_tower_deterministic():
    cfg = S.SpectrumTowerConfig(side=8, d=4, heads=1, sub=2)
    spec = np.random.default_rng(9).standard_normal((8, 8)).astype(np.float32)
    a = S.forward_tower(spec, cfg, S.init_params(cfg, np.random.default_rng(1)))[0].data
    b = S.forward_tower(spec, cfg, S.init_params(cfg, np.random.default_rng(1)))[0].data
    assert a.tobytes() == b.tobytes()


def test_tower_batch_matches_single():
    cfg = S.SpectrumTowerConfig(side=16, d=8, heads=2, sub=2)
    p = S.init_params(cfg, np.random.default_rng(2))
    specs = np.random.default_rng(3).standard_normal((3, 16, 16)).astype(np.float32)
    batched = S.forward_tower(specs, cfg, p)[0].data
    for i in range(3):
        assert np.array_equal(batched[i], S.forward_tower(specs[i], cfg, p)[0].data)


def _pgm_pixels(data):
    header, _, rest = data.partition(b"255\n")
    w, h = map(int, header.split()[1:3])
    return np.frombuffer(rest, np.uint8).reshape(h, w)


def test_pgm_uniform_is_gray():
    assert np.all(_pgm_pixels(S.render_pgm(np.full((2, 4, 4), 0.25))) == 128)


def test_pgm_one_hot_rows():
    att = np.zeros((1, 4, 4))
    att[0, np.arange(4), [2, 0, 3, 1]] = 1.0
    px = _pgm_pixels(S.render_pgm(att))
    assert np.all((px == 255).sum(axis=1) == 1) and np.all((px == 0).sum(axis=1) == 3)


def test_export_attention_files(tmp_path):
    cfg = S.SpectrumTowerConfig(side=8, d=4, heads=1, sub=2)
    _, maps = S.forward_tower(np.random.default_rng(0).standard_normal((8, 8)), cfg, params(cfg))
    S.export_attention(maps, tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.fvt1"))
    assert len(names) == 21 and len(list(tmp_path.glob("*.pgm"))) == 21
    back = fvt1.load(tmp_path / "layer1_block05.fvt1")
    assert back.tobytes() == np.ascontiguousarray(maps.layers[0][5]).tobytes()
