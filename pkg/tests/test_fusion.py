import numpy as np
import pytest

from fv2es import autodiff as A
from fv2es import fusion as F
from fv2es.errors import DimensionMismatch
from oracles import brute_attention, naive_gelu, naive_layer_norm

CFG = F.FusionConfig(d_f=8, hidden=16, heads=2, max_len=16)
P = F.PREFIX


def params(seed=0):
    p = F.init_params(CFG, 5, 4, 6, np.random.default_rng(seed))
    return {k: v.astype(np.float64) for k, v in p.items()}


def features(rng, n_v=3, n_a=1, n_t=2):
    return F.ModalityFeatures(rng.standard_normal((n_v, 5)), rng.standard_normal((n_a, 4)),
                              rng.standard_normal((n_t, 6)))


def encode_oracle(x, p, pre):
    x = x + p[pre + "pos"][:len(x)]
    att = brute_attention(x, *(p[pre + k] for k in ("wq", "wk", "wv", "wo")), CFG.heads)
    h = np.array([naive_layer_norm(r, p[pre + "ln1.g"], p[pre + "ln1.b"]) for r in x + att])
    ff = np.array([[naive_gelu(v) for v in row] for row in h @ p[pre + "ff1.w"] + p[pre + "ff1.b"]])
    ff = ff @ p[pre + "ff2.w"] + p[pre + "ff2.b"]
    return np.array([naive_layer_norm(r, p[pre + "ln2.g"], p[pre + "ln2.b"]) for r in h + ff])


def test_encode_sequence_composed_oracle():
    p = params(1)
    x = np.random.default_rng(2).standard_normal((3, 8))
    np.testing.assert_allclose(F.encode_sequence(x, p, "v", 2).data, encode_oracle(x, p, P + "enc_v."), atol=1e-6)


def test_encode_single_row_deterministic():
    p = params()
    x = np.random.default_rng(3).standard_normal((1, 8))
    a, b = F.encode_sequence(x, p, "a", 2).data, F.encode_sequence(x, p, "a", 2).data
    assert a.shape == (1, 8) and np.array_equal(a, b)


def test_encode_zeroed_projections_is_layer_norm_path():
    p = params()
    pre = P + "enc_v."
    for k in ("wo", "ff2.w", "ff2.b"):
        p[pre + k] = np.zeros_like(p[pre + k])
    x = np.random.default_rng(4).standard_normal((3, 8))
    xp = x + p[pre + "pos"][:3]
    h = np.array([naive_layer_norm(r, p[pre + "ln1.g"], p[pre + "ln1.b"]) for r in xp])
    want = np.array([naive_layer_norm(r, p[pre + "ln2.g"], p[pre + "ln2.b"]) for r in h])
    np.testing.assert_allclose(F.encode_sequence(x, p, "v", 2).data, want, atol=1e-9)


def test_too_long_sequence():
    with pytest.raises(DimensionMismatch):
        F.encode_sequence(np.zeros((17, 8)), params(), "v", 2)


def test_zero_pooled_gives_head_bias():
    p = params()
    p[P + "head1.b"] = np.zeros(16)
    p[P + "head2.b"] = np.arange(6.0)
    z = np.zeros((1, 8))
    np.testing.assert_array_equal(F.fuse_pooled(z, z, z, p).data[0], np.arange(6.0))


def test_suppressed_modalities_do_not_matter():
    p = params(5)
    p[P + "w_mod"] = np.array([100.0, -100.0, -100.0])
    rng = np.random.default_rng(6)
    m = features(rng)
    base, _ = F.fuse_and_predict(m, p, CFG)
    m2 = F.ModalityFeatures(m.visual, m.acoustic + rng.standard_normal(m.acoustic.shape),
                            m.textual + rng.standard_normal(m.textual.shape))
    other, _ = F.fuse_and_predict(m2, p, CFG)
    assert np.max(np.abs(base - other)) < 1e-4


def test_six_finite_logits_and_probs():
    logits, scores = F.fuse_and_predict(features(np.random.default_rng(7), n_v=4, n_a=2, n_t=5), params(), CFG)
    assert logits.shape == (6,) and np.all(np.isfinite(logits))
    assert np.all((scores.probs > 0) & (scores.probs < 1))
    assert scores.labels == F.LABEL_SETS["iemocap"]


def test_batched_logits_match_single():
    p = params(8)
    rng = np.random.default_rng(9)
    vis, aco, txt = rng.standard_normal((3, 2, 5)), rng.standard_normal((3, 1, 4)), rng.standard_normal((3, 4, 6))
    with A.no_grad():
        batched = F.fuse_logits(vis, aco, txt, p, CFG).data
    for i in range(3):
        single, _ = F.fuse_and_predict(F.ModalityFeatures(vis[i], aco[i], txt[i]), p, CFG)
        np.testing.assert_allclose(batched[i], single, rtol=1e-12, atol=1e-12)


def test_empty_modality_rejected():
    m = F.ModalityFeatures(np.zeros((0, 5)), np.zeros((1, 4)), np.zeros((1, 6)))
    with pytest.raises(DimensionMismatch):
        F.fuse_and_predict(m, params(), CFG)


def test_predict_labels_threshold_rules():
    half = F.EmotionScores(np.full(6, 0.5))
    assert F.predict_labels(half).tolist() == [1] * 6
    s = F.EmotionScores([0.9, 0.1, 0.5, 0.49, 0.0, 1.0])
    assert F.predict_labels(s).tolist() == [1, 0, 1, 0, 0, 1]
    assert F.predict_labels(s, 0.0).tolist() == [1] * 6
    assert F.predict_labels(s, 1.5).tolist() == F.predict_labels(s, 1.0).tolist() == [0, 0, 0, 0, 0, 1]
