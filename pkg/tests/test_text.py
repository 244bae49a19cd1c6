import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fv2es import text as X
from fv2es.errors import DataFormatError, UserInputError

CFG = X.TextEncoderConfig(vocab_size=64, d_t=8, layers=1, heads=2, max_len=16)


def params(seed=0, dtype=np.float64):
    return {k: v.astype(dtype) for k, v in X.init_params(CFG, np.random.default_rng(seed)).items()}


def test_fnv1a_reference_vectors():
    assert X.fnv1a64(b"") == 0xCBF29CE484222325
    assert X.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert X.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_empty_text():
    assert X.tokenize("").tokens == []


def test_case_and_punctuation_fold():
    seq = X.tokenize("Hello, hello")
    assert len(seq) == 2 and seq.tokens[0] == seq.tokens[1]


def test_fixed_ids():
    ids = X.tokenize("The quick brown fox", 4096).tokens
    assert ids == [X.fnv1a64(w.encode()) % 4096 for w in ("the", "quick", "brown", "fox")]
    assert ids == X.tokenize("the QUICK brown fox!", 4096).tokens


@settings(max_examples=50, deadline=None)
@given(st.text(max_size=40), st.integers(2, 5000))
def test_ids_within_vocab(s, vocab):
    assert all(0 <= t < vocab for t in X.tokenize(s, vocab).tokens)


def test_utterance_spans_evenly_spread():
    seq = X.tokenize_utterance(X.Utterance(1.0, 3.0, "a b c d"))
    assert seq.spans == [(1.0, 1.5), (1.5, 2.0), (2.0, 2.5), (2.5, 3.0)]


def test_empty_input_gives_null():
    p = params()
    out = X.encode_text(X.TokenSequence([]), p, CFG)
    assert out.shape == (1, 8)
    assert np.array_equal(out.data[0], p[X.PREFIX + "null"])


def test_single_token_zeroed_layers():
    p = params()
    pre = X.PREFIX + "layer0."
    for k in ("wv", "wo", "ff2.w", "ff2.b"):
        p[pre + k] = np.zeros_like(p[pre + k])
    out = X.encode_text(X.TokenSequence([5]), p, CFG).data
    np.testing.assert_allclose(out[0], p[X.PREFIX + "embed"][5] + p[X.PREFIX + "pos"][0], atol=1e-12)


def test_order_sensitive():
    p = params(1)
    a = X.encode_text(X.TokenSequence([3, 9]), p, CFG).data
    b = X.encode_text(X.TokenSequence([9, 3]), p, CFG).data
    assert not np.allclose(a, b[::-1])


def test_truncates_to_max_len():
    p = params()
    out = X.encode_text(X.TokenSequence(list(range(40))), p, CFG)
    assert out.shape == (16, 8)


def test_out_of_vocab_rejected():
    with pytest.raises(UserInputError):
        X.encode_ids(np.array([64]), params(), CFG)


def test_transcript_roundtrip(tmp_path):
    utts = [X.Utterance(0.0, 1.5, "hi there"), X.Utterance(2.0, 4.0, "bye")]
    X.write_transcript(tmp_path / "t.jsonl", utts)
    assert X.read_transcript(tmp_path / "t.jsonl") == utts


@pytest.mark.parametrize("line", ["not json", json.dumps({"start_s": 0}),
                                  json.dumps({"start_s": 2, "end_s": 1, "text": "x"})])
def test_bad_transcript(tmp_path, line):
    (tmp_path / "t.jsonl").write_text(line + "\n")
    with pytest.raises(DataFormatError):
        X.read_transcript(tmp_path / "t.jsonl")
