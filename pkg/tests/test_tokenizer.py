import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbmrc.prompting import MrcInstance
from pbmrc.tokenizer import (AlignmentError, EncodingError, TokenizedText, VocabError,
                             align_char_span_to_tokens, build_vocab, encode_instance, fold, load_vocab,
                             pre_tokenize, wordpiece_tokenize)

SEVEN = b"[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nhead\n##ache\n"


@pytest.fixture
def vocab7():
    return load_vocab(SEVEN)


def test_load_vocab(vocab7):
    assert len(vocab7) == 7 and vocab7.id("head") == 5 and vocab7.id("##ache") == 6


def test_load_vocab_errors():
    with pytest.raises(VocabError, match=r"\[CLS\]"):
        load_vocab(SEVEN.replace(b"[CLS]\n", b""))
    with pytest.raises(VocabError):
        load_vocab(b"")
    with pytest.raises(VocabError, match="duplicate"):
        load_vocab(SEVEN + b"head\n")


def test_wordpiece_examples(vocab7):
    tk = wordpiece_tokenize("headache", vocab7)
    assert tk.tokens == ("head", "##ache") and tk.offsets == ((0, 4), (4, 8))
    assert wordpiece_tokenize("", vocab7) == TokenizedText((), (), ())
    tk = wordpiece_tokenize("zzz", vocab7)
    assert tk.tokens == ("[UNK]",) and tk.offsets == ((0, 3),)


def test_long_word_is_unk():
    v = load_vocab(b"[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\n##a\n")
    assert wordpiece_tokenize("a" * 100, v).tokens == ("a",) + ("##a",) * 99
    assert wordpiece_tokenize("a" * 101, v).tokens == ("[UNK]",)


def test_pre_tokenize_punctuation():
    assert pre_tokenize("Hi, there!") == [(0, 2), (2, 3), (4, 9), (9, 10)]


def test_lowercase_vocab():
    v = load_vocab(SEVEN, lowercase=True)
    tk = wordpiece_tokenize("HeadAche", v)
    assert tk.tokens == ("head", "##ache")


def test_align_examples(vocab7):
    tk = wordpiece_tokenize("headache", vocab7)
    assert align_char_span_to_tokens((0, 8), tk) == (0, 1, True)
    assert align_char_span_to_tokens((0, 4), tk) == (0, 0, True)
    assert align_char_span_to_tokens((1, 4), tk) == (0, 0, False)


def test_align_whitespace_error(vocab7):
    tk = wordpiece_tokenize("head   head", vocab7)
    with pytest.raises(AlignmentError):
        align_char_span_to_tokens((5, 7), tk)


def _vocab_for(words):
    return build_vocab([" ".join(words)])


def _inst(prompt, context, answers=()):
    return MrcInstance("s", "L", prompt, context, tuple(answers))


def test_encode_layout_lengths():
    v = _vocab_for(["p1 p2 p3 p4"] + [f"c{k}" for k in range(10)])
    ctx = " ".join(f"c{k}" for k in range(10))
    # whole words are in the vocab, so 4 prompt and 10 context tokens
    e = encode_instance(_inst("p1 p2 p3 p4", ctx), v, 32).enc
    assert e.length == 17
    assert e.prompt_token_range == (1, 5) and e.context_token_range == (6, 16)
    assert e.ids[0] == v.cls_id and e.ids[5] == v.sep_id and e.ids[16] == v.sep_id
    assert e.segment_ids.tolist() == [0] * 6 + [1] * 11


def test_encode_truncation_drops_answers():
    v = _vocab_for(["p1 p2 p3 p4"] + [f"c{k}" for k in range(10)])
    ctx = " ".join(f"c{k}" for k in range(10))
    c7 = ctx.index("c7")
    c2 = ctx.index("c2")
    out = encode_instance(_inst("p1 p2 p3 p4", ctx, [(c2, c2 + 2), (c7, c7 + 2)]), v, 12)
    assert out.enc.context_token_range == (6, 11)
    assert out.answers == ((8, 8),) and out.dropped == 1
    assert out.enc.length == 12


def test_encode_rebases_answer():
    v = _vocab_for(["find all drug mentions", "Aspirin causes nausea ."])
    out = encode_instance(_inst("find all drug mentions", "Aspirin causes nausea.", [(0, 7)]), v, 32)
    assert out.answers == ((6, 6),)


def test_encode_prompt_too_long():
    v = _vocab_for(["a b c d e"])
    with pytest.raises(EncodingError):
        encode_instance(_inst("a b c d e", "a"), v, 7)


def test_encode_padding():
    v = _vocab_for(["q x y"])
    e = encode_instance(_inst("q", "x y"), v, 16, pad_to=10).enc
    assert e.attention_mask.tolist() == [1] * 6 + [0] * 4
    assert e.ids[6:].tolist() == [v.pad_id] * 4


# ---------------------------------------------------------------- properties


def check_offsets(text, tk, vocab):
    """Offset faithfulness plus ordering; returns number of violations."""
    bad = 0
    prev_end = 0
    for tok, (s, e) in zip(tk.tokens, tk.offsets):
        if s < prev_end or e <= s:
            bad += 1
        prev_end = e
        if tok == "[UNK]":
            continue
        piece = tok[2:] if tok.startswith("##") else tok
        src = fold(text[s:e]) if vocab.lowercase else text[s:e]
        bad += src != piece
    return bad


fuzz_text = st.text(alphabet=st.sampled_from(list("abcdeXYZ  .,-é💊\t")), max_size=40)
VOCAB = build_vocab(["abc de ab cd e xyz XY é"], lowercase=True)


@settings(max_examples=200, deadline=None)
@given(fuzz_text)
def test_offset_faithfulness(text):
    tk = wordpiece_tokenize(text, VOCAB)
    assert len(tk.tokens) == len(tk.ids) == len(tk.offsets)
    assert check_offsets(text, tk, VOCAB) == 0
    assert tk == wordpiece_tokenize(text, VOCAB)


@settings(max_examples=200, deadline=None)
@given(fuzz_text, st.data())
def test_word_boundary_alignment_round_trip(text, data):
    words = pre_tokenize(text)
    if not words:
        return
    a = data.draw(st.integers(0, len(words) - 1))
    b = data.draw(st.integers(a, len(words) - 1))
    span = (words[a][0], words[b][1])
    tk = wordpiece_tokenize(text, VOCAB)
    lo, hi, exact = align_char_span_to_tokens(span, tk)
    assert exact
    assert (tk.offsets[lo][0], tk.offsets[hi][1]) == span


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abc de", min_size=1, max_size=20), st.integers(0, 8))
def test_encode_segment_and_mask_shape(context, pad):
    v = build_vocab(["abc de find"])
    e = encode_instance(_inst("find abc", context), v, 64).enc
    e = encode_instance(_inst("find abc", context), v, 64, pad_to=e.length + pad).enc
    seg = e.segment_ids.tolist()
    assert sum(1 for x, y in zip(seg, seg[1:]) if x != y) == 1
    assert seg.index(1) == e.prompt_token_range[1] + 1
    mask = e.attention_mask.tolist()
    assert mask == sorted(mask, reverse=True) and mask[0] == 1
    lo, hi = e.context_token_range
    assert e.prompt_token_range[1] < lo and 0 not in range(lo, hi)
