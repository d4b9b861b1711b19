"""WordPiece tokenisation with character offsets, and MRC input assembly.

Input layout produced by :func:`encode_instance`::

    [CLS] q1 .. qm [SEP] x1 .. xn [SEP] [PAD] ..
    seg 0 ...........  seg 1 .................
"""

from __future__ import annotations

import io
import unicodedata
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
MAX_WORD_CHARS = 100


class VocabError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class EncodingError(ValueError):
    pass


def fold_char(c: str) -> str:
    # length-changing lowercase (e.g. U+0130) would break offsets; keep as is
    low = c.lower()
    return low if len(low) == 1 else c


def fold(s: str) -> str:
    return "".join(fold_char(c) for c in s)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...] = field(repr=False)
    lowercase: bool = False

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise VocabError(f"duplicate token {tok!r} at line {i + 1}")
            index[tok] = i
        missing = [t for t in SPECIAL_TOKENS if t not in index]
        if missing:
            raise VocabError(f"vocabulary is missing special token(s): {', '.join(missing)}")
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self._index

    def id(self, tok: str) -> int:
        return self._index.get(tok, self._index[UNK])

    @property
    def pad_id(self):
        return self._index[PAD]

    @property
    def unk_id(self):
        return self._index[UNK]

    @property
    def cls_id(self):
        return self._index[CLS]

    @property
    def sep_id(self):
        return self._index[SEP]

    @property
    def mask_id(self):
        return self._index[MASK]


def load_vocab(stream, lowercase=False) -> Vocabulary:
    """One token per line; the id of a token is its 0-based line index."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    tokens = []
    for raw in stream:
        if isinstance(raw, (bytes, bytearray)):
            raw = raw.decode("utf-8")
        tokens.append(raw.rstrip("\r\n"))
    while tokens and not tokens[-1]:
        tokens.pop()
    if "" in tokens:
        raise VocabError(f"empty token at line {tokens.index('') + 1}")
    return Vocabulary(tuple(tokens), lowercase)


def read_vocab(path, lowercase=False) -> Vocabulary:
    with open(path, "rb") as fh:
        return load_vocab(fh, lowercase)


def build_vocab(texts, lowercase=False, max_words=None) -> Vocabulary:
    """Desk-scale vocabulary: specials, every single character (bare and
    ``##``-prefixed), then the most frequent whole words. Any text made of
    the seen characters tokenises without [UNK]."""
    chars = set()
    counts = {}
    for text in texts:
        for s, e in pre_tokenize(text):
            w = fold(text[s:e]) if lowercase else text[s:e]
            chars.update(w)
            counts[w] = counts.get(w, 0) + 1
    words = sorted(counts, key=lambda w: (-counts[w], w))
    if max_words is not None:
        words = words[:max_words]
    pieces = sorted(chars) + ["##" + c for c in sorted(chars)]
    seen = set(SPECIAL_TOKENS) | set(pieces)
    tokens = list(SPECIAL_TOKENS) + pieces + [w for w in sorted(words) if w not in seen]
    return Vocabulary(tuple(tokens), lowercase)


def write_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(t + "\n" for t in vocab.tokens))


def _is_punct(c: str) -> bool:
    cp = ord(c)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(c).startswith("P")


def _is_skipped(c: str) -> bool:
    if c.isspace():
        return True
    if c in "\t\n\r":
        return True
    return ord(c) == 0 or ord(c) == 0xFFFD or unicodedata.category(c) in ("Cc", "Cf")


def pre_tokenize(text: str) -> list[tuple[int, int]]:
    """Word spans: split on whitespace, each punctuation char is its own word.
    Control characters are dropped like whitespace."""
    spans = []
    start = None
    for i, c in enumerate(text):
        if _is_skipped(c):
            if start is not None:
                spans.append((start, i))
                start = None
        elif _is_punct(c):
            if start is not None:
                spans.append((start, i))
                start = None
            spans.append((i, i + 1))
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(text)))
    return spans


@dataclass(frozen=True)
class TokenizedText:
    tokens: tuple[str, ...]
    ids: tuple[int, ...]
    offsets: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.tokens)


def _split_word(word: str, vocab: Vocabulary):
    """Greedy longest-match-first pieces as (token, lo, hi), or None."""
    pieces = []
    start = 0
    n = len(word)
    while start < n:
        end = n
        found = None
        while end > start:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if sub in vocab:
                found = sub
                break
            end -= 1
        if found is None:
            return None
        pieces.append((found, start, end))
        start = end
    return pieces


def wordpiece_tokenize(text: str, vocab: Vocabulary) -> TokenizedText:
    tokens, ids, offsets = [], [], []
    for s, e in pre_tokenize(text):
        word = text[s:e]
        if vocab.lowercase:
            word = fold(word)
        pieces = _split_word(word, vocab) if len(word) <= MAX_WORD_CHARS else None
        if pieces is None:
            tokens.append(UNK)
            ids.append(vocab.unk_id)
            offsets.append((s, e))
            continue
        for tok, lo, hi in pieces:
            tokens.append(tok)
            ids.append(vocab.id(tok))
            offsets.append((s + lo, s + hi))
    return TokenizedText(tuple(tokens), tuple(ids), tuple(offsets))


def align_char_span_to_tokens(span, tk: TokenizedText):
    """Smallest token range covering ``span``; returns ``(lo, hi, exact)``
    with ``hi`` inclusive. ``exact`` is True iff the range's character
    coverage equals the span."""
    start, end = span
    if end <= start:
        raise AlignmentError(f"empty span {span}")
    lo = hi = None
    for k, (s, e) in enumerate(tk.offsets):
        if s < end and e > start:
            if lo is None:
                lo = k
            hi = k
        elif s >= end:
            break
    if lo is None:
        raise AlignmentError(f"span {span} covers no token")
    exact = tk.offsets[lo][0] == start and tk.offsets[hi][1] == end
    return lo, hi, exact


@dataclass(frozen=True, eq=False)
class EncodedInput:
    """One encoded MRC instance. Token ranges are half-open ``(lo, hi)``."""

    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    prompt_token_range: tuple[int, int]
    context_token_range: tuple[int, int]
    context_offsets: tuple[tuple[int, int], ...]
    label: str = ""
    sentence_id: str = ""

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def num_real(self) -> int:
        return int(self.attention_mask.sum())

    def context_mask(self) -> np.ndarray:
        m = np.zeros(len(self.ids), dtype=bool)
        lo, hi = self.context_token_range
        m[lo:hi] = True
        return m


@dataclass(frozen=True, eq=False)
class EncodedInstance:
    enc: EncodedInput
    answers: tuple[tuple[int, int], ...]  # absolute, inclusive token spans
    dropped: int = 0  # answers lost to truncation or unalignable
    inexact: int = 0  # answers whose boundary fell inside a token


def encode_instance(inst, vocab: Vocabulary, max_len: int, pad_to: int | None = None,
                    prompt_tokens: TokenizedText | None = None,
                    context_tokens: TokenizedText | None = None) -> EncodedInstance:
    """Build ``[CLS] prompt [SEP] context [SEP]`` and token-level answers.

    The context, never the prompt, is truncated to fit ``max_len``.
    ``prompt_tokens`` / ``context_tokens`` may be passed to reuse a tokenisation.
    """
    if max_len <= 0:
        raise EncodingError("max_len must be positive")
    ptk = prompt_tokens or wordpiece_tokenize(inst.prompt_text, vocab)
    m = len(ptk)
    if m < 1:
        raise EncodingError(f"prompt for label {inst.label!r} tokenizes to zero tokens")
    if m + 3 > max_len:
        raise EncodingError(f"prompt for label {inst.label!r} needs {m + 3} positions, max_len is {max_len}")
    ctk = context_tokens or wordpiece_tokenize(inst.context_text, vocab)
    n = min(len(ctk), max_len - m - 3)
    ids = [vocab.cls_id, *ptk.ids, vocab.sep_id, *ctk.ids[:n], vocab.sep_id]
    seg = [0] * (m + 2) + [1] * (n + 1)
    length = len(ids)
    if pad_to is not None:
        if pad_to < length or pad_to > max_len:
            raise EncodingError(f"cannot pad length {length} to {pad_to} (max_len {max_len})")
        extra = pad_to - length
        ids += [vocab.pad_id] * extra
        seg += [1] * extra
    mask = [1] * length + [0] * (len(ids) - length)
    base = m + 2
    answers, dropped, inexact = [], 0, 0
    for span in inst.answers:
        try:
            lo, hi, exact = align_char_span_to_tokens(span, ctk)
        except AlignmentError:
            dropped += 1
            continue
        if hi >= n:
            dropped += 1
            continue
        inexact += not exact
        answers.append((base + lo, base + hi))
    enc = EncodedInput(
        ids=np.array(ids, dtype=np.int64),
        segment_ids=np.array(seg, dtype=np.int64),
        attention_mask=np.array(mask, dtype=np.int64),
        prompt_token_range=(1, 1 + m),
        context_token_range=(base, base + n),
        context_offsets=tuple(ctk.offsets[:n]),
        label=inst.label,
        sentence_id=inst.sentence_id,
    )
    return EncodedInstance(enc, tuple(dict.fromkeys(answers)), dropped, inexact)


def pad_encoded(enc: EncodedInput, pad_to: int, pad_id: int) -> EncodedInput:
    """Append [PAD] positions to an already encoded input."""
    extra = pad_to - len(enc.ids)
    if extra < 0:
        raise EncodingError("pad_to shorter than the input")
    return EncodedInput(
        ids=np.concatenate([enc.ids, np.full(extra, pad_id, dtype=np.int64)]),
        segment_ids=np.concatenate([enc.segment_ids, np.ones(extra, dtype=np.int64)]),
        attention_mask=np.concatenate([enc.attention_mask, np.zeros(extra, dtype=np.int64)]),
        prompt_token_range=enc.prompt_token_range,
        context_token_range=enc.context_token_range,
        context_offsets=enc.context_offsets,
        label=enc.label,
        sentence_id=enc.sentence_id,
    )
