"""Annotated NER corpora: data model, standoff JSONL and CoNLL BIO I/O, splits.

Character offsets are Python ``str`` indices, i.e. Unicode scalar values,
end-exclusive. Nested and overlapping mentions are allowed unless a caller
asks for ``flat_only`` validation.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .tensor import Rng

SPLIT_TAGS = ("train", "dev", "test", "unsplit")


class CorpusError(ValueError):
    """A validation failure while reading or checking a corpus.

    ``kind`` is a stable machine-readable code; ``line`` is 1-based when known.
    """

    def __init__(self, kind: str, message: str, line: int | None = None):
        self.kind = kind
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class LabelSet:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(set(labels)) != len(labels):
            raise CorpusError("duplicate_label", f"labels must be unique: {labels}")
        for lab in labels:
            check_label_name(lab)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def __contains__(self, label):
        return label in self.labels

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)


def check_label_name(label) -> None:
    if not isinstance(label, str) or not label or any(c.isspace() for c in label):
        raise CorpusError("bad_label", f"label must be a non-empty string without whitespace: {label!r}")


@dataclass(frozen=True, order=True)
class EntityMention:
    start: int
    end: int
    label: str


@dataclass(frozen=True)
class Sentence:
    id: str
    text: str
    mentions: tuple[EntityMention, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mentions", tuple(self.mentions))


@dataclass
class ParseReport:
    """Non-fatal events seen while parsing."""

    repairs: list = field(default_factory=list)  # (sentence_id, token_index, old_tag, new_tag)
    discontiguous_dropped: int = 0

    @property
    def repair_count(self) -> int:
        return len(self.repairs)


@dataclass(frozen=True)
class AnnotatedCorpus:
    label_set: LabelSet
    sentences: tuple[Sentence, ...]
    split_tag: str = "unsplit"
    report: ParseReport = field(default_factory=ParseReport, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        if self.split_tag not in SPLIT_TAGS:
            raise CorpusError("bad_split_tag", f"split_tag must be one of {SPLIT_TAGS}")

    def __len__(self):
        return len(self.sentences)

    @property
    def num_mentions(self) -> int:
        return sum(len(s.mentions) for s in self.sentences)


def validate_sentence(sent: Sentence, label_set: LabelSet | None = None, flat_only=False, line=None):
    if not sent.text.strip():
        raise CorpusError("empty_text", f"sentence {sent.id!r} has empty text", line)
    n = len(sent.text)
    seen = set()
    for m in sent.mentions:
        if not isinstance(m.start, int) or not isinstance(m.end, int):
            raise CorpusError("bad_offset", f"offsets must be integers in {sent.id!r}", line)
        if m.end <= m.start:
            raise CorpusError("end_not_after_start", f"end ≤ start for mention {m} in {sent.id!r}", line)
        if m.start < 0 or m.end > n:
            raise CorpusError("offset_out_of_bounds",
                              f"mention {m} out of bounds for text of length {n} in {sent.id!r}", line)
        if label_set is not None and m.label not in label_set:
            raise CorpusError("unknown_label", f"label {m.label!r} not in label set", line)
        key = (m.start, m.end, m.label)
        if key in seen:
            raise CorpusError("duplicate_mention", f"duplicate mention {m} in {sent.id!r}", line)
        seen.add(key)
    if flat_only:
        spans = sorted(sent.mentions)
        for a, b in zip(spans, spans[1:]):
            if b.start < a.end:
                raise CorpusError("overlapping_mentions", f"{a} overlaps {b} in {sent.id!r}", line)


def validate_corpus(corpus: AnnotatedCorpus, flat_only=False) -> None:
    ids = set()
    for sent in corpus.sentences:
        if sent.id in ids:
            raise CorpusError("duplicate_sentence_id", f"duplicate sentence id {sent.id!r}")
        ids.add(sent.id)
        validate_sentence(sent, corpus.label_set, flat_only)


def _text_lines(stream) -> Iterable[str]:
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    for raw in stream:
        if isinstance(raw, (bytes, bytearray)):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorpusError("bad_encoding", f"invalid UTF-8: {exc}") from exc
        yield raw.rstrip("\r\n")


# ---------------------------------------------------------------- standoff JSONL


def parse_standoff_jsonl(stream, labels=None, flat_only=False) -> AnnotatedCorpus:
    """Read one ``{"id", "text", "entities"}`` object per line.

    ``stream`` may be a binary or text file object, or bytes/str content.
    An entity carrying ``"spans": [[s, e], ...]`` with more than one fragment
    is discontiguous; it is skipped and counted in ``corpus.report``.
    """
    report = ParseReport()
    sentences = []
    ids = set()
    found = set()
    for lineno, line in enumerate(_text_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError("malformed_json", f"malformed JSON: {exc.msg}", lineno) from exc
        if not isinstance(obj, dict):
            raise CorpusError("malformed_json", "expected a JSON object", lineno)
        try:
            sid, text = obj["id"], obj["text"]
            ents = obj.get("entities", [])
        except KeyError as exc:
            raise CorpusError("missing_field", f"missing field {exc.args[0]!r}", lineno) from exc
        if not isinstance(sid, str) or not isinstance(text, str) or not isinstance(ents, list):
            raise CorpusError("bad_field_type", "id and text must be strings, entities a list", lineno)
        if sid in ids:
            raise CorpusError("duplicate_sentence_id", f"duplicate sentence id {sid!r}", lineno)
        ids.add(sid)
        mentions = []
        for ent in ents:
            if not isinstance(ent, dict) or "label" not in ent:
                raise CorpusError("bad_entity", f"malformed entity {ent!r}", lineno)
            if "spans" in ent:
                frags = ent["spans"]
                if len(frags) != 1:
                    report.discontiguous_dropped += 1
                    continue
                start, end = frags[0]
            else:
                if "start" not in ent or "end" not in ent:
                    raise CorpusError("bad_entity", f"entity without offsets {ent!r}", lineno)
                start, end = ent["start"], ent["end"]
            if isinstance(start, bool) or isinstance(end, bool) or not isinstance(start, int) \
                    or not isinstance(end, int):
                raise CorpusError("bad_offset", f"non-integer offsets in {ent!r}", lineno)
            try:
                check_label_name(ent["label"])
            except CorpusError as exc:
                raise CorpusError(exc.kind, str(exc), lineno) from None
            mentions.append(EntityMention(start, end, ent["label"]))
            found.add(ent["label"])
        sent = Sentence(sid, text, mentions)
        validate_sentence(sent, None, flat_only, lineno)
        sentences.append(sent)
    if labels is None:
        label_set = LabelSet(tuple(sorted(found)))
    else:
        label_set = LabelSet(tuple(labels))
        missing = sorted(found - set(label_set.labels))
        if missing:
            raise CorpusError("unknown_label", f"labels not in supplied label list: {missing}")
    return AnnotatedCorpus(label_set, sentences, "unsplit", report)


def sentence_to_json(sent: Sentence, scores=None) -> dict:
    ents = []
    for k, m in enumerate(sent.mentions):
        e = {"start": m.start, "end": m.end, "label": m.label}
        if scores is not None:
            e["score"] = scores[k]
        ents.append(e)
    return {"id": sent.id, "text": sent.text, "entities": ents}


def to_standoff_jsonl(corpus: AnnotatedCorpus) -> str:
    return "".join(json.dumps(sentence_to_json(s), ensure_ascii=False) + "\n" for s in corpus.sentences)


# ---------------------------------------------------------------- CoNLL BIO


def parse_conll_bio(stream, labels=None) -> AnnotatedCorpus:
    """Read ``TOKEN<TAB>TAG`` lines; a blank line ends a sentence.

    Sentence text is the tokens joined by single spaces. An ``I-X`` that does
    not continue an ``X`` run is repaired to ``B-X`` and logged in the report.
    Sentence ids are ``s1``, ``s2``, ... in file order.
    """
    report = ParseReport()
    sentences = []
    found = set()
    tokens, tags = [], []

    def flush():
        if not tokens:
            return
        sid = f"s{len(sentences) + 1}"
        fixed = repair_bio(tags, sid, report)
        text, mentions = _bio_to_mentions(tokens, fixed)
        found.update(m.label for m in mentions)
        sentences.append(Sentence(sid, text, mentions))
        tokens.clear()
        tags.clear()

    for lineno, line in enumerate(_text_lines(stream), start=1):
        if not line.strip():
            flush()
            continue
        if line.startswith("-DOCSTART-"):
            flush()
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise CorpusError("bad_column_count", f"expected TOKEN<TAB>TAG, got {len(cols)} column(s)", lineno)
        tok, tag = cols
        if not tok or any(c.isspace() for c in tok):
            raise CorpusError("bad_token", f"token must be non-empty without whitespace: {tok!r}", lineno)
        if tag != "O":
            if len(tag) < 3 or tag[:2] not in ("B-", "I-"):
                raise CorpusError("bad_tag", f"invalid tag {tag!r}", lineno)
            try:
                check_label_name(tag[2:])
            except CorpusError:
                raise CorpusError("bad_tag", f"invalid label in tag {tag!r}", lineno) from None
        tokens.append(tok)
        tags.append(tag)
    flush()
    if labels is None:
        label_set = LabelSet(tuple(sorted(found)))
    else:
        label_set = LabelSet(tuple(labels))
        missing = sorted(found - set(label_set.labels))
        if missing:
            raise CorpusError("unknown_label", f"labels not in supplied label list: {missing}")
    return AnnotatedCorpus(label_set, sentences, "unsplit", report)


def repair_bio(tags, sentence_id="", report: ParseReport | None = None) -> list[str]:
    out = []
    prev = "O"
    for k, tag in enumerate(tags):
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            new = "B-" + tag[2:]
            if report is not None:
                report.repairs.append((sentence_id, k, tag, new))
            tag = new
        out.append(tag)
        prev = tag
    return out


def _bio_to_mentions(tokens, tags):
    offsets = []
    pos = 0
    for tok in tokens:
        offsets.append((pos, pos + len(tok)))
        pos += len(tok) + 1
    text = " ".join(tokens)
    mentions = []
    cur = None
    for (s, e), tag in zip(offsets, tags):
        if tag.startswith("B-") or tag == "O":
            if cur is not None:
                mentions.append(EntityMention(*cur))
                cur = None
            if tag.startswith("B-"):
                cur = [s, e, tag[2:]]
        else:
            cur[1] = e
    if cur is not None:
        mentions.append(EntityMention(*cur))
    return text, mentions


def _word_spans(text: str, mode: str):
    if mode == "space":
        spans, pos = [], 0
        for piece in text.split(" "):
            if piece:
                spans.append((pos, pos + len(piece)))
            pos += len(piece) + 1
        return spans
    from .tokenizer import pre_tokenize

    return pre_tokenize(text)


def to_conll_bio(corpus: AnnotatedCorpus, split="space") -> tuple[str, int]:
    """Emit BIO lines. Returns the text and the number of mentions dropped.

    ``split="space"`` re-uses single-space tokens (exact inverse of
    :func:`parse_conll_bio`); ``split="word"`` splits on whitespace and
    punctuation. Mentions off token boundaries, or overlapping an
    already-emitted mention (longest-first within a start), are dropped.
    """
    lines = []
    dropped = 0
    for sent in corpus.sentences:
        words = _word_spans(sent.text, split)
        starts = {s: k for k, (s, _) in enumerate(words)}
        ends = {e: k for k, (_, e) in enumerate(words)}
        tags = ["O"] * len(words)
        for m in sorted(sent.mentions, key=lambda m: (m.start, -m.end, m.label)):
            a, b = starts.get(m.start), ends.get(m.end)
            if a is None or b is None or any(t != "O" for t in tags[a:b + 1]):
                dropped += 1
                continue
            tags[a] = "B-" + m.label
            for k in range(a + 1, b + 1):
                tags[k] = "I-" + m.label
        for (s, e), tag in zip(words, tags):
            lines.append(f"{sent.text[s:e]}\t{tag}\n")
        lines.append("\n")
    return "".join(lines), dropped


# ---------------------------------------------------------------- splitting


def split_corpus(corpus: AnnotatedCorpus, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle then contiguous partition into (train, dev, test).

    Train and dev sizes are ``floor(fraction * n)``; test takes the remainder.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ValueError(f"need three fractions in [0, 1], got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    n = len(corpus.sentences)
    order = Rng(seed).permutation(n) if n else np.zeros(0, dtype=int)
    n_train = min(n, math.floor(fractions[0] * n + 1e-9))
    n_dev = min(n - n_train, math.floor(fractions[1] * n + 1e-9))
    cuts = [order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:]]
    return tuple(
        replace(corpus, sentences=tuple(corpus.sentences[i] for i in idx), split_tag=tag,
                report=ParseReport())
        for idx, tag in zip(cuts, ("train", "dev", "test"))
    )


def read_corpus(path, fmt="auto", labels=None) -> AnnotatedCorpus:
    """Load a corpus file; ``fmt`` is ``standoff``, ``bio`` or ``auto`` (by suffix)."""
    path = str(path)
    if fmt == "auto":
        fmt = "standoff" if path.endswith((".jsonl", ".json")) else "bio"
    with open(path, "rb") as fh:
        if fmt == "standoff":
            return parse_standoff_jsonl(fh, labels)
        if fmt == "bio":
            return parse_conll_bio(fh, labels)
    raise ValueError(f"unknown corpus format {fmt!r}")
