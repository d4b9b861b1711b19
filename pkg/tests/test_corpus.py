import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbmrc.corpus import (AnnotatedCorpus, CorpusError, EntityMention, LabelSet, Sentence,
                          parse_conll_bio, parse_standoff_jsonl, split_corpus, to_conll_bio,
                          to_standoff_jsonl, validate_corpus)

ASPIRIN = b'{"id":"s1","text":"Aspirin causes nausea.","entities":[{"start":0,"end":7,"label":"Drug"}]}\n'


def test_standoff_single_line():
    c = parse_standoff_jsonl(io.BytesIO(ASPIRIN))
    assert len(c) == 1
    s = c.sentences[0]
    assert s.mentions == (EntityMention(0, 7, "Drug"),)
    assert s.text[0:7] == "Aspirin"
    assert c.label_set.labels == ("Drug",)


def test_standoff_empty_stream():
    c = parse_standoff_jsonl(io.BytesIO(b""))
    assert len(c) == 0 and c.label_set.labels == ()


@pytest.mark.parametrize("line,kind", [
    (b'{"id":"s1","text":"Aspirin causes nausea.","entities":[{"start":5,"end":3,"label":"Drug"}]}',
     "end_not_after_start"),
    (b'{"id":"s1","text":"abc","entities":[{"start":0,"end":9,"label":"Drug"}]}', "offset_out_of_bounds"),
    (b'{"id":"s1","text":"abc","entities":[{"start":0,"end":1,"label":"D"},{"start":0,"end":1,"label":"D"}]}',
     "duplicate_mention"),
    (b'{"id":"s1","text":', "malformed_json"),
])
def test_standoff_validation_errors(line, kind):
    with pytest.raises(CorpusError) as err:
        parse_standoff_jsonl(io.BytesIO(line + b"\n"))
    assert err.value.kind == kind
    assert err.value.line == 1


def test_standoff_end_le_start_message():
    line = b'{"id":"s1","text":"Aspirin causes nausea.","entities":[{"start":5,"end":3,"label":"Drug"}]}'
    with pytest.raises(CorpusError, match="end ≤ start"):
        parse_standoff_jsonl(line)


def test_standoff_duplicate_id_reports_line():
    data = ASPIRIN + b"\n" + ASPIRIN
    with pytest.raises(CorpusError) as err:
        parse_standoff_jsonl(data)
    assert err.value.kind == "duplicate_sentence_id" and err.value.line == 3


def test_standoff_discontiguous_dropped_and_counted():
    line = (b'{"id":"s1","text":"pain in the left leg","entities":['
            b'{"spans":[[0,4],[12,20]],"label":"ADR"},{"start":12,"end":20,"label":"Site"}]}')
    c = parse_standoff_jsonl(line)
    assert c.report.discontiguous_dropped == 1
    assert c.sentences[0].mentions == (EntityMention(12, 20, "Site"),)


def test_nested_mentions_allowed_but_flat_only_rejects():
    line = (b'{"id":"s1","text":"IL-2 gene expression","entities":['
            b'{"start":0,"end":9,"label":"DNA"},{"start":0,"end":4,"label":"protein"}]}')
    assert len(parse_standoff_jsonl(line).sentences[0].mentions) == 2
    with pytest.raises(CorpusError) as err:
        parse_standoff_jsonl(line, flat_only=True)
    assert err.value.kind == "overlapping_mentions"


def test_standoff_unicode_offsets_are_code_points():
    text = "Ünïcödé 💊 drug"
    line = ('{"id":"u","text":"%s","entities":[{"start":8,"end":9,"label":"Pill"}]}' % text).encode()
    c = parse_standoff_jsonl(line)
    m = c.sentences[0].mentions[0]
    assert c.sentences[0].text[m.start:m.end] == "💊"


BIO = "Aspirin\tB-Drug\ncauses\tO\nnausea\tB-ADR\n\n"


def test_conll_basic():
    c = parse_conll_bio(io.BytesIO(BIO.encode()))
    s = c.sentences[0]
    assert s.text == "Aspirin causes nausea"
    assert s.mentions == (EntityMention(0, 7, "Drug"), EntityMention(15, 21, "ADR"))
    assert c.report.repair_count == 0


def test_conll_blank_only():
    assert len(parse_conll_bio(b"\n\n\n")) == 0


def test_conll_orphan_inside_repaired():
    c = parse_conll_bio(b"ache\tI-Disease\n\n")
    assert c.report.repair_count == 1
    assert c.sentences[0].mentions == (EntityMention(0, 4, "Disease"),)


def test_conll_multi_token_and_label_switch_repair():
    c = parse_conll_bio(b"chest\tB-ADR\npain\tI-ADR\nwarfarin\tI-Drug\n\n")
    assert c.sentences[0].mentions == (EntityMention(0, 10, "ADR"), EntityMention(11, 19, "Drug"))
    assert c.report.repair_count == 1


@pytest.mark.parametrize("data,kind", [
    (b"a\tb\tO\n", "bad_column_count"),
    (b"a\tX-Drug\n", "bad_tag"),
    (b"a\tB-\n", "bad_tag"),
])
def test_conll_errors(data, kind):
    with pytest.raises(CorpusError) as err:
        parse_conll_bio(data)
    assert err.value.kind == kind


def test_bio_round_trip_exact():
    c = parse_conll_bio(BIO.encode())
    text, dropped = to_conll_bio(c)
    assert text == BIO and dropped == 0


def _corpus(n, labels=("A", "B")):
    sents = [Sentence(f"x{k}", f"word{k} other{k} thing", [EntityMention(0, 4 + len(str(k)), labels[k % 2])])
             for k in range(n)]
    return AnnotatedCorpus(LabelSet(labels), sents)


def test_split_sizes_and_determinism():
    c = _corpus(10)
    tr, dv, te = split_corpus(c, (0.8, 0.1, 0.1), seed=7)
    assert (len(tr), len(dv), len(te)) == (8, 1, 1)
    again = split_corpus(c, (0.8, 0.1, 0.1), seed=7)
    assert [x.sentences for x in again] == [tr.sentences, dv.sentences, te.sentences]
    assert to_standoff_jsonl(again[0]) == to_standoff_jsonl(tr)
    assert (tr.split_tag, dv.split_tag, te.split_tag) == ("train", "dev", "test")


def test_split_identity_and_rejects_bad_fractions():
    c = _corpus(5)
    tr, dv, te = split_corpus(c, (1, 0, 0), seed=1)
    assert len(tr) == 5 and len(dv) == len(te) == 0
    with pytest.raises(ValueError):
        split_corpus(c, (0.5, 0.2, 0.2), seed=1)


# ---------------------------------------------------------------- properties

label_st = st.sampled_from(["Drug", "ADR", "Disease"])


@st.composite
def sentences(draw, idx=0):
    text = draw(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=30)
                .filter(lambda t: t.strip()))
    n = len(text)
    spans = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(1, n), label_st)
                          .filter(lambda t: t[0] < t[1]), max_size=4, unique=True))
    return text, [EntityMention(s, e, lab) for s, e, lab in spans]


@st.composite
def corpora(draw):
    items = draw(st.lists(sentences(), max_size=8))
    sents = [Sentence(f"s{k}", t, ms) for k, (t, ms) in enumerate(items)]
    return AnnotatedCorpus(LabelSet(("ADR", "Disease", "Drug")), sents)


@settings(max_examples=60, deadline=None)
@given(corpora())
def test_standoff_round_trip(c):
    validate_corpus(c)
    again = parse_standoff_jsonl(to_standoff_jsonl(c).encode(), labels=c.label_set.labels)
    assert again == c
    for s in again.sentences:
        for m in s.mentions:
            assert s.text[m.start:m.end]


tag_lists = st.lists(st.lists(st.sampled_from(["O", "B-X", "I-X", "B-Y", "I-Y"]), min_size=1, max_size=10),
                     min_size=1, max_size=5)


@settings(max_examples=60, deadline=None)
@given(tag_lists)
def test_bio_reemission_reproduces_tags(tag_seqs):
    from pbmrc.corpus import repair_bio

    lines = []
    fixed_all = []
    for tags in tag_seqs:
        fixed = repair_bio(tags)  # well-formed input: no repairs needed
        fixed_all.append(fixed)
        lines += [f"w{k}\t{t}\n" for k, t in enumerate(fixed)] + ["\n"]
    src = "".join(lines)
    c = parse_conll_bio(src.encode())
    assert c.report.repair_count == 0
    out, dropped = to_conll_bio(c)
    assert out == src and dropped == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.integers(0, 2**32 - 1),
       st.sampled_from([(0.8, 0.1, 0.1), (0.5, 0.5, 0.0), (0.34, 0.33, 0.33), (0, 0, 1)]))
def test_split_partition(n, seed, fr):
    c = _corpus(n)
    parts = split_corpus(c, fr, seed)
    ids = [s.id for p in parts for s in p.sentences]
    assert len(ids) == len(set(ids)) == n
    assert set(ids) == {s.id for s in c.sentences}
