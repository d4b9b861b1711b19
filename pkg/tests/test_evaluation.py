import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbmrc.corpus import AnnotatedCorpus, LabelSet
from pbmrc.evaluation import Counts, compute_metrics, evaluate_model, match_spans, score_corpus
from pbmrc.model import init_params, preset
from pbmrc.tensor import Rng


def test_match_identity():
    c = match_spans({(0, 7, "Drug")}, {(0, 7, "Drug")})
    assert (c["Drug"].tp, c["Drug"].fp, c["Drug"].fn) == (1, 0, 0)


def test_match_label_mismatch():
    c = match_spans({(0, 7, "Drug")}, {(0, 7, "ADR")})
    assert (c["Drug"].tp, c["Drug"].fn) == (0, 1) and (c["ADR"].tp, c["ADR"].fp) == (0, 1)


def test_match_extra_prediction():
    c = match_spans({(0, 7, "Drug")}, {(0, 7, "Drug"), (15, 21, "Drug")})
    assert (c["Drug"].tp, c["Drug"].fp, c["Drug"].fn) == (1, 1, 0)


def test_metrics_fixture_half_precision():
    r = compute_metrics({"Drug": Counts(1, 1, 0)})
    assert abs(r.precision - 0.5) <= 1e-12 and abs(r.recall - 1.0) <= 1e-12
    assert abs(r.f1 - 2 / 3) <= 1e-12


def test_metrics_zero_counts():
    r = compute_metrics({"Drug": Counts(0, 0, 0)})
    assert r.precision == r.recall == r.f1 == 0.0
    assert compute_metrics({}).f1 == 0.0


def test_micro_vs_macro():
    # label A perfect, label B misses its one gold mention: pooled TP=1, FP=0, FN=1
    r = compute_metrics({"A": Counts(1, 0, 0), "B": Counts(0, 0, 1)})
    assert r.per_label["A"]["f1"] == 1.0 and r.per_label["B"]["f1"] == 0.0
    assert abs(r.f1 - 2 / 3) <= 1e-12
    assert abs(r.macro["f1"] - 0.5) <= 1e-12


def test_pooled_one_each():
    # pooled TP=1, FP=1, FN=1 -> P = R = F1 = 1/2
    r = compute_metrics({"A": Counts(1, 0, 0), "B": Counts(0, 1, 1)})
    assert abs(r.f1 - 0.5) <= 1e-12 and abs(r.macro["f1"] - 0.5) <= 1e-12


def test_empty_split_report(syn):
    corpus, registry, vocab = syn
    cfg = preset("desk", vocab_size=len(vocab), dropout_prob=0.0)
    params = init_params(cfg, Rng(0))
    empty = AnnotatedCorpus(corpus.label_set, [])
    report, dump = evaluate_model(params, empty, registry, vocab, max_len=64)
    assert report.summary_line() == "P=0.0000 R=0.0000 F1=0.0000" and dump == []


def test_gold_self_consistency(syn):
    corpus = syn[0]
    gold = {s.id: [(m.start, m.end, m.label) for m in s.mentions] for s in corpus.sentences}
    r = score_corpus(corpus, gold)
    assert r.precision == r.recall == r.f1 == 1.0


def test_evaluate_deterministic_json(syn):
    corpus, registry, vocab = syn
    cfg = preset("desk", vocab_size=len(vocab), dropout_prob=0.0)
    params = init_params(cfg, Rng(1))
    a, da = evaluate_model(params, corpus, registry, vocab, max_len=64)
    b, db = evaluate_model(params, corpus, registry, vocab, max_len=64)
    assert a.dumps() == b.dumps() and da == db
    first = json.loads(da[0])
    assert set(first) == {"id", "text", "entities"}
    assert all("score" in e for line in da for e in json.loads(line)["entities"])


spans = st.sets(st.tuples(st.integers(0, 6), st.integers(1, 7), st.sampled_from("AB")), max_size=8)


@settings(max_examples=200, deadline=None)
@given(spans, spans)
def test_swap_symmetry_and_bounds(gold, pred):
    r1 = compute_metrics(match_spans(gold, pred))
    r2 = compute_metrics(match_spans(pred, gold))
    assert r1.precision == r2.recall and r1.recall == r2.precision
    assert abs(r1.f1 - r2.f1) <= 1e-15
    for r in (r1, r2):
        assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1 and 0 <= r.f1 <= 1
        assert r.f1 <= max(r.precision, r.recall) + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(spans, spans), min_size=1, max_size=6), st.randoms())
def test_micro_f1_order_invariant(sents, rnd):
    from pbmrc.corpus import EntityMention, Sentence

    def run(items):
        ss, preds = [], {}
        for k, (g, p) in items:
            ss.append(Sentence(f"s{k}", "x" * 8, [EntityMention(*t) for t in sorted(g) if t[0] < t[1]]))
            preds[f"s{k}"] = [t for t in p if t[0] < t[1]]
        return score_corpus(AnnotatedCorpus(LabelSet(("A", "B")), ss), preds).f1

    items = list(enumerate(sents))
    shuffled = items[:]
    rnd.shuffle(shuffled)
    assert run(items) == run(shuffled)
