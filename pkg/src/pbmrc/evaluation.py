"""Strict span-level scoring: a prediction counts only if its character
start, end and label all equal a gold mention."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpus import AnnotatedCorpus, EntityMention, Sentence, sentence_to_json
from .model import HARD, ModelParams, decode_spans, forward
from .prompting import PromptRegistry, build_instances
from .tokenizer import Vocabulary, encode_instance, wordpiece_tokenize


class LabelMismatchError(ValueError):
    pass


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def match_spans(gold, pred) -> dict:
    """Per-label TP/FP/FN between two collections of (start, end, label)."""
    gold, pred = set(map(tuple, gold)), set(map(tuple, pred))
    counts = {}
    for s in gold | pred:
        counts.setdefault(s[2], Counts())
    for s in gold & pred:
        counts[s[2]].tp += 1
    for s in pred - gold:
        counts[s[2]].fp += 1
    for s in gold - pred:
        counts[s[2]].fn += 1
    return counts


def prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class EvalReport:
    per_label: dict = field(default_factory=dict)  # label -> {tp, fp, fn, precision, recall, f1}
    micro: dict = field(default_factory=dict)
    macro: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)

    @property
    def precision(self):
        return self.micro["precision"]

    @property
    def recall(self):
        return self.micro["recall"]

    @property
    def f1(self):
        return self.micro["f1"]

    def to_json(self) -> dict:
        return {"per_label": self.per_label, "micro": self.micro, "macro": self.macro,
                "totals": self.totals}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def summary_line(self) -> str:
        return f"P={self.precision:.4f} R={self.recall:.4f} F1={self.f1:.4f}"


def compute_metrics(counts: dict, labels=None) -> EvalReport:
    """Counts -> report. Zero denominators give 0. Macro scores are the plain
    mean over ``labels`` (default: the labels present in ``counts``)."""
    labels = sorted(counts) if labels is None else list(labels)
    report = EvalReport()
    total = Counts()
    for lab in labels:
        c = counts.get(lab, Counts())
        if min(c.tp, c.fp, c.fn) < 0:
            raise ValueError(f"negative count for label {lab!r}")
        p, r, f = prf(c.tp, c.fp, c.fn)
        report.per_label[lab] = {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": p, "recall": r, "f1": f}
        total += c
    p, r, f = prf(total.tp, total.fp, total.fn)
    report.micro = {"precision": p, "recall": r, "f1": f}
    n = len(labels)
    report.macro = {k: (sum(report.per_label[lab][k] for lab in labels) / n if n else 0.0)
                    for k in ("precision", "recall", "f1")}
    report.totals = {"tp": total.tp, "fp": total.fp, "fn": total.fn}
    return report


def score_corpus(gold: AnnotatedCorpus, predicted: dict, labels=None) -> EvalReport:
    """``predicted`` maps sentence id -> iterable of (start, end, label)."""
    counts = {}
    for sent in gold.sentences:
        g = [(m.start, m.end, m.label) for m in sent.mentions]
        for lab, c in match_spans(g, predicted.get(sent.id, ())).items():
            counts.setdefault(lab, Counts())
            counts[lab] += c
    labels = list(labels if labels is not None else gold.label_set.labels)
    extra = sorted(set(counts) - set(labels))
    return compute_metrics(counts, labels + extra)


def predict_corpus(params: ModelParams, corpus: AnnotatedCorpus, registry: PromptRegistry,
                   vocab: Vocabulary, thresholds=(0.5, 0.5, 0.5), max_len: int = 512,
                   mode=HARD, labels=None):
    """Decode every (sentence, label) instance. Returns sentence id -> sorted
    list of (start, end, label, score)."""
    if labels is not None:
        unknown = [lab for lab in corpus.label_set if lab not in labels]
        if unknown:
            raise LabelMismatchError(f"model has no label(s) {unknown}")
    nodes = params.nodes(trainable=set())
    cfg = params.config
    prompt_tk = {}
    context_tk = {}
    preds = {s.id: {} for s in corpus.sentences}
    for inst in build_instances(corpus, registry):
        if inst.label not in prompt_tk:
            prompt_tk[inst.label] = wordpiece_tokenize(inst.prompt_text, vocab)
        if inst.sentence_id not in context_tk:
            context_tk = {inst.sentence_id: wordpiece_tokenize(inst.context_text, vocab)}
        enc = encode_instance(inst, vocab, max_len, prompt_tokens=prompt_tk[inst.label],
                              context_tokens=context_tk[inst.sentence_id]).enc
        scores = forward(nodes, enc, cfg, mode, inst.label)
        for sp in decode_spans(scores, enc, inst.label, thresholds, cfg.max_span_len):
            key = (sp.char_start, sp.char_end, sp.label)
            # distinct token spans can collapse to one char span; keep the best score
            if sp.score > preds[inst.sentence_id].get(key, -1.0):
                preds[inst.sentence_id][key] = sp.score
    return {sid: sorted((s, e, lab, sc) for (s, e, lab), sc in d.items()) for sid, d in preds.items()}


def evaluate_model(params: ModelParams, corpus: AnnotatedCorpus, registry: PromptRegistry,
                   vocab: Vocabulary, thresholds=(0.5, 0.5, 0.5), max_len: int = 512,
                   mode=HARD, labels=None):
    """End to end: instances -> encode -> forward -> decode -> strict scoring.

    Returns ``(report, dump_lines)`` where the dump is standoff JSONL with a
    ``score`` per entity.
    """
    preds = predict_corpus(params, corpus, registry, vocab, thresholds, max_len, mode, labels)
    report = score_corpus(corpus, {sid: [p[:3] for p in ps] for sid, ps in preds.items()})
    return report, prediction_dump(corpus, preds)


def prediction_dump(corpus: AnnotatedCorpus, preds: dict) -> list[str]:
    lines = []
    for sent in corpus.sentences:
        ps = preds.get(sent.id, [])
        pred_sent = Sentence(sent.id, sent.text, [EntityMention(s, e, lab) for s, e, lab, _ in ps])
        lines.append(json.dumps(sentence_to_json(pred_sent, [sc for *_, sc in ps]), ensure_ascii=False))
    return lines
