"""Deterministic templated corpus for overfit runs and smoke tests."""

from __future__ import annotations

from .corpus import AnnotatedCorpus, EntityMention, LabelSet, Sentence
from .prompting import PromptRegistry, PromptTemplate
from .tensor import Rng
from .tokenizer import build_vocab

DRUGS = ["aspirin", "ibuprofen", "lipitor", "warfarin", "metformin", "naproxen", "celebrex", "voltaren"]
ADRS = ["nausea", "headache", "dizziness", "chest pain", "muscle cramps", "rash", "stomach upset",
        "fatigue"]

# (pattern, has_drug, has_adr); at most one mention per label per sentence
PATTERNS = [
    ("{drug} gave me {adr} .", True, True),
    ("after taking {drug} i had {adr} for days .", True, True),
    ("i stopped {drug} because of {adr} .", True, True),
    ("{adr} started soon after {drug} .", True, True),
    ("my doctor prescribed {drug} last week .", True, False),
    ("{drug} works well for me .", True, False),
    ("woke up with {adr} again .", False, True),
    ("no side effects so far .", False, False),
]

LABELS = ("ADR", "Drug")
GLOSSES = {"ADR": "adverse reaction", "Drug": "drug"}


def synthetic_corpus(n_sentences: int = 40, seed: int = 42) -> AnnotatedCorpus:
    rng = Rng(seed)
    sentences = []
    for k in range(n_sentences):
        pattern, has_drug, has_adr = PATTERNS[int(rng.integers(len(PATTERNS)))]
        drug = DRUGS[int(rng.integers(len(DRUGS)))]
        adr = ADRS[int(rng.integers(len(ADRS)))]
        text, mentions = _fill(pattern, {"drug": (drug, "Drug"), "adr": (adr, "ADR")})
        sentences.append(Sentence(f"syn{k:03d}", text, mentions))
    return AnnotatedCorpus(LabelSet(LABELS), sentences)


def _fill(pattern, slots):
    out = []
    mentions = []
    pos = 0
    rest = pattern
    while "{" in rest:
        pre, _, tail = rest.partition("{")
        key, _, rest = tail.partition("}")
        out.append(pre)
        pos += len(pre)
        value, label = slots[key]
        mentions.append(EntityMention(pos, pos + len(value), label))
        out.append(value)
        pos += len(value)
    out.append(rest)
    return "".join(out), sorted(mentions)


def synthetic_registry(mode="hard") -> PromptRegistry:
    return PromptRegistry(
        {lab: PromptTemplate(lab, f"find all {GLOSSES[lab]} entities in the text") for lab in LABELS}, mode)


def synthetic_vocab(corpus: AnnotatedCorpus | None = None, registry: PromptRegistry | None = None):
    corpus = corpus or synthetic_corpus()
    registry = registry or synthetic_registry()
    texts = [s.text for s in corpus.sentences] + [t.text for t in registry.templates.values()]
    return build_vocab(texts, lowercase=True)


def write_desk_data(out_dir, n_sentences: int = 40, seed: int = 42) -> dict:
    """Write corpus.jsonl, vocab.txt, templates.json and a run config into
    ``out_dir``; returns the file paths by role."""
    import json
    from pathlib import Path

    from .corpus import to_standoff_jsonl
    from .tokenizer import write_vocab

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synthetic_corpus(n_sentences, seed)
    registry = synthetic_registry()
    paths = {k: out / f for k, f in (("corpus", "corpus.jsonl"), ("vocab", "vocab.txt"),
                                      ("templates", "templates.json"), ("config", "config.json"))}
    paths["corpus"].write_text(to_standoff_jsonl(corpus), encoding="utf-8")
    write_vocab(synthetic_vocab(corpus, registry), paths["vocab"])
    paths["templates"].write_text(
        json.dumps({lab: t.text for lab, t in registry.templates.items()}, indent=2) + "\n", encoding="utf-8")
    config = {"preset": "desk", "corpus": str(paths["corpus"]), "vocab": str(paths["vocab"]),
              "templates": str(paths["templates"]), "lowercase": True, "max_len": 64}
    paths["config"].write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
