"""Per-label prompts and the (prompt, anchors, context) instance transform."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .corpus import AnnotatedCorpus, LabelSet

HARD, SOFT = "hard", "soft"
DEFAULT_TEMPLATE = "find all {gloss} entities in the text"


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    label: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise TemplateError(f"empty prompt text for label {self.label!r}")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptRegistry:
    """Label -> template. Soft mode still needs the text: it seeds the
    learnable prompt rows and fixes their count."""

    templates: dict = field(default_factory=dict)
    mode: str = HARD

    def __post_init__(self):
        if self.mode not in (HARD, SOFT):
            raise TemplateError(f"prompt mode must be 'hard' or 'soft', got {self.mode!r}")

    def __getitem__(self, label) -> PromptTemplate:
        try:
            return self.templates[label]
        except KeyError:
            raise TemplateError(f"no prompt template for label {label!r}") from None

    def __contains__(self, label):
        return label in self.templates

    def with_mode(self, mode) -> "PromptRegistry":
        return PromptRegistry(dict(self.templates), mode)

    def digests(self) -> dict:
        return {lab: t.digest for lab, t in sorted(self.templates.items())}

    @classmethod
    def from_mapping(cls, mapping: dict, mode=HARD) -> "PromptRegistry":
        templates = {}
        for label, text in mapping.items():
            if not isinstance(text, str):
                raise TemplateError(f"template for {label!r} must be a string")
            templates[label] = PromptTemplate(label, text)
        return cls(templates, mode)


def default_registry(label_set: LabelSet, glosses: dict | None = None, mode=HARD) -> PromptRegistry:
    glosses = glosses or {}
    return PromptRegistry(
        {lab: PromptTemplate(lab, DEFAULT_TEMPLATE.format(gloss=glosses.get(lab, lab))) for lab in label_set},
        mode,
    )


def _read_json_object(path, what):
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TemplateError(f"{what} file {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict) or not all(isinstance(v, str) for v in obj.values()):
        raise TemplateError(f"{what} file {path} must be a JSON object of strings")
    return obj


def load_templates(path, mode=HARD) -> PromptRegistry:
    return PromptRegistry.from_mapping(_read_json_object(path, "template"), mode)


def load_glosses(path) -> dict:
    return _read_json_object(path, "gloss")


@dataclass(frozen=True)
class MrcInstance:
    sentence_id: str
    label: str
    prompt_text: str
    context_text: str
    answers: tuple[tuple[int, int], ...] = ()

    def to_json(self) -> dict:
        return {
            "sentence_id": self.sentence_id,
            "label": self.label,
            "prompt": self.prompt_text,
            "context": self.context_text,
            "answers": [list(a) for a in self.answers],
        }


def build_instances(corpus: AnnotatedCorpus, registry: PromptRegistry) -> list[MrcInstance]:
    """One instance per (sentence, label), sentence-major, label order as in
    the label set. Sentences without mentions of a label give a negative
    (answer-free) instance."""
    labels = corpus.label_set.labels
    missing = [lab for lab in labels if lab not in registry]
    if missing:
        raise TemplateError(f"no prompt template for label(s): {', '.join(missing)}")
    out = []
    for sent in corpus.sentences:
        by_label = {lab: [] for lab in labels}
        for m in sent.mentions:
            by_label[m.label].append((m.start, m.end))
        for lab in labels:
            out.append(MrcInstance(sent.id, lab, registry[lab].text, sent.text, tuple(by_label[lab])))
    return out


@dataclass
class LintReport:
    missing: list = field(default_factory=list)
    unused: list = field(default_factory=list)
    empty: list = field(default_factory=list)
    duplicates: list = field(default_factory=list)  # groups of labels sharing one text

    def __bool__(self):
        return bool(self.missing or self.unused or self.empty or self.duplicates)

    @property
    def has_errors(self) -> bool:
        return bool(self.missing or self.empty)

    def to_json(self) -> dict:
        return {"missing": self.missing, "unused": self.unused, "empty": self.empty,
                "duplicates": self.duplicates}


def lint_registry(registry, label_set: LabelSet) -> LintReport:
    """Report-only check of a registry (or a plain label -> text mapping)."""
    if isinstance(registry, PromptRegistry):
        texts = {lab: t.text for lab, t in registry.templates.items()}
    else:
        texts = dict(registry)
    report = LintReport()
    report.missing = [lab for lab in label_set if lab not in texts]
    report.unused = sorted(lab for lab in texts if lab not in label_set)
    report.empty = sorted(lab for lab, t in texts.items() if not str(t).strip())
    groups = {}
    for lab, t in sorted(texts.items()):
        if str(t).strip():
            groups.setdefault(" ".join(str(t).split()), []).append(lab)
    report.duplicates = [labs for labs in groups.values() if len(labs) > 1]
    return report
