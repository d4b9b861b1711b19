"""``pbmrc`` command line: convert, lint-templates, train, predict, evaluate, gradcheck.

Exit codes: 0 ok, 1 validation error, 2 I/O error, 3 non-finite training
loss, 4 gradient check failure. Results go to stdout; diagnostics to stderr
(verbosity from ``PBMRC_LOG`` = error | info | debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import CorpusError, read_corpus, to_conll_bio, to_standoff_jsonl
from .evaluation import LabelMismatchError, evaluate_model, predict_corpus, prediction_dump
from .model import (PRESETS, SOFT_PREFIX, CheckpointError, EncoderConfig, ModelError, init_params,
                    init_soft_prompts_from_templates, read_checkpoint, write_checkpoint)
from .prompting import HARD, SOFT, TemplateError, build_instances, lint_registry, load_templates
from .tensor import Rng
from .tokenizer import AlignmentError, EncodingError, VocabError, read_vocab
from .training import (FREEZE_POLICIES, NonFiniteLossError, TrainConfig, TrainError, encode_corpus,
                       gradient_check_model, prompt_token_ids, train)

log = logging.getLogger("pbmrc")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NONFINITE, EXIT_GRADCHECK = 0, 1, 2, 3, 4

ENCODER_KEYS = tuple(f.name for f in fields(EncoderConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
INPUT_PATHS = ("corpus", "dev_corpus", "vocab", "templates", "checkpoint", "init_checkpoint")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Flat, JSON-serialisable run description: encoder and training
    settings, file paths and a few command options."""

    preset: str = "desk"
    encoder: dict = field(default_factory=dict)  # EncoderConfig overrides on top of the preset
    train: dict = field(default_factory=dict)  # TrainConfig fields
    corpus: str | None = None
    dev_corpus: str | None = None  # defaults to ``corpus``
    corpus_format: str = "auto"
    vocab: str | None = None
    lowercase: bool | None = None  # None: taken from the checkpoint, else False
    templates: str | None = None
    checkpoint: str | None = None
    init_checkpoint: str | None = None
    out: str | None = None
    gradcheck_tolerance: float = 1e-4
    gradcheck_coords: int = 20
    gradcheck_instances: int = 3
    gradcheck_max_len: int = 32

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        own = {f.name for f in fields(cls)} - {"encoder", "train"}
        rc = cls()
        unknown = []
        for key, value in flat.items():
            if key in ("encoder", "train") and isinstance(value, dict):
                for k, v in value.items():
                    rc._set(k, v, unknown)
            else:
                rc._set(key, value, unknown, own)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return rc

    def _set(self, key, value, unknown, own=None):
        own = own or ({f.name for f in fields(self)} - {"encoder", "train"})
        if key in ENCODER_KEYS:
            self.encoder[key] = value
        elif key in TRAIN_KEYS:
            self.train[key] = value
        elif key in own:
            setattr(self, key, value)
        else:
            unknown.append(key)

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["encoder"] = dict(sorted(self.encoder.items()))
        d["train"] = dict(sorted(self.train.items()))
        return d

    # ---- resolution

    def encoder_config(self, vocab_size: int | None = None) -> EncoderConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        d = dict(PRESETS[self.preset])
        if vocab_size is not None:
            d["vocab_size"] = vocab_size
        d.update(self.encoder)
        try:
            cfg = EncoderConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad encoder setting: {exc}") from exc
        if vocab_size is not None and cfg.vocab_size != vocab_size:
            raise ConfigError(f"vocab_size {cfg.vocab_size} does not match the vocabulary file "
                              f"({vocab_size} tokens)")
        return cfg

    def train_config(self, enc: EncoderConfig | None = None) -> TrainConfig:
        try:
            tc = TrainConfig.from_dict(dict(self.train))
        except TypeError as exc:
            raise ConfigError(f"bad training setting: {exc}") from exc
        if enc is not None and tc.max_len > enc.max_position_embeddings:
            log.info("max_len %d capped to max_position_embeddings %d", tc.max_len, enc.max_position_embeddings)
            tc = TrainConfig.from_dict({**tc.to_dict(), "max_len": enc.max_position_embeddings})
        return tc

    def require(self, *names):
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"--{name.replace('_', '-')} is required")
        for name in INPUT_PATHS:
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"--{name.replace('_', '-')}: path does not exist: {value}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens) -> dict:
    """``--some-key value`` / ``--some-key=value`` pairs -> {"some_key": value}."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            key, raw = tok[2:], tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = _parse_value(raw)
    return out


_FLAG_KEYS = {"corpus": "corpus", "vocab": "vocab", "templates": "templates", "checkpoint": "checkpoint",
              "out": "out", "prompt_mode": "prompt_mode", "freeze": "freeze_policy", "seed": "seed",
              "preset": "preset"}


def resolve_config(args, extra) -> tuple[RunConfig, set]:
    """defaults < config file < named flags < ``--key value`` overrides.
    Returns the config and the set of keys set explicitly."""
    flat = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config {args.config}: invalid JSON ({exc.msg})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"--config {args.config}: expected a JSON object")
        for k, v in loaded.items():
            if k in ("encoder", "train") and isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    flat.update(parse_overrides(extra))
    return RunConfig.from_flat(flat), set(flat)


# ---------------------------------------------------------------- helpers


def _emit(obj) -> None:
    sys.stdout.write((obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True)) + "\n")


def _write_or_emit(text: str, path) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _lowercase(rc: RunConfig, ckpt=None) -> bool:
    if rc.lowercase is not None:
        return bool(rc.lowercase)
    if ckpt is not None:
        return bool(ckpt.extra.get("lowercase", False))
    return False


def _load_inputs(rc: RunConfig, ckpt=None, mode=None):
    vocab = read_vocab(rc.vocab, lowercase=_lowercase(rc, ckpt))
    registry = load_templates(rc.templates, mode or HARD)
    corpus = read_corpus(rc.corpus, rc.corpus_format)
    return vocab, registry, corpus


# ---------------------------------------------------------------- commands


def cmd_convert(args, rc: RunConfig, explicit) -> int:
    rc.require("corpus")
    corpus = read_corpus(rc.corpus, args.input_format)
    summary = {"sentences": len(corpus), "mentions": sum(len(s.mentions) for s in corpus.sentences),
               "repairs": corpus.report.repair_count,
               "discontiguous_dropped": corpus.report.discontiguous_dropped}
    if args.to == "standoff":
        text = to_standoff_jsonl(corpus)
    elif args.to == "bio":
        text, dropped = to_conll_bio(corpus)
        summary["bio_dropped_mentions"] = dropped
    else:
        if rc.templates is None:
            raise ConfigError("--templates is required when converting to instances")
        instances = build_instances(corpus, load_templates(rc.templates))
        text = "".join(json.dumps(i.to_json(), ensure_ascii=False) + "\n" for i in instances)
        summary["instances"] = len(instances)
    _write_or_emit(text, rc.out)
    if rc.out:
        _emit(summary)
    else:
        print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_lint(args, rc: RunConfig, explicit) -> int:
    rc.require("templates", "corpus")
    try:
        with open(rc.templates, encoding="utf-8") as fh:
            mapping = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--templates {rc.templates}: invalid JSON ({exc.msg})") from exc
    report = lint_registry(mapping, read_corpus(rc.corpus, rc.corpus_format).label_set)
    _emit(report.to_json())
    return EXIT_INVALID if report.has_errors else EXIT_OK


def cmd_train(args, rc: RunConfig, explicit) -> int:
    rc.require("corpus", "vocab", "templates", "out")
    tc_check = rc.train_config()  # surfaces config errors before any I/O work
    vocab, registry, corpus = _load_inputs(rc, mode=tc_check.prompt_mode)
    dev = read_corpus(rc.dev_corpus, rc.corpus_format) if rc.dev_corpus else corpus
    init = None
    if rc.init_checkpoint:
        init = read_checkpoint(rc.init_checkpoint).params
        enc = init.config if not rc.encoder and "preset" not in explicit else rc.encoder_config(len(vocab))
        if enc != init.config:
            init = read_checkpoint(rc.init_checkpoint, enc).params
    else:
        enc = rc.encoder_config(len(vocab))
    if enc.vocab_size != len(vocab):
        raise ConfigError(f"vocab_size {enc.vocab_size} does not match the vocabulary file ({len(vocab)} tokens)")
    tc = rc.train_config(enc)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = rc.to_json()
    resolved["encoder"] = {k: v for k, v in enc.to_dict().items()}
    resolved["train"] = tc.to_dict()
    resolved["lowercase"] = vocab.lowercase
    for key in INPUT_PATHS + ("out",):
        if resolved[key] is not None:
            resolved[key] = str(Path(resolved[key]).resolve())
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result = train(corpus, dev, registry, vocab, enc, tc, init=init)
    result.checkpoint.extra["lowercase"] = vocab.lowercase
    write_checkpoint(result.checkpoint, out / "checkpoint.pbmrc")
    (out / "epoch_log.jsonl").write_text("".join(line + "\n" for line in result.log_lines()), encoding="utf-8")
    _emit({"best_epoch": result.best_epoch, "best_metric": result.checkpoint.extra["best_metric"],
           "epochs": len(result.log), "checkpoint": str(out / "checkpoint.pbmrc")})
    return EXIT_OK


def _load_for_inference(rc: RunConfig, explicit):
    rc.require("checkpoint", "corpus", "vocab", "templates")
    ckpt = read_checkpoint(rc.checkpoint)
    vocab = read_vocab(rc.vocab, lowercase=_lowercase(rc, ckpt))
    if rc.encoder or "preset" in explicit:
        ckpt = read_checkpoint(rc.checkpoint, rc.encoder_config(len(vocab)))
    if ckpt.params.config.vocab_size != len(vocab):
        raise ConfigError(f"checkpoint vocab_size {ckpt.params.config.vocab_size} does not match the "
                          f"vocabulary file ({len(vocab)} tokens)")
    mode = rc.train.get("prompt_mode", ckpt.prompt_mode)
    if mode not in (HARD, SOFT):
        raise ConfigError(f"prompt mode must be 'hard' or 'soft', got {mode!r}")
    registry = load_templates(rc.templates, mode)
    for lab, digest in ckpt.template_digests.items():
        if lab in registry and registry[lab].digest != digest:
            log.warning("template for %r differs from the one the checkpoint was trained with", lab)
    if mode == SOFT:
        missing = [lab for lab in ckpt.labels if SOFT_PREFIX + lab not in ckpt.params.arrays]
        if missing:
            raise ConfigError(f"checkpoint has no soft prompt for label(s) {missing}")
    corpus = read_corpus(rc.corpus, rc.corpus_format)
    tc = rc.train_config(ckpt.params.config)
    return ckpt, vocab, registry, corpus, mode, tc


def cmd_predict(args, rc: RunConfig, explicit) -> int:
    ckpt, vocab, registry, corpus, mode, tc = _load_for_inference(rc, explicit)
    preds = predict_corpus(ckpt.params, corpus, registry, vocab, tc.thresholds, tc.max_len, mode,
                           labels=ckpt.labels or None)
    _write_or_emit("".join(line + "\n" for line in prediction_dump(corpus, preds)), rc.out)
    return EXIT_OK


def cmd_evaluate(args, rc: RunConfig, explicit) -> int:
    ckpt, vocab, registry, corpus, mode, tc = _load_for_inference(rc, explicit)
    report, _ = evaluate_model(ckpt.params, corpus, registry, vocab, tc.thresholds, tc.max_len, mode,
                               labels=ckpt.labels or None)
    if rc.out:
        Path(rc.out).parent.mkdir(parents=True, exist_ok=True)
        Path(rc.out).write_text(report.dumps() + "\n", encoding="utf-8")
    _emit(report.summary_line())
    return EXIT_OK


def cmd_gradcheck(args, rc: RunConfig, explicit) -> int:
    """Soft mode unless a prompt mode is given, so the soft-prompt bank is
    checked along with the encoder and heads."""
    from .synthetic import synthetic_corpus, synthetic_registry, synthetic_vocab

    rc.require()
    mode = rc.train.get("prompt_mode", SOFT)
    if rc.corpus:
        rc.require("vocab", "templates")
        vocab, registry, corpus = _load_inputs(rc)
    else:
        corpus, registry = synthetic_corpus(), synthetic_registry()
        vocab = synthetic_vocab(corpus, registry)
    seed = int(rc.train.get("seed", 0))
    enc = rc.encoder_config(len(vocab))
    params = init_params(enc, Rng(seed).split(1))
    init_soft_prompts_from_templates(params, prompt_token_ids(registry, corpus.label_set, vocab))
    data, _, _ = encode_corpus(corpus, registry, vocab, min(rc.gradcheck_max_len, enc.max_position_embeddings))
    candidates = [d for d in data if d.answers] or data
    order = Rng(seed).split(5).permutation(len(candidates))
    batch = [candidates[i] for i in order[:rc.gradcheck_instances]]
    report = gradient_check_model(params, batch, mode=mode, tolerance=rc.gradcheck_tolerance,
                                  coords=rc.gradcheck_coords, seed=seed)
    for line in report.lines():
        _emit(line)
    _emit(f"{'PASS' if report.passed else 'FAIL'} groups={len(report.max_rel_error)} "
          f"failed={len(report.failed)} tolerance={report.tolerance:g}")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


COMMANDS = {"convert": cmd_convert, "lint-templates": cmd_lint, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbmrc", description="Prompt-conditioned span extraction for NER.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False,
                           epilog="Any config key can be overridden with --key value (JSON-parsed).")
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--corpus", help="input corpus (.jsonl standoff or CoNLL BIO)")
        p.add_argument("--vocab", help="WordPiece vocabulary, one token per line")
        p.add_argument("--templates", help="JSON object label -> prompt text")
        p.add_argument("--checkpoint")
        p.add_argument("--out", help="output file (output directory for train)")
        p.add_argument("--prompt-mode", choices=(HARD, SOFT))
        p.add_argument("--freeze", choices=FREEZE_POLICIES)
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=sorted(PRESETS))
        if name == "convert":
            p.add_argument("--from", dest="input_format", choices=("auto", "standoff", "bio"), default="auto")
            p.add_argument("--to", choices=("standoff", "bio", "instances"), required=True)
    return parser


def _setup_logging():
    level = os.environ.get("PBMRC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(stream=sys.stderr, level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if level not in levels:
        log.warning("PBMRC_LOG=%r not in %s; using info", level, sorted(levels))


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        rc, explicit = resolve_config(args, extra)
        return COMMANDS[args.command](args, rc, explicit)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, CorpusError, TemplateError, VocabError, ModelError, CheckpointError, TrainError,
            LabelMismatchError, AlignmentError, EncodingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
