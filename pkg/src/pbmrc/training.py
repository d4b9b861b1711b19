"""Span losses, Adam, the epoch loop with dev-set selection, gradient checks."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .corpus import AnnotatedCorpus
from .evaluation import evaluate_model
from .model import (HARD, SOFT, SOFT_PREFIX, Checkpoint, EncoderConfig, ModelParams, SpanScores,
                    forward, init_params, init_soft_prompts_from_templates, is_decayed)
from .prompting import PromptRegistry, build_instances
from .tensor import Rng
from .tokenizer import Vocabulary, encode_instance, wordpiece_tokenize

log = logging.getLogger(__name__)

FREEZE_POLICIES = ("full", "prompt_only", "prompt_and_heads")


class TrainError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 3e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    freeze_policy: str = "full"
    loss_weights: tuple = (1.0, 1.0, 1.0)  # start, end, match
    selection_metric: str = "f1"
    patience: int | None = None
    target_metric: float | None = None  # stop once the selection metric reaches this
    seed: int = 0
    prompt_mode: str = HARD
    max_len: int = 512
    thresholds: tuple = (0.5, 0.5, 0.5)
    log_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "loss_weights", tuple(self.loss_weights))
        object.__setattr__(self, "thresholds", tuple(self.thresholds))
        if self.max_epochs < 1:
            raise TrainError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise TrainError("learning_rate must be > 0")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0 or not any(self.loss_weights):
            raise TrainError("loss weights must be three non-negative numbers, not all zero")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise TrainError(f"freeze_policy must be one of {FREEZE_POLICIES}")
        if self.prompt_mode not in (HARD, SOFT):
            raise TrainError("prompt_mode must be 'hard' or 'soft'")
        if self.freeze_policy != "full" and self.prompt_mode != SOFT:
            raise TrainError(f"freeze policy {self.freeze_policy!r} trains soft prompts; "
                             "it requires prompt_mode 'soft'")
        if self.selection_metric not in ("f1", "precision"):
            raise TrainError("selection_metric must be 'f1' or 'precision'")
        if not all(0.0 < t < 1.0 for t in self.thresholds) or len(self.thresholds) != 3:
            raise TrainError("thresholds must be three values in (0, 1)")

    def to_dict(self):
        d = asdict(self)
        for k in ("adam_betas", "loss_weights", "thresholds"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    total: T.Node
    start_loss: float
    end_loss: float
    match_loss: float
    counts: dict = field(default_factory=dict)  # head -> (positives, negatives)

    @property
    def total_value(self) -> float:
        return float(self.total.value[0])


def compute_loss(scores: SpanScores, gold_spans, weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
    """Mean BCE-with-logits per head over unmasked positions (start/end) and
    unmasked banded pairs (match); weighted sum for the total."""
    L = len(scores.context_mask)
    ctx = scores.context_mask
    band = scores.band_mask
    ts = np.zeros(L)
    te = np.zeros(L)
    tm = np.zeros((L, L))
    for i, j in gold_spans:
        if not (ctx[i] and ctx[j]) or j < i:
            raise TrainError(f"gold span {(i, j)} outside the context range")
        if not band[i, j]:
            raise TrainError(f"gold span {(i, j)} longer than max_span_len")
        ts[i] = te[j] = tm[i, j] = 1.0
    ls = T.bce_with_logits(scores.start_logits, ts, ctx)
    le = T.bce_with_logits(scores.end_logits, te, ctx)
    lm = T.bce_with_logits(scores.match_logits, tm, band)
    a, b, c = weights
    parts = [T.scale(n, w) for n, w in ((ls, a), (le, b), (lm, c)) if w]
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    counts = {
        "start": (int(ts[ctx].sum()), int(ctx.sum() - ts[ctx].sum())),
        "end": (int(te[ctx].sum()), int(ctx.sum() - te[ctx].sum())),
        "match": (int(tm[band].sum()), int(band.sum() - tm[band].sum())),
    }
    return LossBreakdown(total, float(ls.value[0]), float(le.value[0]), float(lm.value[0]), counts)


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def trainable_names(params: ModelParams, policy: str) -> list:
    names = list(params.arrays)
    if policy == "full":
        return names
    if policy == "prompt_only":
        return [n for n in names if n.startswith(SOFT_PREFIX)]
    if policy == "prompt_and_heads":
        return [n for n in names if n.startswith(SOFT_PREFIX) or n.startswith("head.")]
    raise TrainError(f"unknown freeze policy {policy!r}")


def clip_gradients(grads: dict, max_norm: float | None) -> float:
    """Scale ``grads`` in place to global L2 norm ``max_norm``; return the
    norm before clipping."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam with decoupled weight decay, in place.

    Only arrays allowed by ``config.freeze_policy`` and present in ``grads``
    move.
    """
    b1, b2 = config.adam_betas
    lr, eps, wd = config.learning_rate, config.adam_eps, config.weight_decay
    allowed = set(trainable_names(params, config.freeze_policy))
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        if name not in allowed:
            continue
        p = params.arrays[name]
        if g.shape != p.shape:
            raise TrainError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd and is_decayed(name):
            update = update + wd * p
        p -= lr * update
    return params, state


# ---------------------------------------------------------------- loop


def prompt_token_ids(registry: PromptRegistry, labels, vocab: Vocabulary) -> dict:
    return {lab: list(wordpiece_tokenize(registry[lab].text, vocab).ids) for lab in labels}


def encode_corpus(corpus: AnnotatedCorpus, registry: PromptRegistry, vocab: Vocabulary, max_len: int):
    """Encode all instances. Returns (encoded list, dropped answers, inexact answers)."""
    prompts = {lab: wordpiece_tokenize(registry[lab].text, vocab) for lab in corpus.label_set}
    out, dropped, inexact = [], 0, 0
    ctx = None
    for inst in build_instances(corpus, registry):
        if ctx is None or ctx[0] != inst.sentence_id:
            ctx = (inst.sentence_id, wordpiece_tokenize(inst.context_text, vocab))
        e = encode_instance(inst, vocab, max_len, prompt_tokens=prompts[inst.label], context_tokens=ctx[1])
        out.append(e)
        dropped += e.dropped
        inexact += e.inexact
    return out, dropped, inexact


def batch_loss(nodes, batch, config: EncoderConfig, train_config: TrainConfig, rng: Rng | None,
               training: bool):
    """Mean total loss over ``batch`` (a [1] node) and mean component losses."""
    parts = []
    comps = np.zeros(3)
    for k, item in enumerate(batch):
        scores = forward(nodes, item.enc, config, train_config.prompt_mode, item.enc.label,
                         rng.split(k) if rng is not None else None, training)
        lb = compute_loss(scores, item.answers, train_config.loss_weights)
        parts.append(lb.total)
        comps += (lb.start_loss, lb.end_loss, lb.match_loss)
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    return T.scale(total, 1.0 / len(batch)), comps / len(batch)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    best_epoch: int
    params: ModelParams  # parameters after the last epoch

    def log_lines(self) -> list:
        return [json.dumps(rec, sort_keys=True) for rec in self.log]


def make_initial_params(enc_config: EncoderConfig, train_config: TrainConfig, registry: PromptRegistry,
                        labels, vocab: Vocabulary, init: ModelParams | None = None) -> ModelParams:
    pids = prompt_token_ids(registry, labels, vocab)
    if init is None:
        params = init_params(enc_config, Rng(train_config.seed).split(1))
    else:
        if init.config.hidden_size != enc_config.hidden_size:
            raise TrainError("initial parameters do not match the encoder config")
        params = init.copy()
    if train_config.prompt_mode != SOFT:
        return params
    # seeded from the (possibly trained) token embeddings; learned rows in a
    # soft init checkpoint are kept
    missing = {lab: ids for lab, ids in pids.items()
               if SOFT_PREFIX + lab not in params.arrays
               or params.arrays[SOFT_PREFIX + lab].shape[0] != len(ids)}
    init_soft_prompts_from_templates(params, missing)
    return params


def train(train_corpus: AnnotatedCorpus, dev_corpus: AnnotatedCorpus, registry: PromptRegistry,
          vocab: Vocabulary, enc_config: EncoderConfig, train_config: TrainConfig,
          init: ModelParams | None = None, on_epoch=None) -> TrainResult:
    """Train and keep the checkpoint with the best dev selection metric
    (ties go to the earlier epoch)."""
    if not len(train_corpus) or not len(dev_corpus):
        raise TrainError("train and dev splits must be non-empty")
    if enc_config.vocab_size != len(vocab):
        raise TrainError(f"encoder vocab_size {enc_config.vocab_size} != vocabulary size {len(vocab)}")
    labels = train_corpus.label_set.labels
    registry = registry.with_mode(train_config.prompt_mode)
    data, dropped, inexact = encode_corpus(train_corpus, registry, vocab, train_config.max_len)
    if dropped or inexact:
        log.info("training answers: %d dropped (truncation/alignment), %d inexact", dropped, inexact)
    params = make_initial_params(enc_config, train_config, registry, labels, vocab, init)
    trainable = set(trainable_names(params, train_config.freeze_policy))
    if train_config.prompt_mode == HARD:
        trainable = {n for n in trainable if not n.startswith(SOFT_PREFIX)}
    state = OptimizerState()
    root = Rng(train_config.seed)
    history = []
    best = None
    best_metric = -1.0
    best_epoch = 0
    stale = 0
    bs = train_config.batch_size
    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        order = root.split(2, epoch).permutation(len(data))
        sums = np.zeros(4)
        nb = 0
        for step, lo in enumerate(range(0, len(data), bs)):
            batch = [data[i] for i in order[lo:lo + bs]]
            nodes = params.nodes(trainable)
            loss, comps = batch_loss(nodes, batch, enc_config, train_config,
                                     root.split(3, epoch, step), training=True)
            value = float(loss.value[0])
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, step {step}; components "
                    f"start/end/match = {comps.tolist()}, sentences "
                    f"{[b.enc.sentence_id for b in batch]}")
            T.backward(loss)
            grads = {k: (nodes[k].grad if nodes[k].grad is not None else np.zeros_like(params.arrays[k]))
                     for k in sorted(trainable)}
            clip_gradients(grads, train_config.clip_norm)
            adam_step(params, grads, state, train_config)
            sums += (comps[0], comps[1], comps[2], value)
            nb += 1
        sums /= nb
        report, _ = evaluate_model(params, dev_corpus, registry, vocab, train_config.thresholds,
                                   train_config.max_len, train_config.prompt_mode)
        rec = {
            "epoch": epoch,
            "start_loss": float(sums[0]), "end_loss": float(sums[1]), "match_loss": float(sums[2]),
            "total_loss": float(sums[3]),
            "dev_precision": report.precision, "dev_recall": report.recall, "dev_f1": report.f1,
        }
        if train_config.log_wall_time:
            rec["wall_time"] = time.perf_counter() - t0
        history.append(rec)
        log.info("epoch %d loss %.5f dev P=%.4f R=%.4f F1=%.4f", epoch, sums[3], report.precision,
                 report.recall, report.f1)
        if on_epoch is not None:
            on_epoch(rec)
        metric = report.f1 if train_config.selection_metric == "f1" else report.precision
        if metric > best_metric:
            best_metric, best_epoch, best, stale = metric, epoch, params.copy(), 0
        else:
            stale += 1
        if train_config.patience is not None and stale >= train_config.patience:
            break
        if train_config.target_metric is not None and best_metric >= train_config.target_metric:
            break
    ckpt = Checkpoint(best, labels, train_config.prompt_mode, registry.digests(),
                      {"best_epoch": best_epoch, "selection_metric": train_config.selection_metric,
                       "best_metric": best_metric})
    return TrainResult(ckpt, history, best_epoch, params)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: dict  # group -> max relative error over sampled coordinates
    tolerance: float
    coords_checked: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [g for g, e in self.max_rel_error.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> list:
        return [f"{'ok  ' if e <= self.tolerance else 'FAIL'} {g:<40s} max_rel_err={e:.3e} "
                f"n={self.coords_checked.get(g, 0)}" for g, e in self.max_rel_error.items()]


GRAD_FLOOR = 1e-6


def relative_error(a, n, floor=GRAD_FLOOR):
    """|a - n| / max(|a|, |n|, floor).

    Central differences at h=1e-5 carry ~eps*|loss|/h ~ 1e-11 of round-off,
    so below ``floor`` the check degrades to an absolute one (tol * floor).
    """
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check_model(params: ModelParams, batch, mode=SOFT, tolerance=1e-4, coords=20, h=1e-5,
                         seed=0, loss_weights=(1.0, 1.0, 1.0), groups=None) -> GradCheckReport:
    """Central differences vs the tape for every parameter array ("group").

    Dropout is switched off. At least ``coords`` coordinates per group (all of
    them for smaller arrays); half are drawn among coordinates the analytic
    gradient marks as non-zero, the rest uniformly.
    """
    config = EncoderConfig(**{**params.config.to_dict(), "dropout_prob": 0.0})
    tc = TrainConfig(prompt_mode=mode, loss_weights=tuple(loss_weights), max_len=config.max_position_embeddings)
    nodes = params.nodes()
    loss, _ = batch_loss(nodes, batch, config, tc, None, training=False)
    T.backward(loss)
    analytic = {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in nodes.items()}
    rng = Rng(seed).split(7)
    frozen = params.nodes(trainable=set())

    def loss_at():
        value, _ = batch_loss(frozen, batch, config, tc, None, training=False)
        return float(value.value[0])

    report = GradCheckReport({}, tolerance)
    for k, name in enumerate(groups or list(params.arrays)):
        arr = params.arrays[name]
        flat = arr.reshape(-1)
        g = analytic[name].reshape(-1)
        if flat.size <= coords:
            picks = np.arange(flat.size)
        else:
            sub = rng.split(k)
            nz = np.flatnonzero(g)
            a = sub.permutation(nz)[:coords // 2] if nz.size else np.zeros(0, dtype=np.int64)
            rest = np.setdiff1d(np.arange(flat.size), a)
            b = sub.permutation(rest)[:coords - len(a)]
            picks = np.sort(np.concatenate([a, b]).astype(np.int64))
        worst = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_at()
            flat[idx] = orig - h
            lm = loss_at()
            flat[idx] = orig
            num = (lp - lm) / (2 * h)
            worst = max(worst, relative_error(g[idx], num))
        report.max_rel_error[name] = worst
        report.coords_checked[name] = int(len(picks))
    return report
