"""BERT-style encoder, soft-prompt injection, span heads and span decoding.

Parameters live in a flat ``name -> ndarray`` mapping (see ``param_shapes``
for the naming scheme). A forward pass wraps them in tape leaves so the same
arrays serve inference, training and gradient checking.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import Node, Rng

HARD, SOFT = "hard", "soft"
SOFT_PREFIX = "soft_prompt."
MAGIC = b"PBMRC1"
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 768
    num_layers: int = 12
    num_heads: int = 12
    intermediate_size: int | None = None  # None -> 4 * hidden_size
    vocab_size: int = 28996
    max_position_embeddings: int = 512
    layer_norm_eps: float = 1e-12
    dropout_prob: float = 0.1
    num_segments: int = 2
    max_span_len: int = 16

    def __post_init__(self):
        if self.intermediate_size is None:
            object.__setattr__(self, "intermediate_size", 4 * self.hidden_size)
        for name in ("hidden_size", "num_heads", "intermediate_size", "vocab_size",
                     "max_position_embeddings", "num_segments", "max_span_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ModelError("num_layers must be non-negative")
        if self.hidden_size % self.num_heads:
            raise ModelError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.layer_norm_eps <= 0:
            raise ModelError("layer_norm_eps must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ModelError("dropout_prob must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # hyperparameters of the base/large pretrained encoders
    "table1-base": dict(hidden_size=768, num_layers=12, num_heads=12, vocab_size=28996,
                        max_position_embeddings=512, layer_norm_eps=1e-12, dropout_prob=0.1),
    "table1-large": dict(hidden_size=1024, num_layers=24, num_heads=16, vocab_size=28996,
                         max_position_embeddings=512, layer_norm_eps=1e-12, dropout_prob=0.1),
    "desk": dict(hidden_size=32, num_layers=2, num_heads=2, vocab_size=64,
                 max_position_embeddings=64, layer_norm_eps=1e-12, dropout_prob=0.1),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ModelError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return EncoderConfig(**base)


# ---------------------------------------------------------------- parameters


def param_shapes(config: EncoderConfig, prompt_lengths: dict | None = None) -> dict:
    """Canonical ordered ``name -> shape`` for a config."""
    d, inter = config.hidden_size, config.intermediate_size
    shapes = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_position_embeddings, d),
        "embeddings.segment": (config.num_segments, d),
        "embeddings.ln.gain": (d,),
        "embeddings.ln.bias": (d,),
    }
    for i in range(config.num_layers):
        p = f"layer.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "attn.ln.gain"] = (d,)
        shapes[p + "attn.ln.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, inter)
        shapes[p + "ffn.in.bias"] = (inter,)
        shapes[p + "ffn.out.weight"] = (inter, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ffn.ln.gain"] = (d,)
        shapes[p + "ffn.ln.bias"] = (d,)
    shapes["head.start.weight"] = (d, 1)
    shapes["head.start.bias"] = (1,)
    shapes["head.end.weight"] = (d, 1)
    shapes["head.end.bias"] = (1,)
    shapes["head.match.weight"] = (2 * d, 1)
    shapes["head.match.bias"] = (1,)
    for label, m in (prompt_lengths or {}).items():
        shapes[SOFT_PREFIX + label] = (m, d)
    return shapes


def param_count(config: EncoderConfig, prompt_lengths: dict | None = None) -> int:
    """Closed form, independent of ``param_shapes``."""
    d, inter, n_layers = config.hidden_size, config.intermediate_size, config.num_layers
    embeddings = (config.vocab_size + config.max_position_embeddings + config.num_segments) * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * inter + inter) + (inter * d + d) + 2 * d
    heads = (d + 1) + (d + 1) + (2 * d + 1)
    bank = d * sum((prompt_lengths or {}).values())
    return embeddings + n_layers * per_layer + heads + bank


def _init_kind(name: str) -> str:
    if name.endswith(".gain"):
        return "one"
    if name.endswith(".bias"):
        return "zero"
    return "normal"


def is_decayed(name: str) -> bool:
    """Weight matrices and embedding tables; not biases, gains or soft prompts."""
    return name.endswith(".weight") or name in ("embeddings.token", "embeddings.position",
                                                "embeddings.segment")


@dataclass
class ModelParams:
    config: EncoderConfig
    arrays: dict = field(default_factory=dict)

    @property
    def soft_labels(self) -> list:
        return [n[len(SOFT_PREFIX):] for n in self.arrays if n.startswith(SOFT_PREFIX)]

    def soft_prompt(self, label) -> np.ndarray:
        return self.arrays[SOFT_PREFIX + label]

    def prompt_lengths(self) -> dict:
        return {lab: self.soft_prompt(lab).shape[0] for lab in self.soft_labels}

    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def nodes(self, trainable=None) -> dict:
        """Wrap arrays as tape leaves; ``trainable`` limits which need grads."""
        return {k: Node(v, requires_grad=trainable is None or k in trainable)
                for k, v in self.arrays.items()}

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of config and every array."""
        if self.config != other.config or list(self.arrays) != list(other.arrays):
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays.values(), other.arrays.values()))


def init_params(config: EncoderConfig, rng: Rng, prompt_lengths: dict | None = None) -> ModelParams:
    """Weights ~ Normal(0, 0.02) truncated at 2 sigma, biases 0, gains 1.

    Every array draws from its own child stream of ``rng``, so adding a soft
    prompt for a new label does not disturb the encoder weights.
    """
    arrays = {}
    for k, (name, shape) in enumerate(param_shapes(config, prompt_lengths).items()):
        kind = _init_kind(name)
        if kind == "one":
            arrays[name] = np.ones(shape)
        elif kind == "zero":
            arrays[name] = np.zeros(shape)
        else:
            key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
            arrays[name] = rng.split(key).truncated_normal(shape, std=0.02)
    return ModelParams(config, arrays)


def init_soft_prompts_from_templates(params: ModelParams, prompt_ids: dict) -> None:
    """Set each S_label to the token-embedding rows of its template, in place.
    Arrays are created if missing."""
    table = params.arrays["embeddings.token"]
    for label, ids in prompt_ids.items():
        params.arrays[SOFT_PREFIX + label] = table[np.asarray(ids, dtype=np.int64)].copy()


# ---------------------------------------------------------------- forward


def embed_input(enc, nodes: dict, config: EncoderConfig, mode=HARD, label=None,
                rng: Rng | None = None, training=False) -> Node:
    """Token + position + segment embeddings, layer-norm, dropout.

    In soft mode the token embeddings at prompt positions are replaced by the
    rows of ``soft_prompt.<label>``.
    """
    ids = enc.ids
    L = len(ids)
    if L > config.max_position_embeddings:
        raise ModelError(f"sequence length {L} exceeds max_position_embeddings "
                         f"{config.max_position_embeddings}")
    table = nodes["embeddings.token"]
    if mode == SOFT:
        lo, hi = enc.prompt_token_range
        name = SOFT_PREFIX + str(label)
        if name not in nodes:
            raise ModelError(f"no soft prompt for label {label!r}")
        bank = nodes[name]
        if bank.shape[0] != hi - lo:
            raise ModelError(f"soft prompt for {label!r} has {bank.shape[0]} rows, "
                             f"input has {hi - lo} prompt positions")
        parts = [T.embedding(table, ids[:lo]), bank]
        if hi < L:
            parts.append(T.embedding(table, ids[hi:]))
        tok = T.concat(parts, axis=0)
    elif mode == HARD:
        tok = T.embedding(table, ids)
    else:
        raise ModelError(f"unknown prompt mode {mode!r}")
    pos = T.embedding(nodes["embeddings.position"], np.arange(L))
    seg = T.embedding(nodes["embeddings.segment"], enc.segment_ids)
    x = T.add(T.add(tok, pos), seg)
    x = T.layer_norm(x, nodes["embeddings.ln.gain"], nodes["embeddings.ln.bias"], config.layer_norm_eps)
    return T.dropout(x, config.dropout_prob, rng.split(0) if training else None, training)


def _linear(x, nodes, name):
    return T.add_row(T.matmul(x, nodes[name + ".weight"]), nodes[name + ".bias"])


def encoder_forward(x: Node, attention_mask, nodes: dict, config: EncoderConfig,
                    rng: Rng | None = None, training=False) -> Node:
    """Post-layer-norm transformer stack over the full sequence."""
    L, d = x.shape
    if d != config.hidden_size or len(attention_mask) != L:
        raise ModelError(f"encoder input {x.shape} does not match config / mask length {len(attention_mask)}")
    key_bias = np.where(np.asarray(attention_mask) > 0, 0.0, -np.inf)[None, :]
    dh = config.head_dim
    inv_scale = 1.0 / math.sqrt(dh)
    for i in range(config.num_layers):
        p = f"layer.{i}."
        q = _linear(x, nodes, p + "attn.query")
        k = _linear(x, nodes, p + "attn.key")
        v = _linear(x, nodes, p + "attn.value")
        heads = []
        for h in range(config.num_heads):
            cols = (slice(None), slice(h * dh, (h + 1) * dh))
            qh, kh, vh = T.slice_(q, cols), T.slice_(k, cols), T.slice_(v, cols)
            scores = T.add_const(T.scale(T.matmul(qh, T.transpose(kh)), inv_scale), key_bias)
            heads.append(T.matmul(T.softmax_rows(scores), vh))
        ctx = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
        attn = _linear(ctx, nodes, p + "attn.output")
        if training:
            attn = T.dropout(attn, config.dropout_prob, rng.split(1, i, 0), True)
        x = T.layer_norm(T.add(x, attn), nodes[p + "attn.ln.gain"], nodes[p + "attn.ln.bias"],
                         config.layer_norm_eps)
        hid = T.gelu(_linear(x, nodes, p + "ffn.in"))
        out = _linear(hid, nodes, p + "ffn.out")
        if training:
            out = T.dropout(out, config.dropout_prob, rng.split(1, i, 1), True)
        x = T.layer_norm(T.add(x, out), nodes[p + "ffn.ln.gain"], nodes[p + "ffn.ln.bias"],
                         config.layer_norm_eps)
    return x


@dataclass
class SpanScores:
    start_logits: Node  # [L]
    end_logits: Node  # [L]
    match_logits: Node  # [L, L]
    context_mask: np.ndarray  # [L] bool
    band_mask: np.ndarray  # [L, L] bool: both in context and i <= j < i + max_span_len

    @classmethod
    def from_arrays(cls, start, end, match, context_mask, max_span_len):
        """Wrap raw logits, applying the context and band masks."""
        context_mask = np.asarray(context_mask, dtype=bool)
        band = band_mask(context_mask, max_span_len)
        return cls(T.constant(np.where(context_mask, start, -np.inf)),
                   T.constant(np.where(context_mask, end, -np.inf)),
                   T.constant(np.where(band, match, -np.inf)), context_mask, band)

    def probabilities(self):
        return (T.sigmoid(self.start_logits.value), T.sigmoid(self.end_logits.value),
                T.sigmoid(self.match_logits.value))


def band_mask(context_mask, max_span_len) -> np.ndarray:
    context_mask = np.asarray(context_mask, dtype=bool)
    L = len(context_mask)
    i = np.arange(L)[:, None]
    j = np.arange(L)[None, :]
    return (j >= i) & (j < i + max_span_len) & context_mask[:, None] & context_mask[None, :]


def start_head_logits(E: Node, nodes: dict) -> Node:
    return _linear(E, nodes, "head.start")


def end_head_logits(E: Node, nodes: dict) -> Node:
    return _linear(E, nodes, "head.end")


def match_head_logits(E: Node, nodes: dict) -> Node:
    """``[E_i; E_j] . w_m + b_m`` for all (i, j), as an outer sum."""
    L, d = E.shape
    w = nodes["head.match.weight"]
    left = T.add_row(T.matmul(E, T.slice_(w, (slice(0, d), slice(None)))), nodes["head.match.bias"])
    right = T.matmul(E, T.slice_(w, (slice(d, 2 * d), slice(None))))
    ones_row = T.constant(np.ones((1, L)))
    ones_col = T.constant(np.ones((L, 1)))
    return T.add(T.matmul(left, ones_row), T.matmul(ones_col, T.transpose(right)))


def span_head_forward(E: Node, enc, nodes: dict, max_span_len: int = 16) -> SpanScores:
    L = E.shape[0]
    ctx = enc.context_mask()
    band = band_mask(ctx, max_span_len)
    start = T.masked_fill(T.reshape(start_head_logits(E, nodes), (L,)), ctx)
    end = T.masked_fill(T.reshape(end_head_logits(E, nodes), (L,)), ctx)
    match = T.masked_fill(match_head_logits(E, nodes), band)
    return SpanScores(start, end, match, ctx, band)


def forward(nodes: dict, enc, config: EncoderConfig, mode=HARD, label=None,
            rng: Rng | None = None, training=False) -> SpanScores:
    x = embed_input(enc, nodes, config, mode, label if label is not None else enc.label, rng, training)
    E = encoder_forward(x, enc.attention_mask, nodes, config, rng, training)
    return span_head_forward(E, enc, nodes, config.max_span_len)


# ---------------------------------------------------------------- decoding


@dataclass(frozen=True, order=True)
class SpanPrediction:
    tok_start: int
    tok_end: int
    char_start: int
    char_end: int
    label: str
    score: float


def decode_spans(scores: SpanScores, enc, label, thresholds=(0.5, 0.5, 0.5),
                 max_span_len: int = 16) -> list[SpanPrediction]:
    """Every (i, j) whose start, end and match probabilities all exceed their
    thresholds, inside the context and the span-length band. Score is the
    geometric mean of the three probabilities."""
    ts, te, tm = thresholds
    ps, pe, pm = scores.probabilities()
    ctx = enc.context_mask()
    keep = band_mask(ctx, max_span_len) & (ps > ts)[:, None] & (pe > te)[None, :] & (pm > tm)
    lo = enc.context_token_range[0]
    out = []
    for i, j in zip(*np.nonzero(keep)):
        i, j = int(i), int(j)
        score = float(np.cbrt(ps[i] * pe[j] * pm[i, j]))
        out.append(SpanPrediction(i, j, enc.context_offsets[i - lo][0], enc.context_offsets[j - lo][1],
                                  label, score))
    return out


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: ModelParams
    labels: tuple = ()
    prompt_mode: str = HARD
    template_digests: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    """``PBMRC1`` + u32 LE metadata length + JSON metadata + raw <f8 arrays."""
    manifest = []
    offset = 0
    for name, arr in ckpt.params.arrays.items():
        nbytes = arr.size * 8
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    meta = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.params.config.to_dict(),
        "labels": list(ckpt.labels),
        "prompt_mode": ckpt.prompt_mode,
        "template_digests": dict(sorted(ckpt.template_digests.items())),
        "extra": ckpt.extra,
        "arrays": manifest,
    }
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for arr in ckpt.params.arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes, config: EncoderConfig | None = None) -> Checkpoint:
    """Parse checkpoint bytes. With ``config`` given, every array must have
    the shape that config implies."""
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a PBMRC1 checkpoint")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if start + n > len(data):
        raise CheckpointError("truncated checkpoint: metadata incomplete")
    try:
        meta = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')!r}, "
                              f"expected {FORMAT_VERSION}")
    saved = EncoderConfig.from_dict(meta["config"])
    body = start + n
    total = sum(e["nbytes"] for e in meta["arrays"])
    if len(data) != body + total:
        raise CheckpointError(f"truncated checkpoint: expected {body + total} bytes, got {len(data)}")
    expected = param_shapes(config) if config is not None else param_shapes(saved)
    arrays = {}
    for e in meta["arrays"]:
        name, shape = e["name"], tuple(e["shape"])
        want = expected.get(name)
        if want is None and name.startswith(SOFT_PREFIX):
            want = (shape[0], (config or saved).hidden_size)
        if want is None or tuple(want) != shape:
            raise CheckpointError(f"shape mismatch for array {name!r}: checkpoint has {shape}, "
                                  f"config expects {want}")
        if e["nbytes"] != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"corrupt manifest entry for {name!r}")
        raw = data[body + e["offset"]: body + e["offset"] + e["nbytes"]]
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    missing = [k for k in expected if k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks array {missing[0]!r}")
    if config is not None and config != saved:
        # shapes agree; non-shape fields (eps, dropout, span band) follow the caller
        saved = config
    params = ModelParams(saved, arrays)
    return Checkpoint(params, tuple(meta.get("labels", ())), meta.get("prompt_mode", HARD),
                      dict(meta.get("template_digests", {})), dict(meta.get("extra", {})))


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(ckpt))


def read_checkpoint(path, config: EncoderConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read(), config)
