"""A tiny, fully deterministic decoder-only transformer in numpy.

Architecture (pre-LayerNorm, no learnable norm parameters)::

    x_0 = E[tok] + P[pos]
    x   = x + Attn(LN(x))
    x   = x + W_out @ gelu(W_in^T LN(x) + b_in)     # per layer
    logits = LN(x_L) @ U

The MLP output projection ``W_out`` has shape ``(d_model, d_ff)`` so that it is
exactly the matrix ``W`` of the editing objective: it maps a key ``k`` (the
``d_ff`` activation entering it) to ``W @ k``.

Weights are float64 and drawn from numpy's PCG64 generator
(``np.random.default_rng(seed)``) in a fixed order, so a seed reproduces the
same weights bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import BadLocation, BadToken, IoError, SeqTooLong, ShapeError
from .vocab import Vocab, default_vocab

CHECKPOINT_FORMAT = "editlab-checkpoint"
CHECKPOINT_VERSION = 1

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 64
    max_seq: int = 32
    seed: int = 0
    # logit scale of the unembedding; larger values give peakier next-token distributions
    unembed_gain: float = 4.0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray  # (d_model, d_model)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray  # (d_model, d_ff)
    b_in: np.ndarray  # (d_ff,)
    w_out: np.ndarray  # (d_model, d_ff), the editable matrix


@dataclass(frozen=True)
class ToyTransformer:
    config: ModelConfig
    vocab: Vocab
    embed: np.ndarray  # (V, d_model)
    pos: np.ndarray  # (max_seq, d_model)
    layers: tuple[LayerWeights, ...]
    unembed: np.ndarray  # (d_model, V)

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    def w_out(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        return self.layers[layer].w_out

    def _check_layer(self, layer: int):
        if not isinstance(layer, (int, np.integer)) or not 0 <= layer < self.config.n_layers:
            raise BadLocation(f"layer {layer} outside [0, {self.config.n_layers})")

    def arrays(self):
        """Yield ``(name, array)`` for every weight tensor in a fixed order."""
        yield "embed", self.embed
        yield "pos", self.pos
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w_in", "b_in", "w_out"):
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "unembed", self.unembed


@dataclass(frozen=True)
class ForwardTrace:
    """Per-position outputs of one forward pass.

    ``hidden_pre_wout[l, t]`` is the ``d_ff`` key vector entering ``W_out`` of
    layer ``l`` at position ``t``; ``mlp_out[l, t] = W_out[l] @ hidden_pre_wout[l, t]``.
    """

    logits: np.ndarray  # (T, V)
    hidden_pre_wout: np.ndarray  # (L, T, d_ff)
    mlp_out: np.ndarray  # (L, T, d_model)
    hidden_post_layer: np.ndarray  # (L, T, d_model)

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class TeacherForcedScore:
    """Scores of a forced answer: one entry per answer token."""

    probs: np.ndarray
    logprobs: np.ndarray
    is_top1: np.ndarray

    def __iter__(self):
        return iter(zip(self.probs.tolist(), self.is_top1.tolist()))

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def answer_logprob(self) -> float:
        return float(np.sum(self.logprobs))

    @property
    def mean_logprob(self) -> float:
        return float(np.mean(self.logprobs))


# ---------------------------------------------------------------------------
# numerics


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, with max-subtraction."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layer_norm_backward(dy, y, inv):
    # y is the normalized output, inv = 1/sigma
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u**3)))


def _gelu_grad(u):
    inner = _GELU_C * (u + 0.044715 * u**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


# ---------------------------------------------------------------------------
# construction


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def init_model(config: ModelConfig | None = None, vocab: Vocab | None = None) -> ToyTransformer:
    """Build a model with fan-in scaled Gaussian weights from ``config.seed``."""
    config = config or ModelConfig()
    vocab = vocab or default_vocab()
    rng = np.random.default_rng(config.seed)
    d, f, V = config.d_model, config.d_ff, vocab.size

    def gauss(shape, std):
        return _readonly(rng.standard_normal(shape) * std)

    embed = gauss((V, d), 1.0)
    pos = gauss((config.max_seq, d), 0.5)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=gauss((d, d), 1.0 / math.sqrt(d)),
                wk=gauss((d, d), 1.0 / math.sqrt(d)),
                wv=gauss((d, d), 1.0 / math.sqrt(d)),
                wo=gauss((d, d), 1.0 / math.sqrt(d)),
                w_in=gauss((d, f), 1.0 / math.sqrt(d)),
                b_in=gauss((f,), 0.1),
                w_out=gauss((d, f), 1.0 / math.sqrt(f)),
            )
        )
    unembed = gauss((d, V), config.unembed_gain / math.sqrt(d))
    return ToyTransformer(config, vocab, embed, pos, tuple(layers), unembed)


# ---------------------------------------------------------------------------
# forward / backward


def _check_tokens(model: ToyTransformer, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise BadToken("token sequence must be a non-empty 1-D sequence")
    if toks.size > model.config.max_seq:
        raise SeqTooLong(f"sequence length {toks.size} exceeds max_seq {model.config.max_seq}")
    if toks.min() < 0 or toks.max() >= model.vocab_size:
        raise BadToken(f"token id outside [0, {model.vocab_size})")
    return toks


def _run(model: ToyTransformer, tokens, patch=None, keep_cache=False):
    """Forward pass. ``patch = (layer, position, vector)`` replaces that MLP output."""
    toks = _check_tokens(model, tokens)
    cfg = model.config
    T, H, dh = toks.size, cfg.n_heads, cfg.d_head
    mask = np.triu(np.full((T, T), -np.inf), k=1)
    x = model.embed[toks] + model.pos[:T]

    keys, outs, posts, cache = [], [], [], []
    for li, lw in enumerate(model.layers):
        a, inv1 = _layer_norm(x)
        q = (a @ lw.wq).reshape(T, H, dh).transpose(1, 0, 2)
        k = (a @ lw.wk).reshape(T, H, dh).transpose(1, 0, 2)
        v = (a @ lw.wv).reshape(T, H, dh).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh) + mask
        p = softmax(scores)
        o = (p @ v).transpose(1, 0, 2).reshape(T, cfg.d_model)
        x = x + o @ lw.wo

        a2, inv2 = _layer_norm(x)
        u = a2 @ lw.w_in + lw.b_in
        h = _gelu(u)
        m = h @ lw.w_out.T
        if patch is not None and patch[0] == li:
            m = m.copy()
            m[patch[1]] = patch[2]
        x = x + m

        keys.append(h)
        outs.append(m)
        posts.append(x)
        if keep_cache:
            cache.append((a, inv1, q, k, v, p, a2, inv2, u))

    f, inv_f = _layer_norm(x)
    logits = f @ model.unembed
    trace = ForwardTrace(
        logits=logits,
        hidden_pre_wout=np.stack(keys),
        mlp_out=np.stack(outs),
        hidden_post_layer=np.stack(posts),
    )
    if keep_cache:
        return trace, (cache, f, inv_f)
    return trace


def _backward_to_layer(model: ToyTransformer, cache, dlogits: np.ndarray, layer: int) -> np.ndarray:
    """Gradient w.r.t. the residual stream right after ``layer`` (all positions)."""
    layer_cache, f, inv_f = cache
    cfg = model.config
    T, H, dh = dlogits.shape[0], cfg.n_heads, cfg.d_head
    dx = _layer_norm_backward(dlogits @ model.unembed.T, f, inv_f)
    for li in range(cfg.n_layers - 1, layer, -1):
        lw = model.layers[li]
        a, inv1, q, k, v, p, a2, inv2, u = layer_cache[li]
        # MLP block
        dh_ = (dx @ lw.w_out) * _gelu_grad(u)
        dx = dx + _layer_norm_backward(dh_ @ lw.w_in.T, a2, inv2)
        # attention block
        do = (dx @ lw.wo.T).reshape(T, H, dh).transpose(1, 0, 2)
        dp = do @ v.transpose(0, 2, 1)
        dv = p.transpose(0, 2, 1) @ do
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q

        def merge(g):
            return g.transpose(1, 0, 2).reshape(T, cfg.d_model)

        da = merge(dq) @ lw.wq.T + merge(dk) @ lw.wk.T + merge(dv) @ lw.wv.T
        dx = dx + _layer_norm_backward(da, a, inv1)
    return dx


def forward(model: ToyTransformer, tokens) -> ForwardTrace:
    """Run the model on one token sequence.

    Raises:
        SeqTooLong: sequence longer than ``max_seq``.
        BadToken: an id outside the vocabulary.
    """
    return _run(model, tokens)


def last_token_logits(model: ToyTransformer, query_tokens) -> np.ndarray:
    return _run(model, query_tokens).logits[-1]


def _resolve_index(tokens, token_index: int | None) -> int:
    n = len(tokens)
    if token_index is None:
        return n - 1
    idx = token_index + n if token_index < 0 else token_index
    if not 0 <= idx < n:
        raise BadLocation(f"token index {token_index} outside query of length {n}")
    return idx


def extract_key(model: ToyTransformer, query_tokens, layer: int, token_index: int | None = None) -> np.ndarray:
    """Key vector entering ``W_out`` of ``layer`` at ``token_index`` (default: last token)."""
    model._check_layer(layer)
    idx = _resolve_index(query_tokens, token_index)
    return _run(model, query_tokens).hidden_pre_wout[layer, idx]


def _answer_positions(query_tokens, answer_tokens):
    if len(answer_tokens) == 0:
        raise ValueError("answer must be non-empty")
    seq = list(query_tokens) + list(answer_tokens)
    # logits at position p predict token p + 1
    positions = np.arange(len(query_tokens) - 1, len(seq) - 1)
    return seq, positions, np.asarray(answer_tokens, dtype=np.int64)


def _score_from_logits(logits, positions, targets) -> TeacherForcedScore:
    rows = logits[positions]
    logp = log_softmax(rows)[np.arange(len(targets)), targets]
    top1 = np.argmax(rows, axis=-1) == targets
    return TeacherForcedScore(probs=np.exp(logp), logprobs=logp, is_top1=top1)


def teacher_force_score(model: ToyTransformer, query_tokens, answer_tokens, patch=None) -> TeacherForcedScore:
    """Score a forced answer with a single forward pass over ``query + answer``.

    Entry ``t`` holds ``P(answer_t | query, answer_<t)`` and whether ``answer_t``
    is the argmax at that position (ties go to the lowest token id).
    """
    seq, positions, targets = _answer_positions(query_tokens, answer_tokens)
    trace = _run(model, seq, patch=patch)
    return _score_from_logits(trace.logits, positions, targets)


def patched_answer_objective(model: ToyTransformer, query_tokens, answer_tokens, layer: int, position: int, value: np.ndarray):
    """Mean answer log-prob when ``value`` replaces the MLP output at ``(layer, position)``.

    Returns ``(objective, gradient w.r.t. value, TeacherForcedScore)``.
    """
    seq, positions, targets = _answer_positions(query_tokens, answer_tokens)
    trace, cache = _run(model, seq, patch=(layer, position, value), keep_cache=True)
    score = _score_from_logits(trace.logits, positions, targets)
    probs = softmax(trace.logits[positions])
    dlogits = np.zeros_like(trace.logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(targets)), targets] = 1.0
    dlogits[positions] = (onehot - probs) / len(targets)
    grad = _backward_to_layer(model, cache, dlogits, layer)[position]
    return score.mean_logprob, grad, score


def greedy_decode(model: ToyTransformer, query_tokens, max_new: int, stop_token: int | None = -1) -> list[int]:
    """Argmax decoding of up to ``max_new`` tokens (query not included in the output).

    ``stop_token=-1`` means the vocabulary's EOS (if any); ``None`` disables stopping.
    The stop token itself is not returned.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if stop_token == -1:
        stop_token = model.vocab.eos_id
    seq = list(query_tokens)
    out: list[int] = []
    for _ in range(max_new):
        nxt = int(np.argmax(_run(model, seq).logits[-1]))
        if stop_token is not None and nxt == stop_token:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def apply_delta(model: ToyTransformer, layer: int, delta: np.ndarray) -> ToyTransformer:
    """Return a copy of ``model`` with ``W_out[layer] += delta``; the input is untouched."""
    model._check_layer(layer)
    delta = np.asarray(delta, dtype=np.float64)
    lw = model.layers[layer]
    if delta.shape != lw.w_out.shape:
        raise ShapeError(f"delta shape {delta.shape} != W_out shape {lw.w_out.shape}")
    if not np.all(np.isfinite(delta)):
        raise ShapeError("delta has non-finite entries")
    layers = list(model.layers)
    layers[layer] = replace(lw, w_out=_readonly(lw.w_out + delta))
    return replace(model, layers=tuple(layers))


# ---------------------------------------------------------------------------
# checkpoints


def model_to_dict(model: ToyTransformer) -> dict:
    cfg = model.config
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "d_ff": cfg.d_ff,
            "max_seq": cfg.max_seq,
            "seed": cfg.seed,
            "unembed_gain": cfg.unembed_gain,
        },
        "vocab": list(model.vocab.tokens),
        "weights": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.arrays()
        },
    }


def model_from_dict(d: dict) -> ToyTransformer:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise IoError("not an editlab checkpoint")
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise IoError(f"unsupported checkpoint version {d.get('format_version')!r}")
    cfg = ModelConfig(**d["config"])
    vocab = Vocab(tuple(d["vocab"]))
    w = d["weights"]

    def arr(name):
        entry = w[name]
        return _readonly(np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"]))

    layers = tuple(
        LayerWeights(**{k: arr(f"layers.{i}.{k}") for k in ("wq", "wk", "wv", "wo", "w_in", "b_in", "w_out")})
        for i in range(cfg.n_layers)
    )
    model = ToyTransformer(cfg, vocab, arr("embed"), arr("pos"), layers, arr("unembed"))
    for name, a in model.arrays():
        if not np.all(np.isfinite(a)):
            raise IoError(f"non-finite weights in {name}")
    return model


def save_checkpoint(model: ToyTransformer, path) -> None:
    try:
        Path(path).write_text(json.dumps(model_to_dict(model)))
    except OSError as e:
        raise IoError(str(e)) from e


def load_checkpoint(path) -> ToyTransformer:
    try:
        return model_from_dict(json.loads(Path(path).read_text()))
    except OSError as e:
        raise IoError(str(e)) from e
