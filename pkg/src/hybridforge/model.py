"""Decoder-only transformer with interchangeable attention sublayers.

Blocks are pre-norm residual: x <- x + Attn(RMSNorm(x)); x <- x + MLP(RMSNorm(x))
with a gated-SiLU MLP. Full-attention layers apply rotary embeddings to q and k;
linear layers receive the un-rotated projections (their recurrences are
order-aware by construction). Incremental decoding keeps a KV cache for full
layers and a constant-size recurrent state for linear layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InputError, NumericError, TrainingError
from .linear_attn import (
    VARIANTS,
    LinearBlockWeights,
    RecurrentState,
    init_state,
    linear_forward_recurrent,
    linear_step,
)
from .optim import Adam
from .rng import SeededRng
from .tensor import Parameter, Tensor, backward, no_grad

FULL = "full"
ATTENTION_KINDS = (FULL,) + VARIANTS

ROTARY_BASE = 10000.0
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 64
    max_seq: int = 512

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.d_head % 2 != 0:
            raise ConfigError(f"d_head={self.d_head} must be even for rotary embeddings")
        return self


@dataclass
class FullAttnWeights:
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter

    def params(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]

    def clone(self) -> "FullAttnWeights":
        return FullAttnWeights(*(Parameter(p.data.copy(), p.name) for p in self.params()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq.data, "wk": self.wk.data, "wv": self.wv.data, "wo": self.wo.data}


@dataclass
class MlpWeights:
    w_gate: Parameter
    w_up: Parameter
    w_down: Parameter

    def params(self) -> list[Parameter]:
        return [self.w_gate, self.w_up, self.w_down]

    def clone(self) -> "MlpWeights":
        return MlpWeights(*(Parameter(p.data.copy(), p.name) for p in self.params()))


@dataclass
class Layer:
    attn: FullAttnWeights | LinearBlockWeights
    mlp: MlpWeights
    norm_attn: Parameter
    norm_mlp: Parameter

    @property
    def kind(self) -> str:
        return FULL if isinstance(self.attn, FullAttnWeights) else self.attn.variant

    def params(self) -> list[Parameter]:
        return self.attn.params() + self.mlp.params() + [self.norm_attn, self.norm_mlp]

    def clone(self) -> "Layer":
        return Layer(
            self.attn.clone(),
            self.mlp.clone(),
            Parameter(self.norm_attn.data.copy(), self.norm_attn.name),
            Parameter(self.norm_mlp.data.copy(), self.norm_mlp.name),
        )


class Model:
    def __init__(self, config: ModelConfig, emb: Parameter, layers: list[Layer],
                 norm_final: Parameter, lm_head: Parameter):
        if len(layers) != config.n_layers:
            raise ConfigError(f"{len(layers)} layers built for n_layers={config.n_layers}")
        self.config = config
        self.emb = emb
        self.layers = layers
        self.norm_final = norm_final
        self.lm_head = lm_head

    @property
    def dtype(self):
        return self.emb.dtype

    def kinds(self) -> tuple[str, ...]:
        return tuple(layer.kind for layer in self.layers)

    def parameters(self) -> list[Parameter]:
        ps = [self.emb]
        for layer in self.layers:
            ps.extend(layer.params())
        ps.extend([self.norm_final, self.lm_head])
        return ps

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def clone(self) -> "Model":
        return Model(
            self.config,
            Parameter(self.emb.data.copy(), self.emb.name),
            [layer.clone() for layer in self.layers],
            Parameter(self.norm_final.data.copy(), self.norm_final.name),
            Parameter(self.lm_head.data.copy(), self.lm_head.name),
        )


def reconfigured(model: Model, max_seq: int) -> Model:
    """Same weights (shared, read-only use) under a different sequence bound."""
    cfg = replace(model.config, max_seq=max_seq).validate()
    return Model(cfg, model.emb, model.layers, model.norm_final, model.lm_head)


def model_init(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """All-Full model; output projections get depth-scaled init 0.02/sqrt(2L)."""
    config.validate()
    rng = SeededRng(seed)
    d, v, ff = config.d_model, config.vocab_size, config.d_ff
    std_out = INIT_STD / math.sqrt(2.0 * config.n_layers)

    emb = Parameter(rng.normal((v, d), INIT_STD, dtype), "emb")
    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        attn = FullAttnWeights(
            Parameter(rng.normal((d, d), INIT_STD, dtype), f"{p}.attn.wq"),
            Parameter(rng.normal((d, d), INIT_STD, dtype), f"{p}.attn.wk"),
            Parameter(rng.normal((d, d), INIT_STD, dtype), f"{p}.attn.wv"),
            Parameter(rng.normal((d, d), std_out, dtype), f"{p}.attn.wo"),
        )
        mlp = MlpWeights(
            Parameter(rng.normal((d, ff), INIT_STD, dtype), f"{p}.mlp.w_gate"),
            Parameter(rng.normal((d, ff), INIT_STD, dtype), f"{p}.mlp.w_up"),
            Parameter(rng.normal((ff, d), std_out, dtype), f"{p}.mlp.w_down"),
        )
        layers.append(Layer(
            attn, mlp,
            Parameter(np.ones(d, dtype=dtype), f"{p}.norm_attn"),
            Parameter(np.ones(d, dtype=dtype), f"{p}.norm_mlp"),
        ))
    norm_final = Parameter(np.ones(d, dtype=dtype), "norm_final")
    lm_head = Parameter(rng.normal((d, v), INIT_STD, dtype), "lm_head")
    return Model(config, emb, layers, norm_final, lm_head)


# ---------------------------------------------------------------------------
# rotary embeddings
# ---------------------------------------------------------------------------

def _rotary_tables(offset: int, length: int, d_head: int, dtype):
    """cos/sin duplicated across both halves, plus the half-swap matrix M.

    rotate(x) = x*cos + (x @ M)*sin, where (x @ M) = [-x2, x1].
    """
    half = d_head // 2
    inv = ROTARY_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    ang = np.arange(offset, offset + length, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(dtype)
    m = np.zeros((d_head, d_head), dtype=dtype)
    m[np.arange(half) + half, np.arange(half)] = -1.0
    m[np.arange(half), np.arange(half) + half] = 1.0
    return cos, sin, m


def _apply_rotary(x: Tensor, cos: Tensor, sin: Tensor, m: Tensor) -> Tensor:
    return T.add(T.mul(x, cos), T.mul(T.matmul(x, m), sin))


# ---------------------------------------------------------------------------
# sublayers (gradient-tape capable)
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d_head)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def full_attn_forward(w: FullAttnWeights, x: Tensor, n_heads: int, d_head: int,
                      pos_offset: int = 0) -> Tensor:
    """Causal softmax attention over x [B, T, D] with rotary q/k."""
    q = _split_heads(T.matmul(x, w.wq), n_heads, d_head)
    k = _split_heads(T.matmul(x, w.wk), n_heads, d_head)
    v = _split_heads(T.matmul(x, w.wv), n_heads, d_head)
    cos, sin, m = (Tensor(a) for a in _rotary_tables(pos_offset, x.shape[1], d_head, x.dtype))
    q = _apply_rotary(q, cos, sin, m)
    k = _apply_rotary(k, cos, sin, m)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    probs = T.softmax_rows(scores, causal=True)
    return T.matmul(_merge_heads(T.matmul(probs, v)), w.wo)


def mlp_forward(w: MlpWeights, x: Tensor) -> Tensor:
    return T.matmul(T.mul(T.silu(T.matmul(x, w.w_gate)), T.matmul(x, w.w_up)), w.w_down)


def _check_tokens(model: Model, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        bad = int(tokens.min()) if tokens.min() < 0 else int(tokens.max())
        raise InputError(f"token id {bad} outside vocab of size {model.config.vocab_size}")
    return tokens


def forward_full(model: Model, tokens, capture_layers=None):
    """Logits [B, T, vocab] for token ids [B, T].

    With `capture_layers` (iterable of layer indices), also returns a dict
    {layer: (attention input after pre-norm, attention sublayer output)} as
    numpy copies, for distillation capture.
    """
    tokens = _check_tokens(model, tokens)
    if tokens.ndim != 2:
        raise InputError(f"forward expects [batch, seq] token ids, got shape {tokens.shape}")
    if tokens.shape[1] > model.config.max_seq:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq {model.config.max_seq}")
    cfg = model.config
    wanted = None if capture_layers is None else set(capture_layers)
    if wanted is not None:
        bad = [i for i in wanted if not 0 <= i < cfg.n_layers]
        if bad:
            raise InputError(f"capture layer {bad[0]} out of range for {cfg.n_layers} layers")
    captures: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    x = T.embedding(model.emb, tokens)
    for i, layer in enumerate(model.layers):
        xn = T.rms_norm(x, layer.norm_attn)
        if layer.kind == FULL:
            attn_out = full_attn_forward(layer.attn, xn, cfg.n_heads, cfg.d_head)
        else:
            attn_out, _ = linear_forward_recurrent(layer.attn, xn)
        if wanted is not None and i in wanted:
            captures[i] = (xn.data.copy(), attn_out.data.copy())
        x = T.add(x, attn_out)
        x = T.add(x, mlp_forward(layer.mlp, T.rms_norm(x, layer.norm_mlp)))
    logits = T.matmul(T.rms_norm(x, model.norm_final), model.lm_head)
    return logits if wanted is None else (logits, captures)


# ---------------------------------------------------------------------------
# incremental decoding
# ---------------------------------------------------------------------------

class _LayerCache:
    __slots__ = ("kind", "k", "v", "state")

    def __init__(self, kind: str, k=None, v=None, state: RecurrentState | None = None):
        self.kind = kind
        self.k = k
        self.v = v
        self.state = state


class KVCache:
    """Per layer: growing K/V [H, t, dh] for full attention, constant recurrent
    state for linear attention. Arrays are exact-size so nbytes() is the true
    allocation."""

    def __init__(self, model: Model):
        cfg = model.config
        self.kinds = model.kinds()
        self.t = 0
        self.dtype = model.dtype
        self.layers: list[_LayerCache] = []
        for kind in self.kinds:
            if kind == FULL:
                empty = np.zeros((cfg.n_heads, 0, cfg.d_head), dtype=self.dtype)
                self.layers.append(_LayerCache(kind, k=empty, v=empty.copy()))
            else:
                self.layers.append(_LayerCache(kind, state=init_state(kind, cfg.n_heads, cfg.d_head, self.dtype)))

    def nbytes(self) -> int:
        total = 0
        for entry in self.layers:
            if entry.kind == FULL:
                total += entry.k.nbytes + entry.v.nbytes
            else:
                total += entry.state.nbytes()
        return total

    def clone(self) -> "KVCache":
        out = object.__new__(KVCache)
        out.kinds = self.kinds
        out.t = self.t
        out.dtype = self.dtype
        out.layers = []
        for entry in self.layers:
            if entry.kind == FULL:
                out.layers.append(_LayerCache(entry.kind, k=entry.k.copy(), v=entry.v.copy()))
            else:
                out.layers.append(_LayerCache(entry.kind, state=entry.state.copy()))
        return out


def decode_step(model: Model, cache: KVCache, token: int):
    """Process one token; returns (logits [vocab], cache). Cache grows by one
    position for full layers only."""
    if cache.kinds != model.kinds():
        raise ContractError(f"cache kinds {cache.kinds} do not match model kinds {model.kinds()}")
    cfg = model.config
    if cache.t + 1 > cfg.max_seq:
        raise InputError(f"decoding past max_seq={cfg.max_seq}")
    token = int(token)
    if not 0 <= token < cfg.vocab_size:
        raise InputError(f"token id {token} outside vocab of size {cfg.vocab_size}")
    h, dh = cfg.n_heads, cfg.d_head

    with no_grad():
        x = Tensor(model.emb.data[token].reshape(1, 1, cfg.d_model))
        for layer, entry in zip(model.layers, cache.layers):
            xn = T.rms_norm(x, layer.norm_attn)
            if layer.kind == FULL:
                q = _split_heads(T.matmul(xn, layer.attn.wq), h, dh)
                k = _split_heads(T.matmul(xn, layer.attn.wk), h, dh)
                v = _split_heads(T.matmul(xn, layer.attn.wv), h, dh)
                cos, sin, m = (Tensor(a) for a in _rotary_tables(cache.t, 1, dh, x.dtype))
                q = _apply_rotary(q, cos, sin, m)
                k = _apply_rotary(k, cos, sin, m)
                entry.k = np.concatenate([entry.k, k.data[0]], axis=1)
                entry.v = np.concatenate([entry.v, v.data[0]], axis=1)
                keys = Tensor(entry.k.transpose(0, 2, 1))        # [H, dh, t]
                vals = Tensor(entry.v)                           # [H, t, dh]
                scores = T.mul(T.matmul(q, keys), 1.0 / math.sqrt(dh))
                ctx = T.matmul(T.softmax_rows(scores), vals)     # [1, H, 1, dh]
                attn_out = T.matmul(_merge_heads(ctx), layer.attn.wo)
            else:
                o_np, entry.state = linear_step(layer.attn, entry.state, xn.data[0, 0])
                attn_out = Tensor(o_np.reshape(1, 1, cfg.d_model))
            x = T.add(x, attn_out)
            x = T.add(x, mlp_forward(layer.mlp, T.rms_norm(x, layer.norm_mlp)))
        logits = T.matmul(T.rms_norm(x, model.norm_final), model.lm_head)
    cache.t += 1
    return logits.data[0, 0], cache


def _full_attn_prefill_np(w: FullAttnWeights, xn: np.ndarray, n_heads: int, d_head: int,
                          chunk: int = 1024):
    """No-grad full attention over [T, D], chunked over query rows to bound
    memory at long context. Returns (output [T, D], K [H, T, dh], V [H, T, dh])."""
    t, d = xn.shape
    q = (xn @ w.wq.data).reshape(t, n_heads, d_head).transpose(1, 0, 2)
    k = (xn @ w.wk.data).reshape(t, n_heads, d_head).transpose(1, 0, 2)
    v = (xn @ w.wv.data).reshape(t, n_heads, d_head).transpose(1, 0, 2)
    cos, sin, m = _rotary_tables(0, t, d_head, xn.dtype)
    q = q * cos + (q @ m) * sin
    k = k * cos + (k @ m) * sin
    scale = 1.0 / math.sqrt(d_head)
    neg = np.finfo(xn.dtype).min
    ctx = np.empty_like(q)
    cols = np.arange(t)
    for r0 in range(0, t, chunk):
        r1 = min(r0 + chunk, t)
        s = (q[:, r0:r1] @ k.transpose(0, 2, 1)) * scale        # [H, c, T]
        mask = cols[None, :] <= np.arange(r0, r1)[:, None]
        mx = np.max(np.where(mask, s, neg), axis=-1, keepdims=True)
        e = np.where(mask, np.exp(s - mx), 0.0).astype(xn.dtype, copy=False)
        ctx[:, r0:r1] = (e / e.sum(axis=-1, keepdims=True)) @ v
    out = ctx.transpose(1, 0, 2).reshape(t, d) @ w.wo.data
    return out, k, v


def prefill(model: Model, tokens) -> KVCache:
    """Run the whole context once, returning a cache positioned after it."""
    tokens = _check_tokens(model, np.asarray(tokens).reshape(-1))
    cfg = model.config
    if tokens.shape[0] > cfg.max_seq:
        raise InputError(f"context length {tokens.shape[0]} exceeds max_seq {cfg.max_seq}")
    cache = KVCache(model)
    with no_grad():
        x = Tensor(model.emb.data[tokens][None])                 # [1, T, D]
        for layer, entry in zip(model.layers, cache.layers):
            xn = T.rms_norm(x, layer.norm_attn)
            if layer.kind == FULL:
                out, k, v = _full_attn_prefill_np(layer.attn, xn.data[0], cfg.n_heads, cfg.d_head)
                entry.k, entry.v = k, v
                attn_out = Tensor(out[None])
            else:
                attn_out, entry.state = linear_forward_recurrent(layer.attn, xn)
            x = T.add(x, attn_out)
            x = T.add(x, mlp_forward(layer.mlp, T.rms_norm(x, layer.norm_mlp)))
    cache.t = int(tokens.shape[0])
    return cache


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 16
    lr: float = 1e-3

    def validate(self) -> "TrainConfig":
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        return self


def _lm_loss(model: Model, tokens: np.ndarray) -> Tensor:
    """Next-token cross-entropy over all positions (last position weighted out)."""
    b, t = tokens.shape
    logits = forward_full(model, tokens)
    targets = np.concatenate([tokens[:, 1:], np.zeros((b, 1), dtype=tokens.dtype)], axis=1)
    weights = np.ones((b, t)); weights[:, -1] = 0.0
    flat = T.reshape(logits, (b * t, model.config.vocab_size))
    return T.cross_entropy(flat, targets.reshape(-1), weights.reshape(-1))


def pretrain(model: Model, corpus, hyper: TrainConfig, seed: int):
    """Train a copy on next-token prediction; returns (model, loss curve)."""
    hyper.validate()
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise InputError(f"corpus must be [n_seqs, seq_len] token ids, got {corpus.shape}")
    trained = model.clone()
    opt = Adam(trained.parameters(), lr=hyper.lr)
    rng = SeededRng(seed)
    curve: list[float] = []
    for step in range(hyper.steps):
        idx = rng.integers(0, corpus.shape[0], hyper.batch_size)
        opt.zero_grad()
        try:
            loss = _lm_loss(trained, corpus[idx])
            backward(loss)
        except NumericError as exc:
            raise TrainingError(f"non-finite loss at step {step}") from exc
        opt.step()
        curve.append(loss.item())
    return trained, curve


def sft(model: Model, split, hyper: TrainConfig, seed: int) -> Model:
    """Fine-tune a copy with cross-entropy at answer positions only.

    `split` is a sequence of examples carrying .tokens, .answer_positions and
    .answer_tokens; all parameters train (nothing frozen). The input model is
    untouched.
    """
    hyper.validate()
    examples = list(split)
    if not examples:
        raise InputError("sft needs a nonempty training split")
    toks = np.stack([np.asarray(ex.tokens) for ex in examples])
    tuned = model.clone()
    opt = Adam(tuned.parameters(), lr=hyper.lr)
    rng = SeededRng(seed)
    b_t = toks.shape[1]
    for step in range(hyper.steps):
        idx = rng.integers(0, len(examples), hyper.batch_size)
        rows, targets = [], []
        for j, ex_i in enumerate(idx):
            ex = examples[int(ex_i)]
            rows.append(j * b_t + np.asarray(ex.answer_positions) - 1)
            targets.append(np.asarray(ex.answer_tokens))
        rows = np.concatenate(rows)
        targets = np.concatenate(targets)
        opt.zero_grad()
        try:
            logits = forward_full(tuned, toks[idx])
            flat = T.reshape(logits, (len(idx) * b_t, model.config.vocab_size))
            loss = T.cross_entropy(flat[rows], targets)
            backward(loss)
        except NumericError as exc:
            raise TrainingError(f"non-finite loss at step {step}") from exc
        opt.step()
    return tuned
