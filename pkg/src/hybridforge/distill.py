"""Blockwise local distillation of attention sublayers.

Each layer's job is independent: capture the normalized hidden states entering
the attention sublayer (X) and the sublayer's pre-residual output (O) from the
frozen teacher, then train a linear-attention block to minimize MSE(O, student
output on X). Jobs share only the read-only capture, own their RNG stream
(derived from (seed, layer), never from worker identity), and touch no
parameter outside their own block, so the result is bit-identical for any
worker count.

Student projections warm-start from the teacher's wq/wk/wv/wo; gate
projections start fresh.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ConfigError, ContractError, InputError, NumericError, TrainingError
from .linear_attn import (LinearBlockWeights, check_variant, init_linear_weights,
                          linear_forward_recurrent)
from .model import FULL, Model, forward_full
from .optim import Adam
from .rng import SeededRng
from .tensor import Tensor, mul, no_grad, sub, tmean

DEFAULT_CAPTURE_TOKENS = 200_000


@dataclass(frozen=True)
class DistillConfig:
    steps: int
    batch_tokens: int = 1280
    lr: float = 1e-3
    seed: int = 0
    # optional early stop: halt once loss <= stop_ratio * initial loss
    stop_ratio: float | None = None

    def validate(self) -> "DistillConfig":
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_tokens < 1:
            raise ConfigError(f"batch_tokens must be >= 1, got {self.batch_tokens}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.stop_ratio is not None and not 0 < self.stop_ratio < 1:
            raise ConfigError(f"stop_ratio must be in (0, 1), got {self.stop_ratio}")
        return self


@dataclass
class ActivationDataset:
    """Per-layer capture, kept as [n_seqs, seq_len, d_model] so students can
    reset recurrent state at sequence boundaries. Also carries the teacher's
    attention projections for warm-starting students."""

    x: dict[int, np.ndarray]
    o: dict[int, np.ndarray]
    teacher_attn: dict[int, dict[str, np.ndarray]]
    n_heads: int
    d_head: int
    fingerprint: str = ""
    seed: int = 0

    def layers(self) -> list[int]:
        return sorted(self.x)

    def n_tokens(self, layer: int) -> int:
        shape = self.x[layer].shape
        return shape[0] * shape[1]

    def slice(self, layer: int) -> "ActivationDataset":
        if layer not in self.x:
            raise InputError(f"layer {layer} not captured in dataset")
        return ActivationDataset(
            {layer: self.x[layer]}, {layer: self.o[layer]},
            {layer: self.teacher_attn[layer]},
            self.n_heads, self.d_head, self.fingerprint, self.seed)


@dataclass
class DistillReport:
    curves: dict[int, list[float]] = field(default_factory=dict)
    seconds: dict[int, float] = field(default_factory=dict)

    def final_mse(self, layer: int) -> float:
        return self.curves[layer][-1]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("layer,step,mse\n")
            for layer in sorted(self.curves):
                for step, mse in enumerate(self.curves[layer]):
                    fh.write(f"{layer},{step},{mse!r}\n")


def collect_activations(full_model: Model, corpus, layers=None, batch_size: int = 64,
                        seed: int = 0) -> ActivationDataset:
    """Forward-only teacher capture; one forward per batch grabs all layers."""
    kinds = full_model.kinds()
    if any(k != FULL for k in kinds):
        raise ContractError(f"capture needs an all-Full teacher, got kinds {kinds}")
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise InputError(f"corpus must be a nonempty [n_seqs, seq_len] array, got {corpus.shape}")
    n_layers = full_model.config.n_layers
    if layers is None:
        layers = range(n_layers)
    layers = sorted(int(l) for l in layers)
    for l in layers:
        if not 0 <= l < n_layers:
            raise InputError(f"layer {l} out of range for {n_layers} layers")

    xs: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    os_: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    with no_grad():
        for lo in range(0, corpus.shape[0], batch_size):
            batch = corpus[lo:lo + batch_size]
            _, caps = forward_full(full_model, batch, capture_layers=layers)
            for l in layers:
                xn, attn_out = caps[l]
                xs[l].append(xn)
                os_[l].append(attn_out)
    teacher = {l: {k: v.copy() for k, v in full_model.layers[l].attn.arrays().items()}
               for l in layers}
    fp = hashlib.sha256(corpus.tobytes() + full_model.emb.data.tobytes()).hexdigest()[:16]
    return ActivationDataset(
        {l: np.concatenate(xs[l], axis=0) for l in layers},
        {l: np.concatenate(os_[l], axis=0) for l in layers},
        teacher, full_model.config.n_heads, full_model.config.d_head,
        fingerprint=fp, seed=seed)


def distill_block(layer: int, variant: str, data: ActivationDataset,
                  cfg: DistillConfig) -> tuple[LinearBlockWeights, list[float]]:
    """Train one linear block against the captured teacher sublayer."""
    cfg.validate()
    check_variant(variant)
    if layer not in data.x:
        raise InputError(f"layer {layer} not captured in dataset")
    x_all, o_all = data.x[layer], data.o[layer]
    rng = SeededRng(cfg.seed).split(layer)
    weights = init_linear_weights(
        variant, data.n_heads, data.d_head, rng,
        warm=data.teacher_attn.get(layer),
        prefix=f"layers.{layer}.attn", dtype=x_all.dtype)
    curve: list[float] = []
    if cfg.steps == 0:
        return weights, curve
    n_seqs, seq_len, _ = x_all.shape
    batch_seqs = max(1, cfg.batch_tokens // seq_len)
    opt = Adam(weights.params(), lr=cfg.lr)
    for step in range(cfg.steps):
        idx = rng.integers(0, n_seqs, batch_seqs)
        xb, ob = Tensor(x_all[idx]), Tensor(o_all[idx])
        try:
            out, _ = linear_forward_recurrent(weights, xb)
            diff = sub(out, ob)
            loss = tmean(mul(diff, diff))
        except NumericError as exc:
            raise TrainingError(f"layer {layer}: non-finite loss at step {step}: {exc}") from exc
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingError(f"layer {layer}: non-finite loss at step {step}")
        curve.append(val)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if cfg.stop_ratio is not None and val <= cfg.stop_ratio * curve[0]:
            break
    return weights, curve


def _run_job(layer: int, variant: str, data: ActivationDataset, cfg: DistillConfig):
    t0 = time.perf_counter()
    weights, curve = distill_block(layer, variant, data, cfg)
    arrays = {p.name.rsplit(".", 1)[-1]: p.data for p in weights.params()}
    return layer, arrays, curve, time.perf_counter() - t0


def distill_all(full_model: Model, corpus, variant: str, cfg: DistillConfig,
                workers: int = 1) -> tuple[dict[int, LinearBlockWeights], DistillReport]:
    """Distill every layer; output is invariant to worker count."""
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    check_variant(variant)
    data = collect_activations(full_model, corpus, seed=cfg.seed)
    n_layers = full_model.config.n_layers
    slices = {l: data.slice(l) for l in range(n_layers)}

    raw: dict[int, tuple] = {}
    if workers == 1:
        for l in range(n_layers):
            raw[l] = _run_job(l, variant, slices[l], cfg)
    else:
        with ProcessPoolExecutor(max_workers=min(workers, n_layers)) as pool:
            futures = {l: pool.submit(_run_job, l, variant, slices[l], cfg)
                       for l in range(n_layers)}
            for l in range(n_layers):
                raw[l] = futures[l].result()

    blocks: dict[int, LinearBlockWeights] = {}
    report = DistillReport()
    for l in range(n_layers):
        _, arrays, curve, secs = raw[l]
        named = {f"layers.{l}.attn.{k}": v for k, v in arrays.items()}
        blocks[l] = checkpoint._linear_from_tensors(
            variant, f"layers.{l}.attn", named, data.n_heads, data.d_head)
        report.curves[l] = curve
        report.seconds[l] = secs
    return blocks, report


def save_activations(data: ActivationDataset, path) -> None:
    """Flat [n_tokens, d_model] per layer; seq_len in the footer restores shape."""
    tensors: dict[str, np.ndarray] = {}
    seq_lens = {}
    for l in data.layers():
        n, t, d = data.x[l].shape
        seq_lens[str(l)] = t
        tensors[f"bld.layer{l}.X"] = data.x[l].reshape(n * t, d)
        tensors[f"bld.layer{l}.O"] = data.o[l].reshape(n * t, d)
        for k, v in data.teacher_attn[l].items():
            tensors[f"bld.layer{l}.teacher.{k}"] = v
    meta = {"kind": "activations", "layers": [int(l) for l in data.layers()],
            "seq_lens": seq_lens, "n_heads": data.n_heads, "d_head": data.d_head,
            "fingerprint": data.fingerprint, "seed": data.seed}
    checkpoint.write_container(path, tensors, meta)


def load_activations(path) -> ActivationDataset:
    tensors, meta = checkpoint.read_container(path)
    if meta.get("kind") != "activations":
        raise InputError(f"container holds {meta.get('kind')!r}, not activations")
    x, o, teacher = {}, {}, {}
    for l in meta["layers"]:
        t = meta["seq_lens"][str(l)]
        flat_x = tensors[f"bld.layer{l}.X"]
        n = flat_x.shape[0] // t
        x[l] = flat_x.reshape(n, t, -1)
        o[l] = tensors[f"bld.layer{l}.O"].reshape(n, t, -1)
        prefix = f"bld.layer{l}.teacher."
        teacher[l] = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    return ActivationDataset(x, o, teacher, meta["n_heads"], meta["d_head"],
                             meta.get("fingerprint", ""), meta.get("seed", 0))


def mean_next_token_kl(p_model: Model, q_model: Model, tokens) -> float:
    """Mean KL(teacher || student) over next-token distributions, all positions."""
    tokens = np.asarray(tokens)
    with no_grad():
        lp = forward_full(p_model, tokens).data.astype(np.float64)
        lq = forward_full(q_model, tokens).data.astype(np.float64)

    def log_softmax(z):
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    lsp, lsq = log_softmax(lp), log_softmax(lq)
    kl = (np.exp(lsp) * (lsp - lsq)).sum(axis=-1)
    return float(kl.mean())
