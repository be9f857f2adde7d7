"""Decode throughput and cache-size measurement.

Protocol: prefill once per (model, context), then time only the decode loop,
cloning the prefilled cache for every repeat so state never leaks between
repeats. Throughput is reported as the median tokens/sec over the timed
repeats with the interquartile range as spread. If a single repeat finishes
in under 10 ms the generation length doubles until it does not, so timer
resolution never dominates.

Cache sizes are not estimated: the measured cache is asserted equal to the
closed-form byte count both after prefill and after the last decoded token.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .linear_attn import state_bytes
from .model import FULL, KVCache, Model, decode_step, prefill
from .rng import SeededRng

MIN_TIMED_SECONDS = 0.010
DEFAULT_CONTEXTS = (512, 2048, 8192)


@dataclass(frozen=True)
class BenchConfig:
    context_lengths: tuple[int, ...] = DEFAULT_CONTEXTS
    gen_tokens: int = 128
    batch: int = 1
    repeats: int = 5
    warmup: int = 1
    seed: int = 0

    def validate(self) -> "BenchConfig":
        if not self.context_lengths:
            raise ConfigError("context_lengths must be nonempty")
        if any(c < 1 for c in self.context_lengths):
            raise ConfigError(f"context lengths must be positive, got {self.context_lengths}")
        if self.gen_tokens < 1:
            raise ConfigError(f"gen_tokens must be >= 1, got {self.gen_tokens}")
        if self.batch != 1:
            raise ConfigError("decode timing is single-stream; batch must be 1")
        if self.repeats < 3:
            raise ConfigError(f"repeats must be >= 3 for a median and IQR, got {self.repeats}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        return self


def cache_bytes(kinds, config, context_len: int, dtype_bytes: int = 4) -> int:
    """Closed-form decode-state size at a given context length.

    Full layers pay 2 * context * n_heads * d_head * dtype_bytes (keys and
    values); linear layers pay their constant state size, independent of
    context.
    """
    kinds = tuple(kinds.kinds) if hasattr(kinds, "kinds") else tuple(kinds)
    if context_len < 0:
        raise ConfigError(f"context_len must be >= 0, got {context_len}")
    total = 0
    for kind in kinds:
        if kind == FULL:
            total += 2 * context_len * config.n_heads * config.d_head * dtype_bytes
        else:
            total += state_bytes(kind, config, dtype_bytes)
    return total


def _assert_cache_size(cache: KVCache, model: Model, context_len: int) -> None:
    expected = cache_bytes(model.kinds(), model.config, context_len,
                           np.dtype(model.dtype).itemsize)
    measured = cache.nbytes()
    if measured != expected:
        raise ContractError(
            f"cache holds {measured} bytes at context {context_len}, formula gives {expected}")


def bench_decode(model: Model, context_len: int, gen_tokens: int = 64, repeats: int = 5,
                 warmup: int = 1, seed: int = 0) -> dict:
    """Measure decode throughput at one context length; returns a result row."""
    cfg = model.config
    vocab = cfg.vocab_size
    rng = SeededRng(seed)
    ctx = np.asarray(rng.integers(0, vocab, context_len), dtype=np.int64)

    base_cache = prefill(model, ctx)
    _assert_cache_size(base_cache, model, context_len)

    # grow the generation length until one repeat clears the timer floor
    gen = int(gen_tokens)
    while True:
        if context_len + gen > cfg.max_seq:
            gen = cfg.max_seq - context_len
            if gen < 1:
                raise ConfigError(
                    f"context {context_len} leaves no decode room under max_seq {cfg.max_seq}")
            break
        toks = rng.integers(0, vocab, gen)
        cache = base_cache.clone()
        t0 = time.perf_counter()
        for g in range(gen):
            _, cache = decode_step(model, cache, int(toks[g]))
        if time.perf_counter() - t0 >= MIN_TIMED_SECONDS:
            break
        gen *= 2

    gen_toks = rng.integers(0, vocab, gen)
    rates = []
    cache = None
    for rep in range(warmup + repeats):
        cache = base_cache.clone()
        t0 = time.perf_counter()
        for g in range(gen):
            _, cache = decode_step(model, cache, int(gen_toks[g]))
        dt = time.perf_counter() - t0
        if rep >= warmup:
            rates.append(gen / dt)
    _assert_cache_size(cache, model, context_len + gen)

    rates = np.asarray(rates)
    return {
        "context": context_len,
        "gen_tokens": gen,
        "tokens_per_sec": float(np.median(rates)),
        "iqr": float(np.percentile(rates, 75) - np.percentile(rates, 25)),
        "cache_bytes": cache_bytes(model.kinds(), cfg, context_len,
                                   np.dtype(model.dtype).itemsize),
    }


def bench_suite(named_models: list[tuple[str, Model]], cfg: BenchConfig) -> list[dict]:
    """Bench each (spec string, model) at every context; adds speedup columns.

    Speedup is relative to the first entry (conventionally the all-Full
    model) at the same context length, so that entry's speedup is exactly 1.
    """
    cfg.validate()
    if not named_models:
        raise ConfigError("no models to bench")
    rows: list[dict] = []
    baseline: dict[int, float] = {}
    for name, model in named_models:
        for ctx in cfg.context_lengths:
            row = bench_decode(model, ctx, cfg.gen_tokens, cfg.repeats, cfg.warmup, cfg.seed)
            row["spec"] = name
            if ctx not in baseline:
                baseline[ctx] = row["tokens_per_sec"]
            row["speedup"] = row["tokens_per_sec"] / baseline[ctx]
            rows.append(row)
    return rows
