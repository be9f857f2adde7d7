"""Decode throughput benchmarking and closed-form cache accounting."""

import numpy as np
import pytest

from hybridforge.bench import (DEFAULT_CONTEXTS, BenchConfig, _assert_cache_size,
                               bench_decode, bench_suite, cache_bytes)
from hybridforge.errors import ConfigError, ContractError
from hybridforge.linear_attn import init_linear_weights, state_bytes
from hybridforge.model import KVCache, ModelConfig, model_init, prefill
from hybridforge.rng import SeededRng
from hybridforge.search import HybridSpec, assemble_hybrid

WIDE = ModelConfig(n_layers=4, d_model=256, n_heads=8, d_ff=512, vocab_size=64,
                   max_seq=9000)
TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=11,
                   max_seq=96)


def tiny_hybrid(kinds, seed=0):
    model = model_init(TINY, seed=seed)
    blocks = {
        l: init_linear_weights(k, TINY.n_heads, TINY.d_head, SeededRng(seed + l),
                               prefix=f"layers.{l}.attn")
        for l, k in enumerate(kinds) if k != "full"
    }
    return assemble_hybrid(model, blocks, HybridSpec(kinds))


# ---------------------------------------------------------------------------
# cache accounting
# ---------------------------------------------------------------------------

def test_full_layer_cache_is_2_ctx_heads_dhead_bytes():
    kinds = ("full", "full", "gla", "gla")
    got = cache_bytes(kinds, WIDE, 512, dtype_bytes=4)
    full_part = 2 * (2 * 512 * 8 * 32 * 4)
    linear_part = 2 * state_bytes("gla", WIDE, 4)
    assert full_part == 2_097_152
    assert got == full_part + linear_part
    # default geometry, every layer full, context 512: the reference constant
    assert cache_bytes(("full",) * 8, ModelConfig(), 512) == 4_194_304


def test_cache_bytes_is_additive_over_layers():
    kinds = ("full", "gla", "gdn", "ungated")
    total = cache_bytes(kinds, WIDE, 777)
    per_layer = sum(cache_bytes((k,), WIDE, 777) for k in kinds)
    assert total == per_layer


def test_linear_cache_is_context_independent():
    kinds = ("gla", "gdn", "ungated", "gla")
    assert cache_bytes(kinds, WIDE, 512) == cache_bytes(kinds, WIDE, 8192)
    assert cache_bytes(kinds, WIDE, 0) == cache_bytes(kinds, WIDE, 10 ** 6)


def test_full_cache_scales_linearly_with_context_and_dtype():
    kinds = ("full",) * 4
    assert cache_bytes(kinds, WIDE, 1024) == 2 * cache_bytes(kinds, WIDE, 512)
    assert cache_bytes(kinds, WIDE, 512, dtype_bytes=8) == \
        2 * cache_bytes(kinds, WIDE, 512, dtype_bytes=4)


def test_cache_bytes_accepts_spec_objects():
    spec = HybridSpec(("full", "gla", "full", "full"))
    assert cache_bytes(spec, WIDE, 256) == cache_bytes(spec.kinds, WIDE, 256)
    with pytest.raises(ConfigError, match="context_len"):
        cache_bytes(spec, WIDE, -1)


def test_measured_cache_equals_formula_after_prefill_and_decode():
    model = tiny_hybrid(("full", "gla"))
    ctx = np.asarray(SeededRng(1).integers(0, TINY.vocab_size, 24), dtype=np.int64)
    cache = prefill(model, ctx)
    expected = cache_bytes(model.kinds(), TINY, 24, np.dtype(model.dtype).itemsize)
    assert cache.nbytes() == expected
    _assert_cache_size(cache, model, 24)  # does not raise
    with pytest.raises(ContractError, match="formula gives"):
        _assert_cache_size(cache, model, 25)


def test_fresh_cache_pays_only_linear_state():
    model = tiny_hybrid(("gdn", "ungated"))
    assert KVCache(model).nbytes() == cache_bytes(model.kinds(), TINY, 0,
                                                  np.dtype(model.dtype).itemsize)


# ---------------------------------------------------------------------------
# timing protocol
# ---------------------------------------------------------------------------

def test_bench_config_validation():
    assert BenchConfig().context_lengths == DEFAULT_CONTEXTS
    assert BenchConfig().gen_tokens == 128
    BenchConfig(context_lengths=(8,), repeats=3).validate()
    with pytest.raises(ConfigError, match="nonempty"):
        BenchConfig(context_lengths=()).validate()
    with pytest.raises(ConfigError, match="positive"):
        BenchConfig(context_lengths=(0,)).validate()
    with pytest.raises(ConfigError, match="gen_tokens"):
        BenchConfig(gen_tokens=0).validate()
    with pytest.raises(ConfigError, match="single-stream"):
        BenchConfig(batch=2).validate()
    with pytest.raises(ConfigError, match="repeats"):
        BenchConfig(repeats=2).validate()
    with pytest.raises(ConfigError, match="warmup"):
        BenchConfig(warmup=-1).validate()


def test_bench_decode_row_contents():
    model = tiny_hybrid(("full", "gla"))
    row = bench_decode(model, 16, gen_tokens=8, repeats=3, warmup=1, seed=0)
    assert row["context"] == 16
    assert row["tokens_per_sec"] > 0
    assert row["iqr"] >= 0
    assert 8 <= row["gen_tokens"] <= TINY.max_seq - 16
    assert row["cache_bytes"] == cache_bytes(model.kinds(), TINY, 16,
                                             np.dtype(model.dtype).itemsize)


def test_bench_decode_needs_decode_room():
    model = tiny_hybrid(("full", "full"))
    with pytest.raises(ConfigError, match="no decode room"):
        bench_decode(model, TINY.max_seq, gen_tokens=8, repeats=3)


def test_bench_suite_first_entry_is_the_exact_baseline():
    full = tiny_hybrid(("full", "full"))
    hybrid = tiny_hybrid(("gla", "gla"))
    cfg = BenchConfig(context_lengths=(8, 16), gen_tokens=4, repeats=3, warmup=0)
    rows = bench_suite([("FF", full), ("LL", hybrid)], cfg)
    assert len(rows) == 4
    assert [r["spec"] for r in rows] == ["FF", "FF", "LL", "LL"]
    base = {r["context"]: r["tokens_per_sec"] for r in rows if r["spec"] == "FF"}
    for r in rows:
        if r["spec"] == "FF":
            assert r["speedup"] == 1.0  # exact, not approximately
        else:
            assert r["speedup"] == r["tokens_per_sec"] / base[r["context"]]


def test_bench_suite_rejects_empty_input():
    with pytest.raises(ConfigError, match="no models"):
        bench_suite([], BenchConfig(context_lengths=(8,)))
