"""Shared test helpers and expensive session-scoped fixtures."""

import hashlib
import json
import os
import time

import numpy as np
import pytest

TASK_PARAMS: dict = {}  # defaults of TaskSpec: mqar, vocab 64, seq 40, 8 pairs
MODEL_PARAMS: dict = {}  # defaults of ModelConfig: 8 layers, d 128, 4 heads
# Two-phase recipe: retrieval circuits only form under heavy sample reuse, but
# staying on the small slice past ~3k steps memorizes it; switching to the full
# corpus at that point keeps val tracking train.
PRETRAIN = {"phase1_seqs": 20000, "phase1_steps": 3000, "phase2_steps": 6000,
            "batch_size": 64, "lr": 1e-3}
DISTILL = {"steps": 2000, "batch_tokens": 1280, "lr": 1e-3, "seed": 2,
           "stop_ratio": 0.25}
CAPTURE_SEQS = 1024
SFT = {"steps": 300, "batch_size": 16, "lr": 3e-4, "budgets": (2, 4, 6)}
BENCH_CONTEXTS = (512, 2048, 8192)
VARIANTS = ("ungated", "gla", "gdn")
FIXTURE_TAG = "v1"
EVAL_BATCH = 250


def tiny_config(out_dir, **overrides):
    """Pipeline config small enough to run end to end in a couple of seconds.

    Overrides use dotted keys for nested fields ("distill.steps") or a bare
    section name to replace the whole section.
    """
    cfg = {
        "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
                  "vocab_size": 16, "max_seq": 64,
                  "pretrain_steps": 8, "pretrain_batch": 4},
        "task": {"kind": "mqar", "vocab_size": 16, "seq_len": 16, "n_pairs": 2,
                 "n_train": 24, "n_val": 12, "n_test": 12, "seed": 0},
        "distill": {"variant": "gla", "steps": 4, "batch_tokens": 64,
                    "capture_seqs": 16},
        "search": {"strategy": "greedy", "p_min": 0.0},
        "sft": {"steps": 3, "batch_size": 4, "budgets": [1, 2]},
        "bench": {"context_lengths": [8], "gen_tokens": 4, "repeats": 3,
                  "warmup": 0},
        "output_dir": str(out_dir),
    }
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        if field:
            cfg[section][field] = value
        else:
            cfg[section] = value
    return cfg


def desk_pipeline_config(out_dir) -> dict:
    return {
        "model": {**MODEL_PARAMS,
                  "pretrain_steps": PRETRAIN["phase1_steps"] + PRETRAIN["phase2_steps"],
                  "pretrain_batch": PRETRAIN["batch_size"],
                  "pretrain_lr": PRETRAIN["lr"]},
        "task": dict(TASK_PARAMS),
        "distill": {"variant": "gla", "steps": DISTILL["steps"],
                    "batch_tokens": DISTILL["batch_tokens"],
                    "lr": DISTILL["lr"], "capture_seqs": CAPTURE_SEQS,
                    "stop_ratio": DISTILL["stop_ratio"]},
        "search": {"strategy": "greedy", "p_min_frac": 0.95},
        "sft": {"steps": SFT["steps"], "batch_size": SFT["batch_size"],
                "lr": SFT["lr"], "budgets": list(SFT["budgets"])},
        "bench": {"context_lengths": list(BENCH_CONTEXTS), "gen_tokens": 128,
                  "repeats": 5, "warmup": 1},
        "output_dir": str(out_dir),
    }


def _fixture_key() -> str:
    payload = json.dumps(
        {"tag": FIXTURE_TAG, "task": TASK_PARAMS, "model": MODEL_PARAMS,
         "pretrain": PRETRAIN, "distill": DISTILL, "capture": CAPTURE_SEQS,
         "sft": SFT, "bench": list(BENCH_CONTEXTS)},
        sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _build_desk_run(run_dir: str) -> dict:
    from hybridforge.distill import (DistillConfig, collect_activations,
                                     distill_block)
    from hybridforge.checkpoint import save_linear_blocks, save_model
    from hybridforge.model import ModelConfig, TrainConfig, model_init, pretrain
    from hybridforge.pipeline import run_pipeline
    from hybridforge.tasks import TaskSpec, evaluate, generate_task, save_splits

    os.makedirs(run_dir, exist_ok=True)
    meta: dict = {"timings": {}}

    task = TaskSpec(**TASK_PARAMS)
    splits = generate_task(task)
    save_splits(task, splits, os.path.join(run_dir, "task.hybf"))
    corpus = np.stack([ex.tokens for ex in splits["train"]])

    t0 = time.perf_counter()
    model = model_init(ModelConfig(**MODEL_PARAMS), seed=0)
    model, _ = pretrain(model, corpus[:PRETRAIN["phase1_seqs"]],
                        TrainConfig(PRETRAIN["phase1_steps"], PRETRAIN["batch_size"],
                                    PRETRAIN["lr"]), seed=1)
    meta["phase1_val_acc"] = evaluate(model, splits["val"], batch_size=EVAL_BATCH)
    model, curve = pretrain(model, corpus,
                            TrainConfig(PRETRAIN["phase2_steps"], PRETRAIN["batch_size"],
                                        PRETRAIN["lr"]), seed=2)
    meta["timings"]["pretrain"] = time.perf_counter() - t0
    meta["pretrain_final_loss"] = curve[-1]
    meta["base_val_acc"] = evaluate(model, splits["val"], batch_size=EVAL_BATCH)
    save_model(model, os.path.join(run_dir, "model.hybf"))

    t0 = time.perf_counter()
    capture = collect_activations(model, corpus[:CAPTURE_SEQS], seed=DISTILL["seed"])
    meta["timings"]["capture"] = time.perf_counter() - t0

    cfg = DistillConfig(**DISTILL)
    curves: dict = {v: {} for v in VARIANTS}
    gla_blocks = {}
    t0 = time.perf_counter()
    for variant in VARIANTS:
        for layer in range(model.config.n_layers):
            weights, c = distill_block(layer, variant, capture.slice(layer), cfg)
            curves[variant][str(layer)] = c
            if variant == "gla":
                gla_blocks[layer] = weights
    meta["timings"]["distill_convergence"] = time.perf_counter() - t0
    save_linear_blocks(gla_blocks, os.path.join(run_dir, "blocks.hybf"),
                       {"variant": "gla"})
    with open(os.path.join(run_dir, "distill_curves.json"), "w") as fh:
        json.dump(curves, fh)

    t0 = time.perf_counter()
    run_pipeline(desk_pipeline_config(run_dir),
                 stages=["search", "eval", "sft", "bench", "report"])
    meta["timings"]["pipeline_stages"] = time.perf_counter() - t0

    with open(os.path.join(run_dir, "fixture.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def _load_desk_run(run_dir: str) -> dict:
    from hybridforge.checkpoint import load_linear_blocks, load_model
    from hybridforge.tasks import load_splits

    with open(os.path.join(run_dir, "fixture.json")) as fh:
        meta = json.load(fh)
    with open(os.path.join(run_dir, "distill_curves.json")) as fh:
        curves = json.load(fh)
    task, splits = load_splits(os.path.join(run_dir, "task.hybf"))
    return {
        "dir": run_dir,
        "meta": meta,
        "task": task,
        "splits": splits,
        "model": load_model(os.path.join(run_dir, "model.hybf")),
        "blocks": load_linear_blocks(os.path.join(run_dir, "blocks.hybf")),
        "distill_curves": curves,
    }


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Pretrained 8-layer model, distillation curves for all variants, GLA
    blocks, and a finished search/eval/sft/bench/report pipeline run.

    Built once per session; set HYBRIDFORGE_TEST_CACHE to keep the artifacts
    across sessions while developing.
    """
    cache = os.environ.get("HYBRIDFORGE_TEST_CACHE")
    root = cache if cache else str(tmp_path_factory.mktemp("desk"))
    run_dir = os.path.join(root, f"desk-{_fixture_key()}")
    if not os.path.exists(os.path.join(run_dir, "fixture.json")):
        _build_desk_run(run_dir)
    return _load_desk_run(run_dir)
