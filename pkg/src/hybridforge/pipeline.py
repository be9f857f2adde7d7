"""End-to-end orchestration: pretrain, distill, search, eval, sft, bench, report.

Config is strict-schema JSON with top-level sections {model, task, distill,
search, bench, sft, seeds, output_dir}; unknown keys anywhere are errors
naming the offending key. Every stage persists its artifacts plus a marker
holding the config hash; re-running skips stages whose marker matches and
whose artifacts still exist, so deleting one artifact re-runs exactly the
stages that depend on it. The manifest is written before any stage starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import report as report_mod
from . import search as search_mod
from .bench import BenchConfig, bench_suite
from .checkpoint import (load_linear_blocks, load_model, save_linear_blocks, save_model)
from .distill import DistillConfig, distill_all
from .errors import ConfigError, StageError
from .linear_attn import VARIANTS
from .model import Model, ModelConfig, TrainConfig, model_init, pretrain, reconfigured, sft
from .search import (HybridSpec, SearchResult, assemble_hybrid, greedy_fixed_budget,
                     greedy_replace, strategy_local_importance, strategy_random,
                     strategy_uniform)
from .tasks import TaskSpec, evaluate, generate_task, load_splits, make_evaluator, save_splits

STAGES = ("pretrain", "distill", "search", "eval", "sft", "bench", "report")
STRATEGIES = ("greedy", "importance", "uniform", "random", "exhaustive")


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 64
    max_seq: int = 512
    pretrain_steps: int = 6000
    pretrain_batch: int = 64  # small batches stall at the uniform-answer loss floor
    pretrain_lr: float = 1e-3

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_layers, self.d_model, self.n_heads, self.d_ff,
                           self.vocab_size, self.max_seq).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.pretrain_steps, self.pretrain_batch,
                           self.pretrain_lr).validate()


@dataclass(frozen=True)
class DistillSection:
    variant: str = "gla"
    steps: int = 1200
    batch_tokens: int = 1280
    lr: float = 1e-3
    capture_seqs: int = 1024
    stop_ratio: float | None = None

    def validate(self) -> "DistillSection":
        if self.variant not in VARIANTS:
            raise ConfigError(f"distill.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.capture_seqs < 1:
            raise ConfigError(f"distill.capture_seqs must be >= 1, got {self.capture_seqs}")
        return self

    def distill_config(self, seed: int) -> DistillConfig:
        return DistillConfig(self.steps, self.batch_tokens, self.lr, seed,
                             self.stop_ratio).validate()


@dataclass(frozen=True)
class SearchSection:
    strategy: str = "greedy"
    p_min: float | None = None       # absolute threshold; overrides p_min_frac
    p_min_frac: float | None = 0.95  # threshold as a fraction of the baseline
    budget: int | None = None

    def validate(self) -> "SearchSection":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"search.strategy must be one of {STRATEGIES}, "
                              f"got {self.strategy!r}")
        if self.strategy in ("importance", "uniform", "random") and self.budget is None:
            raise ConfigError(f"search.budget is required for strategy {self.strategy!r}")
        return self


@dataclass(frozen=True)
class SftSection:
    steps: int = 300
    batch_size: int = 16
    lr: float = 3e-4
    budgets: tuple[int, ...] = (2, 4, 6)

    def validate(self) -> "SftSection":
        if self.steps < 0:
            raise ConfigError(f"sft.steps must be >= 0, got {self.steps}")
        if any(k < 1 for k in self.budgets):
            raise ConfigError(f"sft.budgets must be positive, got {self.budgets}")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.steps, self.batch_size, self.lr).validate()


@dataclass(frozen=True)
class SeedSection:
    model: int = 0
    pretrain: int = 1
    distill: int = 2
    search: int = 3
    sft: int = 4
    bench: int = 5


_SECTION_TYPES = {
    "model": ModelSection,
    "task": TaskSpec,
    "distill": DistillSection,
    "search": SearchSection,
    "bench": BenchConfig,
    "sft": SftSection,
    "seeds": SeedSection,
}


@dataclass
class PipelineConfig:
    model: ModelSection
    task: TaskSpec
    distill: DistillSection
    search: SearchSection
    bench: BenchConfig
    sft: SftSection
    seeds: SeedSection
    output_dir: str
    workers: int = 1

    def merged_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTION_TYPES}
        out["output_dir"] = self.output_dir
        return out

    def config_hash(self) -> str:
        payload = self.merged_dict()
        payload.pop("output_dir")  # relocating a run must not invalidate it
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build_section(name: str, cls, payload: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in fields:
            raise ConfigError(f"unknown config key {name}.{key}")
    kwargs = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(source=None) -> PipelineConfig:
    """Accepts a JSON file path, a dict, or None (all defaults)."""
    if source is None:
        raw: dict = {}
    elif isinstance(source, dict):
        raw = source
    else:
        try:
            with open(source) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {source} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    allowed = set(_SECTION_TYPES) | {"output_dir", "workers"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        payload = raw.get(name, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        sections[name] = _build_section(name, cls, payload)
    cfg = PipelineConfig(
        model=sections["model"],
        task=sections["task"],
        distill=sections["distill"],
        search=sections["search"],
        bench=sections["bench"],
        sft=sections["sft"],
        seeds=sections["seeds"],
        output_dir=str(raw.get("output_dir", "runs/default")),
        workers=int(raw.get("workers", 1)),
    )
    cfg.model.model_config()
    cfg.model.train_config()
    cfg.task.validate()
    cfg.distill.validate()
    cfg.search.validate()
    cfg.bench.validate()
    cfg.sft.validate()
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    return cfg


class Paths:
    """Artifact layout inside the output directory."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        j = lambda name: os.path.join(out_dir, name)
        self.manifest = j("manifest.json")
        self.model = j("model.hybf")
        self.task = j("task.hybf")
        self.pretrain_curve = j("pretrain.json")
        self.blocks = j("blocks.hybf")
        self.distill_csv = j("distill.csv")
        self.search_json = j("search.json")
        self.trace = j("trace.jsonl")
        self.eval_cache = j("eval_cache.json")
        self.eval_json = j("eval.json")
        self.sft_json = j("sft.json")
        self.bench_json = j("bench.json")
        self.throughput_csv = j("throughput.csv")
        self.trajectory_csv = j("trajectory.csv")
        self.strategies_csv = j("strategies.csv")
        self.sft_csv = j("sft.csv")
        self.summary_json = j("summary.json")

    def marker(self, stage: str) -> str:
        return os.path.join(self.out_dir, f".stage_{stage}.json")


_STAGE_ARTIFACTS = {
    "pretrain": ("model", "task", "pretrain_curve"),
    "distill": ("blocks", "distill_csv"),
    "search": ("search_json", "trace"),
    "eval": ("eval_json",),
    "sft": ("sft_json",),
    "bench": ("bench_json",),
    "report": ("throughput_csv", "trajectory_csv", "strategies_csv", "sft_csv",
               "summary_json"),
}

_STAGE_PRODUCER = {
    "model": "pretrain", "task": "pretrain", "pretrain_curve": "pretrain",
    "blocks": "distill", "distill_csv": "distill",
    "search_json": "search", "trace": "search",
    "eval_json": "eval", "sft_json": "sft", "bench_json": "bench",
}


def _require(paths: Paths, attr: str) -> str:
    path = getattr(paths, attr)
    if not os.path.exists(path):
        raise StageError(f"missing artifact {path}; run the {_STAGE_PRODUCER[attr]!r} "
                         "stage first")
    return path


def _stage_done(paths: Paths, stage: str, config_hash: str) -> bool:
    marker = paths.marker(stage)
    if not os.path.exists(marker):
        return False
    try:
        with open(marker) as fh:
            recorded = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    if recorded.get("config_hash") != config_hash:
        return False
    return all(os.path.exists(getattr(paths, a)) for a in _STAGE_ARTIFACTS[stage])


def _mark_done(paths: Paths, stage: str, config_hash: str, seconds: float) -> None:
    with open(paths.marker(stage), "w") as fh:
        json.dump({"config_hash": config_hash, "seconds": seconds}, fh)


def _write_json(path: str, payload) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# stage bodies
# ---------------------------------------------------------------------------

def _corpus_from(splits, name: str) -> np.ndarray:
    return np.stack([ex.tokens for ex in splits[name]])


def _stage_pretrain(cfg: PipelineConfig, paths: Paths) -> None:
    splits = generate_task(cfg.task)
    save_splits(cfg.task, splits, paths.task)
    base = model_init(cfg.model.model_config(), seed=cfg.seeds.model)
    trained, curve = pretrain(base, _corpus_from(splits, "train"),
                              cfg.model.train_config(), seed=cfg.seeds.pretrain)
    save_model(trained, paths.model)
    _write_json(paths.pretrain_curve, {"loss_curve": curve})


def _stage_distill(cfg: PipelineConfig, paths: Paths) -> None:
    model = load_model(_require(paths, "model"))
    _, splits = load_splits(_require(paths, "task"))
    corpus = _corpus_from(splits, "train")[: cfg.distill.capture_seqs]
    blocks, rep = distill_all(model, corpus, cfg.distill.variant,
                              cfg.distill.distill_config(cfg.seeds.distill),
                              workers=cfg.workers)
    save_linear_blocks(blocks, paths.blocks, {"variant": cfg.distill.variant})
    rep.to_csv(paths.distill_csv)


def _make_val_evaluator(cfg: PipelineConfig, paths: Paths, model: Model, blocks):
    task_spec, splits = load_splits(_require(paths, "task"))
    fingerprint = f"{task_spec.fingerprint()}-{cfg.config_hash()}"
    assemble = lambda spec: assemble_hybrid(model, blocks, spec)
    ev = make_evaluator(splits["val"], assemble, fingerprint=fingerprint,
                        cache_path=paths.eval_cache)
    return ev, splits, assemble


def _stage_search(cfg: PipelineConfig, paths: Paths) -> None:
    model = load_model(_require(paths, "model"))
    blocks = load_linear_blocks(_require(paths, "blocks"))
    ev, _, _ = _make_val_evaluator(cfg, paths, model, blocks)
    n_layers = model.config.n_layers
    strat = cfg.search.strategy
    variant = cfg.distill.variant

    if strat == "greedy":
        if cfg.search.budget is not None:
            result = greedy_fixed_budget(model, blocks, ev, cfg.search.budget)
        else:
            if cfg.search.p_min is not None:
                p_min = cfg.search.p_min
            else:
                frac = cfg.search.p_min_frac if cfg.search.p_min_frac is not None else 0.95
                p_min = frac * ev.score_spec(HybridSpec.all_full(n_layers))
            result = greedy_replace(model, blocks, ev, p_min)
    elif strat == "exhaustive":
        baseline = ev.score_spec(HybridSpec.all_full(n_layers))
        best, score = search_mod.exhaustive_search(ev, n_layers, k=cfg.search.budget,
                                                   variant_of=blocks)
        result = SearchResult(baseline, best, score, best, score,
                              evaluations=ev.misses)
    else:
        k = cfg.search.budget
        baseline = ev.score_spec(HybridSpec.all_full(n_layers))
        if strat == "importance":
            _, specs = strategy_local_importance(model, blocks, ev)
            spec = specs[k]
        elif strat == "uniform":
            spec = strategy_uniform(k, n_layers, variant)
        else:
            spec = strategy_random(k, n_layers, cfg.seeds.search, variant)
        score = ev.score_spec(spec)
        best, p_best = (spec, score) if score >= baseline else \
            (HybridSpec.all_full(n_layers), baseline)
        result = SearchResult(baseline, best, p_best, spec, score,
                              evaluations=ev.misses)

    payload = search_mod.result_to_dict(result)
    payload["strategy"] = strat
    _write_json(paths.search_json, payload)
    search_mod.write_trace_jsonl(result.trace, paths.trace)


def _stage_eval(cfg: PipelineConfig, paths: Paths) -> None:
    model = load_model(_require(paths, "model"))
    blocks = load_linear_blocks(_require(paths, "blocks"))
    found = search_mod.result_from_dict(_read_json(_require(paths, "search_json")))
    ev, splits, assemble = _make_val_evaluator(cfg, paths, model, blocks)
    n_layers = model.config.n_layers
    variant = cfg.distill.variant

    def test_score(spec: HybridSpec) -> float:
        return evaluate(assemble(spec), splits["test"])

    base = HybridSpec.all_full(n_layers)
    scores = {
        "val": {
            "base": ev.score_spec(base),
            "best": ev.score_spec(found.best_spec),
            "opt": ev.score_spec(found.opt_spec),
        },
        "test": {
            "base": test_score(base),
            "best": test_score(found.best_spec),
            "opt": test_score(found.opt_spec),
        },
    }

    # strategy comparison rows for the Fig. 4 analogue table
    rows: list[dict] = []
    budget_result = greedy_fixed_budget(model, blocks, ev, n_layers - 1)
    for t in budget_result.trace:
        if t["accepted"]:
            rows.append({"strategy": "greedy", "budget": t["iter"] + 1,
                         "score": t["p_star"], "seed": cfg.seeds.search})
    _, imp_specs = strategy_local_importance(model, blocks, ev)
    for k in range(1, n_layers):
        rows.append({"strategy": "importance", "budget": k,
                     "score": ev.score_spec(imp_specs[k]), "seed": cfg.seeds.search})
        rows.append({"strategy": "uniform", "budget": k,
                     "score": ev.score_spec(strategy_uniform(k, n_layers, variant)),
                     "seed": cfg.seeds.search})
        for seed in range(3):
            spec = strategy_random(k, n_layers, seed, variant)
            rows.append({"strategy": "random", "budget": k,
                         "score": ev.score_spec(spec), "seed": seed})
    _write_json(paths.eval_json, {"scores": scores, "strategy_rows": rows})


def _stage_sft(cfg: PipelineConfig, paths: Paths) -> None:
    model = load_model(_require(paths, "model"))
    blocks = load_linear_blocks(_require(paths, "blocks"))
    ev, splits, assemble = _make_val_evaluator(cfg, paths, model, blocks)
    rows = []
    for k in sorted(set(cfg.sft.budgets)):
        if k > model.config.n_layers:
            raise ConfigError(f"sft budget {k} exceeds n_layers={model.config.n_layers}")
        found = greedy_fixed_budget(model, blocks, ev, k)
        hybrid = assemble(found.opt_spec)
        pre = evaluate(hybrid, splits["val"])
        tuned = sft(hybrid, splits["train"], cfg.sft.train_config(),
                    seed=cfg.seeds.sft + k)
        post = evaluate(tuned, splits["val"])
        rows.append({"budget": k, "spec": found.opt_spec.to_string(),
                     "pre_sft": pre, "post_sft": post})
    _write_json(paths.sft_json, {"rows": rows})


def _stage_bench(cfg: PipelineConfig, paths: Paths) -> None:
    model = load_model(_require(paths, "model"))
    blocks = load_linear_blocks(_require(paths, "blocks"))
    found = search_mod.result_from_dict(_read_json(_require(paths, "search_json")))
    n_layers = model.config.n_layers
    variant = cfg.distill.variant
    headroom = max(cfg.bench.context_lengths) + 16 * cfg.bench.gen_tokens
    big = reconfigured(model, headroom)

    entries = [(HybridSpec.all_full(n_layers).to_string(), big)]
    if found.opt_spec.n_linear:
        entries.append((found.opt_spec.to_string(),
                        reconfigured(assemble_hybrid(model, blocks, found.opt_spec),
                                     headroom)))
    all_linear = HybridSpec.from_layers(n_layers, range(n_layers), variant)
    entries.append((all_linear.to_string(),
                    reconfigured(assemble_hybrid(model, blocks, all_linear), headroom)))
    rows = bench_suite(entries, cfg.bench)
    _write_json(paths.bench_json, {"rows": rows})


def _stage_report(cfg: PipelineConfig, paths: Paths) -> None:
    found = search_mod.result_from_dict(_read_json(_require(paths, "search_json")))
    trace = search_mod.read_trace_jsonl(_require(paths, "trace"))
    bench_rows = _read_json(_require(paths, "bench_json"))["rows"]
    eval_payload = _read_json(_require(paths, "eval_json"))
    sft_rows = _read_json(_require(paths, "sft_json"))["rows"]

    report_mod.write_throughput_csv(bench_rows, paths.throughput_csv)
    report_mod.write_trajectory_csv(trace, paths.trajectory_csv)
    report_mod.write_strategies_csv(eval_payload["strategy_rows"], paths.strategies_csv)
    report_mod.write_sft_csv(sft_rows, paths.sft_csv)
    summary = report_mod.build_summary(cfg.task.kind, found)
    summary["val_scores"] = eval_payload["scores"]["val"]
    summary["test_scores"] = eval_payload["scores"]["test"]
    report_mod.write_summary_json(summary, paths.summary_json)


_STAGE_BODIES = {
    "pretrain": _stage_pretrain,
    "distill": _stage_distill,
    "search": _stage_search,
    "eval": _stage_eval,
    "sft": _stage_sft,
    "bench": _stage_bench,
    "report": _stage_report,
}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def run_pipeline(config=None, stages=None, workers: int | None = None) -> dict:
    """Run the requested stages (default: all) with artifact-level resumption.

    Returns {"paths": Paths, "stages": {name: status}}.
    """
    cfg = config if isinstance(config, PipelineConfig) else load_config(config)
    if workers is not None:
        if workers < 1:
            raise ConfigError(f"workers must be >= 1, got {workers}")
        cfg.workers = workers
    requested = list(STAGES) if stages is None else list(stages)
    for name in requested:
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}; expected one of {STAGES}")
    ordered = [s for s in STAGES if s in requested]

    os.makedirs(cfg.output_dir, exist_ok=True)
    paths = Paths(cfg.output_dir)
    config_hash = cfg.config_hash()

    manifest = {
        "tool": "hybridforge",
        "config": cfg.merged_dict(),
        "config_hash": config_hash,
        "seeds": dataclasses.asdict(cfg.seeds),
        "artifacts": {a: getattr(paths, a) for arts in _STAGE_ARTIFACTS.values()
                      for a in arts},
        "stages": {},
    }
    _write_json(paths.manifest, manifest)

    statuses: dict[str, str] = {}
    for stage in ordered:
        if _stage_done(paths, stage, config_hash):
            statuses[stage] = "skipped"
        else:
            t0 = time.perf_counter()
            try:
                _STAGE_BODIES[stage](cfg, paths)
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(f"stage {stage!r} failed: {exc}") from exc
            seconds = time.perf_counter() - t0
            _mark_done(paths, stage, config_hash, seconds)
            statuses[stage] = f"ran ({seconds:.1f}s)"
        manifest["stages"][stage] = statuses[stage]
        _write_json(paths.manifest, manifest)
    return {"paths": paths, "stages": statuses}
