"""Hybrid layout search: greedy threshold replacement and baseline strategies.

The greedy loop starts from the all-Full model and, each iteration, trials
every remaining full-attention layer as a linear swap, keeping the single swap
with the best validation score. It accepts while the best trial stays at or
above the threshold `p_min`, and separately tracks the best configuration seen
anywhere along the way, so the returned result carries both the deepest
accepted layout and the global argmax over everything evaluated.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

from .errors import AssemblyError, ConfigError, StageError
from .linear_attn import LinearBlockWeights
from .model import ATTENTION_KINDS, FULL, Layer, Model
from .rng import SeededRng

LINEAR_MARK = "L"
FULL_MARK = "F"


@dataclass(frozen=True)
class HybridSpec:
    """Per-layer attention kinds, e.g. ('full', 'gla', 'full', ...)."""

    kinds: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for i, k in enumerate(self.kinds):
            if k not in ATTENTION_KINDS:
                raise ConfigError(f"layer {i}: unknown attention kind {k!r}")

    @staticmethod
    def all_full(n_layers: int) -> "HybridSpec":
        return HybridSpec((FULL,) * n_layers)

    @staticmethod
    def from_layers(n_layers: int, linear_layers, variant: str) -> "HybridSpec":
        kinds = [FULL] * n_layers
        for i in linear_layers:
            kinds[i] = variant
        return HybridSpec(tuple(kinds))

    def with_linear(self, layer: int, variant: str) -> "HybridSpec":
        kinds = list(self.kinds)
        kinds[layer] = variant
        return HybridSpec(tuple(kinds))

    def full_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == FULL]

    def linear_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k != FULL]

    @property
    def n_linear(self) -> int:
        return len(self.linear_layers())

    def to_string(self) -> str:
        return "".join(FULL_MARK if k == FULL else LINEAR_MARK for k in self.kinds)

    def key(self) -> str:
        return ",".join(self.kinds)


def assemble_hybrid(full_model: Model,
                    linear_blocks: dict[int, LinearBlockWeights],
                    spec: HybridSpec) -> Model:
    """Build a hybrid from teacher weights plus distilled attention blocks.

    Non-attention weights (embeddings, norms, MLPs, head) always come from the
    teacher. An all-Full spec therefore reproduces the teacher exactly.
    """
    if len(spec.kinds) != full_model.config.n_layers:
        raise AssemblyError(
            f"spec has {len(spec.kinds)} layers, model has {full_model.config.n_layers}")
    hybrid = full_model.clone()
    for i, kind in enumerate(spec.kinds):
        if kind == FULL:
            continue
        block = linear_blocks.get(i)
        if block is None:
            raise AssemblyError(f"no distilled weights for layer {i}")
        if block.variant != kind:
            raise AssemblyError(
                f"layer {i}: spec wants {kind!r} but distilled block is {block.variant!r}")
        if block.d_model != full_model.config.d_model or \
                block.n_heads != full_model.config.n_heads:
            raise AssemblyError(
                f"layer {i}: block geometry ({block.n_heads} heads, width {block.d_model}) "
                f"does not match the model")
        attn = block.clone()
        for p in attn.params():
            tail = p.name.rsplit(".", 1)[-1]
            p.name = f"layers.{i}.attn.{tail}"
        hybrid.layers[i] = Layer(
            attn,
            hybrid.layers[i].mlp,
            hybrid.layers[i].norm_attn,
            hybrid.layers[i].norm_mlp,
        )
    return hybrid


# ---------------------------------------------------------------------------
# greedy search
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    baseline: float                 # score of the all-Full starting point
    best_spec: HybridSpec           # argmax over every configuration evaluated
    p_best: float
    opt_spec: HybridSpec            # deepest accepted configuration
    p_opt: float
    trace: list[dict] = field(default_factory=list)
    evaluations: int = 0
    warning: str | None = None

    @property
    def n_replaced(self) -> int:
        return self.opt_spec.n_linear


class SearchAborted(StageError):
    """Evaluator or assembly failure mid-search; carries the partial trace."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


def _variant_lookup(variant_of):
    if isinstance(variant_of, str):
        return lambda layer: variant_of
    if isinstance(variant_of, dict):
        def from_dict(layer: int) -> str:
            block = variant_of.get(layer)
            if block is None:
                raise AssemblyError(f"no distilled weights for layer {layer}")
            return block.variant if isinstance(block, LinearBlockWeights) else block
        return from_dict
    return variant_of


def greedy_search(n_layers: int, variant_of, evaluator, p_min: float,
                  max_accepts: int | None = None) -> SearchResult:
    """Core greedy loop over spec space; `variant_of(layer)` names each swap.

    Ties break toward the lowest layer index (strict improvement required to
    displace the incumbent candidate). The best-seen tracker updates on >= so
    later equal scores move it to the more-replaced configuration.
    """
    variant_at = _variant_lookup(variant_of)
    trace: list[dict] = []
    misses_before = evaluator.misses

    def score(spec: HybridSpec) -> float:
        try:
            return evaluator.score_spec(spec)
        except Exception as exc:
            raise SearchAborted(
                f"evaluation failed for spec {spec.to_string()}: {exc}", trace) from exc

    base = HybridSpec.all_full(n_layers)
    p_base = score(base)
    current, best_spec, p_best = base, base, p_base
    opt_spec, p_opt = base, p_base
    accepts = 0
    while True:
        remaining = current.full_layers()
        if not remaining:
            break
        if max_accepts is not None and accepts >= max_accepts:
            break
        p_star = -math.inf
        chosen = -1
        chosen_spec = None
        candidates: list[list] = []
        for layer in remaining:
            trial = current.with_linear(layer, variant_at(layer))
            s = score(trial)
            candidates.append([layer, s])
            if s > p_star:
                p_star, chosen, chosen_spec = s, layer, trial
        if p_star >= p_best:
            best_spec, p_best = chosen_spec, p_star
        accepted = p_star >= p_min
        trace.append({
            "iter": len(trace),
            "candidates": candidates,
            "chosen": chosen,
            "p_star": p_star,
            "accepted": accepted,
        })
        if not accepted:
            break
        current = chosen_spec
        opt_spec, p_opt = current, p_star
        accepts += 1

    warning = None
    if p_base < p_min and accepts == 0:
        warning = (f"baseline score {p_base:.6f} is already below the threshold "
                   f"{p_min:.6f} and no single swap reached it")
    return SearchResult(
        baseline=p_base,
        best_spec=best_spec,
        p_best=p_best,
        opt_spec=opt_spec,
        p_opt=p_opt,
        trace=trace,
        evaluations=evaluator.misses - misses_before,
        warning=warning,
    )


def greedy_replace(full_model: Model, linear_blocks: dict[int, LinearBlockWeights],
                   evaluator, p_min: float) -> SearchResult:
    """Greedy threshold replacement over the model's layers."""
    return greedy_search(full_model.config.n_layers, linear_blocks, evaluator, p_min)


def greedy_fixed_budget(full_model: Model, linear_blocks: dict[int, LinearBlockWeights],
                        evaluator, k: int) -> SearchResult:
    """Greedy without a threshold, halting after exactly k accepted swaps."""
    n_layers = full_model.config.n_layers
    if not 0 <= k <= n_layers:
        raise ConfigError(f"budget {k} outside [0, {n_layers}]")
    return greedy_search(n_layers, linear_blocks, evaluator, -math.inf, max_accepts=k)


# ---------------------------------------------------------------------------
# baseline strategies
# ---------------------------------------------------------------------------

def strategy_local_importance(full_model: Model,
                              linear_blocks: dict[int, LinearBlockWeights],
                              evaluator) -> tuple[list[int], dict[int, HybridSpec]]:
    """Rank layers by single-swap score in the base model (higher = safer to
    replace, ties toward the shallower layer), then for each budget k build
    the spec replacing the top-k layers of that one fixed ranking. Costs
    exactly L evaluations beyond the memo."""
    n_layers = full_model.config.n_layers
    variant_at = _variant_lookup(linear_blocks)
    base = HybridSpec.all_full(n_layers)
    scores = [(evaluator.score_spec(base.with_linear(l, variant_at(l))), l)
              for l in range(n_layers)]
    ranking = [l for _, l in sorted(scores, key=lambda sl: (-sl[0], sl[1]))]
    specs: dict[int, HybridSpec] = {}
    for k in range(1, n_layers + 1):
        spec = base
        for l in ranking[:k]:
            spec = spec.with_linear(l, variant_at(l))
        specs[k] = spec
    return ranking, specs


def strategy_uniform(k: int, n_layers: int, variant: str = "gla") -> HybridSpec:
    """Replace k layers spread evenly across depth: index round((i+0.5)*L/k)
    for i in 0..k-1, rounding half down to stay in range, deduplicated."""
    if not 1 <= k <= n_layers:
        raise ConfigError(f"budget {k} outside [1, {n_layers}]")
    layers = sorted({-(-((2 * i + 1) * n_layers - k) // (2 * k)) for i in range(k)})
    return HybridSpec.from_layers(n_layers, layers, variant)


def strategy_random(k: int, n_layers: int, seed: int, variant: str = "gla") -> HybridSpec:
    """Replace k uniformly random distinct layers, deterministic per seed."""
    if not 1 <= k <= n_layers:
        raise ConfigError(f"budget {k} outside [1, {n_layers}]")
    layers = SeededRng(seed).choice(n_layers, size=k, replace=False)
    return HybridSpec.from_layers(n_layers, [int(l) for l in layers], variant)


EXHAUSTIVE_MAX_LAYERS = 12


def exhaustive_search(evaluator, n_layers: int, k: int | None = None,
                      variant_of="gla") -> tuple[HybridSpec, float]:
    """Score every subset (of size k, or all sizes) and return the argmax.

    Ties break toward the lexicographically smallest layout string, which a
    sorted enumeration plus strict improvement guarantees.
    """
    if n_layers > EXHAUSTIVE_MAX_LAYERS:
        raise ConfigError(
            f"exhaustive search capped at {EXHAUSTIVE_MAX_LAYERS} layers, got {n_layers}")
    variant_at = _variant_lookup(variant_of)
    base = HybridSpec.all_full(n_layers)
    specs = []
    sizes = range(n_layers + 1) if k is None else [k]
    for size in sizes:
        for subset in itertools.combinations(range(n_layers), size):
            spec = base
            for l in subset:
                spec = spec.with_linear(l, variant_at(l))
            specs.append(spec)
    specs.sort(key=lambda s: s.to_string())
    best_spec, best_score = None, -math.inf
    for spec in specs:
        s = evaluator.score_spec(spec)
        if s > best_score:
            best_spec, best_score = spec, s
    return best_spec, best_score


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_trace_jsonl(trace: list[dict], path) -> None:
    with open(path, "w") as fh:
        for row in trace:
            fh.write(json.dumps(row) + "\n")


def read_trace_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def result_to_dict(result: SearchResult) -> dict:
    return {
        "baseline": result.baseline,
        "best_spec": result.best_spec.to_string(),
        "best_kinds": list(result.best_spec.kinds),
        "p_best": result.p_best,
        "opt_spec": result.opt_spec.to_string(),
        "opt_kinds": list(result.opt_spec.kinds),
        "p_opt": result.p_opt,
        "n_replaced": result.n_replaced,
        "evaluations": result.evaluations,
        "warning": result.warning,
    }


def result_from_dict(payload: dict) -> SearchResult:
    return SearchResult(
        baseline=payload["baseline"],
        best_spec=HybridSpec(tuple(payload["best_kinds"])),
        p_best=payload["p_best"],
        opt_spec=HybridSpec(tuple(payload["opt_kinds"])),
        p_opt=payload["p_opt"],
        evaluations=payload.get("evaluations", 0),
        warning=payload.get("warning"),
    )
