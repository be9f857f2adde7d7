"""Synthetic tasks with disjoint splits and the answer-position accuracy metric.

Four kinds: `mqar` (multi-query associative recall, the flagship — retrieval of
values bound to earlier keys), `copy` (repeat a payload after a separator),
`induction` (complete repeated bigram patterns), and `synth_lm` (sequences from
a seeded 2-successor Markov grammar, scored at every next-token position).

Token 0 is padding, token 1 the separator. Splits are generated from separate
seed streams and deduplicated across splits by token-sequence hash.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .errors import ConfigError, InputError
from .model import Model, forward_full
from .rng import SeededRng
from .tensor import no_grad

PAD, SEP = 0, 1
TASK_KINDS = ("mqar", "copy", "induction", "synth_lm")
DEFAULT_VAL_SIZE = 500


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "mqar"
    vocab_size: int = 64
    seq_len: int = 40
    n_pairs: int = 8
    n_train: int = 20000  # small train sets memorize before retrieval circuits form
    n_val: int = DEFAULT_VAL_SIZE
    n_test: int = 500
    seed: int = 0

    def validate(self) -> "TaskSpec":
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        for name in ("vocab_size", "seq_len", "n_pairs", "n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kind == "mqar":
            space = (self.vocab_size - 2) // 2
            if space < self.n_pairs:
                raise ConfigError(
                    f"vocab {self.vocab_size} too small for {self.n_pairs} distinct keys")
            if self.seq_len < 4 * self.n_pairs + 1:
                raise ConfigError(
                    f"seq_len {self.seq_len} too short for {self.n_pairs} pairs plus queries")
        elif self.kind == "copy":
            if self.vocab_size < 4:
                raise ConfigError("copy task needs vocab >= 4")
            if self.seq_len < 3:
                raise ConfigError("copy task needs seq_len >= 3")
        elif self.kind == "induction":
            if self.vocab_size < 6:
                raise ConfigError("induction task needs vocab >= 6")
            if self.seq_len < 12:
                raise ConfigError("induction task needs seq_len >= 12")
        else:
            if self.vocab_size < 6:
                raise ConfigError("synth_lm needs vocab >= 6")
        return self

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Example:
    tokens: np.ndarray            # [seq_len] int64, padded
    answer_positions: np.ndarray  # positions of the answer tokens
    answer_tokens: np.ndarray


def _pad(tokens: list[int], seq_len: int) -> np.ndarray:
    out = np.full(seq_len, PAD, dtype=np.int64)
    out[: len(tokens)] = tokens
    return out


def _gen_mqar(spec: TaskSpec, rng: SeededRng) -> Example:
    space = (spec.vocab_size - 2) // 2
    key0, val0 = 2, 2 + space
    keys = rng.choice(space, size=spec.n_pairs, replace=False) + key0
    vals = rng.integers(0, space, spec.n_pairs) + val0
    # Queries drawn with replacement: if each pair were queried exactly once,
    # process-of-elimination over already-answered values would solve late
    # queries without any recall.
    order = rng.integers(0, spec.n_pairs, spec.n_pairs)
    toks: list[int] = []
    for k, v in zip(keys, vals):
        toks.extend((int(k), int(v)))
    toks.append(SEP)
    q_base = len(toks)
    for i in order:
        toks.extend((int(keys[i]), int(vals[i])))
    pos = q_base + 1 + 2 * np.arange(spec.n_pairs)
    return Example(_pad(toks, spec.seq_len), pos, vals[order].astype(np.int64))


def _gen_copy(spec: TaskSpec, rng: SeededRng) -> Example:
    m = (spec.seq_len - 1) // 2
    payload = rng.integers(2, spec.vocab_size, m)
    toks = list(payload) + [SEP] + list(payload)
    pos = m + 1 + np.arange(m)
    return Example(_pad(toks, spec.seq_len), pos, payload.astype(np.int64))


def _gen_induction(spec: TaskSpec, rng: SeededRng) -> Example:
    n_occ = 3
    a, b = (rng.choice(spec.vocab_size - 2, size=2, replace=False) + 2).tolist()
    toks = rng.integers(2, spec.vocab_size, spec.seq_len)
    toks[toks == a] = 2 if a != 2 else 3  # filler must not echo the trigger
    slots = np.sort(rng.choice(spec.seq_len // 2 - 1, size=n_occ, replace=False)) * 2
    for s in slots:
        toks[s], toks[s + 1] = a, b
    pos = slots[1:] + 1
    return Example(toks.astype(np.int64), pos, np.full(n_occ - 1, b, dtype=np.int64))


def _synth_lm_table(spec: TaskSpec, rng: SeededRng) -> np.ndarray:
    # two successor candidates per token, chosen with fixed 0.75/0.25 odds
    return np.stack([
        rng.choice(spec.vocab_size - 2, size=2, replace=False) + 2
        for _ in range(spec.vocab_size)
    ])


def _gen_synth_lm(spec: TaskSpec, rng: SeededRng, table: np.ndarray) -> Example:
    toks = np.empty(spec.seq_len, dtype=np.int64)
    toks[0] = rng.integers(2, spec.vocab_size)
    branch = rng.uniform(spec.seq_len - 1) < 0.75
    for t in range(1, spec.seq_len):
        toks[t] = table[toks[t - 1], 0 if branch[t - 1] else 1]
    pos = np.arange(1, spec.seq_len)
    return Example(toks, pos, toks[1:].copy())


def generate_task(spec: TaskSpec) -> dict[str, list[Example]]:
    """Deterministic train/val/test splits, disjoint by token-sequence hash."""
    spec.validate()
    root = SeededRng(spec.seed)
    table = _synth_lm_table(spec, root.split(0)) if spec.kind == "synth_lm" else None

    def gen(rng: SeededRng) -> Example:
        if spec.kind == "mqar":
            return _gen_mqar(spec, rng)
        if spec.kind == "copy":
            return _gen_copy(spec, rng)
        if spec.kind == "induction":
            return _gen_induction(spec, rng)
        return _gen_synth_lm(spec, rng, table)

    seen: set[bytes] = set()
    splits: dict[str, list[Example]] = {}
    for stream, (name, count) in enumerate(
            [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)], start=1):
        rng = root.split(stream)
        out: list[Example] = []
        attempts = 0
        while len(out) < count:
            attempts += 1
            if attempts > 50 * count + 1000:
                raise ConfigError(
                    f"could not draw {count} distinct {spec.kind} examples for split {name!r}; "
                    "the task space is too small for the requested split sizes")
            ex = gen(rng)
            h = ex.tokens.tobytes()
            if h in seen:
                continue
            seen.add(h)
            out.append(ex)
        splits[name] = out
    return splits


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def evaluate(model: Model, split, metric: str = "accuracy", batch_size: int = 64,
             logits_fn=None) -> float:
    """Answer-position accuracy: greedy argmax at each answer position.

    Forward-only; `logits_fn(tokens) -> [B, T, V]` substitutes the model
    forward for calibration tests.
    """
    if metric != "accuracy":
        raise ConfigError(f"unknown metric {metric!r}; only 'accuracy' is defined")
    examples = list(split)
    if not examples:
        raise InputError("cannot evaluate an empty split")
    toks = np.stack([ex.tokens for ex in examples])
    correct = 0
    total = 0
    with no_grad():
        for lo in range(0, len(examples), batch_size):
            hi = min(lo + batch_size, len(examples))
            batch = toks[lo:hi]
            logits = logits_fn(batch) if logits_fn else forward_full(model, batch).data
            pred = np.argmax(logits, axis=-1)
            for j, ex in enumerate(examples[lo:hi]):
                got = pred[j, np.asarray(ex.answer_positions) - 1]
                correct += int((got == np.asarray(ex.answer_tokens)).sum())
                total += len(ex.answer_tokens)
    return correct / total


def _spec_key(spec) -> str:
    kinds = spec.kinds if hasattr(spec, "kinds") else tuple(spec)
    return ",".join(kinds)


class Evaluator:
    """Memoizing score oracle over hybrid specs.

    `misses` counts real evaluations only; repeated specs hit the memo table.
    With `cache_path`, the memo persists to disk keyed by (fingerprint, spec)
    so interrupted searches resume without re-running forwards.
    """

    def __init__(self, score_fn, fingerprint: str = "", cache_path=None):
        self._fn = score_fn
        self.fingerprint = fingerprint
        self.cache_path = cache_path
        self.memo: dict[str, float] = {}
        self.misses = 0
        if cache_path is not None and os.path.exists(cache_path):
            with open(cache_path) as fh:
                stored = json.load(fh)
            prefix = f"{self.fingerprint}|"
            self.memo = {k[len(prefix):]: v for k, v in stored.items() if k.startswith(prefix)}

    def score_spec(self, spec) -> float:
        key = _spec_key(spec)
        if key in self.memo:
            return self.memo[key]
        self.misses += 1
        score = float(self._fn(spec))
        self.memo[key] = score
        if self.cache_path is not None:
            self._persist()
        return score

    def _persist(self) -> None:
        stored = {}
        if os.path.exists(self.cache_path):
            with open(self.cache_path) as fh:
                stored = json.load(fh)
        stored.update({f"{self.fingerprint}|{k}": v for k, v in self.memo.items()})
        tmp = f"{self.cache_path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(stored, fh, sort_keys=True)
        os.replace(tmp, self.cache_path)


def make_evaluator(split, assemble, metric: str = "accuracy", fingerprint: str = "",
                   cache_path=None, batch_size: int = 64) -> Evaluator:
    """Wrap `evaluate` over models built per spec by `assemble(spec)`."""
    def fn(spec) -> float:
        return evaluate(assemble(spec), split, metric=metric, batch_size=batch_size)

    return Evaluator(fn, fingerprint=fingerprint, cache_path=cache_path)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_splits(spec: TaskSpec, splits: dict[str, list[Example]], path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, examples in splits.items():
        tensors[f"{name}.tokens"] = np.stack([ex.tokens for ex in examples])
        flat_pos = np.concatenate([ex.answer_positions for ex in examples])
        counts = np.array([len(ex.answer_positions) for ex in examples], dtype=np.int64)
        tensors[f"{name}.answer_positions"] = flat_pos.astype(np.int64)
        tensors[f"{name}.answer_tokens"] = np.concatenate(
            [ex.answer_tokens for ex in examples]).astype(np.int64)
        tensors[f"{name}.answer_counts"] = counts
    checkpoint.write_container(path, tensors, {"kind": "task_splits", "spec": asdict(spec)})


def load_splits(path) -> tuple[TaskSpec, dict[str, list[Example]]]:
    tensors, meta = checkpoint.read_container(path)
    if meta.get("kind") != "task_splits":
        raise InputError(f"container holds {meta.get('kind')!r}, not task splits")
    spec = TaskSpec(**meta["spec"])
    splits: dict[str, list[Example]] = {}
    for name in ("train", "val", "test"):
        toks = tensors[f"{name}.tokens"]
        counts = tensors[f"{name}.answer_counts"]
        pos = tensors[f"{name}.answer_positions"]
        ans = tensors[f"{name}.answer_tokens"]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        splits[name] = [
            Example(toks[i], pos[offsets[i]:offsets[i + 1]], ans[offsets[i]:offsets[i + 1]])
            for i in range(len(counts))
        ]
    return spec, splits
