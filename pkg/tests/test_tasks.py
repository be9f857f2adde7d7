"""Synthetic task generation, the answer-position metric, and the evaluator."""

import numpy as np
import pytest

from hybridforge.errors import ConfigError, InputError
from hybridforge.rng import SeededRng
from hybridforge.tasks import (DEFAULT_VAL_SIZE, PAD, SEP, Evaluator, Example,
                               TaskSpec, evaluate, generate_task, load_splits,
                               make_evaluator, save_splits)

SMALL_MQAR = TaskSpec(kind="mqar", vocab_size=64, seq_len=40, n_pairs=8,
                      n_train=40, n_val=30, n_test=30, seed=0)


def all_token_hashes(splits):
    return [ex.tokens.tobytes() for split in splits.values() for ex in split]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def test_generation_is_deterministic_and_seed_sensitive():
    a = generate_task(SMALL_MQAR)
    b = generate_task(SMALL_MQAR)
    c = generate_task(TaskSpec(**{**SMALL_MQAR.__dict__, "seed": 1}))
    for name in ("train", "val", "test"):
        for ea, eb in zip(a[name], b[name]):
            np.testing.assert_array_equal(ea.tokens, eb.tokens)
            np.testing.assert_array_equal(ea.answer_positions, eb.answer_positions)
            np.testing.assert_array_equal(ea.answer_tokens, eb.answer_tokens)
    assert a["train"][0].tokens.tobytes() != c["train"][0].tokens.tobytes()


def test_splits_are_disjoint_and_sized():
    splits = generate_task(SMALL_MQAR)
    assert len(splits["train"]) == 40
    assert len(splits["val"]) == 30
    assert len(splits["test"]) == 30
    hashes = all_token_hashes(splits)
    assert len(hashes) == len(set(hashes))


def test_default_val_split_has_500_examples():
    assert TaskSpec().n_val == DEFAULT_VAL_SIZE == 500


@pytest.mark.parametrize("kind", ["mqar", "copy", "induction", "synth_lm"])
def test_all_kinds_generate_and_stay_disjoint(kind):
    spec = TaskSpec(kind=kind, vocab_size=32, seq_len=24, n_pairs=4,
                    n_train=25, n_val=10, n_test=10, seed=3)
    splits = generate_task(spec)
    hashes = all_token_hashes(splits)
    assert len(hashes) == len(set(hashes))
    for ex in splits["train"]:
        assert ex.tokens.shape == (spec.seq_len,)
        assert ex.tokens.dtype == np.int64
        assert np.all(ex.tokens >= 0) and np.all(ex.tokens < spec.vocab_size)
        assert len(ex.answer_positions) == len(ex.answer_tokens) > 0
        assert np.all(ex.answer_positions < spec.seq_len)
        # the scored token really sits at the recorded position
        np.testing.assert_array_equal(ex.tokens[ex.answer_positions], ex.answer_tokens)


def test_mqar_queries_resolve_to_earlier_bindings():
    splits = generate_task(SMALL_MQAR)
    n = SMALL_MQAR.n_pairs
    for ex in splits["val"]:
        toks = ex.tokens
        assert toks[2 * n] == SEP
        binding = {int(toks[2 * i]): int(toks[2 * i + 1]) for i in range(n)}
        assert len(binding) == n  # keys distinct
        for pos, ans in zip(ex.answer_positions, ex.answer_tokens):
            key = int(toks[pos - 1])
            assert binding[key] == int(ans)  # answer recoverable from the prefix
        queried = {int(toks[p - 1]) for p in ex.answer_positions}
        assert queried <= set(binding)
        assert np.all(toks[4 * n + 1:] == PAD)


def test_mqar_repeats_queries_across_examples():
    # sampled with replacement: answered values must not be a permutation of
    # the bindings in every example, or elimination would leak the last answers
    splits = generate_task(SMALL_MQAR)
    n = SMALL_MQAR.n_pairs
    repeats = sum(
        len({int(ex.tokens[p - 1]) for p in ex.answer_positions}) < n
        for ex in splits["train"])
    assert repeats > 0


def test_copy_mirrors_payload():
    spec = TaskSpec(kind="copy", vocab_size=16, seq_len=21,
                    n_train=20, n_val=5, n_test=5, seed=1)
    for ex in generate_task(spec)["train"]:
        m = (spec.seq_len - 1) // 2
        assert ex.tokens[m] == SEP
        np.testing.assert_array_equal(ex.tokens[:m], ex.tokens[m + 1 : 2 * m + 1])
        np.testing.assert_array_equal(ex.answer_tokens, ex.tokens[:m])
        np.testing.assert_array_equal(ex.answer_positions, m + 1 + np.arange(m))


def test_induction_scores_repeats_only():
    spec = TaskSpec(kind="induction", vocab_size=24, seq_len=20,
                    n_train=30, n_val=8, n_test=8, seed=2)
    for ex in generate_task(spec)["train"]:
        b = int(ex.answer_tokens[0])
        assert np.all(ex.answer_tokens == b)
        triggers = {int(ex.tokens[p - 1]) for p in ex.answer_positions}
        assert len(triggers) == 1
        a = triggers.pop()
        occurrences = np.where(ex.tokens == a)[0]
        assert len(occurrences) == 3  # trigger appears exactly thrice
        assert len(ex.answer_positions) == 2  # first occurrence is unscored
        assert occurrences[0] + 1 not in ex.answer_positions


def test_synth_lm_follows_its_transition_table():
    spec = TaskSpec(kind="synth_lm", vocab_size=16, seq_len=30,
                    n_train=100, n_val=10, n_test=10, seed=4)
    splits = generate_task(spec)
    # rebuild the successor table by observing transitions
    successors: dict[int, set[int]] = {}
    primary = 0
    total = 0
    counts: dict[tuple[int, int], int] = {}
    for ex in splits["train"]:
        np.testing.assert_array_equal(ex.answer_positions, np.arange(1, spec.seq_len))
        np.testing.assert_array_equal(ex.answer_tokens, ex.tokens[1:])
        for t in range(1, spec.seq_len):
            prev, nxt = int(ex.tokens[t - 1]), int(ex.tokens[t])
            successors.setdefault(prev, set()).add(nxt)
            counts[(prev, nxt)] = counts.get((prev, nxt), 0) + 1
            total += 1
    assert all(len(s) <= 2 for s in successors.values())
    for prev, s in successors.items():
        if len(s) == 2:
            primary += max(counts[(prev, nxt)] for nxt in s)
        else:
            primary += counts[(prev, next(iter(s)))]
    assert 0.70 < primary / total < 0.85  # branch odds near the fixed 0.75


def test_validation_errors():
    with pytest.raises(ConfigError, match="unknown task kind"):
        TaskSpec(kind="parity").validate()
    with pytest.raises(ConfigError, match="too small"):
        TaskSpec(kind="mqar", vocab_size=10, n_pairs=8).validate()
    with pytest.raises(ConfigError, match="too short"):
        TaskSpec(kind="mqar", seq_len=20, n_pairs=8).validate()
    with pytest.raises(ConfigError, match="vocab >= 4"):
        TaskSpec(kind="copy", vocab_size=3).validate()
    with pytest.raises(ConfigError, match="n_val"):
        TaskSpec(n_val=0).validate()


def test_exhausted_task_space_raises():
    # one-token payload over two symbols: only two distinct sequences exist
    spec = TaskSpec(kind="copy", vocab_size=4, seq_len=3,
                    n_train=5, n_val=1, n_test=1, seed=0)
    with pytest.raises(ConfigError, match="too small"):
        generate_task(spec)


def test_fingerprint_tracks_spec():
    f1 = SMALL_MQAR.fingerprint()
    f2 = TaskSpec(**{**SMALL_MQAR.__dict__, "seed": 9}).fingerprint()
    assert f1 == SMALL_MQAR.fingerprint()
    assert f1 != f2
    assert len(f1) == 16 and all(c in "0123456789abcdef" for c in f1)


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def test_evaluate_reads_logits_one_step_before_the_answer():
    ex_right = Example(np.array([5, 6, 7, 8]), np.array([2]), np.array([7]))
    ex_wrong = Example(np.array([5, 6, 9, 8]), np.array([2]), np.array([9]))

    def logits_fn(batch):
        out = np.zeros((len(batch), 4, 16))
        out[:, 1, 7] = 1.0  # position 1 predicts token 7 for every row
        return out

    acc = evaluate(None, [ex_right, ex_wrong], logits_fn=logits_fn)
    assert acc == 0.5


def test_evaluate_counts_tokens_not_examples():
    a = Example(np.array([2, 3, 4, 5]), np.array([1, 2, 3]), np.array([3, 4, 5]))
    b = Example(np.array([2, 9, 9, 9]), np.array([1]), np.array([9]))

    def logits_fn(batch):
        out = np.zeros((len(batch), 4, 16))
        out[:, :, 9] = 1.0  # always predict 9
        return out

    # b's single answer hits; a's three miss: 1 of 4 tokens
    assert evaluate(None, [a, b], logits_fn=logits_fn) == 0.25


def test_evaluate_batch_size_invariance():
    splits = generate_task(SMALL_MQAR)

    def logits_fn(batch):
        out = np.zeros((len(batch), batch.shape[1], 64))
        rows = np.arange(len(batch))[:, None]
        cols = np.arange(batch.shape[1])[None, :]
        out[rows, cols, (batch * 31 + 7) % 64] = 1.0  # deterministic per token
        return out

    a = evaluate(None, splits["val"], batch_size=64, logits_fn=logits_fn)
    b = evaluate(None, splits["val"], batch_size=7, logits_fn=logits_fn)
    assert a == b


def test_random_logits_score_near_chance():
    spec = TaskSpec(kind="mqar", n_train=1, n_val=500, n_test=1, seed=5)
    splits = generate_task(spec)
    rng = SeededRng(6)

    def logits_fn(batch):
        return np.asarray(rng.normal((len(batch), batch.shape[1], spec.vocab_size)))

    acc = evaluate(None, splits["val"], logits_fn=logits_fn)
    p = 1.0 / spec.vocab_size
    n = 500 * spec.n_pairs
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(acc - p) < 3 * sigma


def test_evaluate_input_checks():
    with pytest.raises(InputError, match="empty"):
        evaluate(None, [])
    with pytest.raises(ConfigError, match="metric"):
        evaluate(None, [Example(np.array([1, 2]), np.array([1]), np.array([2]))],
                 metric="f1")


# ---------------------------------------------------------------------------
# evaluator memoization
# ---------------------------------------------------------------------------

def test_evaluator_memoizes_by_spec_key():
    calls = []

    def fn(spec):
        calls.append(tuple(spec))
        return float(len(calls))

    ev = Evaluator(fn)
    assert ev.score_spec(("full", "gla")) == 1.0
    assert ev.score_spec(("full", "gla")) == 1.0  # memo hit
    assert ev.score_spec(("gla", "full")) == 2.0
    assert ev.misses == 2 and len(calls) == 2


def test_evaluator_accepts_objects_with_kinds():
    class Spec:
        kinds = ("full", "ungated")

    ev = Evaluator(lambda s: 0.5)
    assert ev.score_spec(Spec()) == 0.5
    assert ev.score_spec(("full", "ungated")) == 0.5
    assert ev.misses == 1


def test_evaluator_disk_cache_resumes(tmp_path):
    path = tmp_path / "cache.json"
    ev1 = Evaluator(lambda s: 0.75, fingerprint="fp1", cache_path=path)
    ev1.score_spec(("full",))
    ev1.score_spec(("gla",))
    assert ev1.misses == 2 and path.exists()

    ev2 = Evaluator(lambda s: 0.0, fingerprint="fp1", cache_path=path)
    assert ev2.score_spec(("full",)) == 0.75  # served from disk
    assert ev2.misses == 0

    ev3 = Evaluator(lambda s: 0.25, fingerprint="fp2", cache_path=path)
    assert ev3.score_spec(("full",)) == 0.25  # other fingerprint, fresh
    assert ev3.misses == 1


def test_make_evaluator_assembles_per_spec():
    from hybridforge.model import ModelConfig, model_init

    model = model_init(ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32,
                                   vocab_size=64, max_seq=64), seed=7)
    split = generate_task(SMALL_MQAR)["val"][:10]
    built = []

    def assemble(spec):
        built.append(tuple(spec))
        return model

    ev = make_evaluator(split, assemble)
    score = ev.score_spec(("full",))
    assert built == [("full",)]
    assert score == evaluate(model, split)
    ev.score_spec(("full",))
    assert built == [("full",)]  # memo hit skips assembly


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_splits_round_trip(tmp_path):
    splits = generate_task(SMALL_MQAR)
    path = tmp_path / "task.hybf"
    save_splits(SMALL_MQAR, splits, path)
    spec, loaded = load_splits(path)
    assert spec == SMALL_MQAR
    for name in ("train", "val", "test"):
        assert len(loaded[name]) == len(splits[name])
        for a, b in zip(splits[name], loaded[name]):
            np.testing.assert_array_equal(a.tokens, b.tokens)
            np.testing.assert_array_equal(a.answer_positions, b.answer_positions)
            np.testing.assert_array_equal(a.answer_tokens, b.answer_tokens)


def test_load_splits_rejects_other_containers(tmp_path):
    from hybridforge.checkpoint import write_container
    path = tmp_path / "x.hybf"
    write_container(path, {}, {"kind": "model"})
    with pytest.raises(InputError, match="not task splits"):
        load_splits(path)
