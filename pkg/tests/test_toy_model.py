"""Toy transformer: forward semantics, gradients, training, checkpoints.

Oracles: an independent plain-causal forward pass written with explicit
loops (for the p=1 equivalence), central finite differences on a miniature
instance, and binomial chance bounds for untrained evaluation.
"""

import math

import numpy as np
import pytest

from ppa.mask_core import MaskConfig
from ppa.toy_model import (
    DivergenceError,
    ModelParams,
    RecallTask,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    sample_batch,
    save_checkpoint,
    train,
)

LOCAL_TASK = RecallTask(length=64, distance=4, pairs=1, value_repeats=2, n_filler=32)


def plain_causal_forward(params: ModelParams, tokens) -> np.ndarray:
    """Independent full-causal forward pass, explicit loops, no masks module."""
    L = len(tokens)
    H = params.n_heads
    dh = params.d_model // H
    scale = 1.0 / math.sqrt(dh)
    x = params.tok_emb[np.asarray(tokens)] + params.pos_emb[:L]
    for layer in params.layers:
        q_all, k_all, v_all = x @ layer["Wq"], x @ layer["Wk"], x @ layer["Wv"]
        attn = np.zeros_like(x)
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            qh, kh, vh = q_all[:, sl], k_all[:, sl], v_all[:, sl]
            for t in range(L):
                scores = np.array([scale * qh[t] @ kh[u] for u in range(t + 1)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                attn[t, sl] = sum(w[u] * vh[u] for u in range(t + 1))
        x = x + attn @ layer["Wo"]
        x = x + np.maximum(x @ layer["W1"] + layer["b1"], 0.0) @ layer["W2"] + layer["b2"]
    return x @ params.unembed


def miniature(seed=0, vocab=10):
    params = init_params(vocab=vocab, d_model=8, n_layers=2, n_heads=2, max_len=6, seed=seed)
    # nonzero unembedding so its gradient path is exercised
    rng = np.random.default_rng(seed + 100)
    params.unembed = rng.standard_normal(params.unembed.shape) * 0.3
    return params


# ---------------------------------------------------------------------------
# forward


def test_single_token_logit_depends_only_on_token_zero():
    params = miniature()
    a = forward(params, [3], MaskConfig(0.5, 2))
    b = forward(params, [3], MaskConfig(1.0, 64))
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.shape == (1, params.vocab)


def test_forward_matches_plain_causal_oracle_at_p1():
    params = miniature(seed=4)
    tokens = np.random.default_rng(2).integers(0, 10, 6)
    got = forward(params, tokens, MaskConfig(1.0, 1))
    want = plain_causal_forward(params, tokens)
    assert np.abs(got - want).max() <= 1e-10


def test_forward_causality_future_perturbation():
    params = miniature(seed=9)
    rng = np.random.default_rng(3)
    tokens = rng.integers(0, 10, 6)
    for p in (0.0, 0.5, 1.0):
        cfg = MaskConfig(p, 2)
        base = forward(params, tokens, cfg)
        mutated = tokens.copy()
        mutated[-1] = (mutated[-1] + 1) % 10
        after = forward(params, mutated, cfg)
        np.testing.assert_array_equal(base[:-1], after[:-1])
        assert not np.array_equal(base[-1], after[-1])


def test_forward_input_validation():
    params = miniature()
    with pytest.raises(ValueError):
        forward(params, [11], MaskConfig(0.5, 2))  # out of vocab
    with pytest.raises(ValueError):
        forward(params, [1] * 7, MaskConfig(0.5, 2))  # beyond max_len


def test_init_determinism_and_shapes():
    a = init_params(16, 8, 2, 2, 10, seed=5)
    b = init_params(16, 8, 2, 2, 10, seed=5)
    for (na, ta), (nb, tb) in zip(a.tensors(), b.tensors()):
        assert na == nb
        np.testing.assert_array_equal(ta, tb)
    with pytest.raises(ValueError):
        init_params(16, 9, 2, 2, 10, seed=5)  # d_model % n_heads != 0


# ---------------------------------------------------------------------------
# loss and gradients


def test_initial_loss_is_log_vocab():
    params = init_params(vocab=32, d_model=8, n_layers=2, n_heads=2, max_len=6, seed=1)
    tokens = np.random.default_rng(0).integers(0, 32, (4, 6))
    loss, _ = loss_and_grads(params, tokens, np.array([5, 4, 3, 2]), np.array([1, 2, 3, 4]), MaskConfig(0.5, 2))
    assert abs(loss - math.log(32)) <= 1e-6


@pytest.mark.parametrize("p", [0.0, 0.5, 1.0])
def test_gradients_match_finite_differences(p):
    params = miniature(seed=7)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, 10, (3, 6))
    tpos = np.array([5, 3, 4])
    ttok = np.array([1, 7, 2])
    cfg = MaskConfig(p, 2)
    loss, grads = loss_and_grads(params, tokens, tpos, ttok, cfg)
    h = 1e-5
    for name, t in params.tensors():
        idxs = {tuple(rng.integers(0, s) for s in t.shape) for _ in range(5)}
        for ix in idxs:
            orig = t[ix]
            t[ix] = orig + h
            lp, _ = loss_and_grads(params, tokens, tpos, ttok, cfg)
            t[ix] = orig - h
            lm, _ = loss_and_grads(params, tokens, tpos, ttok, cfg)
            t[ix] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(grads[name][ix] - fd) <= 1e-4 * max(abs(fd), 1e-2), (name, ix)


def test_multi_target_loss_reduces_over_all_targets():
    params = miniature(seed=3)
    tokens = np.random.default_rng(4).integers(0, 10, (2, 6))
    tpos = np.array([[5, 2], [4, 1]])
    ttok = np.array([[1, 2], [3, 4]])
    loss_multi, _ = loss_and_grads(params, tokens, tpos, ttok, MaskConfig(0.5, 2))
    singles = []
    for col in range(2):
        l, _ = loss_and_grads(params, tokens, tpos[:, col], ttok[:, col], MaskConfig(0.5, 2))
        singles.append(l)
    assert abs(loss_multi - np.mean(singles)) <= 1e-12


def test_loss_input_validation():
    params = miniature()
    tokens = np.zeros((2, 6), dtype=np.int64)
    with pytest.raises(ValueError):
        loss_and_grads(params, tokens[:0], np.array([]), np.array([]), MaskConfig(0.5, 2))
    with pytest.raises(ValueError):
        loss_and_grads(params, tokens, np.array([6, 0]), np.array([0, 0]), MaskConfig(0.5, 2))
    with pytest.raises(ValueError):
        loss_and_grads(params, tokens, np.array([0, 0]), np.array([10, 0]), MaskConfig(0.5, 2))


# ---------------------------------------------------------------------------
# recall task construction


def test_task_layout_key_first():
    task = RecallTask(length=32, distance=8, pairs=2, value_repeats=2, n_filler=8)
    tokens, tpos, ttok = sample_batch(task, np.random.default_rng(0), 4)
    assert tokens.shape == (4, 32)
    assert (tpos[:, 0] == 31).all()
    start = task.block_start
    for b in range(4):
        for i in range(task.pairs):
            pos = start + i * 3
            assert tokens[b, pos] < task.n_keys
            assert task.value_lo <= tokens[b, pos + 1] < task.value_hi
            assert tokens[b, pos + 1] == tokens[b, pos + 2]
        assert tokens[b, 31] < task.n_keys  # query is a key symbol
        assert task.value_lo <= ttok[b, 0] < task.value_hi


def test_task_layout_value_first():
    task = RecallTask(length=32, distance=8, pairs=2, value_repeats=1, key_first=False, n_filler=8)
    tokens, _, _ = sample_batch(task, np.random.default_rng(0), 2)
    start = task.block_start
    for b in range(2):
        for i in range(task.pairs):
            pos = start + i * 2
            assert task.value_lo <= tokens[b, pos] < task.value_hi
            assert tokens[b, pos + 1] < task.n_keys


def test_task_invariant_validation():
    with pytest.raises(ValueError):
        RecallTask(length=10, distance=8, pairs=2)  # too short
    with pytest.raises(ValueError):
        RecallTask(length=64, distance=0, pairs=1)
    with pytest.raises(ValueError):
        RecallTask(length=64, distance=4, pairs=20, n_keys=16, n_values=16)


def test_probe_positions_stay_clear_of_query_tail():
    task = RecallTask(length=256, distance=200, pairs=1, value_repeats=3, probes=8)
    pos = task.probe_positions()
    assert len(pos) == 8
    assert all(p <= 255 - task.tail for p in pos)
    block_end = task.block_start + task.block_span - 1
    assert all(p > block_end for p in pos)
    tokens, tpos, ttok = sample_batch(task, np.random.default_rng(1), 2)
    assert tpos.shape == (2, 9)
    assert (tpos[:, 1:] == np.array(pos)).all()


# ---------------------------------------------------------------------------
# training and evaluation


def test_untrained_accuracy_is_chance_over_values():
    task = LOCAL_TASK
    params = init_params(task.vocab, 16, 1, 2, task.length, seed=2)
    acc = evaluate(params, task, MaskConfig(0.5, 8), 512, seed=9)
    p0 = 1.0 / task.n_values
    sigma = math.sqrt(p0 * (1 - p0) / 512)
    assert abs(acc - p0) <= 3 * sigma + 1e-9


def test_evaluate_deterministic():
    task = LOCAL_TASK
    params = init_params(task.vocab, 16, 1, 2, task.length, seed=2)
    a = evaluate(params, task, MaskConfig(0.5, 8), 128, seed=5)
    b = evaluate(params, task, MaskConfig(0.5, 8), 128, seed=5)
    assert a == b


def test_zero_learning_rate_keeps_params_and_loss_fixed():
    task = LOCAL_TASK
    cfg = MaskConfig(0.5, 8)
    params = init_params(task.vocab, 16, 1, 2, task.length, seed=3)
    before = {n: t.copy() for n, t in params.tensors()}
    tokens, tpos, ttok = sample_batch(task, np.random.default_rng(0), 8)
    loss_before, _ = loss_and_grads(params, tokens, tpos, ttok, cfg)
    train(params, task, cfg, steps=5, lr=0.0, seed=1, eval_examples=8, dtype=np.float64)
    for n, t in params.tensors():
        np.testing.assert_array_equal(t, before[n])
    loss_after, _ = loss_and_grads(params, tokens, tpos, ttok, cfg)
    assert loss_after == loss_before


def test_train_reduces_loss_and_is_deterministic():
    task = LOCAL_TASK
    cfg = MaskConfig(0.0, 8)
    reports = []
    for _ in range(2):
        params = init_params(task.vocab, 32, 2, 2, task.length, seed=3)
        reports.append(train(params, task, cfg, steps=150, lr=0.1, seed=2, eval_examples=64))
    assert reports[0] == reports[1]  # bitwise-identical TrainReport
    assert reports[0].final_loss <= math.log(task.vocab)
    assert reports[0].p == 0.0
    assert reports[0].attended_entries_per_token > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_raises():
    task = LOCAL_TASK
    params = init_params(task.vocab, 16, 1, 2, task.length, seed=3)
    with pytest.raises(DivergenceError):
        train(params, task, MaskConfig(0.5, 8), steps=60, lr=1e8, seed=1, clip=None, eval_examples=8)


def test_window_only_far_task_stays_at_chance():
    # binding outside reachable_set(query, n_layers, cfg): accuracy pinned near chance
    task = RecallTask(length=128, distance=100, pairs=1, value_repeats=3, probes=0, n_filler=32)
    cfg = MaskConfig(0.0, 8)
    params = init_params(task.vocab, 32, 2, 2, task.length, seed=5)
    rep = train(params, task, cfg, steps=120, lr=0.1, seed=4, eval_examples=256)
    assert rep.eval_accuracy <= 1.0 / task.n_values + 0.10


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    params = init_params(vocab=12, d_model=8, n_layers=2, n_heads=2, max_len=9, seed=8)
    params.unembed = np.random.default_rng(0).standard_normal(params.unembed.shape)
    path = tmp_path / "model.ppa"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert (loaded.vocab, loaded.d_model, loaded.n_layers) == (12, 8, 2)
    assert (loaded.n_heads, loaded.max_len, loaded.rng_seed) == (2, 9, 8)
    for (na, ta), (nb, tb) in zip(params.tensors(), loaded.tensors()):
        assert na == nb
        np.testing.assert_array_equal(ta, tb)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ppa"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_version(tmp_path):
    params = init_params(vocab=6, d_model=4, n_layers=1, n_heads=1, max_len=4, seed=0)
    path = tmp_path / "model.ppa"
    save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
