"""A small trainable transformer whose attention mask is a MaskConfig.

Decoder-only: token + learned positional embeddings, n_layers blocks of
(multi-head masked attention + residual, ReLU MLP + residual), and a linear
unembedding that starts at zero so the initial loss is exactly ln(vocab).
There is no layer norm; at these widths the residual stream stays
well-scaled and backpropagation is kept hand-derivable.

All arithmetic is float64 numpy. Forward, loss, and gradients are written
by hand and checked against central finite differences in the tests.

Checkpoint format (little-endian, documented contract):

    bytes 0..3   magic "PPA1"
    u32          version (currently 1)
    u32 x 5      vocab, d_model, n_layers, n_heads, max_len
    i64          rng_seed
    u32          n_tensors
    per tensor:  u32 name length, name bytes (utf-8), u32 ndim, u64 x ndim shape
    then raw float64 data for every tensor, in table order

Tensor order is declaration order: tok_emb, pos_emb, then per layer
Wq, Wk, Wv, Wo, W1, b1, W2, b2, and finally unembed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mask_core import MaskConfig, full_mask, total_attended

__all__ = [
    "ModelParams",
    "RecallTask",
    "TrainReport",
    "DivergenceError",
    "init_params",
    "forward",
    "loss_and_grads",
    "sample_batch",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]


class DivergenceError(RuntimeError):
    """Training loss became non-finite; reported rather than clamped."""


@dataclass
class ModelParams:
    vocab: int
    d_model: int
    n_layers: int
    n_heads: int
    max_len: int
    rng_seed: int
    tok_emb: np.ndarray  # (vocab, d_model)
    pos_emb: np.ndarray  # (max_len, d_model)
    layers: list[dict]  # per layer: Wq Wk Wv Wo W1 b1 W2 b2
    unembed: np.ndarray  # (d_model, vocab)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in the fixed declaration order."""
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            for key in _LAYER_KEYS:
                out.append((f"layer{i}.{key}", layer[key]))
        out.append(("unembed", self.unembed))
        return out


_LAYER_KEYS = ("Wq", "Wk", "Wv", "Wo", "W1", "b1", "W2", "b2")


def init_params(
    vocab: int,
    d_model: int,
    n_layers: int,
    n_heads: int,
    max_len: int,
    seed: int,
) -> ModelParams:
    """Seed-deterministic initialization; identical seed, identical bits.

    Choices that matter without layer norm: token embeddings are rows of a
    random orthogonal frame (distinct symbols stay linearly separable at
    small width), positional embeddings are smaller than token ones so
    content dominates attention logits, the MLP output projection starts at
    zero so early training flows through the attention path, and the
    unembedding starts at zero so initial logits are uniform and the
    cross-entropy starts at exactly ln(vocab).
    """
    if d_model % n_heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    rng = np.random.default_rng(seed)
    proj = 1.0 / math.sqrt(d_model)
    layers = []
    for _ in range(n_layers):
        layers.append(
            {
                "Wq": rng.standard_normal((d_model, d_model)) * proj,
                "Wk": rng.standard_normal((d_model, d_model)) * proj,
                "Wv": rng.standard_normal((d_model, d_model)) * proj,
                "Wo": rng.standard_normal((d_model, d_model)) * proj,
                "W1": rng.standard_normal((d_model, 4 * d_model)) * proj,
                "b1": np.zeros(4 * d_model),
                "W2": np.zeros((4 * d_model, d_model)),
                "b2": np.zeros(d_model),
            }
        )
    frame, _ = np.linalg.qr(rng.standard_normal((max(vocab, d_model), d_model)))
    return ModelParams(
        vocab=vocab,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        max_len=max_len,
        rng_seed=seed,
        tok_emb=frame[:vocab] * (0.3 * math.sqrt(d_model)),
        pos_emb=rng.standard_normal((max_len, d_model)) * 0.15,
        layers=layers,
        unembed=np.zeros((d_model, vocab)),
    )


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, L, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, L, H * dh)


@lru_cache(maxsize=8)
def _mask_bias_cached(L: int, cfg: MaskConfig, dtype_name: str) -> np.ndarray:
    bias = np.full((L, L), -np.inf, dtype=np.dtype(dtype_name))
    bias[full_mask(L, cfg)] = 0.0
    bias.setflags(write=False)
    return bias


def _mask_bias(L: int, cfg: MaskConfig, dtype) -> np.ndarray:
    """Additive attention bias: 0 on attended entries, -inf elsewhere."""
    return _mask_bias_cached(L, cfg, np.dtype(dtype).name)


def _proj(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    # one flat gemm instead of a batch-looped one
    B, L, d = x.shape
    return (x.reshape(B * L, d) @ W).reshape(B, L, W.shape[1])


def _forward_batch(params: ModelParams, tokens: np.ndarray, cfg: MaskConfig):
    """Batched forward pass; returns (logits, cache) for the backward pass."""
    B, L = tokens.shape
    H = params.n_heads
    scale = 1.0 / math.sqrt(params.d_model // H)
    dtype = params.tok_emb.dtype
    bias = _mask_bias(L, cfg, dtype)

    x = params.tok_emb[tokens] + params.pos_emb[:L]
    cache = {"tokens": tokens, "bias": bias, "scale": scale, "layers": []}
    for layer in params.layers:
        c = {"x_in": x}
        qh = _split_heads(_proj(x, layer["Wq"]), H)
        kh = _split_heads(_proj(x, layer["Wk"]), H)
        vh = _split_heads(_proj(x, layer["Wv"]), H)
        scores = qh @ kh.swapaxes(-1, -2)
        scores *= scale
        scores += bias
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores, out=scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        merged = _merge_heads(probs @ vh)
        x = x + _proj(merged, layer["Wo"])
        c.update(qh=qh, kh=kh, vh=vh, probs=probs, merged=merged, x_mid=x)
        pre = _proj(x, layer["W1"])
        pre += layer["b1"]
        act = np.maximum(pre, 0.0)
        mlp = _proj(act, layer["W2"])
        mlp += layer["b2"]
        x = x + mlp
        c.update(pre=pre, act=act)
        cache["layers"].append(c)
    cache["x_final"] = x
    logits = _proj(x, params.unembed)
    return logits, cache


def _check_tokens(params: ModelParams, tokens: np.ndarray) -> None:
    if tokens.ndim != 2:
        raise ValueError("token batch must be 2-D (batch, length)")
    if tokens.shape[1] > params.max_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {params.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.vocab):
        raise ValueError("token id outside vocabulary")


def forward(params: ModelParams, tokens, cfg: MaskConfig) -> np.ndarray:
    """Logits (L, vocab) for one token sequence."""
    tok = np.asarray(tokens, dtype=np.int64)[None, :]
    _check_tokens(params, tok)
    logits, _ = _forward_batch(params, tok, cfg)
    return logits[0]


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _backward_batch(params: ModelParams, cache: dict, dlogits: np.ndarray) -> dict:
    """Gradients for every tensor given d(loss)/d(logits)."""
    H = params.n_heads
    scale = cache["scale"]
    grads = {"unembed": _flat(cache["x_final"]).T @ _flat(dlogits)}
    dx = _proj(dlogits, params.unembed.T)
    for i in range(params.n_layers - 1, -1, -1):
        layer = params.layers[i]
        c = cache["layers"][i]
        # MLP block
        dact = _proj(dx, layer["W2"].T)
        grads[f"layer{i}.W2"] = _flat(c["act"]).T @ _flat(dx)
        grads[f"layer{i}.b2"] = dx.sum(axis=(0, 1))
        dpre = dact
        dpre *= c["pre"] > 0.0
        grads[f"layer{i}.W1"] = _flat(c["x_mid"]).T @ _flat(dpre)
        grads[f"layer{i}.b1"] = dpre.sum(axis=(0, 1))
        dx = dx + _proj(dpre, layer["W1"].T)
        # attention block
        grads[f"layer{i}.Wo"] = _flat(c["merged"]).T @ _flat(dx)
        dmerged = _split_heads(_proj(dx, layer["Wo"].T), H)
        dprobs = dmerged @ c["vh"].swapaxes(-1, -2)
        dvh = c["probs"].swapaxes(-1, -2) @ dmerged
        dprobs -= (dprobs * c["probs"]).sum(axis=-1, keepdims=True)
        dprobs *= c["probs"]  # now d(scores)
        dqh = dprobs @ c["kh"]
        dqh *= scale
        dkh = dprobs.swapaxes(-1, -2) @ c["qh"]
        dkh *= scale
        dq, dk, dv = (_merge_heads(g) for g in (dqh, dkh, dvh))
        x_in = _flat(c["x_in"])
        grads[f"layer{i}.Wq"] = x_in.T @ _flat(dq)
        grads[f"layer{i}.Wk"] = x_in.T @ _flat(dk)
        grads[f"layer{i}.Wv"] = x_in.T @ _flat(dv)
        dx = dx + _proj(dq, layer["Wq"].T) + _proj(dk, layer["Wk"].T) + _proj(dv, layer["Wv"].T)
    tokens = cache["tokens"]
    L = tokens.shape[1]
    grads["pos_emb"] = np.zeros_like(params.pos_emb)
    grads["pos_emb"][:L] = dx.sum(axis=0)
    grads["tok_emb"] = np.zeros_like(params.tok_emb)
    np.add.at(grads["tok_emb"], tokens, dx)
    return grads


def loss_and_grads(
    params: ModelParams,
    tokens: np.ndarray,
    target_pos: np.ndarray,
    target_tok: np.ndarray,
    cfg: MaskConfig,
) -> tuple[float, dict]:
    """Mean cross-entropy over all target positions, plus all gradients.

    target_pos / target_tok may be (batch,) for a single answer position per
    sequence or (batch, k) for several.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    target_pos = np.asarray(target_pos, dtype=np.int64)
    target_tok = np.asarray(target_tok, dtype=np.int64)
    if tokens.shape[0] == 0:
        raise ValueError("empty batch")
    _check_tokens(params, tokens)
    B, L = tokens.shape
    if target_pos.ndim == 1:
        target_pos = target_pos[:, None]
        target_tok = target_tok[:, None]
    if target_pos.min() < 0 or target_pos.max() >= L:
        raise ValueError("target position outside sequence bounds")
    if target_tok.min() < 0 or target_tok.max() >= params.vocab:
        raise ValueError("target token outside vocabulary")

    logits, cache = _forward_batch(params, tokens, cfg)
    bidx = np.arange(B)[:, None]
    rows = logits[bidx, target_pos].astype(np.float64)  # (B, k, vocab)
    m = rows.max(axis=-1, keepdims=True)
    logz = m[..., 0] + np.log(np.exp(rows - m).sum(axis=-1))
    n_targets = target_pos.size
    loss = float(np.sum(logz - np.take_along_axis(rows, target_tok[..., None], -1)[..., 0]) / n_targets)

    probs = np.exp(rows - m)
    probs /= probs.sum(axis=-1, keepdims=True)
    np.put_along_axis(probs, target_tok[..., None], np.take_along_axis(probs, target_tok[..., None], -1) - 1.0, -1)
    dlogits = np.zeros_like(logits)
    # distinct target positions per sequence: plain fancy-index assignment
    dlogits[bidx, target_pos] = (probs / n_targets).astype(logits.dtype)
    return loss, _backward_batch(params, cache, dlogits)


# ---------------------------------------------------------------------------
# synthetic recall task


@dataclass(frozen=True)
class RecallTask:
    """Key-value recall with the binding placed `distance` tokens before the query.

    The vocabulary is partitioned into key, value, and filler symbols. Each
    sequence carries `pairs` bindings written consecutively; the query (one
    of the keys, re-shown as the final token) must be answered with its bound
    value. `value_repeats` writes each value that many times so the binding
    spans a wider stripe of positions; `key_first=False` flips the within-
    pair order (values before key).

    Training sequences additionally carry `probes` intermediate queries at
    geometrically staggered distances after the block, each re-showing one
    key with its value as the target. They densify the learning signal (the
    retrieval circuit is taught at easy distances and reused at hard ones)
    without touching the measured query: a probe-free tail of `tail` filler
    tokens separates the last probe from the final query, so a window-only
    model can never relay a probe's answer forward to it.
    """

    length: int
    distance: int
    pairs: int = 4
    n_keys: int = 16
    n_values: int = 16
    n_filler: int = 32
    value_repeats: int = 1
    key_first: bool = True
    probes: int = 0
    tail: int = 40

    def __post_init__(self):
        if self.distance < 1:
            raise ValueError("distance must be >= 1")
        if not 1 <= self.pairs <= min(self.n_keys, self.n_values):
            raise ValueError("pairs must fit within distinct key and value symbols")
        if self.value_repeats < 1:
            raise ValueError("value_repeats must be >= 1")
        if self.distance + self.pairs * (1 + self.value_repeats) + 2 > self.length:
            raise ValueError("sequence too short for distance + bindings + query")
        if self.probes and len(self.probe_positions()) < self.probes:
            raise ValueError("probe zone too small for requested probe count")

    @property
    def vocab(self) -> int:
        return self.n_keys + self.n_values + self.n_filler

    @property
    def value_lo(self) -> int:
        return self.n_keys

    @property
    def value_hi(self) -> int:
        return self.n_keys + self.n_values

    @property
    def block_span(self) -> int:
        return self.pairs * (1 + self.value_repeats)

    @property
    def block_start(self) -> int:
        return self.length - 1 - self.distance - self.block_span

    def probe_positions(self) -> list[int]:
        """Fixed probe positions: geometric distances from the block end."""
        if self.probes == 0:
            return []
        block_end = self.block_start + self.block_span - 1
        lo = block_end + 2
        hi = self.length - 1 - self.tail
        if hi < lo:
            return []
        span = hi - lo
        positions = sorted(
            {lo + round(span ** (i / max(1, self.probes - 1))) - 1 for i in range(self.probes)}
        )
        return [q for q in positions if lo <= q <= hi]


def sample_batch(task: RecallTask, rng: np.random.Generator, batch_size: int):
    """Seeded batch of sequences: (tokens, target_pos, target_tok).

    target_pos/target_tok are (batch, n_targets); column 0 is the primary
    far query at the final position, later columns are the probes.
    """
    L = task.length
    qpos = L - 1
    start = task.block_start
    probe_pos = task.probe_positions()
    n_targets = 1 + len(probe_pos)
    tokens = rng.integers(task.value_hi, task.vocab, size=(batch_size, L), dtype=np.int64)
    target_pos = np.empty((batch_size, n_targets), dtype=np.int64)
    target_tok = np.empty((batch_size, n_targets), dtype=np.int64)
    per = 1 + task.value_repeats
    for b in range(batch_size):
        keys = rng.choice(task.n_keys, size=task.pairs, replace=False)
        values = task.value_lo + rng.choice(task.n_values, size=task.pairs, replace=False)
        for i in range(task.pairs):
            pos = start + i * per
            if task.key_first:
                tokens[b, pos] = keys[i]
                tokens[b, pos + 1 : pos + per] = values[i]
            else:
                tokens[b, pos : pos + per - 1] = values[i]
                tokens[b, pos + per - 1] = keys[i]
        q = rng.integers(task.pairs)
        tokens[b, qpos] = keys[q]
        target_pos[b, 0] = qpos
        target_tok[b, 0] = values[q]
        for t, pp in enumerate(probe_pos, start=1):
            pq = rng.integers(task.pairs)
            tokens[b, pp] = keys[pq]
            target_pos[b, t] = pp
            target_tok[b, t] = values[pq]
    return tokens, target_pos, target_tok


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class TrainReport:
    p: float
    steps: int
    final_loss: float
    eval_accuracy: float
    attended_entries_per_token: float


def _train_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, step])


def _eval_rng(seed: int) -> np.random.Generator:
    # held-out stream, disjoint from every training step stream
    return np.random.default_rng([seed, 1])


def evaluate(
    params: ModelParams,
    task: RecallTask,
    cfg: MaskConfig,
    n_examples: int,
    seed: int,
    batch_size: int = 64,
) -> float:
    """Fraction of held-out queries answered with the bound value.

    The answer is always a value symbol, so the readout argmaxes over the
    value-symbol slice of the vocabulary (a multiple-choice readout; with a
    zero unembedding this sits exactly at chance, 1/n_values).
    """
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    rng = _eval_rng(seed)
    hits = 0
    done = 0
    while done < n_examples:
        B = min(batch_size, n_examples - done)
        tokens, target_pos, target_tok = sample_batch(task, rng, B)
        logits, _ = _forward_batch(params, tokens, cfg)
        rows = logits[np.arange(B), target_pos[:, 0], task.value_lo : task.value_hi]
        pred = task.value_lo + rows.argmax(axis=1)
        hits += int((pred == target_tok[:, 0]).sum())
        done += B
    return hits / n_examples


def _cast_params(params: ModelParams, dtype) -> None:
    params.tok_emb = params.tok_emb.astype(dtype)
    params.pos_emb = params.pos_emb.astype(dtype)
    params.unembed = params.unembed.astype(dtype)
    for layer in params.layers:
        for key in _LAYER_KEYS:
            layer[key] = layer[key].astype(dtype)


def train(
    params: ModelParams,
    task: RecallTask,
    cfg: MaskConfig,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 16,
    momentum: float = 0.9,
    clip: float | None = 1.0,
    warmup: int = 50,
    eval_examples: int = 256,
    lr_schedule=None,
    dtype=np.float32,
    verbose: bool = False,
) -> TrainReport:
    """SGD-with-momentum training on freshly sampled batches.

    Deterministic given (seed, cfg, task): batches come from per-step seeded
    streams, evaluation from a disjoint held-out stream. The default
    schedule is cosine decay with a short linear warmup; pass
    `lr_schedule(step) -> lr` to override. Training runs in `dtype` working
    precision (float32 default, plenty for SGD and twice the throughput);
    parameters are cast back to their original dtype afterwards, and every
    quantity in the report is still deterministic for a fixed seed. Raises
    DivergenceError if the loss leaves the finite range.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if task.vocab > params.vocab:
        raise ValueError("task vocabulary exceeds model vocabulary")
    orig_dtype = params.tok_emb.dtype
    if np.dtype(dtype) != orig_dtype:
        _cast_params(params, dtype)
    try:
        velocity = {name: np.zeros_like(t) for name, t in params.tensors()}
        tensors = dict(params.tensors())
        final_loss = math.nan
        for step in range(steps):
            lr_t = (
                lr_schedule(step)
                if lr_schedule
                else 0.5
                * lr
                * (1.0 + math.cos(math.pi * step / steps))
                * min(1.0, (step + 1) / max(1, warmup))
            )
            tokens, target_pos, target_tok = sample_batch(task, _train_rng(seed, step), batch_size)
            loss, grads = loss_and_grads(params, tokens, target_pos, target_tok, cfg)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at step {step}")
            if clip is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > clip:
                    scale = clip / norm
                    for g in grads.values():
                        g *= np.asarray(scale, dtype=g.dtype)
            for name, t in tensors.items():
                v = velocity[name]
                v *= momentum
                v += grads[name]
                t -= np.asarray(lr_t, dtype=t.dtype) * v
            final_loss = loss
            if verbose and (step % 100 == 0 or step == steps - 1):
                print(f"  step {step:5d}  lr {lr_t:.5f}  loss {loss:.4f}", flush=True)
        acc = evaluate(params, task, cfg, eval_examples, seed)
    finally:
        if params.tok_emb.dtype != orig_dtype:
            _cast_params(params, orig_dtype)
    return TrainReport(
        p=cfg.p,
        steps=steps,
        final_loss=final_loss,
        eval_accuracy=acc,
        attended_entries_per_token=total_attended(task.length, cfg) / task.length,
    )


# ---------------------------------------------------------------------------
# checkpoints


_MAGIC = b"PPA1"
_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the documented flat binary checkpoint format."""
    tensors = params.tensors()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIIIq",
                _VERSION,
                params.vocab,
                params.d_model,
                params.n_layers,
                params.n_heads,
                params.max_len,
                params.rng_seed,
            )
        )
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint written by save_checkpoint; validates the header."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a PPA checkpoint (bad magic)")
        version, vocab, d_model, n_layers, n_heads, max_len, seed = struct.unpack(
            "<IIIIIIq", fh.read(32)
        )
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        table = []
        for _ in range(n_tensors):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            table.append((name, shape))
        data = {}
        for name, shape in table:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            data[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    params = init_params(vocab, d_model, n_layers, n_heads, max_len, seed)
    expected = [name for name, _ in params.tensors()]
    if expected != [name for name, _ in table]:
        raise ValueError("checkpoint tensor table does not match model layout")
    params.tok_emb = data["tok_emb"]
    params.pos_emb = data["pos_emb"]
    for i in range(n_layers):
        for key in _LAYER_KEYS:
            params.layers[i][key] = data[f"layer{i}.{key}"]
    params.unembed = data["unembed"]
    return params
