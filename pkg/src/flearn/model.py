"""Desk-scale decoder-only transformer in numpy, with hand-written backprop.

Layout is pre-norm: every block applies RMS normalisation before its
attention and MLP sublayers, the MLP uses a tanh-approximated GELU, and
positions come from a learned embedding table. Projection matrices are stored
``[out_features, in_features]`` so ``y = x @ W.T``.

Parameters are kept as float32; all arithmetic runs in float64 and results are
rounded back to float32 when they leave this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError

NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_NEG_INF = -1e30

PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape layout, in initialisation order."""
    V, D, F, T = config.vocab_size, config.d_model, config.d_ff, config.max_seq_len
    shapes = {"embed.tok": (V, D), "embed.pos": (T, D)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm"] = (D,)
        for proj in PROJECTIONS:
            shapes[f"{p}.attn.{proj}"] = (D, D)
        shapes[f"{p}.mlp_norm"] = (D,)
        shapes[f"{p}.mlp.up"] = (F, D)
        shapes[f"{p}.mlp.up_bias"] = (F,)
        shapes[f"{p}.mlp.down"] = (D, F)
        shapes[f"{p}.mlp.down_bias"] = (D,)
    shapes["final_norm"] = (D,)
    shapes["head"] = (V, D)
    return shapes


def projection_name(layer: int, proj: str) -> str:
    return f"layers.{layer}.attn.{proj}"


def mlp_names(layer: int) -> tuple[str, ...]:
    p = f"layers.{layer}.mlp"
    return (f"{p}.up", f"{p}.up_bias", f"{p}.down", f"{p}.down_bias")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class _TensorMap(Mapping[str, np.ndarray]):
    """Read-only name -> float32 tensor mapping checked against a layout."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray], *, what: str):
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ConfigError(f"{what} layout mismatch: missing={missing} extra={extra}")
        entries = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise ConfigError(f"{what} tensor {name!r} has shape {arr.shape}, expected {shape}")
            if arr.dtype != np.float32 or arr.flags.writeable:
                arr = np.array(arr, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{what} tensor {name!r} contains non-finite values")
            entries[name] = _freeze(arr)
        self.config = config
        self._entries = MappingProxyType(entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def n_params(self) -> int:
        return sum(a.size for a in self._entries.values())

    def bit_equal(self, other: "_TensorMap") -> bool:
        if self.config != other.config or set(self) != set(other):
            return False
        return all(
            self[n].tobytes() == other[n].tobytes() for n in self
        )

    def as_float64(self) -> dict[str, np.ndarray]:
        return {n: a.astype(np.float64) for n, a in self._entries.items()}


class ParamSet(_TensorMap):
    """Immutable model parameters (theta, theta-prime, theta-star...)."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        super().__init__(config, tensors, what="ParamSet")

    def __repr__(self):
        return f"ParamSet({self.config}, n_params={self.n_params()})"


class GradSet(_TensorMap):
    """Gradients with exactly the layout of the ParamSet they came from."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        super().__init__(config, tensors, what="GradSet")


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    answer_start: int

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not 0 <= self.answer_start <= len(self.ids):
            raise InputError(
                f"answer_start={self.answer_start} outside [0, {len(self.ids)}]"
            )

    def __len__(self):
        return len(self.ids)

    @property
    def n_answer(self) -> int:
        # position 0 has no predecessor, so it can never be a target
        return len(self.ids) - max(self.answer_start, 1)


def init_model(config: ModelConfig) -> ParamSet:
    """Seeded scaled-uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Norm gains start at one and biases at zero. Embedding tables use d_model as
    their fan-in.
    """
    rng = np.random.default_rng(int(config.seed))
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_norm") or name == "final_norm":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith("_bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[-1]
            bound = 1.0 / math.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ParamSet(config, tensors)


def zeros_like_layout(config: ModelConfig) -> dict[str, np.ndarray]:
    return {n: np.zeros(s, dtype=np.float32) for n, s in param_shapes(config).items()}


# ---------------------------------------------------------------------------
# batched float64 kernels


def _check_ids(config: ModelConfig, ids: Sequence[int]) -> None:
    if len(ids) == 0:
        raise InputError("empty token sequence")
    if len(ids) > config.max_seq_len:
        raise InputError(f"sequence length {len(ids)} exceeds max_seq_len={config.max_seq_len}")
    for t in ids:
        if not 0 <= int(t) < config.vocab_size:
            raise InputError(f"token id {t} outside vocabulary of size {config.vocab_size}")


def _rmsnorm(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    n = x * r
    return n * g, (n, r)


def _rmsnorm_back(dy, g, cache):
    n, r = cache
    dg = (dy * n).reshape(-1, n.shape[-1]).sum(axis=0)
    dn = dy * g
    dx = r * (dn - n * np.mean(dn * n, axis=-1, keepdims=True))
    return dx, dg


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(dy, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _attn_forward(P, config: ModelConfig, h, i):
    B, T, _ = h.shape
    H, dh = config.n_heads, config.head_dim
    p = f"layers.{i}"
    a, ncache = _rmsnorm(h, P[f"{p}.attn_norm"])
    q = (a @ P[f"{p}.attn.q"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    k = (a @ P[f"{p}.attn.k"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    v = (a @ P[f"{p}.attn.v"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    s = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    s = np.where(np.triu(np.ones((T, T), dtype=bool), k=1), _NEG_INF, s)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    att = e / e.sum(axis=-1, keepdims=True)
    c = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, -1)
    return h + c @ P[f"{p}.attn.o"].T, (a, ncache, q, k, v, att, c)


def _attn_backward(P, config: ModelConfig, dh_, i, cache, grads):
    a, ncache, q, k, v, att, c = cache
    B, T, D = dh_.shape
    H, dh = config.n_heads, config.head_dim
    p = f"layers.{i}"
    grads[f"{p}.attn.o"] = dh_.reshape(-1, D).T @ c.reshape(-1, D)
    dc = (dh_ @ P[f"{p}.attn.o"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    datt = dc @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dc
    ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    af = a.reshape(-1, D)
    da = np.zeros_like(a)
    for proj, d in (("q", dq), ("k", dk), ("v", dv)):
        d = d.transpose(0, 2, 1, 3).reshape(B, T, D)
        grads[f"{p}.attn.{proj}"] = d.reshape(-1, D).T @ af
        da += d @ P[f"{p}.attn.{proj}"]
    dx, grads[f"{p}.attn_norm"] = _rmsnorm_back(da, P[f"{p}.attn_norm"], ncache)
    return dh_ + dx


def _mlp_forward(P, config: ModelConfig, h, i):
    p = f"layers.{i}"
    m, ncache = _rmsnorm(h, P[f"{p}.mlp_norm"])
    u = m @ P[f"{p}.mlp.up"].T + P[f"{p}.mlp.up_bias"]
    g, t = _gelu(u)
    return h + g @ P[f"{p}.mlp.down"].T + P[f"{p}.mlp.down_bias"], (m, ncache, u, t, g)


def _mlp_backward(P, config: ModelConfig, dh_, i, cache, grads):
    m, ncache, u, t, g = cache
    D = dh_.shape[-1]
    p = f"layers.{i}"
    flat = dh_.reshape(-1, D)
    grads[f"{p}.mlp.down"] = flat.T @ g.reshape(-1, g.shape[-1])
    grads[f"{p}.mlp.down_bias"] = flat.sum(axis=0)
    du = _gelu_back(dh_ @ P[f"{p}.mlp.down"], u, t)
    duf = du.reshape(-1, du.shape[-1])
    grads[f"{p}.mlp.up"] = duf.T @ m.reshape(-1, D)
    grads[f"{p}.mlp.up_bias"] = duf.sum(axis=0)
    dx, grads[f"{p}.mlp_norm"] = _rmsnorm_back(du @ P[f"{p}.mlp.up"], P[f"{p}.mlp_norm"], ncache)
    return dh_ + dx


def _sublayers(config: ModelConfig, start: int = 0):
    """(layer, kind) pairs in execution order, from sublayer index ``start``.

    Sublayer ``2*i`` is layer i's attention, ``2*i + 1`` its MLP.
    """
    return [(j // 2, "attn" if j % 2 == 0 else "mlp") for j in range(start, 2 * config.n_layers)]


_SUB_FORWARD = {"attn": _attn_forward, "mlp": _mlp_forward}
_SUB_BACKWARD = {"attn": _attn_backward, "mlp": _mlp_backward}


def embed(P, X: np.ndarray):
    return P["embed.tok"][X] + P["embed.pos"][: X.shape[1]]


def _forward_from(P, config: ModelConfig, h, start: int, keep: bool):
    """Run sublayers ``start..`` and the head on residual stream ``h``."""
    caches = []
    for i, kind in _sublayers(config, start):
        h, cache = _SUB_FORWARD[kind](P, config, h, i)
        if keep:
            caches.append(cache)
    f, fcache = _rmsnorm(h, P["final_norm"])
    return f @ P["head"].T, (start, caches, f, fcache)


def residual_at(P, config: ModelConfig, X: np.ndarray, start: int):
    """Residual stream entering sublayer ``start``."""
    h = embed(P, X)
    for i, kind in _sublayers(config)[:start]:
        h, _ = _SUB_FORWARD[kind](P, config, h, i)
    return h


def _forward(P: Mapping[str, np.ndarray], config: ModelConfig, X: np.ndarray, keep: bool):
    """Batched forward. ``X`` is an int array [B, T]; returns logits [B, T, V]."""
    logits, cache = _forward_from(P, config, embed(P, X), 0, keep)
    return logits, (X, cache)


def _backward_from(P, config: ModelConfig, cache, dlogits):
    """Gradients for the head and sublayers ``start..``; also returns d(residual in)."""
    start, caches, f, fcache = cache
    D = config.d_model
    grads = {"head": dlogits.reshape(-1, dlogits.shape[-1]).T @ f.reshape(-1, D)}
    dh_, grads["final_norm"] = _rmsnorm_back(dlogits @ P["head"], P["final_norm"], fcache)
    for (i, kind), sub_cache in reversed(list(zip(_sublayers(config, start), caches))):
        dh_ = _SUB_BACKWARD[kind](P, config, dh_, i, sub_cache, grads)
    return grads, dh_


def _backward(P, config: ModelConfig, cache, dlogits):
    X, inner = cache
    grads, dh_ = _backward_from(P, config, inner, dlogits)
    T = X.shape[1]
    grads["embed.pos"] = np.zeros_like(P["embed.pos"])
    grads["embed.pos"][:T] = dh_.sum(axis=0)
    dtok = np.zeros_like(P["embed.tok"])
    np.add.at(dtok, X.reshape(-1), dh_.reshape(-1, config.d_model))
    grads["embed.tok"] = dtok
    return grads


def _pack(config: ModelConfig, batch: Sequence[TokenSeq], weights=None):
    """Right-pad a batch into ids / target / per-token weight arrays.

    Logit row t predicts token t+1; only tokens at index >= answer_start are
    targets. By default every target token weighs 1/total so the loss is the
    token-level mean over the batch. ``weights`` overrides the per-sequence
    weight of each target token (used for gradient accumulation).
    """
    if not batch:
        raise InputError("empty batch")
    T = max(len(s) for s in batch)
    B = len(batch)
    X = np.zeros((B, T), dtype=np.int64)
    tgt = np.zeros((B, T), dtype=np.int64)
    w = np.zeros((B, T), dtype=np.float64)
    for b, s in enumerate(batch):
        _check_ids(config, s.ids)
        X[b, : len(s)] = s.ids
        start = max(s.answer_start, 1)
        tgt[b, start - 1 : len(s) - 1] = s.ids[start:]
        w[b, start - 1 : len(s) - 1] = 1.0 if weights is None else weights[b]
    total = w.sum()
    if total == 0:
        raise InputError("batch has no answer positions")
    if weights is None:
        w /= total
    return X, tgt, w


def _xent(logits, tgt, w):
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(w * picked))
    return loss, logp


def _dlogits(logp, tgt, w):
    d = np.exp(logp)
    B, T = tgt.shape
    np.subtract.at(d, (np.arange(B)[:, None], np.arange(T)[None, :], tgt), 1.0)
    return d * w[..., None]


def loss_and_grads_raw(P: Mapping[str, np.ndarray], config: ModelConfig, X, tgt, w, need_grads=True):
    """float64 loss (and gradient dict) for pre-packed arrays."""
    logits, cache = _forward(P, config, X, keep=need_grads)
    loss, logp = _xent(logits, tgt, w)
    if not need_grads:
        return loss, None
    return loss, _backward(P, config, cache, _dlogits(logp, tgt, w))


def suffix_loss_and_grads(P: Mapping[str, np.ndarray], config: ModelConfig, h, start: int, tgt, w):
    """Loss and gradients when only sublayers ``start..`` (and the head) vary.

    ``h`` is the cached residual stream entering sublayer ``start``.
    """
    logits, cache = _forward_from(P, config, h, start, keep=True)
    loss, logp = _xent(logits, tgt, w)
    grads, _ = _backward_from(P, config, cache, _dlogits(logp, tgt, w))
    return loss, grads


def forward(params: ParamSet, ids: Sequence[int]) -> np.ndarray:
    """Logits [len(ids), vocab_size] for a single sequence."""
    _check_ids(params.config, ids)
    X = np.asarray(ids, dtype=np.int64)[None, :]
    logits, _ = _forward(params.as_float64(), params.config, X, keep=False)
    return logits[0].astype(np.float32)


def loss_and_grads(params: ParamSet, batch: Sequence[TokenSeq]) -> tuple[float, GradSet]:
    """Mean answer-token cross-entropy over ``batch`` and its exact gradient."""
    X, tgt, w = _pack(params.config, batch)
    loss, grads = loss_and_grads_raw(params.as_float64(), params.config, X, tgt, w)
    return loss, GradSet(params.config, grads)


def batch_loss(params: ParamSet | Mapping[str, np.ndarray], batch: Sequence[TokenSeq], config=None) -> float:
    """Mean answer-token cross-entropy, no gradients."""
    config = config or params.config
    P = params.as_float64() if isinstance(params, ParamSet) else params
    X, tgt, w = _pack(config, batch)
    return loss_and_grads_raw(P, config, X, tgt, w, need_grads=False)[0]


def greedy_decode_many(
    params: ParamSet | Mapping[str, np.ndarray],
    prompts: Sequence[Sequence[int]],
    max_new: int,
    eos: int,
    config: ModelConfig | None = None,
) -> list[list[int]]:
    """Greedy continuations for many prompts, batching prompts of equal length."""
    config = config or params.config
    P = params.as_float64() if isinstance(params, ParamSet) else params
    for prompt in prompts:
        if len(prompt) == 0:
            raise InputError("empty prompt")
        if len(prompt) > config.max_seq_len - 1:
            raise InputError(
                f"prompt length {len(prompt)} leaves no room under max_seq_len={config.max_seq_len}"
            )
        _check_ids(config, prompt)
    out: list[list[int] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for idx, prompt in enumerate(prompts):
        by_len.setdefault(len(prompt), []).append(idx)
    for length, idxs in sorted(by_len.items()):
        X = np.array([list(prompts[i]) for i in idxs], dtype=np.int64)
        done = np.zeros(len(idxs), dtype=bool)
        gen = [[] for _ in idxs]
        for _ in range(max_new):
            if done.all():
                break
            logits, _ = _forward(P, config, X, keep=False)
            # np.argmax returns the first maximum: ties go to the lowest id
            nxt = np.argmax(logits[:, -1, :], axis=-1)
            for j, tok in enumerate(nxt):
                if done[j]:
                    continue
                if tok == eos:
                    done[j] = True
                else:
                    gen[j].append(int(tok))
            if X.shape[1] == config.max_seq_len:
                break
            X = np.concatenate([X, nxt[:, None]], axis=1)
        for j, i in enumerate(idxs):
            out[i] = gen[j]
    return out  # type: ignore[return-value]


def greedy_decode(params: ParamSet, prompt: Sequence[int], max_new: int = 8, eos: int = 1) -> list[int]:
    """Argmax continuation of ``prompt``, stopping at ``eos`` or after ``max_new`` tokens.

    The returned list excludes the prompt and the eos token.
    """
    return greedy_decode_many(params, [prompt], max_new, eos)[0]
