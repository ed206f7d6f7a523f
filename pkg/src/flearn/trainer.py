"""Supervised fine-tuning, the L-infinity constrained FT-c baseline, and gradient ascent."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .data import KnowledgeRecord, Vocab, encode
from .errors import ConfigError, DivergenceError, InputError
from .model import ParamSet, TokenSeq, _pack, loss_and_grads_raw, mlp_names, residual_at, suffix_loss_and_grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 3
    batch_size: int = 4
    grad_accum_steps: int = 4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        # zero is accepted as an explicit no-op rate
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ConfigError("batch_size and grad_accum_steps must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class FtcConfig:
    target_layer: int | None = None  # None -> last layer
    steps: int = 5
    epsilon: float = 5e-3
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("FT-c steps must be >= 1")
        if not self.epsilon > 0:
            raise ConfigError("FT-c epsilon must be positive")
        if not self.learning_rate >= 0:
            raise ConfigError("FT-c learning_rate must be non-negative")

    def layer(self, n_layers: int) -> int:
        layer = n_layers - 1 if self.target_layer is None else self.target_layer
        if not 0 <= layer < n_layers:
            raise ConfigError(f"target_layer {layer} outside [0, {n_layers})")
        return layer


def split_seed(seed: int, stage: int) -> int:
    """Derive a stage-specific 64-bit seed from a parent seed."""
    return int(np.random.SeedSequence([int(seed), int(stage)]).generate_state(1, np.uint64)[0])


class Optimizer:
    """SGD or Adam over a dict of float32 tensors, updated in float64."""

    def __init__(self, kind: str, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind, self.lr = kind, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Optimizer":
        return cls(cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], sign: float = -1.0) -> bool:
        """Apply one update in place; False when any moment or update went non-finite."""
        if self.lr == 0:
            return True
        self.t += 1
        ok = True
        # overflow is reported through the return value, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            for name, g in grads.items():
                if self.kind == "sgd":
                    update = g
                else:
                    m = self.m.get(name)
                    if m is None:
                        m = self.m[name] = np.zeros_like(g)
                        self.v[name] = np.zeros_like(g)
                    v = self.v[name]
                    m *= self.beta1
                    m += (1 - self.beta1) * g
                    v *= self.beta2
                    v += (1 - self.beta2) * g * g
                    mhat = m / (1 - self.beta1**self.t)
                    vhat = v / (1 - self.beta2**self.t)
                    update = mhat / (np.sqrt(vhat) + self.eps)
                    ok = ok and bool(np.isfinite(v).all())
                params[name] = (params[name] + sign * self.lr * update).astype(np.float32)
                ok = ok and bool(np.isfinite(params[name]).all())
        return ok


def encode_all(vocab: Vocab, data: Sequence[KnowledgeRecord], max_seq_len: int) -> list[TokenSeq]:
    if not data:
        raise InputError("training data is empty")
    return [encode(vocab, r, max_seq_len) for r in data]


def step_batches(n: int, cfg: TrainConfig, rng: np.random.Generator) -> Iterator[list[list[int]]]:
    """Yield, for one epoch, optimizer steps as lists of micro-batch index lists."""
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    micro = [order[i : i + cfg.batch_size].tolist() for i in range(0, n, cfg.batch_size)]
    for i in range(0, len(micro), cfg.grad_accum_steps):
        yield micro[i : i + cfg.grad_accum_steps]


def pack_step(config, seqs: Sequence[TokenSeq], micro: list[list[int]]):
    """Pack one optimizer step: each micro-batch contributes its token-mean loss, averaged."""
    batch, weights = [], []
    for mb in micro:
        n_tok = sum(seqs[i].n_answer for i in mb)
        if n_tok == 0:
            raise InputError("micro-batch without answer positions")
        for i in mb:
            batch.append(seqs[i])
            weights.append(1.0 / (n_tok * len(micro)))
    return _pack(config, batch, weights)


GradFn = Callable[[dict, tuple], tuple[float, dict]]


def run_training(
    trainables: dict[str, np.ndarray],
    grad_fn: GradFn,
    seqs: Sequence[TokenSeq],
    config,
    cfg: TrainConfig,
    *,
    ascent: bool = False,
    stop: Callable[[dict], bool] | None = None,
    history: list | None = None,
    stage: str | None = None,
    until: Callable[[dict], bool] | None = None,
) -> dict[str, np.ndarray]:
    """Generic epoch loop shared by full, LoRA and ascent training.

    ``grad_fn(trainables, packed)`` returns ``(loss, grads)`` for the tensors
    in ``trainables``. ``stop`` is consulted before every optimizer step and
    ``until`` after every epoch; either returning True ends training.
    """
    trainables = {k: np.array(v, dtype=np.float32) for k, v in trainables.items()}
    opt = Optimizer.from_config(cfg)
    rng = np.random.default_rng(int(cfg.seed))
    sign = 1.0 if ascent else -1.0
    step = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for micro in step_batches(len(seqs), cfg, rng):
            if stop is not None and stop(trainables):
                if history is not None and count:
                    history.append(total / count)
                return trainables
            packed = pack_step(config, seqs, micro)
            loss, grads = grad_fn(trainables, packed)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite training loss", epoch=epoch, step=step, stage=stage)
            if not opt.step(trainables, grads, sign):
                raise DivergenceError("non-finite optimizer update", epoch=epoch, step=step, stage=stage)
            total += loss
            count += 1
            step += 1
        if history is not None:
            history.append(total / max(count, 1))
        if until is not None and until(trainables):
            break
    return trainables


def _full_grad_fn(config):
    def grad_fn(trainables, packed):
        P = {k: v.astype(np.float64) for k, v in trainables.items()}
        return loss_and_grads_raw(P, config, *packed)

    return grad_fn


def fine_tune(
    params: ParamSet,
    data: Sequence[KnowledgeRecord],
    vocab: Vocab,
    cfg: TrainConfig,
    *,
    history: list | None = None,
    stage: str | None = None,
    until: Callable[[ParamSet], bool] | None = None,
) -> ParamSet:
    """Full supervised fine-tuning on answer tokens; returns a new ParamSet.

    Each epoch visits the data in a seeded order; optimizer state starts fresh.
    Per-epoch mean losses are appended to ``history`` when given. ``until`` is
    called with the current parameters after each epoch and ends training
    early when it returns True.
    """
    config = params.config
    seqs = encode_all(vocab, data, config.max_seq_len)
    if cfg.epochs == 0:
        return params
    check = None if until is None else (lambda t: until(ParamSet(config, t)))
    trained = run_training(
        dict(params.items()), _full_grad_fn(config), seqs, config, cfg, history=history, stage=stage, until=check
    )
    return ParamSet(config, trained)


def fine_tune_constrained(
    params: ParamSet,
    data: Sequence[KnowledgeRecord],
    vocab: Vocab,
    cfg: FtcConfig,
    *,
    history: list | None = None,
) -> ParamSet:
    """FT-c: Adam on one layer's MLP tensors, projected into an L-inf ball.

    Every step uses the gradient of the mean loss over all of ``data``. After
    each step the trained weights are clipped to ``[w0 - eps, w0 + eps]``
    around their starting values.
    """
    config = params.config
    layer = cfg.layer(config.n_layers)
    seqs = encode_all(vocab, data, config.max_seq_len)
    names = mlp_names(layer)
    w0 = {n: params[n].astype(np.float64) for n in names}
    lo = {n: (w0[n] - cfg.epsilon).astype(np.float32) for n in names}
    hi = {n: (w0[n] + cfg.epsilon).astype(np.float32) for n in names}
    # float32 rounding may push a bound outward by half an ulp; pull it back in
    for n in names:
        lo[n] = np.where(lo[n].astype(np.float64) < w0[n] - cfg.epsilon, np.nextafter(lo[n], np.float32(np.inf)), lo[n])
        hi[n] = np.where(hi[n].astype(np.float64) > w0[n] + cfg.epsilon, np.nextafter(hi[n], np.float32(-np.inf)), hi[n])
        lo[n] = np.minimum(lo[n], params[n])
        hi[n] = np.maximum(hi[n], params[n])
    base = params.as_float64()
    X, tgt, w = _pack(config, seqs)
    # everything below the target MLP is frozen: compute its output once
    start = 2 * layer + 1
    h = residual_at(base, config, X, start)
    if layer == config.n_layers - 1:
        # no attention follows, so the suffix is position-wise: keep scored tokens only
        keep = w > 0
        h, tgt, w = h[keep][None], tgt[keep][None], w[keep][None]
    trainables = {n: np.array(params[n]) for n in names}
    opt = Optimizer("adam", cfg.learning_rate)
    for step in range(cfg.steps):
        P = dict(base)
        P.update({n: v.astype(np.float64) for n, v in trainables.items()})
        loss, grads = suffix_loss_and_grads(P, config, h, start, tgt, w)
        if not math.isfinite(loss):
            raise DivergenceError("non-finite training loss", epoch=0, step=step, stage="ft_c")
        if not opt.step(trainables, {n: grads[n] for n in names}):
            raise DivergenceError("non-finite optimizer update", epoch=0, step=step, stage="ft_c")
        for n in names:
            trainables[n] = np.clip(trainables[n], lo[n], hi[n])
        if history is not None:
            history.append(loss)
    out = dict(params.items())
    out.update(trainables)
    return ParamSet(config, out)


def gradient_ascent_forget(
    params: ParamSet,
    data: Sequence[KnowledgeRecord],
    vocab: Vocab,
    cfg: TrainConfig,
    loss_cap: float | None = None,
    *,
    history: list | None = None,
) -> ParamSet:
    """Unlearning by loss maximisation on ``data``.

    Stops before any step at which the mean loss over ``data`` already reaches
    ``loss_cap`` (default ``ln(vocab_size)``).
    """
    config = params.config
    seqs = encode_all(vocab, data, config.max_seq_len)
    cap = math.log(config.vocab_size) if loss_cap is None else loss_cap
    if cap < 0:
        raise ConfigError("loss_cap must be non-negative")
    full = _pack(config, seqs)

    def mean_loss(trainables) -> float:
        P = {k: v.astype(np.float64) for k, v in trainables.items()}
        loss = loss_and_grads_raw(P, config, *full, need_grads=False)[0]
        if not math.isfinite(loss):
            raise DivergenceError("non-finite loss during ascent", stage="gradient_ascent")
        return loss

    if cfg.epochs == 0 or cfg.learning_rate == 0 or mean_loss(dict(params.items())) >= cap:
        return params
    trained = run_training(
        dict(params.items()),
        _full_grad_fn(config),
        seqs,
        config,
        cfg,
        ascent=True,
        stop=lambda t: mean_loss(t) >= cap,
        history=history,
        stage="gradient_ascent",
    )
    return ParamSet(config, trained)


def mean_loss(params: ParamSet, data: Sequence[KnowledgeRecord], vocab: Vocab) -> float:
    """Token-level mean answer loss of ``params`` over ``data``."""
    seqs = encode_all(vocab, data, params.config.max_seq_len)
    return loss_and_grads_raw(params.as_float64(), params.config, *_pack(params.config, seqs), need_grads=False)[0]
