"""Low-rank adapters on attention projections."""
from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterator, Mapping, Sequence

import numpy as np

from .data import KnowledgeRecord, Vocab
from .errors import ConfigError
from .model import ModelConfig, ParamSet, loss_and_grads_raw, projection_name
from .trainer import TrainConfig, encode_all, run_training

FAMILY_TO_PROJ = {"query": "q", "key": "k", "value": "v", "output": "o"}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    target_projections: tuple[str, ...] = ("query", "value")
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("LoRA alpha must be positive")
        targets = tuple(self.target_projections)
        if not targets or any(t not in FAMILY_TO_PROJ for t in targets) or len(set(targets)) != len(targets):
            raise ConfigError(f"bad target_projections {targets!r}")
        # canonical order keeps adapter layouts independent of how targets were listed
        object.__setattr__(self, "target_projections", tuple(t for t in FAMILY_TO_PROJ if t in targets))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def adapter_shapes(model_cfg: ModelConfig, cfg: LoraConfig) -> dict[str, tuple[int, int]]:
    D = model_cfg.d_model
    shapes = {}
    for layer in range(model_cfg.n_layers):
        for fam in cfg.target_projections:
            base = projection_name(layer, FAMILY_TO_PROJ[fam])
            shapes[f"{base}.lora_A"] = (cfg.rank, D)
            shapes[f"{base}.lora_B"] = (D, cfg.rank)
    return shapes


def base_name(adapter_name: str) -> str:
    return adapter_name.rsplit(".", 1)[0]


class LoraAdapterSet(Mapping[str, np.ndarray]):
    """Immutable adapter factors keyed ``layers.<i>.attn.<p>.lora_A`` / ``.lora_B``."""

    def __init__(self, model_config: ModelConfig, config: LoraConfig, tensors: Mapping[str, np.ndarray]):
        shapes = adapter_shapes(model_config, config)
        if set(tensors) != set(shapes):
            raise ConfigError(
                f"adapter layout mismatch: missing={sorted(set(shapes) - set(tensors))} "
                f"extra={sorted(set(tensors) - set(shapes))}"
            )
        entries = {}
        for name, shape in shapes.items():
            arr = np.array(tensors[name], dtype=np.float32)
            if arr.shape != shape:
                raise ConfigError(f"adapter {name!r} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"adapter {name!r} contains non-finite values")
            arr.setflags(write=False)
            entries[name] = arr
        self.model_config = model_config
        self.config = config
        self._entries = MappingProxyType(entries)

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def targets(self) -> list[str]:
        """Base projection names the adapters attach to."""
        return [base_name(n) for n in self._entries if n.endswith(".lora_A")]

    def bit_equal(self, other: "LoraAdapterSet") -> bool:
        return (
            self.config == other.config
            and self.model_config == other.model_config
            and all(self[n].tobytes() == other[n].tobytes() for n in self)
        )


def init_adapters(model_cfg: ModelConfig, cfg: LoraConfig) -> LoraAdapterSet:
    """Fresh adapters: B = 0, A ~ U(-1/sqrt(d_model), 1/sqrt(d_model))."""
    if cfg.rank > model_cfg.d_model:
        raise ConfigError(f"LoRA rank {cfg.rank} exceeds d_model {model_cfg.d_model}")
    rng = np.random.default_rng(int(cfg.seed))
    bound = 1.0 / math.sqrt(model_cfg.d_model)
    tensors = {}
    for name, shape in adapter_shapes(model_cfg, cfg).items():
        if name.endswith("lora_A"):
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return LoraAdapterSet(model_cfg, cfg, tensors)


def _check_compatible(params: ParamSet, adapters: LoraAdapterSet) -> None:
    mc, pc = adapters.model_config, params.config
    if (mc.d_model, mc.n_layers) != (pc.d_model, pc.n_layers):
        raise ConfigError("adapters were built for a different model shape")


def adapted_weights(P: Mapping[str, np.ndarray], adapters: Mapping[str, np.ndarray], scale: float) -> dict:
    """float64 weights with ``W + scale * B @ A`` on every adapted projection."""
    out = dict(P)
    for name in adapters:
        if name.endswith(".lora_A"):
            base = base_name(name)
            A = np.asarray(adapters[name], dtype=np.float64)
            B = np.asarray(adapters[f"{base}.lora_B"], dtype=np.float64)
            out[base] = out[base] + scale * (B @ A)
    return out


def lora_fine_tune(
    params: ParamSet,
    adapters: LoraAdapterSet,
    data: Sequence[KnowledgeRecord],
    vocab: Vocab,
    cfg: TrainConfig,
    *,
    history: list | None = None,
    stage: str | None = None,
) -> LoraAdapterSet:
    """Train only the adapter factors; the base ParamSet stays frozen."""
    _check_compatible(params, adapters)
    config = params.config
    seqs = encode_all(vocab, data, config.max_seq_len)
    if cfg.epochs == 0:
        return adapters
    base = params.as_float64()
    scale = adapters.config.scale

    def grad_fn(trainables, packed):
        P = adapted_weights(base, trainables, scale)
        loss, grads = loss_and_grads_raw(P, config, *packed)
        out = {}
        for name in trainables:
            if name.endswith(".lora_A"):
                b = base_name(name)
                A = trainables[name].astype(np.float64)
                B = trainables[f"{b}.lora_B"].astype(np.float64)
                dW = grads[b]
                out[name] = scale * (B.T @ dW)
                out[f"{b}.lora_B"] = scale * (dW @ A.T)
        return loss, out

    trained = run_training(dict(adapters.items()), grad_fn, seqs, config, cfg, history=history, stage=stage)
    return LoraAdapterSet(adapters.model_config, adapters.config, trained)


def merge_adapters(params: ParamSet, adapters: LoraAdapterSet) -> ParamSet:
    """Fold ``(alpha / rank) * B @ A`` into each targeted projection."""
    _check_compatible(params, adapters)
    out = dict(params.items())
    scale = adapters.config.scale
    for base in adapters.targets():
        W = params[base]
        A = adapters[f"{base}.lora_A"].astype(np.float64)
        B = adapters[f"{base}.lora_B"].astype(np.float64)
        inc = scale * (B @ A)
        if inc.shape != W.shape:
            raise ConfigError(f"adapter product for {base!r} has shape {inc.shape}, weight is {W.shape}")
        # entries with no increment are copied, keeping zero-B merges bit-exact
        out[base] = np.where(inc == 0, W, (W.astype(np.float64) + inc).astype(np.float32))
    return ParamSet(params.config, out)


def adapted_forward(params: ParamSet, adapters: LoraAdapterSet, ids: Sequence[int]) -> np.ndarray:
    """Forward pass through un-merged adapters, as used during LoRA training."""
    from .model import _check_ids, _forward

    _check_compatible(params, adapters)
    _check_ids(params.config, ids)
    P = adapted_weights(params.as_float64(), adapters, adapters.config.scale)
    logits, _ = _forward(P, params.config, np.asarray(ids, dtype=np.int64)[None, :], keep=False)
    return logits[0].astype(np.float32)
