"""End-to-end knowledge-updating strategies: baselines and forget-before-learn variants."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

from .arith import ForgettingRate, apply_forgetting, extract_delta
from .data import Corpus, Vocab, pretraining_records
from .errors import ConfigError, DivergenceError
from .lora import LoraConfig, init_adapters, lora_fine_tune, merge_adapters
from .metrics import exact_match_accuracy
from .model import ModelConfig, ParamSet, init_model
from .trainer import FtcConfig, TrainConfig, fine_tune, fine_tune_constrained, split_seed


class Strategy(str, Enum):
    FULL_FT = "full_ft"
    LORA = "lora"
    FT_C = "ft_c"
    F_FT = "f_ft"
    F_LORA = "f_lora"
    F_LORA_FT = "f_lora_ft"

    @property
    def forgets(self) -> bool:
        return self in (Strategy.F_FT, Strategy.F_LORA, Strategy.F_LORA_FT)

    @property
    def uses_lora(self) -> bool:
        return self in (Strategy.LORA, Strategy.F_LORA, Strategy.F_LORA_FT)


# forgetting rates tuned for the zsRE / LLaMA2-7B runs
DEFAULT_RATES = {Strategy.F_FT: 0.3, Strategy.F_LORA: 0.7, Strategy.F_LORA_FT: 3.0}

STAGE_LEARN, STAGE_FORGET = 1, 0


@dataclass(frozen=True)
class EditorStrategy:
    kind: Strategy
    train: TrainConfig
    rate: ForgettingRate | None = None
    forget_train: TrainConfig | None = None
    lora: LoraConfig | None = None
    ftc: FtcConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Strategy(self.kind))
        if self.kind.forgets != (self.rate is not None):
            raise ConfigError(f"{self.kind.value}: rate must be set iff the strategy forgets")
        if self.kind.forgets and self.forget_train is None:
            raise ConfigError(f"{self.kind.value}: forget_train config required")
        if self.kind.uses_lora and self.lora is None:
            raise ConfigError(f"{self.kind.value}: lora config required")
        if self.kind is Strategy.FT_C and self.ftc is None:
            raise ConfigError("ft_c: ftc config required")

    @property
    def name(self) -> str:
        return self.kind.value

    @classmethod
    def default(
        cls,
        kind: Strategy | str,
        seed: int = 0,
        *,
        rate: float | None = None,
        train: TrainConfig | None = None,
        lora: LoraConfig | None = None,
        ftc: FtcConfig | None = None,
    ) -> "EditorStrategy":
        """Strategy with default sub-configs and stage seeds split from ``seed``.

        The learning stage always gets ``split_seed(seed, STAGE_LEARN)`` and the
        forgetting stage ``split_seed(seed, STAGE_FORGET)``, so strategies built
        from one seed share their learning-stage randomness.
        """
        kind = Strategy(kind)
        base = train or TrainConfig()
        learn = replace(base, seed=split_seed(seed, STAGE_LEARN))
        forget = replace(base, seed=split_seed(seed, STAGE_FORGET)) if kind.forgets else None
        if kind.forgets:
            rate = DEFAULT_RATES[kind] if rate is None else rate
            fr = ForgettingRate(rate)
        else:
            fr = None
        return cls(
            kind=kind,
            train=learn,
            rate=fr,
            forget_train=forget,
            lora=(lora or LoraConfig(seed=split_seed(seed, 2))) if kind.uses_lora else None,
            ftc=(ftc or FtcConfig()) if kind is Strategy.FT_C else None,
        )


@dataclass(frozen=True)
class EditedModel:
    params: ParamSet
    strategy: EditorStrategy
    intermediate: ParamSet | None = None
    timings: dict = field(default_factory=dict)

    @property
    def seconds(self) -> float:
        return sum(self.timings.values())


PRETRAIN_CONFIG = TrainConfig(learning_rate=2e-3, epochs=60)


def pretrain_base(
    corpus: Corpus,
    vocab: Vocab,
    model_cfg: ModelConfig,
    cfg: TrainConfig = PRETRAIN_CONFIG,
    target_accuracy: float | None = 95.0,
) -> ParamSet:
    """Fresh model trained on background, control, and both phrasings of old facts.

    Training runs for at most ``cfg.epochs`` and stops after the first epoch at
    which both old-fact and background-fact exact-match accuracy reach
    ``target_accuracy`` percent (None trains the full budget).
    """
    until = None
    if target_accuracy is not None:
        def until(p: ParamSet) -> bool:
            return (
                exact_match_accuracy(p, corpus.old_records, vocab) >= target_accuracy
                and exact_match_accuracy(p, corpus.background, vocab) >= target_accuracy
            )
    return fine_tune(init_model(model_cfg), pretraining_records(corpus), vocab, cfg, stage="pretrain", until=until)


def build_original_model(base: ParamSet, corpus: Corpus, vocab: Vocab, cfg: TrainConfig) -> ParamSet:
    """The pre-update model: ``base`` fine-tuned on the old facts for ``cfg.epochs``."""
    return fine_tune(base, corpus.old_records, vocab, cfg, stage="original")


def _timed(timings: dict, label: str, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kw)
    except DivergenceError as exc:
        exc.stage = exc.stage or label
        raise
    finally:
        timings[label] = time.perf_counter() - t0


def forget_delta(original: ParamSet, corpus: Corpus, vocab: Vocab, method: str, train: TrainConfig, lora: LoraConfig | None = None, timings: dict | None = None):
    """Old-knowledge task vector from full or LoRA fine-tuning on the old facts."""
    timings = {} if timings is None else timings
    old = corpus.old_records
    if method == "full_ft":
        tuned = _timed(timings, "forget_train", fine_tune, original, old, vocab, train, stage="forget_train")
    elif method == "lora":
        if lora is None:
            raise ConfigError("LoRA forgetting needs a LoraConfig")
        adapters = init_adapters(original.config, lora)
        trained = _timed(timings, "forget_train", lora_fine_tune, original, adapters, old, vocab, train, stage="forget_train")
        tuned = _timed(timings, "forget_merge", merge_adapters, original, trained)
    else:
        raise ConfigError(f"unknown forgetting method {method!r}")
    return _timed(timings, "forget_delta", extract_delta, tuned, original, source=f"{method}:old")


def run_editor(strategy: EditorStrategy, original: ParamSet, corpus: Corpus, vocab: Vocab) -> EditedModel:
    """Apply one strategy to ``original`` using the corpus's new facts."""
    timings: dict[str, float] = {}
    kind = strategy.kind
    new = corpus.new_records
    intermediate = None
    theta = original
    if kind.forgets:
        method = "full_ft" if kind is Strategy.F_FT else "lora"
        delta = forget_delta(original, corpus, vocab, method, strategy.forget_train, strategy.lora, timings)
        theta = _timed(timings, "forget_apply", apply_forgetting, original, delta, strategy.rate)
        intermediate = theta
    if kind in (Strategy.FULL_FT, Strategy.F_FT, Strategy.F_LORA_FT):
        post = _timed(timings, "learn_train", fine_tune, theta, new, vocab, strategy.train, stage="learn_train")
    elif kind in (Strategy.LORA, Strategy.F_LORA):
        adapters = init_adapters(theta.config, strategy.lora)
        trained = _timed(timings, "learn_train", lora_fine_tune, theta, adapters, new, vocab, strategy.train, stage="learn_train")
        post = _timed(timings, "learn_merge", merge_adapters, theta, trained)
    else:
        post = _timed(timings, "learn_train", fine_tune_constrained, theta, new, vocab, strategy.ftc)
    return EditedModel(post, strategy, intermediate, timings)
