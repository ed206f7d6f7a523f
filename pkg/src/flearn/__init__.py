"""Forget-then-learn knowledge updating for a small numpy transformer."""

__version__ = "0.1.0"

from .arith import (
    ForgettingRate,
    LayerDistanceReport,
    TaskVector,
    apply_forgetting,
    extract_delta,
    layer_distances,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    Corpus,
    EvalRecord,
    KnowledgePair,
    KnowledgeRecord,
    Vocab,
    build_vocab,
    encode,
    generate_corpus,
    load_corpus,
    parse_records,
)
from .editors import EditedModel, EditorStrategy, Strategy, build_original_model, pretrain_base, run_editor
from .errors import CapacityError, ConfigError, DivergenceError, FlearnError, FormatError, InputError, ParseError
from .lora import LoraAdapterSet, LoraConfig, init_adapters, lora_fine_tune, merge_adapters
from .metrics import EditReport, evaluate, exact_match_accuracy
from .model import GradSet, ModelConfig, ParamSet, TokenSeq, forward, greedy_decode, init_model, loss_and_grads
from .trainer import FtcConfig, TrainConfig, fine_tune, fine_tune_constrained, gradient_ascent_forget
