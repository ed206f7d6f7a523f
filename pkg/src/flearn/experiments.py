"""Diagnostic studies: forgetting-rate sweeps, editing time, parameter distances, strategy tables."""
from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

from .arith import ATTENTION_FAMILIES, MLP_FAMILIES, LayerDistanceReport, apply_forgetting, layer_distances
from .data import Corpus, Vocab, build_vocab, generate_corpus
from .editors import (
    PRETRAIN_CONFIG,
    EditorStrategy,
    Strategy,
    build_original_model,
    forget_delta,
    pretrain_base,
    run_editor,
)
from .errors import InputError
from .lora import LoraConfig
from .metrics import DEFAULT_MAX_NEW, EditReport, evaluate
from .model import ModelConfig, ParamSet
from .trainer import TrainConfig

SWEEP_HEADER = ("lambda", "method", "reliability_old", "generality_old", "locality")
COMPARE_HEADER = ("strategy", "reliability", "generality", "locality", "control_pre", "control_post", "seconds")
TIMING_HEADER = ("strategy", "edit_count", "seconds")

PAPER_LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9)


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _opt(s: str):
    return None if s == "" else float(s)


def _write(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read(text: str, header) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != tuple(header):
        raise InputError(f"CSV header must be {','.join(header)}")
    return rows[1:]


# ---------------------------------------------------------------------------
# desk setup


@dataclass(frozen=True)
class DeskSetup:
    corpus: Corpus
    vocab: Vocab
    base: ParamSet
    original: ParamSet


def desk_model_config(vocab: Vocab, seed: int = 1) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), d_model=64, n_layers=2, n_heads=4, d_ff=256, max_seq_len=16, seed=seed)


def desk_setup(
    n_pairs: int = 200,
    n_background: int = 200,
    n_control: int = 40,
    seed: int = 7,
    *,
    pretrain: TrainConfig = PRETRAIN_CONFIG,
    original: TrainConfig = TrainConfig(),
) -> DeskSetup:
    """Corpus, vocabulary, pretrained base, and the original (pre-update) model."""
    corpus = generate_corpus(n_pairs, n_background, n_control, seed)
    vocab = build_vocab(corpus, max_size=512)
    cfg = desk_model_config(vocab, seed=seed + 1)
    base = pretrain_base(corpus, vocab, cfg, pretrain)
    return DeskSetup(corpus, vocab, base, build_original_model(base, corpus, vocab, original))


# ---------------------------------------------------------------------------
# forgetting-rate sweep


@dataclass(frozen=True)
class SweepRow:
    lam: float
    method: str
    reliability_old: float
    generality_old: float
    locality: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]

    def to_csv(self) -> str:
        return _write(
            SWEEP_HEADER,
            [(_num(r.lam), r.method, _num(r.reliability_old), _num(r.generality_old), _num(r.locality)) for r in self.rows],
        )

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        return cls(tuple(
            SweepRow(float(lam), method, float(rel), float(gen), float(loc))
            for lam, method, rel, gen, loc in _read(text, SWEEP_HEADER)
        ))

    def column(self, name: str, method: str | None = None) -> list[float]:
        return [getattr(r, name) for r in self.rows if method is None or r.method == method]


def lambda_sweep(
    original: ParamSet,
    corpus: Corpus,
    vocab: Vocab,
    lambdas: Sequence[float],
    method: str = "full_ft",
    train: TrainConfig = TrainConfig(),
    lora: LoraConfig = LoraConfig(),
    max_new: int = DEFAULT_MAX_NEW,
) -> SweepResult:
    """Forget-only evaluation at each rate, scored against the OLD answers.

    The old-knowledge delta is computed once and rescaled per rate; locality
    compares each forgotten model with ``original``.
    """
    if not lambdas:
        raise InputError("lambda list is empty")
    if len(set(lambdas)) != len(lambdas):
        raise InputError("lambda values must be distinct")
    delta = forget_delta(original, corpus, vocab, method, train, lora)
    records = corpus.old_eval_records()
    rows = []
    for lam in sorted(lambdas):
        forgotten = apply_forgetting(original, delta, lam)
        rep = evaluate(original, forgotten, records, vocab, max_new)
        rows.append(SweepRow(float(lam), method, rep.reliability, rep.generality, rep.locality))
    return SweepResult(tuple(rows))


# ---------------------------------------------------------------------------
# editing time


@dataclass(frozen=True)
class TimingRow:
    strategy: str
    edit_count: int
    seconds: float


@dataclass(frozen=True)
class TimingTable:
    rows: tuple[TimingRow, ...]

    def __post_init__(self):
        if any(r.seconds < 0 for r in self.rows):
            raise InputError("negative duration in timing table")

    def seconds(self, strategy: str, edit_count: int) -> float:
        for r in self.rows:
            if r.strategy == strategy and r.edit_count == edit_count:
                return r.seconds
        raise KeyError((strategy, edit_count))

    def is_monotone(self) -> bool:
        """Whether every strategy's time is non-decreasing in edit count."""
        by: dict[str, list[TimingRow]] = {}
        for r in self.rows:
            by.setdefault(r.strategy, []).append(r)
        return all(
            all(a.seconds <= b.seconds for a, b in zip(rs, rs[1:]))
            for rs in (sorted(v, key=lambda r: r.edit_count) for v in by.values())
        )

    def to_csv(self) -> str:
        return _write(TIMING_HEADER, [(r.strategy, r.edit_count, _num(r.seconds)) for r in self.rows])

    @classmethod
    def from_csv(cls, text: str) -> "TimingTable":
        return cls(tuple(TimingRow(s, int(n), float(sec)) for s, n, sec in _read(text, TIMING_HEADER)))


def time_strategies(
    strategies: Sequence[EditorStrategy],
    original: ParamSet,
    corpus: Corpus,
    vocab: Vocab,
    edit_counts: Sequence[int] = (1, 10, 100),
    repeats: int = 1,
) -> TimingTable:
    """Wall-clock editing time per strategy on the first N pairs.

    Each strategy gets one untimed warm-up edit. Measurements are interleaved
    round-robin over strategies so slow drift in machine speed is shared
    evenly; each cell is the minimum over ``repeats`` rounds, timed with the
    garbage collector paused.
    """
    if not strategies or not edit_counts:
        raise InputError("need at least one strategy and one edit count")
    if max(edit_counts) > len(corpus.pairs) or min(edit_counts) < 1:
        raise InputError(f"edit counts must lie in [1, {len(corpus.pairs)}]")
    if repeats < 1:
        raise InputError("repeats must be >= 1")
    counts = sorted(edit_counts)
    subsets = {n: corpus.head(n) for n in counts}
    for strategy in strategies:
        run_editor(strategy, original, subsets[counts[0]], vocab)
    best = {(s.name, n): float("inf") for s in strategies for n in counts}
    gc_was_enabled = gc.isenabled()
    try:
        for _ in range(repeats):
            for n in counts:
                for strategy in strategies:
                    gc.collect()
                    gc.disable()
                    t0 = time.perf_counter()
                    run_editor(strategy, original, subsets[n], vocab)
                    elapsed = time.perf_counter() - t0
                    if gc_was_enabled:
                        gc.enable()
                    best[strategy.name, n] = min(best[strategy.name, n], elapsed)
    finally:
        if gc_was_enabled:
            gc.enable()
    return TimingTable(tuple(TimingRow(s.name, n, best[s.name, n]) for s in strategies for n in counts))


# ---------------------------------------------------------------------------
# strategy comparison


@dataclass(frozen=True)
class CompareRow:
    strategy: str
    report: EditReport
    seconds: float


@dataclass(frozen=True)
class CompareTable:
    rows: tuple[CompareRow, ...]

    def __getitem__(self, strategy: str) -> EditReport:
        for r in self.rows:
            if r.strategy == strategy:
                return r.report
        raise KeyError(strategy)

    def to_csv(self) -> str:
        return _write(
            COMPARE_HEADER,
            [
                (
                    r.strategy,
                    _num(r.report.reliability),
                    _num(r.report.generality),
                    _num(r.report.locality),
                    _num(r.report.control_accuracy_pre),
                    _num(r.report.control_accuracy_post),
                    _num(r.seconds),
                )
                for r in self.rows
            ],
        )

    @classmethod
    def from_csv(cls, text: str, n_records: int = 1) -> "CompareTable":
        rows = []
        for name, rel, gen, loc, cpre, cpost, sec in _read(text, COMPARE_HEADER):
            rep = EditReport(float(rel), float(gen), float(loc), _opt(cpre), _opt(cpost), n_records)
            rows.append(CompareRow(name, rep, float(sec)))
        return cls(tuple(rows))


def compare_strategies(
    original: ParamSet,
    corpus: Corpus,
    vocab: Vocab,
    strategies: Iterable[EditorStrategy],
    max_new: int = DEFAULT_MAX_NEW,
) -> CompareTable:
    """Edit with every strategy and score each against ``original``.

    The first row, ``original``, scores the unedited model.
    """
    records = corpus.eval_records
    rows = [CompareRow("original", evaluate(original, original, records, vocab, max_new, corpus.control), 0.0)]
    for strategy in strategies:
        edited = run_editor(strategy, original, corpus, vocab)
        rep = evaluate(original, edited.params, records, vocab, max_new, corpus.control)
        rows.append(CompareRow(strategy.name, rep, edited.seconds))
    return CompareTable(tuple(rows))


def default_strategies(seed: int = 0, train: TrainConfig | None = None) -> list[EditorStrategy]:
    return [EditorStrategy.default(k, seed=seed, train=train) for k in Strategy]


# ---------------------------------------------------------------------------
# parameter-distance analysis


def forgetting_distances(original: ParamSet, corpus: Corpus, vocab: Vocab, method: str = "full_ft", lam: float = 1.0,
                         train: TrainConfig = TrainConfig(), lora: LoraConfig = LoraConfig()) -> LayerDistanceReport:
    """Per-tensor distances between ``original`` and its forgotten version."""
    delta = forget_delta(original, corpus, vocab, method, train, lora)
    return layer_distances(apply_forgetting(original, delta, lam), original)


def family_summary(report: LayerDistanceReport) -> dict[str, float]:
    return {
        "mlp_mean": report.family_mean(MLP_FAMILIES),
        "attention_mean": report.family_mean(ATTENTION_FAMILIES),
    }
