import time

import numpy as np
import pytest

from flearn.arith import apply_forgetting, extract_delta
from flearn.editors import (
    DEFAULT_RATES,
    EditorStrategy,
    Strategy,
    build_original_model,
    run_editor,
)
from flearn.errors import ConfigError
from flearn.lora import init_adapters, lora_fine_tune, merge_adapters
from flearn.trainer import FtcConfig, TrainConfig, fine_tune, fine_tune_constrained

TRAIN = TrainConfig(epochs=2)


def strat(kind, seed=4, **kw):
    return EditorStrategy.default(kind, seed=seed, train=TRAIN, **kw)


def test_strategy_validation():
    with pytest.raises(ConfigError):
        EditorStrategy(Strategy.F_FT, TRAIN)
    with pytest.raises(ConfigError):
        EditorStrategy(Strategy.FULL_FT, TRAIN, rate=strat("f_ft").rate)
    with pytest.raises(ConfigError):
        EditorStrategy(Strategy.LORA, TRAIN)
    with pytest.raises(ConfigError):
        EditorStrategy(Strategy.FT_C, TRAIN)
    with pytest.raises(ConfigError):
        strat("f_ft", rate=-1.0)
    assert float(strat("f_lora_ft").rate) == DEFAULT_RATES[Strategy.F_LORA_FT] == 3.0
    assert strat("full_ft").rate is None


@pytest.mark.parametrize("forgetting, plain", [("f_ft", "full_ft"), ("f_lora_ft", "full_ft"), ("f_lora", "lora")])
def test_lambda_zero_collapses_to_plain_strategy(small, forgetting, plain):
    corpus, vocab, P = small
    a = run_editor(strat(forgetting, rate=0.0), P, corpus, vocab)
    b = run_editor(strat(plain), P, corpus, vocab)
    assert a.intermediate.bit_equal(P)
    assert a.params.bit_equal(b.params)


def test_f_ft_is_its_composition(small):
    corpus, vocab, P = small
    s = strat("f_ft", rate=0.3)
    tuned = fine_tune(P, corpus.old_records, vocab, s.forget_train)
    theta = apply_forgetting(P, extract_delta(tuned, P), s.rate)
    expect = fine_tune(theta, corpus.new_records, vocab, s.train)
    got = run_editor(s, P, corpus, vocab)
    assert got.intermediate.bit_equal(theta)
    assert got.params.bit_equal(expect)


def test_f_lora_ft_is_its_composition(small):
    corpus, vocab, P = small
    s = strat("f_lora_ft")
    trained = lora_fine_tune(P, init_adapters(P.config, s.lora), corpus.old_records, vocab, s.forget_train)
    delta = extract_delta(merge_adapters(P, trained), P)
    theta = apply_forgetting(P, delta, s.rate)
    expect = fine_tune(theta, corpus.new_records, vocab, s.train)
    assert run_editor(s, P, corpus, vocab).params.bit_equal(expect)


def test_f_lora_learns_with_fresh_adapters(small):
    corpus, vocab, P = small
    s = strat("f_lora")
    trained = lora_fine_tune(P, init_adapters(P.config, s.lora), corpus.old_records, vocab, s.forget_train)
    theta = apply_forgetting(P, extract_delta(merge_adapters(P, trained), P), s.rate)
    learned = lora_fine_tune(theta, init_adapters(P.config, s.lora), corpus.new_records, vocab, s.train)
    assert run_editor(s, P, corpus, vocab).params.bit_equal(merge_adapters(theta, learned))


def test_ft_c_strategy_matches_trainer(small):
    corpus, vocab, P = small
    s = strat("ft_c", ftc=FtcConfig(epsilon=1e-3))
    out = run_editor(s, P, corpus, vocab)
    assert out.intermediate is None
    assert out.params.bit_equal(fine_tune_constrained(P, corpus.new_records, vocab, s.ftc))


def test_editors_do_not_mutate_original(small):
    corpus, vocab, P = small
    snap = {n: P[n].copy() for n in P}
    for kind in Strategy:
        run_editor(strat(kind), P, corpus, vocab)
    assert all(np.array_equal(snap[n], P[n]) for n in P)


def test_timings_are_additive(small):
    corpus, vocab, P = small
    t0 = time.perf_counter()
    out = run_editor(strat("f_lora_ft"), P, corpus, vocab)
    wall = time.perf_counter() - t0
    assert set(out.timings) >= {"forget_train", "forget_merge", "forget_delta", "forget_apply", "learn_train"}
    assert all(v >= 0 for v in out.timings.values())
    assert out.seconds <= wall
    assert out.seconds >= 0.5 * wall


def test_build_original_zero_epochs_and_determinism(small):
    corpus, vocab, P = small
    assert build_original_model(P, corpus, vocab, TrainConfig(epochs=0)).bit_equal(P)
    a = build_original_model(P, corpus, vocab, TrainConfig(epochs=1))
    assert a.bit_equal(build_original_model(P, corpus, vocab, TrainConfig(epochs=1)))
