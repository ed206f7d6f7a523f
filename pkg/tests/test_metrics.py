import pytest

from flearn.data import EvalRecord, KnowledgeRecord, Vocab
from flearn.errors import InputError
from flearn.metrics import EditReport, evaluate, exact_match_accuracy, fill_locality_answers
from flearn.model import ModelConfig, init_model
from flearn.trainer import TrainConfig, fine_tune

PROMPT = "What university did Watts Humphrey attend?"
REPHRASE = "What university did Watts Humphrey take part in?"
LOC = "who played desmond doss father in hacksaw ridge"
FACTS = [
    KnowledgeRecord(PROMPT, "University of Michigan"),
    KnowledgeRecord(REPHRASE, "Trinity College"),
    KnowledgeRecord(LOC, "Hugo Weaving"),
    KnowledgeRecord("where is the eiffel tower", "paris"),
]


@pytest.fixture(scope="module")
def memorized():
    words = sorted({w for r in FACTS for w in (r.prompt + " " + r.output).lower().split()} | {"rome"})
    vocab = Vocab(words)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=32, n_layers=1, n_heads=2, d_ff=64, max_seq_len=16, seed=0)
    pre = init_model(cfg)
    post = fine_tune(pre, FACTS, vocab, TrainConfig(learning_rate=1e-2, epochs=60, batch_size=2, grad_accum_steps=1))
    assert exact_match_accuracy(post, FACTS, vocab) == 100.0
    return vocab, pre, post


def test_reliability_counts_prompt_and_generality_counts_rephrase(memorized):
    vocab, _, post = memorized
    rec = EvalRecord(PROMPT, "University of Michigan", REPHRASE, LOC)
    rep = evaluate(post, post, [rec], vocab)
    assert rep.reliability == 100.0
    assert rep.generality == 0.0
    assert rep.locality == 100.0
    assert rep.control_accuracy_pre is None


def test_half_correct_is_fifty(memorized):
    vocab, _, post = memorized
    recs = [
        EvalRecord(PROMPT, "University of Michigan", REPHRASE, LOC),
        EvalRecord("where is the eiffel tower", "rome", "where is the eiffel tower located", LOC),
    ]
    assert evaluate(post, post, recs, vocab).reliability == 50.0


def test_locality_compares_with_pre_model(memorized):
    vocab, pre, post = memorized
    rec = EvalRecord(PROMPT, "University of Michigan", REPHRASE, LOC)
    assert evaluate(pre, post, [rec], vocab).locality == 0.0
    assert evaluate(pre, pre, [rec], vocab).locality == 100.0
    (filled,) = fill_locality_answers(post, [rec], vocab)
    assert filled.locality_answer_pre == "hugo weaving"


def test_permutation_invariance_and_control(memorized):
    vocab, pre, post = memorized
    recs = [
        EvalRecord(PROMPT, "University of Michigan", REPHRASE, LOC),
        EvalRecord("where is the eiffel tower", "paris", "eiffel tower is where", PROMPT),
        EvalRecord(LOC, "Hugo Weaving", "who played the father of desmond doss", "where is the eiffel tower"),
    ]
    a = evaluate(pre, post, recs, vocab, control=FACTS[:2])
    b = evaluate(pre, post, recs[::-1], vocab, control=FACTS[:2][::-1])
    assert a == b
    assert a.control_accuracy_post == 100.0
    assert a == evaluate(pre, post, recs, vocab, control=FACTS[:2])


def test_report_bounds_and_errors(memorized):
    vocab, pre, post = memorized
    with pytest.raises(InputError):
        EditReport(101.0, 0, 0, None, None, 1)
    with pytest.raises(InputError):
        EditReport(1.0, 0, 0, None, None, 0)
    with pytest.raises(InputError):
        evaluate(pre, post, [], vocab)
    with pytest.raises(InputError):
        exact_match_accuracy(post, [], vocab)
