import io
import json

import pytest

from flearn.data import (
    EOS,
    SEP,
    UNK,
    Corpus,
    EvalRecord,
    KnowledgePair,
    KnowledgeRecord,
    Vocab,
    answer_text,
    build_vocab,
    corpus_files,
    dump_records,
    encode,
    generate_corpus,
    load_corpus,
    parse_records,
    tokenize,
)
from flearn.errors import CapacityError, InputError, ParseError

WATTS = {
    "subject": "Watts Humphrey",
    "src": "What university did Watts Humphrey attend?",
    "pred": "Trinity College",
    "rephrase": "What university did Watts Humphrey take part in?",
    "alt": "University of Michigan",
    "answers": ["University of Michigan"],
    "loc": "nq question: who played desmond doss father in hacksaw ridge",
    "loc-ans": "Hugo Weaving",
    "cond": "Trinity College >> University of Michigan || What university did Watts Humphrey attend?",
}
MARL = {"instruction": "What city did Marl Young live when he died?", "input": "", "output": "New Orleans"}


def test_zsre_record_maps_fields():
    (rec,) = parse_records(json.dumps(WATTS).encode() + b"\n", format="zsre")
    assert isinstance(rec, EvalRecord)
    assert rec.prompt == "What university did Watts Humphrey attend?"
    assert rec.target == "University of Michigan"
    assert rec.rephrase == "What university did Watts Humphrey take part in?"
    assert rec.locality_prompt == WATTS["loc"]
    assert rec.metadata["loc-ans"] == "Hugo Weaving"
    assert rec.metadata["answers"] == ["University of Michigan"]


def test_zsre_round_trip_preserves_metadata():
    (rec,) = parse_records(json.dumps(WATTS), format="zsre")
    assert json.loads(dump_records([rec], format="zsre")) == WATTS


def test_instruction_record():
    (rec,) = parse_records(io.BytesIO(json.dumps(MARL).encode()), format="instruction")
    assert rec == KnowledgeRecord("What city did Marl Young live when he died?", "New Orleans", "")
    assert json.loads(dump_records([rec])) == MARL


def test_missing_output_names_field_and_line():
    text = json.dumps(MARL) + "\n\n" + json.dumps({"instruction": "x", "input": ""}) + "\n"
    with pytest.raises(ParseError) as info:
        parse_records(text)
    assert info.value.field == "output"
    assert info.value.line == 3
    assert "output" in str(info.value)


def test_malformed_json_is_parse_error():
    with pytest.raises(ParseError) as info:
        parse_records('{"instruction": "a",\n')
    assert info.value.line == 1
    with pytest.raises(ParseError):
        parse_records("[1, 2]\n")


def test_zsre_missing_loc():
    bad = dict(WATTS)
    del bad["loc"]
    with pytest.raises(ParseError) as info:
        parse_records(json.dumps(bad), format="zsre")
    assert info.value.field == "loc"


def test_record_invariants():
    with pytest.raises(InputError):
        KnowledgeRecord("", "x")
    with pytest.raises(InputError):
        KnowledgeRecord("q", "  ")
    with pytest.raises(InputError):
        EvalRecord("p", "t", "p", "l")
    old, new = KnowledgeRecord("q", "a"), KnowledgeRecord("q", "a")
    with pytest.raises(InputError):
        KnowledgePair(old, new, EvalRecord("q", "a", "r", "l"))


def test_marl_young_layout():
    rec = KnowledgeRecord(MARL["instruction"], MARL["output"])
    vocab = Vocab.build([rec.prompt, rec.output])
    seq = encode(vocab, rec)
    n_instr = len(tokenize(MARL["instruction"]))
    assert seq.answer_start == 1 + n_instr
    assert seq.ids[n_instr] == SEP
    assert seq.ids[-1] == EOS
    assert answer_text(vocab, seq) == "new orleans"


def test_unknown_word_maps_to_unk():
    vocab = Vocab(["what", "is", "x"])
    seq = encode(vocab, KnowledgeRecord("what is zebra", "x"))
    assert seq.ids[2] == UNK
    assert seq.ids[:2] == (vocab.stoi["what"], vocab.stoi["is"])


def test_encode_rejects_overlong():
    vocab = Vocab(["a"])
    with pytest.raises(InputError):
        encode(vocab, KnowledgeRecord("a a a a a", "a"), max_seq_len=6)


def test_vocab_dump_round_trip_and_duplicates():
    v = Vocab.build(["b a c", "a d"])
    assert v.itos[4:] == ["a", "b", "c", "d"]
    assert Vocab.loads(v.dumps()) == v
    with pytest.raises(InputError):
        Vocab(["a", "a"])
    with pytest.raises(CapacityError):
        Vocab.build(["a b c"], max_size=6)


def test_generate_is_deterministic_and_seeded():
    a = generate_corpus(30, 20, 5, seed=3)
    assert a == generate_corpus(30, 20, 5, seed=3)
    assert a != generate_corpus(30, 20, 5, seed=4)


def test_generated_corpus_invariants():
    c = generate_corpus(200, 200, 40, seed=7)
    assert len(c.pairs) == 200 and len(c.background) == 200 and len(c.control) == 40
    edited = {p.old.prompt for p in c.pairs}
    assert len(edited) == 200
    assert not edited & {r.prompt for r in c.background}
    assert not edited & {r.prompt for r in c.control}
    bg = {r.prompt: r.output for r in c.background}
    for p in c.pairs:
        assert p.old.output != p.new.output
        assert p.eval.target == p.new.output
        assert p.eval.rephrase != p.eval.prompt
        assert bg[p.eval.locality_prompt] != p.eval.target
    vocab = build_vocab(c, max_size=512)
    for r in [*c.old_records, *c.new_records, *c.background, *c.control]:
        seq = encode(vocab, r, max_seq_len=16)
        assert UNK not in seq.ids
        assert answer_text(vocab, seq) == r.output


def test_multi_token_answers():
    c = generate_corpus(5, 5, 2, seed=1, multi_token=True)
    assert all(len(p.new.output.split()) == 2 for p in c.pairs)


def test_capacity_and_count_errors():
    with pytest.raises(CapacityError):
        generate_corpus(700, 200, 5, seed=0)
    with pytest.raises(CapacityError):
        generate_corpus(5, 5, 5, seed=0, n_subjects=10**6)
    with pytest.raises(InputError):
        generate_corpus(0, 5, 5, seed=0)


def test_corpus_rejects_overlap():
    c = generate_corpus(3, 3, 2, seed=0)
    with pytest.raises(InputError):
        Corpus(c.pairs, c.background + (c.pairs[0].old,), c.control)


def test_corpus_directory_round_trip(tmp_path):
    c = generate_corpus(12, 10, 4, seed=5)
    vocab = build_vocab(c)
    for name, text in corpus_files(c, vocab).items():
        (tmp_path / name).write_text(text)
    c2, v2 = load_corpus(tmp_path)
    assert c2 == c
    assert v2 == vocab
    assert [p.eval.metadata for p in c2.pairs] == [p.eval.metadata for p in c.pairs]


def test_load_corpus_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_corpus(tmp_path)
