"""Knowledge records, JSON-lines ingestion, synthetic fact corpora, tokenization."""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import CapacityError, InputError, ParseError
from .model import TokenSeq

PAD, EOS, UNK, SEP = 0, 1, 2, 3
RESERVED = ("<pad>", "<eos>", "<unk>", "<sep>")


@dataclass(frozen=True)
class KnowledgeRecord:
    instruction: str
    output: str
    input: str = ""

    def __post_init__(self):
        if not self.instruction.strip():
            raise InputError("KnowledgeRecord.instruction is empty")
        if not self.output.strip():
            raise InputError("KnowledgeRecord.output is empty")

    @property
    def prompt(self) -> str:
        return f"{self.instruction} {self.input}" if self.input else self.instruction

    def to_json(self) -> dict:
        return {"instruction": self.instruction, "input": self.input, "output": self.output}


@dataclass(frozen=True)
class EvalRecord:
    prompt: str
    target: str
    rephrase: str
    locality_prompt: str
    locality_answer_pre: str = ""
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        for name in ("prompt", "target", "rephrase", "locality_prompt"):
            if not getattr(self, name).strip():
                raise InputError(f"EvalRecord.{name} is empty")
        if self.rephrase == self.prompt:
            raise InputError("EvalRecord.rephrase must differ from prompt")

    def to_zsre(self, old_answer: str = "", loc_answer: str = "", subject: str = "") -> dict:
        meta = dict(self.metadata)
        row = {
            "subject": meta.pop("subject", subject),
            "src": self.prompt,
            "pred": meta.pop("pred", old_answer),
            "rephrase": self.rephrase,
            "alt": self.target,
            "answers": meta.pop("answers", [self.target]),
            "loc": self.locality_prompt,
            "loc-ans": meta.pop("loc-ans", loc_answer),
        }
        row["cond"] = meta.pop("cond", f"{row['pred']} >> {self.target} || {self.prompt}")
        row.update(meta)
        return row


@dataclass(frozen=True)
class KnowledgePair:
    old: KnowledgeRecord
    new: KnowledgeRecord
    eval: EvalRecord

    def __post_init__(self):
        if self.old.instruction != self.new.instruction:
            raise InputError("old and new records must share an instruction")
        if self.old.output == self.new.output:
            raise InputError(f"old and new outputs coincide: {self.old.output!r}")


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[KnowledgePair, ...]
    background: tuple[KnowledgeRecord, ...]
    control: tuple[KnowledgeRecord, ...]
    # rephrased copies of old/background facts used only for base pretraining
    paraphrases: tuple[KnowledgeRecord, ...] = ()

    def __post_init__(self):
        edited = {p.old.prompt for p in self.pairs}
        bg = {r.prompt for r in self.background}
        ctl = {r.prompt for r in self.control}
        if edited & bg or edited & ctl or bg & ctl:
            raise InputError("corpus prompt sets overlap")

    @property
    def old_records(self) -> list[KnowledgeRecord]:
        return [p.old for p in self.pairs]

    @property
    def new_records(self) -> list[KnowledgeRecord]:
        return [p.new for p in self.pairs]

    @property
    def eval_records(self) -> list[EvalRecord]:
        return [p.eval for p in self.pairs]

    def old_eval_records(self) -> list[EvalRecord]:
        """Eval records whose target is the old answer (forgetting studies)."""
        return [replace(p.eval, target=p.old.output) for p in self.pairs]

    def head(self, n: int) -> "Corpus":
        return replace(self, pairs=self.pairs[:n])

    def texts(self) -> Iterator[str]:
        for p in self.pairs:
            yield from (p.old.prompt, p.old.output, p.new.output, p.eval.rephrase, p.eval.locality_prompt)
        for r in (*self.background, *self.control, *self.paraphrases):
            yield from (r.prompt, r.output)


# ---------------------------------------------------------------------------
# tokenization


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Word-level vocabulary with a fixed reserved block (PAD, EOS, UNK, SEP)."""

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(RESERVED)}
        for w in words:
            if w in self.stoi:
                raise InputError(f"duplicate vocabulary entry {w!r}")
            self.stoi[w] = len(self.itos)
            self.itos.append(w)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Vocab":
        words = sorted({w for t in texts for w in tokenize(t)} - set(RESERVED))
        vocab = cls(words)
        if max_size is not None and len(vocab) > max_size:
            raise CapacityError(f"vocabulary needs {len(vocab)} entries, limit is {max_size}")
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def ids(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def prompt_ids(self, text: str) -> list[int]:
        """Decoder prompt: prompt tokens followed by SEP."""
        return self.ids(text) + [SEP]

    def dumps(self) -> str:
        return "".join(w + "\n" for w in self.itos[len(RESERVED):])

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        return cls(line for line in text.splitlines() if line)


def encode(vocab: Vocab, record: KnowledgeRecord, max_seq_len: int | None = None) -> TokenSeq:
    """``prompt ++ SEP ++ output ++ EOS`` with answer_start at the first output token."""
    prompt = vocab.ids(record.prompt)
    ids = prompt + [SEP] + vocab.ids(record.output) + [EOS]
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise InputError(f"encoded record has {len(ids)} tokens, max_seq_len={max_seq_len}: {record.prompt!r}")
    return TokenSeq(tuple(ids), len(prompt) + 1)


def answer_text(vocab: Vocab, seq: TokenSeq) -> str:
    ids = [i for i in seq.ids[seq.answer_start:] if i != EOS]
    return vocab.decode(ids)


# ---------------------------------------------------------------------------
# JSON-lines ingestion

_INSTRUCTION_FIELDS = ("instruction", "input", "output")
_ZSRE_FIELDS = ("src", "alt", "rephrase", "loc")
_ZSRE_CONSUMED = {"src": "prompt", "alt": "target", "rephrase": "rephrase", "loc": "locality_prompt"}


def parse_records(stream: IO[bytes] | IO[str] | bytes | str, format: str = "instruction"):
    """Parse newline-delimited JSON objects into records.

    ``format="instruction"`` yields :class:`KnowledgeRecord` from
    instruction/input/output objects. ``format="zsre"`` yields
    :class:`EvalRecord`, mapping src/alt/rephrase/loc and keeping every other
    field as opaque metadata. Blank lines are skipped.
    """
    if format not in ("instruction", "zsre"):
        raise InputError(f"unknown record format {format!r}")
    if isinstance(stream, (bytes, str)):
        stream = io.BytesIO(stream.encode() if isinstance(stream, str) else stream)
    records = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed record: {exc.msg}", line=lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("record is not a JSON object", line=lineno)
        required = _INSTRUCTION_FIELDS if format == "instruction" else _ZSRE_FIELDS
        for name in required:
            if name not in obj:
                if format == "instruction" and name == "input":
                    continue
                raise ParseError(f"missing required field {name!r}", line=lineno, field=name)
            if not isinstance(obj[name], str):
                raise ParseError(f"field {name!r} must be a string", line=lineno, field=name)
        try:
            if format == "instruction":
                records.append(
                    KnowledgeRecord(obj["instruction"], obj["output"], obj.get("input", ""))
                )
            else:
                meta = {k: v for k, v in obj.items() if k not in _ZSRE_CONSUMED}
                records.append(
                    EvalRecord(
                        prompt=obj["src"],
                        target=obj["alt"],
                        rephrase=obj["rephrase"],
                        locality_prompt=obj["loc"],
                        metadata=meta,
                    )
                )
        except InputError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return records


def dump_records(records: Iterable, format: str = "instruction") -> str:
    lines = []
    for r in records:
        obj = r.to_json() if format == "instruction" else r.to_zsre()
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# synthetic corpora

# (canonical template, rephrase template, object pool)
RELATIONS = (
    (
        "what city did {s} live in when they died ?",
        "in which city did {s} die ?",
        ("paris", "london", "tokyo", "cairo", "lima", "oslo", "rome", "berlin",
         "madrid", "vienna", "dublin", "prague", "lisbon", "athens", "warsaw", "sydney"),
    ),
    (
        "what university did {s} attend ?",
        "what university did {s} take part in ?",
        ("oxford", "harvard", "yale", "stanford", "princeton", "cornell", "berkeley", "caltech",
         "columbia", "michigan", "duke", "brown", "rice", "emory", "purdue", "toronto"),
    ),
    (
        "what language does {s} speak ?",
        "which language is spoken by {s} ?",
        ("french", "german", "spanish", "italian", "dutch", "polish", "greek", "turkish",
         "arabic", "hindi", "korean", "swahili", "finnish", "danish", "czech", "thai"),
    ),
    (
        "what is the occupation of {s} ?",
        "what does {s} do for a living ?",
        ("painter", "lawyer", "surgeon", "pilot", "chemist", "poet", "architect", "banker",
         "sculptor", "farmer", "actor", "dentist", "engineer", "journalist", "nurse", "chef"),
    ),
    (
        "which team does {s} play for ?",
        "for which club is {s} a player ?",
        ("falcons", "eagles", "tigers", "wolves", "sharks", "bears", "hawks", "lions",
         "ravens", "bulls", "jets", "kings", "giants", "rockets", "comets", "titans"),
    ),
    (
        "what instrument does {s} play ?",
        "which instrument is played by {s} ?",
        ("piano", "violin", "cello", "flute", "guitar", "trumpet", "harp", "drums",
         "clarinet", "oboe", "banjo", "organ", "saxophone", "tuba", "viola", "mandolin"),
    ),
    (
        "in which country was {s} born ?",
        "what is the birth country of {s} ?",
        ("france", "japan", "brazil", "canada", "egypt", "india", "norway", "peru",
         "kenya", "chile", "mexico", "ghana", "nepal", "iceland", "vietnam", "morocco"),
    ),
    (
        "which company employs {s} ?",
        "who is the employer of {s} ?",
        ("acme", "globex", "initech", "umbrella", "hooli", "stark", "wayne", "cyberdyne",
         "tyrell", "soylent", "wonka", "vandelay", "gringotts", "oscorp", "aperture", "massive"),
    ),
)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")
_CODAS = ("", "n", "r", "s", "l")

N_CONTROL_NUMBERS = 40
DEFAULT_SUBJECTS = 100


def _subject_pool() -> list[str]:
    names = []
    for o1 in _ONSETS:
        for v1 in _VOWELS:
            for o2 in _ONSETS[::3]:
                for v2 in _VOWELS[::2]:
                    names.append(f"{o1}{v1}{o2}{v2}")
    return names


def _control_records(n: int, rng: np.random.Generator) -> list[KnowledgeRecord]:
    """Arithmetic pattern completions: ``count 3 4 5`` -> ``6``."""
    space = []
    for start in range(N_CONTROL_NUMBERS - 3):
        space.append(("count", start, 1))
    for start in range(3, N_CONTROL_NUMBERS):
        space.append(("count down", start, -1))
    if n > len(space):
        raise CapacityError(f"requested {n} control records, capacity is {len(space)}")
    picks = rng.choice(len(space), size=n, replace=False)
    out = []
    for i in sorted(picks):
        word, start, step = space[i]
        seq = [start + step * j for j in range(3)]
        out.append(KnowledgeRecord(f"{word} {' '.join(map(str, seq))}", str(start + 3 * step)))
    return out


def corpus_capacity(n_subjects: int | None = None) -> int:
    n = len(_subject_pool()) if n_subjects is None else n_subjects
    return n * len(RELATIONS)


def generate_corpus(
    n_pairs: int,
    n_background: int,
    n_control: int,
    seed: int,
    *,
    n_subjects: int | None = DEFAULT_SUBJECTS,
    multi_token: bool = False,
) -> Corpus:
    """Deterministic synthetic subject-relation-object corpus.

    Each (subject, relation) slot is used at most once, so edited, background
    and control prompts never collide. Every edited pair gets two distinct
    objects from its relation's pool; the rephrase renders the same triple
    through the relation's second template. Each pair's locality probe is a
    background prompt whose answer differs from the new target.

    With ``multi_token=True`` objects are rendered as two words
    (``"<object> <relation-noun>"``).
    """
    for name, n in (("n_pairs", n_pairs), ("n_background", n_background), ("n_control", n_control)):
        if n < 1:
            raise InputError(f"{name} must be >= 1")
    rng = np.random.default_rng(seed)
    subjects = _subject_pool()
    if n_subjects is not None:
        if n_subjects > len(subjects):
            raise CapacityError(f"at most {len(subjects)} subjects available")
        subjects = subjects[:n_subjects]
    capacity = corpus_capacity(len(subjects))
    if n_pairs + n_background > capacity:
        raise CapacityError(
            f"{n_pairs} pairs + {n_background} background facts exceed capacity {capacity}"
        )
    slots = [(s, r) for s in range(len(subjects)) for r in range(len(RELATIONS))]
    order = rng.permutation(len(slots))
    chosen = [slots[i] for i in order[: n_pairs + n_background]]

    suffixes = ("city", "university", "language", "job", "team", "instrument", "country", "company")

    def obj(r: int, k: int) -> str:
        word = RELATIONS[r][2][k]
        return f"{word} {suffixes[r]}" if multi_token else word

    background, paraphrases = [], []
    for s, r in chosen[n_pairs:]:
        k = int(rng.integers(len(RELATIONS[r][2])))
        canon, reph, _ = RELATIONS[r]
        background.append(KnowledgeRecord(canon.format(s=subjects[s]), obj(r, k)))
        paraphrases.append(KnowledgeRecord(reph.format(s=subjects[s]), obj(r, k)))

    pairs, old_paraphrases = [], []
    for s, r in chosen[:n_pairs]:
        canon, reph, pool = RELATIONS[r]
        k_old, k_new = rng.choice(len(pool), size=2, replace=False)
        prompt, rephrase = canon.format(s=subjects[s]), reph.format(s=subjects[s])
        old, new = obj(r, int(k_old)), obj(r, int(k_new))
        candidates = [b for b in background if b.output != new]
        loc = candidates[int(rng.integers(len(candidates)))]
        ev = EvalRecord(
            prompt=prompt,
            target=new,
            rephrase=rephrase,
            locality_prompt=loc.prompt,
            metadata={
                "subject": subjects[s],
                "pred": old,
                "answers": [new],
                "loc-ans": loc.output,
                "cond": f"{old} >> {new} || {prompt}",
            },
        )
        pairs.append(KnowledgePair(KnowledgeRecord(prompt, old), KnowledgeRecord(prompt, new), ev))
        old_paraphrases.append(KnowledgeRecord(rephrase, old))

    control = _control_records(n_control, rng)
    return Corpus(tuple(pairs), tuple(background), tuple(control), tuple(old_paraphrases + paraphrases))


def pretraining_records(corpus: Corpus) -> list[KnowledgeRecord]:
    """Background, control, and old facts (both phrasings) for the base model."""
    return [*corpus.background, *corpus.control, *corpus.old_records, *corpus.paraphrases]


def build_vocab(corpus: Corpus, max_size: int | None = None) -> Vocab:
    numbers = (str(i) for i in range(N_CONTROL_NUMBERS + 3))
    return Vocab.build([*corpus.texts(), *numbers], max_size=max_size)


# ---------------------------------------------------------------------------
# corpus directories

CORPUS_FILES = {
    "old": "old.jsonl",
    "new": "new.jsonl",
    "eval": "eval.jsonl",
    "background": "background.jsonl",
    "control": "control.jsonl",
    "paraphrases": "paraphrases.jsonl",
    "vocab": "vocab.txt",
}


def corpus_files(corpus: Corpus, vocab: Vocab) -> dict[str, str]:
    """File name -> text for a corpus directory."""
    return {
        CORPUS_FILES["old"]: dump_records(corpus.old_records),
        CORPUS_FILES["new"]: dump_records(corpus.new_records),
        CORPUS_FILES["eval"]: dump_records(corpus.eval_records, format="zsre"),
        CORPUS_FILES["background"]: dump_records(corpus.background),
        CORPUS_FILES["control"]: dump_records(corpus.control),
        CORPUS_FILES["paraphrases"]: dump_records(corpus.paraphrases),
        CORPUS_FILES["vocab"]: vocab.dumps(),
    }


def load_corpus(directory) -> tuple[Corpus, Vocab]:
    """Read a corpus directory written from :func:`corpus_files`."""
    def read(key: str, format: str = "instruction"):
        path = os.path.join(directory, CORPUS_FILES[key])
        try:
            with open(path, "rb") as fh:
                return parse_records(fh, format)
        except FileNotFoundError:
            raise InputError(f"corpus file missing: {path}") from None

    old, new, ev = read("old"), read("new"), read("eval", "zsre")
    if not len(old) == len(new) == len(ev):
        raise InputError(f"old/new/eval record counts differ: {len(old)}/{len(new)}/{len(ev)}")
    pairs = tuple(KnowledgePair(o, n, e) for o, n, e in zip(old, new, ev))
    vocab_path = os.path.join(directory, CORPUS_FILES["vocab"])
    try:
        with open(vocab_path, encoding="utf-8") as fh:
            vocab = Vocab.loads(fh.read())
    except FileNotFoundError:
        raise InputError(f"corpus file missing: {vocab_path}") from None
    corpus = Corpus(pairs, tuple(read("background")), tuple(read("control")), tuple(read("paraphrases")))
    return corpus, vocab
