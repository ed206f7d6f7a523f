"""Reliability, generality, locality, and the control-skill probe."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

from .data import EOS, EvalRecord, KnowledgeRecord, Vocab
from .errors import InputError
from .model import ParamSet, greedy_decode_many

DEFAULT_MAX_NEW = 8
MATCH_CRITERION = "exact-token-sequence-after-greedy-decode"


@dataclass(frozen=True)
class EditReport:
    reliability: float
    generality: float
    locality: float
    control_accuracy_pre: float | None
    control_accuracy_post: float | None
    n_records: int
    match: str = MATCH_CRITERION

    def __post_init__(self):
        if self.n_records < 1:
            raise InputError("EditReport needs at least one record")
        for f in ("reliability", "generality", "locality", "control_accuracy_pre", "control_accuracy_post"):
            v = getattr(self, f)
            if v is not None and not 0.0 <= v <= 100.0:
                raise InputError(f"{f}={v} outside [0, 100]")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _percent(hits: Sequence[bool]) -> float:
    return 100.0 * sum(hits) / len(hits)


def decode_answers(params: ParamSet, prompts: Sequence[str], vocab: Vocab, max_new: int) -> list[list[int]]:
    return greedy_decode_many(params, [vocab.prompt_ids(p) for p in prompts], max_new, EOS)


def exact_match_accuracy(params: ParamSet, records: Sequence[KnowledgeRecord], vocab: Vocab, max_new: int = DEFAULT_MAX_NEW) -> float:
    """Percent of records whose greedy answer equals ``record.output`` token for token."""
    if not records:
        raise InputError("no records to score")
    outs = decode_answers(params, [r.prompt for r in records], vocab, max_new)
    return _percent([o == vocab.ids(r.output) for o, r in zip(outs, records)])


def evaluate(
    pre: ParamSet,
    post: ParamSet,
    records: Sequence[EvalRecord],
    vocab: Vocab,
    max_new: int = DEFAULT_MAX_NEW,
    control: Sequence[KnowledgeRecord] = (),
) -> EditReport:
    """Score an edit of ``pre`` into ``post``.

    Reliability and generality are exact-match rates of ``post`` on the
    prompts and rephrases against each record's target. Locality is the rate
    at which ``post`` decodes each locality prompt to exactly the same tokens
    as ``pre``. Control accuracies are left as None when ``control`` is empty.
    """
    if not records:
        raise InputError("evaluate needs at least one record")
    if pre.config != post.config:
        raise InputError("pre and post models have different configs")
    targets = [vocab.ids(r.target) for r in records]
    rel = decode_answers(post, [r.prompt for r in records], vocab, max_new)
    gen = decode_answers(post, [r.rephrase for r in records], vocab, max_new)
    loc_prompts = [r.locality_prompt for r in records]
    loc_post = decode_answers(post, loc_prompts, vocab, max_new)
    loc_pre = loc_post if pre is post else decode_answers(pre, loc_prompts, vocab, max_new)
    ctl_pre = ctl_post = None
    if control:
        ctl_pre = exact_match_accuracy(pre, control, vocab, max_new)
        ctl_post = ctl_pre if pre is post else exact_match_accuracy(post, control, vocab, max_new)
    return EditReport(
        reliability=_percent([o == t for o, t in zip(rel, targets)]),
        generality=_percent([o == t for o, t in zip(gen, targets)]),
        locality=_percent([a == b for a, b in zip(loc_post, loc_pre)]),
        control_accuracy_pre=ctl_pre,
        control_accuracy_post=ctl_post,
        n_records=len(records),
    )


def fill_locality_answers(pre: ParamSet, records: Sequence[EvalRecord], vocab: Vocab, max_new: int = DEFAULT_MAX_NEW) -> list[EvalRecord]:
    """Copies of ``records`` with ``locality_answer_pre`` set from ``pre``'s decodes."""
    from dataclasses import replace

    outs = decode_answers(pre, [r.locality_prompt for r in records], vocab, max_new)
    return [replace(r, locality_answer_pre=vocab.decode(o)) for r, o in zip(records, outs)]
