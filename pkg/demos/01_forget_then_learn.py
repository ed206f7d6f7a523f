"""Update 200 counterfactual facts with and without forgetting first.

Builds the desk setup (synthetic corpus, pretrained base, original model
fine-tuned on the old answers), then edits it with plain full fine-tuning and
with the forget-then-learn variant at rate 0.3.
"""
from flearn.editors import EditorStrategy, Strategy, run_editor
from flearn.experiments import desk_setup
from flearn.metrics import evaluate, exact_match_accuracy

setup = desk_setup()
corpus, vocab, original = setup.corpus, setup.vocab, setup.original
print(f"{len(corpus.pairs)} pairs, vocab {len(vocab)}, {original.n_params()} parameters")
print(f"original model knows {exact_match_accuracy(original, corpus.old_records, vocab):.1f}% of old facts")

pair = corpus.pairs[0]
print(f"\nexample: {pair.old.prompt!r}  old={pair.old.output!r}  new={pair.new.output!r}")

for kind in (Strategy.FULL_FT, Strategy.F_FT):
    edited = run_editor(EditorStrategy.default(kind, seed=0), original, corpus, vocab)
    rep = evaluate(original, edited.params, corpus.eval_records, vocab, control=corpus.control)
    stages = ", ".join(f"{k}={v:.2f}s" for k, v in edited.timings.items())
    print(f"\n{kind.value}: reliability {rep.reliability:.1f}  generality {rep.generality:.1f}  "
          f"locality {rep.locality:.1f}  control {rep.control_accuracy_pre:.0f}->{rep.control_accuracy_post:.0f}")
    print(f"  stages: {stages}")
