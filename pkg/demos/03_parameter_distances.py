"""Where do the knowledge parameters live?

Per-layer Euclidean distances between the original model and its forgotten
copy (rate 1), for full fine-tuning and for LoRA deltas.
"""
from flearn.experiments import desk_setup, family_summary, forgetting_distances

setup = desk_setup()

full = forgetting_distances(setup.original, setup.corpus, setup.vocab, method="full_ft", lam=1.0)
for (layer, family), dist in sorted(full.by_group().items(), key=lambda kv: (kv[0][0] is None, kv[0])):
    print(f"layer {'-' if layer is None else layer:>2}  {family:<10} {dist:.4f}")
print(family_summary(full))

lora = forgetting_distances(setup.original, setup.corpus, setup.vocab, method="lora", lam=1.0)
print("families touched by the LoRA delta:", sorted(lora.nonzero_families()))
