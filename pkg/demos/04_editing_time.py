"""Wall-clock cost of each strategy at 1, 10 and 100 edits (warm-up excluded)."""
from flearn.editors import EditorStrategy, Strategy
from flearn.experiments import desk_setup, time_strategies

setup = desk_setup()
strategies = [EditorStrategy.default(k, seed=0) for k in Strategy]
table = time_strategies(strategies, setup.original, setup.corpus, setup.vocab, repeats=3)
print(table.to_csv())

full = table.seconds("full_ft", 100)
for kind in Strategy:
    print(f"{kind.value:<10} {table.seconds(kind.value, 100) / full:.2f}x full_ft at 100 edits")
