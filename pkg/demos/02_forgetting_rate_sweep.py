"""How much old knowledge does subtraction remove as the rate grows?

Only the forgetting stage runs here; the forgotten model is scored against
the OLD answers, so lower reliability_old means more forgetting.
"""
from flearn.experiments import PAPER_LAMBDAS, desk_setup, lambda_sweep

setup = desk_setup()
args = (setup.original, setup.corpus, setup.vocab, (0.0, *PAPER_LAMBDAS, 1.5, 3.0))

for method in ("full_ft", "lora"):
    result = lambda_sweep(*args, method=method)
    print(result.to_csv())
