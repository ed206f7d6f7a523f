import pytest

from flearn.data import build_vocab, generate_corpus
from flearn.model import ModelConfig, init_model
from flearn.trainer import TrainConfig, fine_tune


@pytest.fixture(scope="session")
def small():
    """A 24-pair corpus and a 2-layer model briefly trained on its old facts."""
    corpus = generate_corpus(24, 24, 6, seed=11)
    vocab = build_vocab(corpus)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=16, seed=2)
    params = fine_tune(init_model(cfg), corpus.old_records, vocab, TrainConfig(learning_rate=3e-3, epochs=8))
    return corpus, vocab, params
