import numpy as np
import pytest

from flearn.arith import extract_delta, layer_distances, tensor_family
from flearn.errors import ConfigError
from flearn.lora import (
    LoraAdapterSet,
    LoraConfig,
    adapted_forward,
    init_adapters,
    lora_fine_tune,
    merge_adapters,
)
from flearn.model import ModelConfig, ParamSet, forward, zeros_like_layout
from flearn.trainer import TrainConfig


def test_zero_b_merge_is_bit_exact(small):
    _, _, P = small
    ad = init_adapters(P.config, LoraConfig(seed=3))
    assert all(not ad[n].any() for n in ad if n.endswith("lora_B"))
    assert merge_adapters(P, ad).bit_equal(P)
    assert ad.bit_equal(init_adapters(P.config, LoraConfig(seed=3)))


def test_two_by_two_merge():
    cfg = ModelConfig(vocab_size=8, d_model=2, n_layers=1, n_heads=1, d_ff=4, max_seq_len=4)
    P = ParamSet(cfg, zeros_like_layout(cfg))
    lc = LoraConfig(rank=1, alpha=1.0, target_projections=("query",))
    ad = LoraAdapterSet(cfg, lc, {
        "layers.0.attn.q.lora_A": np.array([[1.0, 0.0]]),
        "layers.0.attn.q.lora_B": np.array([[2.0], [0.0]]),
    })
    merged = merge_adapters(P, ad)
    np.testing.assert_array_equal(merged["layers.0.attn.q"], [[2, 0], [0, 0]])
    assert all(np.array_equal(merged[n], P[n]) for n in P if n != "layers.0.attn.q")


def test_config_guards(small):
    _, _, P = small
    with pytest.raises(ConfigError):
        init_adapters(P.config, LoraConfig(rank=P.config.d_model + 1))
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    with pytest.raises(ConfigError):
        LoraConfig(target_projections=("mlp_up",))
    other = ModelConfig(vocab_size=P.config.vocab_size, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=16)
    with pytest.raises(ConfigError):
        merge_adapters(P, init_adapters(other, LoraConfig()))


@pytest.fixture(scope="module")
def trained(small):
    corpus, vocab, P = small
    ad = init_adapters(P.config, LoraConfig(seed=1))
    hist = []
    out = lora_fine_tune(P, ad, corpus.new_records, vocab, TrainConfig(epochs=3, learning_rate=3e-3), history=hist)
    return P, out, hist


def test_lora_training_descends_and_freezes_base(small, trained):
    _, _, P0 = small
    P, ad, hist = trained
    assert P is P0
    assert hist[-1] < hist[0]
    assert any(ad[n].any() for n in ad if n.endswith("lora_B"))


def test_zero_epochs_leaves_adapters(small):
    corpus, vocab, P = small
    ad = init_adapters(P.config, LoraConfig())
    assert lora_fine_tune(P, ad, corpus.new_records, vocab, TrainConfig(epochs=0)).bit_equal(ad)


def test_adapted_forward_matches_merged(trained):
    P, ad, _ = trained
    ids = [5, 6, 7, 3, 9]
    np.testing.assert_allclose(adapted_forward(P, ad, ids), forward(merge_adapters(P, ad), ids), atol=1e-5, rtol=0)


def test_merged_delta_support_is_query_and_value(trained):
    P, ad, _ = trained
    merged = merge_adapters(P, ad)
    delta = extract_delta(merged, P)
    for name in P:
        _, fam = tensor_family(name)
        if fam in ("query", "value"):
            assert delta[name].any(), name
        else:
            assert not delta[name].any(), name
    assert layer_distances(merged, P).nonzero_families() == {"query", "value"}
