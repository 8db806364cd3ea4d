import numpy as np
import pytest
import torch

from kreplay.corpus import BOS_ID, EOS_ID, ImageFeatures
from kreplay.model import (
    ModelConfig, forward, greedy_decode, greedy_decode_batch, init_bound, init_model, load_checkpoint,
    parameter_checksum, parameter_count, read_header, save_checkpoint, step_probs,
)


def image(seed, r=3, f=8):
    return ImageFeatures(np.random.default_rng(seed).normal(size=(r, f)), f"img-{seed}")


def closed_form_count(V, f, d, L, max_len):
    attn = 3 * d * d + 3 * d + d * d + d
    ffn = d * 4 * d + 4 * d + 4 * d * d + d
    layer = 2 * attn + ffn + 3 * 2 * d
    return V * d + max_len * d + (f * d + d) + L * layer + 2 * d + (d * V + V)


@pytest.mark.parametrize("d,L", [(32, 2), (64, 2), (16, 1)])
def test_parameter_count_closed_form(d, L):
    cfg = ModelConfig(vocab_size=50, feature_dim=8, d_model=d, num_layers=L, num_heads=4, max_len=12)
    assert parameter_count(init_model(cfg)) == closed_form_count(50, 8, d, L, 12)


def test_config_validation_names_field():
    with pytest.raises(ValueError, match="d_model"):
        init_model(ModelConfig(vocab_size=20, d_model=30, num_heads=4))
    with pytest.raises(ValueError, match="max_len"):
        init_model(ModelConfig(vocab_size=20, max_len=3))


def test_init_deterministic_and_bounded():
    cfg = ModelConfig(vocab_size=30, feature_dim=8, d_model=32, seed=11)
    a, b = init_model(cfg), init_model(cfg)
    assert parameter_checksum(a) == parameter_checksum(b)
    other = init_model(ModelConfig(vocab_size=30, feature_dim=8, d_model=32, seed=12))
    assert parameter_checksum(a) != parameter_checksum(other)
    for name, p in a.named_parameters():
        assert torch.isfinite(p).all()
        assert p.abs().max().item() <= init_bound(name, p) + 1e-7, name


def test_init_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    init_model(ModelConfig(vocab_size=30, feature_dim=8))
    assert torch.equal(torch.rand(1), before)


def test_forward_shape_and_normalization(tiny_model):
    logits = forward(tiny_model, image(0), [BOS_ID, 5, 6, 7])
    assert logits.shape == (4, tiny_model.config.vocab_size)
    assert torch.isfinite(logits).all()
    sums = step_probs(logits).sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_forward_errors(tiny_model):
    with pytest.raises(ValueError, match="bos"):
        forward(tiny_model, image(0), [5, 6])
    with pytest.raises(ValueError, match="max_len"):
        forward(tiny_model, image(0), [BOS_ID] + [5] * 16)


def test_causality(tiny_model):
    toks = [BOS_ID, 5, 6, 7, 8, 9]
    base = forward(tiny_model, image(1), toks)
    for j in range(1, len(toks)):
        changed = list(toks)
        changed[j] = 10 if toks[j] != 10 else 11
        out = forward(tiny_model, image(1), changed)
        assert torch.equal(out[:j], base[:j])
        assert not torch.equal(out[j:], base[j:])


def test_eval_mode_bit_identical(tiny_model):
    a = forward(tiny_model, image(2), [BOS_ID, 4, 5])
    b = forward(tiny_model, image(2), [BOS_ID, 4, 5])
    assert torch.equal(a, b)


def test_step_probs_examples():
    assert torch.allclose(step_probs(torch.zeros(1, 4)), torch.full((1, 4), 0.25))
    e = np.e
    assert step_probs(torch.tensor([[1.0, 0.0]], dtype=torch.float64)).tolist()[0] == pytest.approx(
        [e / (1 + e), 1 / (1 + e)], abs=1e-12)
    z = torch.randn(3, 7, dtype=torch.float64)
    assert torch.allclose(step_probs(z + 123.0), step_probs(z), atol=1e-9)


def test_greedy_replay_oracle(tiny_model):
    for seed in range(5):
        im = image(seed)
        seq = greedy_decode(tiny_model, im, 12)
        assert 1 <= len(seq) <= 12
        assert EOS_ID not in seq[:-1]
        prefix = [BOS_ID]
        for tok in seq:
            logits = forward(tiny_model, im, prefix)[-1]
            assert int(torch.argmax(logits)) == tok
            prefix.append(tok)


def test_greedy_batch_matches_single(tiny_model):
    ims = [image(s, r=2 + s % 3) for s in range(6)]
    batch = greedy_decode_batch(tiny_model, ims, 10)
    assert batch == [greedy_decode(tiny_model, im, 10) for im in ims]
    assert greedy_decode_batch(tiny_model, ims, 10) == batch


def test_greedy_eos_first(tiny_model):
    with torch.no_grad():
        tiny_model.head.bias.zero_()
        tiny_model.head.bias[EOS_ID] = 1e4
    assert greedy_decode(tiny_model, image(0), 10) == (EOS_ID,)


def test_greedy_ties_lowest_id(tiny_model):
    with torch.no_grad():
        tiny_model.head.weight.zero_()
        tiny_model.head.bias.zero_()
    # all logits equal: argmax is id 0 (pad), which ends the caption as an empty sequence
    assert greedy_decode(tiny_model, image(0), 5) == ()
    with torch.no_grad():
        tiny_model.head.bias[7] = 1.0
        tiny_model.head.bias[6] = 1.0
    assert greedy_decode(tiny_model, image(0), 3) == (6, 6, 6)


def test_greedy_restores_training_mode(tiny_model):
    tiny_model.train()
    greedy_decode(tiny_model, image(0), 4)
    assert tiny_model.training


def test_checkpoint_round_trip(tiny_model, tmp_path):
    path = save_checkpoint(tmp_path / "m.safetensors", tiny_model, vocab_hash="abc", stage="pretrained", step=7, seed=3)
    header = read_header(path)
    assert header["stage"] == "pretrained" and header["step"] == 7 and header["seed"] == 3
    loaded, _ = load_checkpoint(path, vocab_hash="abc")
    assert parameter_checksum(loaded) == parameter_checksum(tiny_model)
    assert loaded.stage == "pretrained" and loaded.vocab_hash == "abc"
    assert torch.equal(forward(loaded, image(4), [BOS_ID, 5]), forward(tiny_model, image(4), [BOS_ID, 5]))


def test_checkpoint_hash_mismatch_and_bad_stage(tiny_model, tmp_path):
    path = save_checkpoint(tmp_path / "m.safetensors", tiny_model, vocab_hash="abc", stage="init")
    with pytest.raises(ValueError, match="hash mismatch"):
        load_checkpoint(path, vocab_hash="xyz")
    with pytest.raises(ValueError, match="stage"):
        save_checkpoint(tmp_path / "n.safetensors", tiny_model, vocab_hash="abc", stage="bogus")
