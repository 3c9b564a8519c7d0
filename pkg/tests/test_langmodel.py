import math

import numpy as np
import pytest
import torch

from pixelalign.langmodel import (
    DecoderLM,
    LMConfig,
    LoRALinear,
    freeze_base,
    lora_wrap,
    sincos_sequence_init,
)
from pixelalign.textcodec import EOS_ID, PAD_ID


def small_lm(lora_rank=0, **overrides):
    base = dict(vocab_size=11, width=16, depth=2, heads=2, max_len=6,
                max_positions=24, lora_rank=lora_rank)
    base.update(overrides)
    torch.manual_seed(0)
    return DecoderLM(LMConfig(**base))


def test_config_validation():
    with pytest.raises(ValueError):
        LMConfig(vocab_size=3)
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, width=30, heads=4)
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, depth=0)
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, max_len=0)
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, lora_rank=-1)


def test_prefix_mask_oracle():
    lm = small_lm()
    mask = lm._prefix_mask(2, 4, torch.device("cpu"))
    expected = torch.tensor([
        [True, True, False, False],   # prefix sees only the prefix
        [True, True, False, False],
        [True, True, True, False],    # first target: prefix + itself
        [True, True, True, True],     # later targets: causal
    ])
    assert torch.equal(mask, expected)


def test_future_targets_do_not_change_past_logits():
    lm = small_lm()
    prefix = torch.rand(1, 3, 16)
    a = torch.tensor([[4, 5, 6, 7]])
    b = torch.tensor([[4, 5, 9, 8]])  # diverges at position 2
    with torch.no_grad():
        logits_a, _ = lm.forward_features(prefix, None, a)
        logits_b, _ = lm.forward_features(prefix, None, b)
    assert torch.equal(logits_a[:, :2], logits_b[:, :2])
    assert not torch.equal(logits_a[:, 2:], logits_b[:, 2:])


def test_text_prompt_equals_prefix_concatenation():
    """A text prompt must behave exactly like extra prefix positions."""
    lm = small_lm()
    prefix = torch.rand(2, 3, 16)
    text = torch.tensor([[4, 5], [6, 7]])
    targets = torch.tensor([[8, 9], [9, 8]])
    with torch.no_grad():
        via_text, hidden_a = lm.forward_features(prefix, text, targets)
        merged = torch.cat([prefix, lm.tok_emb(text)], dim=1)
        via_prefix, hidden_b = lm.forward_features(merged, None, targets)
    assert torch.equal(via_text, via_prefix)
    assert torch.equal(hidden_a, hidden_b)


def test_hidden_states_reproduce_logits():
    lm = small_lm()
    prefix = torch.rand(1, 2, 16)
    targets = torch.tensor([[4, 5, 6]])
    with torch.no_grad():
        logits, hidden = lm.forward_features(prefix, None, targets)
    assert torch.equal(lm.head(hidden), logits)
    assert hidden.shape == (1, 3, 16)


def test_forward_validation():
    lm = small_lm()
    with pytest.raises(ValueError):
        lm.forward_features(torch.rand(1, 2, 8), None, torch.tensor([[4]]))
    with pytest.raises(ValueError):
        lm.forward_features(torch.rand(1, 2, 16), None, torch.tensor([4]))
    with pytest.raises(ValueError):
        lm.forward_features(torch.rand(1, 2, 16), torch.tensor([[4], [5]]),
                            torch.tensor([[4]]))
    with pytest.raises(ValueError, match="max_positions"):
        lm.forward_features(torch.rand(1, 20, 16), None,
                            torch.tensor([[4] * 10]))


def test_zero_weight_model_decodes_all_pad():
    """With every weight zeroed all logits tie at 0, argmax picks token 0, and
    decoding runs to the length limit without an end token."""
    lm = small_lm()
    with torch.no_grad():
        for p in lm.parameters():
            p.zero_()
    result = lm.decode_greedy(torch.zeros(1, 2, 16))
    assert result.tokens == [PAD_ID] * lm.cfg.max_len
    assert not result.ended_with_eos
    assert result.hidden.shape == (lm.cfg.max_len, 16)


def test_decode_greedy_is_deterministic_and_batch_one():
    lm = small_lm()
    prefix = torch.rand(1, 2, 16)
    a = lm.decode_greedy(prefix)
    b = lm.decode_greedy(prefix)
    assert a.tokens == b.tokens
    assert torch.equal(a.hidden, b.hidden)
    assert len(a.tokens) == a.hidden.shape[0]
    with pytest.raises(ValueError):
        lm.decode_greedy(torch.rand(2, 2, 16))


def test_decode_greedy_stops_at_eos():
    lm = small_lm()
    # rig the head so EOS always wins: positive weight against a constant
    # feature direction would still depend on hidden; instead bias the token
    # embedding pathway by zeroing everything and writing the head so that
    # logits are constant with EOS strictly highest
    with torch.no_grad():
        for p in lm.parameters():
            p.zero_()
        # ln_f output is zero-mean; make EOS win via the final norm bias and a
        # head row aligned with it
        lm.ln_f.bias.fill_(1.0)
        lm.head.weight[EOS_ID].fill_(1.0)
    result = lm.decode_greedy(torch.zeros(1, 2, 16), max_len=5)
    assert result.tokens == [EOS_ID]
    assert result.ended_with_eos
    assert result.hidden.shape == (1, 16)


def test_max_len_override():
    lm = small_lm()
    with torch.no_grad():
        for p in lm.parameters():
            p.zero_()
    result = lm.decode_greedy(torch.zeros(1, 2, 16), max_len=3)
    assert len(result.tokens) == 3


def test_sincos_sequence_init_closed_form():
    pe = sincos_sequence_init(4, 8)
    assert pe.shape == (4, 8)
    for pos in range(4):
        for k in range(4):
            omega = 10000.0 ** (-2.0 * k / 8.0)
            assert math.isclose(pe[pos, 2 * k].item(), math.sin(pos * omega),
                                abs_tol=1e-6)
            assert math.isclose(pe[pos, 2 * k + 1].item(), math.cos(pos * omega),
                                abs_tol=1e-6)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

def test_lora_wrap_preserves_outputs_bit_exactly():
    lm = small_lm(lora_rank=0)
    prefix = torch.rand(1, 2, 16)
    targets = torch.tensor([[4, 5, 6]])
    with torch.no_grad():
        before, _ = lm.forward_features(prefix, None, targets)
    lora_wrap(lm, rank=2, alpha=4.0)
    with torch.no_grad():
        after, _ = lm.forward_features(prefix, None, targets)
    assert torch.equal(before, after)


def test_lora_adapters_change_outputs_once_nonzero():
    lm = small_lm(lora_rank=2)
    prefix = torch.rand(1, 2, 16)
    targets = torch.tensor([[4, 5, 6]])
    with torch.no_grad():
        before, _ = lm.forward_features(prefix, None, targets)
        lm.blocks[0].attn.q_proj.lora_b.fill_(0.5)
        after, _ = lm.forward_features(prefix, None, targets)
    assert not torch.equal(before, after)


def test_lora_wrap_targets_q_and_v_only():
    lm = small_lm(lora_rank=2)
    for block in lm.blocks:
        assert isinstance(block.attn.q_proj, LoRALinear)
        assert isinstance(block.attn.v_proj, LoRALinear)
        assert not isinstance(block.attn.k_proj, LoRALinear)
        assert not isinstance(block.attn.out_proj, LoRALinear)


def test_lora_wrap_rejects_double_wrap_and_bad_rank():
    lm = small_lm(lora_rank=2)
    with pytest.raises(ValueError):
        lora_wrap(lm, rank=2, alpha=4.0)
    with pytest.raises(ValueError):
        lora_wrap(small_lm(lora_rank=0), rank=0, alpha=4.0)
    with pytest.raises(ValueError):
        LoRALinear(torch.nn.Linear(16, 16), rank=17, alpha=4.0)


def test_lora_scaling_factor():
    base = torch.nn.Linear(8, 8)
    layer = LoRALinear(base, rank=4, alpha=8.0)
    assert layer.scaling == 2.0
    x = torch.rand(3, 8)
    with torch.no_grad():
        layer.lora_b.copy_(torch.randn(8, 4))
        expected = base(x) + (x @ layer.lora_a.t() @ layer.lora_b.t()) * 2.0
        assert torch.allclose(layer(x), expected)


def test_freeze_base_leaves_only_adapters_trainable():
    lm = small_lm(lora_rank=2)
    freeze_base(lm)
    trainable = {n for n, p in lm.named_parameters() if p.requires_grad}
    assert trainable
    assert all("lora_" in n for n in trainable)
    frozen = {n for n, p in lm.named_parameters() if not p.requires_grad}
    assert any("tok_emb" in n for n in frozen)
    assert any("head" in n for n in frozen)


def test_frozen_base_config_applies_freeze():
    lm = small_lm(lora_rank=2, frozen_base=True)
    assert all("lora_" in n for n, p in lm.named_parameters() if p.requires_grad)
