import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nestseg.model import ConfigError, ModelConfig, blockify, deblockify, default_config, toy_config
from nestseg.model.network import HierarchyFeatures, UNesT, build_model, count_parameters


def _blockify_oracle(x, block_grid):
    """Loop-based reference: block index row-major over the block grid, tokens row-major inside."""
    b, h, w, d, c = x.shape
    bh, bw, bd = block_grid
    sh, sw, sd = h // bh, w // bw, d // bd
    out = np.zeros((b, bh * bw * bd, sh * sw * sd, c), dtype=x.dtype)
    for i, j, k in itertools.product(range(bh), range(bw), range(bd)):
        t = (i * bw + j) * bd + k
        for p, q, r in itertools.product(range(sh), range(sw), range(sd)):
            n = (p * sw + q) * sd + r
            out[:, t, n] = x[:, i * sh + p, j * sw + q, k * sd + r]
    return out


def test_blockify_matches_loop_oracle():
    x = torch.arange(2 * 4 * 6 * 2 * 3, dtype=torch.float64).reshape(2, 4, 6, 2, 3)
    seq = blockify(x, (2, 3, 1))
    np.testing.assert_array_equal(seq.data.numpy(), _blockify_oracle(x.numpy(), (2, 3, 1)))
    assert seq.num_blocks == 6 and seq.tokens_per_block == 8


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    st.integers(1, 2),
    st.integers(1, 4),
    st.integers(0, 2**31 - 1),
)
def test_blockify_round_trip_property(blocks, sub, batch, channels, seed):
    grid = tuple(b * s for b, s in zip(blocks, sub))
    x = torch.from_numpy(np.random.default_rng(seed).normal(size=(batch, *grid, channels)))
    assert torch.equal(deblockify(blockify(x, blocks)), x)


def test_blockify_rejects_indivisible_grid():
    with pytest.raises(ValueError, match="not divisible"):
        blockify(torch.zeros(1, 6, 6, 6, 2), (4, 4, 4))


def test_default_hierarchy_arithmetic():
    cfg = default_config()
    assert cfg.grid_shapes() == [(24, 24, 24), (12, 12, 12), (6, 6, 6)]
    assert cfg.block_counts() == [64, 8, 1]
    assert cfg.tokens_per_block() == [216, 216, 216]


def test_validator_lists_every_problem():
    with pytest.raises(ConfigError) as err:
        ModelConfig(
            block_grid=((4, 4, 4), (2, 2, 2), (2, 2, 2)), num_heads=(3, 8, 16), decoder_channels=(128, 64, 16)
        ).validate()
    text = str(err.value)
    assert len(err.value.problems) >= 3
    assert "(1, 1, 1)" in text and "heads" in text and "32" in text


def test_config_rejects_crop_not_divisible_by_patch():
    assert any("divisible" in p for p in default_config().replace(crop_size=(98, 96, 96)).problems())


def test_config_dict_round_trip_and_unknown_keys():
    cfg = toy_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "depth": 3})


def test_toy_forward_shapes(toy_model):
    x = torch.randn(2, 1, 32, 32, 32)
    out = toy_model(x)
    assert out.brain_logits.shape == (2, 133, 32, 32, 32)
    assert out.ticv_logit.shape == out.pfv_logit.shape == (2, 1, 32, 32, 32)
    assert out.stacked().shape == (2, 135, 32, 32, 32)


def test_wrong_crop_is_rejected(toy_model):
    with pytest.raises(ValueError, match="crop"):
        toy_model(torch.zeros(1, 1, 24, 32, 32))


def test_pretrain_model_has_no_icv_parameters():
    model = build_model(toy_config(icv_heads_enabled=False), seed=0)
    assert not any(n.startswith(("ticv_head", "pfv_head")) for n, _ in model.named_parameters())
    out = model(torch.zeros(1, 1, 32, 32, 32))
    assert out.ticv_logit is None and not out.has_icv
    with pytest.raises(ValueError, match="no TICV/PFV heads"):
        model(torch.zeros(1, 1, 32, 32, 32), finetune_mode=True)


def test_icv_head_init(toy_model):
    for head in (toy_model.ticv_head, toy_model.pfv_head):
        assert head.weight.abs().max() <= 0.04
        assert torch.count_nonzero(head.bias) == 0


def test_hierarchy_check_reports_missing_level(toy_model):
    feats = toy_model.encode(torch.zeros(1, 1, 32, 32, 32))
    with pytest.raises(ValueError, match="missing levels \\[2\\]"):
        toy_model.decode(HierarchyFeatures(feats.stem, [feats.levels[0], feats.levels[1], None]))


def test_attention_is_block_local_for_each_level(toy_model):
    torch.manual_seed(0)
    for level in toy_model.levels:
        grid = [32 // 2 // 2**level.level] * 3
        x = torch.randn(1, level.layers[0].norm1.normalized_shape[0], *grid, dtype=torch.float32)
        _, base = level(x)
        seq = level.blockify(x)
        perturbed = seq.data.clone()
        perturbed[:, 0] += torch.randn_like(perturbed[:, 0])
        from nestseg.model.blocks import deblockify as unblock

        x2 = unblock(seq.with_data(perturbed)).permute(0, 4, 1, 2, 3)
        _, out = level(x2)
        assert not torch.equal(out.data[:, 0], base.data[:, 0])
        assert torch.equal(out.data[:, 1:], base.data[:, 1:])


def test_parameter_count_is_stable():
    assert count_parameters(UNesT(toy_config())) == 111_807
