import pytest
import torch

from micap.combiner import (
    AttentionCapture,
    ModalitiesCombiner,
    aggregate,
    co_attend,
    pool_first,
)
from micap.errors import ConfigError, ShapeError
from micap.nn_core import AttentionConfig, Mask, TransformerBlock, layer_norm, transformer_block

D = torch.float64


def _blocks(n, dim=8, heads=2, seed=0):
    torch.manual_seed(seed)
    cfg = AttentionConfig(dim, heads)
    return [TransformerBlock(cfg) for _ in range(n)], [TransformerBlock(cfg) for _ in range(n)]


def test_zeroed_branches_return_their_inputs():
    vb, ab = _blocks(1)
    with torch.no_grad():
        for b in vb + ab:
            for p in (b.attn.w_o, b.attn.b_o, b.ffn.w2, b.ffn.b2):
                p.zero_()
    x_v, x_a = torch.randn(5, 8, dtype=D), torch.randn(3, 8, dtype=D)
    z_v, z_a = co_attend(x_v, x_a, vb, ab)
    assert torch.equal(z_v, x_v) and torch.equal(z_a, x_a)


def test_single_audio_token_gets_all_video_attention():
    vb, ab = _blocks(1)
    cap = AttentionCapture()
    co_attend(torch.randn(5, 8, dtype=D), torch.randn(1, 8, dtype=D), vb, ab, capture=cap)
    assert torch.equal(cap.video_audio[0], torch.ones(2, 5, 1, dtype=D))


def test_two_layers_match_unrolled_simultaneous_update():
    vb, ab = _blocks(2)
    x_v, x_a = torch.randn(4, 8, dtype=D), torch.randn(3, 8, dtype=D)
    valid = torch.tensor([True, True, False])
    m = Mask.padding(valid)
    cfg = vb[0].cfg
    v1 = transformer_block(x_v, x_a, cfg, vb[0].params(), m)
    a1 = transformer_block(x_a, x_v, cfg, ab[0].params())
    v2 = transformer_block(v1, a1, cfg, vb[1].params(), m)
    a2 = transformer_block(a1, v1, cfg, ab[1].params())
    z_v, z_a = co_attend(x_v, x_a, vb, ab, audio_valid=valid)
    assert torch.equal(z_v, v2) and torch.equal(z_a, a2)


def test_swapping_roles_swaps_outputs():
    vb, ab = _blocks(2)
    x_v, x_a = torch.randn(4, 8, dtype=D), torch.randn(3, 8, dtype=D)
    z_v, z_a = co_attend(x_v, x_a, vb, ab)
    s_a, s_v = co_attend(x_a, x_v, ab, vb)
    assert torch.equal(z_v, s_v) and torch.equal(z_a, s_a)


def test_audio_padding_does_not_reach_video_branch():
    vb, ab = _blocks(2)
    x_v = torch.randn(4, 8, dtype=D)
    x_a = torch.randn(5, 8, dtype=D)
    y_a = x_a.clone()
    y_a[3:] = torch.randn(2, 8, dtype=D)
    valid = torch.tensor([True, True, True, False, False])
    a, _ = co_attend(x_v, x_a, vb, ab, audio_valid=valid)
    b, _ = co_attend(x_v, y_a, vb, ab, audio_valid=valid)
    assert torch.equal(a, b)


def test_zero_layers_and_width_mismatch():
    with pytest.raises(ConfigError):
        co_attend(torch.zeros(1, 8, dtype=D), torch.zeros(1, 8, dtype=D), [], [])
    vb, ab = _blocks(1)
    with pytest.raises(ShapeError):
        co_attend(torch.zeros(1, 8, dtype=D), torch.zeros(1, 4, dtype=D), vb, ab)
    with pytest.raises(ConfigError):
        ModalitiesCombiner(8, 2, 0)


# ---------------------------------------------------------------- aggregate / pool


def _norm(dim=8):
    return torch.randn(dim, dtype=D), torch.randn(dim, dtype=D)


def test_aggregate_concatenates_video_then_audio():
    g, b = _norm()
    z_v, z_a = torch.randn(2, 8, dtype=D), torch.randn(3, 8, dtype=D)
    z = aggregate(z_v, z_a, g, b)
    assert z.shape == (5, 8)
    for i, row in enumerate(list(z_v) + list(z_a)):
        assert torch.equal(z[i], layer_norm(row, g, b))


def test_aggregate_with_empty_audio_is_plain_norm():
    g, b = _norm()
    z_v = torch.randn(3, 8, dtype=D)
    assert torch.equal(aggregate(z_v, z_v[:0], g, b), layer_norm(z_v, g, b))


def test_aggregate_width_mismatch():
    g, b = _norm()
    with pytest.raises(ShapeError):
        aggregate(torch.zeros(2, 8, dtype=D), torch.zeros(2, 4, dtype=D), g, b)


def test_pool_zero_row_zero_bias_is_zero():
    c = pool_first(torch.zeros(3, 4, dtype=D), torch.randn(4, 4, dtype=D), torch.zeros(4, dtype=D))
    assert torch.equal(c, torch.zeros(4, dtype=D))


def test_pool_matches_scalar_evaluation():
    import math
    z, w, b = torch.randn(3, 4, dtype=D), torch.randn(4, 5, dtype=D), torch.randn(5, dtype=D)
    c = pool_first(z, w, b)
    for j in range(5):
        acc = b[j].item() + sum(z[0, i].item() * w[i, j].item() for i in range(4))
        assert c[j].item() == pytest.approx(math.tanh(acc), abs=1e-14)


def test_pool_empty_branch_is_error():
    with pytest.raises(ConfigError):
        pool_first(torch.zeros(0, 4, dtype=D), torch.zeros(4, 4, dtype=D), torch.zeros(4, dtype=D))


def test_combiner_shapes_and_memory_mask():
    torch.manual_seed(0)
    comb = ModalitiesCombiner(8, 2, 1)
    x_v, x_a = torch.randn(2, 6, 8, dtype=D), torch.randn(2, 4, 8, dtype=D)
    valid = torch.tensor([[True] * 4, [True, True, False, False]])
    out = comb(x_v, x_a, valid)
    assert out.z_v.shape == (2, 7, 8)  # [VCLS] + 6 patch rows
    assert out.z_va.shape == (2, 11, 8)
    assert out.memory_valid[1].tolist() == [True] * 7 + [True, True, False, False]
    assert out.c_v.shape == out.c_a.shape == (2, 8)
    assert out.c_v.abs().max() < 1
