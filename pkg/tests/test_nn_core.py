import math

import numpy as np
import pytest
import torch

from micap.errors import ConfigError, MaskError, ShapeError
from micap.nn_core import (
    AttentionConfig,
    Mask,
    TransformerBlock,
    feed_forward,
    grad_check,
    layer_norm,
    multi_head_attention,
    scaled_dot_attention,
    softmax,
    transformer_block,
)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


# ---------------------------------------------------------------- attention


def test_zero_scores_give_column_mean():
    q = torch.zeros(3, 4, dtype=D)
    k = torch.randn(5, 4, dtype=D)
    v = torch.randn(5, 2, dtype=D)
    out, w = scaled_dot_attention(q, k, v)
    assert torch.allclose(w, torch.full((3, 5), 0.2, dtype=D), atol=1e-15)
    assert torch.allclose(out, v.mean(0).expand(3, 2), atol=1e-14)


def test_single_key_copies_value():
    q = torch.randn(4, 3, dtype=D)
    k = torch.randn(1, 3, dtype=D)
    v = t([[7.0, -2.0]])
    out, w = scaled_dot_attention(q, k, v)
    assert torch.equal(w, torch.ones(4, 1, dtype=D))
    assert torch.equal(out, v.expand(4, 2))


def test_hand_evaluated_example():
    out, w = scaled_dot_attention(t([[1.0, 0.0]]), t([[1.0, 0.0], [0.0, 1.0]]), t([[1.0, 2.0], [3.0, 4.0]]))
    # softmax([1/sqrt(2), 0]) and its weighted sum of V rows, evaluated by hand
    assert w[0].tolist() == pytest.approx([0.6697615493266569, 0.3302384506733431], abs=1e-15)
    assert out[0].tolist() == pytest.approx([1.6604769013466862, 2.6604769013466862], abs=1e-14)


def test_softmax_survives_huge_scores():
    s = softmax(t([[1e4, 1e4 - 1.0, -1e4]]))
    assert torch.isfinite(s).all()
    assert s[0, 0].item() == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)


def test_inner_dim_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError, match="inner dim"):
        scaled_dot_attention(torch.zeros(2, 3, dtype=D), torch.zeros(2, 4, dtype=D), torch.zeros(2, 4, dtype=D))
    with pytest.raises(ShapeError, match="V rows"):
        scaled_dot_attention(torch.zeros(2, 3, dtype=D), torch.zeros(2, 3, dtype=D), torch.zeros(3, 4, dtype=D))


def test_fully_masked_row_raises():
    q = torch.randn(2, 3, dtype=D)
    allowed = torch.tensor([[True, False], [False, False]])
    with pytest.raises(MaskError, match="fully masked row"):
        scaled_dot_attention(q, q, q, allowed)


def test_padding_mask_zeroes_pad_keys():
    x = torch.randn(3, 4, dtype=D)
    valid = torch.tensor([True, True, False])
    _, w = scaled_dot_attention(x, x, x, Mask.padding(valid))
    assert torch.equal(w[:, 2], torch.zeros(3, dtype=D))
    assert torch.allclose(w.sum(-1), torch.ones(3, dtype=D), atol=1e-15)


# ---------------------------------------------------------------- multi-head


def _identity_params(d):
    eye, zero = torch.eye(d, dtype=D), torch.zeros(d, dtype=D)
    return {"w_q": eye, "b_q": zero, "w_k": eye, "b_k": zero, "w_v": eye, "b_v": zero,
            "w_o": eye, "b_o": zero}


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        AttentionConfig(6, 4)


def test_one_identity_head_is_plain_attention():
    x, z = torch.randn(3, 4, dtype=D), torch.randn(5, 4, dtype=D)
    out, _ = multi_head_attention(x, z, AttentionConfig(4, 1), _identity_params(4))
    ref, _ = scaled_dot_attention(x, z, z)
    assert torch.allclose(out, ref, atol=1e-14)


def test_causal_position_zero_sees_only_row_zero():
    cfg = AttentionConfig(8, 2)
    blk = TransformerBlock(cfg)
    p = blk.attn.params()
    x = torch.randn(5, 8, dtype=D)
    y = x.clone()
    y[1:] = torch.randn(4, 8, dtype=D)
    a, _ = multi_head_attention(x, x, cfg, p, Mask.causal(5))
    b, _ = multi_head_attention(y, y, cfg, p, Mask.causal(5))
    assert torch.equal(a[0], b[0])


def _reference_mha(x, z, heads, p):
    """Loop over heads and query rows with numpy; nothing shared with the library."""
    x, z = x.numpy(), z.numpy()
    p = {k: v.detach().numpy() for k, v in p.items()}
    dm = x.shape[1]
    d = dm // heads
    q_all, k_all, v_all = x @ p["w_q"] + p["b_q"], z @ p["w_k"] + p["b_k"], z @ p["w_v"] + p["b_v"]
    concat = np.zeros((x.shape[0], dm))
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        for i in range(x.shape[0]):
            s = np.array([q_all[i, cols] @ k_all[j, cols] / math.sqrt(d) for j in range(z.shape[0])])
            e = np.exp(s - s.max())
            concat[i, cols] = (e / e.sum()) @ v_all[:, cols]
    return concat @ p["w_o"] + p["b_o"]


def test_two_heads_match_per_head_reference():
    torch.manual_seed(5)
    blk = TransformerBlock(AttentionConfig(8, 2))
    x, z = torch.randn(3, 8, dtype=D), torch.randn(4, 8, dtype=D)
    out, w = multi_head_attention(x, z, blk.cfg, blk.attn.params())
    assert w.shape == (2, 3, 4)
    np.testing.assert_allclose(out.detach().numpy(), _reference_mha(x, z, 2, blk.attn.params()),
                               rtol=0, atol=1e-13)


# ---------------------------------------------------------------- block


def test_zero_output_layers_reduce_block_to_identity():
    blk = TransformerBlock(AttentionConfig(4, 2))
    with torch.no_grad():
        for p in (blk.attn.w_o, blk.attn.b_o, blk.ffn.w2, blk.ffn.b2):
            p.zero_()
    x, z = torch.randn(3, 4, dtype=D), torch.randn(2, 4, dtype=D)
    assert torch.equal(blk(x, z), x)


def test_block_equals_composed_sub_operations():
    torch.manual_seed(2)
    blk = TransformerBlock(AttentionConfig(4, 2))
    x, z = torch.randn(2, 4, dtype=D), torch.randn(3, 4, dtype=D)
    p = blk.params()
    xn = layer_norm(x, p["norm1"]["gain"], p["norm1"]["bias"])
    zn = layer_norm(z, p["norm1"]["gain"], p["norm1"]["bias"])
    a, _ = multi_head_attention(xn, zn, blk.cfg, p["attn"])
    h = x + a
    ref = h + feed_forward(layer_norm(h, p["norm2"]["gain"], p["norm2"]["bias"]), p["ffn"])
    assert torch.equal(transformer_block(x, z, blk.cfg, p), ref)


def test_block_capture_records_weights():
    blk = TransformerBlock(AttentionConfig(4, 2))
    cap = []
    blk(torch.randn(2, 4, dtype=D), torch.randn(3, 4, dtype=D), capture=cap)
    assert len(cap) == 1 and cap[0].shape == (2, 2, 3)
    assert not cap[0].requires_grad


# ---------------------------------------------------------------- layer norm


def _unit():
    return torch.ones(4, dtype=D), torch.zeros(4, dtype=D)


def test_layer_norm_constant_row():
    assert torch.equal(layer_norm(t([[1.0, 1.0, 1.0, 1.0]]), *_unit()), torch.zeros(1, 4, dtype=D))


def test_layer_norm_symmetric_pair():
    out = layer_norm(t([-3.0, 3.0]), torch.ones(2, dtype=D), torch.zeros(2, dtype=D))
    assert out.tolist() == pytest.approx([-1.0, 1.0], abs=1e-6)


def test_layer_norm_formula_values():
    out = layer_norm(t([1.0, 2.0, 3.0, 4.0]), *_unit())
    # (x - 2.5) / sqrt(1.25 + 1e-5)
    assert out.tolist() == pytest.approx(
        [-1.3416354199689269, -0.447211806656309, 0.447211806656309, 1.3416354199689269], abs=1e-14)


# ---------------------------------------------------------------- grad check


def test_grad_check_quadratic():
    assert grad_check(lambda x: (x ** 2).sum(), [torch.randn(5, dtype=D)]) < 1e-7


def test_grad_check_attention():
    torch.manual_seed(0)
    q, k, v = (torch.randn(3, 4, dtype=D) for _ in range(3))
    assert grad_check(lambda q, k, v: scaled_dot_attention(q, k, v)[0].sum(), [q, k, v]) < 1e-4


def test_grad_check_flags_a_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert grad_check(Wrong.apply, [torch.randn(4, dtype=D) + 2]) > 0.1


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ConfigError):
        grad_check(lambda x: x * 2, [torch.randn(3, dtype=D)])
