import json

import numpy as np
import pytest
import torch

from micap import interpretability as ip
from micap.combiner import AttentionCapture
from micap.decoder import DecoderCapture
from micap.errors import ConfigError, DataError, RangeError
from micap.model import MICapModel, make_batch
from micap.synthdata import Sample, generate_dataset

from conftest import tiny_config


def test_generation_unchanged_by_capture(tiny_model, tiny_archive):
    for s in tiny_archive.samples[:4]:
        plain = tiny_model.generate(make_batch([s], tiny_archive.vocab, tiny_model.cfg, "micap"), "micap", 3)[0]
        exp = ip.capture_pass(tiny_model, s, tiny_archive.vocab, "micap", beam=3)
        assert exp.caption == plain
        assert exp.attention.video_audio and exp.decoder.self_attn


def test_forward_unchanged_by_capture(tiny_model, tiny_archive):
    b = make_batch(tiny_archive.samples[:3], tiny_archive.vocab, tiny_model.cfg, "fusion")
    with torch.no_grad():
        a = tiny_model(b, "fusion").logits
        c = tiny_model(b, "fusion", capture=True).logits
    assert torch.equal(a, c)


def _explained(tiny_model, tiny_archive, caption=(5, 6, 7)):
    return ip.capture_pass(tiny_model, tiny_archive.samples[0], tiny_archive.vocab, "micap",
                           caption=list(caption))


def test_single_head_heatmap_is_raw_row(tiny_archive):
    torch.manual_seed(0)
    model = MICapModel(tiny_config(len(tiny_archive.vocab), heads=1)).eval()
    exp = _explained(model, tiny_archive)
    hm = ip.extract_cross_attention(exp, "video_audio", 0)
    n = int(exp.audio_valid.sum())
    assert np.array_equal(hm.raw[0], exp.attention.video_audio[-1][0, 0, 0, :n].numpy())
    assert hm.grid.max() == 1.0


def test_mean_of_heads_equals_mean_of_per_head_maps(tiny_model, tiny_archive):
    exp = _explained(tiny_model, tiny_archive)
    for branch in ip.BRANCHES:
        mean = ip.extract_cross_attention(exp, branch, 2, head_agg="mean").raw
        per = [ip.extract_cross_attention(exp, branch, 2, head_agg=k).raw for k in range(2)]
        np.testing.assert_allclose(mean, (per[0] + per[1]) / 2, rtol=0, atol=1e-15)


def test_video_heatmap_shape(tiny_model, tiny_archive):
    exp = _explained(tiny_model, tiny_archive)
    hm = ip.extract_cross_attention(exp, "audio_video", 0)
    assert hm.grid.shape == (2, 2, 2)  # frames, patch rows, patch cols
    dec = ip.extract_cross_attention(exp, "decoder", 2, vocab=tiny_archive.vocab)
    assert dec.grid.shape == (1, 3) and dec.labels[0] == "[CLS]"


def test_one_audio_token_heatmap_is_one(tiny_model):
    cap = AttentionCapture()
    x_v, x_a = torch.randn(1, 4, 16, dtype=torch.float64), torch.randn(1, 3, 16, dtype=torch.float64)
    tiny_model.combiner(x_v, x_a, torch.tensor([[True, False, False]]), cap)
    exp = ip.Explained([5], cap, DecoderCapture(), torch.tensor([True, False, False]), 1, (2, 2))
    assert ip.extract_cross_attention(exp, "video_audio", 0).grid.tolist() == [[1.0]]


def test_invalid_indices_are_range_errors(tiny_model, tiny_archive):
    exp = _explained(tiny_model, tiny_archive)
    with pytest.raises(RangeError):
        ip.extract_cross_attention(exp, "video_audio", 0, layer=3)
    with pytest.raises(RangeError):
        ip.extract_cross_attention(exp, "video_audio", 0, head_agg=2)
    with pytest.raises(RangeError):
        ip.extract_cross_attention(exp, "decoder", 3)
    with pytest.raises(ConfigError):
        ip.extract_cross_attention(exp, "sideways", 0)
    with pytest.raises(RangeError):
        ip.input_saliency(tiny_model, tiny_archive.samples[0], tiny_archive.vocab, "micap", 5, [5, 6])


def test_normalize_scores():
    assert ip.normalize_scores(np.array([1.0, 2.0, 4.0])).tolist() == [0.25, 0.5, 1.0]
    with pytest.raises(ConfigError):
        ip.normalize_scores(np.zeros(3))
    with pytest.raises(ConfigError):
        ip.normalize_scores(np.array([-1.0, 1.0]))


# ---------------------------------------------------------------- saliency


@pytest.fixture
def pixel_model(tiny_archive):
    torch.manual_seed(3)
    cfg = tiny_config(len(tiny_archive.vocab), frame_hw=(4, 4), patch=2, max_frames=2)
    model = MICapModel(cfg).eval()
    rng = np.random.default_rng(0)
    src = tiny_archive.samples[0]
    sample = Sample("toy", rng.integers(0, 256, (2, 4, 4, 3), dtype=np.uint8), src.video_caption,
                    src.audio_caption, src.references)
    return model, sample


def _fd_gradient(f, x, eps=1e-6):
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        down = f(x).item()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def _rel(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def test_saliency_matches_finite_differences(pixel_model, tiny_archive):
    model, sample = pixel_model
    vocab = tiny_archive.vocab
    caption = [5, 9, 12]
    sal = ip.input_saliency(model, sample, vocab, "micap", 2, caption)
    b = make_batch([sample], vocab, model.cfg, "micap")
    emb = model.audio_encoder.embed_tokens(b.audio_ids).detach()
    with torch.no_grad():
        fd_px = _fd_gradient(lambda p: ip.selected_logit(model, "micap", p, emb, b.audio_valid, caption, 2),
                             b.pixels.clone())
        fd_emb = _fd_gradient(lambda e: ip.selected_logit(model, "micap", b.pixels, e, b.audio_valid, caption, 2),
                              emb.clone())
    assert _rel(sal.pixel_grad, fd_px[0]) < 1e-3
    assert _rel(sal.embedding_grad, fd_emb[0]) < 1e-3
    assert sal.video_patches.shape == (2, 2, 2) and sal.video_patches.max() == 1.0
    assert sal.video_pixels.shape == (2, 4, 4)


def test_audio_saliency_is_zero_at_padding(pixel_model, tiny_archive):
    model, sample = pixel_model
    sal = ip.input_saliency(model, sample, tiny_archive.vocab, "micap", 0, [5])
    n = len(sample.audio_caption.split()) + 2
    assert np.all(sal.audio_tokens[n:] == 0) and sal.audio_tokens[:n].max() == 1.0


# ---------------------------------------------------------------- embeddings


def test_untrained_gap_is_small():
    ds = generate_dataset(64, 8, dims=(8, 8), frames=2)
    torch.manual_seed(0)
    model = MICapModel(tiny_config(len(ds.vocab))).eval()
    s = ip.alignment_summary(*ip.pooled_embeddings(model, ds.samples, ds.vocab))
    assert s.samples == 64 and abs(s.gap) < 0.1


def test_alignment_summary_by_hand():
    c = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    s = ip.alignment_summary(c, c)
    assert (s.positive_cosine, s.negative_cosine, s.gap) == (1.0, 0.0, 1.0)


def test_export_embeddings(tiny_model, tiny_archive, tmp_path):
    out = tmp_path / "e.jsonl"
    s = ip.export_pair_embeddings(tiny_model, tiny_archive.samples, tiny_archive.vocab, out)
    rows = ip.read_embeddings(out)
    assert len(rows) == len(tiny_archive.samples) and len(rows[0]["c_v"]) == 16
    assert json.loads((tmp_path / "e.summary.json").read_text())["gap"] == pytest.approx(s.gap)
    with pytest.raises(DataError):
        ip.export_pair_embeddings(tiny_model, [], tiny_archive.vocab, out)
    with pytest.raises(ConfigError):
        ip.pooled_embeddings(tiny_model, tiny_archive.samples, tiny_archive.vocab, "vision_based")


# ---------------------------------------------------------------- rendering


def test_upsampled_corner_is_fully_tinted():
    img = ip.heatmap_image(np.array([[1.0, 0.0], [0.0, 0.0]]), (8, 8))
    assert (img[:4, :4] == [255, 0, 0]).all()
    assert (img[4:, :] == 0).all() and (img[:, 4:] == 0).all()


def test_uniform_heatmap_gives_uniform_tint():
    img = ip.heatmap_image(np.full((3, 3), 0.5), (6, 6))
    assert (img == img[0, 0]).all() and tuple(img[0, 0]) == (128, 0, 0)


def test_overlay_blends_half_and_half():
    frame = np.full((4, 4, 3), 100, dtype=np.uint8)
    img = ip.heatmap_image(np.ones((2, 2)), overlay=frame)
    assert tuple(img[0, 0]) == (178, 50, 50)


def test_ppm_file_format(tmp_path):
    grid = np.array([[1.0, 0.0, 0.25]])
    path = tmp_path / "h.ppm"
    image = ip.render_heatmap(grid, path, size=(2, 3))
    data = path.read_bytes()
    assert data.startswith(b"P6\n3 2\n255\n") and len(data) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3
    assert np.array_equal(ip.read_ppm(path), image)


def test_ppm_pixels_may_be_whitespace_bytes(tmp_path):
    image = np.full((2, 2, 3), ord(" "), dtype=np.uint8)
    ip.write_ppm(image, tmp_path / "w.ppm")
    assert np.array_equal(ip.read_ppm(tmp_path / "w.ppm"), image)


def test_svg_and_unknown_format(tmp_path):
    ip.render_heatmap(np.eye(2), tmp_path / "h.svg")
    assert (tmp_path / "h.svg").read_text().startswith("<svg")
    with pytest.raises(ConfigError):
        ip.render_heatmap(np.eye(2), tmp_path / "h.bmp")
