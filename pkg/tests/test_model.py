import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from uncertnerf.geometry import Intrinsics, Pose
from uncertnerf.model import (
    SIGMA_MIN,
    GeneralizableRenderer,
    PointHead,
    RendererConfig,
    RenderWeightHead,
    SourceEncoder,
    ViewAggregator,
    positional_encoding,
)


def small_aggregator(seed=0, feat_dim=4, hidden=8, n_freqs=2):
    torch.manual_seed(seed)
    return ViewAggregator(feat_dim, hidden, n_freqs).double()


def view_batch(N=5, S=7, C=4, seed=0, p_valid=0.7):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(N, S, C, generator=g, dtype=torch.float64)
    colors = torch.rand(N, S, 3, generator=g, dtype=torch.float64)
    valid = torch.rand(N, S, generator=g, dtype=torch.float64) < p_valid
    x = torch.randn(S, 3, generator=g, dtype=torch.float64)
    d = F.normalize(torch.randn(S, 3, generator=g, dtype=torch.float64), dim=-1)
    return feats, colors, valid, x, d


def test_positional_encoding_shape_and_values():
    x = torch.tensor([[0.25, -0.5, 1.0]], dtype=torch.float64)
    pe = positional_encoding(x, 3)
    assert pe.shape == (1, 3 + 6 * 3)
    assert torch.equal(pe[:, :3], x)
    torch.testing.assert_close(pe[:, 3:6], torch.sin(math.pi * x))


def test_encoder_shapes_and_weight_sharing():
    torch.manual_seed(0)
    enc = SourceEncoder(32)
    img = torch.rand(1, 64, 96, 3)
    out = enc(torch.cat([img, img]))
    assert out.shape == (2, 32, 48, 32)
    assert torch.equal(out[0], out[1])


def test_encoder_view_permutation():
    torch.manual_seed(0)
    enc = SourceEncoder(8)
    imgs = torch.rand(4, 16, 24, 3)
    perm = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(enc(imgs)[perm], enc(imgs[perm]), rtol=0, atol=1e-6)


def test_encoder_rejects_nan():
    enc = SourceEncoder(8)
    img = torch.rand(1, 8, 8, 3)
    img[0, 1, 1, 1] = float("nan")
    with pytest.raises(ValueError):
        enc(img)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), N=st.integers(1, 8))
def test_aggregator_permutation_bit_identical(seed, N):
    agg = small_aggregator()
    feats, colors, valid, x, d = view_batch(N=N, seed=seed)
    perm = torch.randperm(N, generator=torch.Generator().manual_seed(seed))
    a = agg(feats, colors, valid, x, d)
    b = agg(feats[perm], colors[perm], valid[perm], x, d)
    assert torch.equal(a, b)


def test_aggregator_single_valid_view():
    agg = small_aggregator()
    feats, colors, valid, x, d = view_batch(N=1, p_valid=2.0)
    token = agg(feats, colors, valid, x, d)
    inp = torch.cat([feats[0], colors[0], torch.zeros_like(colors[0])], -1)
    torch.testing.assert_close(token, agg.out_proj(agg.value(inp)), rtol=1e-12, atol=1e-12)


def test_masking_equals_removal():
    agg = small_aggregator(1)
    feats, colors, valid, x, d = view_batch(N=4, S=9, seed=3, p_valid=2.0)
    j = 2
    valid_masked = valid.clone()
    valid_masked[j] = False
    keep = [i for i in range(4) if i != j]
    a = agg(feats, colors, valid_masked, x, d)
    b = agg(feats[keep], colors[keep], valid[keep], x, d)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-14)


def test_no_valid_view_gives_null_token():
    agg = small_aggregator()
    with torch.no_grad():
        agg.null_token.copy_(torch.arange(8, dtype=torch.float64))
    feats, colors, valid, x, d = view_batch(N=3, S=4)
    valid[:, 1] = False
    token = agg(feats, colors, valid, x, d)
    assert torch.equal(token[1], agg.null_token)
    assert torch.isfinite(token).all()


def test_efficient_attention_matches_naive():
    agg = small_aggregator(2)
    feats, colors, valid, x, d = view_batch(N=6, S=11, seed=4, p_valid=0.8)
    valid[0] = True  # at least one valid view per sample
    token = agg(feats, colors, valid, x, d)
    inp = agg.view_inputs(feats, colors, valid)
    q = agg.query(torch.cat([positional_encoding(x, 2), d], -1))
    k = agg.key(inp)
    v = agg.value(inp)
    logits = (k * q).sum(-1) / math.sqrt(8)
    p = torch.softmax(logits.masked_fill(~valid, -math.inf), 0)
    naive = agg.out_proj((p.unsqueeze(-1) * v).sum(0))
    torch.testing.assert_close(token, naive, rtol=1e-10, atol=1e-12)


def _fd_param_check(module, fn, tol, eps=1e-6):
    params = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(fn(), params, allow_unused=True)
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        fd = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            plus = fn().item()
            flat[i] = old - eps
            minus = fn().item()
            flat[i] = old
            fd.view(-1)[i] = (plus - minus) / (2 * eps)
        denom = fd.norm()
        if max(float(denom), float(g.norm())) < 1e-7:
            assert float((g - fd).norm()) < 1e-7
            continue
        assert float((g - fd).norm() / denom) < tol


def test_aggregator_gradients_finite_differences():
    agg = small_aggregator(3)
    feats, colors, valid, x, d = view_batch(N=3, S=5, seed=5, p_valid=0.8)
    w = torch.randn(5, 8, dtype=torch.float64)
    _fd_param_check(agg, lambda: (agg(feats, colors, valid, x, d) * w).sum(), 1e-3)


def test_point_head_zero_init_closed_form():
    head = PointHead(8).double()
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    mu, s2 = head(torch.zeros(4, 8, dtype=torch.float64))
    assert torch.equal(mu, torch.full((4, 3), 0.5, dtype=torch.float64))
    torch.testing.assert_close(s2, torch.full((4,), math.log(2) + SIGMA_MIN, dtype=torch.float64))


def test_point_head_floor_and_gradients():
    torch.manual_seed(0)
    head = PointHead(6).double()
    tok = torch.randn(10, 6, dtype=torch.float64) * 50
    mu, s2 = head(tok)
    assert bool((s2 >= SIGMA_MIN).all()) and bool((mu >= 0).all()) and bool((mu <= 1).all())
    tok = torch.randn(4, 6, dtype=torch.float64)
    w = torch.randn(4, dtype=torch.float64)
    _fd_param_check(head.beta, lambda: (head(tok)[1] * w).sum(), 1e-4)


def test_render_weights_single_sample():
    torch.manual_seed(0)
    head = RenderWeightHead(8, 2).double()
    alpha = head(torch.randn(3, 1, 8, dtype=torch.float64), torch.zeros(3, 1, dtype=torch.float64))
    assert torch.equal(alpha, torch.ones(3, 1, dtype=torch.float64))


def test_render_weights_uniform_for_identical_tokens():
    torch.manual_seed(0)
    head = RenderWeightHead(8, 2).double()
    tok = torch.randn(1, 1, 8, dtype=torch.float64).expand(2, 6, 8)
    alpha = head(tok, torch.full((2, 6), 0.3, dtype=torch.float64))
    torch.testing.assert_close(alpha, torch.full((2, 6), 1 / 6, dtype=torch.float64), rtol=0, atol=1e-15)


def test_render_weights_shift_invariant():
    torch.manual_seed(0)
    head = RenderWeightHead(8, 2).double()
    tok = torch.randn(3, 5, 8, dtype=torch.float64)
    t = torch.linspace(-1, 1, 5, dtype=torch.float64).expand(3, 5)
    logits = head.logits(tok, t)
    torch.testing.assert_close(torch.softmax(logits + 7.5, -1), head(tok, t), rtol=0, atol=1e-14)
    torch.testing.assert_close(head(tok, t).sum(-1), torch.ones(3, dtype=torch.float64))


def test_render_weights_key_identity():
    torch.manual_seed(0)
    head = RenderWeightHead(8, 2).double()
    tok = torch.randn(3, 5, 8, dtype=torch.float64)
    t = torch.rand(3, 5, dtype=torch.float64)
    pe = positional_encoding(t.unsqueeze(-1), 2)
    keys = head.key_out(head.key_hidden(torch.cat([tok, pe], -1)))
    torch.testing.assert_close(head.logits(tok, t), keys @ head.query / math.sqrt(8))


def _tiny_scene(H=16, W=24):
    intr = Intrinsics(20.0, 20.0, (W - 1) / 2, (H - 1) / 2, W, H)
    poses = [Pose.look_at([4 * math.sin(a), 1.0, 4 * math.cos(a)], [0, 0, 0]) for a in (0.0, 0.4, -0.4)]
    images = torch.rand(3, H, W, 3, generator=torch.Generator().manual_seed(0))
    return intr, poses, images


def test_renderer_forward_shapes_and_ranges():
    torch.manual_seed(0)
    r = GeneralizableRenderer(RendererConfig(n_samples=8))
    intr, poses, images = _tiny_scene()
    sources = r.make_sources(images[1:], [(intr, p) for p in poses[1:]])
    img, beta = r.render_image(intr, poses[0], sources, chunk=100)
    assert img.shape == (16, 24, 3) and beta.shape == (16, 24)
    assert bool((img >= 0).all()) and bool((img <= 1).all())
    assert bool((beta > 0).all())


def test_renderer_chunking_does_not_change_output():
    torch.manual_seed(1)
    r = GeneralizableRenderer(RendererConfig(n_samples=6))
    intr, poses, images = _tiny_scene()
    with torch.no_grad():
        sources = r.make_sources(images[1:], [(intr, p) for p in poses[1:]])
    a, _ = r.render_image(intr, poses[0], sources, chunk=50)
    b, _ = r.render_image(intr, poses[0], sources, chunk=4096)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-6)
