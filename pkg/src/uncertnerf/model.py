"""Feed-forward renderer: source encoder, view aggregation, point heads, render weights."""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import SourceView, build_sample_set, pixel_to_ray, sample_along_ray
from .gmm import composite

SIGMA_MIN = 1e-3


def positional_encoding(x: torch.Tensor, n_freqs: int = 4) -> torch.Tensor:
    out = [x]
    for level in range(n_freqs):
        out.append(torch.sin((2.0 ** level) * math.pi * x))
        out.append(torch.cos((2.0 ** level) * math.pi * x))
    return torch.cat(out, dim=-1)


def canonical_view_order(feats, colors, valid):
    """Reorder the leading view axis per sample by a fixed key of each view's own inputs.

    Later reductions over views then see the same operand order whatever order
    the views arrived in, which makes the aggregation bitwise permutation
    invariant rather than invariant up to rounding. Only views with
    bit-identical inputs can tie, and swapping those changes nothing.
    """
    key = colors @ _COLOR_KEY.to(colors.dtype) + feats.sum(-1) * 0.7071067811865476
    key = torch.where(valid, key, torch.full_like(key, float("inf")))
    order = torch.argsort(key, dim=0, stable=True)
    feats = torch.gather(feats, 0, order.unsqueeze(-1).expand_as(feats))
    colors = torch.gather(colors, 0, order.unsqueeze(-1).expand_as(colors))
    valid = torch.gather(valid, 0, order)
    return feats, colors, valid


_COLOR_KEY = torch.tensor([1.0, 0.5773502691896258, 0.3333333333333333])


class SourceEncoder(nn.Module):
    """Shared stride-2 conv encoder; ``N x H x W x 3 -> N x ceil(H/2) x ceil(W/2) x C``."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(images).all():
            raise ValueError("source images contain non-finite values")
        x = images.permute(0, 3, 1, 2)
        return self.net(x).permute(0, 2, 3, 1)


class ViewAggregator(nn.Module):
    """Single-head attention pooling of per-view evidence into one token per sample.

    The query comes from the encoded sample position and ray direction; keys and
    values are linear projections of each view's feature, color and absolute
    deviation from the mean color of the valid views. Invalid views are
    excluded from the softmax.

    Because keys and values are linear and the attention weights sum to one,
    ``q . (W_k x_n + b_k) = (W_k^T q) . x_n + q . b_k`` and
    ``sum_n p_n (W_v x_n + b_v) = W_v (sum_n p_n x_n) + b_v``; both are evaluated
    in that order so no per-view hidden vectors are materialized.
    """

    def __init__(self, feat_dim: int = 32, hidden: int = 64, n_freqs: int = 4):
        super().__init__()
        self.n_freqs = n_freqs
        q_in = 3 + 6 * n_freqs + 3
        view_in = feat_dim + 6
        self.query = nn.Sequential(nn.Linear(q_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden))
        self.key = nn.Linear(view_in, hidden)
        self.value = nn.Linear(view_in, hidden)
        self.out_proj = nn.Linear(hidden, hidden)
        self.null_token = nn.Parameter(torch.zeros(hidden))
        self.hidden = hidden

    def view_inputs(self, feats, colors, valid):
        w = valid.unsqueeze(-1).to(colors.dtype)
        count = w.sum(0).clamp(min=1)
        mean_c = (colors * w).sum(0) / count
        dev = (colors - mean_c) * w
        return torch.cat([feats, colors, dev.abs()], dim=-1)

    def forward(self, feats, colors, valid, x_norm, dirs):
        """feats (N,...,C), colors (N,...,3), valid (N,...), x_norm (...,3), dirs (...,3) -> (...,hidden)."""
        feats, colors, valid = canonical_view_order(feats, colors, valid)
        x = self.view_inputs(feats, colors, valid)
        q = self.query(torch.cat([positional_encoding(x_norm, self.n_freqs), dirs.expand_as(x_norm)], -1))
        qk = q @ self.key.weight
        logits = ((x * qk).sum(-1) + (q * self.key.bias).sum(-1)) / math.sqrt(self.hidden)
        any_valid = valid.any(0)
        logits = logits.masked_fill(~valid, float("-inf"))
        logits = torch.where(any_valid, logits, torch.zeros_like(logits))
        m = logits.max(0, keepdim=True).values
        e = torch.exp(logits - m)
        p = e / e.sum(0)
        pooled = (p.unsqueeze(-1) * x).sum(0)
        token = self.out_proj(self.value(pooled))
        if bool(any_valid.all()):
            return token
        return torch.where(any_valid.unsqueeze(-1), token, self.null_token.expand_as(token))


class PointHead(nn.Module):
    """Token -> color mean in [0,1]^3 and variance >= sigma_min."""

    def __init__(self, hidden: int = 64, sigma_min: float = SIGMA_MIN):
        super().__init__()
        self.sigma_min = sigma_min
        self.color = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 3))
        self.beta = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, token):
        mu = torch.sigmoid(self.color(token))
        sigma2 = F.softplus(self.beta(token)).squeeze(-1) + self.sigma_min
        return mu, sigma2


class RenderWeightHead(nn.Module):
    """A learned ray-level query attending over the K sample tokens of a ray."""

    def __init__(self, hidden: int = 64, n_freqs: int = 4):
        super().__init__()
        self.n_freqs = n_freqs
        self.key_hidden = nn.Sequential(nn.Linear(hidden + 1 + 2 * n_freqs, hidden), nn.ReLU())
        self.key_out = nn.Linear(hidden, hidden)
        self.query = nn.Parameter(torch.randn(hidden) / math.sqrt(hidden))
        self.hidden = hidden

    def logits(self, tokens, t_norm):
        pe = positional_encoding(t_norm.unsqueeze(-1), self.n_freqs)
        h = self.key_hidden(torch.cat([tokens, pe], -1))
        # key . query without materializing the keys
        return (h @ (self.query @ self.key_out.weight) + self.key_out.bias @ self.query) / math.sqrt(self.hidden)

    def forward(self, tokens, t_norm):
        return torch.softmax(self.logits(tokens, t_norm), dim=-1)


@dataclass
class RendererConfig:
    near: float = 1.5
    far: float = 7.0
    n_samples: int = 48
    scene_bound: float = 2.5
    feat_dim: int = 32
    hidden: int = 64
    n_freqs: int = 4
    sigma_min: float = SIGMA_MIN


class GeneralizableRenderer(nn.Module):
    def __init__(self, cfg: Optional[RendererConfig] = None):
        super().__init__()
        self.cfg = cfg or RendererConfig()
        c = self.cfg
        self.encoder = SourceEncoder(c.feat_dim)
        self.aggregator = ViewAggregator(c.feat_dim, c.hidden, c.n_freqs)
        self.point_head = PointHead(c.hidden, c.sigma_min)
        self.weight_head = RenderWeightHead(c.hidden, c.n_freqs)

    def make_sources(self, images: torch.Tensor, cameras) -> List[SourceView]:
        """images: N x H x W x 3; cameras: sequence of (Intrinsics, Pose)."""
        feats = self.encoder(images)
        return [SourceView(images[i], feats[i], intr, pose) for i, (intr, pose) in enumerate(cameras)]

    def forward(self, origins, dirs, sources: Sequence[SourceView], depths=None,
                stratified: bool = False, generator=None) -> Dict[str, torch.Tensor]:
        c = self.cfg
        if depths is None:
            depths = sample_along_ray(c.near, c.far, c.n_samples, stratified, generator,
                                      n_rays=origins.shape[0], dtype=origins.dtype)
        s = build_sample_set(origins, dirs, depths, sources)
        x_norm = s.points / c.scene_bound
        tokens = self.aggregator(s.features, s.colors, s.valid, x_norm, dirs.unsqueeze(-2))
        mu, sigma2 = self.point_head(tokens)
        t_norm = 2 * (depths - c.near) / (c.far - c.near) - 1
        alpha = self.weight_head(tokens, t_norm)
        px = composite(alpha, mu, sigma2)
        return {"color": px.color, "beta_s": px.beta_s, "alpha": alpha, "mu": mu, "sigma2": sigma2}

    @torch.no_grad()
    def render_image(self, intr, pose, sources: Sequence[SourceView], chunk: int = 2048):
        dtype = sources[0].image.dtype
        v, u = torch.meshgrid(torch.arange(intr.height, dtype=dtype), torch.arange(intr.width, dtype=dtype),
                              indexing="ij")
        ray = pixel_to_ray(intr, pose, u.reshape(-1), v.reshape(-1))
        colors, betas = [], []
        for i in range(0, ray.origin.shape[0], chunk):
            out = self(ray.origin[i:i + chunk], ray.direction[i:i + chunk], sources)
            colors.append(out["color"])
            betas.append(out["beta_s"])
        return (torch.cat(colors).reshape(intr.height, intr.width, 3),
                torch.cat(betas).reshape(intr.height, intr.width))
