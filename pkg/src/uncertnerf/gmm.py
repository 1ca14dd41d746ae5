"""Compositing per-sample isotropic Gaussians into pixel color and uncertainty."""
import math
from typing import NamedTuple

import torch


class PixelRender(NamedTuple):
    color: torch.Tensor  # (..., 3)
    beta_s: torch.Tensor  # (...)


def composite(alpha: torch.Tensor, mu: torch.Tensor, sigma2: torch.Tensor, atol: float = 1e-6) -> PixelRender:
    """Weighted mean color ``sum a_k mu_k`` and uncertainty ``sum a_k^2 s2_k``.

    The uncertainty is the variance of the weighted sum of independent
    components, which is not the variance of the mixture itself.

    alpha: (..., K), mu: (..., K, 3), sigma2: (..., K)
    """
    err = (alpha.sum(-1) - 1).abs().max() if alpha.numel() else 0.0
    if err > atol:
        raise ValueError(f"render weights must sum to one (max deviation {float(err):.3g})")
    color = (alpha.unsqueeze(-1) * mu).sum(-2)
    beta_s = (alpha * alpha * sigma2).sum(-1)
    return PixelRender(color, beta_s)


def mixture_pdf(alpha: torch.Tensor, mu: torch.Tensor, sigma2: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Density of ``sum a_k N(mu_k, s2_k I_3)`` at ``z`` (..., 3)."""
    diff2 = ((z.unsqueeze(-2) - mu) ** 2).sum(-1)
    log_norm = -1.5 * torch.log(2 * math.pi * sigma2)
    return (alpha * torch.exp(log_norm - 0.5 * diff2 / sigma2)).sum(-1)


def sample_mixture(alpha, mu, sigma2, n: int, generator=None) -> torch.Tensor:
    """Draw ``n`` samples from a single mixture (alpha: K, mu: K x 3, sigma2: K)."""
    comp = torch.multinomial(alpha, n, replacement=True, generator=generator)
    noise = torch.randn(n, 3, generator=generator, dtype=mu.dtype)
    return mu[comp] + noise * sigma2[comp].sqrt().unsqueeze(-1)
