"""Patch losses, uncertainty fusion and the heteroscedastic objectives.

Patches are laid out as ``(B, 3, 3, 3)``: batch, patch row, patch column,
color channel.
"""
import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import torch
import torch.nn.functional as F

MODES = ("no_beta", "beta_s_only", "beta_t_only", "mse_only", "ssim_only", "full")
C1 = 0.01 ** 2
C2 = 0.03 ** 2


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class LossConfig:
    lam: float = 0.1
    omega: float = 0.5
    w_mse: float = 0.8
    w_ssim: float = 0.2
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}; expected one of {MODES}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0 <= self.omega <= 1:
            raise ValueError("omega must lie in [0, 1]")
        if abs(self.w_mse + self.w_ssim - 1) > 1e-9:
            raise ValueError("w_mse + w_ssim must equal 1")

    @property
    def effective_omega(self) -> float:
        return {"beta_s_only": 0.0, "beta_t_only": 1.0}.get(self.mode, self.omega)


@dataclass
class PatchBatch:
    gt: torch.Tensor  # B x 3 x 3 x 3
    pred: torch.Tensor
    beta_s: torch.Tensor  # B, mean over the 9 rays
    beta_t: torch.Tensor  # B, patch-center value
    pixels: Optional[torch.Tensor] = None  # B x 3 x 3 x 2 (u, v)


def mse_patch(P: torch.Tensor, P_hat: torch.Tensor) -> torch.Tensor:
    return ((P - P_hat) ** 2).flatten(1).mean(1)


def ssim_patch(P: torch.Tensor, P_hat: torch.Tensor) -> torch.Tensor:
    """SSIM per patch: per-channel statistics over the 9 positions, channel-averaged."""
    x = P.flatten(1, 2)  # B x 9 x 3
    y = P_hat.flatten(1, 2)
    mx, my = x.mean(1), y.mean(1)
    vx = ((x - mx.unsqueeze(1)) ** 2).mean(1)
    vy = ((y - my.unsqueeze(1)) ** 2).mean(1)
    cxy = ((x - mx.unsqueeze(1)) * (y - my.unsqueeze(1))).mean(1)
    s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2))
    return s.mean(-1)


def fuse_uncertainty(beta_t, beta_s, omega: float):
    return omega * beta_t + (1 - omega) * beta_s


class LossOutput(NamedTuple):
    loss: torch.Tensor
    diagnostics: Dict[str, torch.Tensor]


def multi_uncer_loss(batch: PatchBatch, cfg: LossConfig) -> LossOutput:
    """Uncertainty-modulated patch loss, averaged over patches.

    Per patch: ``(w_ssim (1 - SSIM) + w_mse MSE) / (2 b^2) + lam log b`` with
    ``b = omega beta_t + (1 - omega) beta_s``. ``no_beta`` drops the
    uncertainty entirely.
    """
    mse = mse_patch(batch.gt, batch.pred)
    ssim_loss = 1 - ssim_patch(batch.gt, batch.pred)
    w_mse = 0.0 if cfg.mode == "ssim_only" else cfg.w_mse
    w_ssim = 0.0 if cfg.mode == "mse_only" else cfg.w_ssim
    data = w_mse * mse + w_ssim * ssim_loss
    if cfg.mode == "no_beta":
        beta = torch.ones_like(data)
        data_term = data
        log_term = torch.zeros_like(data)
    else:
        beta = fuse_uncertainty(batch.beta_t, batch.beta_s, cfg.effective_omega)
        data_term = data / (2 * beta ** 2)
        log_term = cfg.lam * torch.log(beta)
    per_patch = data_term + log_term
    loss = per_patch.mean()
    diag = {"data": data, "data_term": data_term, "log_term": log_term, "beta_ts": beta,
            "beta_s": batch.beta_s, "beta_t": batch.beta_t, "mse": mse, "ssim": 1 - ssim_loss}
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite loss", {k: v.detach() for k, v in diag.items()})
    return LossOutput(loss, diag)


def uncer_loss_single(C: torch.Tensor, C_hat: torch.Tensor, beta: torch.Tensor, lam: float) -> torch.Tensor:
    """Single-uncertainty heteroscedastic loss for per-ray colors ``(B, 3)``."""
    mse = ((C - C_hat) ** 2).mean(-1)
    loss = (mse / (2 * beta ** 2) + lam * torch.log(beta)).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite loss")
    return loss


# ---------------------------------------------------------------------------
# image metrics


def psnr(img: torch.Tensor, ref: torch.Tensor, cap: float = 99.0) -> float:
    mse = float(((img.double() - ref.double()) ** 2).mean())
    if mse == 0:
        return cap
    return min(cap, 10 * math.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_image(img: torch.Tensor, ref: torch.Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of two ``H x W x 3`` images with a Gaussian window (valid region only)."""
    x = img.double().permute(2, 0, 1).unsqueeze(0)
    y = ref.double().permute(2, 0, 1).unsqueeze(0)
    c = x.shape[1]
    w = _gaussian_window(window, sigma, x.dtype).expand(c, 1, window, window)

    def filt(t):
        return F.conv2d(t, w, groups=c)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx ** 2
    vy = filt(y * y) - my ** 2
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2))
    return float(s.mean())
