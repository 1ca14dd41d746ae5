"""Dense per-pixel uncertainty predicted from the target image (training only)."""
import torch
import torch.nn as nn
import torch.nn.functional as F

BETA_MIN = 1e-3
STRIDE = 8


class TargetEncoder(nn.Module):
    """Stride-8 conv stack: ``H x W x 3 -> H/8 x W/8 x C``."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        H, W = image.shape[-3], image.shape[-2]
        if H % STRIDE or W % STRIDE:
            raise ValueError(f"image size {H}x{W} not divisible by {STRIDE}")
        x = image.reshape(-1, H, W, 3).permute(0, 3, 1, 2)
        out = self.net(x).permute(0, 2, 3, 1)
        return out.reshape(*image.shape[:-3], *out.shape[1:])


class UncertaintyDecoder(nn.Module):
    """Two 3x3 conv layers followed by a per-pixel two-layer MLP; output >= beta_min."""

    def __init__(self, channels: int = 32, hidden: int = 32, beta_min: float = BETA_MIN):
        super().__init__()
        self.beta_min = beta_min
        self.conv = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(channels, hidden, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU(),
        )
        self.mlp = nn.Sequential(nn.Conv2d(hidden, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, 1, 1))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = feats.reshape(-1, *feats.shape[-3:]).permute(0, 3, 1, 2)
        out = F.softplus(self.mlp(self.conv(x))) + self.beta_min
        out = out.permute(0, 2, 3, 1)
        return out.reshape(*feats.shape[:-1], 1)


def upsample_to_full(low: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Corner-aligned bilinear upsampling of an ``h x w x 1`` map."""
    x = low.permute(2, 0, 1).unsqueeze(0)
    up = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=True)
    return up[0].permute(1, 2, 0)


def sample_beta_t(beta_map: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Values of an ``H x W x 1`` map at integer pixel coordinates."""
    H, W = beta_map.shape[:2]
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    if u.is_floating_point() or v.is_floating_point():
        if not (torch.equal(u, u.round()) and torch.equal(v, v.round())):
            raise ValueError("pixel coordinates must be integers")
        u, v = u.long(), v.long()
    if (u < 0).any() or (u >= W).any() or (v < 0).any() or (v >= H).any():
        raise IndexError("pixel coordinates out of bounds")
    return beta_map[v, u, 0]


class TargetUncertaintyNet(nn.Module):
    def __init__(self, channels: int = 32, hidden: int = 32, beta_min: float = BETA_MIN):
        super().__init__()
        self.encoder = TargetEncoder(channels)
        self.decoder = UncertaintyDecoder(channels, hidden, beta_min)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``H x W x 3`` target image -> ``H x W x 1`` uncertainty map."""
        H, W = image.shape[:2]
        low = self.decoder(self.encoder(image))
        return upsample_to_full(low, H, W)
