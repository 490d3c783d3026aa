"""Building blocks shared by generators, encoders and discriminators.

All convolutional normalisation is layer normalisation over (C, H, W) of each
instance with a per-channel affine (``GroupNorm`` with one group). Batch
normalisation is deliberately absent.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ShapeError",
    "LayerNorm2d",
    "GLUNorm",
    "glu_norm",
    "UPBlk",
    "DOWNBlk",
    "RESBlk0",
    "RESBlk",
    "conv3",
    "conv4s2",
]


class ShapeError(ValueError):
    """Tensor shape does not match what a block or network expects."""


def conv3(c_i: int, c_o: int) -> nn.Conv2d:
    return nn.Conv2d(c_i, c_o, kernel_size=3, stride=1, padding=1)


def conv4s2(c_i: int, c_o: int, padding: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_i, c_o, kernel_size=4, stride=2, padding=padding)


class LayerNorm2d(nn.GroupNorm):
    """Layer norm over (C, H, W) with per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__(1, channels, eps=eps, affine=True)


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{where}: expected a 4-d (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{where}: expected {expected} channels, got {x.shape[1]}")


def glu_norm(x: torch.Tensor, norm: nn.Module | None = None) -> torch.Tensor:
    """Gated linear unit that layer-normalises only the gated half.

    ``x`` is split along channels into ``(x_L, x_R)``; the result is
    ``sigmoid(x_R) * LayerNorm(x_L)``. Without ``norm`` a parameter-free
    layer norm over (C, H, W) is used.
    """
    if x.dim() != 4:
        raise ShapeError(f"glu_norm: expected (N, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] % 2:
        raise ShapeError(f"glu_norm: channel count must be even, got {x.shape[1]}")
    x_l, x_r = x.chunk(2, dim=1)
    if norm is None:
        x_l = F.group_norm(x_l, 1)
    else:
        x_l = norm(x_l)
    return torch.sigmoid(x_r) * x_l


class GLUNorm(nn.Module):
    def __init__(self, out_channels: int):
        super().__init__()
        self.out_channels = out_channels
        self.norm = LayerNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, 2 * self.out_channels, "GLUNorm")
        return glu_norm(x, self.norm)


class UPBlk(nn.Module):
    """Nearest x2 upsample, 3x3 conv to ``2 c_o``, GLUNorm to ``c_o``.

    With ``upsample=False`` the block keeps the resolution (used for the
    encoder bypass heads).
    """

    def __init__(self, c_i: int, c_o: int, upsample: bool = True):
        super().__init__()
        self.c_i, self.c_o, self.upsample = c_i, c_o, upsample
        self.conv = conv3(c_i, 2 * c_o)
        self.glu = GLUNorm(c_o)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.c_i, "UPBlk")
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.glu(self.conv(x))


class DOWNBlk(nn.Module):
    """4x4 stride-2 conv, layer norm, leaky ReLU(0.2)."""

    def __init__(self, c_i: int, c_o: int):
        super().__init__()
        self.c_i, self.c_o = c_i, c_o
        self.conv = conv4s2(c_i, c_o)
        self.norm = LayerNorm2d(c_o)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.c_i, "DOWNBlk")
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ShapeError(f"DOWNBlk: spatial sides must be even, got {tuple(x.shape[-2:])}")
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class RESBlk0(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.c = c
        self.branch = nn.Sequential(conv3(c, 2 * c), GLUNorm(c), conv3(c, 2 * c), GLUNorm(c))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.c, "RESBlk0")
        return x + self.branch(x)


class RESBlk(nn.Module):
    """Conditioned residual stage: the code is tiled spatially and concatenated."""

    def __init__(self, c_i: int, d: int, c_o: int):
        super().__init__()
        self.c_i, self.d, self.c_o = c_i, d, c_o
        self.entry = nn.Sequential(conv3(c_i + d, 2 * c_i), GLUNorm(c_i))
        self.res = nn.Sequential(RESBlk0(c_i), RESBlk0(c_i))
        self.exit = nn.Sequential(conv3(c_i, 2 * c_o), GLUNorm(c_o))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.c_i, "RESBlk")
        if cond.dim() != 2 or cond.shape[1] != self.d or cond.shape[0] != x.shape[0]:
            raise ShapeError(
                f"RESBlk: conditioning must be ({x.shape[0]}, {self.d}), got {tuple(cond.shape)}"
            )
        tiled = cond[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        h = self.entry(torch.cat([x, tiled], dim=1))
        return self.exit(self.res(h))
