"""Patch-grid image encoder producing row-major visual tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

__all__ = ["PatchEncoder", "VisualGrid", "encode_image", "patchify"]


@dataclass
class VisualGrid:
    tokens: torch.Tensor  # [..., N_v, d]
    grid_shape: tuple[int, int]
    patch_size: int


def patchify(images: torch.Tensor, p: int) -> torch.Tensor:
    """``[B, H, W] -> [B, (H/p)*(W/p), p*p]``; token k is patch (k // cols, k % cols)."""
    B, H, W = images.shape
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {p}")
    R, C = H // p, W // p
    return images.reshape(B, R, p, C, p).permute(0, 1, 3, 2, 4).reshape(B, R * C, p * p)


class PatchEncoder(nn.Module):
    """Standardized linear patch embedding, optional learned positions, 0-2 local 3x3 mixing layers.

    With ``mixing_layers=0`` and ``pos_embed=False`` every token depends only
    on its own patch, so permuting patches permutes tokens.
    """

    def __init__(
        self,
        dim: int = 32,
        patch_size: int = 8,
        image_size: tuple[int, int] = (64, 64),
        mixing_layers: int = 1,
        pos_embed: bool = True,
        bias: bool = True,
        input_mean: float = 0.35,
        input_std: float = 0.2,
    ):
        super().__init__()
        if not 0 <= mixing_layers <= 2:
            raise ShapeError("mixing_layers must be 0, 1 or 2")
        H, W = image_size
        if H % patch_size or W % patch_size:
            raise ShapeError(f"image {H}x{W} is not divisible by patch size {patch_size}")
        self.dim, self.patch_size = dim, patch_size
        self.grid_shape = (H // patch_size, W // patch_size)
        self.embed = nn.Linear(patch_size * patch_size, dim, bias=bias)
        n = self.grid_shape[0] * self.grid_shape[1]
        self.pos = nn.Parameter(0.02 * torch.randn(n, dim)) if pos_embed else None
        self.mixers = nn.ModuleList(
            nn.Conv2d(dim, dim, kernel_size=3, padding=1, bias=bias) for _ in range(mixing_layers)
        )
        self.input_mean, self.input_std = input_mean, input_std

    @property
    def n_tokens(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        squeeze = images.dim() == 2
        if squeeze:
            images = images.unsqueeze(0)
        if tuple(images.shape[-2:]) != (self.grid_shape[0] * self.patch_size, self.grid_shape[1] * self.patch_size):
            raise ShapeError(f"expected images of size {self.grid_shape} patches, got {tuple(images.shape[-2:])}")
        x = (images.to(self.embed.weight.dtype) - self.input_mean) / self.input_std
        x = self.embed(patchify(x, self.patch_size))
        if self.pos is not None:
            x = x + self.pos
        R, C = self.grid_shape
        for conv in self.mixers:
            g = x.transpose(1, 2).reshape(x.shape[0], self.dim, R, C)
            x = x + F.gelu(conv(g)).reshape(x.shape[0], self.dim, R * C).transpose(1, 2)
        return x[0] if squeeze else x


def encode_image(image: torch.Tensor, encoder: PatchEncoder) -> VisualGrid:
    return VisualGrid(tokens=encoder(image), grid_shape=encoder.grid_shape, patch_size=encoder.patch_size)
