"""Latent code container shared by every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LatentCode:
    """A transmitted latent: flat real vector plus its spatial interpretation.

    ``values`` is either a single vector of length L or a batch ``(B, L)``.
    ``spatial_shape`` is ``(height, width, channels)`` with product L; the
    denoiser operates on the gridded view, everything else on the flat one.
    """

    values: torch.Tensor
    spatial_shape: tuple[int, int, int]

    def __post_init__(self):
        h, w, c = self.spatial_shape
        length = h * w * c
        if length <= 0:
            raise ValueError(f"spatial shape {self.spatial_shape} has non-positive size")
        if self.values.ndim not in (1, 2):
            raise ValueError(f"latent values must be 1-D or 2-D, got shape {tuple(self.values.shape)}")
        if self.values.shape[-1] != length:
            raise ValueError(
                f"latent length {self.values.shape[-1]} does not match "
                f"spatial shape {self.spatial_shape} (= {length})"
            )
        if not bool(torch.isfinite(self.values.detach()).all()):
            raise ValueError("latent values contain NaN or Inf")

    @property
    def length(self) -> int:
        return self.values.shape[-1]

    @property
    def batched(self) -> bool:
        return self.values.ndim == 2

    def as_batch(self) -> torch.Tensor:
        """Values as (B, L), adding a singleton batch dim if needed."""
        return self.values if self.batched else self.values.unsqueeze(0)

    def like(self, values: torch.Tensor) -> "LatentCode":
        """New code with the same spatial shape, squeezing back if unbatched."""
        if not self.batched and values.ndim == 2 and values.shape[0] == 1:
            values = values.squeeze(0)
        return LatentCode(values, self.spatial_shape)

    def grid(self) -> torch.Tensor:
        """Gridded view (B, C, H, W) for convolutional processing."""
        h, w, c = self.spatial_shape
        return self.as_batch().reshape(-1, h, w, c).permute(0, 3, 1, 2)

    @classmethod
    def from_grid(cls, grid: torch.Tensor, spatial_shape: tuple[int, int, int]) -> "LatentCode":
        h, w, c = spatial_shape
        if grid.shape[1:] != (c, h, w):
            raise ValueError(f"grid shape {tuple(grid.shape)} does not match spatial shape {spatial_shape}")
        values = grid.permute(0, 2, 3, 1).reshape(grid.shape[0], -1)
        return cls(values, spatial_shape)
