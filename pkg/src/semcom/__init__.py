"""Semantic image transmission with adaptive task weighting and channel adapters."""

__version__ = "0.1.0"

from .latent import LatentCode
from .channel import ChannelConfig, ChannelRealization, apply_channel, normalize_power, snr_to_sigma

__all__ = [
    "LatentCode",
    "ChannelConfig",
    "ChannelRealization",
    "apply_channel",
    "normalize_power",
    "snr_to_sigma",
]
