"""Stochastic wireless channel models acting on power-normalized latents.

Conventions:

* The latent is a real vector; power normalization makes its mean
  per-component power exactly 1, so SNR is defined per real symbol.
* AWGN and impulse noise act independently on each real component.
* Fading and phase channels group consecutive real pairs into complex
  symbols, scaled so each complex symbol has unit mean power; complex
  noise is CN(0, sigma^2), i.e. sigma^2/2 per real part. After mapping
  back to the real vector this leaves the per-real-component noise
  variance at sigma^2, so the same SNR bookkeeping holds for all kinds.
* Every operation takes an explicit torch.Generator; the same seed and
  config reproduce the realization bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .latent import LatentCode

CHANNEL_KINDS = ("awgn", "rayleigh", "rician", "phase_noise", "impulse")
_COMPLEX_KINDS = frozenset({"rayleigh", "rician", "phase_noise"})


class ChannelError(ValueError):
    """Bad channel configuration or degenerate input."""


@dataclass
class ChannelConfig:
    kind: str = "awgn"
    snr_db: float = 10.0
    rician_k: float = 2.0
    impulse_prob: float = 0.01
    impulse_var_mult: float = 100.0
    phase_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ChannelError(f"unknown channel kind {self.kind!r}, expected one of {CHANNEL_KINDS}")
        if not (0.0 <= self.impulse_prob <= 1.0):
            raise ChannelError(f"impulse_prob must be in [0, 1], got {self.impulse_prob}")
        if self.rician_k < 0:
            raise ChannelError(f"rician_k must be >= 0, got {self.rician_k}")
        if self.impulse_var_mult <= 0:
            raise ChannelError(f"impulse_var_mult must be > 0, got {self.impulse_var_mult}")
        if self.phase_sigma < 0:
            raise ChannelError(f"phase_sigma must be >= 0, got {self.phase_sigma}")

    @property
    def complex_symbols(self) -> bool:
        return self.kind in _COMPLEX_KINDS

    def generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.seed)
        return g


@dataclass
class ChannelRealization:
    """One sampled (h, n) pair, kept around for oracle noise estimation.

    ``h`` is per complex symbol (None means identity, as for AWGN and
    impulse channels); ``n`` is the equivalent additive noise in the real
    domain, so ``received = fade(transmitted) + n`` holds exactly.
    """

    h: torch.Tensor | None
    n: torch.Tensor
    sigma_n: float
    impulse_mask: torch.Tensor | None = field(default=None, repr=False)

    def fade(self, z: torch.Tensor) -> torch.Tensor:
        """Apply the multiplicative part h (x) to a real-domain tensor."""
        if self.h is None:
            return z
        zc = _to_complex(z)
        return _to_real(self.h * zc)

    def invert(self, z_ch: torch.Tensor) -> torch.Tensor:
        """Recover the transmitted signal from the received one."""
        clean = z_ch - self.n
        if self.h is None:
            return clean
        return _to_real(_to_complex(clean) / self.h)


def normalize_power(z: LatentCode) -> LatentCode:
    """Scale each latent so its mean per-symbol power is exactly 1.

    z_norm = z * sqrt(L) / ||z||_2, applied per sample; direction preserved.
    """
    values = z.as_batch()
    norms = values.norm(dim=-1, keepdim=True)
    if bool((norms.detach() == 0).any()):
        raise ChannelError("cannot power-normalize an all-zero latent")
    scaled = values * (math.sqrt(z.length) / norms)
    return z.like(scaled)


def snr_to_sigma(snr_db: float) -> float:
    """Noise std for unit signal power: sigma^2 = 10^(-snr_db/10).

    For complex-symbol channels the complex noise is CN(0, sigma^2), which
    puts sigma^2/2 on each real part of a unit-power complex symbol.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    if not math.isfinite(snr_db):
        raise ChannelError(f"snr_db must be finite or +inf, got {snr_db}")
    return math.sqrt(10.0 ** (-snr_db / 10.0))


def _to_complex(z: torch.Tensor) -> torch.Tensor:
    # consecutive real pairs -> unit-power complex symbols
    b, length = z.shape
    return torch.view_as_complex(z.reshape(b, length // 2, 2).contiguous()) / math.sqrt(2.0)


def _to_real(zc: torch.Tensor) -> torch.Tensor:
    b = zc.shape[0]
    return (torch.view_as_real(zc) * math.sqrt(2.0)).reshape(b, -1)


def _randn(shape, rng: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    return torch.randn(shape, generator=rng, dtype=dtype)


def apply_channel(
    z_norm: LatentCode, cfg: ChannelConfig, rng: torch.Generator | None = None
) -> tuple[LatentCode, ChannelRealization]:
    """Transmit a power-normalized latent, returning output and realization."""
    if rng is None:
        rng = cfg.generator()
    x = z_norm.as_batch()
    dtype = x.dtype
    batch, length = x.shape
    sigma = snr_to_sigma(cfg.snr_db)

    if cfg.complex_symbols:
        if length % 2:
            raise ChannelError(f"{cfg.kind} channel needs an even latent length, got {length}")
        half = length // 2
        if cfg.kind == "rayleigh":
            hr = _randn((batch, half), rng, dtype) / math.sqrt(2.0)
            hi = _randn((batch, half), rng, dtype) / math.sqrt(2.0)
            h = torch.complex(hr, hi)
        elif cfg.kind == "rician":
            k = cfg.rician_k
            los = math.sqrt(k / (k + 1.0))
            diff = math.sqrt(1.0 / (k + 1.0))
            hr = los + diff * _randn((batch, half), rng, dtype) / math.sqrt(2.0)
            hi = diff * _randn((batch, half), rng, dtype) / math.sqrt(2.0)
            h = torch.complex(hr, hi)
        else:  # phase_noise
            theta = _randn((batch, half), rng, dtype) * cfg.phase_sigma
            h = torch.complex(torch.cos(theta), torch.sin(theta))
        noise_std = sigma / math.sqrt(2.0)
        nc = torch.complex(
            _randn((batch, half), rng, dtype) * noise_std,
            _randn((batch, half), rng, dtype) * noise_std,
        )
        y = _to_real(h * _to_complex(x) + nc)
        n_real = _to_real(nc)
        realization = ChannelRealization(h=h, n=n_real, sigma_n=sigma)
    elif cfg.kind == "impulse":
        # split the noise budget so the total variance stays sigma^2 and the
        # configured SNR is met with impulses included
        base_var = sigma**2 / (1.0 + cfg.impulse_prob * cfg.impulse_var_mult)
        n = _randn((batch, length), rng, dtype) * math.sqrt(base_var)
        mask = torch.rand((batch, length), generator=rng, dtype=dtype) < cfg.impulse_prob
        impulses = _randn((batch, length), rng, dtype) * math.sqrt(cfg.impulse_var_mult * base_var)
        n = n + mask.to(dtype) * impulses
        y = x + n
        realization = ChannelRealization(h=None, n=n, sigma_n=sigma, impulse_mask=mask)
    else:  # awgn
        n = _randn((batch, length), rng, dtype) * sigma
        y = x + n
        realization = ChannelRealization(h=None, n=n, sigma_n=sigma)

    return z_norm.like(y), realization


def estimate_sigma_max(
    z_ch: LatentCode,
    realization: ChannelRealization | None = None,
    snr_db: float | None = None,
) -> torch.Tensor | float:
    """Per-component RMS distortion of the received latent.

    With a realization (training mode) this is ||z_ch - z_norm||_2 / sqrt(L)
    per sample, measuring fading distortion and noise together. With only an
    SNR estimate (inference mode) it falls back to snr_to_sigma.
    """
    if realization is not None:
        received = z_ch.as_batch()
        transmitted = realization.invert(received)
        rms = (received - transmitted).norm(dim=-1) / math.sqrt(z_ch.length)
        return rms if z_ch.batched else float(rms.squeeze(0))
    if snr_db is not None:
        return snr_to_sigma(snr_db)
    raise ChannelError("estimate_sigma_max needs a channel realization or an SNR estimate")


def empirical_snr_db(z_norm: LatentCode, z_ch: LatentCode, realization: ChannelRealization) -> float:
    """Measured SNR: signal power over E||y - fade(x)||^2, in dB."""
    x = z_norm.as_batch()
    y = z_ch.as_batch()
    noise = y - realization.fade(x)
    signal_power = float(x.square().mean())
    noise_power = float(noise.square().mean())
    return 10.0 * math.log10(signal_power / noise_power)
