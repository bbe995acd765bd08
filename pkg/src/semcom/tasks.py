"""Classification head, combined task loss, and evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .agent import WeightPair
from .latent import LatentCode
from .lora import AdaptedLinear


@dataclass
class ClassifierConfig:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (256,)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least two classes, got {self.num_classes}")
        if self.input_dim < 1:
            raise ValueError("classifier input dim must be positive")


class LatentClassifier(nn.Module):
    """MLP over the flat latent; the final projection is adapter-capable."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.input_dim, *cfg.hidden]
        body: list[nn.Module] = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            body += [nn.Linear(d_in, d_out), nn.ReLU()]
        self.body = nn.Sequential(*body)
        self.head = AdaptedLinear(dims[-1], cfg.num_classes)

    def forward(self, z) -> torch.Tensor:
        values = z.as_batch() if isinstance(z, LatentCode) else z
        if values.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"latent length {values.shape[-1]} != classifier input {self.cfg.input_dim}")
        return self.head(self.body(values))


def predict_classes(logits: torch.Tensor) -> torch.Tensor:
    """Argmax with ties broken toward the lowest class index."""
    return torch.argmax(logits, dim=-1)


def total_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    y: torch.Tensor,
    logits: torch.Tensor,
    weights: WeightPair,
) -> torch.Tensor:
    """lambda_recon * MSE(x, x_hat) + lambda_cls * CE(y, logits)."""
    loss_recon = F.mse_loss(x_hat, x)
    loss_cls = F.cross_entropy(logits, y)
    return weights.lambda_recon * loss_recon + weights.lambda_cls * loss_cls


def psnr(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when the images match."""
    mse = float(F.mse_loss(x_hat, x))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_per_image(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    mse = (x - x_hat).square().flatten(1).mean(dim=1)
    out = torch.full_like(mse, math.inf)
    nz = mse > 0
    out[nz] = 10.0 * torch.log10(1.0 / mse[nz])
    return out


def _gaussian_kernel(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-coords.square() / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_per_image(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    data_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
    win_size: int = 11,
    sigma: float = 1.5,
) -> torch.Tensor:
    """Mean SSIM per image over an 11x11 Gaussian window (sigma 1.5)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.ndim == 2:
        x, x_hat = x[None, None], x_hat[None, None]
    elif x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    b, c, h, w = x.shape
    if min(h, w) < win_size:
        raise ValueError(f"images must be at least {win_size} pixels per side, got {h}x{w}")
    dtype = torch.float64
    kernel = _gaussian_kernel(win_size, sigma, dtype)[None, None]
    xs = x.reshape(b * c, 1, h, w).to(dtype)
    ys = x_hat.reshape(b * c, 1, h, w).to(dtype)

    def filt(t):
        return F.conv2d(t, kernel)  # valid convolution, edges cropped

    mu_x, mu_y = filt(xs), filt(ys)
    var_x = filt(xs * xs) - mu_x * mu_x
    var_y = filt(ys * ys) - mu_y * mu_y
    cov = filt(xs * ys) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    return ssim_map.reshape(b, c, *ssim_map.shape[-2:]).mean(dim=(1, 2, 3))


def ssim(x: torch.Tensor, x_hat: torch.Tensor, **kwargs) -> float:
    return float(ssim_per_image(x, x_hat, **kwargs).mean())


def accuracy(labels, preds) -> float:
    labels = torch.as_tensor(labels)
    preds = torch.as_tensor(preds)
    if labels.numel() == 0:
        raise ValueError("accuracy of an empty label set is undefined")
    return float((labels == preds).double().mean())


def f1_macro(labels, preds) -> float:
    """Per-class F1 averaged with equal class weight; absent classes score 0."""
    labels = torch.as_tensor(labels)
    preds = torch.as_tensor(preds)
    if labels.numel() == 0:
        raise ValueError("F1 of an empty label set is undefined")
    classes = torch.unique(torch.cat([labels, preds]))
    scores = []
    for cls in classes.tolist():
        tp = int(((labels == cls) & (preds == cls)).sum())
        fp = int(((labels != cls) & (preds == cls)).sum())
        fn = int(((labels == cls) & (preds != cls)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(sum(scores) / len(scores))


@dataclass
class MetricsRecord:
    psnr: float
    ssim: float
    accuracy: float
    f1_macro: float
    loss_recon: float
    loss_cls: float
    lambda_recon: float
    snr_db: float
    epoch: int
    channel_kind: str

    FIELDS = ("psnr", "ssim", "accuracy", "f1_macro", "loss_recon", "loss_cls", "lambda_recon", "snr_db", "epoch", "channel_kind")

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0):
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.psnr < 0:
            raise ValueError(f"psnr {self.psnr} negative for images in [0, 1]")

    def to_row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRecord.FIELDS)
        for rec in records:
            writer.writerow(rec.to_row())


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        records = []
        for row in reader:
            kwargs = {}
            for f in fields(MetricsRecord):
                raw = row[f.name]
                kwargs[f.name] = raw if f.name == "channel_kind" else (int(raw) if f.name == "epoch" else float(raw))
            records.append(MetricsRecord(**kwargs))
    return records
