"""End-to-end training, evaluation, checkpointing, and channel adaptation.

Per training batch: the weight scheduler picks the loss weights, the image is
encoded, power-normalized, transmitted, the corrupted latent is denoised,
decoded, and classified; the weighted loss is backpropagated with gradient
clipping, and the scheduler is rewarded with the next batch's metrics.

Randomness discipline: model initialization is seeded once at build; all
run-time draws go through named torch.Generators (data order, channel noise,
augmentation, agent exploration) whose states live in the checkpoint, so a
resumed run reproduces the next batch bit for bit.
"""

from __future__ import annotations

import copy
import csv
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from . import channel as ch
from . import lora
from .agent import WeightPair, WeightScheduler
from .config import ExperimentConfig
from .data import SplitData, augment_batch, load_dataset
from .diffusion import NoiseSchedule, ScoreNet, ScoreNetConfig, denoise, train_denoiser
from .latent import LatentCode
from .swin import SwinDecoder, SwinEncoder
from .tasks import (
    ClassifierConfig,
    LatentClassifier,
    MetricsRecord,
    accuracy,
    f1_macro,
    predict_classes,
    psnr_per_image,
    ssim_per_image,
    total_loss,
    write_metrics_csv,
)

CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    pass


class PipelineError(ValueError):
    pass


class Transceiver(nn.Module):
    """Codec + latent denoiser + classifier under one parameter tree."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.encoder = SwinEncoder(cfg.codec)
        self.decoder = SwinDecoder(cfg.codec)
        if cfg.denoiser.enabled:
            h, w, c = cfg.codec.latent_shape
            self.scorenet = ScoreNet(
                ScoreNetConfig(
                    channels=c,
                    width=cfg.denoiser.width,
                    n_blocks=cfg.denoiser.n_blocks,
                    time_dim=cfg.denoiser.time_dim,
                    gn_groups=cfg.denoiser.gn_groups,
                )
            )
        else:
            self.scorenet = None
        self.classifier = LatentClassifier(
            ClassifierConfig(cfg.codec.latent_dim, cfg.num_classes, tuple(cfg.classifier_hidden))
        )


@dataclass
class Trace:
    """Every intermediate of one transmission, for losses and ablation checks."""

    z: LatentCode
    z_norm: LatentCode
    z_ch: LatentCode
    sigma: torch.Tensor | float | None
    z_dn: LatentCode
    x_hat: torch.Tensor
    logits: torch.Tensor
    loss_recon: torch.Tensor
    loss_cls: torch.Tensor
    loss_total: torch.Tensor
    weights: WeightPair


def _cell_seed(base: int, kind: str, snr_db: float, extra: str = "") -> int:
    return zlib.crc32(f"{base}|{kind}|{snr_db}|{extra}".encode()) & 0x7FFFFFFF


def _stratified_sample(labels: torch.Tensor, fraction: float, rng: torch.Generator) -> torch.Tensor:
    """At least one index per present class, about `fraction` of the whole."""
    picked = []
    for cls in torch.unique(labels).tolist():
        idx = (labels == cls).nonzero(as_tuple=True)[0]
        n = max(1, int(round(fraction * idx.numel())))
        order = torch.randperm(idx.numel(), generator=rng)[:n]
        picked.append(idx[order])
    out = torch.cat(picked)
    return out[torch.randperm(out.numel(), generator=rng)]


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, splits: tuple[SplitData, SplitData, SplitData] | None = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = Transceiver(cfg)
        self.schedule = NoiseSchedule()
        self.scheduler = WeightScheduler(cfg.agent, seed=cfg.seed + 1) if cfg.agent.enabled else None
        self.adapter_library: dict[str, lora.AdapterSet] = {}
        self.data_gen = torch.Generator().manual_seed(cfg.seed + 10)
        self.channel_gen = torch.Generator().manual_seed(cfg.seed + 11)
        self.aug_gen = torch.Generator().manual_seed(cfg.seed + 12)
        self.epoch = 0
        self.global_step = 0
        self.history: list[dict] = []
        self.trajectory: list[dict] = []
        self.last_grad_norm: float | None = None
        self._optimizer: torch.optim.Optimizer | None = None
        self._splits = splits

    # ---------------------------------------------------------------- data

    @property
    def splits(self) -> tuple[SplitData, SplitData, SplitData]:
        if self._splits is None:
            self._splits = load_dataset(self.cfg.dataset, self.cfg.seed)
        return self._splits

    # ------------------------------------------------------------- forward

    def channel_config(self, kind: str, snr_db: float) -> ch.ChannelConfig:
        c = self.cfg.channel
        return ch.ChannelConfig(
            kind=kind,
            snr_db=snr_db,
            rician_k=c.rician_k,
            impulse_prob=c.impulse_prob,
            impulse_var_mult=c.impulse_var_mult,
            phase_sigma=c.phase_sigma,
            seed=self.cfg.seed,
        )

    def transmit(
        self,
        x: torch.Tensor,
        y: torch.Tensor,
        snr_db: float,
        kind: str,
        weights: WeightPair,
        rng: torch.Generator,
        use_edm: bool | None = None,
        sigma_source: str = "oracle",
    ) -> Trace:
        use_edm = (self.model.scorenet is not None) if use_edm is None else use_edm
        if use_edm and self.model.scorenet is None:
            raise PipelineError("denoiser requested but the model was built without one")
        z = self.model.encoder(x)
        z_norm = ch.normalize_power(z)
        z_chan, realization = ch.apply_channel(z_norm, self.channel_config(kind, snr_db), rng)
        sigma = None
        if use_edm:
            if sigma_source == "oracle":
                sigma = ch.estimate_sigma_max(z_chan, realization=realization)
            else:
                sigma = ch.estimate_sigma_max(z_chan, snr_db=snr_db)
            z_dn = denoise(
                z_chan,
                sigma,
                self.model.scorenet,
                steps=self.cfg.denoiser.steps,
                mode=self.cfg.denoiser.mode,
                sigma_min=self.cfg.denoiser.sigma_min,
            )
        else:
            z_dn = z_chan
        x_hat = self.model.decoder(z_dn)
        logits = self.model.classifier(z_dn)
        loss_recon = nn.functional.mse_loss(x_hat, x)
        loss_cls = nn.functional.cross_entropy(logits, y)
        loss = weights.lambda_recon * loss_recon + weights.lambda_cls * loss_cls
        return Trace(z, z_norm, z_chan, sigma, z_dn, x_hat, logits, loss_recon, loss_cls, loss, weights)

    # ------------------------------------------------------------- training

    def _lr_at(self, epoch: int) -> float:
        o = self.cfg.optim
        if o.epochs == 1:
            return o.lr
        t = min(epoch, o.epochs - 1) / (o.epochs - 1)
        return o.lr_min + 0.5 * (o.lr - o.lr_min) * (1.0 + math.cos(math.pi * t))

    def _static_weights(self) -> WeightPair:
        return WeightPair.from_lambda(self.cfg.agent.static_lambda_recon)

    def _grad_norm(self) -> float:
        total = 0.0
        for p in self.model.parameters():
            if p.grad is not None:
                total += float(p.grad.detach().square().sum())
        return math.sqrt(total)

    def _maybe_pretrain_denoiser(self, train: SplitData) -> None:
        epochs = self.cfg.denoiser.pretrain_epochs
        if not epochs or self.model.scorenet is None or self.epoch > 0:
            return
        with torch.no_grad():
            count = min(len(train), 2048)
            latents = self.model.encoder(train.images[:count])
            latents = ch.normalize_power(latents)
        train_denoiser(
            self.model.scorenet,
            latents,
            self.schedule,
            epochs=epochs,
            batch_size=min(128, count),
            lr=1e-3,
            rng=torch.Generator().manual_seed(self.cfg.seed + 13),
        )

    def train(self) -> dict:
        cfg = self.cfg
        out_dir = Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        train_split, _, _ = self.splits
        if self._optimizer is None:
            self._optimizer = torch.optim.AdamW(
                self.model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay
            )
        self._maybe_pretrain_denoiser(train_split)
        opt = self._optimizer
        n = len(train_split)
        bs = cfg.optim.batch_size

        for epoch in range(self.epoch, cfg.optim.epochs):
            lr = self._lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            perm = torch.randperm(n, generator=self.data_gen)
            epoch_loss, epoch_recon, epoch_cls, epoch_acc, batches = 0.0, 0.0, 0.0, 0.0, 0
            for start in range(0, n, bs):
                idx = perm[start : start + bs]
                x = train_split.images[idx]
                y = train_split.labels[idx]
                if cfg.dataset.augment:
                    x = augment_batch(x, self.aug_gen, flips=cfg.dataset.flips)
                snr = cfg.channel.snr_min_db + float(torch.rand(1, generator=self.channel_gen)) * (
                    cfg.channel.snr_max_db - cfg.channel.snr_min_db
                )
                if self.scheduler is not None:
                    weights = self.scheduler.act(snr, epoch, cfg.optim.epochs)
                else:
                    weights = self._static_weights()
                trace = self.transmit(
                    x, y, snr, cfg.channel.kind, weights, self.channel_gen, sigma_source=cfg.sigma_source_train
                )
                if not bool(torch.isfinite(trace.loss_total.detach())):
                    path = out_dir / "diagnostic.ckpt"
                    self.save_checkpoint(path)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, step {self.global_step}; "
                        f"diagnostic checkpoint written to {path}"
                    )
                opt.zero_grad()
                trace.loss_total.backward()
                nn.utils.clip_grad_norm_(self.model.parameters(), cfg.optim.grad_clip)
                self.last_grad_norm = self._grad_norm()
                opt.step()

                batch_loss_recon = float(trace.loss_recon.detach())
                batch_acc = float((predict_classes(trace.logits.detach()) == y).double().mean())
                reward = 0.0
                if self.scheduler is not None:
                    reward = self.scheduler.observe(batch_loss_recon, batch_acc)
                    self.trajectory.append(
                        {
                            "step": self.global_step,
                            "lambda_recon": weights.lambda_recon,
                            "epsilon": self.scheduler.last_epsilon,
                            "reward": reward,
                        }
                    )
                epoch_loss += float(trace.loss_total.detach())
                epoch_recon += batch_loss_recon
                epoch_cls += float(trace.loss_cls.detach())
                epoch_acc += batch_acc
                batches += 1
                self.global_step += 1
            self.epoch = epoch + 1
            self.history.append(
                {
                    "epoch": epoch,
                    "lr": lr,
                    "loss_total": epoch_loss / batches,
                    "loss_recon": epoch_recon / batches,
                    "loss_cls": epoch_cls / batches,
                    "accuracy": epoch_acc / batches,
                    "grad_norm": self.last_grad_norm,
                }
            )
            self.save_checkpoint(out_dir / "checkpoint.ckpt")

        self._write_history(out_dir)
        return {"history": self.history, "checkpoint": str(out_dir / "checkpoint.ckpt")}

    def _write_history(self, out_dir: Path) -> None:
        if self.history:
            with open(out_dir / "training.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(self.history[0].keys()))
                writer.writeheader()
                writer.writerows(self.history)
        if self.trajectory:
            with open(out_dir / "trajectory.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=["step", "lambda_recon", "epsilon", "reward"])
                writer.writeheader()
                writer.writerows(self.trajectory)

    # ------------------------------------------------------------ evaluate

    def evaluate(
        self,
        channels: tuple[str, ...] | None = None,
        snrs_db: tuple[float, ...] | None = None,
        split: str = "test",
        max_samples: int | None = None,
        seed: int | None = None,
        adapter_set: lora.AdapterSet | None = None,
        csv_path=None,
    ) -> list[MetricsRecord]:
        cfg = self.cfg
        channels = channels or cfg.eval.channels
        snrs_db = snrs_db if snrs_db is not None else cfg.eval.snrs_db
        seed = cfg.eval.seed if seed is None else seed
        max_samples = max_samples or cfg.eval.max_samples
        data = {"train": self.splits[0], "val": self.splits[1], "test": self.splits[2]}[split]
        count = min(len(data), max_samples)
        images, labels = data.images[:count], data.labels[:count]
        weights = self._static_weights()
        records = []
        self.model.eval()
        with lora.attached(self.model, adapter_set), torch.no_grad():
            for kind in channels:
                for snr in snrs_db:
                    gen = torch.Generator().manual_seed(_cell_seed(seed, kind, snr))
                    psnrs, ssims, preds_all, recon, cls_loss, total = [], [], [], 0.0, 0.0, 0
                    bs = min(256, count)
                    for start in range(0, count, bs):
                        x = images[start : start + bs]
                        y = labels[start : start + bs]
                        trace = self.transmit(
                            x, y, snr, kind, weights, gen, sigma_source=cfg.sigma_source_eval
                        )
                        psnrs.append(psnr_per_image(x, trace.x_hat))
                        ssims.append(ssim_per_image(x, trace.x_hat))
                        preds_all.append(predict_classes(trace.logits))
                        recon += float(trace.loss_recon) * x.shape[0]
                        cls_loss += float(trace.loss_cls) * x.shape[0]
                        total += x.shape[0]
                    preds = torch.cat(preds_all)
                    records.append(
                        MetricsRecord(
                            psnr=float(torch.cat(psnrs).mean()),
                            ssim=float(torch.cat(ssims).mean()),
                            accuracy=accuracy(labels, preds),
                            f1_macro=f1_macro(labels, preds),
                            loss_recon=recon / total,
                            loss_cls=cls_loss / total,
                            lambda_recon=weights.lambda_recon,
                            snr_db=snr,
                            epoch=self.epoch,
                            channel_kind=kind,
                        )
                    )
        self.model.train()
        if csv_path is not None:
            write_metrics_csv(csv_path, records)
        return records

    # ---------------------------------------------------------- adaptation

    def build_adapter_set(self, channel_kind: str, rng: torch.Generator) -> lora.AdapterSet:
        specs = lora.default_specs(self.cfg.adapt.ranks)
        aset = lora.AdapterSet(channel_kind, specs, base_fingerprint=lora.model_fingerprint(self.model))
        for role, module, prefix in (
            ("encoder", self.model.encoder, "encoder."),
            ("decoder", self.model.decoder, "decoder."),
        ):
            for s, stage in enumerate(module.stages):
                for b, block in enumerate(stage):
                    created = lora.attach_attention_adapters(
                        block, specs[role], rng, base_path=f"{prefix}stages.{s}.{b}."
                    )
                    for path, adapter in created.items():
                        aset.add(path, adapter)
        if self.model.scorenet is not None:
            for path, adapter in lora.attach_scorenet_adapters(
                self.model.scorenet, specs["denoiser"], rng, base_path="scorenet."
            ).items():
                aset.add(path, adapter)
        for path, adapter in lora.attach_classifier_adapter(
            self.model.classifier, specs["classifier"], rng, base_path="classifier."
        ).items():
            aset.add(path, adapter)
        lora.detach_all(self.model)
        return aset

    def adapt_to_channel(
        self,
        channel_kind: str,
        fraction: float | None = None,
        max_epochs: int | None = None,
        seed: int | None = None,
    ) -> lora.AdapterSet:
        """Freeze the base model and train a fresh adapter set on a small
        stratified sample transmitted over the target channel."""
        cfg = self.cfg.adapt
        fraction = cfg.fraction if fraction is None else fraction
        max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
        seed = (self.cfg.seed + 100) if seed is None else seed
        train_split, val_split, _ = self.splits
        rng = torch.Generator().manual_seed(seed)
        sample_idx = _stratified_sample(train_split.labels, fraction, rng)
        if sample_idx.numel() == 0:
            raise PipelineError("adaptation sample is empty")
        sample = train_split.subset(sample_idx)

        aset = self.build_adapter_set(channel_kind, rng)
        frozen = [p for p in self.model.parameters() if p.requires_grad]
        for p in frozen:
            p.requires_grad_(False)
        lora.attach(self.model, aset)
        opt = torch.optim.Adam(aset.parameters(), lr=cfg.lr)
        weights = self._static_weights()
        chan_gen = torch.Generator().manual_seed(seed + 1)
        val_count = min(len(val_split), cfg.val_samples)
        val_x, val_y = val_split.images[:val_count], val_split.labels[:val_count]

        def val_loss() -> float:
            gen = torch.Generator().manual_seed(_cell_seed(seed, channel_kind, 0.0, "val"))
            total, n_items = 0.0, 0
            with torch.no_grad():
                for start in range(0, val_count, 128):
                    x, y = val_x[start : start + 128], val_y[start : start + 128]
                    snr = 0.5 * (self.cfg.channel.snr_min_db + self.cfg.channel.snr_max_db)
                    trace = self.transmit(x, y, snr, channel_kind, weights, gen, sigma_source="oracle")
                    total += float(trace.loss_total) * x.shape[0]
                    n_items += x.shape[0]
            return total / n_items

        best = val_loss()
        best_state = copy.deepcopy(aset.state_dict())
        history = [best]
        bad_epochs = 0
        try:
            for _ in range(max_epochs):
                perm = torch.randperm(len(sample), generator=rng)
                for start in range(0, len(sample), cfg.batch_size):
                    idx = perm[start : start + cfg.batch_size]
                    x, y = sample.images[idx], sample.labels[idx]
                    snr = self.cfg.channel.snr_min_db + float(torch.rand(1, generator=chan_gen)) * (
                        self.cfg.channel.snr_max_db - self.cfg.channel.snr_min_db
                    )
                    trace = self.transmit(x, y, snr, channel_kind, weights, chan_gen, sigma_source="oracle")
                    opt.zero_grad()
                    trace.loss_total.backward()
                    nn.utils.clip_grad_norm_(aset.parameters(), self.cfg.optim.grad_clip)
                    opt.step()
                current = val_loss()
                history.append(current)
                if current < best:
                    best = current
                    best_state = copy.deepcopy(aset.state_dict())
                    bad_epochs = 0
                else:
                    bad_epochs += 1
                    if bad_epochs > cfg.patience:
                        break
        finally:
            for p in frozen:
                p.requires_grad_(True)
            lora.detach_all(self.model)
        aset.load_state_dict(best_state)
        aset.val_history = history
        self.adapter_library[channel_kind] = aset
        return aset

    def save_adapter_library(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for kind, aset in self.adapter_library.items():
            path = directory / f"{kind}.adapters"
            lora.save_adapters(aset, path)
            paths.append(path)
        return paths

    # --------------------------------------------------------- checkpoints

    def save_checkpoint(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "model": lora.base_state_dict(self.model),
            "optimizer": self._optimizer.state_dict() if self._optimizer else None,
            "scheduler": self.scheduler.state_dict() if self.scheduler else None,
            "generators": {
                "data": self.data_gen.get_state(),
                "channel": self.channel_gen.get_state(),
                "aug": self.aug_gen.get_state(),
            },
            "history": self.history,
            "trajectory": self.trajectory,
            "fingerprint": lora.model_fingerprint(self.model),
        }
        torch.save(payload, path)

    @classmethod
    def from_checkpoint(cls, path, splits=None) -> "Pipeline":
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"checkpoint not found: {path}")
        payload = torch.load(path, weights_only=False)
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise PipelineError(f"{path} is not a recognized checkpoint")
        cfg = ExperimentConfig.from_dict(payload["config"])
        pipe = cls(cfg, splits=splits)
        pipe.model.load_state_dict(payload["model"])
        pipe.epoch = payload["epoch"]
        pipe.global_step = payload["global_step"]
        pipe.history = payload["history"]
        pipe.trajectory = payload["trajectory"]
        if payload["optimizer"] is not None:
            pipe._optimizer = torch.optim.AdamW(
                pipe.model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay
            )
            pipe._optimizer.load_state_dict(payload["optimizer"])
        if payload["scheduler"] is not None and pipe.scheduler is not None:
            pipe.scheduler.load_state_dict(payload["scheduler"])
        pipe.data_gen.set_state(payload["generators"]["data"])
        pipe.channel_gen.set_state(payload["generators"]["channel"])
        pipe.aug_gen.set_state(payload["generators"]["aug"])
        return pipe


def adapt_to_channel(pipeline: Pipeline, channel_kind: str, **kwargs) -> lora.AdapterSet:
    """Functional alias for Pipeline.adapt_to_channel."""
    return pipeline.adapt_to_channel(channel_kind, **kwargs)
