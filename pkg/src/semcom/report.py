"""Plots and summary tables from metrics / trajectory CSV files."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .tasks import MetricsRecord, read_metrics_csv


class ReportError(ValueError):
    pass


def _is_trajectory_csv(path: Path) -> bool:
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
    return header[:2] == ["step", "lambda_recon"]


def _read_trajectory(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: float(v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def _plot_metric(records_by_label: dict[str, list[MetricsRecord]], metric: str, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, records in sorted(records_by_label.items()):
        by_channel = defaultdict(list)
        for rec in records:
            by_channel[rec.channel_kind].append(rec)
        for kind, recs in sorted(by_channel.items()):
            recs = sorted(recs, key=lambda r: r.snr_db)
            ax.plot(
                [r.snr_db for r in recs],
                [getattr(r, metric) for r in recs],
                marker="o",
                label=f"{label} / {kind}",
            )
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(metric)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _plot_trajectory(rows: list[dict], out_path: Path) -> None:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    steps = [r["step"] for r in rows]
    ax1.plot(steps, [r["lambda_recon"] for r in rows], lw=0.8)
    ax1.set_ylabel("lambda_recon")
    ax1.set_ylim(-0.05, 1.05)
    ax1.grid(True, alpha=0.3)
    ax2.plot(steps, [r["epsilon"] for r in rows], lw=0.8, label="epsilon")
    ax2.plot(steps, [r["reward"] for r in rows], lw=0.5, alpha=0.6, label="reward")
    ax2.set_xlabel("step")
    ax2.legend(fontsize=8)
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _summary_table(records_by_label: dict[str, list[MetricsRecord]]) -> str:
    lines = [
        f"{'config':<16} {'channel':<12} {'snr range':<12} {'psnr':>8} {'ssim':>8} {'acc':>8} {'f1':>8}"
    ]
    for label, records in sorted(records_by_label.items()):
        by_channel = defaultdict(list)
        for rec in records:
            by_channel[rec.channel_kind].append(rec)
        for kind, recs in sorted(by_channel.items()):
            snrs = sorted(r.snr_db for r in recs)
            mean = lambda attr: sum(getattr(r, attr) for r in recs) / len(recs)
            lines.append(
                f"{label:<16} {kind:<12} {f'{snrs[0]:g}-{snrs[-1]:g} dB':<12} "
                f"{mean('psnr'):>8.2f} {mean('ssim'):>8.3f} {mean('accuracy'):>8.3f} {mean('f1_macro'):>8.3f}"
            )
    return "\n".join(lines)


def report(csv_paths, out_dir) -> list[Path]:
    """Render SNR-sweep curves, weight trajectories, and a summary table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_by_label: dict[str, list[MetricsRecord]] = {}
    trajectories: dict[str, list[dict]] = {}
    for raw in csv_paths:
        path = Path(raw)
        if not path.exists():
            raise ReportError(f"input file not found: {path}")
        if _is_trajectory_csv(path):
            rows = _read_trajectory(path)
            if rows:
                trajectories[path.stem] = rows
            continue
        records = read_metrics_csv(path)
        if records:
            metrics_by_label[path.stem] = records
    if not metrics_by_label and not trajectories:
        raise ReportError("no data: every input CSV is empty")

    written: list[Path] = []
    if metrics_by_label:
        for metric in ("psnr", "ssim", "accuracy"):
            out_path = out_dir / f"{metric}_vs_snr.png"
            _plot_metric(metrics_by_label, metric, out_path)
            written.append(out_path)
        summary = out_dir / "summary.txt"
        summary.write_text(_summary_table(metrics_by_label) + "\n")
        written.append(summary)
    for stem, rows in trajectories.items():
        out_path = out_dir / f"{stem}_weights.png"
        _plot_trajectory(rows, out_path)
        written.append(out_path)
    return written
