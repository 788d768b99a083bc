"""Result files: delimited reports, summary text, and rendered figures.

Evaluation results land on disk three ways. A tab-separated table holds
the numbers machine-readably and round-trips exactly (floats printed
with 17 significant digits). A summary block restates them for humans.
Figures (accuracy bars, training loss curves, contact sheets) are
rendered to PNG next to the tables for qualitative inspection. All
writers are byte-deterministic so reruns can be compared by checksum.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import DataError
from .evaluation import EvalReport

REPORT_FIELDS = ("protocol", "n_classes", "top1", "top5", "seed", "config_hash", "per_class_counts")

# fixed metadata keeps PNG bytes identical across reruns
_PNG_META = {"Software": None}


def _counts_to_text(counts: dict) -> str:
    return ",".join(f"{c}:{counts[c]}" for c in sorted(counts))


def _counts_from_text(text: str) -> dict:
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        label, _, count = part.partition(":")
        out[int(label)] = int(count)
    return out


def write_reports(reports: Sequence[EvalReport], path) -> None:
    """Write one header line plus one tab-separated row per report."""
    lines = ["\t".join(REPORT_FIELDS)]
    for r in reports:
        lines.append("\t".join((
            r.protocol,
            str(r.n_classes),
            "%.17g" % r.top1,
            "%.17g" % r.top5,
            str(r.seed),
            r.config_hash,
            _counts_to_text(r.per_class_counts),
        )))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_reports(path) -> list[EvalReport]:
    """Inverse of :func:`write_reports`."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != list(REPORT_FIELDS):
        raise DataError(f"{path}: not a report table (bad header)")
    reports = []
    for lineno, line in enumerate(lines[1:], 2):
        fields = line.split("\t")
        if len(fields) != len(REPORT_FIELDS):
            raise DataError(f"{path}: line {lineno}: expected {len(REPORT_FIELDS)} fields, got {len(fields)}")
        try:
            reports.append(EvalReport(
                protocol=fields[0],
                n_classes=int(fields[1]),
                top1=float(fields[2]),
                top5=float(fields[3]),
                seed=int(fields[4]),
                config_hash=fields[5],
                per_class_counts=_counts_from_text(fields[6]),
            ))
        except ValueError as e:
            raise DataError(f"{path}: line {lineno}: {e}") from e
    return reports


def format_summary(reports: Sequence[EvalReport]) -> str:
    """Human-readable block restating each report."""
    lines = []
    for r in reports:
        n_test = sum(r.per_class_counts.values())
        lines += [
            f"protocol          {r.protocol}",
            f"classes           {r.n_classes}",
            f"test images       {n_test}",
            f"top-1 accuracy    {r.top1:.4f}",
            f"top-5 accuracy    {r.top5:.4f}",
            f"seed              {r.seed}",
        ]
        if r.config_hash:
            lines.append(f"config hash       {r.config_hash}")
        lines.append("")
    return "".join(line + "\n" for line in lines)


def write_summary(reports: Sequence[EvalReport], path) -> None:
    Path(path).write_text(format_summary(reports), encoding="utf-8")


# --- figures ------------------------------------------------------------


def save_accuracy_figure(reports: Sequence[EvalReport], path) -> None:
    """Grouped top-1 / top-5 bars, one group per report."""
    reports = list(reports)
    x = np.arange(len(reports))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 + 1.6 * len(reports), 3.6))
    ax.bar(x - width / 2, [r.top1 for r in reports], width, label="top-1")
    ax.bar(x + width / 2, [r.top5 for r in reports], width, label="top-5")
    ax.set_xticks(x)
    ax.set_xticklabels([r.protocol for r in reports], rotation=15, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy")
    ax.axhline(1.0, color="gray", linewidth=0.5, linestyle=":")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def save_loss_figure(metrics_path, path) -> None:
    """Discriminator / generator loss curves from a metrics log."""
    metrics_path = Path(metrics_path)
    try:
        table = np.loadtxt(metrics_path, delimiter="\t", ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"{metrics_path}: cannot read metrics log: {e}") from e
    if table.size == 0 or table.shape[1] != 3:
        raise DataError(f"{metrics_path}: expected rows of step, discriminator loss, generator loss")
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(table[:, 0], table[:, 1], label="discriminator")
    ax.plot(table[:, 0], table[:, 2], label="generator")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


# --- contact sheets -----------------------------------------------------


def _to_uint8(images: np.ndarray) -> np.ndarray:
    """[N,3,H,W] in [-1,1] -> [N,H,W,3] uint8."""
    arr = np.asarray(images, dtype=np.float64)
    arr = np.clip((arr.transpose(0, 2, 3, 1) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8)


def contact_sheet(originals: np.ndarray, generated: np.ndarray, path, pad: int = 2) -> None:
    """Grid PNG: each row shows an input image beside its generated variants.

    ``originals`` is [N,3,H,W]; ``generated`` is [N,V,3,H,W] with one
    generated image per variant (viewpoint) in column order.
    """
    originals = np.asarray(originals)
    generated = np.asarray(generated)
    if originals.ndim != 4 or generated.ndim != 5 or generated.shape[0] != originals.shape[0]:
        raise DataError(
            f"contact sheet needs originals [N,3,H,W] and generated [N,V,3,H,W], "
            f"got {originals.shape} and {generated.shape}"
        )
    n, _, h, w = originals.shape
    v = generated.shape[1]
    cols = 1 + v
    sheet = np.full(
        (n * h + pad * (n + 1), cols * w + pad * (cols + 1), 3), 255, dtype=np.uint8
    )
    rows_u8 = _to_uint8(originals)
    gen_u8 = _to_uint8(generated.reshape(n * v, *generated.shape[2:])).reshape(n, v, h, w, 3)
    for i in range(n):
        top = pad + i * (h + pad)
        sheet[top:top + h, pad:pad + w] = rows_u8[i]
        for j in range(v):
            left = pad + (j + 1) * (w + pad)
            sheet[top:top + h, left:left + w] = gen_u8[i, j]
    Image.fromarray(sheet).save(path, format="PNG")
