"""Result tables and figures.

``report`` writes three artifact kinds for a list of evaluation rows:
``results.csv`` (machine-readable, byte-deterministic), ``results.md``
(one table shaped method | target | eight class columns | mIoU), and a
standalone SVG bar chart of per-class IoU per row, rendered with
matplotlib.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IoFailure, ValidationError
from .scene import CLASS_NAMES, NUM_CLASSES


@dataclass
class EvalRow:
    method: str
    target: str
    per_class_iou: np.ndarray
    miou: float
    miou_sd: float | None = None

    def __post_init__(self):
        iou = np.asarray(self.per_class_iou, dtype=np.float64)
        if iou.shape != (NUM_CLASSES,):
            raise ValidationError(f"per_class_iou must have {NUM_CLASSES} entries")
        self.per_class_iou = iou


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_") or "row"


def write_results_csv(rows: list[EvalRow], path: Path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "target", *CLASS_NAMES, "miou", "miou_sd"])
            for row in rows:
                writer.writerow(
                    [
                        row.method,
                        row.target,
                        *[repr(float(v)) for v in row.per_class_iou],
                        repr(float(row.miou)),
                        "" if row.miou_sd is None else repr(float(row.miou_sd)),
                    ]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_results_csv(path: str | Path) -> list[EvalRow]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = []
            for rec in reader:
                rows.append(
                    EvalRow(
                        rec["method"],
                        rec["target"],
                        np.array([float(rec[name]) for name in CLASS_NAMES]),
                        float(rec["miou"]),
                        float(rec["miou_sd"]) if rec.get("miou_sd") else None,
                    )
                )
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: not a results csv: {exc}") from exc
    return rows


def _fmt_cell(value: float) -> str:
    return "-" if np.isnan(value) else f"{value:.3f}"


def write_results_md(rows: list[EvalRow], path: Path) -> None:
    header = ["method", "target", *CLASS_NAMES, "mIoU"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(["---"] * len(header)) + "|",
    ]
    for row in rows:
        miou = _fmt_cell(row.miou)
        if row.miou_sd is not None:
            miou = f"{miou} ± {row.miou_sd:.3f}"
        cells = [row.method, row.target, *[_fmt_cell(v) for v in row.per_class_iou], miou]
        lines.append("| " + " | ".join(cells) + " |")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_iou_chart(row: EvalRow, path: Path) -> None:
    """Standalone SVG bar chart of the row's per-class IoU."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "dgseg3d"  # deterministic element ids
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    values = np.nan_to_num(row.per_class_iou, nan=0.0)
    ax.bar(range(NUM_CLASSES), values, color="#4878cf")
    if not np.isnan(row.miou):
        ax.axhline(row.miou, color="#d65f5f", linewidth=1.0, linestyle="--", label="mIoU")
        ax.legend(loc="upper right", frameon=False)
    ax.set_xticks(range(NUM_CLASSES))
    ax.set_xticklabels(CLASS_NAMES, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("IoU")
    ax.set_title(f"{row.method} on {row.target}")
    fig.tight_layout()
    try:
        # drop the volatile date so figure bytes are reproducible
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def report(rows: list[EvalRow], out_dir: str | Path) -> list[Path]:
    """Write results.csv, results.md, and one IoU chart per row.

    Returns the written paths.
    """
    if not rows:
        raise ValidationError("no result rows to report")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create report dir {out_dir}: {exc}") from exc
    written = []
    csv_path = out_dir / "results.csv"
    write_results_csv(rows, csv_path)
    written.append(csv_path)
    md_path = out_dir / "results.md"
    write_results_md(rows, md_path)
    written.append(md_path)
    for row in rows:
        fig_path = out_dir / f"iou_{_slug(row.method)}_{_slug(row.target)}.svg"
        write_iou_chart(row, fig_path)
        written.append(fig_path)
    return written
