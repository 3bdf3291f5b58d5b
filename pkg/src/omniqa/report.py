"""Scatter plots and metric tables from an evaluation directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataError  # noqa: E402
from .stats import logistic5  # noqa: E402

FORMATS = ("png", "svg")


def read_eval_dir(path) -> Dict:
    """Load ``report.csv`` and ``summary.json`` written by an evaluation run."""
    path = Path(path)
    try:
        summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
        with open(path / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read evaluation output in {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path / 'report.csv'} has no rows")
    return {
        "summary": summary,
        "image_id": [r["image_id"] for r in rows],
        "mos": np.array([float(r["mos"]) for r in rows]),
        "raw": np.array([float(r["raw_score"]) for r in rows]),
    }


def scatter_figure(raw: np.ndarray, mos: np.ndarray, rho, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    ax.scatter(raw, mos, s=14, alpha=0.8, label="images")
    xs = np.linspace(raw.min(), raw.max(), 200) if raw.size else np.zeros(0)
    ax.plot(xs, logistic5(xs, rho), color="C3", lw=1.5, label="logistic fit")
    ax.set_xlabel("raw predicted score")
    ax.set_ylabel("MOS")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return fig


def write_metrics_table(path, summary: Dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in ("n_images", "plcc", "srcc", "rmse"):
            w.writerow([key, summary[key]])
        for i, v in enumerate(summary.get("rho", [])):
            w.writerow([f"rho{i + 1}", v])


def render_report(eval_dir, out_dir, formats: Iterable[str] = FORMATS) -> List[Path]:
    """Write ``scatter.<fmt>`` and ``metrics.csv``; returns the written paths."""
    formats = list(formats)
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unsupported plot format(s) {bad}; choose from {FORMATS}")
    data = read_eval_dir(eval_dir)
    s = data["summary"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    title = f"PLCC {s['plcc']:.3f}  SRCC {s['srcc']:.3f}  RMSE {s['rmse']:.3f}"
    fig = scatter_figure(data["raw"], data["mos"], s["rho"], title)
    written = []
    for fmt in formats:
        p = out / f"scatter.{fmt}"
        # fixed metadata keeps svg output stable between runs
        fig.savefig(p, format=fmt, metadata={"Date": None} if fmt == "svg" else None)
        written.append(p)
    plt.close(fig)
    table = out / "metrics.csv"
    write_metrics_table(table, s)
    written.append(table)
    return written
