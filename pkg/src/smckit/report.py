"""Summaries and accuracy curves over run logs."""

from __future__ import annotations

import csv
import io
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .trainer import LOG_COLUMNS


class ReportError(ValueError):
    pass


@dataclass
class RunLog:
    path: str
    config: dict
    config_hash: str
    epochs: list[int]
    val_top1: list[float]

    @property
    def seed(self):
        return self.config.get("seed")

    @property
    def best(self) -> float:
        return max(self.val_top1[1:] or self.val_top1)

    @property
    def best_epoch(self) -> int:
        vals = self.val_top1[1:] or self.val_top1
        offset = 1 if len(self.val_top1) > 1 else 0
        return self.epochs[offset + int(np.argmax(vals))]

    @property
    def final(self) -> float:
        return self.val_top1[-1]


def read_run_log(path) -> RunLog:
    lines = Path(path).read_text().splitlines()
    config, chash = {}, ""
    body = []
    for lineno, line in enumerate(lines, 1):
        if line.startswith("# config: "):
            config = json.loads(line[len("# config: "):])
        elif line.startswith("# config_hash: "):
            chash = line[len("# config_hash: "):].strip()
        elif not line.startswith("#"):
            body.append((lineno, line))
    if not body:
        raise ReportError(f"{path}: no CSV header")
    header_line, header = body[0]
    if tuple(next(csv.reader([header]))) != LOG_COLUMNS:
        raise ReportError(f"{path}: line {header_line}: unexpected header {header!r}")
    epochs, vals = [], []
    for lineno, line in body[1:]:
        cells = next(csv.reader(io.StringIO(line)), [])
        if len(cells) != len(LOG_COLUMNS):
            raise ReportError(f"{path}: malformed row at line {lineno}: expected {len(LOG_COLUMNS)} cells, got {len(cells)}")
        try:
            epochs.append(int(cells[0]))
            vals.append(float(cells[LOG_COLUMNS.index("val_top1")]))
        except ValueError:
            raise ReportError(f"{path}: malformed row at line {lineno}: {line!r}") from None
    if not vals:
        raise ReportError(f"{path}: no data rows")
    return RunLog(str(path), config, chash, epochs, vals)


@dataclass
class GroupSummary:
    config_hash: str
    method: str
    runs: int
    best_mean: float
    best_std: float
    final_mean: float
    final_std: float


def summarize(logs: Sequence[RunLog]) -> list[GroupSummary]:
    """Mean and population standard deviation per config hash."""
    groups: dict[str, list[RunLog]] = {}
    for run in logs:
        groups.setdefault(run.config_hash, []).append(run)
    out = []
    for h, runs in groups.items():
        best = np.array([r.best for r in runs])
        final = np.array([r.final for r in runs])
        out.append(GroupSummary(h, str(runs[0].config.get("method", "?")), len(runs),
                                float(best.mean()), float(best.std()), float(final.mean()), float(final.std())))
    return out


def format_table(logs: Sequence[RunLog]) -> str:
    lines = ["# per-run validation top-1", "run\tconfig\tseed\tbest\tbest_epoch\tfinal"]
    for r in logs:
        lines.append(f"{r.path}\t{r.config_hash}\t{r.seed}\t{r.best:.4f}\t{r.best_epoch}\t{r.final:.4f}")
    lines += ["", "# grouped by config hash; std is the population standard deviation (ddof=0)",
              "config\tmethod\truns\tbest_mean\tbest_std\tfinal_mean\tfinal_std"]
    for g in summarize(logs):
        lines.append(f"{g.config_hash}\t{g.method}\t{g.runs}\t{g.best_mean:.4f}\t{g.best_std:.6f}\t{g.final_mean:.4f}\t{g.final_std:.6f}")
    return "\n".join(lines) + "\n"


def write_svg(logs: Sequence[RunLog], path, width: int = 640, height: int = 400) -> None:
    """Validation accuracy against epoch, one polyline per run."""
    pad = 40
    max_epoch = max(max(r.epochs) for r in logs) or 1
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    ET.SubElement(svg, "line", x1=str(pad), y1=str(height - pad), x2=str(width - pad), y2=str(height - pad), stroke="black")
    ET.SubElement(svg, "line", x1=str(pad), y1=str(pad), x2=str(pad), y2=str(height - pad), stroke="black")
    title = ET.SubElement(svg, "text", x=str(width // 2), y="20", **{"text-anchor": "middle"})
    title.text = "validation top-1 vs epoch"
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    for i, run in enumerate(logs):
        pts = " ".join(
            f"{pad + (width - 2 * pad) * e / max_epoch:.2f},{height - pad - (height - 2 * pad) * v:.2f}"
            for e, v in zip(run.epochs, run.val_top1)
        )
        line = ET.SubElement(svg, "polyline", points=pts, fill="none", stroke=palette[i % len(palette)])
        line.set("stroke-width", "1.5")
        label = ET.SubElement(line, "title")
        label.text = f"{Path(run.path).parent.name or run.path} ({run.config.get('method', '?')}, seed {run.seed})"
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
