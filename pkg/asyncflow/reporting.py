"""CSV, JSON-lines and SVG output.

Floats are written with 17 significant digits so CSVs round-trip exactly;
SVGs are rendered with a fixed hash salt and no date metadata so re-runs
produce identical bytes.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .sampler import AsyncConfig, StepRecord, Trajectory  # noqa: E402

logger = logging.getLogger(__name__)


def fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return "" if value is None else str(value).lower()
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(row.get(column)) for column in header])
    logger.info("Wrote %s", path)
    return path


def write_jsonl(path: Path, records: Iterable[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info("Wrote %s", path)
    return path


def step_record_json(step: StepRecord) -> Dict:
    return {
        "k": step.k,
        "t_k": step.t_k,
        "t_next": step.t_next,
        "t_star": step.t_star,
        "t_star_next": step.t_star_next,
        "alpha": step.alpha,
        "beta": step.beta,
        "r": step.r,
        "log_prob": step.log_prob,
        "deviation": step.deviation,
        "clamped": step.clamped,
        "x_before": step.x_before.tolist(),
        "x_after": step.x_after.tolist(),
        "velocity": step.velocity.tolist(),
        "clean": step.clean.tolist(),
    }


def trajectory_records(traj: Trajectory, cfg: AsyncConfig = None) -> List[Dict]:
    records = [{"type": "step", **step_record_json(step)} for step in traj.steps]
    trailer = {
        "type": "trailer",
        "mode": traj.mode,
        "label": traj.condition.label,
        "guidance": traj.guidance,
        "sample": traj.sample.tolist(),
        "final_t_star": traj.final_t_star,
        "reward": traj.reward,
        "scores": traj.scores,
        "grid": list(traj.grid.values),
    }
    if cfg is not None:
        trailer.update({"gamma": cfg.gamma, "bound": cfg.bound, "sigma_min": cfg.sigma_min})
    records.append(trailer)
    return records


def reward_audit_rows(names: Sequence[str], raw, normalized, composite) -> Tuple[List[str], List[Dict]]:
    header = ["sample", *[f"raw_{n}" for n in names], *[f"z_{n}" for n in names], "composite"]
    rows = []
    for index in range(len(composite)):
        row = {"sample": index, "composite": float(composite[index])}
        for j, name in enumerate(names):
            row[f"raw_{name}"] = float(raw[index, j])
            row[f"z_{name}"] = float(normalized[index, j])
        rows.append(row)
    return header, rows


def line_chart(path: Path, series: Mapping[str, Sequence[Tuple[float, float]]], title: str,
               xlabel: str, ylabel: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "asyncflow", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, points in series.items():
            xs, ys = zip(*points) if points else ((), ())
            ax.plot(xs, ys, marker="o", label=name)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True)
        if len(series) > 1:
            ax.legend()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.info("Wrote %s", path)
    return path
