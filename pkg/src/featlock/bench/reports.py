"""Summary tables built from finished experiments."""
from __future__ import annotations

import os
import platform
from dataclasses import dataclass

import numpy as np

from .experiment import ExperimentResult


@dataclass(frozen=True)
class DepthRow:
    map_id: str
    correct: float
    noenc: float
    incorrect: float


@dataclass(frozen=True)
class DepthTrend:
    rows: tuple[DepthRow, ...]

    @property
    def noenc_nondecreasing(self) -> bool:
        v = [r.noenc for r in self.rows]
        return all(b >= a for a, b in zip(v, v[1:]))

    @property
    def deep_beats_shallow(self) -> bool:
        return self.rows[-1].noenc > self.rows[0].noenc

    def to_dict(self) -> dict:
        return {"rows": [r.__dict__ for r in self.rows], "noenc_nondecreasing": self.noenc_nondecreasing,
                "deep_beats_shallow": self.deep_beats_shallow}


def depth_trend(results: list[ExperimentResult]) -> DepthTrend:
    """Correct / no-enc / incorrect mAP per encrypted map, shallow to deep."""
    rows = []
    for r in results:
        if r.config.mode != "cp":
            raise ValueError(f"depth trend needs CP experiments, got {r.config.label}")
        rows.append(DepthRow(r.config.map_id, r.map_of("correct"), r.map_of("noenc"), r.map_of("incorrect")))
    rows.sort(key=lambda row: row.map_id)
    if len({row.map_id for row in rows}) != len(rows):
        raise ValueError("one experiment per map")
    for row in rows:
        if not all(0.0 <= v <= 1.0 for v in (row.correct, row.noenc, row.incorrect)):
            raise ValueError(f"mAP outside [0, 1] in {row}")
    return DepthTrend(tuple(rows))


def environment() -> dict:
    """Best-effort description of the machine; free text, not meant to be parsed."""
    cpu = platform.processor() or ""
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {"os": platform.platform(), "cpu": cpu or "unknown", "cores": os.cpu_count(),
            "python": platform.python_version(), "numpy": np.__version__}


def lr_phases(train_log: dict) -> list[dict]:
    """Contiguous runs of equal lr in a loss log, as (first, last logged iteration, lr)."""
    phases: list[dict] = []
    for it, lr in zip(train_log["iterations"], train_log["lrs"]):
        if phases and phases[-1]["lr"] == lr:
            phases[-1]["last"] = it
        else:
            phases.append({"first": it, "last": it, "lr": lr})
    return phases


def timing_report(plain: ExperimentResult, keyed: ExperimentResult) -> dict:
    p, k = plain.timing["seconds_per_iter"], keyed.timing["seconds_per_iter"]
    return {
        "plain": {"label": plain.config.label, "seconds_per_iter": p, "lr_phases": lr_phases(plain.train_log)},
        "keyed": {"label": keyed.config.label, "seconds_per_iter": k, "lr_phases": lr_phases(keyed.train_log)},
        "ratio": k / p,
        "environment": environment(),
    }


def convergence_report(logs: dict[str, dict], every: int = 500) -> dict:
    """Loss of each run at shared checkpoints (multiples of ``every`` plus 0)."""
    if len(logs) < 2:
        raise ValueError("need at least two loss logs")
    grids = {name: dict(zip(lg["iterations"], lg["losses"])) for name, lg in logs.items()}
    lasts = {max(g) for g in grids.values()}
    if len(lasts) != 1:
        raise ValueError(f"logs end at different iterations: {sorted(lasts)}")
    points = sorted(it for it in next(iter(grids.values())) if it % every == 0)
    for name, g in grids.items():
        if missing := [it for it in points if it not in g]:
            raise ValueError(f"log {name!r} lacks checkpoints {missing}")
    return {"iterations": points, "losses": {name: [g[it] for it in points] for name, g in grids.items()}}


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def markdown_table(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def results_markdown(results: list[ExperimentResult]) -> str:
    """Wide table: one row per experiment, one column per key mode."""
    cols = ["plain", "correct", "noenc", "incorrect"]
    present = [c for c in cols if any(r.key_mode == c for res in results for r in res.rows)]
    rows = []
    for res in results:
        by_mode = {r.key_mode: r.map for r in res.rows}
        rows.append([res.config.label] + [by_mode.get(c, "") for c in present])
    return markdown_table(["model"] + present, rows)


def depth_markdown(trend: DepthTrend) -> str:
    body = markdown_table(["map", "correct", "no-enc", "incorrect (mean)"],
                          [[r.map_id, r.correct, r.noenc, r.incorrect] for r in trend.rows])
    return body + f"\nno-enc mAP non-decreasing with depth: {trend.noenc_nondecreasing}\n"


def convergence_markdown(conv: dict) -> str:
    names = list(conv["losses"])
    rows = [[it] + [conv["losses"][n][i] for n in names] for i, it in enumerate(conv["iterations"])]
    return markdown_table(["iteration"] + names, rows)
