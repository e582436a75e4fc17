"""Random-key attack: evaluate a stolen protected model under many guessed keys."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import minidet as md
from ..cipher import random_keys
from .data import Split
from .experiment import evaluate

RAW_HEADER = ("key_index", "key_fingerprint", "map")


@dataclass(frozen=True)
class BoxStats:
    """Five-number summary plus Tukey fences (1.5 IQR) and the points beyond them."""

    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]

    @classmethod
    def of(cls, values) -> "BoxStats":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("no values to summarise")
        # numpy's default linear interpolation between order statistics
        q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
        lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
        return cls(float(v.min()), q1, med, q3, float(v.max()), lo, hi,
                   tuple(float(x) for x in v if x < lo or x > hi))

    def to_dict(self) -> dict:
        return {"min": self.minimum, "q1": self.q1, "median": self.median, "q3": self.q3,
                "max": self.maximum, "whisker_low": self.whisker_low, "whisker_high": self.whisker_high,
                "outliers": list(self.outliers)}


@dataclass(frozen=True)
class AttackReport:
    per_key_map: tuple[float, ...]
    fingerprints: tuple[str, ...]
    stats: BoxStats
    location: str
    seed: int

    @property
    def n(self) -> int:
        return len(self.per_key_map)

    def to_dict(self) -> dict:
        return {"n": self.n, "location": self.location, "seed": str(self.seed),
                "stats": self.stats.to_dict(), "per_key_map": list(self.per_key_map)}


def random_key_attack(model: md.ModelState, test: Split, n: int = 100, seed: int = 0,
                      location: str | None = None) -> AttackReport:
    """mAP under ``n`` random keys drawn by ``random_keys(n, L, seed)``.

    By default the attacker knows where the permutation sits; ``location``
    makes them guess a different feature map instead.
    """
    cfg = model.config
    if not cfg.encrypted:
        raise ValueError("random-key attack needs a model trained with encryption")
    if n < 1:
        raise ValueError("n must be >= 1")
    if location is None:
        where = "input" if cfg.shf_block is not None else cfg.encrypted_map
        L = cfg.key_length
    else:
        if location not in md.MAPS:
            raise ValueError(f"location must be one of {md.MAPS}")
        where, L = location, cfg.map_channels(location)
    keys = random_keys(n, L, seed)
    maps = tuple(evaluate(model, test, md.KeyMode.keyed(k), location=location).map_value for k in keys)
    return AttackReport(maps, tuple(k.fingerprint() for k in keys), BoxStats.of(maps), where, seed)


def write_attack(report: AttackReport, directory) -> tuple[Path, Path]:
    """Raw per-key CSV (floats as repr, so they round-trip exactly) and a JSON summary."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    raw = d / "attack_raw.csv"
    with open(raw, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_HEADER)
        for i, (fp, v) in enumerate(zip(report.fingerprints, report.per_key_map)):
            w.writerow([i, fp, repr(v)])
    summary = d / "attack.json"
    summary.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return raw, summary


def read_attack_raw(path) -> list[float]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != RAW_HEADER:
            raise ValueError(f"{path}: unexpected header")
        return [float(row[2]) for row in reader]


def write_boxplot_csv(path, named_stats: dict[str, BoxStats]) -> None:
    """One row per series for an external plotter; outliers ';'-joined."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "min", "q1", "median", "q3", "max", "whisker_low", "whisker_high", "outliers"])
        for name, s in named_stats.items():
            w.writerow([name, repr(s.minimum), repr(s.q1), repr(s.median), repr(s.q3), repr(s.maximum),
                        repr(s.whisker_low), repr(s.whisker_high), ";".join(repr(o) for o in s.outliers)])
