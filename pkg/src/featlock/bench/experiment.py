"""Train one model, evaluate it under each key mode, and persist everything a
rerun needs.

A run directory is named by the hash of its config, so identical configs share
one directory and a finished run can be reused instead of retrained.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from .. import minidet as md
from ..cipher import KeySpec, PermutationKey, keygen, random_keys, read_key, write_key
from ..evalkit import EvalReport, coco_map, voc07_map, write_jsonl
from ..ndkit import derive_seed
from .data import DatasetSpec, Split, directory_digest, load_split, synth_dataset

log = logging.getLogger(__name__)

MODES = ("baseline", "shf", "cp")
EVAL_MODES = ("correct", "noenc", "incorrect")
RESULTS_HEADER = ("mode", "key_mode", "map", "samples")
# files whose content depends on wall-clock time; kept out of the digest inventory
UNTRACKED = ("timing.json", "manifest.json")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "baseline"
    block: int | None = None  # SHF block size M
    map_id: str | None = None  # encrypted feature map for CP
    train: md.TrainConfig = field(default_factory=md.TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    eval_modes: tuple[str, ...] = EVAL_MODES
    n_incorrect: int = 20
    model_seed: int = 0
    key_seed: int = 1
    incorrect_seed: int = 2
    wrong_location: str | None = None  # extra attacker row keyed at this map

    def __post_init__(self):
        object.__setattr__(self, "eval_modes", tuple(self.eval_modes))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "shf":
            if self.block is None or self.block < 1 or self.data.image_size % self.block:
                raise ValueError(f"SHF needs a block size dividing {self.data.image_size}, got {self.block}")
        if self.mode == "cp" and self.map_id not in md.MAPS:
            raise ValueError(f"CP needs map_id in {md.MAPS}, got {self.map_id!r}")
        if unknown := set(self.eval_modes) - set(EVAL_MODES):
            raise ValueError(f"unknown eval modes {sorted(unknown)}")
        if self.n_incorrect < 1:
            raise ValueError("n_incorrect must be >= 1")
        if self.wrong_location is not None:
            if self.mode != "cp" or self.wrong_location not in md.MAPS or self.wrong_location == self.map_id:
                raise ValueError("wrong_location must name a different map of a CP model")
        self.model_config()  # surfaces config errors early

    @property
    def label(self) -> str:
        if self.mode == "shf":
            return f"shf:M={self.block}"
        if self.mode == "cp":
            return f"cp:{self.map_id}"
        return "baseline"

    def model_config(self) -> md.MiniDetConfig:
        return md.MiniDetConfig(
            image_size=self.data.image_size,
            encrypted_map=self.map_id if self.mode == "cp" else None,
            shf_block=self.block if self.mode == "shf" else None,
        )

    def key_spec(self) -> KeySpec | None:
        cfg = self.model_config()
        if self.mode == "cp":
            return KeySpec("CP", cfg.key_length)
        if self.mode == "shf":
            return KeySpec("SHF", 3, self.block)
        return None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "block": self.block,
            "map_id": self.map_id,
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "eval_modes": list(self.eval_modes),
            "n_incorrect": self.n_incorrect,
            "model_seed": str(self.model_seed),
            "key_seed": str(self.key_seed),
            "incorrect_seed": str(self.incorrect_seed),
            "wrong_location": self.wrong_location,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["train"] = md.TrainConfig.from_dict(d.get("train", {}))
        d["data"] = DatasetSpec.from_dict(d.get("data", {}))
        for k in ("model_seed", "key_seed", "incorrect_seed"):
            if k in d:
                d[k] = int(d[k])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ResultRow:
    mode: str
    key_mode: str
    map: float
    samples: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    run_dir: Path
    rows: list[ResultRow]
    reports: dict[str, dict]
    manifest: dict
    train_log: dict
    timing: dict

    def row(self, key_mode: str) -> ResultRow:
        for r in self.rows:
            if r.key_mode == key_mode:
                return r
        raise KeyError(key_mode)

    def map_of(self, key_mode: str) -> float:
        return self.row(key_mode).map


def dataset_dir(root, spec: DatasetSpec) -> Path:
    blob = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return Path(root) / "datasets" / hashlib.sha256(blob.encode()).hexdigest()[:16]


def ensure_dataset(root, spec: DatasetSpec) -> Path:
    d = dataset_dir(root, spec)
    if not (d / "dataset.json").exists():
        tmp = d.with_name(d.name + ".partial")
        synth_dataset(spec, tmp)
        tmp.rename(d)
    return d


def wrong_keys(cfg: ExperimentConfig, true_key: PermutationKey) -> list[PermutationKey]:
    """n_incorrect random keys, skipping any draw equal to the true key."""
    keys, i = [], 0
    while len(keys) < cfg.n_incorrect:
        k = keygen(true_key.L, derive_seed(cfg.incorrect_seed, i))
        if k != true_key:
            keys.append(k)
        i += 1
    return keys


def evaluate(model: md.ModelState, split: Split, key_mode: md.KeyMode, location: str | None = None,
             detections: list | None = None) -> EvalReport:
    """VOC07 mAP at IoU 0.5, with the COCO-style value in ``meta``.

    Pass a list as ``detections`` to receive the per-image detections.
    """
    dets = md.predict(model, split.images, key_mode, location)
    if detections is not None:
        detections.extend(dets)
    report = voc07_map(dets, split.gts)
    report.meta["coco_map"] = coco_map(dets, split.gts).map_value
    return report


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _inventory(run_dir: Path) -> dict[str, str]:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name not in UNTRACKED)
    return {str(p.relative_to(run_dir)): _sha256(p) for p in files}


def write_results_csv(path, rows: list[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([r.mode, r.key_mode, repr(r.map), r.samples])


def read_results_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ResultRow(m, k, float(v), int(n)) for m, k, v, n in reader]


def _iqr_summary(values: list[float]) -> dict:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"mean": float(np.mean(values)), "q1": float(q1), "median": float(med), "q3": float(q3),
            "iqr": float(q3 - q1)}


def load_result(run_dir) -> ExperimentResult:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    results = json.loads((run_dir / "results.json").read_text())
    timing_path = run_dir / "timing.json"
    return ExperimentResult(
        config=ExperimentConfig.from_dict(manifest["config"]),
        run_dir=run_dir,
        rows=read_results_csv(run_dir / "results.csv"),
        reports=results["reports"],
        manifest=manifest,
        train_log=json.loads((run_dir / "train_log.json").read_text()),
        timing=json.loads(timing_path.read_text()) if timing_path.exists() else {},
    )


def run_experiment(cfg: ExperimentConfig, root, reuse: bool = True, run_dir=None,
                   progress=None) -> ExperimentResult:
    """Train, evaluate and persist one experiment under ``root``.

    With ``reuse`` a completed run directory for the same config hash is loaded
    instead of retrained.  ``run_dir`` overrides the hashed location (used for
    reruns that must not overwrite the original).
    """
    root = Path(root)
    run_dir = Path(run_dir) if run_dir is not None else root / "runs" / cfg.config_hash()
    if reuse and (run_dir / "manifest.json").exists():
        log.info("reusing %s", run_dir)
        return load_result(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    data_dir = ensure_dataset(root, cfg.data)
    train_split, test_split = load_split(data_dir, "train"), load_split(data_dir, "test")

    spec = cfg.key_spec()
    key = None
    if spec is not None:
        key = keygen(spec.L, cfg.key_seed)
        write_key(run_dir / "key.json", key, spec)

    model = md.build_model(cfg.model_config(), cfg.model_seed)
    train_mode = md.KeyMode.plain() if key is None else md.KeyMode.keyed(key)
    try:
        model, train_log = md.train(model, train_split.images, train_split.gts, cfg.train, train_mode,
                                    progress=progress)
    except md.TrainingDiverged as exc:
        raise md.TrainingDiverged(f"{cfg.label} (config {cfg.config_hash()}): {exc}") from exc
    md.save_checkpoint(model, run_dir / "model", train_log)
    (run_dir / "train_log.json").write_text(json.dumps(train_log.to_dict(), indent=2) + "\n")
    timing = {"seconds_per_iter": train_log.seconds_per_iter, "iter_seconds": train_log.iter_seconds}
    (run_dir / "timing.json").write_text(json.dumps(timing) + "\n")

    # evaluate from the checkpoint on disk so results reflect what was shipped
    model = md.load_checkpoint(run_dir / "model")
    ids = [f"{i:05d}" for i in range(len(test_split))]
    rows: list[ResultRow] = []
    reports: dict[str, dict] = {}

    if key is None:
        dets = []
        rep = evaluate(model, test_split, md.KeyMode.plain(), detections=dets)
        rows.append(ResultRow(cfg.label, "plain", rep.map_value, 1))
        reports["plain"] = rep.to_dict()
        write_jsonl(run_dir / "detections_plain.jsonl", dets, ids)
    else:
        key, _ = read_key(run_dir / "key.json")
        if "correct" in cfg.eval_modes:
            dets = []
            rep = evaluate(model, test_split, md.KeyMode.keyed(key), detections=dets)
            rows.append(ResultRow(cfg.label, "correct", rep.map_value, 1))
            reports["correct"] = rep.to_dict()
            write_jsonl(run_dir / "detections_correct.jsonl", dets, ids)
        if "noenc" in cfg.eval_modes:
            rep = evaluate(model, test_split, md.KeyMode.noenc())
            rows.append(ResultRow(cfg.label, "noenc", rep.map_value, 1))
            reports["noenc"] = rep.to_dict()
        if "incorrect" in cfg.eval_modes:
            per_key = [evaluate(model, test_split, md.KeyMode.keyed(k)).map_value for k in wrong_keys(cfg, key)]
            summary = _iqr_summary(per_key)
            rows.append(ResultRow(cfg.label, "incorrect", summary["mean"], len(per_key)))
            reports["incorrect"] = {"per_key_map": per_key, **summary}
        if cfg.wrong_location is not None:
            L = model.config.map_channels(cfg.wrong_location)
            per_key = [evaluate(model, test_split, md.KeyMode.keyed(k), location=cfg.wrong_location).map_value
                       for k in random_keys(cfg.n_incorrect, L, cfg.incorrect_seed)]
            summary = _iqr_summary(per_key)
            rows.append(ResultRow(cfg.label, f"wrong-location:{cfg.wrong_location}", summary["mean"], len(per_key)))
            reports["wrong_location"] = {"location": cfg.wrong_location, "per_key_map": per_key, **summary}

    write_results_csv(run_dir / "results.csv", rows)
    (run_dir / "results.json").write_text(json.dumps(
        {"label": cfg.label, "rows": [r.__dict__ for r in rows], "reports": reports},
        indent=2, sort_keys=True) + "\n")

    manifest = {
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": {"model": str(cfg.model_seed), "train": str(cfg.train.seed), "key": str(cfg.key_seed),
                  "incorrect": str(cfg.incorrect_seed), "data": str(cfg.data.seed)},
        "dataset_digest": directory_digest(data_dir),
        "weights_digest": md.weights_digest(model),
        "files": _inventory(run_dir),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return load_result(run_dir)


def rerun_from_manifest(manifest_path, root, run_dir) -> ExperimentResult:
    """Retrain from a manifest's config into ``run_dir`` (never reusing a cache)."""
    manifest = json.loads(Path(manifest_path).read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise ValueError("manifest config does not match its recorded hash")
    return run_experiment(cfg, root, reuse=False, run_dir=run_dir)


def compare_runs(a: ExperimentResult, b: ExperimentResult) -> list[str]:
    """Names of tracked files whose digests differ between two runs."""
    fa, fb = a.manifest["files"], b.manifest["files"]
    return sorted(k for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))
