"""Synthetic shapes detection data: circles, squares and triangles on noisy
backgrounds.  Class depends only on shape; colours are random, so a detector
cannot lean on colour alone."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..evalkit import BoundingBox, GroundTruth, read_jsonl, write_jsonl
from ..ndkit import Rng, derive_seed

CLASSES = ("circle", "square", "triangle")
IMAGE_MAGIC = b"MDT1"


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 2000
    n_test: int = 300
    image_size: int = 64
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.2, 0.5)
    noise_std: float = 0.05
    min_contrast: float = 0.35
    max_pair_iou: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects_per_image", tuple(self.objects_per_image))
        object.__setattr__(self, "size_range", tuple(self.size_range))
        lo, hi = self.size_range
        if not 0 < lo <= hi < 1:
            raise ValueError("size_range must satisfy 0 < lo <= hi < 1")
        if self.objects_per_image[0] < 0 or self.objects_per_image[0] > self.objects_per_image[1]:
            raise ValueError("bad objects_per_image range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Split:
    images: np.ndarray  # (n, 3, s, s) float64, values exactly representable in float32
    gts: list[list[GroundTruth]]

    def __len__(self):
        return len(self.images)


def _shape_mask(kind: str, box: tuple[float, float, float, float], size: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    c = np.arange(size) + 0.5
    xs, ys = np.meshgrid(c, c)
    if kind == "circle":
        cx, cy, r = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if kind == "square":
        return (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    # apex at top centre, base along the bottom edge
    t = (ys - y0) / (y1 - y0)
    half = t * (x1 - x0) / 2
    cx = (x0 + x1) / 2
    return (t >= 0) & (t <= 1) & (np.abs(xs - cx) <= half)


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _place(rng: Rng, spec: DatasetSpec, n_obj: int):
    s = spec.image_size
    lo, hi = spec.size_range
    boxes = []
    for _ in range(n_obj):
        for _ in range(100):
            side = (lo + (hi - lo) * rng.uniform()) * s
            x0 = rng.uniform() * (s - side)
            y0 = rng.uniform() * (s - side)
            box = (x0, y0, x0 + side, y0 + side)
            if all(_box_iou(box, b) < spec.max_pair_iou for b in boxes):
                boxes.append(box)
                break
        else:
            return None
    return boxes


def render_image(spec: DatasetSpec, index: int) -> tuple[np.ndarray, list[GroundTruth]]:
    """Image ``index`` of the stream defined by ``spec.seed``; independent of other indices."""
    s = spec.image_size
    attempt = 0
    while True:
        rng = Rng(derive_seed(derive_seed(spec.seed, index), attempt))
        lo, hi = spec.objects_per_image
        n_obj = lo + rng.below(hi - lo + 1)
        boxes = _place(rng, spec, n_obj)
        if boxes is not None:
            break
        attempt += 1
    bg = rng.uniform(3)
    img = np.repeat(bg[:, None, None], s * s, axis=1).reshape(3, s, s)
    img = img + spec.noise_std * rng.normal((3, s, s))
    gts = []
    for box in boxes:
        cls = rng.below(len(CLASSES))
        while True:
            color = rng.uniform(3)
            if np.abs(color - bg).mean() >= spec.min_contrast:
                break
        mask = _shape_mask(CLASSES[cls], box, s)
        img[:, mask] = color[:, None] + spec.noise_std * rng.normal((3, int(mask.sum())))
        gts.append(GroundTruth(BoundingBox(*box), cls))
    img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return img, gts


def make_split(spec: DatasetSpec, split: str) -> Split:
    if split == "train":
        idx = range(spec.n_train)
    elif split == "test":
        idx = range(spec.n_train, spec.n_train + spec.n_test)
    else:
        raise ValueError(f"unknown split {split!r}")
    imgs, gts = [], []
    for i in idx:
        im, g = render_image(spec, i)
        imgs.append(im)
        gts.append(g)
    shape = (0, 3, spec.image_size, spec.image_size)
    return Split(np.stack(imgs) if imgs else np.zeros(shape), gts)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def write_image(path, img: np.ndarray) -> None:
    c, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<3I", c, h, w))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not an MDT1 image")
    c, h, w = struct.unpack_from("<3I", raw, 4)
    if len(raw) != 16 + 4 * c * h * w:
        raise ValueError(f"{path}: size does not match header")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float64)


def synth_dataset(spec: DatasetSpec, root) -> Path:
    """Write ``train/`` and ``test/`` image folders plus annotation JSON lines."""
    root = Path(root)
    for split in ("train", "test"):
        data = make_split(spec, split)
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        ids = [f"{i:05d}" for i in range(len(data))]
        for iid, img in zip(ids, data.images):
            write_image(d / f"{iid}.mdt", img)
        write_jsonl(root / f"{split}.jsonl", data.gts, ids)
    (root / "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return root


def load_split(root, split: str) -> Split:
    root = Path(root)
    files = sorted((root / split).glob("*.mdt"))
    ids = [f.stem for f in files]
    _, gts = read_jsonl(root / f"{split}.jsonl", ids)
    imgs = np.stack([read_image(f) for f in files]) if files else np.zeros((0, 3, 0, 0))
    return Split(imgs, gts)


def directory_digest(root) -> str:
    """sha256 over relative paths and contents of every file under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
