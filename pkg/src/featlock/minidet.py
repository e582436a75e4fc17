"""MiniDet: a three-feature-map single-shot detector with an optional keyed
channel-permutation layer.

Layout (input 3x64x64)::

    conv3x3 3->16,  relu, pool  -> F1 16x32x32
    conv3x3 16->32, relu, pool  -> F2 32x16x16   -> loc/conf heads
    conv3x3 32->64, relu, pool  -> F3 64x8x8     -> loc/conf heads

Each head cell carries two square anchors, so there are 2*(16*16 + 8*8) = 640
anchors.  When a map is encrypted, the permutation sits right after the pool
that produces it, so everything downstream (heads included) sees permuted
channels.  A model trained on SHF-encrypted inputs instead encrypts the images
before the first conv.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndkit as nd
from .cipher import PermutationKey, encrypt_shf
from .evalkit import BoundingBox, Detection, GroundTruth, iou_matrix

log = logging.getLogger(__name__)

MAPS = ("F1", "F2", "F3")
BLOB_MAGIC = b"MDW1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MiniDetConfig:
    image_size: int = 64
    channels: tuple[int, int, int] = (16, 32, 64)
    num_classes: int = 3
    anchor_scales: tuple[tuple[float, float], tuple[float, float]] = ((0.3, 0.6), (0.6, 0.9))
    encrypted_map: str | None = None  # None, "F1", "F2" or "F3"
    shf_block: int | None = None  # block size M for SHF-encrypted inputs

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "anchor_scales", tuple(tuple(s) for s in self.anchor_scales))
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if len(self.channels) != 3 or len(self.anchor_scales) != 2:
            raise ValueError("MiniDet has exactly three maps and two heads")
        if any(len(s) != 2 for s in self.anchor_scales):
            raise ValueError("two anchors per cell")
        if self.encrypted_map is not None:
            if self.encrypted_map not in MAPS:
                raise ValueError(f"encrypted_map must be one of {MAPS} or None")
            if self.shf_block is not None:
                raise ValueError("encrypt either a feature map or the input, not both")
            if self.map_channels(self.encrypted_map) < 16:
                raise ValueError("encrypted map needs at least 16 channels")
        if self.shf_block is not None:
            if self.shf_block < 1 or self.image_size % self.shf_block:
                raise ValueError(f"image size {self.image_size} not divisible by block size {self.shf_block}")

    def map_channels(self, name: str) -> int:
        return self.channels[MAPS.index(name)]

    def map_size(self, name: str) -> int:
        return self.image_size // (2 ** (MAPS.index(name) + 1))

    @property
    def encrypted(self) -> bool:
        return self.encrypted_map is not None or self.shf_block is not None

    @property
    def key_length(self) -> int | None:
        if self.encrypted_map is not None:
            return self.map_channels(self.encrypted_map)
        if self.shf_block is not None:
            return 3 * self.shf_block ** 2
        return None

    @property
    def n_anchors(self) -> int:
        return 2 * (self.map_size("F2") ** 2 + self.map_size("F3") ** 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["anchor_scales"] = [list(s) for s in self.anchor_scales]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MiniDetConfig":
        return cls(**d)


@dataclass(frozen=True)
class KeyMode:
    """How the permutation layer is driven at forward time.

    ``keyed``: apply the key at the encrypted location.  ``noenc``: skip the
    permutation layer.  ``plain``: the model was trained without encryption.
    """

    kind: str
    key: PermutationKey | None = None

    def __post_init__(self):
        if self.kind not in ("keyed", "noenc", "plain"):
            raise ValueError(f"unknown key mode {self.kind!r}")
        if (self.kind == "keyed") != (self.key is not None):
            raise ValueError("keyed mode needs a key, other modes take none")

    @classmethod
    def keyed(cls, key: PermutationKey) -> "KeyMode":
        return cls("keyed", key)

    @classmethod
    def noenc(cls) -> "KeyMode":
        return cls("noenc")

    @classmethod
    def plain(cls) -> "KeyMode":
        return cls("plain")


# from-scratch init and 4k iterations: 1e-3 stalls near the prior-only loss
BASE_LR = 2e-2


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 4000
    lr_schedule: tuple[tuple[int, float], ...] = ((2667, BASE_LR), (3333, BASE_LR / 10), (4000, BASE_LR / 100))
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 16
    seed: int = 0
    loss_weight_loc: float = 1.0
    log_every: int = 100
    warmup: int = 0  # linear ramp to the first lr over this many iterations

    def __post_init__(self):
        sched = tuple((int(b), float(lr)) for b, lr in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if not sched:
            raise ValueError("lr_schedule must not be empty")
        bounds = [b for b, _ in sched]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("lr_schedule bounds must be strictly increasing")
        if self.iterations < 0 or self.batch_size < 1 or self.warmup < 0:
            raise ValueError("iterations and warmup must be >= 0 and batch_size >= 1")

    def lr_at(self, it: int) -> float:
        lr = next((lr for bound, lr in self.lr_schedule if it < bound), self.lr_schedule[-1][1])
        if it < self.warmup:
            return lr * (it + 1) / self.warmup
        return lr

    @classmethod
    def scaled(cls, iterations: int, **kw) -> "TrainConfig":
        """Three-phase schedule: 2/3 of the run at lr0, then lr0/10, then lr0/100.

        The first 5% ramps up linearly; without it some random inits at lr0
        never leave the predict-background plateau.
        """
        lr0 = kw.pop("lr", BASE_LR)
        kw.setdefault("warmup", round(iterations / 20))
        b1 = round(iterations * 2 / 3)
        b2 = round(iterations * 5 / 6)
        sched: list[tuple[int, float]] = []
        for b, lr in ((b1, lr0), (b2, lr0 / 10), (iterations, lr0 / 100)):
            # very short runs collapse phases; keep bounds strictly increasing
            if b > (sched[-1][0] if sched else 0):
                sched.append((b, lr))
        return cls(iterations=iterations, lr_schedule=tuple(sched) or ((1, lr0),), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

LAYERS = ("conv1", "conv2", "conv3", "loc2", "conf2", "loc3", "conf3")


def layer_shapes(cfg: MiniDetConfig) -> dict[str, tuple[int, int]]:
    """(c_in, c_out) for every 3x3 conv, in a fixed order."""
    c1, c2, c3 = cfg.channels
    per_cell = 2
    k1 = cfg.num_classes + 1
    return {
        "conv1": (3, c1),
        "conv2": (c1, c2),
        "conv3": (c2, c3),
        "loc2": (c2, per_cell * 4),
        "conf2": (c2, per_cell * k1),
        "loc3": (c3, per_cell * 4),
        "conf3": (c3, per_cell * k1),
    }


@dataclass
class ModelState:
    config: MiniDetConfig
    params: dict[str, nd.Param]
    seed: int = 0
    trained_with_key_fingerprint: str | None = None

    def param_list(self) -> list[nd.Param]:
        return [self.params[n] for n in sorted(self.params)]

    def n_parameters(self) -> int:
        return sum(p.value.data.size for p in self.params.values())

    def weights(self) -> dict[str, np.ndarray]:
        return {n: p.value.data.copy() for n, p in self.params.items()}

    def copy(self) -> "ModelState":
        params = {n: nd.Param(nd.Tensor(p.value.data.copy()), p.momentum_buffer.copy())
                  for n, p in self.params.items()}
        return ModelState(self.config, params, self.seed, self.trained_with_key_fingerprint)


def build_model(cfg: MiniDetConfig, seed: int) -> ModelState:
    """He-normal weights and zero biases, all drawn from one seeded stream."""
    rng = nd.Rng(seed)
    params = {}
    for name, (cin, cout) in layer_shapes(cfg).items():
        w = nd.he_normal(rng, (cout, cin, 3, 3))
        params[f"{name}.weight"] = nd.Param(nd.Tensor(w, name=f"{name}.weight"))
        params[f"{name}.bias"] = nd.Param(nd.Tensor(np.zeros(cout), name=f"{name}.bias"))
    return ModelState(cfg, params, seed=seed)


def _conv(model: ModelState, name: str, x: nd.Tensor) -> nd.Tensor:
    p = model.params
    return nd.conv2d(x, p[f"{name}.weight"].value, p[f"{name}.bias"].value, stride=1, pad=1)


def _head(model: ModelState, name: str, x: nd.Tensor, width: int) -> nd.Tensor:
    y = _conv(model, name, x)  # (b, 2*width, s, s)
    b, _, s, _ = y.shape
    y = nd.transpose(y, (0, 2, 3, 1))
    return nd.reshape(y, (b, s * s * 2, width))


def _resolve_location(model: ModelState, key_mode: KeyMode, location: str | None):
    cfg = model.config
    if key_mode.kind != "keyed":
        return None, None
    key = key_mode.key
    where = location if location is not None else (
        "input" if cfg.shf_block is not None else cfg.encrypted_map)
    if where is None:
        if key.is_identity():
            return None, None
        raise ValueError("model has no encrypted location; pass location= to apply a key")
    if where == "input":
        if cfg.shf_block is None:
            raise ValueError("input encryption needs a model trained with a block size")
        if key.L != 3 * cfg.shf_block ** 2:
            raise ValueError(f"SHF key length {key.L} != 3*M*M = {3 * cfg.shf_block ** 2}")
        return where, key
    if where not in MAPS:
        raise ValueError(f"unknown location {where!r}")
    if key.L != cfg.map_channels(where):
        raise ValueError(f"key length {key.L} does not match {where} with {cfg.map_channels(where)} channels")
    return where, key


def forward(model: ModelState, images, key_mode: KeyMode, location: str | None = None,
            taps: dict | None = None):
    """Raw predictions: loc offsets (b, A, 4) and class logits (b, A, K+1).

    ``location`` overrides where a keyed permutation is applied (used to play
    an attacker who guesses the wrong map).  If ``taps`` is a dict it receives
    each pooled map before ("F2.pre") and after ("F2") the permutation layer.
    """
    where, key = _resolve_location(model, key_mode, location)
    arr = images.data if isinstance(images, nd.Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1:] != (3, model.config.image_size, model.config.image_size):
        raise ValueError(f"images must be (b, 3, {model.config.image_size}, {model.config.image_size}), got {arr.shape}")
    if where == "input":
        arr = encrypt_shf(arr, model.config.shf_block, key)
    # pixels in [0, 1] are centred to [-1, 1]; elementwise, so it commutes with SHF
    x = nd.Tensor((arr - 0.5) * 2.0)

    feats = {}
    for name, conv in zip(MAPS, ("conv1", "conv2", "conv3")):
        x = nd.maxpool2d(nd.relu(_conv(model, conv, x)))
        if taps is not None:
            taps[f"{name}.pre"] = x
        if where == name:
            x = nd.take_channels(x, key.as_array())
        feats[name] = x
        if taps is not None:
            taps[name] = x
    k1 = model.config.num_classes + 1
    loc = nd.concat([_head(model, "loc2", feats["F2"], 4), _head(model, "loc3", feats["F3"], 4)], axis=1)
    conf = nd.concat([_head(model, "conf2", feats["F2"], k1), _head(model, "conf3", feats["F3"], k1)], axis=1)
    return loc, conf


# ---------------------------------------------------------------------------
# Anchors, box coding and matching
# ---------------------------------------------------------------------------


def anchors(cfg: MiniDetConfig) -> np.ndarray:
    """(A, 4) anchors as (cx, cy, w, h) in pixels, ordered F2 cells then F3 cells,
    row-major, two scales per cell."""
    out = []
    for name, scales in zip(("F2", "F3"), cfg.anchor_scales):
        s = cfg.map_size(name)
        step = cfg.image_size / s
        for i in range(s):
            for j in range(s):
                for sc in scales:
                    side = sc * cfg.image_size
                    out.append(((j + 0.5) * step, (i + 0.5) * step, side, side))
    return np.array(out, dtype=np.float64)


def center_to_corners(b: np.ndarray) -> np.ndarray:
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def corners_to_center(b: np.ndarray) -> np.ndarray:
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2,
                     b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)


def encode(gt_corners: np.ndarray, anc: np.ndarray) -> np.ndarray:
    g = corners_to_center(gt_corners)
    return np.stack([(g[..., 0] - anc[..., 0]) / anc[..., 2],
                     (g[..., 1] - anc[..., 1]) / anc[..., 3],
                     np.log(g[..., 2] / anc[..., 2]),
                     np.log(g[..., 3] / anc[..., 3])], axis=-1)


_MAX_LOG_SCALE = math.log(1000.0)


def decode(offsets: np.ndarray, anc: np.ndarray) -> np.ndarray:
    dw = np.clip(offsets[..., 2], -_MAX_LOG_SCALE, _MAX_LOG_SCALE)
    dh = np.clip(offsets[..., 3], -_MAX_LOG_SCALE, _MAX_LOG_SCALE)
    c = np.stack([anc[..., 0] + offsets[..., 0] * anc[..., 2],
                  anc[..., 1] + offsets[..., 1] * anc[..., 3],
                  anc[..., 2] * np.exp(dw), anc[..., 3] * np.exp(dh)], axis=-1)
    return center_to_corners(c)


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (A,) 0 = background, c+1 for class c
    offsets: np.ndarray  # (A, 4), zero where background
    positive: np.ndarray  # (A,) bool


def match_anchors(gts: Sequence[GroundTruth], anc: np.ndarray, iou_thresh: float = 0.5) -> AnchorTargets:
    """SSD matching: each GT claims its best anchor, then every anchor with
    IoU >= iou_thresh to some GT is positive for its best GT."""
    n = len(anc)
    labels = np.zeros(n, dtype=np.intp)
    offsets = np.zeros((n, 4))
    if not gts:
        return AnchorTargets(labels, offsets, np.zeros(n, dtype=bool))
    g = np.array([gt.box.as_list() for gt in gts], dtype=np.float64)
    cls = np.array([gt.class_id for gt in gts], dtype=np.intp)
    ov = iou_matrix(center_to_corners(anc), g)  # (A, G)
    best_gt = ov.argmax(axis=1)
    best_ov = ov[np.arange(n), best_gt]
    for j in range(len(gts)):
        a = int(ov[:, j].argmax())
        best_gt[a] = j
        best_ov[a] = 2.0  # forced positive
    pos = best_ov >= iou_thresh
    labels[pos] = cls[best_gt[pos]] + 1
    offsets[pos] = encode(g[best_gt[pos]], anc[pos])
    return AnchorTargets(labels, offsets, pos)


def n_mined_negatives(n_pos: int, n_available: int, ratio: int = 3, floor: int = 8) -> int:
    return min(n_available, max(ratio * n_pos, floor))


def detection_loss(loc: nd.Tensor, conf: nd.Tensor, targets: Sequence[AnchorTargets],
                   loss_weight_loc: float = 1.0) -> nd.Tensor:
    """(conf + w*loc) / max(1, #positives) with 3:1 hard negative mining.

    Negatives are ranked per image by background cross entropy on the current
    logits; the selection itself is not differentiated.
    """
    b, A, k1 = conf.shape
    if len(targets) != b:
        raise ValueError(f"{len(targets)} target sets for a batch of {b}")
    logp_bg = -nd.log_softmax(conf.data)[..., 0]  # (b, A)
    sel, sel_labels, pos_rows, pos_offsets = [], [], [], []
    n_pos_total = 0
    for i, t in enumerate(targets):
        pos = np.flatnonzero(t.positive)
        neg = np.flatnonzero(~t.positive)
        k = n_mined_negatives(len(pos), len(neg))
        # stable sort keeps index order among equal losses
        hard = neg[np.argsort(-logp_bg[i, neg], kind="stable")[:k]]
        rows = np.concatenate([pos, np.sort(hard)])
        sel.append(i * A + rows)
        sel_labels.append(t.labels[rows])
        pos_rows.append(i * A + pos)
        pos_offsets.append(t.offsets[pos])
        n_pos_total += len(pos)
    sel = np.concatenate(sel)
    conf_loss = nd.softmax_cross_entropy(nd.take_rows(nd.reshape(conf, (b * A, k1)), sel),
                                         np.concatenate(sel_labels), reduction="sum")
    pos_rows = np.concatenate(pos_rows)
    if len(pos_rows):
        loc_loss = nd.smooth_l1(nd.take_rows(nd.reshape(loc, (b * A, 4)), pos_rows),
                                np.concatenate(pos_offsets))
        total = conf_loss + loc_loss * loss_weight_loc
    else:
        total = conf_loss
    return total * (1.0 / max(1, n_pos_total))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    seconds_per_iter: float = 0.0
    iter_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Deterministic part of the log; timing is reported separately."""
        return {"iterations": self.iterations, "losses": self.losses, "lrs": self.lrs}


def batch_order(n: int, iterations: int, batch_size: int, seed: int):
    """Yield index arrays: shuffled epochs, reshuffled from a child stream each epoch."""
    rng = nd.Rng(seed)
    epoch, pos, perm = 0, n, []
    for _ in range(iterations):
        idx = []
        while len(idx) < batch_size:
            if pos >= n:
                perm = rng.child(epoch).shuffle(n)
                epoch, pos = epoch + 1, 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(perm[pos:pos + take])
            pos += take
        yield np.asarray(idx, dtype=np.intp)


def train(model: ModelState, images: np.ndarray, gts: Sequence[Sequence[GroundTruth]],
          tc: TrainConfig, key_mode: KeyMode, progress=None) -> tuple[ModelState, TrainLog]:
    """Run ``tc.iterations`` SGD steps in place and return the model and its log.

    The loss logged at iteration i > 0 is the mean over iterations
    [i - log_every, i); the entry at 0 is the first batch loss.
    """
    if len(images) == 0:
        raise ValueError("training set is empty")
    if key_mode.kind == "keyed":
        model.trained_with_key_fingerprint = key_mode.key.fingerprint()
    anc = anchors(model.config)
    targets = [match_anchors(g, anc) for g in gts]
    params = model.param_list()
    log_ = TrainLog()
    window: list[float] = []

    def record(it):
        log_.iterations.append(it)
        log_.losses.append(float(np.mean(window)))
        log_.lrs.append(tc.lr_at(max(it - 1, 0)))

    for it, idx in enumerate(batch_order(len(images), tc.iterations, tc.batch_size, tc.seed)):
        if it and it % tc.log_every == 0:
            record(it)
            window = []
        t0 = time.perf_counter()
        loc, conf = forward(model, images[idx], key_mode)
        loss = detection_loss(loc, conf, [targets[i] for i in idx], tc.loss_weight_loc)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at iteration {it}")
        nd.backward(loss)
        nd.sgd_step(params, tc.lr_at(it), tc.momentum, tc.weight_decay)
        log_.iter_seconds.append(time.perf_counter() - t0)
        window.append(value)
        if it == 0:
            record(0)
        if progress is not None:
            progress(it, value)
    if tc.iterations and tc.iterations % tc.log_every == 0:
        record(tc.iterations)
    if log_.iter_seconds:
        log_.seconds_per_iter = float(np.mean(log_.iter_seconds))
    return model, log_


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; a box is dropped when IoU > iou_thresh with a kept box."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_thresh]
    return keep


def postprocess(loc: np.ndarray, conf: np.ndarray, cfg: MiniDetConfig, conf_thresh: float = 0.05,
                nms_iou: float = 0.45, max_dets: int = 50) -> list[list[Detection]]:
    """Decode, clip to the image, per-class NMS, keep the top ``max_dets``."""
    loc = loc.data if isinstance(loc, nd.Tensor) else np.asarray(loc)
    conf = conf.data if isinstance(conf, nd.Tensor) else np.asarray(conf)
    anc = anchors(cfg)
    size = float(cfg.image_size)
    out = []
    for b in range(loc.shape[0]):
        boxes = np.clip(decode(loc[b], anc), 0.0, size)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        probs = np.exp(nd.log_softmax(conf[b]))
        found = []
        for c in range(1, conf.shape[-1]):
            cand = np.flatnonzero(valid & (probs[:, c] > conf_thresh))
            if not cand.size:
                continue
            kept = nms(boxes[cand], probs[cand, c], nms_iou)
            found.extend((float(probs[cand[k], c]), c - 1, cand[k]) for k in kept)
        found.sort(key=lambda t: -t[0])
        out.append([Detection(BoundingBox(*map(float, boxes[a])), c, s)
                    for s, c, a in found[:max_dets]])
    return out


def predict(model: ModelState, images: np.ndarray, key_mode: KeyMode, location: str | None = None,
            batch_size: int = 50, **post) -> list[list[Detection]]:
    dets = []
    for s in range(0, len(images), batch_size):
        loc, conf = forward(model, images[s:s + batch_size], key_mode, location)
        dets.extend(postprocess(loc, conf, model.config, **post))
    return dets


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def write_blob(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_blob(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path}: not an MDW1 weight blob")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(raw) != off + 8 * n:
        raise ValueError(f"{path}: blob size does not match its header")
    return np.frombuffer(raw, dtype="<f8", offset=off).reshape(dims).astype(np.float64)


def save_checkpoint(model: ModelState, directory, train_log: TrainLog | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``model.json`` plus one MDW1 blob per parameter.  Never writes the key."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(model.params):
        fn = f"{name}.bin"
        write_blob(d / fn, model.params[name].value.data)
        files[name] = fn
    manifest = {
        "format": "minidet-checkpoint/1",
        "config": model.config.to_dict(),
        "seed": str(model.seed),
        "key_fingerprint": model.trained_with_key_fingerprint,
        "params": files,
        "loss_log": None if train_log is None else train_log.to_dict(),
        **(extra or {}),
    }
    (d / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d / "model.json"


def load_checkpoint(directory) -> ModelState:
    d = Path(directory)
    manifest = json.loads((d / "model.json").read_text())
    cfg = MiniDetConfig.from_dict(manifest["config"])
    params = {name: nd.Param(nd.Tensor(read_blob(d / fn), name=name))
              for name, fn in manifest["params"].items()}
    expected = {f"{n}.{s}" for n in LAYERS for s in ("weight", "bias")}
    if set(params) != expected:
        raise ValueError(f"checkpoint parameters {sorted(params)} do not match MiniDet")
    return ModelState(cfg, params, int(manifest["seed"]), manifest.get("key_fingerprint"))


def weights_digest(model: ModelState) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].value.data, dtype="<f8").tobytes())
    return h.hexdigest()
