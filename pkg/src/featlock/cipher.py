"""Keyed permutations: channel permutation (CP) of feature maps and block-wise
pixel shuffling (SHF) of images.

Keys are stored 0-based.  Key files and ``PermutationKey.one_based`` use the
1-based convention.

Block flattening order is channel-major, then row-major inside the M x M
block, so for M = 1 a block vector is just the channel vector at one pixel and
SHF reduces to CP.  Encryption gathers: output position i takes input position
``alpha[i]``.  SHF applies one key to every block.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndkit import Rng, Tensor, derive_seed, take_channels

KINDS = ("CP", "SHF")


class CipherError(ValueError):
    """Raised for malformed keys or key/shape mismatches."""


@dataclass(frozen=True)
class PermutationKey:
    alpha: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        a = tuple(int(v) for v in self.alpha)
        object.__setattr__(self, "alpha", a)
        if not a:
            raise CipherError("a key needs at least one index")
        if sorted(a) != list(range(len(a))):
            raise CipherError("alpha is not a permutation of 0..L-1")

    @property
    def L(self) -> int:
        return len(self.alpha)

    @property
    def one_based(self) -> list[int]:
        return [a + 1 for a in self.alpha]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.alpha, dtype=np.intp)

    def is_identity(self) -> bool:
        return self.alpha == tuple(range(self.L))

    def fingerprint(self) -> str:
        """sha256 over the permutation only; safe to store next to a model."""
        return hashlib.sha256(",".join(map(str, self.alpha)).encode()).hexdigest()

    @classmethod
    def identity(cls, L: int) -> "PermutationKey":
        return cls(tuple(range(L)))


@dataclass(frozen=True)
class KeySpec:
    kind: str
    c: int
    M: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CipherError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.c < 1 or self.M < 1:
            raise CipherError("c and M must be positive")
        if self.kind == "CP" and self.M != 1:
            raise CipherError("CP keys always use block size M = 1")

    @property
    def L(self) -> int:
        return self.c * self.M * self.M


@dataclass(frozen=True)
class BlockGrid:
    M: int
    h: int
    w: int
    blocks: tuple[int, int] = field(init=False)

    def __post_init__(self):
        if self.M < 1 or self.h % self.M or self.w % self.M:
            raise CipherError(f"{self.h}x{self.w} plane is not divisible into {self.M}x{self.M} blocks")
        object.__setattr__(self, "blocks", (self.h // self.M, self.w // self.M))


def keygen(L: int, seed: int) -> PermutationKey:
    """Uniform random permutation of L indices via seeded Fisher-Yates."""
    if L < 1:
        raise CipherError("key length L must be >= 1")
    return PermutationKey(tuple(Rng(seed).shuffle(L)), seed=int(seed))


def invert_key(k: PermutationKey) -> PermutationKey:
    inv = [0] * k.L
    for i, a in enumerate(k.alpha):
        inv[a] = i
    return PermutationKey(tuple(inv))


def random_keys(n: int, L: int, seed: int) -> list[PermutationKey]:
    """n keys, the i-th generated from ``derive_seed(seed, i)``.

    The keys are not filtered against any protected key.
    """
    if n < 1:
        raise CipherError("n must be >= 1")
    return [keygen(L, derive_seed(seed, i)) for i in range(n)]


def _check_cp(shape, k: PermutationKey) -> None:
    if len(shape) < 3:
        raise CipherError(f"expected (..., c, h, w), got shape {shape}")
    if k.L != shape[-3]:
        raise CipherError(f"key length {k.L} does not match channel count {shape[-3]}")


def encrypt_cp(x, k: PermutationKey):
    """Permute channels: output channel i is input channel alpha[i] at every pixel.

    Accepts an array or a Tensor shaped (..., c, h, w).  On a Tensor the result
    stays in the autodiff graph.
    """
    _check_cp(x.shape, k)
    if isinstance(x, Tensor):
        return take_channels(x, k.as_array())
    return np.take(np.asarray(x), k.as_array(), axis=-3)


def _blocks(img: np.ndarray, M: int) -> np.ndarray:
    *lead, c, h, w = img.shape
    BlockGrid(M, h, w)
    v = img.reshape(*lead, c, h // M, M, w // M, M)
    n = len(lead)
    # (..., h/M, w/M, c, M, M): channel-major then row-major inside the block
    v = v.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return v.reshape(*lead, h // M, w // M, c * M * M)


def _unblocks(v: np.ndarray, c: int, M: int) -> np.ndarray:
    *lead, hb, wb, _ = v.shape
    n = len(lead)
    v = v.reshape(*lead, hb, wb, c, M, M)
    v = v.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return np.ascontiguousarray(v.reshape(*lead, c, hb * M, wb * M))


def encrypt_shf(img, M: int, k: PermutationKey) -> np.ndarray:
    """Block-wise pixel shuffling of (..., c, h, w) images with one shared key."""
    img = np.asarray(img)
    c = img.shape[-3]
    if k.L != c * M * M:
        raise CipherError(f"key length {k.L} != c*M*M = {c * M * M}")
    return _unblocks(np.take(_blocks(img, M), k.as_array(), axis=-1), c, M)


def encrypt(x, spec: KeySpec, k: PermutationKey):
    if spec.kind == "CP":
        if x.shape[-3] != spec.c:
            raise CipherError(f"spec says c={spec.c}, data has {x.shape[-3]} channels")
        return encrypt_cp(x, k)
    if np.asarray(x).shape[-3] != spec.c:
        raise CipherError(f"spec says c={spec.c}, data has {np.asarray(x).shape[-3]} channels")
    return encrypt_shf(x, spec.M, k)


def decrypt(x_enc, spec: KeySpec, k: PermutationKey):
    """Undo ``encrypt`` with the same key (pure reindexing, bit exact)."""
    return encrypt(x_enc, spec, invert_key(k))


def key_space(spec: KeySpec) -> tuple[int, float]:
    """Number of keys, L!, exactly and as log2 (via lgamma)."""
    L = spec.L
    return math.factorial(L), math.lgamma(L + 1) / math.log(2)


# ---------------------------------------------------------------------------
# Key files
# ---------------------------------------------------------------------------


def key_to_json(k: PermutationKey, spec: KeySpec) -> str:
    if k.L != spec.L:
        raise CipherError(f"key length {k.L} != spec length {spec.L}")
    doc = {
        "version": 1,
        "kind": spec.kind,
        "L": k.L,
        "M": spec.M,
        "seed": None if k.seed is None else str(k.seed),
        "alpha": k.one_based,
    }
    if k.seed is None:
        del doc["seed"]
    return json.dumps(doc, separators=(",", ":")) + "\n"


def write_key(path, k: PermutationKey, spec: KeySpec) -> None:
    Path(path).write_text(key_to_json(k, spec), encoding="utf-8")


def key_from_json(text: str) -> tuple[PermutationKey, KeySpec]:
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise CipherError(f"unsupported key file version {doc.get('version')!r}")
    for name in ("kind", "L", "M", "alpha"):
        if name not in doc:
            raise CipherError(f"key file is missing {name!r}")
    L, M = int(doc["L"]), int(doc["M"])
    if L % (M * M):
        raise CipherError(f"L={L} is not a multiple of M*M={M * M}")
    spec = KeySpec(doc["kind"], L // (M * M), M)
    alpha = [int(a) - 1 for a in doc["alpha"]]
    if len(alpha) != L:
        raise CipherError(f"alpha has {len(alpha)} entries, expected L={L}")
    seed = doc.get("seed")
    key = PermutationKey(tuple(alpha), seed=None if seed is None else int(seed))
    if seed is not None and keygen(L, int(seed)).alpha != key.alpha:
        raise CipherError("alpha does not match the permutation regenerated from seed")
    return key, spec


def read_key(path) -> tuple[PermutationKey, KeySpec]:
    return key_from_json(Path(path).read_text(encoding="utf-8"))
