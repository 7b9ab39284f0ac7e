"""Datasets with known mode structure, the MNIST IDX format, and partitioning."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray | None = None
    mode_centers: np.ndarray | None = None
    num_labels: int | None = None

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("samples must be an N x d matrix")
        if not np.isfinite(s).all():
            raise ValueError("dataset contains non-finite samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (s.shape[0],):
                raise ValueError("labels must have one entry per sample")
            k = self.num_labels if self.num_labels is not None else (int(lab.max()) + 1 if lab.size else 0)
            if lab.size and (lab.min() < 0 or lab.max() >= k):
                raise ValueError(f"labels must lie in [0, {k})")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
            object.__setattr__(self, "num_labels", k)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.samples[idx], labels, self.mode_centers, self.num_labels)

    def to_csv(self) -> str:
        d = self.dim
        cols = [f"x{i}" for i in range(d)] + ["label"]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for i, row in enumerate(self.samples):
            lab = "" if self.labels is None else str(int(self.labels[i]))
            buf.write(",".join(repr(float(v)) for v in row) + "," + lab + "\n")
        return buf.getvalue()


def ring_centers(modes: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(modes) / modes
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])


def make_ring(modes: int, radius: float, sigma: float, per_mode: int, seed) -> Dataset:
    """``modes`` isotropic Gaussians evenly spaced on a circle; label = mode index."""
    if modes < 1 or per_mode < 1:
        raise ValueError("modes and per_mode must be at least 1")
    if not sigma > 0 or not radius >= 0:
        raise ValueError("sigma must be positive and radius non-negative")
    centers = ring_centers(modes, radius)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((modes * per_mode, 2)) * sigma
    labels = np.repeat(np.arange(modes), per_mode)
    return Dataset(centers[labels] + noise, labels, centers, modes)


def make_gaussian_1d(mean: float, std: float, n: int, seed) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(mean + std * rng.standard_normal((n, 1)), np.zeros(n, dtype=np.int64),
                   np.array([[mean]]), 1)


# ----------------------------------------------------------------------- IDX


def _read_header(blob: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(blob) < 4:
        raise IdxError(f"{what}: truncated file at offset 0 (need 4-byte magic)")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise IdxError(f"{what}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    if len(blob) < need:
        raise IdxError(f"{what}: truncated header at offset {len(blob)}, need {need} bytes")
    return struct.unpack(">" + "I" * ndim, blob[4:need])


def parse_idx_images(blob: bytes) -> np.ndarray:
    n, rows, cols = _read_header(blob, IDX_IMAGES_MAGIC, 3, "images")
    body = blob[16:]
    want = n * rows * cols
    if len(body) < want:
        raise IdxError(f"images: truncated pixel data at offset {16 + len(body)}, expected {16 + want} bytes")
    return np.frombuffer(body, dtype=np.uint8, count=want).reshape(n, rows * cols)


def parse_idx_labels(blob: bytes) -> np.ndarray:
    (n,) = _read_header(blob, IDX_LABELS_MAGIC, 1, "labels")
    body = blob[8:]
    if len(body) < n:
        raise IdxError(f"labels: truncated label data at offset {8 + len(body)}, expected {8 + n} bytes")
    return np.frombuffer(body, dtype=np.uint8, count=n)


def pixels_to_unit(raw: np.ndarray) -> np.ndarray:
    """Bytes 0..255 to [-1, 1] via ``x / 127.5 - 1``."""
    return raw.astype(np.float64) / 127.5 - 1.0


def unit_to_pixels(x: np.ndarray) -> np.ndarray:
    return np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5).astype(np.uint8)


def load_idx(images_path, labels_path=None, limit: int | None = None) -> Dataset:
    raw = parse_idx_images(Path(images_path).read_bytes())
    labels = None
    if labels_path is not None:
        labels = parse_idx_labels(Path(labels_path).read_bytes())
        if labels.shape[0] != raw.shape[0]:
            raise IdxError(f"image/label count mismatch: {raw.shape[0]} images, {labels.shape[0]} labels")
    if limit is not None:
        raw = raw[:limit]
        labels = None if labels is None else labels[:limit]
    return Dataset(pixels_to_unit(raw), None if labels is None else labels.astype(np.int64),
                   num_labels=10 if labels is not None else None)


def idx_images_bytes(pixels: np.ndarray, rows: int, cols: int) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1, rows * cols)
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, pixels.shape[0], rows, cols) + pixels.tobytes()


def idx_labels_bytes(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def write_idx(ds: Dataset, images_path, labels_path=None, rows: int | None = None, cols: int | None = None) -> None:
    """Write a [-1, 1]-scaled dataset back to IDX (pixels re-quantized to bytes)."""
    d = ds.dim
    if rows is None:
        rows = cols = int(math.isqrt(d))
    if rows * cols != d:
        raise IdxError(f"cannot lay out {d} values as {rows}x{cols}")
    Path(images_path).write_bytes(idx_images_bytes(unit_to_pixels(ds.samples), rows, cols))
    if labels_path is not None and ds.labels is not None:
        Path(labels_path).write_bytes(idx_labels_bytes(ds.labels))


# ---------------------------------------------------------------- partitions


@dataclass(frozen=True)
class Partition:
    owner: int
    indices: np.ndarray

    def __len__(self):
        return int(self.indices.size)


@dataclass(frozen=True)
class ByLabel:
    """Assign samples by label. When a label appears in several groups,
    ``shared="split"`` deals its samples disjointly among those groups
    (seeded shuffle, then near-equal contiguous chunks in group order)."""
    groups: tuple[tuple[int, ...], ...]
    shared: str = "error"
    seed: int = 0


@dataclass(frozen=True)
class Shard:
    users: int
    seed: int = 0


def partition(ds: Dataset, scheme) -> list[Partition]:
    """Split ``ds`` among users; one :class:`Partition` per user, owner order."""
    n = len(ds)
    if isinstance(scheme, ByLabel):
        if ds.labels is None:
            raise PartitionError("ByLabel partitioning needs labels")
        if scheme.shared not in ("error", "split"):
            raise PartitionError(f"unknown shared-label mode {scheme.shared!r}")
        owners: dict[int, list[int]] = {}
        for u, grp in enumerate(scheme.groups):
            for lab in dict.fromkeys(grp):
                owners.setdefault(int(lab), []).append(u)
        shared = sorted(lab for lab, us in owners.items() if len(us) > 1)
        if shared and scheme.shared == "error":
            raise PartitionError(f"label groups overlap on {shared}")
        picked: list[list[np.ndarray]] = [[] for _ in scheme.groups]
        rng = np.random.default_rng(scheme.seed)
        for lab in sorted(owners):
            idx = np.flatnonzero(ds.labels == lab)
            us = owners[lab]
            if len(us) == 1:
                picked[us[0]].append(idx)
                continue
            for u, chunk in zip(us, np.array_split(rng.permutation(idx), len(us))):
                picked[u].append(chunk)
        return [
            Partition(u, np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64))
            for u, p in enumerate(picked)
        ]
    if isinstance(scheme, Shard):
        if scheme.users < 1:
            raise PartitionError("Shard needs at least one user")
        if scheme.users > n:
            raise PartitionError(f"cannot shard {n} samples among {scheme.users} users")
        perm = np.random.default_rng(scheme.seed).permutation(n)
        return [Partition(u, np.sort(chunk)) for u, chunk in enumerate(np.array_split(perm, scheme.users))]
    raise PartitionError(f"unknown partition scheme {scheme!r}")


def scheme_from_dict(d: dict, default_seed: int = 0):
    kind = d.get("scheme")
    if kind == "by_label":
        seed = d.get("seed")
        return ByLabel(tuple(tuple(int(x) for x in g) for g in d["groups"]), d.get("shared", "error"),
                       int(default_seed if seed is None else seed))
    if kind == "shard":
        seed = d.get("seed")
        return Shard(int(d["users"]), int(default_seed if seed is None else seed))
    raise PartitionError(f"unknown partition scheme {kind!r}")


def near_far_groups(kind: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Ring partitions for the domain-similarity comparison: adjacent
    overlapping modes ("near") versus antipodal halves ("far")."""
    if kind == "near":
        return (0, 1, 2, 3), (2, 3, 4, 5)
    if kind == "far":
        return (0, 1, 2, 3), (4, 5, 6, 7)
    raise ValueError(kind)


def check_partition_set(parts: Sequence[Partition], n: int, covering: bool) -> None:
    allidx = np.concatenate([p.indices for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    if np.unique(allidx).size != allidx.size:
        raise PartitionError("partitions overlap")
    if covering and allidx.size != n:
        raise PartitionError("partitions do not cover the dataset")
