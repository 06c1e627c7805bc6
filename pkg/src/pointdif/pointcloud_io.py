"""Point cloud ingestion: ASCII/binary files, normalization, subsampling and the toy shape dataset.

A point cloud is an ``(n, 3)`` float array. Functions here never mutate their inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "torus")
TORUS_MAJOR = 0.7
TORUS_MINOR = 0.3

BIN_MAGIC = b"PDIF"
BIN_VERSION = 1
_BIN_HEADER = struct.Struct("<4sII")


class PointCloudError(ValueError):
    """Invalid point cloud contents (empty, non-finite, wrong shape)."""


class ParseError(PointCloudError):
    def __init__(self, path, lineno: int, line: str):
        super().__init__(f"{path}:{lineno}: expected three numbers, got {line!r}")
        self.lineno = lineno


class EmptyInputError(PointCloudError):
    pass


class BinaryFormatError(PointCloudError):
    pass


class BadMagicError(BinaryFormatError):
    pass


class UnsupportedVersionError(BinaryFormatError):
    pass


class TruncatedPayloadError(BinaryFormatError):
    pass


def check_cloud(points) -> np.ndarray:
    """Return ``points`` as an ``(n, 3)`` array, raising on empty or non-finite input."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PointCloudError(f"expected shape (n, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise PointCloudError("point cloud must contain at least one point")
    if not np.all(np.isfinite(pts)):
        raise PointCloudError("point cloud contains NaN or Inf coordinates")
    return pts


def load_xyz(path) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open("r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(path, lineno, line)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(path, lineno, line) from None
    if not rows:
        raise EmptyInputError(f"{path}: no points found")
    return check_cloud(rows)


def save_xyz(points, path) -> None:
    # 17 significant digits round-trips float64 exactly
    pts = check_cloud(points)
    path = Path(path)
    try:
        with path.open("w") as fh:
            for x, y, z in pts:
                fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
    except OSError as exc:
        raise OSError(f"cannot write point cloud to {path}: {exc}") from exc


def save_bin(points, path) -> None:
    pts = check_cloud(points).astype("<f4")
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(_BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, pts.shape[0]))
            fh.write(pts.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write point cloud to {path}: {exc}") from exc


def load_bin(path) -> np.ndarray:
    """Read a ``PDIF`` binary cloud. Coordinates come back as float32."""
    data = Path(path).read_bytes()
    if len(data) < _BIN_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, n = _BIN_HEADER.unpack_from(data)
    if magic != BIN_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {BIN_MAGIC!r}")
    if version != BIN_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    expected = n * 3 * 4
    payload = data[_BIN_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {n} points but payload holds {len(payload) // 12}")
    if len(payload) > expected:
        raise BinaryFormatError(f"{path}: {len(payload) - expected} trailing bytes")
    pts = np.frombuffer(payload, dtype="<f4").reshape(n, 3).astype(np.float32)
    if n < 1:
        raise EmptyInputError(f"{path}: zero points")
    if not np.all(np.isfinite(pts)):
        raise PointCloudError(f"{path}: non-finite coordinates")
    return pts


def normalize_unit_sphere(points) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide maps to the origin.
    """
    pts = check_cloud(points)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius == 0.0:
        return np.zeros_like(pts)
    out = centered / radius
    # re-center once more to absorb rounding in the division
    return out - out.mean(axis=0)


def subsample(points, m: int, seed: int) -> np.ndarray:
    pts = check_cloud(points)
    if not 1 <= m <= pts.shape[0]:
        raise PointCloudError(f"cannot draw {m} points from a cloud of {pts.shape[0]}")
    idx = np.random.default_rng(seed).choice(pts.shape[0], size=m, replace=False)
    return pts[idx]


def synth_shape(kind: str, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise PointCloudError("n must be positive")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        # six faces of equal area: pick a face, then a uniform point on it
        face = rng.integers(0, 6, size=n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign
        return pts
    if kind == "torus":
        u = rng.uniform(0.0, 2 * np.pi, size=n)
        v = rng.uniform(0.0, 2 * np.pi, size=n)
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        return np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)
    raise PointCloudError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


@dataclass
class ToyDataset:
    clouds: list
    labels: list
    train_idx: list = field(default_factory=list)
    val_idx: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.clouds) != len(self.labels):
            raise ValueError("clouds and labels differ in length")
        if not self.train_idx or not self.val_idx:
            raise ValueError("train and val splits must both be non-empty")
        if set(self.train_idx) & set(self.val_idx):
            raise ValueError("train and val splits overlap")

    def __len__(self):
        return len(self.clouds)

    def split(self, name: str):
        idx = {"train": self.train_idx, "val": self.val_idx}[name]
        return np.stack([self.clouds[i] for i in idx]), np.asarray([self.labels[i] for i in idx])


def make_toy_dataset(per_class: int, n_points: int, seed: int) -> ToyDataset:
    """Balanced sphere/cube/torus dataset, normalized, with a stratified 80/20 split."""
    if per_class < 2:
        raise ValueError("per_class must be at least 2 so both splits are non-empty")
    rng = np.random.default_rng(seed)
    n_val = max(1, round(0.2 * per_class))
    clouds, labels, train_idx, val_idx = [], [], [], []
    for label, kind in enumerate(SHAPE_KINDS):
        seeds = rng.integers(0, 2**63 - 1, size=per_class)
        for j, s in enumerate(seeds):
            idx = len(clouds)
            clouds.append(normalize_unit_sphere(synth_shape(kind, n_points, int(s))))
            labels.append(label)
            (val_idx if j >= per_class - n_val else train_idx).append(idx)
    return ToyDataset(clouds, labels, train_idx, val_idx)


MANIFEST = "manifest.csv"


def save_dataset(dataset: ToyDataset, out_dir) -> list:
    """Write each cloud as ``cloud_NNNN.bin`` plus a ``manifest.csv`` of labels and splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = {i: "train" for i in dataset.train_idx} | {i: "val" for i in dataset.val_idx}
    written = []
    lines = ["file,label,split"]
    for i, (cloud, label) in enumerate(zip(dataset.clouds, dataset.labels)):
        name = f"cloud_{i:04d}.bin"
        save_bin(cloud, out / name)
        written.append(out / name)
        lines.append(f"{name},{label},{split.get(i, 'unused')}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return written


def load_dataset(data_dir) -> ToyDataset:
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise PointCloudError(f"{root}: no {MANIFEST} found (create one with make-data)")
    clouds, labels, train_idx, val_idx = [], [], [], []
    rows = manifest.read_text().splitlines()
    if not rows or rows[0].strip() != "file,label,split":
        raise PointCloudError(f"{manifest}:1: expected header 'file,label,split'")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row.strip():
            continue
        parts = row.split(",")
        if len(parts) != 3 or parts[2] not in ("train", "val", "unused"):
            raise PointCloudError(f"{manifest}:{lineno}: malformed row {row!r}")
        try:
            label = int(parts[1])
        except ValueError:
            raise PointCloudError(f"{manifest}:{lineno}: label {parts[1]!r} is not an integer") from None
        idx = len(clouds)
        clouds.append(load_bin(root / parts[0]).astype(np.float64))
        labels.append(label)
        if parts[2] == "train":
            train_idx.append(idx)
        elif parts[2] == "val":
            val_idx.append(idx)
    return ToyDataset(clouds, labels, train_idx, val_idx)
