"""Farthest point sampling, KNN patch grouping and random patch masking.

Distance ties always resolve toward the lowest point index so that every
routine here is a deterministic function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class PatchSet:
    center_indices: np.ndarray  # (s,)
    centers: np.ndarray         # (s, 3)
    patches: np.ndarray         # (s, k, 3), relative to centers
    visible_idx: np.ndarray     # (g,)
    masked_idx: np.ndarray      # (r,)


def fps(points, s: int, start: int = 0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= s <= n:
        raise ValueError(f"cannot select {s} centers from {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} outside [0, {n})")
    chosen = np.empty(s, dtype=np.int64)
    chosen[0] = start
    min_d = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, s):
        # argmax returns the first maximum, i.e. the lowest index on ties
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        np.minimum(min_d, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d)
    return chosen


def knn_indices(points, centers, k: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    ctr = np.asarray(centers, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    d = ((ctr[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn_group(points, centers, k: int) -> np.ndarray:
    """Return ``(s, k, 3)`` patches of the k nearest points, each expressed relative to its center."""
    pts = np.asarray(points)
    ctr = np.asarray(centers)
    idx = knn_indices(pts, ctr, k)
    return pts[idx] - ctr[:, None, :]


def num_masked(s: int, ratio: float) -> int:
    # small slack so that e.g. 100 * 0.29 = 28.999999999999996 floors to 29
    return int(math.floor(s * ratio + 1e-9))


def mask_patches(s: int, ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Split ``range(s)`` into sorted (visible, masked) index arrays with floor(s * ratio) masked."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = num_masked(s, ratio)
    perm = rng.permutation(s)
    return np.sort(perm[r:]), np.sort(perm[:r])


def patchify(points, s: int, k: int, ratio: float = 0.0, seed=0,
             start: int | None = 0) -> PatchSet:
    """Group a cloud into patches and mask a random subset.

    ``start=None`` draws the FPS start index from ``seed`` instead of using point 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if start is None:
        start = int(rng.integers(pts.shape[0]))
    ci = fps(pts, s, start)
    centers = pts[ci]
    patches = knn_group(pts, centers, k)
    vis, msk = mask_patches(s, ratio, rng)
    return PatchSet(ci, centers, patches, vis, msk)


def group_batch(clouds, s: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """FPS + KNN over a ``(B, n, 3)`` batch. Returns centers ``(B, s, 3)`` and patches ``(B, s, k, 3)``."""
    clouds = np.asarray(clouds)
    centers, patches = [], []
    for pts in clouds:
        c = pts[fps(pts, s)]
        centers.append(c)
        patches.append(knn_group(pts, c, k))
    return np.stack(centers), np.stack(patches)
