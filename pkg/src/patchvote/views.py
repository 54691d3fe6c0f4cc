"""Rotation handling: unit quaternions, the geodesic metric, K-medoids.

Quaternions are stored (w, x, y, z) as float64 arrays and kept in a
canonical sign (w >= 0; if w == 0 the first nonzero component >= 0) so
the double cover never produces two encodings of one rotation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Normalize to unit length and fix the double-cover sign."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise ValueError("zero quaternion")
    q = q / norm
    for c in q:
        if c > 0:
            break
        if c < 0:
            q = -q
            break
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b (apply b first, then a, as rotations)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate_vectors(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the rotation to row vectors v (n, 3)."""
    return np.asarray(v, dtype=np.float64) @ quat_to_matrix(q).T


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = angle / 2.0
    return canonical_quat(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def quat_geodesic(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic rotation distance: 2*arccos(min(1, |<a,b>|)), in [0, pi]."""
    d = abs(float(np.dot(a, b)))
    return 2.0 * np.arccos(min(1.0, d))


def perturb_quat(base: np.ndarray, lo: float, hi: float, rng) -> np.ndarray:
    """Rotate base by a random angle in [lo, hi] radians about a random axis.

    The axis is uniform on the sphere and the angle uniform in the band,
    so the result is never the base view itself when lo > 0.
    """
    if not 0.0 <= lo <= hi:
        raise ValueError("need 0 <= lo <= hi")
    axis = rng.normal(size=3)
    angle = float(rng.uniform(lo, hi))
    delta = axis_angle_quat(axis, angle)
    return canonical_quat(quat_mul(delta, np.asarray(base, dtype=np.float64)))


def default_view_grid(n: int, seed: int, candidates: int = 256) -> "ViewSet":
    """The canonical view grid: k-medoids over a pool of uniform rotations."""
    return kmedoids(random_rotations(candidates, seed), n, seed)


def pairwise_geodesic(points: np.ndarray) -> np.ndarray:
    dots = np.abs(points @ points.T)
    np.clip(dots, -1.0, 1.0, out=dots)
    d = 2.0 * np.arccos(dots)
    np.fill_diagonal(d, 0.0)
    return d


def random_rotations(count: int, seed: int) -> np.ndarray:
    """Uniform rotations: normalized 4D gaussians are uniform on S^3."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return np.stack([canonical_quat(row) for row in q])


@dataclass
class ViewSet:
    medoids: np.ndarray  # (n, 4) canonical unit quaternions
    source_size: int
    seed: int = 0
    cost_history: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.medoids)


def kmedoids(points: np.ndarray, k: int, seed: int, max_iters: int = 50) -> ViewSet:
    """Cluster rotations: greedy farthest-point init, then Voronoi iteration.

    Each iteration reassigns points to their nearest medoid and replaces
    every medoid by the cluster member with the least total intra-cluster
    distance, so total cost never increases. All ties break toward the
    lower point index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    dist = pairwise_geodesic(points)

    rng = np.random.default_rng(seed)
    medoids = [int(rng.integers(n))]
    min_d = dist[medoids[0]].copy()
    while len(medoids) < k:
        far = int(np.argmax(min_d))  # argmax takes the first (lowest) index
        if min_d[far] == 0.0:
            raise ValueError("fewer than k distinct rotations")
        medoids.append(far)
        np.minimum(min_d, dist[far], out=min_d)

    medoid_idx = np.array(sorted(medoids))
    cost_history: list[float] = []
    for _ in range(max_iters):
        assign = np.argmin(dist[:, medoid_idx], axis=1)
        cost = float(dist[np.arange(n), medoid_idx[assign]].sum())
        cost_history.append(cost)
        new_idx = medoid_idx.copy()
        for ci in range(k):
            members = np.flatnonzero(assign == ci)
            within = dist[np.ix_(members, members)].sum(axis=0)
            new_idx[ci] = members[int(np.argmin(within))]
        new_idx = np.array(sorted(new_idx))
        if np.array_equal(new_idx, medoid_idx):
            break
        medoid_idx = new_idx

    assign = np.argmin(dist[:, medoid_idx], axis=1)
    cost_history.append(float(dist[np.arange(n), medoid_idx[assign]].sum()))
    return ViewSet(
        medoids=points[medoid_idx].copy(),
        source_size=n,
        seed=seed,
        cost_history=cost_history,
    )


def nearest_medoid(q: np.ndarray, medoids: np.ndarray) -> int:
    dots = np.abs(np.asarray(medoids) @ np.asarray(q))
    np.clip(dots, -1.0, 1.0, out=dots)
    return int(np.argmax(dots))  # max |dot| = min geodesic; ties -> lowest index


def save_viewset(vs: ViewSet, path: str) -> None:
    doc = {
        "n": len(vs.medoids),
        "medoids": [[float(c) for c in q] for q in vs.medoids],
        "seed": vs.seed,
        "source_size": vs.source_size,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_viewset(path: str) -> ViewSet:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    medoids = np.asarray(doc["medoids"], dtype=np.float64)
    if medoids.shape != (doc["n"], 4):
        raise FormatError("view set file inconsistent with its declared n")
    return ViewSet(
        medoids=medoids,
        source_size=int(doc.get("source_size", doc["n"])),
        seed=int(doc.get("seed", 0)),
    )
