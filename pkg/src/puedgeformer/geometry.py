"""Point clouds, neighbour graphs, sampling and corruption operators."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SURFACE_KINDS = ("sphere", "torus", "cylinder", "plane")

# elements per chunk of the pairwise-distance buffer
_CHUNK_ELEMS = 1 << 22


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class NormTransform:
    centroid: np.ndarray
    scale: float


@dataclass
class PointCloud:
    points: np.ndarray
    norm_transform: Optional[NormTransform] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"point cloud must be N x 3, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise GeometryError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)


@dataclass(frozen=True)
class KnnGraph:
    k: int
    neighbors: np.ndarray  # N x k, int64

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]


@dataclass(frozen=True)
class SurfaceSpec:
    """Analytic surface used as a synthetic data source.

    Parameters per kind:
      sphere:   radius
      torus:    major, minor (major > minor)
      cylinder: radius, height (open lateral surface, axis = z)
      plane:    width, depth (rectangle in z = 0, centred at the origin)
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SURFACE_KINDS:
            raise GeometryError(
                f"unknown surface kind {self.kind!r}; valid kinds: {', '.join(SURFACE_KINDS)}"
            )
        full = {**_DEFAULT_PARAMS[self.kind], **self.params}
        unknown = set(full) - set(_DEFAULT_PARAMS[self.kind])
        if unknown:
            raise GeometryError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        if any(not (float(v) > 0) for v in full.values()):
            raise GeometryError(f"surface parameters must be strictly positive: {full}")
        if self.kind == "torus" and not full["major"] > full["minor"]:
            raise GeometryError("torus major radius must exceed minor radius")
        object.__setattr__(self, "params", {k: float(v) for k, v in full.items()})

    @property
    def has_analytic_distance(self) -> bool:
        return True

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned Euclidean distance from each point to the surface."""
        p = np.asarray(points, dtype=np.float64)
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        prm = self.params
        if self.kind == "sphere":
            return np.abs(np.sqrt(x * x + y * y + z * z) - prm["radius"])
        if self.kind == "torus":
            rho = np.sqrt(x * x + y * y)
            return np.abs(np.hypot(rho - prm["major"], z) - prm["minor"])
        if self.kind == "cylinder":
            rho = np.sqrt(x * x + y * y)
            dz = np.maximum(np.abs(z) - prm["height"] / 2.0, 0.0)
            return np.hypot(rho - prm["radius"], dz)
        dx = np.maximum(np.abs(x) - prm["width"] / 2.0, 0.0)
        dy = np.maximum(np.abs(y) - prm["depth"] / 2.0, 0.0)
        return np.sqrt(dx * dx + dy * dy + z * z)


_DEFAULT_PARAMS = {
    "sphere": {"radius": 1.0},
    "torus": {"major": 1.0, "minor": 0.3},
    "cylinder": {"radius": 0.5, "height": 1.5},
    "plane": {"width": 2.0, "depth": 2.0},
}


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, accumulated sequentially over coordinates.

    The explicit per-coordinate loop fixes the summation order, so the value
    for a pair does not depend on where the pair sits in the arrays.
    """
    at = np.ascontiguousarray(np.asarray(a, dtype=np.float64).T)
    bt = np.ascontiguousarray(np.asarray(b, dtype=np.float64).T)
    out = np.zeros((at.shape[1], bt.shape[1]))
    diff = np.empty_like(out)
    for d in range(at.shape[0]):
        np.subtract(at[d][:, None], bt[d][None, :], out=diff)
        np.multiply(diff, diff, out=diff)
        out += diff
    return out


# above this many 3D points knn() switches to the grid path
GRID_THRESHOLD = 4096


def knn(features: np.ndarray, k: int, method: str = "auto") -> KnnGraph:
    """Exact k nearest neighbours of every row, excluding the row itself.

    Rows are ordered by nondecreasing squared distance; equal distances keep
    the lower index first. ``method`` is ``"brute"``, ``"grid"`` (3D only) or
    ``"auto"``.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise GeometryError(f"knn expects an N x D matrix, got shape {f.shape}")
    n = f.shape[0]
    if not 1 <= k < n:
        raise GeometryError(f"knn needs 1 <= k < N, got k={k}, N={n}")
    if method == "grid" or (method == "auto" and f.shape[1] == 3 and n > GRID_THRESHOLD):
        return knn_grid(f, k)
    if method not in ("auto", "brute"):
        raise GeometryError(f"unknown knn method {method!r}")
    rows_per_chunk = max(1, _CHUNK_ELEMS // max(n, 1))
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, rows_per_chunk):
        stop = min(n, start + rows_per_chunk)
        d = pairwise_sq_dists(f[start:stop], f)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        if n > 2048 and k < n - 1:
            # partition first, then a stable sort of the candidates; the kth
            # distance may be tied, so keep every candidate at that distance
            kth = np.partition(d, k - 1, axis=1)[:, k - 1 : k]
            for r in range(stop - start):
                cand = np.flatnonzero(d[r] <= kth[r])
                order = np.argsort(d[r, cand], kind="stable")
                out[start + r] = cand[order[:k]]
        else:
            out[start:stop] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return KnnGraph(k=k, neighbors=out)


def knn_grid(points: np.ndarray, k: int) -> KnnGraph:
    """Uniform-grid accelerated k-NN for 3D coordinates; same contract as :func:`knn`."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise GeometryError("knn_grid works on N x 3 coordinates only")
    n = p.shape[0]
    if not 1 <= k < n:
        raise GeometryError(f"knn needs 1 <= k < N, got k={k}, N={n}")
    lo = p.min(axis=0)
    extent = np.maximum(p.max(axis=0) - lo, 1e-12)
    # about k points per occupied cell on a surface-like cloud
    cells_per_axis = max(1, int(np.ceil((n / max(k, 1)) ** (1.0 / 2.0))))
    cell = extent.max() / cells_per_axis
    keys = np.minimum(np.floor((p - lo) / cell).astype(np.int64), cells_per_axis - 1)
    buckets: dict[tuple, list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    bucket_arrays = {key: np.asarray(v, dtype=np.int64) for key, v in buckets.items()}

    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        ring = 1
        while True:
            cx, cy, cz = keys[i]
            cand = [
                bucket_arrays[key]
                for key in (
                    (cx + dx, cy + dy, cz + dz)
                    for dx in range(-ring, ring + 1)
                    for dy in range(-ring, ring + 1)
                    for dz in range(-ring, ring + 1)
                )
                if key in bucket_arrays
            ]
            idx = np.sort(np.concatenate(cand))
            idx = idx[idx != i]
            if idx.size >= k:
                d = pairwise_sq_dists(p[i : i + 1], p[idx])[0]
                order = np.argsort(d, kind="stable")[:k]
                # cells within `ring` cover every point closer than ring * cell
                if d[order[-1]] < (ring * cell) ** 2 or idx.size == n - 1:
                    out[i] = idx[order]
                    break
            if idx.size == n - 1:
                d = pairwise_sq_dists(p[i : i + 1], p[idx])[0]
                out[i] = idx[np.argsort(d, kind="stable")[:k]]
                break
            ring += 1
    return KnnGraph(k=k, neighbors=out)


def farthest_point_sample(pc: PointCloud | np.ndarray, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices starting from ``seed_index``.

    Ties in the running min-distance go to the lowest index.
    """
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"farthest_point_sample needs 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= seed_index < n:
        raise GeometryError(f"seed_index {seed_index} out of range [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    mind = pairwise_sq_dists(pts, pts[seed_index : seed_index + 1])[:, 0]
    for j in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[j] = nxt
        np.minimum(mind, pairwise_sq_dists(pts, pts[nxt : nxt + 1])[:, 0], out=mind)
    return chosen


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Centre on the centroid and scale so the farthest point has norm 1."""
    pts = pc.points
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    radius = float(np.sqrt((centred * centred).sum(axis=1)).max())
    if not radius > 0:
        raise GeometryError("cannot normalize a cloud whose points are all identical")
    out = centred / radius
    prev = pc.norm_transform
    if prev is not None:
        # compose with the transform already applied
        centroid = prev.centroid + prev.scale * centroid
        radius = prev.scale * radius
    return PointCloud(out, NormTransform(centroid=centroid, scale=radius))


def apply_normalization(pc: PointCloud, transform: NormTransform) -> PointCloud:
    """Map ``pc`` into the frame defined by another cloud's transform."""
    return PointCloud((pc.points - transform.centroid) / transform.scale, transform)


def denormalize(pc: PointCloud) -> PointCloud:
    t = pc.norm_transform
    if t is None:
        return PointCloud(pc.points.copy())
    return PointCloud(pc.points * t.scale + t.centroid)


def sample_surface(spec: SurfaceSpec, n: int, rng_seed) -> PointCloud:
    """Draw ``n`` area-uniform points from an analytic surface."""
    if n < 1:
        raise GeometryError("need at least one sample")
    rng = _rng(rng_seed)
    prm = spec.params
    if spec.kind == "sphere":
        g = rng.standard_normal((n, 3))
        g /= np.sqrt((g * g).sum(axis=1, keepdims=True))
        return PointCloud(g * prm["radius"])
    if spec.kind == "torus":
        big, small = prm["major"], prm["minor"]
        phis = np.empty(0)
        while phis.size < n:
            cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
            keep = rng.uniform(0.0, 1.0, size=2 * n) < (big + small * np.cos(cand)) / (big + small)
            phis = np.concatenate([phis, cand[keep]])
        phi = phis[:n]
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        ring = big + small * np.cos(phi)
        return PointCloud(np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1))
    if spec.kind == "cylinder":
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(-prm["height"] / 2.0, prm["height"] / 2.0, size=n)
        r = prm["radius"]
        return PointCloud(np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1))
    x = rng.uniform(-prm["width"] / 2.0, prm["width"] / 2.0, size=n)
    y = rng.uniform(-prm["depth"] / 2.0, prm["depth"] / 2.0, size=n)
    return PointCloud(np.stack([x, y, np.zeros(n)], axis=1))


def add_gaussian_noise(pc: PointCloud, sigma_percent: float, rng_seed) -> PointCloud:
    """Perturb every coordinate by N(0, (sigma_percent / 100 * 2)^2).

    ``sigma_percent`` is a percentage of the bounding diameter (2) of a
    unit-sphere-normalised cloud.
    """
    if sigma_percent < 0:
        raise GeometryError(f"noise sigma must be nonnegative, got {sigma_percent}")
    if sigma_percent == 0:
        return pc.with_points(pc.points.copy())
    std = sigma_percent / 100.0 * 2.0
    rng = _rng(rng_seed)
    return pc.with_points(pc.points + rng.normal(0.0, std, size=pc.points.shape))


def random_rotation_matrix(rng) -> np.ndarray:
    """Haar-uniform rotation from a random unit quaternion."""
    rng = _rng(rng)
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(pc: PointCloud, rng) -> PointCloud:
    rot = random_rotation_matrix(rng)
    return pc.with_points(pc.points @ rot.T)


def random_scale(pc: PointCloud, rng, low: float = 0.8, high: float = 1.2) -> PointCloud:
    s = _rng(rng).uniform(low, high)
    return pc.with_points(pc.points * s)


def jitter(pc: PointCloud, rng, sigma: float = 0.005, clip: float = 0.015) -> PointCloud:
    noise = np.clip(_rng(rng).normal(0.0, sigma, size=pc.points.shape), -clip, clip)
    return pc.with_points(pc.points + noise)
