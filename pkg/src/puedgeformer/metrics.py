"""Chamfer loss and the CD / HD / P2F evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .geometry import SurfaceSpec, pairwise_sq_dists
from .tensor import Tensor

# metric values are shown multiplied by this factor
DISPLAY_SCALE = 1e3

_CHUNK_ELEMS = 1 << 22


class MetricError(ValueError):
    pass


def _points(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(getattr(x, "points", x), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise MetricError(f"expected an M x 3 point set, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise MetricError("point set is empty")
    return arr


def seq_mean(values: np.ndarray) -> float:
    """Mean with strictly left-to-right accumulation."""
    return float(np.cumsum(values)[-1] / values.size)


def nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For every row of ``a``: squared distance to and index of its nearest row in ``b``.

    Ties resolve to the lowest index of ``b``.
    """
    rows = max(1, _CHUNK_ELEMS // b.shape[0])
    dist = np.empty(a.shape[0])
    idx = np.empty(a.shape[0], dtype=np.int64)
    for s in range(0, a.shape[0], rows):
        d = pairwise_sq_dists(a[s : s + rows], b)
        i = np.argmin(d, axis=1)
        idx[s : s + rows] = i
        dist[s : s + rows] = d[np.arange(d.shape[0]), i]
    return dist, idx


def _both_directions(p: np.ndarray, g: np.ndarray):
    if p.shape[0] * g.shape[0] <= _CHUNK_ELEMS:
        d = pairwise_sq_dists(p, g)
        i_pg = np.argmin(d, axis=1)
        i_gp = np.argmin(d, axis=0)
        return d[np.arange(d.shape[0]), i_pg], i_pg, d[i_gp, np.arange(d.shape[1])], i_gp
    return (*nearest(p, g), *nearest(g, p))


def chamfer(pred, gt) -> Tensor:
    """Symmetric Chamfer distance: mean squared nearest distance in both directions.

    Differentiable with respect to both point sets when called on tensors.
    """
    p, g = _points(pred), _points(gt)
    d_pg, i_pg, d_gp, i_gp = _both_directions(p, g)
    value = seq_mean(d_pg) + seq_mean(d_gp)
    m, k = p.shape[0], g.shape[0]

    def grad_fn(out_grad):
        s = float(out_grad)
        diff_pg = (p - g[i_pg]) * (2.0 / m)  # pred -> its nearest gt
        diff_gp = (g - p[i_gp]) * (2.0 / k)  # gt -> its nearest pred
        gp = diff_pg.copy()
        np.add.at(gp, i_gp, -diff_gp)
        gg = diff_gp.copy()
        np.add.at(gg, i_pg, -diff_pg)
        return gp * s, gg * s

    parents = [x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x)) for x in (pred, gt)]
    return T.custom_op(np.asarray(value), parents, grad_fn)


def chamfer_value(pred, gt) -> float:
    return float(chamfer(_points(pred), _points(gt)).data)


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance with unsquared Euclidean norms."""
    p, g = _points(pred), _points(gt)
    d_pg, _, d_gp, _ = _both_directions(p, g)
    return float(np.sqrt(max(d_pg.max(), d_gp.max())))


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # V x 3
    faces: np.ndarray  # F x 3 vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3 or f.shape[0] == 0:
            raise MetricError("mesh needs V x 3 vertices and a nonempty F x 3 face array")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise MetricError("mesh face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def distance(self, points: np.ndarray) -> np.ndarray:
        tri = self.vertices[self.faces]
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty(pts.shape[0])
        for i, p in enumerate(pts):
            closest = closest_point_on_triangles(p, a, b, c)
            out[i] = np.sqrt(((closest - p) ** 2).sum(axis=1).min())
        return out


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to ``p`` on each triangle (a[i], b[i], c[i]), by Voronoi-region tests."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        res = a + ab * v_in[:, None] + ac * w_in[:, None]

        # Voronoi regions, applied from lowest to highest precedence
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        res = np.where(on_bc[:, None], b + (c - b) * w_bc[:, None], res)
        w_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        res = np.where(on_ac[:, None], a + ac * w_ac[:, None], res)
        res = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, res)
        v_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        res = np.where(on_ab[:, None], a + ab * v_ab[:, None], res)
    res = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, res)
    res = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, res)
    return res


def p2f(pred, surface: Union[SurfaceSpec, TriangleMesh, None]) -> Optional[float]:
    """Mean unsigned distance from predicted points to the surface; None without a surface."""
    if surface is None:
        return None
    return seq_mean(surface.distance(_points(pred)))


@dataclass(frozen=True)
class MetricReport:
    cd: float
    hd: float
    p2f: Optional[float]
    n_pred: int
    n_gt: int

    def display(self) -> str:
        parts = [f"cd={self.cd * DISPLAY_SCALE:.3f}", f"hd={self.hd * DISPLAY_SCALE:.3f}"]
        if self.p2f is not None:
            parts.append(f"p2f={self.p2f * DISPLAY_SCALE:.3f}")
        return " ".join(parts)


def evaluate(pred, gt, surface=None) -> MetricReport:
    p, g = _points(pred), _points(gt)
    return MetricReport(
        cd=chamfer_value(p, g),
        hd=hausdorff(p, g),
        p2f=p2f(p, surface),
        n_pred=p.shape[0],
        n_gt=g.shape[0],
    )
