"""Point clouds, exact k-d tree kNN, patch normalization, unoriented angles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


class DegeneratePatch(GeometryError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise GeometryError("point cloud must contain at least one point")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise GeometryError(
                    f"normals count {len(self.normals)} != point count {len(self.points)}")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-9):
                raise GeometryError("normals must have unit length (within 1e-9)")

    def __len__(self) -> int:
        return len(self.points)


def _sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    # explicit per-axis form so tree and brute force round identically
    dx = points[:, 0] - q[0]
    dy = points[:, 1] - q[1]
    dz = points[:, 2] - q[2]
    return dx * dx + dy * dy + dz * dz


def brute_force_knn(points: np.ndarray, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive scan. Sorted by (distance, index)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise GeometryError("knn on an empty cloud")
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}")
    d2 = _sq_dist(points, np.asarray(query, dtype=np.float64))
    order = np.lexsort((np.arange(len(points)), d2))[:k]
    return order, np.sqrt(d2[order])


class KDTree:
    """Exact k-d tree with axis-median splits.

    Nodes live in flat arrays. Leaves hold at most ``leaf_size`` point indices.
    Results are ordered by ``(distance, index)`` so ties resolve to the lower
    point index, exactly like :func:`brute_force_knn`.
    """

    def __init__(self, points, leaf_size: int = 16):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise GeometryError("cannot index an empty cloud")
        self.leaf_size = max(1, int(leaf_size))
        self._axis: list[int] = []
        self._split: list[float] = []
        self._children: list[tuple[int, int]] = []
        self._leaf: list[np.ndarray | None] = []
        self._build(np.arange(len(self.points)))

    def __len__(self) -> int:
        return len(self.points)

    def _new_node(self) -> int:
        self._axis.append(-1)
        self._split.append(0.0)
        self._children.append((-1, -1))
        self._leaf.append(None)
        return len(self._axis) - 1

    def _build(self, idx: np.ndarray) -> int:
        node = self._new_node()
        pts = self.points[idx]
        spread = pts.max(axis=0) - pts.min(axis=0) if len(idx) else np.zeros(3)
        if len(idx) <= self.leaf_size or not np.any(spread > 0):
            self._leaf[node] = idx
            return node
        axis = int(np.argmax(spread))
        order = np.argsort(pts[:, axis], kind="stable")
        mid = len(idx) // 2
        split = pts[order[mid], axis]
        self._axis[node] = axis
        self._split[node] = float(split)
        # left: coordinate <= split, right: >= split; both sides non-empty
        left = idx[order[:mid]]
        right = idx[order[mid:]]
        lc = self._build(left)
        rc = self._build(right)
        self._children[node] = (lc, rc)
        return node

    def query(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of the ``min(k, n)`` nearest points."""
        if k < 1:
            raise GeometryError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        k = min(k, len(self.points))
        best_idx = np.empty(0, dtype=np.intp)
        best_d2 = np.empty(0)
        stack = [(0, 0.0)]
        while stack:
            node, bound = stack.pop()
            if len(best_idx) == k and bound > best_d2[-1]:
                continue
            leaf = self._leaf[node]
            if leaf is not None:
                d2 = _sq_dist(self.points[leaf], q)
                cand_idx = np.concatenate([best_idx, leaf])
                cand_d2 = np.concatenate([best_d2, d2])
                keep = np.lexsort((cand_idx, cand_d2))[:k]
                best_idx, best_d2 = cand_idx[keep], cand_d2[keep]
                continue
            axis = self._axis[node]
            diff = q[axis] - self._split[node]
            near, far = self._children[node] if diff <= 0 else self._children[node][::-1]
            # push far first so near is explored first
            stack.append((far, diff * diff))
            stack.append((near, bound))
        return best_idx, np.sqrt(best_d2)


def knn(index: KDTree, query, k: int) -> list[tuple[int, float]]:
    idx, dist = index.query(query, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return v if v[i] > 0 else -v


def pca_frame(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows are the covariance eigenvectors in descending eigenvalue order.

    The first two rows have their largest-magnitude component positive; the
    third is their cross product so the frame is a proper rotation.
    """
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    e0 = _fix_sign(evecs[:, 2])
    e1 = _fix_sign(evecs[:, 1])
    e2 = np.cross(e0, e1)
    return np.stack([e0, e1, e2]), evals[::-1]


@dataclass
class Patch:
    query_index: int
    local_points: np.ndarray
    radius: float
    frame: np.ndarray
    gt_normal_local: np.ndarray | None = None
    neighbor_indices: np.ndarray | None = None

    def to_world(self, v) -> np.ndarray:
        """Rotate a local-frame vector back to world axes."""
        return self.frame.T @ np.asarray(v, dtype=np.float64)


def extract_patch(cloud: PointCloud, query_index: int, patch_size: int,
                  index: KDTree | None = None) -> Patch:
    if len(cloud) < patch_size:
        raise GeometryError(f"cloud has {len(cloud)} points, patch needs {patch_size}")
    if index is None:
        index = KDTree(cloud.points)
    q = cloud.points[query_index]
    nbr, _ = index.query(q, patch_size)
    centered = cloud.points[nbr] - q
    radius = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if radius == 0.0:
        raise DegeneratePatch(f"patch at point {query_index} has zero radius (coincident points)")
    scaled = centered / radius
    # a collinear patch still gets an orthonormal frame; estimators reject it themselves
    frame, _ = pca_frame(scaled)
    local = scaled @ frame.T
    gt = None
    if cloud.normals is not None:
        gt = frame @ cloud.normals[query_index]
    return Patch(int(query_index), local, radius, frame, gt, nbr)


def extract_patches(cloud: PointCloud, query_indices, patch_size: int,
                    index: KDTree | None = None) -> list[Patch | None]:
    """Batch form of :func:`extract_patch`; degenerate patches come back as ``None``."""
    index = KDTree(cloud.points) if index is None else index
    out = []
    for i in query_indices:
        try:
            out.append(extract_patch(cloud, int(i), patch_size, index))
        except DegeneratePatch:
            out.append(None)
    return out


def unoriented_angle(a, b) -> float:
    """Angle in degrees between two unit vectors, ignoring sign; in [0, 90]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        n = np.linalg.norm(v)
        if n == 0:
            raise GeometryError("unoriented_angle of a zero-length vector")
        if abs(n - 1.0) > 1e-6:
            raise GeometryError(f"unoriented_angle expects unit vectors, got length {n}")
    # atan2 form: arccos(|a.b|) cannot resolve angles below ~1e-6 degrees
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(float(a @ b)))))


def unoriented_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise :func:`unoriented_angle`; rows are normalized first, NaN rows give NaN."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    dots = np.abs(np.sum(a * b, axis=-1))
    return np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), dots))
