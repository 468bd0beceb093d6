"""Core 3D geometry: point clouds, rigid transforms, nearest neighbors,
voxel downsampling, rigid fitting, and registration error metrics.

Point clouds are plain ``(N, 3)`` float64 arrays in meters. All functions
treat their inputs as immutable and return new arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, EmptyCloud

Points = NDArray[np.float64]  # shape (N, 3)
Mat3 = NDArray[np.float64]    # shape (3, 3)
Vec3 = NDArray[np.float64]    # shape (3,)

_ORTHONORMALITY_TOL = 1e-9


def as_points(points, *, allow_empty: bool = True) -> Points:
    """Validate and convert to a float64 ``(N, 3)`` array.

    Rejects NaN/Inf coordinates. Does not copy when the input already
    satisfies the contract.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {pts.shape}")
    if not allow_empty and pts.shape[0] == 0:
        raise EmptyCloud("operation requires a non-empty cloud")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: rotation in SO(3) plus translation in meters.

    Validates orthonormality and det = +1 to 1e-9 on construction.
    """

    rotation: Mat3
    translation: Vec3

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > _ORTHONORMALITY_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > _ORTHONORMALITY_TOL:
            raise ValueError(f"rotation determinant {det:.12f} != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix34(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return RigidTransform(m[:, :3], m[:, 3])

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])

    def apply(self, points) -> Points:
        return apply_transform(points, self)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other: the transform applying ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class Correspondences:
    """Index pairs (into cloud A, into cloud B) with optional weights."""

    pairs: NDArray[np.int64]                      # shape (K, 2)
    weights: NDArray[np.float64] | None = None    # shape (K,), nonnegative

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != pairs.shape[0]:
                raise ValueError("weights must match the number of pairs")
            if (w < 0).any():
                raise ValueError("weights must be nonnegative")
            if pairs.shape[0] and not (w > 0).any():
                raise ValueError("weights must not all be zero")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def validate_against(self, count_a: int, count_b: int) -> None:
        p = self.pairs
        if len(p) and (
            p[:, 0].min() < 0 or p[:, 0].max() >= count_a
            or p[:, 1].min() < 0 or p[:, 1].max() >= count_b
        ):
            raise ValueError("correspondence index out of range")


class NeighborIndex:
    """Exact nearest-neighbor index over an immutable cloud snapshot.

    Backed by a kd-tree; safe for concurrent read-only queries.
    """

    def __init__(self, cloud):
        pts = as_points(cloud, allow_empty=False)
        self._points = pts.copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> Points:
        return self._points

    def __len__(self) -> int:
        return self._points.shape[0]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Exact 1-NN: (distances, indices) for each query point."""
        q = as_points(queries)
        d, i = self._tree.query(q, k=1)
        return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)

    def knearest(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact k-NN: (distances, indices), each of shape (Q, k)."""
        if not 1 <= k <= len(self):
            raise ValueError(f"k must be in [1, {len(self)}], got {k}")
        q = as_points(queries)
        d, i = self._tree.query(q, k=k)
        d = np.atleast_2d(np.asarray(d, dtype=np.float64)).reshape(len(q), k)
        i = np.atleast_2d(np.asarray(i, dtype=np.int64)).reshape(len(q), k)
        return d, i


def build_index(cloud) -> NeighborIndex:
    """Build an exact NN index; raises EmptyCloud on an empty input."""
    return NeighborIndex(cloud)


def apply_transform(cloud, transform: RigidTransform) -> Points:
    """Map every point p to R·p + t. Input is left unmodified."""
    pts = as_points(cloud)
    return pts @ transform.rotation.T + transform.translation


def rotation_about_axis(axis, angle_rad: float) -> Mat3:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("rotation axis must be nonzero")
    x, y, z = a / n
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> Mat3:
    """Uniformly random proper rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng: np.random.Generator, translation_scale: float = 1.0) -> RigidTransform:
    return RigidTransform(
        random_rotation(rng),
        rng.uniform(-translation_scale, translation_scale, size=3),
    )


def kabsch_points(src: Points, dst: Points, weights=None) -> RigidTransform:
    """Least-squares rigid fit src→dst for row-aligned point arrays.

    Reflections are excluded by sign-corrected SVD; raises
    DegenerateGeometry when the weighted covariance has rank < 2
    (second singular value below 1e-12 of the first).
    """
    a = as_points(src)
    b = as_points(dst)
    if a.shape != b.shape:
        raise ValueError("source and destination must be row-aligned")
    if a.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 correspondence points")
    if weights is None:
        w = np.full(a.shape[0], 1.0 / a.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        w = w / w.sum()
    ca = w @ a
    cb = w @ b
    a0 = a - ca
    b0 = b - cb
    H = (a0 * w[:, None]).T @ b0
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-12 * max(S[0], np.finfo(np.float64).tiny):
        raise DegenerateGeometry("correspondence points are collinear or coincident")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cb - R @ ca
    return RigidTransform(R, t)


def kabsch(corr: Correspondences, cloud_a, cloud_b) -> RigidTransform:
    """Weighted rigid fit minimizing Σ w_k ||R·a_k + t − b_k||²."""
    a = as_points(cloud_a)
    b = as_points(cloud_b)
    corr.validate_against(a.shape[0], b.shape[0])
    return kabsch_points(a[corr.pairs[:, 0]], b[corr.pairs[:, 1]], corr.weights)


def voxel_downsample(cloud, voxel_size: float) -> Points:
    """Replace each occupied voxel cell by the centroid of its members.

    The cell of point p is (⌊x/s⌋, ⌊y/s⌋, ⌊z/s⌋). Output is ordered by
    lexicographically sorted cell coordinates, so the result does not
    depend on input ordering.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = as_points(cloud)
    if pts.shape[0] == 0:
        return pts
    cells = np.floor(pts / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    return sums / counts[:, None]


def overlap_ratio(cloud_a, cloud_b, transform: RigidTransform, tau: float) -> float:
    """Symmetric-minimum overlap under a ground-truth alignment.

    Returns min(o_AB, o_BA) where o_AB is the fraction of A points whose
    image under ``transform`` lies within ``tau`` of some B point.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = as_points(cloud_a, allow_empty=False)
    b = as_points(cloud_b, allow_empty=False)
    a_in_b = apply_transform(a, transform)
    d_ab, _ = NeighborIndex(b).nearest(a_in_b)
    d_ba, _ = NeighborIndex(a_in_b).nearest(b)
    o_ab = float(np.count_nonzero(d_ab < tau)) / a.shape[0]
    o_ba = float(np.count_nonzero(d_ba < tau)) / b.shape[0]
    return min(o_ab, o_ba)


def rre(rotation_est: Mat3, rotation_gt: Mat3) -> float:
    """Relative rotation error in degrees, in [0, 180].

    Uses the standard arccos-of-trace form. Note its conditioning floor:
    even identical matrices can report up to ~2e-6 degrees because
    arccos(1-eps) ~ sqrt(2 eps); use relative_rotation_angle_deg when
    measuring near-zero angles.
    """
    r_est = np.asarray(rotation_est, dtype=np.float64)
    r_gt = np.asarray(rotation_gt, dtype=np.float64)
    c = (np.trace(r_gt.T @ r_est) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def relative_rotation_angle_deg(rotation_a: Mat3, rotation_b: Mat3) -> float:
    """Relative rotation angle via atan2 of the antisymmetric part;
    well-conditioned near zero, unlike the arccos form."""
    m = np.asarray(rotation_a, dtype=np.float64).T @ np.asarray(rotation_b, dtype=np.float64)
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    c = (np.trace(m) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def rte(t_est, t_gt) -> float:
    """Relative translation error: Euclidean norm of the difference, meters."""
    a = np.asarray(t_est, dtype=np.float64).reshape(3)
    b = np.asarray(t_gt, dtype=np.float64).reshape(3)
    return float(np.linalg.norm(a - b))
