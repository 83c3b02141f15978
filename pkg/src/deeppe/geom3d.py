"""Core 3D types: point clouds, rigid transforms, pose metrics, voxel
downsampling, and ASCII PLY I/O.

All types are immutable after construction (arrays are frozen), all
operations are pure, so everything here is safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TypeAlias

import numpy as np
from numpy.typing import NDArray

F64: TypeAlias = np.float64
Vec3: TypeAlias = NDArray[F64]   # shape (3,)
Mat3: TypeAlias = NDArray[F64]   # shape (3, 3)
Points: TypeAlias = NDArray[F64]  # shape (N, 3)

ROTATION_TOL = 1e-6
NORMAL_TOL = 1e-6


class PlyParseError(ValueError):
    """Malformed PLY input; message names the offending line."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _frozen(a: NDArray, dtype=np.float64) -> NDArray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with optional unit normals."""

    points: Points
    normals: Points | None = None

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _frozen(self.normals)
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            norms = np.linalg.norm(nrm, axis=1)
            if not np.allclose(norms, 1.0, atol=NORMAL_TOL):
                raise ValueError("normals must have unit norm")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Pose hypothesis: proper rotation plus translation, applied as R p + t."""

    rotation: Mat3
    translation: Vec3

    def __post_init__(self):
        rot = _frozen(self.rotation)
        tr = _frozen(self.translation).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=ROTATION_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", _frozen(tr))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis: Vec3, angle_rad: float,
                        translation: Vec3 | None = None) -> "RigidTransform":
        """Rodrigues rotation about a (not necessarily unit) axis."""
        axis = np.asarray(axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("axis must be non-zero")
        k = axis / n
        K = np.array([[0.0, -k[2], k[1]],
                      [k[2], 0.0, -k[0]],
                      [-k[1], k[0], 0.0]])
        R = np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)
        t = np.zeros(3) if translation is None else translation
        return RigidTransform(R, t)


def random_rotation(rng: np.random.Generator) -> Mat3:
    """Uniform random proper rotation (axis-angle construction)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.pi)
    return RigidTransform.from_axis_angle(axis, angle).rotation


@dataclass(frozen=True)
class CorrespondenceSet:
    """Putative or ground-truth point pairs between two clouds.

    pairs[:, 0] indexes the source cloud, pairs[:, 1] the target cloud.
    Residuals under a pose are computed lazily via :func:`residuals`.
    """

    pairs: NDArray[np.int64]
    is_ground_truth: bool = False

    def __post_init__(self):
        pr = _frozen(self.pairs, dtype=np.int64)
        if pr.ndim != 2 or pr.shape[1] != 2:
            raise ValueError(f"pairs must have shape (M, 2), got {pr.shape}")
        if pr.shape[0] != np.unique(pr, axis=0).shape[0]:
            raise ValueError("duplicate correspondence pairs")
        object.__setattr__(self, "pairs", pr)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def validate_against(self, src: PointCloud, tgt: PointCloud) -> None:
        if len(self) and (self.pairs[:, 0].max() >= len(src)
                          or self.pairs[:, 1].max() >= len(tgt)
                          or self.pairs.min() < 0):
            raise IndexError("correspondence indices out of bounds")


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Return the cloud with every point mapped to R p + t (normals rotated)."""
    pts = cloud.points @ T.rotation.T + T.translation
    nrm = None if cloud.normals is None else cloud.normals @ T.rotation.T
    return PointCloud(pts, nrm)


def apply_to_points(T: RigidTransform, pts: Points) -> Points:
    return np.asarray(pts, dtype=np.float64) @ T.rotation.T + T.translation


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """compose(T1, T2) applied to x equals T1(T2(x))."""
    return RigidTransform(T1.rotation @ T2.rotation,
                          T1.rotation @ T2.translation + T1.translation)


def invert(T: RigidTransform) -> RigidTransform:
    return RigidTransform(T.rotation.T, -(T.rotation.T @ T.translation))


def rre(T: RigidTransform, T_gt: RigidTransform) -> float:
    """Relative rotation error: geodesic distance in degrees, in [0, 180].

    The value is arccos((trace(R^T Rbar) - 1) / 2) with the cosine clamped
    to [-1, 1]; it is evaluated in atan2 form because plain arccos loses
    ~1e-6 degrees of precision near zero error.
    """
    Q = T.rotation.T @ T_gt.rotation
    c = np.clip((np.trace(Q) - 1.0) / 2.0, -1.0, 1.0)
    s = np.linalg.norm(Q - Q.T) / (2.0 * np.sqrt(2.0))  # |sin(angle)|
    return float(np.degrees(np.arctan2(s, c)))


def rte(T: RigidTransform, T_gt: RigidTransform) -> float:
    """Relative translation error: Euclidean distance in meters."""
    return float(np.linalg.norm(T.translation - T_gt.translation))


def residuals(T: RigidTransform, corrs: CorrespondenceSet,
              src: PointCloud, tgt: PointCloud) -> NDArray[F64]:
    """Per-pair residual distances ||T(p) - q|| under the given pose."""
    corrs.validate_against(src, tgt)
    p = apply_to_points(T, src.points[corrs.pairs[:, 0]])
    q = tgt.points[corrs.pairs[:, 1]]
    return np.linalg.norm(p - q, axis=1)


def rmse_correspondences(T: RigidTransform, gt: CorrespondenceSet,
                         src: PointCloud, tgt: PointCloud) -> float:
    """RMSE of the ground-truth correspondences under a pose.

    This is the pose-to-ground-truth distance used to label candidate
    poses correct/incorrect and to weight the training loss.
    """
    if not gt.is_ground_truth:
        raise ValueError("rmse_correspondences requires a ground-truth set")
    if len(gt) == 0:
        raise ValueError("no ground-truth correspondences")
    r = residuals(T, gt, src, tgt)
    return float(np.sqrt(np.mean(r * r)))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel, at the centroid of the voxel's members.

    Output order is deterministic: ascending (kx, ky, kz) voxel key.
    Normals are dropped; recompute them at the new resolution.
    """
    if voxel <= 0.0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    # lexicographic sort on (kx, ky, kz); np.unique on rows is lexicographic
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None])


# --- ASCII PLY subset ------------------------------------------------------
#
# header: ply / format ascii 1.0 / element vertex N /
#         property float x|y|z [/ property float nx|ny|nz] / end_header
# body:   one vertex per line, whitespace-separated decimals.

_XYZ = ("x", "y", "z")
_NXYZ = ("nx", "ny", "nz")


def read_ply(path) -> PointCloud:
    """Parse the ASCII PLY subset above. Binary PLY is rejected."""
    with open(path, "r", encoding="ascii", errors="replace") as f:
        lines = f.read().splitlines()

    def fail(i: int, msg: str):
        raise PlyParseError(i + 1, msg)

    if not lines or lines[0].strip() != "ply":
        fail(0, "expected 'ply' magic")
    n_vertex = None
    props: list[str] = []
    body_start = None
    saw_format = False
    for i, raw in enumerate(lines[1:], start=1):
        tok = raw.split()
        if not tok:
            fail(i, "blank line in header")
        if tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                fail(i, f"unsupported format {' '.join(tok[1:])!r}; "
                        "only 'ascii 1.0' is accepted")
            saw_format = True
        elif tok[0] == "element":
            if tok[1:2] != ["vertex"] or len(tok) != 3:
                fail(i, "only 'element vertex N' is supported")
            try:
                n_vertex = int(tok[2])
            except ValueError:
                fail(i, f"bad vertex count {tok[2]!r}")
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in ("float", "float32", "double"):
                fail(i, f"unsupported property {raw.strip()!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
        else:
            fail(i, f"unexpected header keyword {tok[0]!r}")
    if body_start is None:
        fail(len(lines) - 1, "missing end_header")
    if not saw_format:
        fail(body_start - 1, "missing 'format ascii 1.0' line")
    if n_vertex is None:
        fail(body_start - 1, "missing 'element vertex' line")
    has_normals = tuple(props) == _XYZ + _NXYZ
    if not has_normals and tuple(props) != _XYZ:
        fail(body_start - 1,
             f"properties must be x y z [nx ny nz], got {props}")

    width = 6 if has_normals else 3
    rows = np.empty((n_vertex, width))
    for r in range(n_vertex):
        i = body_start + r
        if i >= len(lines):
            fail(len(lines) - 1 if lines else 0,
                 f"truncated body: expected {n_vertex} vertices, got {r}")
        vals = lines[i].split()
        if len(vals) != width:
            fail(i, f"expected {width} values, got {len(vals)}")
        try:
            rows[r] = [float(v) for v in vals]
        except ValueError:
            fail(i, f"non-numeric vertex data {lines[i].strip()!r}")
    pts = rows[:, :3]
    nrm = rows[:, 3:] if has_normals else None
    return PointCloud(pts, nrm)


def write_ply(path, cloud: PointCloud) -> None:
    """Write the ASCII PLY subset with 9-significant-digit coordinates."""
    has_normals = cloud.normals is not None
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        for name in _XYZ:
            f.write(f"property float {name}\n")
        if has_normals:
            for name in _NXYZ:
                f.write(f"property float {name}\n")
        f.write("end_header\n")
        for i in range(len(cloud)):
            row = cloud.points[i] if not has_normals else np.concatenate(
                [cloud.points[i], cloud.normals[i]])
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")
