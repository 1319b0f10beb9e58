"""Mesh geometry pipeline: surface sampling, ray-cast visibility,
minimum-occlusion yaw selection among four candidates, the evaluation
camera model, and farthest point sampling.

Ray casting is brute force over all triangles; at desk scale (four yaws,
5000 points, small meshes) no acceleration structure is needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMeshError, RangeError

CANDIDATE_YAWS = (0.0, 90.0, 180.0, 270.0)
VIEW_PITCH_DEG = 30.0
VIEW_RADIUS = 2.0
VIEW_FOV_DEG = 40.0
N_SURFACE_POINTS = 5000

MT_EPS = 1e-7  # Moller-Trumbore determinant / distance guard


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray   # [V, 3] float64
    triangles: np.ndarray  # [T, 3] int64 vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if len(t) < 1:
            raise EmptyMeshError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise EmptyMeshError("triangle index out of range")

    def corners(self):
        """Per-triangle corner arrays (a, b, c), each [T, 3]."""
        return (
            self.vertices[self.triangles[:, 0]],
            self.vertices[self.triangles[:, 1]],
            self.vertices[self.triangles[:, 2]],
        )

    def areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class CameraPose:
    yaw: float      # degrees
    pitch: float    # degrees
    radius: float
    fov: float      # degrees; look-at is always the origin

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180)")


def camera_position(pose: CameraPose) -> np.ndarray:
    """Spherical placement looking at the origin."""
    yaw = np.deg2rad(pose.yaw)
    pitch = np.deg2rad(pose.pitch)
    return np.array(
        [
            pose.radius * np.cos(pitch) * np.cos(yaw),
            pose.radius * np.cos(pitch) * np.sin(yaw),
            pose.radius * np.sin(pitch),
        ]
    )


def load_obj(path) -> TriMesh:
    """ASCII OBJ subset: v and triangulated f lines; zero-area faces dropped."""
    vertices = []
    faces = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangulated faces are supported")
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not faces:
        raise EmptyMeshError(f"no faces in {path}")
    mesh = TriMesh(np.array(vertices), np.array(faces))
    keep = mesh.areas() > 1e-12
    if not keep.any():
        raise EmptyMeshError("all faces degenerate")
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def normalize_mesh(mesh: TriMesh) -> TriMesh:
    """Translate the bounding-box center to the origin and scale the
    bounding sphere to radius 1."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    centered = mesh.vertices - 0.5 * (lo + hi)
    scale = np.linalg.norm(centered, axis=1).max()
    if scale <= 0:
        raise EmptyMeshError("mesh collapses to a point")
    return TriMesh(centered / scale, mesh.triangles)


def sample_surface(mesh: TriMesh, n: int = N_SURFACE_POINTS, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples [n, 3].

    Triangles are chosen with probability proportional to area; points use
    the square-root barycentric map u = 1 - sqrt(r1), v = sqrt(r1)*r2.
    """
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyMeshError("mesh has zero surface area")
    rng = np.random.Generator(np.random.PCG64(seed))
    tri_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    u = (1.0 - np.sqrt(r1))[:, None]
    v = (np.sqrt(r1) * r2)[:, None]
    a, b, c = mesh.corners()
    a, b, c = a[tri_idx], b[tri_idx], c[tri_idx]
    return a + u * (b - a) + v * (c - a)


def ray_triangle(origin, direction, triangle) -> float | None:
    """Moller-Trumbore intersection; returns hit distance or None.

    triangle: [3, 3] corner array. Distance is in units of |direction|'s
    normalization (direction is normalized internally).
    """
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ValueError("direction must be nonzero")
    d = d / norm
    a, b, c = np.asarray(triangle, dtype=np.float64)
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)
    det = e1 @ pvec
    if abs(det) < MT_EPS:
        return None
    inv = 1.0 / det
    tvec = origin - a
    u = (tvec @ pvec) * inv
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = (d @ qvec) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ qvec) * inv
    if t < MT_EPS:
        return None
    return float(t)


def _occlusion_mask(mesh: TriMesh, points: np.ndarray, cam: np.ndarray, eps_vis: float):
    """Boolean [n]: True where some triangle blocks the camera->point ray."""
    a, b, c = mesh.corners()
    e1 = b - a
    e2 = c - a
    tvec = cam[None, :] - a          # fixed origin: per-triangle constants
    qvec = np.cross(tvec, e1)
    t_num = np.einsum("td,td->t", e2, qvec)

    rel = points - cam[None, :]
    dist = np.linalg.norm(rel, axis=1)
    dirs = rel / dist[:, None]

    occluded = np.zeros(len(points), dtype=bool)
    chunk = 1024
    for s in range(0, len(points), chunk):
        dd = dirs[s : s + chunk]                       # [C, 3]
        pvec = np.cross(dd[:, None, :], e2[None, :, :])  # [C, T, 3]
        det = np.einsum("ctd,td->ct", pvec, e1)
        valid = np.abs(det) >= MT_EPS
        inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
        u = np.einsum("td,ctd->ct", tvec, pvec) * inv
        v = np.einsum("ctd,td->ct", np.broadcast_to(dd[:, None, :], pvec.shape), qvec) * inv
        t = t_num[None, :] * inv
        hit = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MT_EPS)
        blocking = hit & (t < (dist[s : s + chunk, None] - eps_vis))
        occluded[s : s + chunk] = blocking.any(axis=1)
    return occluded


def count_visible(mesh: TriMesh, points: np.ndarray, camera: CameraPose) -> int:
    """Number of points whose camera ray is not blocked short of the point.

    A point counts as visible iff no triangle intersection occurs at
    distance < (distance to the point - eps_vis), eps_vis = 1e-4 * radius,
    which excludes the surface hit at the point itself.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyMeshError("no points to test")
    cam = camera_position(camera)
    eps_vis = 1e-4 * camera.radius
    return int((~_occlusion_mask(mesh, points, cam, eps_vis)).sum())


def candidate_visibility(
    mesh: TriMesh, seed: int = 0, points: np.ndarray | None = None
) -> dict[float, int]:
    """Visible-point counts for the four candidate yaws.

    The mesh is normalized to the unit bounding sphere and 5000 surface
    points are sampled once (or injected) and shared across candidates.
    """
    norm = normalize_mesh(mesh)
    if points is None:
        points = sample_surface(norm, N_SURFACE_POINTS, seed)
    counts = {}
    for yaw in CANDIDATE_YAWS:
        pose = CameraPose(yaw=yaw, pitch=VIEW_PITCH_DEG, radius=VIEW_RADIUS, fov=VIEW_FOV_DEG)
        counts[yaw] = count_visible(norm, points, pose)
    return counts


def select_view(mesh: TriMesh, seed: int = 0, points: np.ndarray | None = None) -> float:
    """Yaw (degrees) with the maximum visible-point count; ties pick the
    lowest yaw."""
    counts = candidate_visibility(mesh, seed, points)
    best = CANDIDATE_YAWS[0]
    for yaw in CANDIDATE_YAWS[1:]:
        if counts[yaw] > counts[best]:
            best = yaw
    return best


def fps(points: np.ndarray, k: int, seed: int | None = None) -> np.ndarray:
    """Greedy farthest-point subset; returns the selected indices.

    Deterministic: the first pick is the point farthest from the centroid
    (ties resolved to the lowest index) and each later pick maximizes the
    minimum distance to the already-selected set. `seed` is accepted for
    interface stability but unused.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(pts)
    if not 1 <= k <= n:
        raise RangeError(f"k={k} outside [1, {n}]")
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1)
    selected = np.empty(k, dtype=np.int64)
    selected[0] = int(np.argmax(d))  # argmax returns the lowest tied index
    mind = np.linalg.norm(pts - pts[selected[0]], axis=1)
    for i in range(1, k):
        selected[i] = int(np.argmax(mind))
        mind = np.minimum(mind, np.linalg.norm(pts - pts[selected[i]], axis=1))
    return selected
