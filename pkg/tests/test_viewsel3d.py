import numpy as np
import pytest

from flowalign.errors import EmptyMeshError, RangeError
from flowalign.viewsel3d import (
    CANDIDATE_YAWS,
    CameraPose,
    TriMesh,
    camera_position,
    candidate_visibility,
    count_visible,
    fps,
    load_obj,
    normalize_mesh,
    ray_triangle,
    sample_surface,
    select_view,
)


def quad(center, normal_axis, half, half2=None):
    """Two triangles forming a rectangular plate perpendicular to an axis."""
    c = np.asarray(center, dtype=float)
    axes = [0, 1, 2]
    axes.remove(normal_axis)
    a, b = axes
    h2 = half2 if half2 is not None else half
    corners = []
    for da, db in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
        p = c.copy()
        p[a] += da * half
        p[b] += db * h2
        corners.append(p)
    verts = np.array(corners)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return verts, tris


def wall_fixture():
    """Pocket open toward +x: back wall at -x, side walls at +/-y, small
    plate inside. Only the yaw-0 camera has an unobstructed line to most
    sampled points."""
    parts = [
        quad([-0.3, 0, 0], 0, 0.6),
        quad([0, 0.3, 0], 1, 0.3, 0.6),
        quad([0, -0.3, 0], 1, 0.3, 0.6),
        quad([0.05, 0, 0], 0, 0.1),
    ]
    verts = np.vstack([v for v, _ in parts])
    tris, off = [], 0
    for v, t in parts:
        tris.append(t + off)
        off += len(v)
    return TriMesh(verts, np.vstack(tris))


def octahedron():
    verts = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=float,
    )
    tris = np.array(
        [[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
         [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]]
    )
    return TriMesh(verts, tris)


def brute_force_visible(mesh, points, camera):
    """Independent oracle: per-point loop over triangles via ray_triangle."""
    cam = camera_position(camera)
    eps_vis = 1e-4 * camera.radius
    corners = [mesh.vertices[t] for t in mesh.triangles]
    visible = 0
    for p in points:
        dist = float(np.linalg.norm(p - cam))
        blocked = False
        for tri in corners:
            t = ray_triangle(cam, p - cam, tri)
            if t is not None and t < dist - eps_vis:
                blocked = True
                break
        visible += not blocked
    return visible


class TestSampleSurface:
    def test_points_inside_single_triangle(self):
        tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float), [[0, 1, 2]])
        pts = sample_surface(tri, n=500, seed=3)
        # barycentric solve: z == 0, x >= 0, y >= 0, x + y <= 1
        assert np.allclose(pts[:, 2], 0)
        assert np.all(pts[:, 0] >= -1e-12)
        assert np.all(pts[:, 1] >= -1e-12)
        assert np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)

    def test_area_weighting_nine_to_one(self):
        # triangle areas 4.5 and 0.5 share one mesh; ratio must track area
        verts = np.array(
            [[0, 0, 0], [3, 0, 0], [0, 3, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]],
            dtype=float,
        )
        mesh = TriMesh(verts, [[0, 1, 2], [3, 4, 5]])
        pts = sample_surface(mesh, n=100_000, seed=1)
        big = (pts[:, 0] < 5).sum()
        ratio = big / (len(pts) - big)
        assert abs(ratio - 9.0) < 0.02 * 9.0 / (1 / 9 + 1)  # within 2% of 9:1 split
        assert abs(big / len(pts) - 0.9) < 0.02 * 0.9

    def test_deterministic(self):
        mesh = octahedron()
        a = sample_surface(mesh, n=100, seed=9)
        b = sample_surface(mesh, n=100, seed=9)
        assert np.array_equal(a, b)


class TestCameraPosition:
    def test_yaw0_pitch0(self):
        pose = CameraPose(yaw=0, pitch=0, radius=2.0, fov=40)
        assert np.allclose(camera_position(pose), [2, 0, 0], atol=1e-12)

    def test_yaw90(self):
        pose = CameraPose(yaw=90, pitch=0, radius=2.0, fov=40)
        assert np.allclose(camera_position(pose), [0, 2, 0], atol=1e-9)

    def test_pitch30(self):
        pose = CameraPose(yaw=0, pitch=30, radius=2.0, fov=40)
        assert np.allclose(camera_position(pose), [np.sqrt(3), 0, 1], atol=1e-9)

    def test_invariants(self):
        with pytest.raises(ValueError):
            CameraPose(yaw=0, pitch=0, radius=0, fov=40)
        with pytest.raises(ValueError):
            CameraPose(yaw=0, pitch=0, radius=1, fov=180)


class TestRayTriangle:
    def test_perpendicular_hit_through_centroid(self):
        tri = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        centroid = tri.mean(axis=0)
        origin = centroid + np.array([0, 0, 5.0])
        t = ray_triangle(origin, centroid - origin, tri)
        assert t is not None
        assert abs(t - 5.0) < 1e-12  # analytic plane distance

    def test_parallel_ray_misses(self):
        tri = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        assert ray_triangle([0.2, 0.2, 1.0], [1.0, 0.0, 0.0], tri) is None

    def test_pointing_away_misses(self):
        tri = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        assert ray_triangle([0.2, 0.2, 1.0], [0.0, 0.0, 1.0], tri) is None

    def test_outside_misses(self):
        tri = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        assert ray_triangle([5.0, 5.0, 1.0], [0.0, 0.0, -1.0], tri) is None

    def test_zero_direction_rejected(self):
        tri = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        with pytest.raises(ValueError):
            ray_triangle([0, 0, 1], [0, 0, 0], tri)


class TestCountVisible:
    def test_own_samples_visible(self):
        tri = TriMesh(
            np.array([[0, -0.5, -0.5], [0, 0.5, -0.5], [0, 0, 0.5]], dtype=float),
            [[0, 1, 2]],
        )
        pts = sample_surface(tri, n=200, seed=2)
        pose = CameraPose(yaw=0, pitch=30, radius=2.0, fov=40)
        assert count_visible(tri, pts, pose) == 200

    def test_wall_blocks_everything_behind(self):
        # wall quad between camera and a grid of points
        wv, wt = quad([0.5, 0, 0], 0, 2.0)
        mesh = TriMesh(wv, wt)
        yy, zz = np.meshgrid(np.linspace(-0.3, 0.3, 10), np.linspace(-0.3, 0.3, 10))
        pts = np.stack([np.full(yy.size, -0.5), yy.ravel(), zz.ravel()], axis=1)
        pose = CameraPose(yaw=0, pitch=0, radius=2.0, fov=40)
        assert count_visible(mesh, pts, pose) == 0
        assert brute_force_visible(mesh, pts, pose) == 0

    def test_no_occluders_all_visible(self, rng):
        mesh = TriMesh(
            np.array([[10, 10, 10], [11, 10, 10], [10, 11, 10]], dtype=float), [[0, 1, 2]]
        )
        pts = rng.random((50, 3)) * 0.2  # near origin, far from the triangle
        pose = CameraPose(yaw=45, pitch=20, radius=2.0, fov=40)
        assert count_visible(mesh, pts, pose) == 50

    def test_matches_brute_force_oracle(self, rng):
        # random small meshes: vectorized count must equal the loop oracle
        for seed in range(4):
            r = np.random.Generator(np.random.PCG64(seed))
            verts = r.standard_normal((12, 3)) * 0.5
            tris = r.integers(0, 12, (10, 3))
            keep = [t for t in tris if len(set(t)) == 3]
            mesh = TriMesh(verts, np.array(keep))
            pts = r.standard_normal((80, 3)) * 0.4
            pose = CameraPose(yaw=float(r.integers(0, 360)), pitch=30, radius=2.0, fov=40)
            assert count_visible(mesh, pts, pose) == brute_force_visible(mesh, pts, pose)


class TestSelectView:
    def test_wall_fixture_faces_open_side(self):
        mesh = wall_fixture()
        counts = candidate_visibility(mesh, seed=0)
        # brute-force agreement on every candidate
        norm = normalize_mesh(mesh)
        pts = sample_surface(norm, 5000, seed=0)
        for yaw in CANDIDATE_YAWS:
            pose = CameraPose(yaw=yaw, pitch=30, radius=2.0, fov=40)
            assert counts[yaw] == brute_force_visible(norm, pts, pose)
        for yaw in (90.0, 180.0, 270.0):
            assert counts[yaw] < counts[0.0]  # every walled side occludes
        assert select_view(mesh, seed=0) == 0.0

    def test_symmetric_mesh_tie_breaks_to_zero(self):
        mesh = octahedron()
        norm = normalize_mesh(mesh)
        base = sample_surface(norm, 600, seed=4)
        # inject a 4-fold symmetric point set so all yaw counts tie exactly
        rots = []
        for k in range(4):
            ang = np.deg2rad(90 * k)
            rz = np.array(
                [[np.cos(ang), -np.sin(ang), 0], [np.sin(ang), np.cos(ang), 0], [0, 0, 1]]
            )
            rots.append(base @ rz.T)
        pts = np.vstack(rots)
        counts = candidate_visibility(mesh, points=pts)
        assert len(set(counts.values())) == 1
        assert select_view(mesh, points=pts) == 0.0

    def test_single_triangle_selects_zero(self):
        tri = TriMesh(
            np.array([[0, -0.5, -0.5], [0, 0.5, -0.5], [0, 0, 0.5]], dtype=float),
            [[0, 1, 2]],
        )
        counts = candidate_visibility(tri, seed=1)
        norm = normalize_mesh(tri)
        pts = sample_surface(norm, 5000, seed=1)
        for yaw in CANDIDATE_YAWS:
            pose = CameraPose(yaw=yaw, pitch=30, radius=2.0, fov=40)
            assert counts[yaw] == brute_force_visible(norm, pts, pose)
        assert select_view(tri, seed=1) == 0.0

    def test_vertex_permutation_invariance(self):
        mesh = wall_fixture()
        perm = np.random.Generator(np.random.PCG64(8)).permutation(len(mesh.vertices))
        inv = np.argsort(perm)
        permuted = TriMesh(mesh.vertices[perm], inv[mesh.triangles])
        pts = sample_surface(normalize_mesh(mesh), 2000, seed=5)
        assert select_view(mesh, points=pts) == select_view(permuted, points=pts)
        assert candidate_visibility(mesh, points=pts) == candidate_visibility(
            permuted, points=pts
        )


class TestFps:
    def test_collinear_line_k2(self):
        pts = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
        got = set(fps(pts, 2))
        # brute force: the pair maximizing min pairwise distance
        best, best_d = None, -1.0
        for i in range(10):
            for j in range(i + 1, 10):
                d = np.linalg.norm(pts[i] - pts[j])
                if d > best_d:
                    best, best_d = {i, j}, d
        assert got == best == {0, 9}

    def test_full_set(self, rng):
        pts = rng.standard_normal((7, 3))
        assert set(fps(pts, 7)) == set(range(7))

    def test_k1_farthest_from_centroid(self, rng):
        pts = rng.standard_normal((20, 3))
        idx = fps(pts, 1)
        d = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        assert idx[0] == int(np.argmax(d))

    def test_min_distance_monotonicity(self, rng):
        pts = rng.standard_normal((40, 3))
        prev = np.inf
        for k in range(2, 15):
            sel = pts[fps(pts, k)]
            dists = [
                np.linalg.norm(sel[i] - sel[j])
                for i in range(k)
                for j in range(i + 1, k)
            ]
            cur = min(dists)
            assert cur <= prev + 1e-12
            prev = cur

    def test_range_errors(self, rng):
        pts = rng.standard_normal((5, 3))
        with pytest.raises(RangeError):
            fps(pts, 0)
        with pytest.raises(RangeError):
            fps(pts, 6)


class TestObjLoading:
    def test_parse_and_filter(self, tmp_path):
        path = tmp_path / "m.obj"
        path.write_text(
            "# comment\n"
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n"
            "f 1 2 3\n"
            "f 1/1 2/2 4/4\n"
            "f 1 1 2\n"  # degenerate: zero area
        )
        mesh = load_obj(path)
        assert len(mesh.triangles) == 2

    def test_quad_rejected(self, tmp_path):
        path = tmp_path / "q.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(ValueError):
            load_obj(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "e.obj"
        path.write_text("v 0 0 0\n")
        with pytest.raises(EmptyMeshError):
            load_obj(path)

    def test_round_trip_through_select_view(self, tmp_path):
        mesh = wall_fixture()
        lines = [f"v {x} {y} {z}" for x, y, z in mesh.vertices]
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in mesh.triangles]
        path = tmp_path / "wall.obj"
        path.write_text("\n".join(lines) + "\n")
        assert select_view(load_obj(path), seed=0) == 0.0


def test_empty_mesh_rejected():
    with pytest.raises(EmptyMeshError):
        TriMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(EmptyMeshError):
        TriMesh(np.zeros((2, 3)), [[0, 1, 2]])
