"""Minimum-occlusion view selection and farthest point sampling.

Builds a pocket-shaped mesh that is open toward +x, shows the per-yaw
visibility counts, and demonstrates greedy farthest-point subsets.
"""
import numpy as np

from flowalign import fps
from flowalign.viewsel3d import TriMesh, candidate_visibility, select_view


def quad(center, normal_axis, half, half2=None):
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
    return np.array(corners), np.array([[0, 1, 2], [0, 2, 3]])


parts = [
    quad([-0.3, 0, 0], 0, 0.6),      # back wall
    quad([0, 0.3, 0], 1, 0.3, 0.6),  # +y side wall
    quad([0, -0.3, 0], 1, 0.3, 0.6), # -y side wall
    quad([0.05, 0, 0], 0, 0.1),      # the object inside
]
verts = np.vstack([v for v, _ in parts])
tris, off = [], 0
for v, t in parts:
    tris.append(t + off)
    off += len(v)
mesh = TriMesh(verts, np.vstack(tris))

print("pocket mesh, open toward +x; visible surface samples per yaw:")
for yaw, count in candidate_visibility(mesh, seed=0).items():
    print(f"  yaw {int(yaw):>3} deg: {count}")
print("selected view:", int(select_view(mesh, seed=0)), "deg")

print("\nfarthest point sampling on 10 collinear points:")
line = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
for k in (1, 2, 4):
    print(f"  k={k}: indices {sorted(fps(line, k).tolist())}")

rng = np.random.Generator(np.random.PCG64(3))
cloud = rng.standard_normal((500, 3))
sel = cloud[fps(cloud, 16)]
dmin = min(
    np.linalg.norm(sel[i] - sel[j]) for i in range(16) for j in range(i + 1, 16)
)
print(f"\n16-point subset of a 500-point cloud: min pairwise distance {dmin:.3f}")
