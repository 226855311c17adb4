"""Shared construction helpers and independent oracles for the tests."""

import numpy as np

from depthface.geometry import TriangleMesh, compute_vertex_normals


def make_square(z=0.0):
    """Unit square in the z=z plane, two CCW triangles (normal +z)."""
    vertices = np.array(
        [[0, 0, z], [1, 0, z], [1, 1, z], [0, 1, z]], dtype=float
    )
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(vertices, triangles)


def make_grid(nx, ny, spacing=1.0, z=0.0):
    """Flat triangulated grid of (nx+1)*(ny+1) vertices in the z plane."""
    xs, ys = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    vertices = np.column_stack(
        [xs.ravel() * spacing, ys.ravel() * spacing, np.full(xs.size, float(z))]
    )
    tris = []
    for i in range(nx):
        for j in range(ny):
            a = i * (ny + 1) + j
            b = (i + 1) * (ny + 1) + j
            c = i * (ny + 1) + j + 1
            d = (i + 1) * (ny + 1) + j + 1
            tris.append([a, b, d])
            tris.append([a, d, c])
    return TriangleMesh(vertices, np.array(tris))


def make_icosphere(subdivisions=3, radius=1.0):
    """Icosahedron subdivided toward a sphere of the given radius."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = [tuple(v) for v in verts]
    cache = {}

    def midpoint(i, j, vlist):
        key = (min(i, j), max(i, j))
        if key in cache:
            return cache[key]
        m = np.asarray(vlist[i]) + np.asarray(vlist[j])
        m /= np.linalg.norm(m)
        vlist.append(tuple(m))
        cache[key] = len(vlist) - 1
        return cache[key]

    vlist = list(verts)
    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab = midpoint(a, b, vlist)
            bc = midpoint(b, c, vlist)
            ca = midpoint(c, a, vlist)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    vertices = np.asarray(vlist) * radius
    return TriangleMesh(vertices, np.array(faces))


def make_tube(ring_ys, segments=128, radius=50.0):
    """Open cylinder around the y axis: one vertex ring per entry of
    ring_ys, quad strips between consecutive rings split into triangles."""
    ring_ys = np.asarray(ring_ys, dtype=float)
    angles = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack(
        [radius * np.cos(angles), np.zeros(segments), radius * np.sin(angles)]
    )
    vertices = np.concatenate(
        [ring + np.array([0.0, y, 0.0]) for y in ring_ys]
    )
    tris = []
    for j in range(len(ring_ys) - 1):
        base = j * segments
        for i in range(segments):
            a = base + i
            b = base + (i + 1) % segments
            c = a + segments
            d = b + segments
            tris.append([a, b, c])
            tris.append([b, d, c])
    return TriangleMesh(vertices, np.array(tris))


def random_rotation(rng):
    """Uniformly distributed random rotation matrix."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def closest_point_reference(point, a, b, c):
    """Independent closest-point oracle: dense sampling free, solves the
    constrained quadratic directly by checking face, edges, and vertices."""
    candidates = []
    # face: unconstrained barycentric solution via normal projection
    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    nn = normal @ normal
    if nn > 0:
        proj = point - normal * ((point - a) @ normal) / nn
        # solve proj = a + s*ab + t*ac
        m = np.array([[ab @ ab, ab @ ac], [ab @ ac, ac @ ac]])
        rhs = np.array([(proj - a) @ ab, (proj - a) @ ac])
        try:
            s, t = np.linalg.solve(m, rhs)
            if s >= 0 and t >= 0 and s + t <= 1:
                candidates.append(proj)
        except np.linalg.LinAlgError:
            pass
    # edges
    for p0, p1 in ((a, b), (b, c), (c, a)):
        d = p1 - p0
        dd = d @ d
        if dd > 0:
            u = np.clip(((point - p0) @ d) / dd, 0.0, 1.0)
            candidates.append(p0 + u * d)
    # vertices
    candidates += [a, b, c]
    dists = [np.linalg.norm(point - cand) for cand in candidates]
    return min(dists)


def fit_sphere(points):
    """Least-squares sphere fit; returns (center, radius)."""
    pts = np.asarray(points, dtype=float)
    A = np.column_stack([2 * pts, np.ones(len(pts))])
    b = (pts**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    center = sol[:3]
    radius = np.sqrt(sol[3] + center @ center)
    return center, radius


def sphere_mesh_with_normals(subdivisions=3, radius=1.0):
    return compute_vertex_normals(make_icosphere(subdivisions, radius))
