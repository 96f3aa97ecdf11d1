"""Triangle meshes with a UV atlas: loading, point location, and distance queries.

Surface queries come in two flavors: UV-space lookup (which face does a uv land
in, with barycentric weights) and 3D nearest-point-on-surface queries backed by
a vertex KD-tree plus exact point-to-triangle distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import MeshError, UvOffSurfaceError

NORMAL_UNIT_TOL = 1e-6
BARY_TOL = 1e-9


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals (cross products left unnormalized before accumulation)."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise MeshError("degenerate vertex normal (zero accumulated area)")
    return normals / norms[:, None]


@dataclass
class TriMesh:
    """Triangle mesh with per-vertex unit normals and a [0,1]^2 UV atlas, mm units."""

    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (M, 3) int
    normals: np.ndarray  # (N, 3) unit
    uv: np.ndarray  # (N, 2) in [0,1]^2

    _uv_index: "UvFaceIndex" = field(default=None, repr=False, compare=False)
    _surface_index: "SurfaceIndex" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.normals = np.ascontiguousarray(self.normals, dtype=float)
        self.uv = np.ascontiguousarray(self.uv, dtype=float)
        self.validate()

    def validate(self) -> None:
        n = len(self.vertices)
        if n < 3 or len(self.faces) < 1:
            raise MeshError("mesh too small")
        if self.vertices.shape != (n, 3) or not np.all(np.isfinite(self.vertices)):
            raise MeshError("bad vertex array")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("invalid face: faces must be triangles")
        if self.faces.min() < 0 or self.faces.max() >= n:
            raise MeshError("invalid face: vertex index out of range")
        referenced = np.bincount(self.faces.ravel(), minlength=n)
        if np.any(referenced == 0):
            raise MeshError("unreferenced vertex")
        if self.normals.shape != (n, 3):
            raise MeshError("normals shape mismatch")
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > NORMAL_UNIT_TOL):
            raise MeshError("non-unit normal")
        if self.uv.shape != (n, 2):
            raise MeshError("uv shape mismatch")
        if self.uv.min() < 0.0 or self.uv.max() > 1.0:
            raise MeshError("uv out of range [0,1]^2")
        a, b, c = (self.uv[self.faces[:, k]] for k in range(3))
        area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        if np.any(np.abs(area2) <= 1e-14):
            raise MeshError("degenerate uv triangle")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def uv_index(self) -> "UvFaceIndex":
        if self._uv_index is None:
            self._uv_index = UvFaceIndex(self)
        return self._uv_index

    def surface_index(self) -> "SurfaceIndex":
        if self._surface_index is None:
            self._surface_index = SurfaceIndex(self)
        return self._surface_index

    def locate_uv(self, uv) -> tuple[int, np.ndarray]:
        """Face index and barycentric weights for a uv point; raises UvOffSurfaceError off-atlas."""
        return self.uv_index().locate(uv)

    def sample_surface(self, n: int, rng: np.random.Generator):
        """Area-weighted uniform surface samples -> (points (n,3), face_idx (n,), bary (n,3))."""
        areas = self.face_areas()
        probs = areas / areas.sum()
        face_idx = rng.choice(len(self.faces), size=n, p=probs)
        r1 = rng.random(n)
        r2 = rng.random(n)
        su = np.sqrt(r1)
        bary = np.stack([1.0 - su, su * (1.0 - r2), su * r2], axis=1)
        tri = self.vertices[self.faces[face_idx]]
        points = np.einsum("nk,nkd->nd", bary, tri)
        return points, face_idx, bary


def barycentric_2d(tri_uv: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Barycentric weights of 2D point(s) p w.r.t. triangle(s) tri_uv (...,3,2)."""
    a = tri_uv[..., 0, :]
    v0 = tri_uv[..., 1, :] - a
    v1 = tri_uv[..., 2, :] - a
    v2 = p - a
    d00 = np.einsum("...d,...d->...", v0, v0)
    d01 = np.einsum("...d,...d->...", v0, v1)
    d11 = np.einsum("...d,...d->...", v1, v1)
    d20 = np.einsum("...d,...d->...", v2, v0)
    d21 = np.einsum("...d,...d->...", v2, v1)
    denom = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    u = 1.0 - v - w
    return np.stack([u, v, w], axis=-1)


class UvFaceIndex:
    """Uniform-grid bucket index over face UV bounding boxes for point location."""

    def __init__(self, mesh: TriMesh, grid_size: int | None = None):
        self.mesh = mesh
        m = len(mesh.faces)
        self.g = grid_size or max(1, int(np.sqrt(m)))
        tri_uv = mesh.uv[mesh.faces]  # (M,3,2)
        self.tri_uv = tri_uv
        lo = np.clip((tri_uv.min(axis=1) * self.g).astype(int), 0, self.g - 1)
        hi = np.clip((tri_uv.max(axis=1) * self.g).astype(int), 0, self.g - 1)
        buckets: list[list[int]] = [[] for _ in range(self.g * self.g)]
        for f in range(m):
            for ix in range(lo[f, 0], hi[f, 0] + 1):
                for iy in range(lo[f, 1], hi[f, 1] + 1):
                    buckets[ix * self.g + iy].append(f)
        self.buckets = [np.array(b, dtype=np.int64) for b in buckets]

    def locate(self, uv) -> tuple[int, np.ndarray]:
        uv = np.asarray(uv, dtype=float).reshape(2)
        if not (0.0 <= uv[0] <= 1.0 and 0.0 <= uv[1] <= 1.0):
            raise UvOffSurfaceError(f"uv not on surface: {uv.tolist()} outside [0,1]^2")
        ix = min(int(uv[0] * self.g), self.g - 1)
        iy = min(int(uv[1] * self.g), self.g - 1)
        cand = self.buckets[ix * self.g + iy]
        if len(cand):
            bary = barycentric_2d(self.tri_uv[cand], uv)
            ok = np.all(bary >= -BARY_TOL, axis=1)
            hits = np.nonzero(ok)[0]
            if len(hits):
                # first hit in face order keeps shared-edge lookups deterministic
                best = hits[np.argmin(cand[hits])]
                w = np.clip(bary[best], 0.0, None)
                return int(cand[best]), w / w.sum()
        raise UvOffSurfaceError(f"uv not on surface: {uv.tolist()} not inside any face")

    def locate_many(self, uvs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        uvs = np.asarray(uvs, dtype=float)
        faces = np.empty(len(uvs), dtype=np.int64)
        bary = np.empty((len(uvs), 3))
        for i, uv in enumerate(uvs):
            faces[i], bary[i] = self.locate(uv)
        return faces, bary


def closest_point_on_triangles(tri: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Closest point on triangle tri[i] to p[i], pairwise; Ericson's region tests, vectorized."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    result = np.zeros_like(p)
    remain = np.ones(len(p), dtype=bool)

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("nd,nd->n", ab, ap)
    d2 = np.einsum("nd,nd->n", ac, ap)
    is_a = (d1 <= 0) & (d2 <= 0)
    result[is_a] = a[is_a]
    remain &= ~is_a

    bp = p - b
    d3 = np.einsum("nd,nd->n", ab, bp)
    d4 = np.einsum("nd,nd->n", ac, bp)
    is_b = (d3 >= 0) & (d4 <= d3) & remain
    result[is_b] = b[is_b]
    remain &= ~is_b

    vc = d1 * d4 - d3 * d2
    is_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & remain
    if np.any(is_ab):
        v = (d1[is_ab] / (d1[is_ab] - d3[is_ab]))[:, None]
        result[is_ab] = a[is_ab] + v * ab[is_ab]
    remain &= ~is_ab

    cp = p - c
    d5 = np.einsum("nd,nd->n", ab, cp)
    d6 = np.einsum("nd,nd->n", ac, cp)
    is_c = (d6 >= 0) & (d5 <= d6) & remain
    result[is_c] = c[is_c]
    remain &= ~is_c

    vb = d5 * d2 - d1 * d6
    is_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & remain
    if np.any(is_ac):
        w = (d2[is_ac] / (d2[is_ac] - d6[is_ac]))[:, None]
        result[is_ac] = a[is_ac] + w * ac[is_ac]
    remain &= ~is_ac

    va = d3 * d6 - d5 * d4
    is_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0) & remain
    if np.any(is_bc):
        d43 = d4[is_bc] - d3[is_bc]
        w = (d43 / (d43 + d5[is_bc] - d6[is_bc]))[:, None]
        result[is_bc] = b[is_bc] + w * (c[is_bc] - b[is_bc])
    remain &= ~is_bc

    if np.any(remain):
        denom = 1.0 / (va[remain] + vb[remain] + vc[remain])
        v = (vb[remain] * denom)[:, None]
        w = (vc[remain] * denom)[:, None]
        result[remain] = a[remain] + v * ab[remain] + w * ac[remain]
    return result


class SurfaceIndex:
    """Exact nearest-point-on-mesh queries, centroid KD-tree pruned.

    Fast path: evaluate the k faces with nearest centroids exactly; if the k-th
    centroid is farther than (best distance so far + rho), no unseen face can
    win, because any face containing a closer point would have its centroid
    within that radius (rho = max centroid-to-vertex distance over faces).
    Points failing that certificate fall back to an exact ball query.
    """

    def __init__(self, mesh: TriMesh, k_fast: int = 16):
        self.mesh = mesh
        tri = mesh.triangles
        self._centroids = tri.mean(axis=1)
        self._ctree = cKDTree(self._centroids)
        self._spread = np.linalg.norm(tri - self._centroids[:, None, :], axis=2).max(axis=1)
        self.rho = float(self._spread.max())
        self.k_fast = max(1, int(k_fast))

    def _improve(self, dist, closest, face, pair_pt, pair_face, points):
        """Evaluate candidate (point, face) pairs exactly; keep strict improvements."""
        # cheap reject: a face can't beat the incumbent unless its centroid is
        # within incumbent-distance + its own spread
        cen = self._centroids[pair_face]
        gap = points[pair_pt] - cen
        d_cen = np.sqrt(np.einsum("nd,nd->n", gap, gap))
        viable = d_cen - self._spread[pair_face] < dist[pair_pt]
        pair_pt = pair_pt[viable]
        pair_face = pair_face[viable]
        if not pair_pt.size:
            return
        cp = closest_point_on_triangles(self.mesh.triangles[pair_face], points[pair_pt])
        d2 = np.einsum("nd,nd->n", points[pair_pt] - cp, points[pair_pt] - cp)
        order = np.lexsort((d2, pair_pt))
        uniq, first = np.unique(pair_pt[order], return_index=True)
        sel = order[first]
        better = d2[sel] < dist[uniq] ** 2
        hit = uniq[better]
        dist[hit] = np.sqrt(d2[sel][better])
        closest[hit] = cp[sel][better]
        face[hit] = pair_face[sel][better]

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """-> (distance (P,), closest point (P,3), face index (P,))."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n_pts = len(points)
        if n_pts == 0:
            return np.empty(0), np.empty((0, 3)), np.empty(0, dtype=np.int64)
        n_faces = len(self._centroids)
        k = min(self.k_fast, n_faces)

        d_c, f_c = self._ctree.query(points, k=k)
        d_c = d_c.reshape(n_pts, k)
        f_c = f_c.reshape(n_pts, k)

        # exact distance to the few nearest-centroid faces seeds the incumbent
        k1 = min(4, k)
        seed_face = f_c[:, :k1].ravel()
        seed_pts = np.repeat(points, k1, axis=0)
        cp = closest_point_on_triangles(self.mesh.triangles[seed_face], seed_pts)
        d2 = np.einsum("nd,nd->n", seed_pts - cp, seed_pts - cp).reshape(n_pts, k1)
        pick = np.argmin(d2, axis=1)
        rows = np.arange(n_pts)
        dist = np.sqrt(d2[rows, pick])
        closest = cp.reshape(n_pts, k1, 3)[rows, pick]
        face = f_c[rows, pick]

        if k > k1:
            rest = f_c[:, k1:]
            pair_pt, col = np.nonzero(d_c[:, k1:] - self._spread[rest] < dist[:, None])
            self._improve(dist, closest, face, pair_pt, rest[pair_pt, col], points)

        # certificate that no unexamined face can host a closer point; widen the
        # candidate set for points that fail it, resorting to a ball query last
        settled = d_c[:, -1] >= dist + self.rho if k < n_faces else np.ones(n_pts, bool)
        active = np.flatnonzero(~settled)
        if active.size and k < n_faces:
            k2 = min(4 * self.k_fast, n_faces)
            d_c2, f_c2 = self._ctree.query(points[active], k=k2)
            d_c2 = d_c2.reshape(active.size, k2)
            f_c2 = f_c2.reshape(active.size, k2)
            row, col = np.nonzero(d_c2 - self._spread[f_c2] < dist[active, None])
            self._improve(dist, closest, face, active[row], f_c2[row, col], points)
            if k2 < n_faces:
                active = active[d_c2[:, -1] < dist[active] + self.rho]
            else:
                active = active[:0]
        if active.size:
            radii = dist[active] + self.rho + 1e-9
            balls = self._ctree.query_ball_point(points[active], radii)
            lens = np.fromiter((len(b) for b in balls), dtype=np.int64, count=active.size)
            pair_face = np.concatenate([np.asarray(b, dtype=np.int64) for b in balls])
            self._improve(dist, closest, face, np.repeat(active, lens), pair_face, points)
        return dist, closest, face


def brute_force_closest(mesh: TriMesh, points: np.ndarray, batch: int = 256):
    """Closest-point query scanning every face; reference oracle for SurfaceIndex."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.triangles
    m = len(tri)
    dists = np.empty(len(points))
    closest = np.empty_like(points)
    for s in range(0, len(points), batch):
        chunk = points[s : s + batch]
        k = len(chunk)
        rep_tri = np.repeat(tri[None, :], k, axis=0).reshape(k * m, 3, 3)
        rep_pts = np.repeat(chunk, m, axis=0)
        cp = closest_point_on_triangles(rep_tri, rep_pts).reshape(k, m, 3)
        d2 = np.sum((chunk[:, None, :] - cp) ** 2, axis=2)
        idx = np.argmin(d2, axis=1)
        dists[s : s + batch] = np.sqrt(d2[np.arange(k), idx])
        closest[s : s + batch] = cp[np.arange(k), idx]
    return dists, closest


# ---------------------------------------------------------------------------
# Wavefront OBJ I/O (v / vt / vn / f v/vt/vn), mm units


def load_obj(path) -> TriMesh:
    """Parse an OBJ file into a TriMesh; wedges (v,vt,vn triples) become vertices."""
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    normals: list[list[float]] = []
    face_wedges: list[tuple] = []
    text = Path(path).read_text()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                texcoords.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshError(f"line {ln}: non-triangular face")
                wedge = []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi = int(fields[0])
                    ti = int(fields[1]) if len(fields) > 1 and fields[1] else 0
                    ni = int(fields[2]) if len(fields) > 2 and fields[2] else 0
                    wedge.append((vi, ti, ni))
                face_wedges.append(tuple(wedge))
        except (ValueError, IndexError) as exc:
            raise MeshError(f"malformed mesh file at line {ln}: {raw!r}") from exc
    if not positions or not face_wedges:
        raise MeshError("malformed mesh file: no geometry")
    if not texcoords or any(t == 0 for face in face_wedges for (_, t, _) in face):
        raise MeshError("missing UV channel")

    nv, nt, nn = len(positions), len(texcoords), len(normals)
    wedge_ids: dict[tuple, int] = {}
    out_v, out_t, out_n, out_faces = [], [], [], []
    for face in face_wedges:
        tri = []
        for vi, ti, ni in face:
            if not (1 <= vi <= nv) or not (1 <= ti <= nt) or (ni and not (1 <= ni <= nn)):
                raise MeshError(f"invalid face: index out of range in {face}")
            key = (vi, ti, ni)
            if key not in wedge_ids:
                wedge_ids[key] = len(out_v)
                out_v.append(positions[vi - 1])
                out_t.append(texcoords[ti - 1])
                out_n.append(normals[ni - 1] if ni else None)
            tri.append(wedge_ids[key])
        out_faces.append(tri)

    verts = np.array(out_v, dtype=float)
    faces = np.array(out_faces, dtype=np.int64)
    uv = np.array(out_t, dtype=float)
    if any(n is None for n in out_n):
        vn = compute_vertex_normals(verts, faces)
    else:
        vn = np.array(out_n, dtype=float)
        lengths = np.linalg.norm(vn, axis=1)
        if np.any(lengths == 0):
            raise MeshError("non-unit normal (zero length)")
        vn = vn / lengths[:, None]
    return TriMesh(verts, faces, vn, uv)


def save_obj(mesh: TriMesh, path) -> None:
    # repr of a Python float is shortest-exact, so loading reproduces the
    # array bit for bit (numpy scalars repr with a type wrapper — cast first)
    lines = ["# palpation-lab mesh, units mm"]
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for t in mesh.uv:
        lines.append(f"vt {float(t[0])!r} {float(t[1])!r}")
    for n in mesh.normals:
        lines.append(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}")
    for f in mesh.faces + 1:
        lines.append(f"f {f[0]}/{f[0]}/{f[0]} {f[1]}/{f[1]}/{f[1]} {f[2]}/{f[2]}/{f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Procedural organ: an asymmetric dome (height field over an elliptical footprint)


def make_organ_mesh(
    n_rings: int = 24,
    n_sectors: int = 48,
    semi_axes: tuple[float, float, float] = (30.0, 24.0, 18.0),
    uv_margin: float = 0.98,
) -> TriMesh:
    """Prostate-like dome: half-ellipsoid footprint with azimuthal asymmetry.

    The surface is a height field over an elliptical disk, so the polar UV chart
    (disk coordinates scaled into [0,1]^2) is injective per face. Asymmetric
    harmonics break rotational symmetry so rigid registration is well posed.
    """
    a, b, c = semi_axes
    verts_uv = [(0.5, 0.5)]
    verts_xyz = [(0.0, 0.0, _dome_height(0.0, 0.0, c))]
    for i in range(1, n_rings + 1):
        # latitude-graded rings: equal polar-angle steps keep 3D edge lengths
        # even where the dome skirt drops steeply near the rim
        rho = np.sin(0.5 * np.pi * i / n_rings)
        for j in range(n_sectors):
            theta = 2.0 * np.pi * j / n_sectors
            x = a * rho * np.cos(theta)
            y = b * rho * np.sin(theta)
            z = _dome_height(rho, theta, c)
            verts_xyz.append((x, y, z))
            u = 0.5 + 0.5 * uv_margin * rho * np.cos(theta)
            v = 0.5 + 0.5 * uv_margin * rho * np.sin(theta)
            verts_uv.append((u, v))

    def ring_vertex(i: int, j: int) -> int:
        return 1 + (i - 1) * n_sectors + (j % n_sectors)

    faces = []
    for j in range(n_sectors):
        faces.append((0, ring_vertex(1, j), ring_vertex(1, j + 1)))
    for i in range(1, n_rings):
        for j in range(n_sectors):
            a0 = ring_vertex(i, j)
            b0 = ring_vertex(i, j + 1)
            c0 = ring_vertex(i + 1, j + 1)
            d0 = ring_vertex(i + 1, j)
            faces.append((a0, d0, c0))
            faces.append((a0, c0, b0))

    vertices = np.array(verts_xyz, dtype=float)
    faces_arr = np.array(faces, dtype=np.int64)
    normals = compute_vertex_normals(vertices, faces_arr)
    return TriMesh(vertices, faces_arr, normals, np.array(verts_uv, dtype=float))


def _dome_height(rho: float, theta: float, c: float) -> float:
    base = np.sqrt(max(0.0, 1.0 - rho * rho))
    warp = 1.0 + 0.18 * rho * np.cos(theta - 0.7) + 0.12 * rho * rho * np.sin(2.0 * theta + 0.5)
    return c * base * warp
