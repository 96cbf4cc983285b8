"""Conservative collision-probability bounds for mixtures against meshes.

For each mixture component the environment vertices are whitened so the
component becomes a standard normal, a locally convex free region is
carved around the origin as an intersection of half-spaces, and the
probability of leaving that region is over-counted constraint by
constraint with the standard normal tail. A Monte-Carlo estimator over
mixture samples provides the independent check that the bound really is
conservative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import InvalidInputError, OpenMeshError, ParseError
from .gmm import GaussianComponent, Gmm3, gmm_sample

DENSIFY_EDGE_DEFAULT = 0.01   # m
DENSIFY_VERTEX_CAP = 5_000_000
CONTACT_EPS = 1e-12

# Fallback ray directions for parity tests that graze an edge or vertex.
_RAY_DIRECTIONS = [
    (1.0, 0.0, 0.0),
    (1.0, 3.1e-3, 1.7e-3),
    (1.0, -2.3e-3, 2.9e-3),
    (1.0, 1.3e-3, -3.7e-3),
    (1.0, -4.1e-3, -1.1e-3),
    (0.9, 5.0e-2, 2.0e-2),
    (0.8, -6.0e-2, 3.0e-2),
]


class EnvironmentMesh:
    """Triangle-mesh obstacles; vertices in meters.

    The mesh is watertight when every edge is shared by exactly two
    triangles; only watertight meshes support inside tests. The densified
    vertex set (original vertices plus subdivision midpoints, no edge
    longer than ``densify_edge``) feeds the whitening transform so large
    triangles cannot slip between sparse vertices.
    """

    def __init__(self, vertices, triangles, densify_edge: float = DENSIFY_EDGE_DEFAULT):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=int).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise InvalidInputError("mesh vertices must be finite")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise InvalidInputError("triangle indices out of range")
        if densify_edge <= 0:
            raise InvalidInputError("densify_edge must be positive")
        self.densify_edge = float(densify_edge)
        self._densified = None
        self._watertight = self._check_watertight()

    def _check_watertight(self) -> bool:
        if len(self.triangles) == 0:
            return False
        edges = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        return all(count == 2 for count in edges.values())

    @property
    def watertight(self) -> bool:
        return self._watertight

    @property
    def densified_vertices(self) -> np.ndarray:
        if self._densified is None:
            self._densified = self._densify()
        return self._densified

    def _densify(self) -> np.ndarray:
        if len(self.triangles) == 0:
            return self.vertices.copy()
        tris = self.vertices[self.triangles]          # (T, 3, 3)
        done = []
        while len(tris):
            edge_len = np.stack([
                np.linalg.norm(tris[:, 0] - tris[:, 1], axis=1),
                np.linalg.norm(tris[:, 1] - tris[:, 2], axis=1),
                np.linalg.norm(tris[:, 2] - tris[:, 0], axis=1),
            ], axis=1)
            split = edge_len.max(axis=1) > self.densify_edge
            done.append(tris[~split])
            big = tris[split]
            if not len(big):
                break
            count = (sum(len(d) for d in done) + 4 * len(big)) * 3
            if count > DENSIFY_VERTEX_CAP:
                raise InvalidInputError(
                    "densification would exceed the vertex cap; "
                    "increase densify_edge for this mesh scale")
            a, b, c = big[:, 0], big[:, 1], big[:, 2]
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            tris = np.concatenate([
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ])
        allv = np.concatenate([self.vertices] + [d.reshape(-1, 3) for d in done])
        return np.unique(allv, axis=0)

    def transformed(self, transform: np.ndarray) -> "EnvironmentMesh":
        """Apply a rigid transform given as a row-major 3x4 [R|t] matrix."""
        transform = np.asarray(transform, dtype=float).reshape(3, 4)
        verts = self.vertices @ transform[:, :3].T + transform[:, 3]
        return EnvironmentMesh(verts, self.triangles, self.densify_edge)


def merge_meshes(meshes) -> EnvironmentMesh:
    """Concatenate meshes (disjoint closed bodies stay watertight)."""
    meshes = list(meshes)
    if not meshes:
        raise InvalidInputError("no meshes to merge")
    verts, tris, offset = [], [], 0
    for mesh in meshes:
        verts.append(mesh.vertices)
        tris.append(mesh.triangles + offset)
        offset += len(mesh.vertices)
    return EnvironmentMesh(np.concatenate(verts), np.concatenate(tris),
                           meshes[0].densify_edge)


def box_mesh(center, size) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box as 8 vertices and 12 outward-facing triangles."""
    center = np.asarray(center, dtype=float)
    half = np.asarray(size, dtype=float) / 2.0
    corners = np.array(list(np.ndindex(2, 2, 2)), dtype=float)
    verts = center + (corners * 2.0 - 1.0) * half
    tris = np.array([
        [0, 2, 1], [1, 2, 3],   # -z ... indices laid out below
        [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4],
        [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6],
        [1, 3, 5], [3, 7, 5],
    ])
    return verts, tris


@dataclass
class ConvexRegion:
    """Half-space intersection {p : normals @ p <= offsets} around the origin."""

    normals: np.ndarray    # (K, 3) unit rows
    offsets: np.ndarray    # (K,), all >= 0
    degenerate: bool = False

    @property
    def n_constraints(self) -> int:
        return len(self.offsets)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.n_constraints == 0:
            return np.ones(len(points), dtype=bool)
        return np.all(points @ self.normals.T <= self.offsets, axis=1)


@dataclass
class CollisionBound:
    """Clamped collision-probability upper bound plus diagnostics."""

    probability: float
    per_component: list = field(default_factory=list)
    unclamped: float = 0.0
    mean_in_contact: bool = False


def transform_environment(env: EnvironmentMesh, component: GaussianComponent) -> np.ndarray:
    """Whiten the densified vertices: v -> Ubar (v - mu)."""
    return (env.densified_vertices - component.mean) @ component.factor.T


def carve_convex_region(points: np.ndarray) -> ConvexRegion:
    """Carve a convex free region around the origin.

    Repeatedly takes the closest remaining point, adds the tangent
    half-space through it, and discards every point the new constraint
    already excludes. A point at the origin collapses the region to the
    degenerate single constraint with offset zero.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals, offsets = [], []
    alive = np.ones(len(points), dtype=bool)
    norms = np.linalg.norm(points, axis=1)
    while alive.any():
        local = np.where(alive)[0]
        best = local[np.argmin(norms[local])]
        dist = norms[best]
        if dist < CONTACT_EPS:
            return ConvexRegion(np.array([[1.0, 0.0, 0.0]]), np.array([0.0]),
                                degenerate=True)
        a = points[best] / dist
        normals.append(a)
        offsets.append(dist)
        alive &= points @ a < dist
        alive[best] = False
    if not normals:
        return ConvexRegion(np.zeros((0, 3)), np.zeros(0))
    return ConvexRegion(np.array(normals), np.array(offsets))


def config_collision_bound(g: Gmm3, env: EnvironmentMesh) -> CollisionBound:
    """Upper bound on P(robot point outside the carved free space).

    Per component: whiten, carve, then add the standard normal tail
    1 - Phi(b) of every constraint, weighted by the component weight.
    """
    contributions = []
    contact = False
    for comp in g.components:
        region = carve_convex_region(transform_environment(env, comp))
        contact = contact or region.degenerate
        tail = float((1.0 - ndtr(region.offsets)).sum()) if region.n_constraints else 0.0
        contributions.append(comp.weight * tail)
    total = float(sum(contributions))
    return CollisionBound(probability=min(1.0, max(0.0, total)),
                          per_component=contributions,
                          unclamped=total,
                          mean_in_contact=contact)


def trajectory_collision_bound(state_bounds) -> float:
    """1 - prod(1 - p_k) over per-state bounds."""
    bounds = np.asarray(state_bounds, dtype=float).reshape(-1)
    if np.any((bounds < 0) | (bounds > 1)) or not np.all(np.isfinite(bounds)):
        raise InvalidInputError("state bounds must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - bounds))


# ---------------------------------------------------------------------------
# Inside/outside and distance queries (the Monte-Carlo side of the audit).
# ---------------------------------------------------------------------------

def _ray_parity(env: EnvironmentMesh, points: np.ndarray) -> np.ndarray:
    """Crossing-parity inside test, retrying grazing rays with new directions."""
    v0 = env.vertices[env.triangles[:, 0]]
    e1 = env.vertices[env.triangles[:, 1]] - v0
    e2 = env.vertices[env.triangles[:, 2]] - v0
    inside = np.zeros(len(points), dtype=bool)
    pending = np.arange(len(points))
    for direction in _RAY_DIRECTIONS:
        if not len(pending):
            break
        d = np.asarray(direction) / np.linalg.norm(direction)
        crossings, degenerate = _count_crossings(points[pending], d, v0, e1, e2)
        ok = ~degenerate
        inside[pending[ok]] = crossings[ok] % 2 == 1
        pending = pending[degenerate]
    if len(pending):
        # every retry direction grazed; treat as touching the surface
        inside[pending] = True
    return inside


def _count_crossings(points, d, v0, e1, e2):
    """Moller-Trumbore ray counts for a shared direction; flags grazers.

    A crossing only counts when it is strictly interior to the triangle
    and strictly ahead of the ray origin; intersections within tolerance
    of an edge, vertex, or the origin itself are reported as degenerate so
    the caller can recast along a perturbed direction. Rays lying in the
    plane of a triangle are degenerate whenever the origin sits in that
    plane.
    """
    tol = 1e-10
    pvec = np.cross(d, e2)                      # (T, 3)
    det = np.einsum("tj,tj->t", e1, pvec)       # (T,)
    normals = np.cross(e1, e2)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    near_parallel = np.abs(det) < 1e-14
    safe_det = np.where(near_parallel, 1.0, det)
    crossings = np.zeros(len(points), dtype=int)
    degenerate = np.zeros(len(points), dtype=bool)
    for lo in range(0, len(points), 2048):
        chunk = points[lo:lo + 2048]
        tvec = chunk[:, None, :] - v0[None, :, :]              # (C, T, 3)
        u = np.einsum("ctj,tj->ct", tvec, pvec) / safe_det
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("ctj,j->ct", qvec, d) / safe_det
        t = np.einsum("ctj,tj->ct", qvec, e2) / safe_det
        strict = (u > tol) & (v > tol) & (u + v < 1.0 - tol) & (t > tol)
        window = (u > -tol) & (v > -tol) & (u + v < 1.0 + tol) & (t > -tol)
        strict &= ~near_parallel[None, :]
        window &= ~near_parallel[None, :]
        in_plane = np.abs(np.einsum("ctj,tj->ct", tvec, normals)) < 1e-9
        graze = (window & ~strict) | (near_parallel[None, :] & in_plane)
        crossings[lo:lo + 2048] = strict.sum(axis=1)
        degenerate[lo:lo + 2048] = graze.any(axis=1)
    return crossings, degenerate


def _point_triangle_distances(points: np.ndarray, v0, e1, e2) -> np.ndarray:
    """Min distance from each point to any triangle.

    Vectorized closest-point-on-triangle region walk (Ericson): classify
    each point against the triangle's vertex/edge/face Voronoi regions and
    clamp the barycentric coordinates accordingly.
    """
    a = np.einsum("tj,tj->t", e1, e1)[None, :]
    b = np.einsum("tj,tj->t", e1, e2)[None, :]
    c = np.einsum("tj,tj->t", e2, e2)[None, :]
    best = np.full(len(points), np.inf)
    for lo in range(0, len(points), 512):
        p = points[lo:lo + 512]
        ap = p[:, None, :] - v0[None, :, :]
        d1 = np.einsum("ptj,tj->pt", ap, e1)
        d2 = np.einsum("ptj,tj->pt", ap, e2)
        bp = ap - e1[None, :, :]
        d3 = np.einsum("ptj,tj->pt", bp, e1)
        d4 = np.einsum("ptj,tj->pt", bp, e2)
        cp = ap - e2[None, :, :]
        d5 = np.einsum("ptj,tj->pt", cp, e1)
        d6 = np.einsum("ptj,tj->pt", cp, e2)

        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2

        def safe_div(num, den):
            return num / np.where(np.abs(den) < 1e-300, 1.0, den)

        # barycentric (v, w) for closest = v0 + v*e1 + w*e2, decided
        # region by region; later np.where writes do not overwrite earlier
        # (more specific) regions because the masks are applied in order.
        v = np.zeros_like(d1)
        w = np.zeros_like(d1)
        denom = va + vb + vc
        inside = np.ones_like(d1, dtype=bool)

        def assign(mask, vv, ww):
            nonlocal v, w, inside
            mask = mask & inside
            v = np.where(mask, vv, v)
            w = np.where(mask, ww, w)
            inside = inside & ~mask

        assign((d1 <= 0) & (d2 <= 0), 0.0, 0.0)                      # vertex A
        assign((d3 >= 0) & (d4 <= d3), 1.0, 0.0)                     # vertex B
        assign((d6 >= 0) & (d5 <= d6), 0.0, 1.0)                     # vertex C
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0),
               np.clip(safe_div(d1, d1 - d3), 0.0, 1.0), 0.0)        # edge AB
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0),
               0.0, np.clip(safe_div(d2, d2 - d6), 0.0, 1.0))        # edge AC
        t_bc = np.clip(safe_div(d4 - d3, (d4 - d3) + (d5 - d6)), 0.0, 1.0)
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
               1.0 - t_bc, t_bc)                                     # edge BC
        v = np.where(inside, safe_div(vb, denom), v)                 # face interior
        w = np.where(inside, safe_div(vc, denom), w)

        closest = v0[None, :, :] + v[..., None] * e1[None, :, :] + w[..., None] * e2[None, :, :]
        dvec = closest - p[:, None, :]
        dist = np.sqrt(np.einsum("ptj,ptj->pt", dvec, dvec))
        best[lo:lo + 512] = dist.min(axis=1)
    return best


def points_in_collision(env: EnvironmentMesh, points: np.ndarray,
                        clearance: float = 0.0) -> np.ndarray:
    """Vectorized inside-or-within-clearance test for many points."""
    if not env.watertight:
        raise OpenMeshError("inside tests need a watertight mesh")
    if clearance < 0:
        raise InvalidInputError("clearance must be >= 0")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    hit = _ray_parity(env, points)
    todo = ~hit
    if todo.any():
        v0 = env.vertices[env.triangles[:, 0]]
        e1 = env.vertices[env.triangles[:, 1]] - v0
        e2 = env.vertices[env.triangles[:, 2]] - v0
        dist = _point_triangle_distances(points[todo], v0, e1, e2)
        hit[todo] = dist <= clearance
    return hit


def point_in_collision(env: EnvironmentMesh, p: np.ndarray, clearance: float = 0.0) -> bool:
    """True iff ``p`` is inside the mesh or within ``clearance`` of it."""
    return bool(points_in_collision(env, np.asarray(p).reshape(1, 3), clearance)[0])


def mc_collision_estimate(g: Gmm3, env: EnvironmentMesh, samples: int,
                          seed: int) -> tuple[float, float]:
    """Monte-Carlo collision probability with its binomial standard error."""
    if samples < 1000:
        raise InvalidInputError("need at least 1000 samples for a usable estimate")
    pts = gmm_sample(g, samples, seed)
    hits = points_in_collision(env, pts, 0.0)
    p_hat = float(hits.mean())
    stderr = float(np.sqrt(p_hat * (1.0 - p_hat) / samples))
    return p_hat, stderr


# ---------------------------------------------------------------------------
# OBJ and scene files.
# ---------------------------------------------------------------------------

def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse the OBJ subset: 'v x y z' and 'f i j k' (1-based) lines."""
    verts, tris = [], []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("utf-8").strip()
            at = offset
            offset += len(raw)
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if fields[0] == "v":
                if len(fields) != 4:
                    raise ParseError("vertex line needs 3 coordinates", at)
                try:
                    verts.append([float(v) for v in fields[1:]])
                except ValueError:
                    raise ParseError("malformed vertex coordinate", at) from None
            elif fields[0] == "f":
                if len(fields) != 4:
                    raise ParseError("face line needs exactly 3 indices", at)
                try:
                    tris.append([int(v) - 1 for v in fields[1:]])
                except ValueError:
                    raise ParseError("malformed face index", at) from None
            else:
                raise ParseError(f"unsupported OBJ directive {fields[0]!r}", at)
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=int).reshape(-1, 3)


def write_obj(path, vertices, triangles) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=float):
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in np.asarray(triangles, dtype=int):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


@dataclass
class Scene:
    mesh: EnvironmentMesh
    start: np.ndarray | None = None
    goal: np.ndarray | None = None


def load_scene(path, densify_edge: float = DENSIFY_EDGE_DEFAULT) -> Scene:
    """Read a scene file: mesh paths with optional transforms, start, goal.

    Recognized lines: ``mesh <relative-obj-path>``, ``transform <12 reals>``
    (row-major 3x4 applied to the mesh named just above), ``start <d...>``
    and ``goal <d...>``. ``#`` starts a comment.
    """
    path = Path(path)
    meshes = []
    start = goal = None
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("utf-8").strip()
            at = offset
            offset += len(raw)
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if fields[0] == "mesh":
                if len(fields) != 2:
                    raise ParseError("mesh line needs one path", at)
                verts, tris = load_obj(path.parent / fields[1])
                meshes.append(EnvironmentMesh(verts, tris, densify_edge))
            elif fields[0] == "transform":
                if not meshes:
                    raise ParseError("transform line before any mesh", at)
                if len(fields) != 13:
                    raise ParseError("transform needs 12 reals (row-major 3x4)", at)
                try:
                    mat = np.array([float(v) for v in fields[1:]]).reshape(3, 4)
                except ValueError:
                    raise ParseError("malformed transform entry", at) from None
                meshes[-1] = meshes[-1].transformed(mat)
            elif fields[0] in ("start", "goal"):
                try:
                    vec = np.array([float(v) for v in fields[1:]])
                except ValueError:
                    raise ParseError(f"malformed {fields[0]} line", at) from None
                if fields[0] == "start":
                    start = vec
                else:
                    goal = vec
            else:
                raise ParseError(f"unknown scene directive {fields[0]!r}", at)
    if not meshes:
        raise ParseError("scene defines no mesh", offset)
    return Scene(mesh=merge_meshes(meshes), start=start, goal=goal)
