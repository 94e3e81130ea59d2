"""Diffuse room geometry and global light transport.

The room is a set of flat quad patches plus convex blockers.  Light transport
between patches uses form factors estimated by cosine-weighted hemisphere ray
shooting, and radiosity is accumulated as a truncated Neumann series so the
whole simulator stays linear in its emission inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .config import ConfigError, SceneConfig

RAY_EPS = 1e-9

# Linearised sRGB values of the 24 ColorChecker patches (row-major, 6 x 4).
_CHART_SRGB8 = np.array([
    (115, 82, 68), (194, 150, 130), (98, 122, 157), (87, 108, 67), (133, 128, 177), (103, 189, 170),
    (214, 126, 44), (80, 91, 166), (193, 90, 99), (94, 60, 108), (157, 188, 64), (224, 163, 46),
    (56, 61, 150), (70, 148, 73), (175, 54, 60), (231, 199, 31), (187, 86, 149), (8, 133, 161),
    (243, 243, 242), (200, 200, 200), (160, 160, 160), (122, 122, 121), (85, 85, 85), (52, 52, 52),
], dtype=float) / 255.0


def srgb_to_linear(v):
    v = np.asarray(v, dtype=float)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


CHART_REFLECTANCE = srgb_to_linear(_CHART_SRGB8)


def chart_reflectances(k: int) -> np.ndarray:
    """Reflectances for a ``k``-patch chart, cycling through the 24-patch reference set."""
    return CHART_REFLECTANCE[np.arange(k) % len(CHART_REFLECTANCE)]


@dataclass(frozen=True, eq=False)
class SurfacePatch:
    """One flat quad ``corner + a*edge_u + b*edge_v`` with ``a, b`` in [0, 1]."""

    id: int
    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    reflectance: tuple[float, float, float]
    tags: frozenset[str] = frozenset()
    group: str = ""
    grid: tuple[int, int] = (0, 0)  # (row, col) inside its group
    chart: int = -1

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    @property
    def centroid(self) -> np.ndarray:
        return self.corner + 0.5 * (self.edge_u + self.edge_v)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by centre and half extents."""

    center: np.ndarray
    half_size: np.ndarray

    @property
    def lo(self):
        return np.asarray(self.center) - self.half_size

    @property
    def hi(self):
        return np.asarray(self.center) + self.half_size


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """A planar rectangle split into ``nu x nv`` patches with ids ``start + j*nu + i``."""

    start: int
    nu: int
    nv: int
    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray


@dataclass(frozen=True, eq=False)
class SceneGraph:
    patches: tuple[SurfacePatch, ...]
    occluders: tuple = ()
    bounds: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.zeros(3), np.ones(3)))
    grids: tuple[PatchGrid, ...] | None = None

    def __post_init__(self):
        for i, p in enumerate(self.patches):
            if p.id != i:
                raise ValueError("patch ids must be dense and ordered")
            if p.area <= 0:
                raise ValueError(f"patch {i} has zero area")
        if self.grids is None:
            grids = tuple(PatchGrid(p.id, 1, 1, np.asarray(p.corner, dtype=float),
                                    np.asarray(p.edge_u, dtype=float),
                                    np.asarray(p.edge_v, dtype=float)) for p in self.patches)
            object.__setattr__(self, "grids", grids)
        covered = sum(g.nu * g.nv for g in self.grids)
        if covered != len(self.patches):
            raise ValueError("patch grids must cover every patch exactly once")

    def __len__(self):
        return len(self.patches)

    # packed arrays used by the vectorised ray caster
    @cached_property
    def corners(self) -> np.ndarray:
        return np.array([p.corner for p in self.patches], dtype=float).reshape(-1, 3)

    @cached_property
    def edges_u(self) -> np.ndarray:
        return np.array([p.edge_u for p in self.patches], dtype=float).reshape(-1, 3)

    @cached_property
    def edges_v(self) -> np.ndarray:
        return np.array([p.edge_v for p in self.patches], dtype=float).reshape(-1, 3)

    @cached_property
    def normals(self) -> np.ndarray:
        n = np.cross(self.edges_u, self.edges_v)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def areas(self) -> np.ndarray:
        return np.linalg.norm(np.cross(self.edges_u, self.edges_v), axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners + 0.5 * (self.edges_u + self.edges_v)

    @cached_property
    def reflectance(self) -> np.ndarray:
        return np.array([p.reflectance for p in self.patches], dtype=float).reshape(-1, 3)

    @cached_property
    def _grid_arrays(self):
        g = self.grids
        C = np.array([x.corner for x in g], dtype=float).reshape(-1, 3)
        U = np.array([x.edge_u for x in g], dtype=float).reshape(-1, 3)
        V = np.array([x.edge_v for x in g], dtype=float).reshape(-1, 3)
        N = np.cross(U, V)
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        du, dv = _dual_vectors(U, V)
        start = np.array([x.start for x in g], dtype=int)
        nu = np.array([x.nu for x in g], dtype=int)
        nv = np.array([x.nv for x in g], dtype=int)
        return C, N, du, dv, start, nu, nv

    @cached_property
    def _duals(self) -> tuple[np.ndarray, np.ndarray]:
        return _dual_vectors(self.edges_u, self.edges_v)
    def tagged(self, tag: str) -> np.ndarray:
        return np.array([p.id for p in self.patches if tag in p.tags], dtype=int)

    def group(self, name: str) -> np.ndarray:
        return np.array([p.id for p in self.patches if p.group == name], dtype=int)

    @cached_property
    def chart_ids(self) -> np.ndarray:
        return np.array([p.chart for p in self.patches], dtype=int)

    @property
    def n_charts(self) -> int:
        return int(self.chart_ids.max()) + 1 if len(self.patches) else 0

    def with_occluders(self, occluders: Sequence) -> "SceneGraph":
        return SceneGraph(self.patches, tuple(occluders), self.bounds, self.grids)


def _dual_vectors(U, V):
    """In-plane vectors with du.U = 1, du.V = 0, dv.V = 1, dv.U = 0."""
    uu = np.einsum("ij,ij->i", U, U)
    uv = np.einsum("ij,ij->i", U, V)
    vv = np.einsum("ij,ij->i", V, V)
    det = uu * vv - uv * uv
    du = (vv[:, None] * U - uv[:, None] * V) / det[:, None]
    dv = (uu[:, None] * V - uv[:, None] * U) / det[:, None]
    return du, dv


class RayHits(NamedTuple):
    patch: np.ndarray     # first patch hit, -1 when none
    t: np.ndarray         # ray parameter of the first hit (inf when none)
    front: np.ndarray     # True when the patch was hit on its lit side
    blocked: np.ndarray   # True when an occluder is hit first


def _occluder_t(occ, O, D, tmin):
    """Ray parameter of the first hit with a convex blocker (inf if none)."""
    if isinstance(occ, Sphere):
        oc = O - occ.center
        b = np.einsum("ij,ij->i", oc, D)
        a = np.einsum("ij,ij->i", D, D)
        c = np.einsum("ij,ij->i", oc, oc) - occ.radius ** 2
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > tmin, t0, np.where(t1 > tmin, t1, np.inf))
        return np.where(ok, t, np.inf)
    lo, hi = occ.lo, occ.hi
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / D
        t1 = (lo - O) * inv
        t2 = (hi - O) * inv
    # parallel rays: inside the slab -> (-inf, inf), outside -> empty
    par = D == 0
    inside = (O >= lo) & (O <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tnear = np.max(np.minimum(t1, t2), axis=1)
    tfar = np.min(np.maximum(t1, t2), axis=1)
    hit = (tnear <= tfar) & (tfar > tmin)
    t = np.where(tnear > tmin, tnear, tfar)
    return np.where(hit, t, np.inf)


def cast_rays(scene: SceneGraph, origins, dirs, *, skip=None, t_max=None,
              chunk_elems: int = 1_500_000) -> RayHits:
    """First intersection of each ray with the patches and blockers of ``scene``.

    Patches block light from both sides; ``front`` tells whether the hit was on
    the side the patch normal faces.  ``skip`` (per ray patch index, -1 for
    none) excludes the emitting patch; ``t_max`` limits the search per ray.
    """
    O = np.asarray(origins, dtype=float).reshape(-1, 3)
    D = np.asarray(dirs, dtype=float).reshape(-1, 3)
    R = len(O)
    skip = np.full(R, -1) if skip is None else np.broadcast_to(np.asarray(skip), (R,))
    tmax = np.full(R, np.inf) if t_max is None else np.broadcast_to(
        np.asarray(t_max, dtype=float), (R,))

    patch = np.full(R, -1, dtype=int)
    t_hit = np.full(R, np.inf)
    nd_hit = np.zeros(R)

    if len(scene):
        C, N, du, dv, start, nu, nv = scene._grid_arrays
        G = len(C)
        nC = np.einsum("ij,ij->i", N, C)
        cU = np.einsum("ij,ij->i", C, du)
        cV = np.einsum("ij,ij->i", C, dv)
        step = max(1, chunk_elems // G)
        for s in range(0, R, step):
            o, d = O[s:s + step], D[s:s + step]
            nd = d @ N.T
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (nC - o @ N.T) / nd
                a = o @ du.T - cU + t * (d @ du.T)
                b = o @ dv.T - cV + t * (d @ dv.T)
            ok = ((np.abs(nd) > 1e-15) & (t > RAY_EPS) & (t < tmax[s:s + step, None])
                  & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1))
            ii = np.minimum((np.where(ok, a, 0) * nu).astype(int), nu - 1)
            jj = np.minimum((np.where(ok, b, 0) * nv).astype(int), nv - 1)
            pid = start + jj * nu + ii
            ok &= pid != skip[s:s + step, None]
            t = np.where(ok, t, np.inf)
            idx = np.argmin(t, axis=1)
            rows = np.arange(len(o))
            best = t[rows, idx]
            found = np.isfinite(best)
            patch[s:s + step] = np.where(found, pid[rows, idx], -1)
            t_hit[s:s + step] = best
            nd_hit[s:s + step] = nd[rows, idx]

    blocked = np.zeros(R, dtype=bool)
    for occ in scene.occluders:
        t_occ = _occluder_t(occ, O, D, RAY_EPS)
        nearer = (t_occ < t_hit) & (t_occ < tmax)
        blocked |= nearer
        t_hit = np.where(nearer, t_occ, t_hit)
    patch = np.where(blocked, -1, patch)
    front = (patch >= 0) & (nd_hit < 0)
    return RayHits(patch, t_hit, front, blocked)


def segments_visible(scene: SceneGraph, a, b, skip_a=None, skip_b=None) -> np.ndarray:
    """True where the open segment a->b crosses no patch and no blocker."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    d = b - a
    hits = cast_rays(scene, a, d, skip=skip_a, t_max=np.full(len(a), 1.0 - 1e-7))
    vis = (hits.patch < 0) & ~hits.blocked
    if skip_b is not None:
        # the far endpoint's own patch may be reported just before t=1
        sb = np.broadcast_to(np.asarray(skip_b), (len(a),))
        vis |= (hits.patch == sb) & ~hits.blocked & (hits.t > 1.0 - 1e-6)
    return vis


# -- scene construction -------------------------------------------------------


def _quad_grid(start, corner, U, V, nu, nv, inward, **kw):
    """Split a rectangle into nu x nv patches whose normals face ``inward``."""
    corner, U, V = (np.asarray(x, dtype=float) for x in (corner, U, V))
    if inward is not None and np.dot(np.cross(U, V), inward) < 0:
        corner, V = corner + V, -V
    out = []
    for j in range(nv):
        for i in range(nu):
            c = corner + U * (i / nu) + V * (j / nv)
            out.append(dict(corner=c, edge_u=U / nu, edge_v=V / nv, grid=(j, i), **kw))
    return out, PatchGrid(start, nu, nv, corner, U, V)


def _divisions(length: float, size: float) -> int:
    return max(1, int(round(length / size)))


def _chart_frame(pl, config):
    n = np.asarray(pl.normal, dtype=float)
    n = n / np.linalg.norm(n)
    up = np.asarray(pl.up, dtype=float)
    up = up - np.dot(up, n) * n
    if np.linalg.norm(up) < 1e-9:
        raise ConfigError("charts.placement.up", "up vector parallel to the chart normal")
    up /= np.linalg.norm(up)
    right = np.cross(up, n)
    cols, rows = config.charts.grid
    s = config.charts.patch_size
    center = np.asarray(pl.center, dtype=float) + n * config.charts.offset
    return center, n, up, right, cols * s, rows * s


def build_scene(config: SceneConfig) -> SceneGraph:
    """Build the closed room, extra surfaces, target and chart patches from ``config``."""
    W, Dp, H = config.room_size
    if min(W, Dp, H) <= 0:
        raise ConfigError("room.size", "room dimensions must be > 0")
    if config.patch_size <= 0:
        raise ConfigError("room.patch_size", "must be > 0")
    lo, hi = np.zeros(3), np.array([W, Dp, H], dtype=float)
    size = config.patch_size
    nx, ny, nz = _divisions(W, size), _divisions(Dp, size), _divisions(H, size)
    walls, floor, ceil = (config.wall_reflectance, config.floor_reflectance,
                          config.ceiling_reflectance)
    ex, ey, ez = np.array([W, 0, 0.0]), np.array([0, Dp, 0.0]), np.array([0, 0, H * 1.0])
    specs, grids = [], []

    def add_grid(*args, **kw):
        out, grid = _quad_grid(len(specs), *args, **kw)
        specs.extend(out)
        grids.append(grid)

    faces = [
        ("floor", (0, 0, 0), ex, ey, nx, ny, (0, 0, 1), floor, {"floor"}),
        ("ceiling", (0, 0, H), ex, ey, nx, ny, (0, 0, -1), ceil, {"ceiling"}),
        ("left", (0, 0, 0), ey, ez, ny, nz, (1, 0, 0), walls, {"wall"}),
        ("right", (W, 0, 0), ey, ez, ny, nz, (-1, 0, 0), walls, {"wall"}),
        ("back", (0, 0, 0), ex, ez, nx, nz, (0, 1, 0), walls, {"wall"}),
        ("front", (0, Dp, 0), ex, ez, nx, nz, (0, -1, 0), walls, {"wall"}),
    ]
    for name, c, U, V, nu, nv, inward, rho, tags in faces:
        add_grid(c, U, V, nu, nv, np.array(inward, dtype=float),
                            reflectance=tuple(rho), tags=frozenset(tags | {name}), group=name)

    for s in config.surfaces:
        U, V = np.asarray(s.edge_u), np.asarray(s.edge_v)
        if np.linalg.norm(np.cross(U, V)) <= 0:
            raise ConfigError(f"surfaces.{s.name}", "degenerate (zero-area) surface")
        add_grid(s.corner, U, V, s.divisions[0], s.divisions[1], None,
                            reflectance=tuple(s.reflectance),
                            tags=frozenset(set(s.tags) | {s.name}), group=s.name)

    if config.target is not None:
        t = config.target
        c = np.asarray(t.center, dtype=float)
        h = t.size / 2
        if np.any(c - [h, h, 0] < lo - 1e-9) or np.any(c + [h, h, t.size] > hi + 1e-9):
            raise ConfigError("target.center", "target lies outside the room bounds")
        rho = tuple(t.reflectance)
        top = c + [-h, -h, t.size + 1e-4]
        add_grid(top, [t.size, 0, 0], [0, t.size, 0], t.top_divisions,
                            t.top_divisions, np.array([0, 0, 1.0]), reflectance=rho,
                            tags=frozenset({"target", "target-top"}), group="target-top")
        k = t.side_divisions
        sides = [
            ("target-front", c + [-h, -h, 0], [t.size, 0, 0], (0, -1, 0)),
            ("target-back", c + [-h, h, 0], [t.size, 0, 0], (0, 1, 0)),
            ("target-left", c + [-h, -h, 0], [0, t.size, 0], (-1, 0, 0)),
            ("target-right", c + [h, -h, 0], [0, t.size, 0], (1, 0, 0)),
        ]
        for name, corner, U, inward in sides:
            inward = np.array(inward, dtype=float)
            add_grid(np.asarray(corner) + inward * 1e-4, U, [0, 0, t.size], k, k,
                                inward, reflectance=rho, tags=frozenset({"target"}),
                                group=name)

    # charts: rows x cols of small patches floating just above their surface
    frames = []
    cols, rows = config.charts.grid
    refl = chart_reflectances(cols * rows)
    for m, pl in enumerate(config.charts.placements):
        center, n, up, right, w, hgt = _chart_frame(pl, config)
        if np.any(center < lo) or np.any(center > hi):
            raise ConfigError(f"charts.placement[{m}].center", "chart lies outside the room")
        for prev_m, (pc, pn, pu, pr, pw, ph) in enumerate(frames):
            if np.allclose(pn, n) and abs(np.dot(center - pc, n)) < 1e-6:
                dx = abs(np.dot(center - pc, pr))
                dy = abs(np.dot(center - pc, pu))
                if dx < (w + pw) / 2 - 1e-9 and dy < (hgt + ph) / 2 - 1e-9:
                    raise ConfigError(f"charts.placement[{m}]",
                                      f"overlaps chart {prev_m}")
        frames.append((center, n, up, right, w, hgt))
        # grid rows count up from the bottom edge; chart rows count down from the top
        first = len(specs)
        add_grid(center - right * w / 2 - up * hgt / 2, right * w, up * hgt, cols, rows, n,
                 tags=frozenset({"chart-patch"}), group=f"chart{m}", chart=m)
        for d in specs[first:]:
            j, i = d["grid"]
            r = rows - 1 - j
            d["grid"] = (r, i)
            d["reflectance"] = tuple(refl[r * cols + i])

    patches = tuple(SurfacePatch(id=i, **s) for i, s in enumerate(specs))
    occluders = []
    for o in config.occluders:
        if o.kind == "sphere":
            occluders.append(Sphere(np.asarray(o.center, dtype=float), o.radius))
        else:
            occluders.append(Box(np.asarray(o.center, dtype=float),
                                 np.asarray(o.half_size, dtype=float)))
    return SceneGraph(patches, tuple(occluders), (lo, hi), tuple(grids))


# -- transport ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FormFactorMatrix:
    """``entries[j, k]``: fraction of diffuse power leaving patch j that reaches patch k."""

    entries: np.ndarray
    samples: int = 0
    seed: int = 0


def _tangent_frame(normals, edges_u):
    t = edges_u / np.linalg.norm(edges_u, axis=1, keepdims=True)
    b = np.cross(normals, t)
    return t, b


def compute_form_factors(scene: SceneGraph, samples: int = 128, seed: int = 0,
                         batch_patches: int = 64) -> FormFactorMatrix:
    """Monte Carlo form factors with blocker visibility.

    Each patch shoots ``samples`` rays from uniformly distributed points in
    cosine-weighted directions; the fraction landing on the front of patch k
    estimates F[j, k].  Deterministic for a given ``seed``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    P = len(scene)
    F = np.zeros((P, P))
    if P == 0:
        return FormFactorMatrix(F, samples, seed)
    rng = np.random.default_rng(seed)
    u = rng.random((P, samples, 4))
    T, B = _tangent_frame(scene.normals, scene.edges_u)
    for s in range(0, P, batch_patches):
        ids = np.arange(s, min(P, s + batch_patches))
        uu = u[ids]
        pts = (scene.corners[ids, None, :]
               + uu[..., 0:1] * scene.edges_u[ids, None, :]
               + uu[..., 1:2] * scene.edges_v[ids, None, :])
        r = np.sqrt(uu[..., 2:3])
        phi = 2 * np.pi * uu[..., 3:4]
        cz = np.sqrt(np.clip(1.0 - uu[..., 2:3], 0.0, 1.0))
        dirs = (r * np.cos(phi) * T[ids, None, :] + r * np.sin(phi) * B[ids, None, :]
                + cz * scene.normals[ids, None, :])
        src = np.repeat(ids, samples)
        hits = cast_rays(scene, pts.reshape(-1, 3), dirs.reshape(-1, 3), skip=src)
        ok = hits.front
        np.add.at(F, (src[ok], hits.patch[ok]), 1.0 / samples)
    return FormFactorMatrix(F, samples, seed)


@dataclass(frozen=True, eq=False)
class RadiositySolution:
    outgoing: np.ndarray  # (P, 3)
    bounces_used: int


def solve_radiosity(scene: SceneGraph, F: FormFactorMatrix | np.ndarray, direct,
                    bounces: int = 8) -> RadiositySolution:
    """Sum the Neumann series ``sum_b (rho F)^b (rho direct)`` up to ``bounces`` terms."""
    if bounces < 0:
        raise ValueError("bounces must be >= 0")
    Fm = F.entries if isinstance(F, FormFactorMatrix) else np.asarray(F)
    rho = scene.reflectance
    E = np.asarray(direct, dtype=float)
    if np.any(E < 0):
        raise ValueError("direct irradiance must be non-negative")
    term = rho * E
    out = term.copy()
    for _ in range(bounces):
        term = rho * (Fm @ term)
        out += term
    return RadiositySolution(out, bounces)


def radiosity_dense(scene: SceneGraph, F, direct) -> np.ndarray:
    """Closed-form ``(I - rho F)^-1 rho direct`` per channel, for checks on small scenes."""
    Fm = F.entries if isinstance(F, FormFactorMatrix) else np.asarray(F)
    rho = scene.reflectance
    E = np.asarray(direct, dtype=float)
    out = np.empty_like(E)
    eye = np.eye(len(Fm))
    for c in range(3):
        out[:, c] = np.linalg.solve(eye - rho[:, c, None] * Fm, rho[:, c] * E[:, c])
    return out
