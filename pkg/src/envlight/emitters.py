"""Light sources: pinhole projectors, the large-aperture projector and LED panels.

A projector pixel carries a fixed share of the projector's flux, split over
a stratified grid of rays across the pixel's cell.  Whatever patch a ray
lands on receives its share spread over the patch area, so the
inverse-square and cosine falloff emerge from the ray density on the
surface.  The large-aperture projector starts each ray from a different
sub-aperture of its lens and aims it at the point the lens focuses that part
of the pixel on; blockers between lens and surface then cut only part of the
beam, which is what produces soft shadows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .config import LedSpec, ProjectorSpec
from .scene import SceneGraph, cast_rays, segments_visible


@dataclass(frozen=True)
class ApertureModel:
    lens_side: float
    subaperture_grid: tuple[int, int] = (8, 8)  # rows, cols
    focus_distance: float = 2.0

    def __post_init__(self):
        if self.lens_side <= 0:
            raise ValueError("lens_side must be > 0")
        if min(self.subaperture_grid) < 1:
            raise ValueError("sub-aperture grid dimensions must be >= 1")

    def offsets(self) -> np.ndarray:
        """(S, 2) lens-plane offsets (right, up) of the sub-aperture centres."""
        rows, cols = self.subaperture_grid
        u = ((np.arange(cols) + 0.5) / cols - 0.5) * self.lens_side
        v = ((np.arange(rows) + 0.5) / rows - 0.5) * self.lens_side
        vv, uu = np.meshgrid(v, u, indexing="ij")
        return np.stack([uu.ravel(), vv.ravel()], axis=1)


@dataclass(frozen=True, eq=False)
class ProjectorModel:
    id: str
    position: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray
    image_size: tuple[int, int]  # (width, height)
    half_angles: tuple[float, float]  # radians
    black_level: np.ndarray = field(default_factory=lambda: np.full(3, 0.02))
    power: float = 1.0
    kind: str = "point"
    aperture: ApertureModel | None = None
    role: str = "luminaire"
    pixel_samples: int = 1  # rays per pixel along each image axis

    def __post_init__(self):
        if self.pixel_samples < 1:
            raise ValueError("pixel_samples must be >= 1")
        if np.any(np.asarray(self.black_level) < 0):
            raise ValueError("black_level must be >= 0")
        if not all(0 < a < np.pi / 2 for a in self.half_angles):
            raise ValueError("frustum half-angles must lie in (0, pi/2)")
        if self.kind not in ("point", "large-aperture"):
            raise ValueError(f"unknown projector kind {self.kind!r}")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def pixel_flux(self) -> float:
        return self.power / self.n_pixels

    def image_plane(self, fx: float = 0.5, fy: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """Image-plane coordinates (sx, sy) of a point inside every pixel, row-major.

        ``(fx, fy)`` is the position within the pixel cell, (0.5, 0.5) being
        its centre; row 0 is the top of the image.
        """
        w, h = self.image_size
        tx, ty = np.tan(self.half_angles)
        sx = ((np.arange(w) + fx) / w * 2 - 1) * tx
        sy = (1 - (np.arange(h) + fy) / h * 2) * ty
        yy, xx = np.meshgrid(sy, sx, indexing="ij")
        return xx.ravel(), yy.ravel()

    def pixel_directions(self, fx: float = 0.5, fy: float = 0.5) -> np.ndarray:
        sx, sy = self.image_plane(fx, fy)
        d = self.forward + sx[:, None] * self.right + sy[:, None] * self.up
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def subpixel_offsets(self) -> np.ndarray:
        """(n*n, 2) cell positions of the stratified rays of one pixel."""
        n = self.pixel_samples
        g = (np.arange(n) + 0.5) / n
        fy, fx = np.meshgrid(g, g, indexing="ij")
        return np.stack([fx.ravel(), fy.ravel()], axis=1)

    def ray_layout(self) -> tuple[np.ndarray, np.ndarray]:
        """Sub-aperture offset and sub-pixel position of every ray of a pixel.

        A pixel fires ``max(S, n*n)`` rays.  With several sub-apertures each
        ray gets its own sub-pixel position through a fixed shuffle, so lens
        position and position within the pixel are not correlated.  With a
        single sub-aperture the layout is exactly the pinhole one.
        """
        sub = self.subpixel_offsets()
        lens = np.zeros((1, 2)) if self.aperture is None else self.aperture.offsets()
        S, Q = len(lens), len(sub)
        R = max(S, Q)
        order = np.arange(Q)
        if S > 1:
            order = np.random.default_rng(0).permutation(Q)
        r = np.arange(R)
        return lens[r % S], sub[order[r % Q]]

    def pixel_solid_angles(self) -> np.ndarray:
        sx, sy = self.image_plane()
        w, h = self.image_size
        tx, ty = np.tan(self.half_angles)
        cell = (2 * tx / w) * (2 * ty / h)
        return cell / (1 + sx ** 2 + sy ** 2) ** 1.5

    def with_aperture(self, aperture: ApertureModel | None) -> "ProjectorModel":
        kind = "point" if aperture is None else "large-aperture"
        return ProjectorModel(self.id, self.position, self.forward, self.right, self.up,
                              self.image_size, self.half_angles, self.black_level, self.power,
                              kind, aperture, self.role, self.pixel_samples)


def _frame(forward, up):
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=float)
    u = u - np.dot(u, f) * f
    if np.linalg.norm(u) < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    u /= np.linalg.norm(u)
    r = np.cross(f, u)
    return f, r, u


def make_projector(id: str, position, look_at, *, up=(0, 0, 1), image_size=(64, 48),
                   half_angles_deg=(20.0, 15.0), black_level=(0.02, 0.02, 0.02), power=1.0,
                   aperture: ApertureModel | None = None, role="luminaire",
                   pixel_samples: int = 1) -> ProjectorModel:
    position = np.asarray(position, dtype=float)
    f, r, u = _frame(np.asarray(look_at, dtype=float) - position, up)
    return ProjectorModel(
        id=id, position=position, forward=f, right=r, up=u,
        image_size=tuple(int(v) for v in image_size),
        half_angles=tuple(float(np.radians(a)) for a in half_angles_deg),
        black_level=np.asarray(black_level, dtype=float), power=float(power),
        kind="point" if aperture is None else "large-aperture", aperture=aperture, role=role,
        pixel_samples=int(pixel_samples))


def projector_from_spec(spec: ProjectorSpec) -> ProjectorModel:
    aperture = None
    if spec.aperture is not None:
        rows, cols = spec.aperture.grid
        aperture = ApertureModel(spec.aperture.lens_side, (rows, cols),
                                 spec.aperture.focus_distance)
    return make_projector(spec.id, spec.position, spec.look_at, up=spec.up,
                          image_size=spec.image_size, half_angles_deg=spec.half_angles_deg,
                          black_level=spec.black_level, power=spec.power, aperture=aperture,
                          role=spec.role, pixel_samples=spec.pixel_samples)


# -- footprints and transport --------------------------------------------------


@dataclass(frozen=True, eq=False)
class Footprint:
    """Where each pixel's light lands, plus the linear pixel -> patch transport.

    ``central`` holds the patch lit by each pixel's central ray (-1 for none),
    ``sub`` the patch first struck by each sub-aperture ray on either side
    (-1 for none or a blocker) and ``sub_front`` whether that strike was on
    the lit side.  ``transport[k, pixel]`` is the irradiance a unit drive of
    the pixel puts on patch k.
    """

    projector_id: str
    image_size: tuple[int, int]
    central: np.ndarray           # (h, w)
    sub: np.ndarray               # (h, w, S)
    sub_front: np.ndarray         # (h, w, S)
    transport: sp.csr_matrix      # (P, h*w)
    spot_irradiance: np.ndarray   # (h, w) irradiance at the central hit point per unit drive

    @property
    def n_sub(self) -> int:
        return self.sub.shape[-1]

    def pixel_map(self) -> dict[tuple[int, int], int | None]:
        h, w = self.central.shape
        return {(r, c): (int(self.central[r, c]) if self.central[r, c] >= 0 else None)
                for r in range(h) for c in range(w)}

    def covered_patches(self) -> np.ndarray:
        return np.unique(self.central[self.central >= 0])


def footprint(projector: ProjectorModel, scene: SceneGraph) -> Footprint:
    """Trace every pixel (and every ray of every pixel) of ``projector`` into ``scene``."""
    w, h = projector.image_size
    dirs = projector.pixel_directions()
    npx = len(dirs)
    pos = projector.position
    central = cast_rays(scene, np.broadcast_to(pos, dirs.shape), dirs)
    central_ids = np.where(central.front, central.patch, -1)

    lens, cells = projector.ray_layout()
    R = len(lens)
    ray_dirs = np.stack([projector.pixel_directions(fx, fy) for fx, fy in cells], axis=1)
    origins = (pos[None, :] + lens[:, 0:1] * projector.right
               + lens[:, 1:2] * projector.up)
    origins = np.broadcast_to(origins[None], (npx, R, 3))
    if projector.kind == "large-aperture" and np.any(lens != 0):
        # the lens focuses each ray onto the room surface seen from its centre;
        # blockers never define the focal surface
        bare = scene.with_occluders(())
        flat = ray_dirs.reshape(-1, 3)
        focus_hits = cast_rays(bare, np.broadcast_to(pos, flat.shape), flat)
        tf = np.where(np.isfinite(focus_hits.t), focus_hits.t,
                      projector.aperture.focus_distance)
        focus = (pos + tf[:, None] * flat).reshape(npx, R, 3)
        zero = np.all(lens == 0, axis=1)
        ray_dirs = np.where(zero[None, :, None], ray_dirs, focus - origins)
    hits = cast_rays(scene, origins.reshape(-1, 3), ray_dirs.reshape(-1, 3))
    sub_patch = hits.patch.reshape(npx, R)
    sub_front = hits.front.reshape(npx, R)

    areas = scene.areas
    ok = sub_front & (sub_patch >= 0)
    pix_idx = np.broadcast_to(np.arange(npx)[:, None], (npx, R))[ok]
    patch_idx = sub_patch[ok]
    vals = projector.pixel_flux / R / areas[patch_idx]
    T = sp.coo_matrix((vals, (patch_idx, pix_idx)), shape=(len(scene), npx)).tocsr()
    T.sum_duplicates()

    # point irradiance at the central landing spot (graycode capture)
    spot = np.zeros(npx)
    lit = central_ids >= 0
    if lit.any():
        n = scene.normals[central_ids[lit]]
        cos = np.abs(np.einsum("ij,ij->i", n, dirs[lit]))
        intensity = projector.pixel_flux / projector.pixel_solid_angles()[lit]
        spot[lit] = intensity * cos / central.t[lit] ** 2
        spot[lit] *= ok[lit].sum(axis=1) / R

    return Footprint(projector.id, (w, h), central_ids.reshape(h, w),
                     sub_patch.reshape(h, w, R), sub_front.reshape(h, w, R), T,
                     spot.reshape(h, w))


def _drive(projector: ProjectorModel, image) -> np.ndarray:
    """Per-pixel emission in units of full white: black floor plus linear input."""
    img = np.asarray(image, dtype=float).reshape(-1, 3)
    b = projector.black_level
    return b + (1.0 - b) * img


def emit(projector: ProjectorModel, fp: Footprint, image) -> np.ndarray:
    """Direct irradiance (P, 3) from a full display image of shape (h, w, 3) or (h, w)."""
    img = np.asarray(image, dtype=float)
    w, h = projector.image_size
    if img.shape[:2] != (h, w):
        raise ValueError(f"image shape {img.shape[:2]} does not match projector {(h, w)}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.asarray(fp.transport @ _drive(projector, img))


def emit_aperture(projector: ProjectorModel, fp: Footprint, display_image) -> np.ndarray:
    """Direct irradiance of a (possibly large-aperture) projector showing ``display_image``."""
    return emit(projector, fp, display_image)


def emit_node(node, projector: ProjectorModel, fp: Footprint, x=None,
              pixel_weights=None) -> np.ndarray:
    """Direct irradiance from the pixels of one node only, driven at ``x`` (RGB)."""
    x = np.broadcast_to(np.asarray(node.input if x is None else x, dtype=float), (3,))
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("node input must lie in [0, 1]")
    pix = np.asarray(node.pixels)
    wts = np.ones(len(pix)) if pixel_weights is None else np.asarray(pixel_weights)[pix]
    if getattr(node, "weights", None) is not None:
        wts = wts * np.asarray(node.weights)
    b = projector.black_level
    drive = b + (1.0 - b) * (wts[:, None] * x[None, :])
    return np.asarray(fp.transport[:, pix] @ drive)


# -- LED panels ---------------------------------------------------------------

# Kim et al. cubic fits of the Planckian locus in CIE 1931 xy.
def planckian_xy(T: float) -> tuple[float, float]:
    t = float(T)
    if t < 4000:
        x = -0.2661239e9 / t ** 3 - 0.2343589e6 / t ** 2 + 0.8776956e3 / t + 0.179910
    else:
        x = -3.0258469e9 / t ** 3 + 2.1070379e6 / t ** 2 + 0.2226347e3 / t + 0.240390
    if t < 2222:
        y = -1.1063814 * x ** 3 - 1.34811020 * x ** 2 + 2.18555832 * x - 0.20219683
    elif t < 4000:
        y = -0.9549476 * x ** 3 - 1.37418593 * x ** 2 + 2.09137015 * x - 0.16748867
    else:
        y = 3.0817580 * x ** 3 - 5.87338670 * x ** 2 + 3.75112997 * x - 0.37001483
    return x, y


_XYZ_TO_LINEAR_SRGB = np.array([
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
])


def _xy_to_rgb(x: float, y: float) -> np.ndarray:
    xyz = np.array([x / y, 1.0, (1 - x - y) / y])
    return np.clip(_XYZ_TO_LINEAR_SRGB @ xyz, 0.0, None)


def planckian_tint(temperature: float) -> np.ndarray:
    """Linear RGB tint of a blackbody at ``temperature`` K, equal to (1, 1, 1) at 6500 K."""
    if not 1000 <= temperature <= 20000:
        raise ValueError("color temperature must lie in [1000, 20000] K")
    ref = _xy_to_rgb(*planckian_xy(6500.0))
    return _xy_to_rgb(*planckian_xy(temperature)) / ref


@dataclass(frozen=True, eq=False)
class LedLuminaire:
    name: str
    position: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    emitter_size: tuple[float, float] = (0.3, 0.3)
    intensity: float = 1.0
    color_temperature: float = 5000.0
    samples: int = 4

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("intensity must be >= 0")
        if not 1000 <= self.color_temperature <= 20000:
            raise ValueError("color temperature must lie in [1000, 20000] K")

    @property
    def tint(self) -> np.ndarray:
        return planckian_tint(self.color_temperature)

    def scaled(self, factor: float) -> "LedLuminaire":
        return LedLuminaire(self.name, self.position, self.normal, self.emitter_size,
                            self.intensity * factor, self.color_temperature, self.samples)

    def emitter_points(self) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        t = np.cross(helper, n)
        t /= np.linalg.norm(t)
        b = np.cross(n, t)
        k = self.samples
        g = (np.arange(k) + 0.5) / k - 0.5
        gu, gv = np.meshgrid(g * self.emitter_size[0], g * self.emitter_size[1], indexing="ij")
        return (np.asarray(self.position, dtype=float)
                + gu.reshape(-1, 1) * t + gv.reshape(-1, 1) * b)


def led_from_spec(spec: LedSpec) -> LedLuminaire:
    return LedLuminaire(spec.name, np.asarray(spec.position, dtype=float),
                        np.asarray(spec.normal, dtype=float), tuple(spec.size),
                        spec.intensity, spec.color_temperature, spec.samples)


def led_irradiance(led: LedLuminaire, scene: SceneGraph, patch_samples: int = 3) -> np.ndarray:
    """Direct irradiance (P, 3) from a Lambertian rectangular panel, with visibility.

    The panel's flux ``intensity`` is spread with uniform radiance.  The
    point-to-point kernel is averaged over a regular grid of emitter samples
    and over a ``patch_samples`` x ``patch_samples`` grid of receiver points on
    every patch, so patches straddling a shadow edge get their partial share.
    """
    P = len(scene)
    if led.intensity == 0 or P == 0:
        return np.zeros((P, 3))
    pts = led.emitter_points()
    n_e = np.asarray(led.normal, dtype=float)
    n_e = n_e / np.linalg.norm(n_e)
    g = (np.arange(patch_samples) + 0.5) / patch_samples
    gu, gv = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
    x = (scene.corners[:, None, :] + gu[None, :, None] * scene.edges_u[:, None, :]
         + gv[None, :, None] * scene.edges_v[:, None, :]).reshape(-1, 3)
    owner = np.repeat(np.arange(P), len(gu))
    v = pts[None, :, :] - x[:, None, :]            # receiver -> emitter
    r2 = np.einsum("ijk,ijk->ij", v, v)
    r = np.sqrt(r2)
    cos_k = np.einsum("ijk,ik->ij", v, scene.normals[owner]) / r
    cos_e = -np.einsum("ijk,k->ij", v, n_e) / r
    kern = np.where((cos_k > 0) & (cos_e > 0), cos_k * cos_e / r2, 0.0)
    live = kern > 0
    if live.any():
        ii, jj = np.nonzero(live)
        vis = segments_visible(scene, x[ii], pts[jj], skip_a=owner[ii])
        kern[ii[~vis], jj[~vis]] = 0.0
    E = led.intensity / np.pi * kern.mean(axis=1).reshape(P, -1).mean(axis=1)
    return E[:, None] * led.tint[None, :]


# -- target masking -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MaskResult:
    mask: np.ndarray              # (h, w) 1 = pixel on, 0 = forced off
    darkened: frozenset[int]      # non-target patches that lost >= threshold of their light
    lost: np.ndarray              # (P,) irradiance lost per unit drive, white input


def mask_target_with_margin(projector: ProjectorModel, fp: Footprint, target_patches,
                            threshold: float = 0.05) -> MaskResult:
    """Switch off every pixel with at least one ray that strikes the target (either side).

    Returns the mask, the non-target patches whose direct irradiance from this
    projector drops by at least ``threshold`` of its unmasked value, and the
    irradiance each patch loses under full white.
    """
    target = np.zeros(fp.transport.shape[0], dtype=bool)
    target[np.asarray(list(target_patches), dtype=int)] = True
    h, w = fp.central.shape
    hit_target = np.zeros(fp.sub.shape, dtype=bool)
    valid = fp.sub >= 0
    hit_target[valid] = target[fp.sub[valid]]
    off = hit_target.any(axis=2)
    mask = (~off).astype(float)
    full = np.asarray(fp.transport @ np.ones(h * w))
    kept = np.asarray(fp.transport @ mask.ravel())
    lost = full - kept
    dark = (~target) & (full > 0) & (lost >= threshold * full) & (lost > 0)
    return MaskResult(mask, frozenset(int(k) for k in np.nonzero(dark)[0]), lost)
