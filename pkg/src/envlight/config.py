"""Scene configuration documents.

A scene is described by a TOML document with nested sections (room, surfaces,
occluders, target, charts, projectors, leds, camera, simulation, optimizer,
pm).  ``load_config`` parses and validates it into plain dataclasses; every
validation failure raises :class:`ConfigError` naming the offending field.
The full schema is documented in ``docs/scene_config.md``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid scene configuration; ``field`` is the dotted path of the problem."""

    def __init__(self, field: str, message: str, line: int | None = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}: {message}")


@dataclass(frozen=True)
class SurfaceSpec:
    name: str
    corner: tuple[float, float, float]
    edge_u: tuple[float, float, float]
    edge_v: tuple[float, float, float]
    divisions: tuple[int, int]
    reflectance: tuple[float, float, float]
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class OccluderSpec:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    radius: float = 0.0
    half_size: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TargetSpec:
    center: tuple[float, float, float]  # centre of the cube's bottom face
    size: float = 0.2
    top_divisions: int = 8
    side_divisions: int = 4
    reflectance: tuple[float, float, float] = (0.56, 0.56, 0.56)


@dataclass(frozen=True)
class ChartPlacement:
    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    up: tuple[float, float, float]


@dataclass(frozen=True)
class ChartSpec:
    patch_size: float = 0.04
    grid: tuple[int, int] = (6, 4)  # columns, rows
    offset: float = 0.002
    placements: tuple[ChartPlacement, ...] = ()


@dataclass(frozen=True)
class ApertureSpec:
    lens_side: float
    grid: tuple[int, int] = (8, 8)
    focus_distance: float = 2.0


@dataclass(frozen=True)
class ProjectorSpec:
    id: str
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    image_size: tuple[int, int] = (64, 48)
    half_angles_deg: tuple[float, float] = (20.0, 15.0)
    black_level: tuple[float, float, float] = (0.02, 0.02, 0.02)
    power: float = 1.0
    role: str = "luminaire"  # "luminaire" | "texture"
    aperture: ApertureSpec | None = None
    pixel_samples: int = 8


@dataclass(frozen=True)
class LedSpec:
    name: str
    position: tuple[float, float, float]
    normal: tuple[float, float, float] = (0.0, 0.0, -1.0)
    size: tuple[float, float] = (0.3, 0.3)
    intensity: float = 1.0
    color_temperature: float = 5000.0
    samples: int = 4


@dataclass(frozen=True)
class CameraSpec:
    position: tuple[float, float, float] = (1.4, 0.05, 1.6)
    look_at: tuple[float, float, float] = (1.4, 2.2, 0.9)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    half_angles_deg: tuple[float, float] = (50.0, 40.0)
    resolution: tuple[int, int] = (160, 120)


@dataclass(frozen=True)
class SimulationSpec:
    form_factor_samples: int = 128
    bounces: int = 8
    noise_stddev: float = 0.0


@dataclass(frozen=True)
class OptimizerSpec:
    epsilon: float = 1e-5
    max_iterations: int = 25
    stop_tolerance: float = 1e-8
    capture_scale: float = 255.0


@dataclass(frozen=True)
class PMSpec:
    texture_projector: str | None = None
    darkened_threshold: float = 0.05
    reference: str | None = None


@dataclass(frozen=True)
class SceneConfig:
    room_size: tuple[float, float, float] = (2.8, 2.2, 2.4)
    patch_size: float = 0.3
    wall_reflectance: tuple[float, float, float] = (0.6, 0.6, 0.6)
    floor_reflectance: tuple[float, float, float] = (0.4, 0.4, 0.4)
    ceiling_reflectance: tuple[float, float, float] = (0.7, 0.7, 0.7)
    surfaces: tuple[SurfaceSpec, ...] = ()
    occluders: tuple[OccluderSpec, ...] = ()
    target: TargetSpec | None = None
    charts: ChartSpec = field(default_factory=ChartSpec)
    projectors: tuple[ProjectorSpec, ...] = ()
    leds: tuple[LedSpec, ...] = ()
    camera: CameraSpec = field(default_factory=CameraSpec)
    simulation: SimulationSpec = field(default_factory=SimulationSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    pm: PMSpec = field(default_factory=PMSpec)
    seed: int = 0

    def with_changes(self, **kwargs) -> "SceneConfig":
        return replace(self, **kwargs)


# -- parsing helpers ----------------------------------------------------------


def _vec(doc: dict, key: str, path: str, n: int, default=None) -> tuple:
    if key not in doc:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return tuple(default)
    value = doc[key]
    if isinstance(value, (int, float)) and n in (3,):
        value = [value] * n
    if not isinstance(value, list) or len(value) != n:
        raise ConfigError(f"{path}.{key}", f"expected a list of {n} numbers")
    try:
        out = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}", "entries must be numbers") from None
    if not all(math.isfinite(v) for v in out):
        raise ConfigError(f"{path}.{key}", "entries must be finite")
    return out


def _ints(doc: dict, key: str, path: str, n: int, default=None, minimum: int = 1) -> tuple:
    vals = _vec(doc, key, path, n, default)
    if any(v != int(v) or v < minimum for v in vals):
        raise ConfigError(f"{path}.{key}", f"entries must be integers >= {minimum}")
    return tuple(int(v) for v in vals)


def _num(doc: dict, key: str, path: str, default=None, positive: bool = False,
         nonneg: bool = False) -> float:
    if key not in doc:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing required field")
        value = default
    else:
        value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}", "must be a number")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{path}.{key}", "must be finite")
    if positive and value <= 0:
        raise ConfigError(f"{path}.{key}", "must be > 0")
    if nonneg and value < 0:
        raise ConfigError(f"{path}.{key}", "must be >= 0")
    return value


def _reflectance(doc: dict, key: str, path: str, default) -> tuple[float, float, float]:
    rho = _vec(doc, key, path, 3, default)
    if any(r < 0 or r > 1 for r in rho):
        raise ConfigError(f"{path}.{key}", "reflectance channels must lie in [0, 1]")
    return rho


def _table(doc: dict, key: str, path: str) -> dict:
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{path}{key}", "expected a table")
    return value


def _tables(doc: dict, key: str) -> list[dict]:
    value = doc.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, dict) for v in value):
        raise ConfigError(key, "expected an array of tables")
    return value


_KNOWN_TOP = {"seed", "room", "surfaces", "occluders", "target", "charts", "projectors",
              "leds", "camera", "simulation", "optimizer", "pm"}


def _pixel_samples(pr, p):
    n = pr.get("pixel_samples", 8)
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ConfigError(f"{p}.pixel_samples", "must be an integer >= 1")
    return n


def parse_config(doc: dict[str, Any]) -> SceneConfig:
    """Validate a parsed TOML mapping into a :class:`SceneConfig`."""
    unknown = set(doc) - _KNOWN_TOP
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level key")

    room = _table(doc, "room", "")
    size = _vec(room, "size", "room", 3, (2.8, 2.2, 2.4))
    if any(s <= 0 for s in size):
        raise ConfigError("room.size", "room dimensions must be > 0")
    patch_size = _num(room, "patch_size", "room", 0.3, positive=True)
    refl = _table(room, "reflectance", "room.")
    walls = _reflectance(refl, "walls", "room.reflectance", (0.6, 0.6, 0.6))
    floor = _reflectance(refl, "floor", "room.reflectance", (0.4, 0.4, 0.4))
    ceiling = _reflectance(refl, "ceiling", "room.reflectance", (0.7, 0.7, 0.7))

    surfaces = []
    for i, s in enumerate(_tables(doc, "surfaces")):
        p = f"surfaces[{i}]"
        surfaces.append(SurfaceSpec(
            name=str(s.get("name", f"surface{i}")),
            corner=_vec(s, "corner", p, 3),
            edge_u=_vec(s, "edge_u", p, 3),
            edge_v=_vec(s, "edge_v", p, 3),
            divisions=_ints(s, "divisions", p, 2, (1, 1)),
            reflectance=_reflectance(s, "reflectance", p, (0.5, 0.5, 0.5)),
            tags=tuple(str(t) for t in s.get("tags", [])),
        ))

    occluders = []
    for i, o in enumerate(_tables(doc, "occluders")):
        p = f"occluders[{i}]"
        kind = o.get("kind")
        if kind == "sphere":
            occluders.append(OccluderSpec("sphere", _vec(o, "center", p, 3),
                                          radius=_num(o, "radius", p, positive=True)))
        elif kind == "box":
            hs = _vec(o, "half_size", p, 3)
            if any(h <= 0 for h in hs):
                raise ConfigError(f"{p}.half_size", "must be > 0")
            occluders.append(OccluderSpec("box", _vec(o, "center", p, 3), half_size=hs))
        else:
            raise ConfigError(f"{p}.kind", "must be 'sphere' or 'box'")

    target = None
    if "target" in doc:
        t = _table(doc, "target", "")
        target = TargetSpec(
            center=_vec(t, "center", "target", 3),
            size=_num(t, "size", "target", 0.2, positive=True),
            top_divisions=int(_num(t, "top_divisions", "target", 8, positive=True)),
            side_divisions=int(_num(t, "side_divisions", "target", 4, positive=True)),
            reflectance=_reflectance(t, "reflectance", "target", (0.56, 0.56, 0.56)),
        )

    c = _table(doc, "charts", "")
    placements = []
    for i, pl in enumerate(c.get("placement", [])):
        p = f"charts.placement[{i}]"
        placements.append(ChartPlacement(_vec(pl, "center", p, 3), _vec(pl, "normal", p, 3),
                                         _vec(pl, "up", p, 3, (0.0, 0.0, 1.0))))
    charts = ChartSpec(
        patch_size=_num(c, "patch_size", "charts", 0.04, positive=True),
        grid=_ints(c, "grid", "charts", 2, (6, 4)),
        offset=_num(c, "offset", "charts", 0.002, nonneg=True),
        placements=tuple(placements),
    )

    projectors = []
    seen = set()
    for i, pr in enumerate(_tables(doc, "projectors")):
        p = f"projectors[{i}]"
        pid = str(pr.get("id", f"P{i}"))
        if pid in seen:
            raise ConfigError(f"{p}.id", f"duplicate projector id {pid!r}")
        seen.add(pid)
        half = _vec(pr, "half_angles_deg", p, 2, (20.0, 15.0))
        if any(h <= 0 or h >= 90 for h in half):
            raise ConfigError(f"{p}.half_angles_deg", "half-angles must lie in (0, 90) degrees")
        black = _vec(pr, "black_level", p, 3, (0.02, 0.02, 0.02))
        if any(b < 0 or b >= 1 for b in black):
            raise ConfigError(f"{p}.black_level", "black level must lie in [0, 1)")
        role = pr.get("role", "luminaire")
        if role not in ("luminaire", "texture"):
            raise ConfigError(f"{p}.role", "must be 'luminaire' or 'texture'")
        aperture = None
        if "aperture" in pr:
            a = pr["aperture"]
            aperture = ApertureSpec(
                lens_side=_num(a, "lens_side", f"{p}.aperture", positive=True),
                grid=_ints(a, "grid", f"{p}.aperture", 2, (8, 8)),
                focus_distance=_num(a, "focus_distance", f"{p}.aperture", 2.0, positive=True),
            )
        projectors.append(ProjectorSpec(
            id=pid,
            position=_vec(pr, "position", p, 3),
            look_at=_vec(pr, "look_at", p, 3),
            up=_vec(pr, "up", p, 3, (0.0, 0.0, 1.0)),
            image_size=_ints(pr, "image_size", p, 2, (64, 48)),
            half_angles_deg=half,
            black_level=black,
            power=_num(pr, "power", p, 1.0, nonneg=True),
            role=role,
            pixel_samples=_pixel_samples(pr, p),
            aperture=aperture,
        ))

    leds = []
    for i, led in enumerate(_tables(doc, "leds")):
        p = f"leds[{i}]"
        temp = _num(led, "color_temperature", p, 5000.0)
        if not 1000 <= temp <= 20000:
            raise ConfigError(f"{p}.color_temperature", "must lie in [1000, 20000] K")
        leds.append(LedSpec(
            name=str(led.get("name", f"led{i}")),
            position=_vec(led, "position", p, 3),
            normal=_vec(led, "normal", p, 3, (0.0, 0.0, -1.0)),
            size=_vec(led, "size", p, 2, (0.3, 0.3)),
            intensity=_num(led, "intensity", p, 1.0, nonneg=True),
            color_temperature=temp,
            samples=int(_num(led, "samples", p, 4, positive=True)),
        ))

    cam = _table(doc, "camera", "")
    d = CameraSpec()
    camera = CameraSpec(
        position=_vec(cam, "position", "camera", 3, d.position),
        look_at=_vec(cam, "look_at", "camera", 3, d.look_at),
        up=_vec(cam, "up", "camera", 3, d.up),
        half_angles_deg=_vec(cam, "half_angles_deg", "camera", 2, d.half_angles_deg),
        resolution=_ints(cam, "resolution", "camera", 2, d.resolution),
    )

    sim = _table(doc, "simulation", "")
    simulation = SimulationSpec(
        form_factor_samples=int(_num(sim, "form_factor_samples", "simulation", 128, positive=True)),
        bounces=int(_num(sim, "bounces", "simulation", 8, nonneg=True)),
        noise_stddev=_num(sim, "noise_stddev", "simulation", 0.0, nonneg=True),
    )

    opt = _table(doc, "optimizer", "")
    optimizer = OptimizerSpec(
        epsilon=_num(opt, "epsilon", "optimizer", 1e-5, positive=True),
        max_iterations=int(_num(opt, "max_iterations", "optimizer", 25, positive=True)),
        stop_tolerance=_num(opt, "stop_tolerance", "optimizer", 1e-8, nonneg=True),
        capture_scale=_num(opt, "capture_scale", "optimizer", 255.0, positive=True),
    )

    pm_doc = _table(doc, "pm", "")
    pm = PMSpec(
        texture_projector=pm_doc.get("texture_projector"),
        darkened_threshold=_num(pm_doc, "darkened_threshold", "pm", 0.05, nonneg=True),
        reference=pm_doc.get("reference"),
    )
    if pm.texture_projector is not None and pm.texture_projector not in seen:
        raise ConfigError("pm.texture_projector", f"unknown projector {pm.texture_projector!r}")

    if pm.reference is not None and pm.reference not in {led.name for led in leds}:
        raise ConfigError("pm.reference", f"unknown LED {pm.reference!r}")

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")

    return SceneConfig(
        room_size=size, patch_size=patch_size, wall_reflectance=walls,
        floor_reflectance=floor, ceiling_reflectance=ceiling,
        surfaces=tuple(surfaces), occluders=tuple(occluders), target=target,
        charts=charts, projectors=tuple(projectors), leds=tuple(leds), camera=camera,
        simulation=simulation, optimizer=optimizer, pm=pm, seed=seed,
    )


def locate_field(text: str, field: str) -> int | None:
    """Best-effort 1-based line of a dotted field path such as ``projectors[2].power``."""
    lines = text.splitlines()
    start, tables = 0, []
    for part in field.split("."):
        m = re.fullmatch(r"([A-Za-z_]\w*)(?:\[(\d+)\])?", part)
        if m is None:
            return None
        name, index = m.group(1), m.group(2)
        tables.append(name)
        dotted = ".".join(tables)
        if index is not None:
            hits = [k for k in range(start, len(lines))
                    if re.match(rf"\s*\[\[\s*{re.escape(dotted)}\s*\]\]", lines[k])]
            if int(index) >= len(hits):
                return None
            start = hits[int(index)]
            continue
        for k in range(start, len(lines)):
            if re.match(rf"\s*{re.escape(name)}\s*=", lines[k]):
                return k + 1
            if re.match(rf"\s*\[\s*{re.escape(dotted)}\s*\]", lines[k]):
                start = k
                break
        else:
            return None
    return start + 1


def loads_config(text: str) -> SceneConfig:
    """Parse TOML text; errors carry the field path and, where it can be found, the line."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ConfigError("<document>", str(exc), line=line) from None
    try:
        return parse_config(doc)
    except ConfigError as exc:
        if exc.line is not None:
            raise
        msg = str(exc).split(": ", 1)[1]
        raise ConfigError(exc.field, msg, locate_field(text, exc.field)) from None


def load_config(path: str | Path) -> SceneConfig:
    return loads_config(Path(path).read_text())


def default_config_text() -> str:
    return resources.files("envlight.data").joinpath("default_scene.toml").read_text()


def default_config() -> SceneConfig:
    return loads_config(default_config_text())
