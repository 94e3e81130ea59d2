"""Virtual camera: per-patch readout under a lighting state, and graycode correspondence.

The camera response is linear; a frame is the patch radiosity plus optional
Gaussian read noise, clipped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .config import SceneConfig
from .emitters import (Footprint, LedLuminaire, ProjectorModel, emit, footprint,
                       led_from_spec, led_irradiance, projector_from_spec)
from .scene import FormFactorMatrix, SceneGraph, build_scene, compute_form_factors, solve_radiosity


@dataclass(frozen=True)
class NoiseModel:
    stddev: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.stddev < 0:
            raise ValueError("noise stddev must be >= 0")


@dataclass
class LightingState:
    """Which emitters are on.  Projectors absent from ``images`` are powered off."""

    images: dict[str, np.ndarray] = field(default_factory=dict)
    leds: tuple[LedLuminaire, ...] = ()
    label: str = ""

    def describe(self) -> str:
        parts = [f"{pid}:mean={np.mean(img):.4f}" for pid, img in sorted(self.images.items())]
        parts += [f"led:{led.name}" for led in self.leds]
        return self.label or ",".join(parts) or "dark"


@dataclass(frozen=True, eq=False)
class CaptureFrame:
    values: np.ndarray   # (P, 3) clipped readout
    linear: np.ndarray   # (P, 3) noiseless, unclipped radiosity
    lighting: str = ""


@dataclass(eq=False)
class Simulator:
    """The virtual room: geometry, transport, emitters and the camera that watches it."""

    scene: SceneGraph
    form_factors: FormFactorMatrix
    projectors: dict[str, ProjectorModel]
    footprints: dict[str, Footprint]
    bounces: int = 8
    _led_cache: dict = field(default_factory=dict, repr=False)

    def led_direct(self, led: LedLuminaire) -> np.ndarray:
        key = (led.name, tuple(np.asarray(led.position).round(9)), led.intensity,
               led.color_temperature, tuple(led.emitter_size), led.samples)
        if key not in self._led_cache:
            self._led_cache[key] = led_irradiance(led, self.scene)
        return self._led_cache[key]

    def direct(self, state: LightingState) -> np.ndarray:
        E = np.zeros((len(self.scene), 3))
        for pid, img in state.images.items():
            E += emit(self.projectors[pid], self.footprints[pid], img)
        for led in state.leds:
            E += self.led_direct(led)
        return E

    def blank_image(self, pid: str, value: float = 0.0) -> np.ndarray:
        w, h = self.projectors[pid].image_size
        return np.full((h, w, 3), float(value))

    def with_projector(self, proj: ProjectorModel) -> "Simulator":
        projectors = dict(self.projectors)
        footprints = dict(self.footprints)
        projectors[proj.id] = proj
        footprints[proj.id] = footprint(proj, self.scene)
        return Simulator(self.scene, self.form_factors, projectors, footprints, self.bounces)


def capture(sim: Simulator, state: LightingState, noise: NoiseModel | None = None) -> CaptureFrame:
    """Read every patch under ``state``: radiosity plus read noise, clipped to [0, 1]."""
    for pid, img in state.images.items():
        a = np.asarray(img)
        if a.size and (a.min() < 0 or a.max() > 1):
            raise ValueError(f"projector {pid!r} input outside [0, 1]")
    linear = solve_radiosity(sim.scene, sim.form_factors, sim.direct(state), sim.bounces).outgoing
    values = linear
    if noise is not None and noise.stddev > 0:
        rng = np.random.default_rng(noise.seed)
        values = linear + rng.normal(0.0, noise.stddev, linear.shape)
    return CaptureFrame(np.clip(values, 0.0, 1.0), linear, state.describe())


def export_frame(frame: CaptureFrame, path) -> None:
    """Write a frame as ``patch,R,G,B`` rows."""
    with open(path, "w") as fh:
        fh.write("patch,R,G,B\n")
        for k, (r, g, b) in enumerate(frame.values):
            fh.write(f"{k},{r:.9f},{g:.9f},{b:.9f}\n")


def build_simulator(config: SceneConfig, scene: SceneGraph | None = None) -> Simulator:
    """Assemble the simulator for ``config``; form factors are cached per configuration."""
    scene = build_scene(config) if scene is None else scene
    F = _cached_form_factors(config, scene)
    projectors = {p.id: projector_from_spec(p) for p in config.projectors}
    footprints = {pid: footprint(p, scene) for pid, p in projectors.items()}
    return Simulator(scene, F, projectors, footprints, config.simulation.bounces)


_FF_CACHE: dict = {}


def _cached_form_factors(config: SceneConfig, scene: SceneGraph) -> FormFactorMatrix:
    key = (repr((config.room_size, config.patch_size, config.wall_reflectance,
                 config.floor_reflectance, config.ceiling_reflectance, config.surfaces,
                 config.occluders, config.target, config.charts)),
           config.simulation.form_factor_samples, config.seed)
    if key not in _FF_CACHE:
        _FF_CACHE[key] = compute_form_factors(scene, config.simulation.form_factor_samples,
                                              seed=config.seed)
    return _FF_CACHE[key]


def leds_from_config(config: SceneConfig) -> dict[str, LedLuminaire]:
    return {spec.name: led_from_spec(spec) for spec in config.leds}


# -- graycode structured light --------------------------------------------------


def _n_bits(n: int) -> int:
    return 0 if n <= 1 else int(math.ceil(math.log2(n)))


@dataclass(frozen=True, eq=False)
class GraycodePatterns:
    """Binary images in (pattern, inverse) pairs: column bits MSB first, then row bits."""

    image_size: tuple[int, int]
    images: np.ndarray           # (n, h, w) of 0/1
    axis: tuple[str, ...]        # "col" | "row" per image
    bit: tuple[int, ...]         # bit position (0 = MSB) per image
    inverse: tuple[bool, ...]

    def __len__(self):
        return len(self.images)

    @property
    def n_col_bits(self) -> int:
        return _n_bits(self.image_size[0])

    @property
    def n_row_bits(self) -> int:
        return _n_bits(self.image_size[1])


def gray_code(v):
    v = np.asarray(v)
    return v ^ (v >> 1)


def graycode_patterns(image_size: tuple[int, int]) -> GraycodePatterns:
    w, h = image_size
    if w < 1 or h < 1:
        raise ValueError("image dimensions must be >= 1")
    images, axis, bits, inv = [], [], [], []
    cols, rows = np.arange(w), np.arange(h)
    for name, n, coords in (("col", _n_bits(w), cols), ("row", _n_bits(h), rows)):
        g = gray_code(coords)
        for j in range(n):
            bit = (g >> (n - 1 - j)) & 1
            plane = (np.broadcast_to(bit[None, :], (h, w)) if name == "col"
                     else np.broadcast_to(bit[:, None], (h, w))).astype(np.uint8)
            for is_inv in (False, True):
                images.append(1 - plane if is_inv else plane)
                axis.append(name)
                bits.append(j)
                inv.append(is_inv)
    arr = np.array(images, dtype=np.uint8).reshape(-1, h, w)
    return GraycodePatterns((w, h), arr, tuple(axis), tuple(bits), tuple(inv))


@dataclass(frozen=True, eq=False)
class GraycodeCapture:
    projector_id: str
    patterns: GraycodePatterns
    sample_patch: np.ndarray   # (S,) patch seen by each camera sample
    values: np.ndarray         # (n_patterns, S) luminance-like readout per sample


def graycode_capture(sim: Simulator, projector_id: str, patterns: GraycodePatterns | None = None,
                     noise: NoiseModel | None = None) -> GraycodeCapture:
    """Capture the camera samples lit by ``projector_id`` under each graycode pattern.

    Camera samples sit where the projector's (central) rays land; each reads
    the direct spot reflection of its pixel plus the patch-level indirect
    light of the whole pattern.  Only the named projector is on.
    """
    proj = sim.projectors[projector_id]
    fp = sim.footprints[projector_id]
    patterns = graycode_patterns(proj.image_size) if patterns is None else patterns
    central = fp.central.ravel()
    lit = np.nonzero(central >= 0)[0]
    patch = central[lit]
    rho = sim.scene.reflectance.mean(axis=1)
    spot = fp.spot_irradiance.ravel()[lit]
    b = float(np.mean(proj.black_level))
    values = np.empty((len(patterns), len(lit)))
    rng = None
    if noise is not None and noise.stddev > 0:
        rng = np.random.default_rng(noise.seed)
    for i, img in enumerate(patterns.images):
        drive = np.repeat(img[..., None].astype(float), 3, axis=2)
        E = emit(proj, fp, drive)
        B = solve_radiosity(sim.scene, sim.form_factors, E, sim.bounces).outgoing
        indirect = (B - sim.scene.reflectance * E).mean(axis=1)
        bits = img.ravel()[lit].astype(float)
        values[i] = rho[patch] * spot * (b + (1 - b) * bits) + indirect[patch]
        if rng is not None:
            values[i] += rng.normal(0.0, noise.stddev, len(lit))
    return GraycodeCapture(projector_id, patterns, patch, np.clip(values, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    projector_id: str
    pixel_patch: np.ndarray  # (h, w) patch id or -1

    def patch_of(self, row: int, col: int) -> int | None:
        k = int(self.pixel_patch[row, col])
        return None if k < 0 else k

    def pixels_of(self, patch: int) -> np.ndarray:
        return np.argwhere(self.pixel_patch == patch)

    def accuracy(self, truth: np.ndarray, lit_only: bool = True) -> float:
        sel = truth >= 0 if lit_only else np.ones(truth.shape, dtype=bool)
        if not sel.any():
            return 1.0
        return float(np.mean(self.pixel_patch[sel] == truth[sel]))


def _decode_axis(cap: GraycodeCapture, axis: str, n_bits: int):
    S = cap.values.shape[1]
    p = cap.patterns
    gray = np.zeros(S, dtype=np.int64)
    valid = np.ones(S, dtype=bool)
    for j in range(n_bits):
        pos = [i for i in range(len(p)) if p.axis[i] == axis and p.bit[i] == j and not p.inverse[i]]
        neg = [i for i in range(len(p)) if p.axis[i] == axis and p.bit[i] == j and p.inverse[i]]
        a, b = cap.values[pos[0]], cap.values[neg[0]]
        valid &= a != b
        gray = (gray << 1) | (a > b).astype(np.int64)
    binary = gray.copy()
    shift = gray >> 1
    while np.any(shift):
        binary ^= shift
        shift >>= 1
    return binary, valid


def graycode_decode(cap: GraycodeCapture, scene: SceneGraph | None = None) -> CorrespondenceMap:
    """Recover the pixel -> patch map from a graycode capture sequence.

    A bit is 1 when the pattern reads brighter than its inverse; exact ties
    leave the sample undecoded.  Pixels no sample decodes to map to -1.
    """
    w, h = cap.patterns.image_size
    col, vc = _decode_axis(cap, "col", cap.patterns.n_col_bits)
    row, vr = _decode_axis(cap, "row", cap.patterns.n_row_bits)
    ok = vc & vr & (col < w) & (row < h)
    out = np.full((h, w), -1, dtype=int)
    out[row[ok], col[ok]] = cap.sample_patch[ok]
    return CorrespondenceMap(cap.projector_id, out)
