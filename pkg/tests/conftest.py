"""Shared fixtures: the default room and its expensive derived objects, built once."""

from __future__ import annotations

import numpy as np
import pytest

from envlight.config import default_config, loads_config
from envlight.emitters import ApertureModel, emit_aperture, footprint, make_projector
from envlight.pipeline import build_rig, calibrate_rig, prepare_pm, reproduce
from envlight.scene import SceneGraph, SurfacePatch, build_scene


@pytest.fixture(scope="session")
def default_cfg():
    return default_config()


@pytest.fixture(scope="session")
def rig(default_cfg):
    return build_rig(default_cfg)


@pytest.fixture(scope="session")
def noiseless_rig(default_cfg):
    cfg = default_cfg.with_changes(
        simulation=type(default_cfg.simulation)(
            default_cfg.simulation.form_factor_samples, default_cfg.simulation.bounces, 0.0))
    return build_rig(cfg)


@pytest.fixture(scope="session")
def bundle(rig):
    return calibrate_rig(rig)


@pytest.fixture(scope="session")
def noiseless_bundle(noiseless_rig):
    return calibrate_rig(noiseless_rig)


@pytest.fixture(scope="session")
def reproduction(rig, bundle):
    return reproduce(rig, bundle)


@pytest.fixture(scope="session")
def pm_setup(rig):
    return prepare_pm(rig)


@pytest.fixture(scope="session")
def pm_reproduction(rig, pm_setup):
    return reproduce(rig, pm_setup.bundle)


def quad(i, corner, u, v, rho=(0.5, 0.5, 0.5), **kw) -> SurfacePatch:
    return SurfacePatch(i, np.asarray(corner, dtype=float), np.asarray(u, dtype=float),
                        np.asarray(v, dtype=float), tuple(rho), **kw)


def parallel_plates(gap: float = 1.0, side: float = 1.0, rho=(0.5, 0.5, 0.5)) -> SceneGraph:
    """Two coaxial squares facing each other ``gap`` apart."""
    s = side
    lower = quad(0, (0, 0, 0), (s, 0, 0), (0, s, 0), rho)
    upper = quad(1, (0, 0, gap), (0, s, 0), (s, 0, 0), rho)
    return SceneGraph((lower, upper), (), (np.zeros(3), np.array([s, s, gap])))


PENUMBRA_TOML = """
[room]
size = [1.0, 1.0, 2.2]
patch_size = 0.5

[[surfaces]]
name = "strip"
corner = [0.2, 0.49, 0.01]
edge_u = [0.6, 0.0, 0.0]
edge_v = [0.0, 0.02, 0.0]
divisions = [240, 1]

[[occluders]]
kind = "box"
center = [0.25, 0.5, 0.5]
half_size = [0.25, 0.2, 0.01]
"""


@pytest.fixture(scope="session")
def penumbra_scene():
    """A 0.6 m receiver strip of 2.5 mm patches under a blocker whose edge sits at x = 0.5."""
    return build_scene(loads_config(PENUMBRA_TOML))


def penumbra_profile(scene, lens_side, grid=(8, 8)):
    """Strip irradiance under the blocker relative to the unblocked strip.

    ``lens_side=None`` gives the pinhole projector.  The image is 512 pixels
    across so each pixel covers less than one strip patch.
    """
    strip = scene.group("strip")
    base = make_projector("P", (0.5, 0.5, 2.0), (0.5, 0.5, 0.0), up=(0, 1, 0),
                          image_size=(512, 4), half_angles_deg=(9.0, 0.6),
                          black_level=(0, 0, 0), pixel_samples=8)
    proj = base if lens_side is None else base.with_aperture(ApertureModel(lens_side, grid))
    white = np.ones((4, 512, 3))
    E = emit_aperture(proj, footprint(proj, scene), white)[strip, 1]
    E0 = emit_aperture(proj, footprint(proj, scene.with_occluders(())), white)[strip, 1]
    return scene.centroids[strip, 0], E / E0


# one (criterion, passed, detail) entry per acceptance check, echoed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda a: int(a[0][1:])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
