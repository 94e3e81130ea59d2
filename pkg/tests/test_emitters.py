import numpy as np
import pytest

from envlight.calibration import ProjectorNode
from envlight.emitters import (ApertureModel, LedLuminaire, emit, emit_aperture, emit_node,
                               footprint, led_irradiance, make_projector,
                               mask_target_with_margin, planckian_tint, planckian_xy)
from envlight.metrics import transition_width

from conftest import penumbra_profile
from oracles import ray_sum_node_irradiance


def test_projector_facing_outward_lights_nothing(rig):
    p = make_projector("out", (1.4, -0.5, 1.2), (1.4, -5.0, 1.2), image_size=(8, 6))
    fp = footprint(p, rig.scene)
    assert np.all(fp.central == -1)
    assert fp.transport.nnz == 0


def test_tiny_projector_on_one_wall_patch(rig):
    scene = rig.scene
    wall = scene.group("front")
    target = wall[len(wall) // 2]
    c = scene.centroids[target]
    p = make_projector("t", c + [0, -1.0, 0], c, image_size=(2, 2), half_angles_deg=(1, 1))
    fp = footprint(p, scene)
    assert np.all(fp.central == target)


def test_every_chart_is_lit_by_some_node(bundle, rig):
    for c in rig.charts:
        sel = bundle.patch_group == c.id
        assert bundle.p[:, sel].sum() > 0
        assert any(n.chart == c.id for n in bundle.nodes)


def _node(rig, pid, first=0):
    fp = rig.sim.footprints[pid]
    h, w = fp.central.shape
    return ProjectorNode(pid, first, np.arange(h * w), (0, h, 0, w))


def test_zero_input_without_black_level_is_dark(rig):
    p = make_projector("dark", (2.0, 1.1, 2.3), (0.0, 1.1, 1.25), image_size=(32, 24),
                       black_level=(0, 0, 0), pixel_samples=2)
    fp = footprint(p, rig.scene)
    node = ProjectorNode("dark", 0, np.arange(32 * 24), (0, 24, 0, 32))
    assert np.all(emit_node(node, p, fp, np.zeros(3)) == 0)
    one = emit_node(node, p, fp, np.full(3, 0.3))
    two = emit_node(node, p, fp, np.full(3, 0.6))
    assert one.max() > 0
    assert np.allclose(two, 2 * one, rtol=1e-12, atol=0)


def test_node_matches_per_ray_accumulation(rig, bundle):
    node = bundle.nodes[1]
    proj, fp = rig.sim.projectors[node.projector_id], rig.sim.footprints[node.projector_id]
    # every 7th pixel keeps the scalar oracle fast while touching the whole node
    pixels, weights = node.pixels[::7], node.pixel_weights()[::7]
    sub = ProjectorNode(node.projector_id, 99, pixels, node.rect, None, weights)
    E = emit_node(sub, proj, fp, np.ones(3))
    b = proj.black_level
    oracle = ray_sum_node_irradiance(rig.scene, proj, pixels, b + (1 - b) * weights[:, None])
    assert oracle.max() > 0
    assert np.allclose(E, oracle, rtol=1e-9, atol=1e-12)


def test_superposition_of_two_nodes(rig):
    proj, fp = rig.sim.projectors["wall_front"], rig.sim.footprints["wall_front"]
    h, w = fp.central.shape
    left = np.zeros((h, w, 3))
    right = np.zeros((h, w, 3))
    left[:, : w // 2] = [0.2, 0.5, 0.9]
    right[:, w // 2:] = [0.7, 0.1, 0.4]
    floor = emit(proj, fp, np.zeros((h, w, 3)))
    both = emit(proj, fp, left + right)
    assert np.allclose(both, emit(proj, fp, left) + emit(proj, fp, right) - floor,
                       rtol=0, atol=1e-9)


def test_single_subaperture_equals_point_source(rig):
    point = make_projector("p", (1.4, 1.05, 2.1), (1.4, 1.8, 0.7), image_size=(24, 18),
                           half_angles_deg=(16, 11), pixel_samples=2)
    lens = point.with_aperture(ApertureModel(0.5, (1, 1)))
    a, b = footprint(point, rig.scene), footprint(lens, rig.scene)
    img = np.random.default_rng(0).random((18, 24, 3))
    assert np.array_equal(emit(point, a, img), emit_aperture(lens, b, img))


def test_partial_occlusion_gives_penumbra(penumbra_scene):
    strip = penumbra_scene.group("strip")
    base = make_projector("P", (0.5, 0.5, 2.0), (0.5, 0.5, 0.0), up=(0, 1, 0),
                          image_size=(256, 4), half_angles_deg=(9.0, 0.6),
                          black_level=(0, 0, 0), pixel_samples=4)
    lens = base.with_aperture(ApertureModel(0.3, (8, 8)))
    E = emit_aperture(lens, footprint(lens, penumbra_scene), np.ones((4, 256, 3)))[strip, 1]
    E0 = emit_aperture(lens, footprint(lens, penumbra_scene.with_occluders(())),
                       np.ones((4, 256, 3)))[strip, 1]
    x = penumbra_scene.centroids[strip, 0]
    # a patch just inside the geometric shadow is partly lit
    k = np.argmin(np.abs(x - 0.49))
    assert 0 < E[k] < E0[k]


def test_penumbra_widens_with_lens(penumbra_scene):
    widths = [transition_width(*penumbra_profile(penumbra_scene, s)) for s in (0.1, 0.3, 0.5)]
    assert widths[0] < widths[1] < widths[2]
    # a linear ramp from an L-wide lens spans L * 0.49 / 1.5; 10-90% covers 80% of it
    for s, w in zip((0.1, 0.3, 0.5), widths):
        assert w == pytest.approx(0.8 * s * 0.49 / 1.5, rel=0.2)


def test_led_basics(rig):
    led = LedLuminaire("x", np.array([1.4, 1.1, 2.38]), intensity=0.0)
    assert np.all(led_irradiance(led, rig.scene) == 0)
    assert np.allclose(planckian_tint(6500.0), 1.0, atol=1e-12)


def test_warm_tint_regression():
    # CIE 1931 Planckian locus at 3000 K from published tables
    assert planckian_xy(3000.0) == pytest.approx((0.4369, 0.4041), abs=1.5e-3)
    tint = planckian_tint(3000.0)
    assert tint[0] > tint[1] > tint[2]
    assert tint == pytest.approx([1.694457932603157, 0.85934424309831, 0.26339147563226545],
                                 rel=1e-12)


def test_led_scales_linearly(rig):
    led = rig.leds["A_6500K"]
    a = led_irradiance(led, rig.scene)
    assert np.allclose(led_irradiance(led.scaled(2.5), rig.scene), 2.5 * a, rtol=1e-12)


# -- masking --------------------------------------------------------------------------


def test_mask_without_target_is_identity(rig):
    fp = rig.sim.footprints["desk_aperture"]
    res = mask_target_with_margin(rig.sim.projectors["desk_aperture"], fp, [])
    assert np.all(res.mask == 1)
    assert res.darkened == frozenset()


def test_point_mask_is_central_ray_test(rig):
    proj = make_projector("p", (1.4, 1.05, 2.1), (1.4, 1.8, 0.7), image_size=(48, 36),
                          half_angles_deg=(16, 11))
    fp = footprint(proj, rig.scene)
    target = rig.scene.tagged("target")
    res = mask_target_with_margin(proj, fp, target)
    assert np.array_equal(res.mask == 0, np.isin(fp.central, target))


def test_aperture_mask_covers_point_mask_and_leaves_only_floor(rig):
    target = rig.scene.tagged("target")
    lens = rig.sim.projectors["desk_aperture"]
    fp = rig.sim.footprints["desk_aperture"]
    point = lens.with_aperture(None)
    res_lens = mask_target_with_margin(lens, fp, target)
    res_point = mask_target_with_margin(point, footprint(point, rig.scene), target)
    assert (res_lens.mask == 0).sum() >= (res_point.mask == 0).sum()
    # every sub-aperture ray of every masked pixel checked exhaustively
    sub = fp.sub.reshape(-1, fp.n_sub)
    on = res_lens.mask.ravel() == 1
    assert not np.isin(sub[on], target).any()
    h, w = fp.central.shape
    E = emit_aperture(lens, fp, np.repeat(res_lens.mask[..., None], 3, axis=2))
    floor = emit_aperture(lens, fp, np.zeros((h, w, 3)))
    assert np.array_equal(E[target], floor[target])
    assert len(res_lens.darkened) > 0
