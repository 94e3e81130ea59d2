"""Property-based checks of the invariants the modules promise."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from envlight.capture import (GraycodeCapture, LightingState, capture, gray_code,
                              graycode_decode, graycode_patterns)
from envlight.calibration import nodes_state
from envlight.metrics import ansi_ratio, read_ppm, rms_contrast, transition_width, write_ppm
from envlight.optimizer import NodeAgent, evaluate, forward, gradient, step
from envlight.scene import solve_radiosity

from conftest import parallel_plates

unit = st.floats(0.0, 1.0, allow_nan=False)
fixtures_ok = settings(max_examples=25, deadline=None,
                       suppress_health_check=[HealthCheck.function_scoped_fixture])


@st.composite
def problems(draw, max_nodes=4, max_patches=10):
    N = draw(st.integers(1, max_nodes))
    I = draw(st.integers(1, max_patches))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    group = np.sort(rng.integers(0, 3, I))
    group = np.unique(group, return_inverse=True)[1]
    return (rng.random((N, I, 3)), rng.random((I, 3)) * 0.1, rng.random((N, 3)),
            rng.normal(size=(I, 3)), group)


@given(problems(), st.floats(1e-6, 10.0))
def test_step_stays_in_unit_box(prob, eps):
    p, d, x, e, group = prob
    K = np.bincount(group)[group]
    out = step(x, p, e, eps, K)
    assert out.min() >= 0 and out.max() <= 1


@given(problems(), st.floats(1e-6, 1.0))
def test_node_update_equals_central_coordinate(prob, eps):
    p, d, x, e, group = prob
    K = np.bincount(group)[group].astype(float)
    central = step(x, p, e, eps, K)
    for n in range(len(p)):
        assert np.array_equal(NodeAgent(n, p[n], x[n].copy()).update(e, K, eps), central[n])


@given(problems())
def test_gradient_is_minus_p_times_residual(prob):
    p, d, x, _, _ = prob
    r = forward(p, x, d) + 0.1
    e, G = evaluate(r, forward(p, x, d))
    assert np.allclose(G, 0.5 * 0.01 * len(r))
    g = gradient(p, e)
    assert np.allclose(g, -0.1 * p.sum(axis=1))


@given(problems(), st.integers(0, 2))
def test_channels_are_independent(prob, c):
    p, d, x, e, group = prob
    K = np.bincount(group)[group]
    full = step(x, p, e, 0.05, K)
    alone = step(x[:, c], p[:, :, c], e[:, c], 0.05, K)
    assert np.array_equal(full[:, c], alone)


@given(problems())
def test_forward_model_is_affine(prob):
    p, d, x, _, _ = prob
    y0 = forward(p, np.zeros_like(x), d)
    assert np.allclose(y0, d)
    assert np.allclose(forward(p, 0.5 * x, d) - d, 0.5 * (forward(p, x, d) - d))


# -- metrics ---------------------------------------------------------------------------


@given(arrays(float, st.tuples(st.integers(2, 30), st.just(3)), elements=st.floats(0.01, 1.0)),
       st.floats(0.01, 100.0))
def test_rms_contrast_is_scale_invariant(v, alpha):
    assert np.isclose(rms_contrast(alpha * v), rms_contrast(v), rtol=1e-9, atol=1e-12)
    assert rms_contrast(v) >= 0


@given(arrays(float, (8, 3), elements=st.floats(0.01, 1.0)))
def test_ansi_ratio_phase_swap_is_reciprocal(v):
    w, b = [0, 2, 4, 6], [1, 3, 5, 7]
    assert np.isclose(ansi_ratio(v, w, b) * ansi_ratio(v, b, w), 1.0)


@given(st.floats(0.05, 0.5), st.floats(0.01, 0.3))
def test_transition_width_of_ramps(start, width):
    x = np.linspace(0, 1, 2001)
    v = np.clip((x - start) / width, 0, 1)
    assert np.isclose(transition_width(x, v), 0.8 * width, atol=1e-3)


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(img, path)
    assert np.array_equal(read_ppm(path), img)


# -- graycode ---------------------------------------------------------------------------


@given(st.integers(0, 2**20))
def test_gray_neighbours_differ_in_one_bit(v):
    diff = int(gray_code(v) ^ gray_code(v + 1))
    assert diff and diff & (diff - 1) == 0


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_ideal_readout_decodes_every_pixel(w, h, seed):
    pats = graycode_patterns((w, h))
    rng = np.random.default_rng(seed)
    pixels = rng.choice(w * h, size=min(w * h, 50), replace=False)
    bright = rng.uniform(0.2, 1.0, len(pixels))
    values = pats.images.reshape(len(pats), w * h)[:, pixels] * bright + 0.01
    cap = GraycodeCapture("p", pats, pixels + 1000, values)
    out = graycode_decode(cap).pixel_patch.ravel()
    assert np.array_equal(out[pixels], pixels + 1000)
    assert np.all(np.delete(out, pixels) == -1)


# -- transport ----------------------------------------------------------------------------


@given(arrays(float, (2, 3), elements=st.floats(0, 1)),
       arrays(float, (2, 3), elements=st.floats(0, 1)), st.integers(0, 12))
def test_radiosity_is_linear_and_monotone(E1, E2, bounces):
    scene = parallel_plates(rho=(0.3, 0.6, 0.9))
    F = np.array([[0.0, 0.2], [0.2, 0.0]])
    B1 = solve_radiosity(scene, F, E1, bounces).outgoing
    B2 = solve_radiosity(scene, F, E2, bounces).outgoing
    B12 = solve_radiosity(scene, F, E1 + E2, bounces).outgoing
    assert np.allclose(B12, B1 + B2, rtol=1e-12, atol=1e-15)
    assert np.all(B12 >= B1 - 1e-15)


@fixtures_ok
@given(st.lists(unit, min_size=3, max_size=3), st.integers(0, 9), st.floats(0.0, 1.0))
def test_capture_is_clipped_and_monotone_in_node_input(noiseless_rig, noiseless_bundle, rgb, n,
                                                       bump):
    sim, b = noiseless_rig.sim, noiseless_bundle
    x = np.tile(np.array(rgb) * 0.5, (len(b.nodes), 1))
    lo = capture(sim, nodes_state(sim, b.nodes, x))
    x[n] = np.minimum(1.0, x[n] + bump)
    hi = capture(sim, nodes_state(sim, b.nodes, x))
    assert hi.values.min() >= 0 and hi.values.max() <= 1
    assert np.all(hi.linear >= lo.linear - 1e-15)


@fixtures_ok
@given(st.integers(0, 2**32 - 1))
def test_capture_is_pure_in_state_and_seed(rig, seed):
    from envlight.capture import NoiseModel

    state = LightingState({}, (rig.leds["B_6500K"],))
    a = capture(rig.sim, state, NoiseModel(0.01, seed)).values
    assert np.array_equal(a, capture(rig.sim, state, NoiseModel(0.01, seed)).values)
