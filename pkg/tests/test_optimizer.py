import warnings

import numpy as np
import pytest

from envlight.optimizer import (CaptureFailure, DistributedOptimizer, NodeAgent, OptimizerConfig,
                                conventional_init, evaluate, forward, gradient, linear_capture,
                                step)


def stable_epsilon(p, K):
    """1 / largest eigenvalue of the K-weighted normal matrix, over channels."""
    lam = 0.0
    for c in range(p.shape[2]):
        A = p[:, :, c]
        lam = max(lam, np.linalg.eigvalsh((A / K) @ A.T).max())
    return 1.0 / lam


def instance(rng, N=3, groups=(12, 12), C=3):
    group = np.concatenate([np.full(k, m) for m, k in enumerate(groups)])
    p = rng.uniform(0.05, 1.0, (N, len(group), C))
    d = rng.uniform(0.0, 0.05, (len(group), C))
    return p, d, group


def run_linear(p, d, r, group, x0, iterations, eps=None, schedule=None, ids=None):
    K = np.bincount(group)[group].astype(float)
    eps = stable_epsilon(p, K) if eps is None else eps
    ids = list(range(len(p))) if ids is None else ids
    agents = [NodeAgent(i, p[k].copy(), np.array(x0[k], dtype=float)) for k, i in enumerate(ids)]
    cfg = OptimizerConfig(epsilon=eps, max_iterations=iterations, stop_tolerance=0.0,
                          capture_scale=1.0)
    fn = linear_capture({i: p[k] for k, i in enumerate(ids)}, d)
    opt = DistributedOptimizer(agents, r, group, fn, cfg)
    return opt.run(schedule=schedule)


# -- conventional initializer -------------------------------------------------------------


def _one(v):
    return np.array([[v]])


def test_conventional_init_examples():
    g = np.array([0])
    assert conventional_init(_one(0.35), _one(0.10), np.array([[[0.5]]]), [0], g)[0, 0] == \
        pytest.approx(0.5)
    assert conventional_init(_one(0.60), _one(0.10), np.array([[[0.5]]]), [0], g)[0, 0] == 1.0
    assert conventional_init(_one(0.05), _one(0.10), np.array([[[0.5]]]), [0], g)[0, 0] == 0.0


def test_conventional_init_uses_median_of_own_chart():
    r = np.array([[0.2], [0.3], [0.9], [0.5]])
    d = np.zeros((4, 1))
    p = np.ones((1, 4, 1))
    group = np.array([0, 0, 0, 1])
    assert conventional_init(r, d, p, [0], group)[0, 0] == pytest.approx(0.3)


def test_conventional_init_warns_without_light():
    p = np.zeros((2, 2, 1))
    p[1] = 0.5
    with pytest.warns(UserWarning, match="no light"):
        x = conventional_init(np.full((2, 1), 0.3), np.zeros((2, 1)), p, [0, None],
                              np.array([0, 0]))
    assert np.all(x == 0)


# -- objective, gradient, step -----------------------------------------------------------


def test_evaluate_examples():
    e, G = evaluate([0.3, 0.4], [0.3, 0.4])
    assert np.all(e == 0) and G == 0
    assert evaluate([1.0], [0.0])[1] == 0.5
    assert evaluate([0.1, -0.2], [0.0, 0.0])[1] == pytest.approx(0.025)
    _, G = evaluate(np.ones((2, 3)), np.zeros((2, 3)))
    assert G.shape == (3,) and np.all(G == 1.0)


def test_gradient_examples():
    p = np.random.default_rng(0).random((4, 6))
    assert np.all(gradient(p, np.zeros(6)) == 0)
    assert gradient(np.array([[0.5]]), np.array([0.2]))[0] == pytest.approx(-0.1)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    p, d, _ = instance(rng, N=5, groups=(8,), C=1)
    p, d = p[..., 0], d[..., 0]
    x = rng.uniform(0.2, 0.8, 5)
    r = rng.uniform(0.0, 1.0, 8)
    g = gradient(p, r - forward(p, x, d))
    h = 1e-6
    for n in range(5):
        up, dn = x.copy(), x.copy()
        up[n] += h
        dn[n] -= h
        fd = (evaluate(r, forward(p, up, d))[1] - evaluate(r, forward(p, dn, d))[1]) / (2 * h)
        assert abs(fd - g[n]) <= 1e-6 * abs(g[n])


def test_step_examples():
    assert step([0.5], [[1.0]], [1.0], 0.01, 1)[0] == pytest.approx(0.51)
    assert step([0.999], [[1.0]], [10.0], 0.01, 1)[0] == 1.0
    assert step([0.001], [[1.0]], [-10.0], 0.01, 1)[0] == 0.0
    x = np.array([0.3, 0.7])
    assert np.array_equal(step(x, np.ones((2, 3)), np.zeros(3), 0.1, 3), x)
    with pytest.raises(ValueError):
        step(x, np.ones((2, 3)), np.zeros(3), 0.0, 3)


def test_config_validation():
    for bad in (dict(epsilon=0.0), dict(epsilon=float("nan")), dict(max_iterations=0),
                dict(stop_tolerance=-1.0), dict(capture_scale=0.0), dict(per_channel=False)):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)
    assert OptimizerConfig().gain == pytest.approx(1e-5 * 255 ** 2)


# -- distributed runs ------------------------------------------------------------------------


def test_reachable_target_is_recovered():
    rng = np.random.default_rng(2)
    p, d, group = instance(rng)
    x_star = rng.uniform(0.2, 0.8, (3, 3))
    r = forward(p, x_star, d)
    trace = run_linear(p, d, r, group, np.full((3, 3), 0.5), 3000)
    assert trace.G[-1] < 1e-6
    assert np.allclose(trace.final_x, x_star, atol=1e-3)


def test_unreachable_bright_target_saturates():
    rng = np.random.default_rng(3)
    p, d, group = instance(rng)
    r = p.sum(axis=0) + d + 0.5
    trace = run_linear(p, d, r, group, np.zeros((3, 3)), 200)
    assert np.all(trace.final_x == 1.0)


def test_open_loop_descent():
    rng = np.random.default_rng(4)
    for _ in range(5):
        p, d, group = instance(rng, N=4)
        r = rng.uniform(0.0, 1.5, d.shape)
        G = run_linear(p, d, r, group, rng.random((4, 3)), 100).G
        assert np.all(np.diff(G) <= 1e-12)


def test_stop_on_small_improvement():
    rng = np.random.default_rng(5)
    p, d, group = instance(rng)
    r = forward(p, np.full((3, 3), 0.4), d)
    K = np.bincount(group)[group].astype(float)
    agents = [NodeAgent(i, p[i], np.full(3, 0.5)) for i in range(3)]
    cfg = OptimizerConfig(epsilon=stable_epsilon(p, K), max_iterations=10_000,
                          stop_tolerance=1e-10, capture_scale=1.0)
    trace = DistributedOptimizer(agents, r, group, linear_capture(dict(enumerate(p)), d),
                                 cfg).run()
    assert trace.stop_reason == "tolerance"
    assert len(trace) < 10_000
    assert trace.G[-2] - trace.G[-1] < 1e-10


def test_inert_node_changes_nothing():
    rng = np.random.default_rng(6)
    p, d, group = instance(rng, N=2)
    r = forward(p, np.full((2, 3), 0.6), d) + 0.01
    eps = stable_epsilon(p, np.bincount(group)[group].astype(float))
    base = run_linear(p, d, r, group, np.full((2, 3), 0.5), 200, eps)
    p3 = np.concatenate([p, np.zeros((1,) + p.shape[1:])])
    more = run_linear(p3, d, r, group, np.full((3, 3), 0.5), 200, eps)
    assert more.G[-1] == pytest.approx(base.G[-1], abs=1e-9)


def test_removed_node_converges_to_fresh_run():
    rng = np.random.default_rng(7)
    p, d, group = instance(rng, N=2)
    r = forward(p, rng.uniform(0.2, 0.8, (2, 3)), d)
    eps = stable_epsilon(p, np.bincount(group)[group].astype(float))
    cut = run_linear(p, d, r, group, np.full((2, 3), 0.5), 3000, eps,
                     schedule={5: ((), (1,))})
    fresh = run_linear(p[:1], d, r, group, np.full((1, 3), 0.5), 3000, eps)
    assert cut.records[-1].node_ids == (0,)
    assert cut.events == [(5, "remove", (1,))]
    assert np.allclose(cut.x_of(0), fresh.x_of(0), atol=1e-3)


def test_adding_compensation_node_mid_run_lowers_G(pm_setup):
    b = pm_setup.bundle
    comp = b.node_index(pm_setup.compensation[0].node_id)
    keep = [i for i in range(len(b.nodes)) if i != comp]
    cfg = OptimizerConfig()
    s = cfg.capture_scale
    fn = linear_capture({n.node_id: b.p[i] for i, n in enumerate(b.nodes)}, b.d)
    x0 = conventional_init(b.r, b.d, b.p, [n.chart for n in b.nodes], b.patch_group)

    def run(schedule):
        agents = [NodeAgent(b.nodes[i].node_id, b.p[i] * s, x0[i].copy()) for i in keep]
        opt = DistributedOptimizer(agents, b.r, b.patch_group, fn, cfg)
        return opt.run(schedule=schedule)

    late = NodeAgent(b.nodes[comp].node_id, b.p[comp] * s, x0[comp].copy())
    frozen = run(None)
    grown = run({5: ((late,), ())})
    assert ("add" in [e[1] for e in grown.events])
    assert grown.G[-1] < frozen.G[-1]


def test_unknown_node_removal_warns():
    p = np.ones((1, 2, 3))
    opt = DistributedOptimizer([NodeAgent(0, p[0], np.zeros(3))], np.ones((2, 3)),
                               np.zeros(2, dtype=int), linear_capture({0: p[0]}, np.zeros((2, 3))),
                               OptimizerConfig(capture_scale=1.0))
    with pytest.warns(UserWarning, match="not part of the run"):
        opt.reconfigure(remove=(42,))
    assert opt.node_ids == (0,)
    with pytest.raises(ValueError, match="already present"):
        opt.reconfigure(add=(NodeAgent(0, p[0], np.zeros(3)),))


def test_decomposed_update_is_bit_identical_to_central_step():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p, d, group = instance(rng, N=4, groups=(24, 24, 5))
        K = np.bincount(group)[group].astype(float)
        x = rng.random((4, 3))
        e = rng.normal(size=d.shape)
        central = step(x, p, e, 1e-3, K)
        for n in range(4):
            agent = NodeAgent(n, p[n], x[n].copy())
            assert np.array_equal(agent.update(e, K, 1e-3), central[n])


def test_channel_permutation_permutes_solution():
    rng = np.random.default_rng(9)
    p, d, group = instance(rng)
    r = rng.uniform(0.1, 1.0, d.shape)
    x0 = rng.random((3, 3))
    eps = stable_epsilon(p, np.bincount(group)[group].astype(float))
    perm = [2, 0, 1]
    a = run_linear(p, d, r, group, x0, 50, eps).final_x
    b = run_linear(p[..., perm], d[:, perm], r[:, perm], group, x0[:, perm], 50, eps).final_x
    assert np.array_equal(a[:, perm], b)


def test_fixed_point_is_invariant():
    rng = np.random.default_rng(10)
    p, d, group = instance(rng)
    x = rng.uniform(0.2, 0.8, (3, 3))
    r = forward(p, x, d)
    K = np.bincount(group)[group].astype(float)
    assert np.array_equal(step(x, p, r - forward(p, x, d), 0.1, K), x)


def test_non_finite_capture_is_numerical_failure():
    p = np.ones((1, 2, 3))
    opt = DistributedOptimizer([NodeAgent(0, p[0], np.zeros(3))], np.ones((2, 3)),
                               np.zeros(2, dtype=int), lambda ids, x: np.full((2, 3), np.nan),
                               OptimizerConfig(capture_scale=1.0))
    with pytest.raises(FloatingPointError):
        opt.run()
    assert len(opt.trace) == 1


def test_capture_failure_keeps_trace():
    p = np.ones((1, 2, 3))
    calls = []

    model = linear_capture({0: p[0]}, np.zeros((2, 3)))

    def flaky(ids, x):
        calls.append(1)
        if len(calls) > 3:
            raise OSError("camera unplugged")
        return model(ids, x)

    opt = DistributedOptimizer([NodeAgent(0, p[0], np.zeros(3))], np.ones((2, 3)),
                               np.zeros(2, dtype=int), flaky,
                               OptimizerConfig(epsilon=0.01, capture_scale=1.0))
    with pytest.raises(CaptureFailure, match="iteration 4"):
        opt.run()
    assert len(opt.trace) == 3


def test_trace_records_membership_per_iteration():
    rng = np.random.default_rng(11)
    p, d, group = instance(rng, N=3)
    r = forward(p, np.full((3, 3), 0.5), d)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        trace = run_linear(p, d, r, group, np.zeros((3, 3)), 10, schedule={3: ((), (2,))})
    assert [len(rec.node_ids) for rec in trace.records] == [3, 3] + [2] * 9
    assert trace.records[0].group_error.shape == (2, 3)
