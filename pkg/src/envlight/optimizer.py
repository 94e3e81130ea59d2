"""Distributed projected-gradient reproduction of a target chart appearance.

Forward model per channel: ``y = sum_n p_n x_n + d``.  The objective is
``G = 1/2 sum (r - y)^2`` over the observed chart patches, and every node
updates its own input from the shared residual alone:

    x_n <- clamp01(x_n + eps * sum_i p_n[i] e[i] / K_i)

with ``K_i`` the patch count of the chart patch ``i`` belongs to.  Inputs are
in [0, 1]; captured readouts and attenuation factors enter the update in
camera code values (``capture_scale``, 255 for 8-bit), which is what makes the
tiny default step useful.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    epsilon: float = 1e-5
    max_iterations: int = 25
    stop_tolerance: float = 1e-8
    capture_scale: float = 255.0
    per_channel: bool = True  # channels are always optimized independently

    def __post_init__(self):
        if not self.epsilon > 0 or not math.isfinite(self.epsilon):
            raise ValueError("epsilon must be a finite number > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.stop_tolerance < 0:
            raise ValueError("stop_tolerance must be >= 0")
        if not self.capture_scale > 0:
            raise ValueError("capture_scale must be > 0")
        if not self.per_channel:
            raise ValueError("channels are always optimized independently")

    @property
    def gain(self) -> float:
        """Step size in [0, 1] units once readouts are expressed in code values."""
        return self.epsilon * self.capture_scale ** 2


def forward(p, x, d) -> np.ndarray:
    """Model readout ``sum_n p[n] x[n] + d``; p (N, I[, C]), x (N[, C]), d (I[, C])."""
    p, x = np.asarray(p, dtype=float), np.asarray(x, dtype=float)
    return np.einsum("ni...,n...->i...", p, x) + np.asarray(d, dtype=float)


def evaluate(r, y):
    """Residual ``e = r - y`` and ``G = 1/2 sum e^2`` over patches (per channel if 2-D)."""
    e = np.asarray(r, dtype=float) - np.asarray(y, dtype=float)
    return e, 0.5 * np.sum(e * e, axis=0)


def _channels(a):
    a = np.asarray(a, dtype=float)
    return [np.ascontiguousarray(a[..., c]) for c in range(a.shape[-1])]


def gradient(p, e) -> np.ndarray:
    """``dG/dx_n = -sum_i p[n, i] e[i]``; p (N, I[, C]), e (I[, C]) -> (N[, C])."""
    p, e = np.asarray(p, dtype=float), np.asarray(e, dtype=float)
    if e.ndim == 1:
        return -(np.ascontiguousarray(p) * e).sum(axis=1)
    return np.stack([-(pc * ec).sum(axis=1) for pc, ec in zip(_channels(p), _channels(e))],
                    axis=-1)


def _per_patch(K, n):
    K = np.broadcast_to(np.asarray(K, dtype=float), (n,))
    if np.any(K <= 0):
        raise ValueError("K must be > 0")
    return K


def step(x, p, e, epsilon: float, K) -> np.ndarray:
    """One clamped update ``clamp01(x + eps * sum_i p[n, i] e[i] / K_i)`` for every node.

    ``K`` is the chart size, either a scalar or one value per patch.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    x, p, e = (np.asarray(a, dtype=float) for a in (x, p, e))
    K = _per_patch(K, e.shape[0])
    if e.ndim == 1:
        return np.clip(x + epsilon * (np.ascontiguousarray(p) * (e / K)).sum(axis=1), 0.0, 1.0)
    ek = e / K[:, None]
    upd = np.stack([(pc * ec).sum(axis=1) for pc, ec in zip(_channels(p), _channels(ek))],
                   axis=-1)
    return np.clip(x + epsilon * upd, 0.0, 1.0)


def conventional_init(r, d, p, assignment, patch_group) -> np.ndarray:
    """Per-node radiometric compensation against its own chart only.

    Each node's input is the median over its assigned chart's patches of
    ``(r - d) / p`` (patches with ``p > 0`` only), clamped to [0, 1].  Nodes
    without a chart, or whose chart they do not reach, start at 0.
    """
    r, d, p = (np.asarray(a, dtype=float) for a in (r, d, p))
    group = np.asarray(patch_group)
    x = np.zeros((p.shape[0], r.shape[1]))
    for n, m in enumerate(assignment):
        if m is None:
            continue
        sel = group == m
        for c in range(r.shape[1]):
            pc = p[n, sel, c]
            ok = pc > 0
            if not ok.any():
                warnings.warn(f"node {n} has no light on its chart {m}; starting at 0",
                              stacklevel=2)
                continue
            raw = (r[sel, c][ok] - d[sel, c][ok]) / pc[ok]
            x[n, c] = np.clip(np.median(raw), 0.0, 1.0)
    return x


# -- distributed run ----------------------------------------------------------------


@dataclass
class NodeAgent:
    """A node's private state: its own attenuation column and its input."""

    node_id: int
    p: np.ndarray          # (I, C) in code values
    x: np.ndarray          # (C,)
    chart: int | None = None

    def update(self, e_scaled, K, epsilon: float) -> np.ndarray:
        """Apply the clamped update from the broadcast residual (code values)."""
        new = np.empty_like(self.x)
        for c in range(len(self.x)):
            pc = np.ascontiguousarray(self.p[:, c])
            ec = np.ascontiguousarray(e_scaled[:, c] / K)
            new[c] = min(1.0, max(0.0, self.x[c] + epsilon * float((pc * ec).sum())))
        self.x = new
        return new


@dataclass
class TraceRecord:
    t: int
    node_ids: tuple[int, ...]
    x: np.ndarray              # (N, C) inputs applied at this iteration
    G: np.ndarray              # (C,)
    group_error: np.ndarray    # (M, C) mean |e| per chart group
    node_groups: tuple = ()

    @property
    def G_total(self) -> float:
        return float(self.G.sum())


@dataclass
class OptimizerTrace:
    records: list[TraceRecord] = field(default_factory=list)
    events: list[tuple[int, str, tuple[int, ...]]] = field(default_factory=list)
    stop_reason: str = ""

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    @property
    def G(self) -> np.ndarray:
        return np.array([r.G_total for r in self.records])

    @property
    def final_x(self) -> np.ndarray:
        return self.records[-1].x

    def x_of(self, node_id: int) -> np.ndarray:
        rec = self.records[-1]
        return rec.x[rec.node_ids.index(node_id)]

    def __len__(self):
        return len(self.records)


class CaptureFailure(RuntimeError):
    pass


class DistributedOptimizer:
    """Barrier-synchronized loop: apply inputs, capture once, broadcast residual, update.

    ``capture_fn(node_ids, x)`` returns the readout ``(I, C)`` of the observed
    patches with node ``node_ids[k]`` driven at ``x[k]``.
    """

    def __init__(self, agents, r, patch_group, capture_fn: Callable, config: OptimizerConfig):
        self.agents: list[NodeAgent] = list(agents)
        self.r = np.asarray(r, dtype=float)
        self.group = np.asarray(patch_group, dtype=int)
        counts = np.bincount(self.group)
        self.K = counts[self.group].astype(float)
        self.capture_fn = capture_fn
        self.config = config
        self.trace = OptimizerTrace()
        self.t = 0

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(a.node_id for a in self.agents)

    def inputs(self) -> np.ndarray:
        return np.array([a.x for a in self.agents]).reshape(len(self.agents), -1)

    def _observe(self):
        ids, x = self.node_ids, self.inputs()
        try:
            y = np.asarray(self.capture_fn(ids, x), dtype=float)
        except Exception as exc:  # keep the trace, report the failure
            raise CaptureFailure(f"capture failed at iteration {self.t}: {exc}") from exc
        e, G = evaluate(self.r, y)
        M = self.group.max() + 1
        err = np.zeros((M, e.shape[1]))
        for m in range(M):
            err[m] = np.abs(e[self.group == m]).mean(axis=0)
        self.trace.append(TraceRecord(self.t, ids, x, np.atleast_1d(G), err,
                                      tuple(a.chart for a in self.agents)))
        if not np.all(np.isfinite(G)):
            raise FloatingPointError(f"non-finite objective at iteration {self.t}")
        return e

    def reconfigure(self, add=(), remove=()) -> None:
        """Change membership before the next capture.

        ``add`` holds new agents (attenuation columns already measured);
        ``remove`` holds node ids.  Unknown ids only produce a warning.
        """
        for nid in remove:
            keep = [a for a in self.agents if a.node_id != nid]
            if len(keep) == len(self.agents):
                warnings.warn(f"node {nid} is not part of the run", stacklevel=2)
                continue
            self.agents = keep
            self.trace.events.append((self.t + 1, "remove", (nid,)))
        for agent in add:
            if agent.node_id in self.node_ids:
                raise ValueError(f"node {agent.node_id} already present")
            self.agents.append(agent)
            self.trace.events.append((self.t + 1, "add", (agent.node_id,)))

    def run(self, iterations: int | None = None, schedule: dict | None = None) -> OptimizerTrace:
        """Run up to ``iterations`` updates (default: the configured maximum).

        ``schedule`` maps an iteration number to ``(add, remove)`` applied
        just before that iteration's capture.
        """
        cfg = self.config
        iterations = cfg.max_iterations if iterations is None else iterations
        s = cfg.capture_scale
        schedule = dict(schedule or {})
        prev = None
        for k in range(iterations + 1):
            if self.t + 1 in schedule:
                self.reconfigure(*schedule[self.t + 1])
                # a membership change moves G; judge improvement from the new set only
                prev = None
            self.t += 1
            e = self._observe()
            G = self.trace.records[-1].G_total
            if k == iterations:
                self.trace.stop_reason = "max_iterations"
                break
            if (prev is not None and prev - G < cfg.stop_tolerance
                    and not any(when > self.t for when in schedule)):
                self.trace.stop_reason = "tolerance"
                break
            prev = G
            e_scaled = e * s
            for a in self.agents:
                a.update(e_scaled, self.K, cfg.epsilon)
        return self.trace


def make_agents(nodes, p, x0, capture_scale: float) -> list[NodeAgent]:
    p = np.asarray(p, dtype=float)
    return [NodeAgent(n.node_id, p[i] * capture_scale, np.array(x0[i], dtype=float), n.chart)
            for i, n in enumerate(nodes)]


def linear_capture(p_by_id: dict, d, noise_stddev: float = 0.0, seed: int = 0) -> Callable:
    """Open-loop capture from the linear model, optionally with read noise."""
    rng = np.random.default_rng(seed)
    d = np.asarray(d, dtype=float)

    def fn(node_ids, x):
        y = d.copy()
        for nid, xi in zip(node_ids, x):
            y = y + p_by_id[nid] * xi
        if noise_stddev > 0:
            y = y + rng.normal(0.0, noise_stddev, y.shape)
        return y
    return fn


def run_distributed(nodes, bundle, capture_fn: Callable, config: OptimizerConfig,
                    x0=None, schedule=None) -> OptimizerTrace:
    """Optimize node inputs against ``bundle.r`` starting from the conventional init."""
    if x0 is None:
        x0 = conventional_init(bundle.r, bundle.d, bundle.p, [n.chart for n in nodes],
                               bundle.patch_group)
    agents = make_agents(nodes, bundle.p, x0, config.capture_scale)
    opt = DistributedOptimizer(agents, bundle.r, bundle.patch_group, capture_fn, config)
    return opt.run(schedule=schedule)
