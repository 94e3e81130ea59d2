"""End-to-end experiments on a configured room.

``Rig`` bundles the simulator with the charts and reference luminaires of a
configuration.  On top of it sit the three experiments the command line
exposes: calibration, reproduction of a reference lighting (conventional
start, then distributed optimization), and projection mapping with the
large-aperture projector masked around the target and the texture projector
filling in the light that masking removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import (CalibrationBundle, calibrate, charts_from_scene, nodes_state,
                          simulator_capture, assign_compensation)
from .capture import (CaptureFrame, LightingState, NoiseModel, Simulator, build_simulator,
                      capture, leds_from_config)
from .config import SceneConfig
from .emitters import MaskResult, emit_node, mask_target_with_margin
from .metrics import ansi_ratio, checker_cells, checker_image, rms_contrast
from .optimizer import OptimizerConfig, OptimizerTrace, conventional_init, run_distributed

CONDITIONS = ("dark", "typical", "proposed")


@dataclass(eq=False)
class Rig:
    config: SceneConfig
    sim: Simulator
    charts: list
    leds: dict
    noise: NoiseModel | None

    @property
    def scene(self):
        return self.sim.scene


def build_rig(config: SceneConfig) -> Rig:
    sim = build_simulator(config)
    charts = charts_from_scene(sim.scene)
    noise = None
    if config.simulation.noise_stddev > 0:
        noise = NoiseModel(config.simulation.noise_stddev, config.seed)
    return Rig(config, sim, charts, leds_from_config(config), noise)


def optimizer_config(config: SceneConfig, **overrides) -> OptimizerConfig:
    o = config.optimizer
    kw = dict(epsilon=o.epsilon, max_iterations=o.max_iterations,
              stop_tolerance=o.stop_tolerance, capture_scale=o.capture_scale)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return OptimizerConfig(**kw)


def calibrate_rig(rig: Rig, **kw) -> CalibrationBundle:
    if not rig.charts:
        raise ValueError("the scene has no colour charts to calibrate against")
    if not rig.leds:
        raise ValueError("the scene has no reference LED lighting")
    meta = {"seed": rig.config.seed, "charts": len(rig.charts)}
    return calibrate(rig.sim, rig.charts, rig.leds, default_reference(rig.config), noise=rig.noise,
                     meta=meta, **kw)


def default_reference(config: SceneConfig) -> str:
    """The configured projection-mapping reference, else the first LED."""
    return config.pm.reference or config.leds[0].name


# -- reproduction ------------------------------------------------------------------


@dataclass(eq=False)
class Reproduction:
    reference: str
    trace: OptimizerTrace
    x_conventional: np.ndarray
    x_final: np.ndarray
    frame_reference: CaptureFrame
    frame_conventional: CaptureFrame
    frame_final: CaptureFrame
    patch_ids: np.ndarray
    patch_group: np.ndarray

    def chart_errors(self, which: str = "final") -> np.ndarray:
        """Signed readout error ``y - r`` (I, 3) on the observed patches (noiseless frames)."""
        frame = self.frame_final if which == "final" else self.frame_conventional
        return frame.linear[self.patch_ids] - self.frame_reference.linear[self.patch_ids]

    def mae(self, which: str = "final", group=None) -> float:
        e = self.chart_errors(which)
        if group is not None:
            e = e[np.isin(self.patch_group, np.atleast_1d(group))]
        return float(np.abs(e).mean())


def reproduce(rig: Rig, bundle: CalibrationBundle, reference: str | None = None,
              opt: OptimizerConfig | None = None, base=None, schedule=None) -> Reproduction:
    """Conventional start, then closed-loop distributed optimization against ``reference``."""
    reference = reference or bundle.reference
    if reference not in bundle.targets:
        raise KeyError(f"bundle has no target for reference {reference!r}")
    opt = opt or optimizer_config(rig.config)
    r = bundle.targets[reference]
    nodes = bundle.nodes
    x0 = conventional_init(r, bundle.d, bundle.p, [n.chart for n in nodes], bundle.patch_group)
    fn = simulator_capture(rig.sim, nodes, bundle.patch_ids, base=base, noise=rig.noise)
    view = CalibrationBundle(nodes, bundle.patch_ids, bundle.patch_group, bundle.d, bundle.p,
                             {reference: r}, reference)
    trace = run_distributed(nodes, view, fn, opt, x0=x0, schedule=schedule)
    rec = trace.records[-1]
    by_id = {n.node_id: n for n in nodes}
    final_nodes = [by_id[i] for i in rec.node_ids]
    led = rig.leds[reference]
    return Reproduction(
        reference, trace, x0, rec.x,
        capture(rig.sim, LightingState({}, (led,), f"reference:{reference}")),
        capture(rig.sim, nodes_state(rig.sim, nodes, x0, base, label="conventional")),
        capture(rig.sim, nodes_state(rig.sim, final_nodes, rec.x, base, label="proposed")),
        bundle.patch_ids, bundle.patch_group)


# -- projection mapping ------------------------------------------------------------


@dataclass(eq=False)
class PMSetup:
    bundle: CalibrationBundle
    masks: dict[str, MaskResult]
    compensation: list
    uncompensatable: list
    darkened: list
    texture_id: str
    white: np.ndarray
    black: np.ndarray
    checker: np.ndarray

    @property
    def extra_group(self) -> int:
        return int(self.bundle.patch_group.max())


@dataclass(frozen=True)
class ContrastReport:
    condition: str
    rms_contrast: float
    ansi_ratio: float


def prepare_pm(rig: Rig, shape: str = "shortfall", refine: int = 3) -> PMSetup:
    """Mask large-aperture luminaires around the target and recalibrate with compensation.

    The darkened patches that the texture projector can reach become an
    extra observed group, and the compensation node is assigned to it.  With
    ``shape="shortfall"`` the node's pixel weights follow the irradiance the
    darkened patches still miss after optimizing the masked rig without it;
    ``shape="lost"`` uses the irradiance masking removed instead.  The
    shortfall shape is refined ``refine`` times: each round adds what the
    compensation node already supplies to what is still missing.
    """
    if shape not in ("shortfall", "lost"):
        raise ValueError(f"unknown compensation shape {shape!r}")
    sim, scene = rig.sim, rig.scene
    tex_id = rig.config.pm.texture_projector
    if tex_id not in sim.projectors:
        raise ValueError(f"texture projector {tex_id!r} is not configured")
    target = scene.tagged("target")
    masks, darkened, lost = {}, set(), np.zeros(len(scene))
    for pid, proj in sorted(sim.projectors.items()):
        if proj.kind != "large-aperture" or proj.role != "luminaire":
            continue
        res = mask_target_with_margin(proj, sim.footprints[pid], target,
                                      rig.config.pm.darkened_threshold)
        masks[pid] = res
        darkened |= set(res.darkened)
        lost += res.lost
    on_off = {k: v.mask for k, v in masks.items()}
    chart_patches = set(np.concatenate([c.patch_ids for c in rig.charts]).tolist())
    tex, tex_fp = sim.projectors[tex_id], sim.footprints[tex_id]
    _, missing = assign_compensation(darkened, lost, tex, tex_fp, target)
    reached = sorted(k for k in darkened if k not in missing and k not in chart_patches)

    need = lost
    comp = []
    rounds = refine if shape == "shortfall" and reached else 0
    for _ in range(rounds):
        trial = calibrate_rig(rig, masks=on_off, extra_nodes=comp, extra_patches=reached)
        rep = reproduce(rig, trial)
        rho = scene.reflectance
        short = (rep.frame_reference.linear - rep.frame_final.linear) / np.where(rho > 0, rho, 1)
        supplied = np.zeros(len(scene))
        for node in trial.nodes:
            if node.projector_id == tex_id:
                i = list(rep.trace.records[-1].node_ids).index(node.node_id)
                supplied += emit_node(node, tex, tex_fp, rep.x_final[i]).mean(axis=1)
        need = np.clip(supplied + short.mean(axis=1), 0, None)
        comp, _ = assign_compensation(darkened, need, tex, tex_fp, target,
                                      chart=len(rig.charts))
    if not rounds:
        comp, _ = assign_compensation(darkened, need, tex, tex_fp, target,
                                      chart=len(rig.charts))
    if not reached:
        comp = []
    bundle = calibrate_rig(rig, masks=on_off, extra_nodes=comp, extra_patches=reached)
    white, black = checker_cells(scene)
    checker = checker_image(tex, tex_fp, white)
    return PMSetup(bundle, masks, [n for n in bundle.nodes if n.projector_id == tex_id],
                   sorted(missing), sorted(darkened), tex_id, white, black, checker)


def pm_states(rig: Rig, setup: PMSetup, x_final, texture=None, reference: str | None = None
              ) -> dict[str, LightingState]:
    """Lighting states of the three conditions with ``texture`` on the texture projector."""
    tex = setup.checker if texture is None else np.asarray(texture, dtype=float)
    led = rig.leds[reference or setup.bundle.reference]
    base = {setup.texture_id: tex}
    return {
        "dark": LightingState({setup.texture_id: tex}, (), "dark"),
        "typical": LightingState({setup.texture_id: tex}, (led,), "typical"),
        "proposed": nodes_state(rig.sim, setup.bundle.nodes, x_final, base, label="proposed"),
    }


def contrast_reports(rig: Rig, setup: PMSetup, x_final, texture=None, conditions=CONDITIONS,
                     reference: str | None = None) -> dict[str, ContrastReport]:
    """RMS contrast of the texture on the target top and checker (ANSI) contrast per condition."""
    region = rig.scene.group("target-top")
    tex_states = pm_states(rig, setup, x_final, texture, reference)
    chk_states = pm_states(rig, setup, x_final, None, reference)
    out = {}
    for cond in conditions:
        rms = rms_contrast(capture(rig.sim, tex_states[cond]).values, region)
        ansi = ansi_ratio(capture(rig.sim, chk_states[cond]).values, setup.white, setup.black)
        out[cond] = ContrastReport(cond, rms, ansi)
    return out
