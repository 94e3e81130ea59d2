"""Measurement protocol: node segmentation, black offsets, attenuation, reference targets.

Everything here talks to the room only through captures, exactly as a
physical rig would: light some nodes, read the chart patches, subtract.
Feathering weights and compensation-node assignment also live here, since
both decide *which pixels* a node drives and by how much.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .capture import LightingState, NoiseModel, Simulator, capture
from .emitters import Footprint, LedLuminaire, ProjectorModel
from .scene import SceneGraph

BUNDLE_VERSION = 1


@dataclass(frozen=True, eq=False)
class ColorChart:
    id: int
    patch_ids: np.ndarray      # (K,) in reflectance order, row-major from the top-left
    reflectances: np.ndarray   # (K, 3)

    def __post_init__(self):
        if len(self.patch_ids) < 1:
            raise ValueError("a chart needs at least one patch")
        r = np.asarray(self.reflectances)
        if r.min() < 0 or r.max() > 1:
            raise ValueError("chart reflectances must lie in [0, 1]")

    @property
    def K(self) -> int:
        return len(self.patch_ids)


def charts_from_scene(scene: SceneGraph) -> list[ColorChart]:
    out = []
    for m in range(scene.n_charts):
        ids = [p.id for p in scene.patches if p.chart == m]
        ids.sort(key=lambda k: scene.patches[k].grid)
        ids = np.array(ids, dtype=int)
        out.append(ColorChart(m, ids, scene.reflectance[ids]))
    return out


@dataclass(eq=False)
class ProjectorNode:
    """A block of projector pixels driven by one RGB input.

    ``weights`` (one per entry of ``pixels``) scale the input pixel by pixel;
    feathering, target masking and compensation shaping all end up there.
    """

    projector_id: str
    node_id: int
    pixels: np.ndarray                       # flat row-major pixel indices
    rect: tuple[int, int, int, int]          # row0, row1, col0, col1 (half-open)
    chart: int | None = None                 # group used by the conventional initializer
    weights: np.ndarray | None = None
    input: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=int)
        self.input = np.clip(np.broadcast_to(np.asarray(self.input, dtype=float), (3,)), 0, 1)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.pixels.shape:
                raise ValueError("one weight per node pixel expected")

    def pixel_weights(self) -> np.ndarray:
        return np.ones(len(self.pixels)) if self.weights is None else self.weights

    def with_weights(self, weights) -> "ProjectorNode":
        return ProjectorNode(self.projector_id, self.node_id, self.pixels, self.rect,
                             self.chart, None if weights is None else np.asarray(weights),
                             self.input.copy())


# -- segmentation ------------------------------------------------------------------


def covered_charts(fp: Footprint, charts, min_fraction: float = 0.5) -> list[int]:
    """Charts with at least ``min_fraction`` of their patches under a central ray."""
    hit = np.unique(fp.central[fp.central >= 0])
    return [c.id for c in charts if np.isin(c.patch_ids, hit).mean() >= min_fraction]


def _split(rect, centers: dict[int, np.ndarray]):
    """Recursively cut ``rect`` between chart centres until each piece holds one chart."""
    if len(centers) <= 1:
        return [(rect, next(iter(centers), None))]
    r0, r1, c0, c1 = rect
    ids = list(centers)
    pts = np.array([centers[m] for m in ids])
    spread = (pts.max(axis=0) - pts.min(axis=0)) / [r1 - r0, c1 - c0]
    for axis in np.argsort(-spread):
        order = np.argsort(pts[:, axis], kind="stable")
        k = len(ids) // 2
        lo, hi = pts[order[k - 1], axis], pts[order[k], axis]
        cut = int(np.floor((lo + hi) / 2)) + 1
        lim = (r0, r1) if axis == 0 else (c0, c1)
        if lo < hi and lim[0] < cut < lim[1]:
            break
    else:
        # charts indistinguishable in pixel space: keep them in one node
        return [(rect, ids[0])]
    first = {ids[i]: centers[ids[i]] for i in order[:k]}
    second = {ids[i]: centers[ids[i]] for i in order[k:]}
    if axis == 0:
        a, b = (r0, cut, c0, c1), (cut, r1, c0, c1)
    else:
        a, b = (r0, r1, c0, cut), (r0, r1, cut, c1)
    return _split(a, first) + _split(b, second)


def segment_nodes(projector: ProjectorModel, fp: Footprint, charts, first_id: int = 0
                  ) -> list[ProjectorNode]:
    """Cut the projector image into rectangles that each light about one chart.

    The image is split recursively between the pixel-space centres of the
    charts it covers, alternating on the axis with the larger spread, so the
    rectangles always partition the image and each holds exactly one chart.
    A projector covering no chart becomes a single whole-image node.
    """
    w, h = projector.image_size
    if not np.any(fp.central >= 0):
        raise ValueError(f"projector {projector.id!r} lights nothing")
    by_id = {c.id: c for c in charts}
    centers = {}
    for m in covered_charts(fp, charts):
        rows, cols = np.nonzero(np.isin(fp.central, by_id[m].patch_ids))
        centers[m] = np.array([rows.mean(), cols.mean()])
    grid = np.arange(h * w).reshape(h, w)
    nodes = []
    for i, (rect, chart) in enumerate(_split((0, h, 0, w), centers)):
        r0, r1, c0, c1 = rect
        nodes.append(ProjectorNode(projector.id, first_id + i, grid[r0:r1, c0:c1].ravel(),
                                   rect, chart))
    return nodes


# -- lighting states -----------------------------------------------------------------


def node_images(sim: Simulator, nodes, x=None, base: dict | None = None) -> dict:
    """Display images for every projector that owns a node or has a base image.

    Node pixels show ``weight * x``; other pixels show the base image (black
    by default).
    """
    images = {pid: np.array(img, dtype=float) for pid, img in (base or {}).items()}
    for i, node in enumerate(nodes):
        xi = node.input if x is None else np.asarray(x[i], dtype=float)
        pid = node.projector_id
        if pid not in images:
            images[pid] = sim.blank_image(pid)
        flat = images[pid].reshape(-1, 3)
        flat[node.pixels] = node.pixel_weights()[:, None] * np.clip(xi, 0, 1)[None, :]
    return images


def nodes_state(sim: Simulator, nodes, x=None, base=None, leds=(), label="") -> LightingState:
    return LightingState(node_images(sim, nodes, x, base), tuple(leds), label)


@dataclass(frozen=True, eq=False)
class BlackOffset:
    d: np.ndarray  # (I, 3)


@dataclass(frozen=True, eq=False)
class AttenuationTensor:
    p: np.ndarray  # (N, I, 3)


@dataclass(frozen=True, eq=False)
class TargetAppearance:
    r: np.ndarray  # (I, 3)
    source: str


def measure_black_offset(sim: Simulator, nodes, patch_ids, base=None,
                         noise: NoiseModel | None = None) -> BlackOffset:
    """Chart readout with every node at 0 and the reference luminaire off."""
    x = np.zeros((len(nodes), 3))
    frame = capture(sim, nodes_state(sim, nodes, x, base, label="black"), noise)
    return BlackOffset(np.clip(frame.values[np.asarray(patch_ids)], 0, None))


def measure_attenuation(sim: Simulator, nodes, patch_ids, d: BlackOffset, base=None,
                        noise: NoiseModel | None = None, which=None) -> AttenuationTensor:
    """One capture per node at full white with the rest at 0, minus the black offset.

    ``which`` restricts the probing to a subset of node indices (the others
    get zero columns); used when nodes join a running optimization.
    """
    N = len(nodes)
    ids = np.asarray(patch_ids)
    p = np.zeros((N, len(ids), 3))
    todo = range(N) if which is None else which
    for n in todo:
        x = np.zeros((N, 3))
        x[n] = 1.0
        seed_noise = None
        if noise is not None:
            seed_noise = NoiseModel(noise.stddev, noise.seed + 1 + n)
        frame = capture(sim, nodes_state(sim, nodes, x, base, label=f"node{nodes[n].node_id}"),
                        seed_noise)
        p[n] = np.clip(frame.values[ids] - d.d, 0, None)
    return AttenuationTensor(p)


def capture_reference_target(sim: Simulator, luminaire: LedLuminaire, patch_ids, nodes=(),
                             include_black: bool = False, base=None,
                             noise: NoiseModel | None = None) -> TargetAppearance:
    """Chart readout under the reference luminaire.

    Projectors are off unless ``include_black``, in which case every node
    shows 0 and its black floor adds to the reading.
    """
    if include_black:
        state = nodes_state(sim, nodes, np.zeros((len(nodes), 3)), base, [luminaire])
    else:
        state = LightingState({}, (luminaire,))
    state.label = f"reference:{luminaire.name}"
    frame = capture(sim, state, noise)
    return TargetAppearance(frame.values[np.asarray(patch_ids)], luminaire.name)


# -- feathering ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatherMask:
    weights: dict  # projector id -> (h, w) weights in [0, 1]


def feather_weights(footprints: dict, n_patches: int) -> FeatherMask:
    """Blend weights from each pixel's city-block distance to its footprint edge.

    A projector's share of a patch is the mean edge distance of its pixels
    landing there, normalized over every projector landing on that patch;
    pixels take the share of the patch they land on.  Patches lit by a single
    projector keep weight 1.
    """
    dist, share = {}, np.zeros((len(footprints), n_patches))
    pids = sorted(footprints)
    for j, pid in enumerate(pids):
        central = footprints[pid].central
        lit = np.pad(central >= 0, 1)
        D = ndimage.distance_transform_cdt(lit, metric="taxicab")[1:-1, 1:-1].astype(float)
        dist[pid] = D
        hit = central >= 0
        tot = np.bincount(central[hit], weights=D[hit], minlength=n_patches)
        cnt = np.bincount(central[hit], minlength=n_patches)
        share[j] = np.divide(tot, cnt, out=np.zeros(n_patches), where=cnt > 0)
    total = share.sum(axis=0)
    out = {}
    for j, pid in enumerate(pids):
        central = footprints[pid].central
        frac = np.divide(share[j], total, out=np.ones(n_patches), where=total > 0)
        W = np.ones(central.shape)
        hit = central >= 0
        W[hit] = frac[central[hit]]
        out[pid] = W
    return FeatherMask(out)


# -- compensation after masking ----------------------------------------------------------


def assign_compensation(darkened, lost, projector: ProjectorModel, fp: Footprint,
                        target_patches=(), first_id: int = 0, chart: int | None = None,
                        max_gain: float = 2.0):
    """Turn the texture-projector pixels that land on darkened patches into one node.

    ``lost`` is the per-patch irradiance to restore (what masking removed, or
    a measured shortfall).  A pixel's weight follows that amount divided by
    what the texture projector can deliver on the pixel's patch.  Ratios are
    capped at ``max_gain`` and scaled so the cap maps to weight 1; patches
    the projector barely reaches therefore get all it has without flattening
    everyone else's weights.  Returns ``(nodes, uncompensatable)``, the second item listing
    darkened patches no usable pixel lands on.
    """
    darkened = sorted(int(k) for k in darkened)
    if not darkened:
        return [], []
    target = [int(k) for k in target_patches]
    central = fp.central.ravel()
    use = np.isin(central, darkened) & ~np.isin(central, target)
    reached = set(np.unique(central[use]).tolist())
    missing = [k for k in darkened if k not in reached]
    if not use.any():
        return [], missing
    pixels = np.nonzero(use)[0]
    full = np.asarray(fp.transport[:, pixels].sum(axis=1)).ravel()
    k = central[pixels]
    ratio = np.divide(np.asarray(lost)[k], full[k], out=np.zeros(len(k)), where=full[k] > 0)
    if ratio.max() <= 0:
        return [], darkened
    cap = min(max_gain, ratio.max())
    weights = np.minimum(ratio, cap) / cap
    w = fp.central.shape[1]
    rows, cols = pixels // w, pixels % w
    rect = (int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1)
    node = ProjectorNode(projector.id, first_id, pixels, rect, chart, weights)
    return [node], missing


# -- bundle --------------------------------------------------------------------------------


@dataclass(eq=False)
class CalibrationBundle:
    """Everything the optimizer needs, independent of the live simulator."""

    nodes: list[ProjectorNode]
    patch_ids: np.ndarray            # (I,) observed patches
    patch_group: np.ndarray          # (I,) chart (or extra group) of each observed patch
    d: np.ndarray                    # (I, 3)
    p: np.ndarray                    # (N, I, 3)
    targets: dict[str, np.ndarray]   # reference name -> (I, 3)
    reference: str
    feather: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return int(self.patch_group.max()) + 1 if len(self.patch_group) else 0

    def group_sizes(self) -> np.ndarray:
        """K per observed patch: the number of patches in its group."""
        counts = np.bincount(self.patch_group)
        return counts[self.patch_group].astype(float)

    @property
    def r(self) -> np.ndarray:
        return self.targets[self.reference]

    def node_index(self, node_id: int) -> int:
        for i, n in enumerate(self.nodes):
            if n.node_id == node_id:
                return i
        raise KeyError(node_id)

    def to_dict(self) -> dict:
        return {
            "version": BUNDLE_VERSION,
            "meta": self.meta,
            "reference": self.reference,
            "patch_ids": self.patch_ids.tolist(),
            "patch_group": self.patch_group.tolist(),
            "d": self.d.tolist(),
            "p": self.p.tolist(),
            "targets": {k: v.tolist() for k, v in self.targets.items()},
            "feather": {k: np.asarray(v).tolist() for k, v in self.feather.items()},
            "nodes": [{
                "projector": n.projector_id,
                "node_id": n.node_id,
                "rect": list(n.rect),
                "chart": n.chart,
                "pixels": n.pixels.tolist(),
                "weights": None if n.weights is None else n.weights.tolist(),
            } for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationBundle":
        if doc.get("version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported calibration bundle version {doc.get('version')!r}")
        nodes = [ProjectorNode(n["projector"], n["node_id"], np.array(n["pixels"], dtype=int),
                               tuple(n["rect"]), n["chart"],
                               None if n["weights"] is None else np.array(n["weights"]))
                 for n in doc["nodes"]]
        N, I = len(nodes), len(doc["patch_ids"])
        return cls(
            nodes=nodes,
            patch_ids=np.array(doc["patch_ids"], dtype=int),
            patch_group=np.array(doc["patch_group"], dtype=int),
            d=np.array(doc["d"], dtype=float).reshape(I, 3),
            p=np.array(doc["p"], dtype=float).reshape(N, I, 3),
            targets={k: np.array(v, dtype=float).reshape(I, 3) for k, v in doc["targets"].items()},
            reference=doc["reference"],
            feather={k: np.array(v, dtype=float) for k, v in doc["feather"].items()},
            meta=doc.get("meta", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "CalibrationBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def calibrate(sim: Simulator, charts, leds: dict, reference: str, *, projector_ids=None,
              extra_nodes=(), extra_patches=(), masks=None, base=None,
              noise: NoiseModel | None = None, feather: bool = True,
              meta=None) -> CalibrationBundle:
    """Run the whole protocol: segment, feather, black offset, attenuation, references.

    ``masks`` (projector id -> (h, w) on/off image) switch pixels off on top of
    feathering.  ``extra_nodes`` (already built, e.g. compensation nodes) are
    appended to the segmented ones; ``extra_patches`` become one more observed
    group after the charts.  Chart coverage by the segmented nodes is checked
    here.
    """
    if projector_ids is None:
        projector_ids = [pid for pid, p in sorted(sim.projectors.items()) if p.role == "luminaire"]
    nodes: list[ProjectorNode] = []
    for pid in projector_ids:
        nodes += segment_nodes(sim.projectors[pid], sim.footprints[pid], charts, len(nodes))
    fm = FeatherMask({})
    if feather:
        fm = feather_weights({pid: sim.footprints[pid] for pid in projector_ids}, len(sim.scene))
        nodes = [n.with_weights(fm.weights[n.projector_id].ravel()[n.pixels]
                                * n.pixel_weights()) for n in nodes]
    for pid, mask in (masks or {}).items():
        nodes = [n.with_weights(np.asarray(mask).ravel()[n.pixels] * n.pixel_weights())
                 if n.projector_id == pid else n for n in nodes]
    covered = {n.chart for n in nodes}
    missing = [c.id for c in charts if c.id not in covered]
    if missing:
        raise ValueError(f"charts not covered by any luminaire node: {missing}")
    for n in extra_nodes:
        nodes.append(ProjectorNode(n.projector_id, len(nodes), n.pixels, n.rect, n.chart,
                                   n.weights))

    patch_ids = np.concatenate([c.patch_ids for c in charts]
                               + [np.asarray(extra_patches, dtype=int)])
    group = np.concatenate([np.full(c.K, i) for i, c in enumerate(charts)]
                           + [np.full(len(extra_patches), len(charts))]).astype(int)
    d = measure_black_offset(sim, nodes, patch_ids, base, noise)
    p = measure_attenuation(sim, nodes, patch_ids, d, base, noise)
    targets = {}
    for name in sorted(leds):
        ref_noise = None if noise is None else NoiseModel(noise.stddev, noise.seed + 10_000)
        targets[name] = capture_reference_target(sim, leds[name], patch_ids, noise=ref_noise).r
    if reference not in targets:
        raise ValueError(f"unknown reference lighting {reference!r}")
    if np.any(p.p.sum(axis=0).max(axis=1) <= 0):
        warnings.warn("some observed patches receive no light from any node", stacklevel=2)
    return CalibrationBundle(nodes, patch_ids, group, d.d, p.p, targets, reference,
                             {k: v for k, v in fm.weights.items()}, dict(meta or {}))


def simulator_capture(sim: Simulator, nodes, patch_ids, base=None, leds=(),
                      noise: NoiseModel | None = None):
    """Closed-loop capture function for the optimizer: light the nodes, read the charts.

    Read noise draws a fresh seed per call so repeated captures differ, while
    the whole sequence stays reproducible.
    """
    by_id = {n.node_id: n for n in nodes}
    ids = np.asarray(patch_ids)
    calls = [0]

    def fn(node_ids, x):
        active = [by_id[i] for i in node_ids]
        frame_noise = None
        if noise is not None and noise.stddev > 0:
            frame_noise = NoiseModel(noise.stddev, noise.seed + 100_000 + calls[0])
        calls[0] += 1
        state = nodes_state(sim, active, x, base, leds)
        return capture(sim, state, frame_noise).values[ids]
    return fn
