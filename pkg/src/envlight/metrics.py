"""Contrast measures, pinhole rendering of patch colours, and trace export."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .config import CameraSpec
from .emitters import make_projector
from .scene import SceneGraph, cast_rays

REC709 = np.array([0.2126, 0.7152, 0.0722])
INFINITE_CONTRAST = math.inf


def luminance(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=float) @ REC709


def rms_contrast(values, region=None) -> float:
    """Standard deviation of luminance over ``region`` divided by its mean (0 if mean is 0)."""
    v = np.asarray(values, dtype=float)
    if region is not None:
        region = np.asarray(region)
        v = v[region.astype(int) if region.size == 0 else region]
    if len(v) == 0:
        raise ValueError("region is empty")
    lum = luminance(v) if v.ndim == 2 else v
    mean = lum.mean()
    if mean == 0:
        return 0.0
    return float(lum.std() / mean)


def ansi_ratio(values, white, black) -> float:
    """Mean luminance of the ``white`` patches over that of the ``black`` ones."""
    v = np.asarray(values, dtype=float)
    lw = luminance(v[np.asarray(white)]).mean()
    lb = luminance(v[np.asarray(black)]).mean()
    if lb == 0:
        return INFINITE_CONTRAST
    return float(lw / lb)


def checker_cells(scene: SceneGraph, group: str = "target-top", cells: int = 4,
                  phase: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split a gridded patch group into the white and black cells of a checkerboard."""
    ids = scene.group(group)
    if len(ids) == 0:
        raise ValueError(f"no patches in group {group!r}")
    grid = np.array([scene.patches[k].grid for k in ids])
    nj, ni = grid.max(axis=0) + 1
    if nj < cells or ni < cells:
        raise ValueError(f"group {group!r} has fewer than {cells}x{cells} patches")
    cj = grid[:, 0] * cells // nj
    ci = grid[:, 1] * cells // ni
    white = (cj + ci + phase) % 2 == 0
    return ids[white], ids[~white]


def checker_image(projector, fp, white_patches) -> np.ndarray:
    """Texture image that lights exactly the pixels landing on ``white_patches``."""
    w, h = projector.image_size
    on = np.isin(fp.central, np.asarray(white_patches)).astype(float)
    return np.repeat(on[..., None], 3, axis=2).reshape(h, w, 3)


def transition_width(positions, values, lo: float = 0.1, hi: float = 0.9) -> float:
    """Distance over which a shadow edge profile rises from ``lo`` to ``hi``.

    ``values`` is a profile normalized to 0 (shadow) and 1 (lit) sampled at
    ``positions``; a falling profile is mirrored first.  Crossings are
    linearly interpolated between samples.
    """
    x = np.asarray(positions, dtype=float)
    v = np.asarray(values, dtype=float)
    order = np.argsort(x)
    x, v = x[order], v[order]
    if v[0] > v[-1]:
        x, v = x[::-1], v[::-1]

    def crossing(level):
        k = int(np.argmax(v >= level))
        if v[k] < level:
            raise ValueError(f"profile never reaches {level}")
        if k == 0:
            return x[0]
        f = (level - v[k - 1]) / (v[k] - v[k - 1])
        return x[k - 1] + f * (x[k] - x[k - 1])

    return float(abs(crossing(hi) - crossing(lo)))


# -- rendering ------------------------------------------------------------------------


def render_view(scene: SceneGraph, values, camera=None, resolution=None) -> np.ndarray:
    """Pinhole view of per-patch colours as an 8-bit (H, W, 3) image; tone map = clamp.

    ``camera`` is a :class:`~envlight.config.CameraSpec` (default view if
    omitted); ``resolution`` (width, height) overrides its own.
    """
    cam = camera or CameraSpec()
    res = tuple(resolution or cam.resolution)
    if min(res) < 1:
        raise ValueError("resolution must be at least 1x1")
    pin = make_projector("camera", cam.position, cam.look_at, up=cam.up, image_size=res,
                         half_angles_deg=cam.half_angles_deg, black_level=(0, 0, 0))
    dirs = pin.pixel_directions()
    hits = cast_rays(scene, np.broadcast_to(pin.position, dirs.shape), dirs)
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    img = np.zeros((len(dirs), 3))
    ok = hits.patch >= 0
    img[ok] = v[hits.patch[ok]]
    w, h = res
    return np.round(img * 255).astype(np.uint8).reshape(h, w, 3)


def write_ppm(image, path) -> None:
    """Binary 8-bit portable pixmap."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(img).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: only binary 8-bit PPM (P6) is supported")
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ValueError(f"{path}: truncated PPM header")
        if data[pos:pos + 1] == b"#":
            pos = data.find(b"\n", pos) + 1 or len(data)
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ValueError(f"{path}: only binary 8-bit PPM (P6) is supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3)


# -- trace export -----------------------------------------------------------------------

TRACE_HEADER = ("t", "chart", "mean_abs_error", "G", "node", "channel", "x")


def trace_rows(trace):
    """One row per (iteration, node, channel): the node's chart error and that channel's G."""
    for rec in trace.records:
        for k, nid in enumerate(rec.node_ids):
            chart = rec.node_groups[k] if rec.node_groups else None
            for c in range(rec.x.shape[1]):
                err = rec.group_error[chart, c] if chart is not None else float("nan")
                yield (rec.t, "" if chart is None else chart, f"{err:.10g}",
                       f"{rec.G[c]:.10g}", nid, "RGB"[c], f"{rec.x[k, c]:.10g}")


def export_trace(trace, path) -> None:
    """Write the trace as comma-separated text with the documented header."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    writer.writerows(trace_rows(trace))
    path = Path(path)
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write trace {path}: {exc}") from exc


def convergence_rows(trace):
    """Header and one row per iteration: total G and mean |e| of every chart group."""
    M = trace.records[0].group_error.shape[0]
    yield ("t", "G") + tuple(f"group_{m}" for m in range(M))
    for rec in trace.records:
        yield (rec.t, f"{rec.G_total:.10g}") + tuple(
            f"{v:.10g}" for v in rec.group_error.mean(axis=1))


def write_rows(rows, path) -> None:
    """Comma-separated text with Unix line endings."""
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path = Path(path)
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_rows(path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))
