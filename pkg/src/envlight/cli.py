"""Command line: calibrate, reproduce, projection mapping and report stages.

Every stage reads and writes files under ``--out`` so it can be rerun on its
own::

    out/
      manifest.json                 run settings
      calibration.json              calibration bundle
      reproduce/summary.csv         one row per reference lighting
      reproduce/<ref>/trace.csv     per (iteration, node, channel)
      reproduce/<ref>/convergence.csv
      reproduce/<ref>/charts.csv    per-chart error, conventional vs optimized
      reproduce/<ref>/view_*.ppm    reference, conventional, proposed
      pm/calibration_pm.json        masked bundle with the compensation node
      pm/trace.csv, pm/convergence.csv
      pm/darkened.csv               darkened patches and whether they are reachable
      pm/contrast.csv               RMS and checker contrast per condition
      pm/view_*.ppm                 one per condition
      figures/*.png                 written by the report stage

Exit codes: 0 success, 2 configuration error, 3 precondition failure,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .calibration import CalibrationBundle
from .capture import capture
from .config import ConfigError, default_config_text, loads_config
from .metrics import (convergence_rows, export_trace, read_ppm, read_rows,
                      render_view, write_ppm, write_rows)
from .pipeline import (CONDITIONS, ContrastReport, build_rig, calibrate_rig, contrast_reports,
                       optimizer_config, pm_states, prepare_pm, reproduce)

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3, 4
STAGES = ("calibrate", "reproduce", "pm", "report")


class PreconditionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunManifest:
    config: str | None
    seed: int
    out: str
    conditions: tuple[str, ...]
    stages: tuple[str, ...]
    iterations: int | None = None
    epsilon: float | None = None
    texture: str | None = None
    config_sha256: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"


def _say(*fields) -> None:
    print(",".join(str(f) for f in fields))


def _load(args):
    """Parse the configuration and apply command-line overrides."""
    if args.config is None:
        text = default_config_text()
    else:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {args.config}: {exc.strerror}") from None
    config = loads_config(text)
    if args.seed is not None:
        config = config.with_changes(seed=args.seed)
    if args.epsilon is not None and not (args.epsilon > 0 and math.isfinite(args.epsilon)):
        raise ConfigError("--epsilon", "must be a finite number > 0")
    if args.iterations is not None and args.iterations < 1:
        raise ConfigError("--iterations", "must be >= 1")
    digest = hashlib.sha256(f"{text}\nseed={config.seed}".encode()).hexdigest()
    conditions = CONDITIONS if args.condition == "all" else (args.condition,)
    stages = STAGES if args.command == "run" else (args.command,)
    manifest = RunManifest(args.config, config.seed, str(args.out), conditions, stages,
                           args.iterations, args.epsilon, args.texture, digest)
    return config, manifest


def _out(manifest: RunManifest, *parts) -> Path:
    path = Path(manifest.out, *parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_bundle(path: Path, manifest: RunManifest) -> CalibrationBundle:
    if not path.exists():
        raise PreconditionError(f"no calibration bundle at {path}; run `envlight calibrate` "
                                f"with the same --config, --seed and --out first")
    bundle = CalibrationBundle.load(path)
    if bundle.meta.get("config_sha256") != manifest.config_sha256:
        raise PreconditionError(f"{path} was calibrated for a different configuration or "
                                f"seed; rerun `envlight calibrate`")
    return bundle


def _view(rig, frame, path) -> None:
    write_ppm(render_view(rig.scene, frame.values, rig.config.camera), path)


# -- stages -------------------------------------------------------------------------


def cmd_calibrate(rig, manifest: RunManifest) -> Path:
    try:
        bundle = calibrate_rig(rig)
    except ValueError as exc:
        raise PreconditionError(f"calibration failed: {exc}") from None
    bundle.meta["config_sha256"] = manifest.config_sha256
    path = _out(manifest, "calibration.json")
    bundle.save(path)
    _say("calibrate", "nodes", len(bundle.nodes), "charts", bundle.n_groups,
         "patches", len(bundle.patch_ids))
    return path


def _chart_rows(rep):
    yield ("group", "patches", "mae_conventional", "mae_final", "signed_conventional",
           "signed_final")
    for m in range(int(rep.patch_group.max()) + 1):
        sel = rep.patch_group == m
        ec, ef = rep.chart_errors("conventional")[sel], rep.chart_errors("final")[sel]
        yield (m, int(sel.sum()), f"{np.abs(ec).mean():.10g}", f"{np.abs(ef).mean():.10g}",
               f"{ec.mean():.10g}", f"{ef.mean():.10g}")


def _write_reproduction(rig, rep, folder: tuple[str, ...], manifest: RunManifest) -> None:
    export_trace(rep.trace, _out(manifest, *folder, "trace.csv"))
    write_rows(convergence_rows(rep.trace), _out(manifest, *folder, "convergence.csv"))
    write_rows(_chart_rows(rep), _out(manifest, *folder, "charts.csv"))


def cmd_reproduce(rig, manifest: RunManifest) -> list:
    bundle = _load_bundle(Path(manifest.out, "calibration.json"), manifest)
    opt = optimizer_config(rig.config, epsilon=manifest.epsilon,
                           max_iterations=manifest.iterations)
    summary = [("reference", "iterations", "stop_reason", "G_conventional", "G_final",
                "G_ratio", "mae_conventional", "mae_final")]
    reps = []
    for ref in sorted(bundle.targets):
        rep = reproduce(rig, bundle, ref, opt)
        reps.append(rep)
        _write_reproduction(rig, rep, ("reproduce", ref), manifest)
        for name, frame in (("reference", rep.frame_reference),
                            ("conventional", rep.frame_conventional),
                            ("proposed", rep.frame_final)):
            _view(rig, frame, _out(manifest, "reproduce", ref, f"view_{name}.ppm"))
        G = rep.trace.G
        row = (ref, len(G) - 1, rep.trace.stop_reason, f"{G[0]:.10g}", f"{G[-1]:.10g}",
               f"{G[-1] / G[0]:.6g}", f"{rep.mae('conventional'):.6g}", f"{rep.mae():.6g}")
        summary.append(row)
        _say("reproduce", *row)
        err = rep.trace.records[-1].group_error.mean(axis=1)
        _say("chart_error", ref, *(f"{v:.5f}" for v in err))
    write_rows(summary, _out(manifest, "reproduce", "summary.csv"))
    return reps


def load_texture(path, size: tuple[int, int]) -> np.ndarray:
    """Texture from a binary PPM or a ``.npy`` array, as linear [0, 1] (h, w, 3)."""
    path = Path(path)
    if not path.exists():
        raise PreconditionError(f"texture image {path} not found")
    if path.suffix == ".npy":
        img = np.load(path).astype(float)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
    else:
        try:
            img = read_ppm(path).astype(float) / 255.0
        except ValueError as exc:
            raise PreconditionError(str(exc)) from None
    w, h = size
    if img.shape != (h, w, 3):
        raise PreconditionError(f"texture {path} is {img.shape[1]}x{img.shape[0]}, "
                                f"the texture projector expects {w}x{h}")
    if img.min() < 0 or img.max() > 1:
        raise PreconditionError(f"texture {path} has values outside [0, 1]")
    return img


def cmd_pm(rig, manifest: RunManifest) -> dict:
    _load_bundle(Path(manifest.out, "calibration.json"), manifest)
    tex_id = rig.config.pm.texture_projector
    if tex_id is None or tex_id not in rig.sim.projectors:
        raise PreconditionError("no texture projector configured ([pm] texture_projector)")
    texture = None
    if manifest.texture is not None:
        texture = load_texture(manifest.texture, rig.sim.projectors[tex_id].image_size)
    try:
        setup = prepare_pm(rig)
    except ValueError as exc:
        raise PreconditionError(f"projection mapping setup failed: {exc}") from None
    setup.bundle.meta["config_sha256"] = manifest.config_sha256
    setup.bundle.save(_out(manifest, "pm", "calibration_pm.json"))
    opt = optimizer_config(rig.config, epsilon=manifest.epsilon,
                           max_iterations=manifest.iterations)
    rep = reproduce(rig, setup.bundle, opt=opt)
    _write_reproduction(rig, rep, ("pm",), manifest)

    missing = set(setup.uncompensatable)
    write_rows([("patch", "reachable")] + [(k, int(k not in missing)) for k in setup.darkened],
               _out(manifest, "pm", "darkened.csv"))
    for k in sorted(missing):
        print(f"warning: darkened patch {k} is outside the texture projector's reach "
              f"and cannot be compensated", file=sys.stderr)

    reports = contrast_reports(rig, setup, rep.x_final, texture, manifest.conditions)
    rows = [("condition", "rms_contrast", "ansi_ratio")]
    for cond, r in reports.items():
        rows.append((cond, f"{r.rms_contrast:.6g}", f"{r.ansi_ratio:.6g}"))
        _say("pm", *rows[-1])
    write_rows(rows, _out(manifest, "pm", "contrast.csv"))
    states = pm_states(rig, setup, rep.x_final, texture)
    for cond in manifest.conditions:
        _view(rig, capture(rig.sim, states[cond]), _out(manifest, "pm", f"view_{cond}.ppm"))
    return reports


def cmd_report(manifest: RunManifest) -> list[Path]:
    """Figures from the files earlier stages wrote; needs at least one of them."""
    from . import plotting

    root = Path(manifest.out)
    written = []
    summary = root / "reproduce" / "summary.csv"
    pm_dir = root / "pm"
    if not summary.exists() and not (pm_dir / "contrast.csv").exists():
        raise PreconditionError(f"nothing to report under {root}; run `envlight reproduce` "
                                f"or `envlight pm` first")

    def trace_figure(conv: Path, title: str, name: str):
        rows = read_rows(conv)
        data = np.array(rows[1:], dtype=float)
        path = _out(manifest, "figures", name)
        plotting.plot_trace(data[:, 0], data[:, 1], data[:, 2:], path, title)
        written.append(path)

    if summary.exists():
        for row in read_rows(summary)[1:]:
            ref = row[0]
            folder = root / "reproduce" / ref
            trace_figure(folder / "convergence.csv", f"reproduction of {ref}", f"trace_{ref}.png")
            views = {name: read_ppm(folder / f"view_{name}.ppm")
                     for name in ("reference", "conventional", "proposed")}
            path = _out(manifest, "figures", f"views_{ref}.png")
            plotting.plot_views(views, path)
            written.append(path)
    if (pm_dir / "contrast.csv").exists():
        trace_figure(pm_dir / "convergence.csv", "projection mapping", "trace_pm.png")
        reports = {row[0]: ContrastReport(row[0], float(row[1]), float(row[2]))
                   for row in read_rows(pm_dir / "contrast.csv")[1:]}
        path = _out(manifest, "figures", "contrast.png")
        plotting.plot_contrast(reports, path)
        written.append(path)
        views = {c: read_ppm(pm_dir / f"view_{c}.ppm") for c in reports
                 if (pm_dir / f"view_{c}.ppm").exists()}
        if views:
            path = _out(manifest, "figures", "views_pm.png")
            plotting.plot_views(views, path)
            written.append(path)
    for path in written:
        _say("figure", path.relative_to(root).as_posix())
    return written


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="scene TOML (default: built-in room)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--out", metavar="DIR", default="envlight-out", help="output directory")
    common.add_argument("--condition", choices=CONDITIONS + ("all",), default="all",
                        help="projection-mapping condition(s) to evaluate")
    common.add_argument("--iterations", type=int, metavar="N",
                        help="override the maximum optimizer iterations")
    common.add_argument("--epsilon", type=float, metavar="F", help="override the step size")
    common.add_argument("--texture", metavar="PATH",
                        help="texture image (binary PPM or .npy) for the texture projector")
    parser = argparse.ArgumentParser(
        prog="envlight", description="Reproduce room lighting with projectors in a simulated room.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "calibrate": "segment projectors into nodes and measure the calibration bundle",
        "reproduce": "optimize node inputs for every reference lighting",
        "pm": "projection mapping: mask, compensate and compare contrast",
        "report": "render figures from the files of earlier stages",
        "run": "all stages in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, manifest = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _out(manifest, "manifest.json").write_text(manifest.to_json())
        rig = None
        if any(s != "report" for s in manifest.stages):
            rig = build_rig(config)
        for stage in manifest.stages:
            if stage == "calibrate":
                cmd_calibrate(rig, manifest)
            elif stage == "reproduce":
                cmd_reproduce(rig, manifest)
            elif stage == "pm":
                cmd_pm(rig, manifest)
            else:
                cmd_report(manifest)
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
