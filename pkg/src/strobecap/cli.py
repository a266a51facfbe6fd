"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 pipeline failure, 3 trend violation
(``evaluate --check``).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import StrobeCapError
from .io import (camera_from_dict, config_hash, dictionary_from_dict, dictionary_to_dict, file_sha256,
                 gaussian_set_from_dict, gaussian_set_to_dict, load_json, pwm_to_dict, read_tensor,
                 rig_from_dict, rig_to_dict, save_json, schedule_from_dict, schedule_to_dict,
                 write_tensor)
from .scene import CameraRig, GaussianCloud, default_schedule

EXIT_OK, EXIT_USAGE, EXIT_FAILURE, EXIT_TREND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# --- run bookkeeping -----------------------------------------------------

class Run:
    """Output directory plus the manifest that lists every artifact written."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = {}
        self.configs = {}

    def path(self, name):
        return self.out / name

    def record(self, path, role=None):
        path = Path(path)
        try:
            key = str(path.relative_to(self.out))
        except ValueError:
            key = str(path)
        self.artifacts[key] = {"sha256": file_sha256(path), "role": role or ""}
        return path

    def json(self, doc, name, role=None):
        return self.record(save_json(doc, self.path(name)), role)

    def tensor(self, stack, name, role=None):
        return self.record(write_tensor(stack, self.path(name)), role)

    def config(self, name, doc):
        self.configs[name] = {"sha256": config_hash(doc), "value": doc}

    def finish(self, extra=None):
        args = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {"command": self.args.command, "version": __version__,
               "seed": self.args.seed, "deterministic": self.args.deterministic,
               "arguments": json.loads(json.dumps(args, default=str)),
               "configs": self.configs, "artifacts": dict(sorted(self.artifacts.items()))}
        if extra:
            doc.update(extra)
        save_json(doc, self.path("manifest.json"))
        return doc


def _load_doc(path_or_none, default=None):
    if path_or_none is None:
        return {} if default is None else default
    return load_json(path_or_none)


# --- truth scene documents -----------------------------------------------

def truth_to_dict(truth):
    from .sim import KeyframedScene

    if isinstance(truth, KeyframedScene):
        from .io import _lst

        clouds = [{"means": _lst(c.means), "scales": _lst(c.scales), "rotations": _lst(c.rotations),
                   "opacities": _lst(c.opacities), "intensities": _lst(c.intensities)}
                  for c in truth.clouds]
        return {"kind": "keyframed", "times": _lst(truth.times), "clouds": clouds}
    doc = gaussian_set_to_dict(truth)
    doc["kind"] = "dddm"
    return doc


def truth_from_dict(doc):
    from .sim import KeyframedScene

    if doc.get("kind") == "keyframed":
        clouds = [GaussianCloud(c["means"], c["scales"], c["rotations"], c["opacities"], c["intensities"])
                  for c in doc["clouds"]]
        return KeyframedScene(doc["times"], clouds)
    return gaussian_set_from_dict(doc)


# --- subcommands ---------------------------------------------------------

def cmd_design_strobe(args, run):
    from .strobe import design_circle_sequence, quantize_pwm

    triples = design_circle_sequence(args.n)
    pwm = quantize_pwm(triples, levels=args.levels, pulse_unit=args.pulse_unit) if args.levels else None
    intensities = pwm.dequantize() if pwm is not None else triples
    sched = default_schedule(intensities, exposure=args.exposure, pwm=pwm)
    target = Path(args.schedule_out) if args.schedule_out else run.path("schedule.json")
    run.record(save_json(schedule_to_dict(sched), target), "schedule")
    run.finish()
    print(f"wrote {target} ({args.n} strobes, sync margin {sched.sync_margin * 1e3:.3f} ms)")


def cmd_quantize_pwm(args, run):
    from .strobe import quantize_pwm, scalar_multiple_pairs, usable_colors

    if args.schedule:
        sched = schedule_from_dict(load_json(args.schedule))
        triples = sched.intensities
    else:
        from .strobe import design_circle_sequence

        if args.n is None:
            raise UsageError("quantize-pwm needs --schedule or --n")
        sched = None
        triples = design_circle_sequence(args.n)
    pwm = quantize_pwm(triples, levels=args.levels, pulse_unit=args.pulse_unit, unique=args.unique)
    run.json(pwm_to_dict(pwm), "pwm.json", "pwm")
    if sched is not None:
        sched = replace(sched, intensities=pwm.dequantize(), pwm=pwm)
        run.json(schedule_to_dict(sched), "schedule.json", "schedule")
    pairs = scalar_multiple_pairs(pwm.pulses)
    run.finish({"scalar_multiple_pairs": [list(map(int, q)) for q in pairs]})
    print(f"{len(usable_colors(args.levels))} of {args.levels ** 3} level triples are usable colors")
    if pairs:
        print(f"warning: scalar-multiple strobe pairs {pairs}")


def _sim_config(args):
    from .sim import SimConfig

    cfg = SimConfig.from_dict(_load_doc(args.config))
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    if args.scene_kind:
        cfg = replace(cfg, scene_kind=args.scene_kind)
    return cfg


def cmd_simulate(args, run):
    from .evaluation import emit_strip
    from .sim import make_dictionary, simulate

    cfg = _sim_config(args)
    sched = None
    if args.schedule:
        sched = schedule_from_dict(load_json(args.schedule))
        cfg = replace(cfg, n_strobes=sched.n_strobes, exposure=sched.exposure)
    sim = simulate(cfg, schedule=sched)
    run.config("sim", cfg.to_dict())
    run.json(cfg.to_dict(), "sim_config.json", "sim-config")
    run.json(truth_to_dict(sim.truth), "truth.json", "truth")
    run.json(rig_to_dict(sim.rig), "rig.json", "rig")
    run.json(schedule_to_dict(sim.schedule), "schedule.json", "schedule")
    run.json(dictionary_to_dict(sim.dictionary), "dictionary.json", "dictionary")
    run.json(dictionary_to_dict(make_dictionary(cfg, sim.schedule, with_albedo=True)),
             "dictionary_albedo.json", "dictionary-albedo")
    for m in range(len(sim.rig)):
        run.tensor(sim.encoded[m], f"encoded_cam{m}.strb", "encoded")
        run.tensor(sim.backgrounds[m], f"background_cam{m}.strb", "background")
        run.tensor(sim.interframes[m], f"interframes_cam{m}.strb", "interframes")
    novel = len(sim.rig) - 1
    run.record(emit_strip([sim.interframes[novel]], run.path("interframes_novel.png"), "auto"), "preview")
    run.finish({"cameras": len(sim.rig), "held_out": [novel],
                "background_threshold": 2.0 * cfg.noise_sigma})
    print(f"simulated {len(sim.rig)} cameras x {sim.schedule.n_strobes} strobes into {run.out}")


def _tiles_capture(doc):
    from .calib import ColorCheckerCapture

    tiles = {str(cam): {str(k): v for k, v in t.items()} for cam, t in doc["tiles"].items()}
    return ColorCheckerCapture(tiles, str(doc["reference"]))


def cmd_calibrate_colors(args, run):
    from .calib import estimate_primaries, extract_dictionary, fit_all_transforms

    rig = rig_from_dict(load_json(args.rig))
    if args.tiles:
        transforms = fit_all_transforms(_tiles_capture(load_json(args.tiles)))
        cams = list(rig.cameras)
        for cam_id, T in transforms.items():
            i = int(cam_id)
            if not 0 <= i < len(cams):
                raise StrobeCapError(f"tile measurements for unknown camera {cam_id}")
            cams[i] = replace(cams[i], color_transform=T)
        rig = CameraRig(cams, rig.reference)
        run.json(rig_to_dict(rig), "rig.json", "rig")
    if args.led:
        patch = tuple(args.patch) if args.patch else None
        frames = [read_tensor(p) for p in args.led]
        primaries = estimate_primaries(frames, patch, saturation=args.saturation)
        run.json({"primaries": primaries.tolist()}, "primaries.json", "primaries")
        if args.schedule:
            sched = schedule_from_dict(load_json(args.schedule))
            run.json(dictionary_to_dict(extract_dictionary(None, sched, primaries)),
                     "dictionary.json", "dictionary")
    run.finish()
    print(f"calibration written to {run.out}")


def _input_layout(args):
    """(encoded, backgrounds, rig, schedule, dictionary, truth stacks or None, held-out, threshold)."""
    if args.input:
        src = Path(args.input)
        man = load_json(src / "manifest.json")
        rig = rig_from_dict(load_json(src / "rig.json"))
        sched = schedule_from_dict(load_json(src / "schedule.json"))
        dict_name = "dictionary_albedo.json" if (src / "dictionary_albedo.json").exists() else "dictionary.json"
        dictionary = dictionary_from_dict(load_json(src / (args.dictionary or dict_name)))
        n = len(rig)
        encoded = [read_tensor(src / f"encoded_cam{m}.strb") for m in range(n)]
        backgrounds = [read_tensor(src / f"background_cam{m}.strb") for m in range(n)]
        truth = None
        if all((src / f"interframes_cam{m}.strb").exists() for m in range(n)):
            truth = [read_tensor(src / f"interframes_cam{m}.strb") for m in range(n)]
        held = man.get("held_out", [])
        thr = man.get("background_threshold", 0.0)
    else:
        need = ("encoded", "rig_file", "schedule", "dictionary")
        if any(getattr(args, k) is None for k in need):
            raise UsageError("reconstruct needs --input DIR or --encoded/--rig/--schedule/--dictionary")
        rig = rig_from_dict(load_json(args.rig_file))
        sched = schedule_from_dict(load_json(args.schedule))
        dictionary = dictionary_from_dict(load_json(args.dictionary))
        encoded = [read_tensor(p) for p in args.encoded]
        backgrounds = [read_tensor(p) for p in args.background] if args.background else [None] * len(encoded)
        if len(encoded) != len(rig) or len(backgrounds) != len(rig):
            raise UsageError("one encoded image (and background) per rig camera is required")
        truth, held, thr = None, [], 0.0
    if args.held_out is not None:
        held = [h % len(rig) for h in args.held_out]
    if args.bg_threshold is not None:
        thr = args.bg_threshold
    return encoded, backgrounds, rig, sched, dictionary, truth, sorted(set(held)), thr


def _foreground(encoded, background, camera, threshold):
    from .calib import apply_transform
    from .sim import subtract_background

    raw = encoded
    if background is not None:
        fg = subtract_background(raw, background, threshold)
    else:
        fg = np.asarray(raw.frames[0], dtype=np.float64)
    if not np.allclose(camera.color_transform, np.eye(3)):
        fg = np.maximum(apply_transform(fg, camera.color_transform), 0.0)
    return fg


def cmd_reconstruct(args, run):
    from .evaluation import emit_strip, mae
    from .recon import ReconConfig, attach_mae, decode_interframes, fit

    encoded, backgrounds, rig, sched, dictionary, truth, held, thr = _input_layout(args)
    cfg = ReconConfig.from_dict(_load_doc(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.static:
        cfg = cfg.static_baseline()
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    run.config("recon", cfg.to_dict())
    fit_ids = [i for i in range(len(rig)) if i not in held]
    if not fit_ids:
        raise UsageError("every camera is held out")
    inputs = [_foreground(encoded[i], backgrounds[i], rig[i], thr) for i in fit_ids]

    def progress(it, terms, gset):
        if args.verbose and it % 100 == 0:
            print(f"iteration {it}: loss {terms['total']:.6g}", file=sys.stderr)

    gset, report = fit(inputs, [rig[i] for i in fit_ids], sched, dictionary, cfg, callback=progress)
    decoded = decode_interframes(gset, list(rig.cameras), sched)
    if truth is not None:
        attach_mae(report, gset, [rig[i] for i in held], sched, [truth[i] for i in held],
                   names=[f"cam{i}" for i in held])
    run.json(gaussian_set_to_dict(gset), "scene.json", "scene")
    for m, stack in enumerate(decoded):
        run.tensor(stack, f"decoded_cam{m}.strb", "decoded")
    report.to_csv(run.path("loss.csv"))
    run.record(run.path("loss.csv"), "loss-report")
    extra = {"fit_cameras": fit_ids, "held_out": held, "converged": report.converged,
             "final_loss": report.total[-1]}
    if truth is not None and held:
        err = float(np.mean([mae(decoded[i], truth[i]) for i in held]))
        extra["held_out_mae"] = err
        print(f"held-out MAE {err:.6g}")
        run.record(emit_strip([decoded[held[0]], truth[held[0]]], run.path("decoded_vs_truth.png"), "auto"),
                   "preview")
    if not report.converged:
        print("warning: loss did not improve over a 200-iteration window", file=sys.stderr)
    run.finish(extra)
    print(f"fitted {len(gset)} Gaussians on {len(fit_ids)} views; final loss {report.total[-1]:.6g}")


def cmd_decode(args, run):
    from .evaluation import emit_strip
    from .recon import decode_interframes

    gset = gaussian_set_from_dict(load_json(args.scene))
    rig = rig_from_dict(load_json(args.rig_file))
    sched = schedule_from_dict(load_json(args.schedule))
    ids = args.cameras if args.cameras is not None else list(range(len(rig)))
    ids = [i % len(rig) for i in ids]
    decoded = decode_interframes(gset, [rig[i] for i in ids], sched)
    for i, stack in zip(ids, decoded):
        run.tensor(stack, f"decoded_cam{i}.strb", "decoded")
    run.record(emit_strip(decoded, run.path("decoded.png"), args.gain), "strip")
    run.finish()
    print(f"decoded {len(ids)} views x {sched.n_strobes} interframes into {run.out}")


def cmd_render_novel(args, run):
    from .evaluation import emit_strip
    from .recon import decode_interframes
    from .sim import SimConfig, _ring_camera

    gset = gaussian_set_from_dict(load_json(args.scene))
    sched = schedule_from_dict(load_json(args.schedule))
    if args.camera:
        cam = camera_from_dict(load_json(args.camera))
    else:
        cfg = SimConfig(width=args.width, height=args.height, fov_deg=args.fov, rig_radius=args.radius)
        cam = _ring_camera(cfg, math.radians(args.azimuth), math.radians(args.elevation))
    stack = decode_interframes(gset, [cam], sched)[0]
    run.tensor(stack, "novel.strb", "novel-view")
    run.record(emit_strip([stack], run.path("novel.png"), args.gain), "strip")
    run.finish()
    print(f"rendered {sched.n_strobes} interframes into {run.out}")


def _sweep_specs(args):
    from .evaluation import DEFAULT_PANELS, SweepSpec, default_panel

    if args.spec:
        doc = load_json(args.spec)
        docs = doc if isinstance(doc, list) else [doc]
        specs = [(d.pop("name", d["parameter"]), SweepSpec.from_dict(d)) for d in docs]
    else:
        names = list(DEFAULT_PANELS) if args.panel == "all" else [args.panel]
        specs = [(n, default_panel(n, args.repetitions or 3)) for n in names]
    out = []
    for name, spec in specs:
        if args.repetitions is not None:
            spec.repetitions = args.repetitions
        if args.seed is not None:
            spec.sim = replace(spec.sim, rng_seed=args.seed)
            spec.recon = replace(spec.recon, seed=args.seed)
        if args.iterations is not None:
            spec.recon = replace(spec.recon, iterations=args.iterations)
        out.append((name, spec))
    return out


def cmd_evaluate(args, run):
    from .evaluation import cells_csv, check_trend, emit_strip, run_sweep, summarize, sweep_csv
    from .plotting import plot_sweep

    violations = []
    lines = []
    for name, spec in _sweep_specs(args):
        run.config(f"sweep_{name}", spec.to_dict())

        def progress(cell, name=name):
            if args.verbose:
                print(f"[{name}] value {cell.value:g} rep {cell.repetition}: MAE {cell.mae:.6g} "
                      f"({cell.status})", file=sys.stderr)

        keep = not args.no_strips
        results = run_sweep(spec, jobs=args.jobs, keep_frames=keep, progress=progress)
        csv_path = run.path(f"panel_{name}.csv")
        csv_path.write_text(sweep_csv(spec, results, args.deterministic))
        run.record(csv_path, "sweep-table")
        cells_path = run.path(f"panel_{name}_cells.csv")
        cells_path.write_text(cells_csv(results, args.deterministic))
        run.record(cells_path, "sweep-cells")
        rows = summarize(spec, results)
        run.record(plot_sweep(rows, spec.parameter, run.path(f"panel_{name}.png"), f"panel {name}"), "plot")
        if keep:
            for cell in results:
                if cell.repetition == 0 and cell.decoded is not None:
                    p = run.path(f"panel_{name}_strip_{cell.value:g}.png")
                    run.record(emit_strip([cell.decoded[0], cell.truth[0]], p, "auto"), "strip")
        for rule, ok in check_trend(spec.parameter, [r[0] for r in rows], [r[1] for r in rows]):
            lines.append(f"{'PASS' if ok else 'FAIL'} panel {name}: {rule}")
            if not ok:
                violations.append((name, rule))
        for c in results:
            if c.status != "ok":
                print(f"[{name}] cell value={c.value:g} rep={c.repetition} failed: {c.status}",
                      file=sys.stderr)
    trend_path = run.path("trends.txt")
    trend_path.write_text("".join(line + "\n" for line in lines))
    run.record(trend_path, "trend-checks")
    print("\n".join(lines))
    run.finish({"trend_violations": [f"{n}: {r}" for n, r in violations]})
    if args.check and violations:
        return EXIT_TREND
    return EXIT_OK


# --- parser --------------------------------------------------------------

def build_parser():
    p = _Parser(prog="strobecap", description="Color-strobed high-speed volumetric capture")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=None, help="override the configured RNG seeds")
    p.add_argument("--deterministic", action="store_true",
                   help="omit wall-clock fields so repeated runs write identical files")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("design-strobe", help="circle-sequence strobe schedule")
    s.add_argument("--n", type=int, required=True, help="number of strobes")
    s.add_argument("--levels", type=int, default=6, help="PWM levels per channel (0 disables PWM)")
    s.add_argument("--pulse-unit", type=float, default=16.7e-6)
    s.add_argument("--exposure", type=float, default=1 / 60)
    s.add_argument("--out", dest="schedule_out", default=None, help="schedule JSON path")
    s.set_defaults(func=cmd_design_strobe)

    s = sub.add_parser("quantize-pwm", help="quantize intensity triples to PWM pulse counts")
    s.add_argument("--schedule", default=None)
    s.add_argument("--n", type=int, default=None, help="use the circle sequence of this length")
    s.add_argument("--levels", type=int, default=6)
    s.add_argument("--pulse-unit", type=float, default=16.7e-6)
    s.add_argument("--unique", action="store_true", help="fail on scalar-multiple strobe pairs")
    s.set_defaults(func=cmd_quantize_pwm)

    s = sub.add_parser("simulate", help="synthesize encoded captures of a scene")
    s.add_argument("--config", default=None, help="SimConfig JSON (defaults when omitted)")
    s.add_argument("--schedule", default=None, help="schedule JSON (circle sequence when omitted)")
    s.add_argument("--scene-kind", default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate-colors", help="camera color transforms and LED dictionary")
    s.add_argument("--rig", required=True)
    s.add_argument("--tiles", default=None, help="tile-measurement JSON")
    s.add_argument("--led", nargs=3, default=None, metavar=("R", "G", "B"),
                   help="single-LED tensor files")
    s.add_argument("--patch", nargs=4, type=int, default=None, metavar=("Y0", "Y1", "X0", "X1"))
    s.add_argument("--saturation", type=float, default=255.0)
    s.add_argument("--schedule", default=None)
    s.set_defaults(func=cmd_calibrate_colors)

    s = sub.add_parser("reconstruct", help="fit a dynamic Gaussian scene to encoded captures")
    s.add_argument("--input", default=None, help="directory written by simulate")
    s.add_argument("--encoded", nargs="+", default=None)
    s.add_argument("--background", nargs="+", default=None)
    s.add_argument("--rig", dest="rig_file", default=None)
    s.add_argument("--schedule", default=None)
    s.add_argument("--dictionary", default=None)
    s.add_argument("--config", default=None, help="ReconConfig JSON")
    s.add_argument("--held-out", type=int, nargs="*", default=None)
    s.add_argument("--bg-threshold", type=float, default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--static", action="store_true", help="static baseline (no deformation)")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("decode", help="render interframes of a fitted scene for rig cameras")
    s.add_argument("--scene", required=True)
    s.add_argument("--rig", dest="rig_file", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--cameras", type=int, nargs="*", default=None)
    s.add_argument("--gain", default="auto")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("evaluate", help="parameter sweeps with held-out MAE")
    s.add_argument("--panel", default="all", choices=["a", "b", "c", "d", "e", "all"])
    s.add_argument("--spec", default=None, help="SweepSpec JSON (object or list)")
    s.add_argument("--repetitions", type=int, default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--check", action="store_true", help="exit 3 when a trend rule fails")
    s.add_argument("--no-strips", action="store_true")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render-novel", help="render interframes from an arbitrary viewpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--camera", default=None, help="camera JSON; else ring placement below")
    s.add_argument("--azimuth", type=float, default=17.0)
    s.add_argument("--elevation", type=float, default=6.0)
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--fov", type=float, default=40.0)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--gain", default="auto")
    s.set_defaults(func=cmd_render_novel)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for key in ("gain",):
        if hasattr(args, key) and args.gain != "auto":
            try:
                args.gain = float(args.gain)
            except ValueError:
                parser.error("--gain must be a number or 'auto'")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        run = Run(args)
        code = args.func(args, run)
    except UsageError as exc:
        print(f"strobecap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StrobeCapError, OSError, ValueError, KeyError) as exc:
        print(f"strobecap: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
