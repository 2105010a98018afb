"""Command-line front end: ``dipex {synth,extract,solve,phase,compare}``.

Exit codes: 0 success, 2 input or configuration error, 3 the dipole cap was
reached before the relative error converged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .errors import DipexError
from .forward import Dipole, Environment, forward_fields, read_dipoles, transfer_entries
from .ga import GAConfig, SearchBounds, extract_auto, problem_from_datasets
from .scan import FieldDataset, read_dataset, surface_from_spec, write_dataset
from .solver import (
    SolverConfig,
    align_global_phase,
    fit_datasets,
    relative_error,
    retrieve_phase,
    write_fit_json,
    write_trace_csv,
)
from .sources import read_scene, scene_from_dict

log = logging.getLogger("dipex")

EXIT_OK, EXIT_INPUT, EXIT_CAP = 0, 2, 3


class InputError(DipexError):
    pass


def _load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _resolve(base: Path | None, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() or base is None else base / p


def _config(args) -> tuple[dict, Path | None]:
    if args.config is None:
        return {}, None
    return _load_json(args.config), Path(args.config).parent


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read(path, db_uv_m, label=None) -> FieldDataset:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    return read_dataset(path, db_uv_m=db_uv_m, label=label)


def _datasets(args, cfg, base) -> list[FieldDataset]:
    paths = args.datasets or [_resolve(base, p) for p in cfg.get("datasets", [])]
    if not paths:
        raise InputError("no dataset given (positional arguments or 'datasets' in --config)")
    if len(paths) > 2:
        raise InputError(f"expected one or two datasets, got {len(paths)}")
    db = args.db_uv_m or bool(cfg.get("db_uv_m", False))
    labels = ["surface1", "surface2"]
    data = [_read(p, db, labels[i]) for i, p in enumerate(paths)]
    if args.single_surface and len(data) == 2:
        log.info("--single-surface: using %s only", paths[0])
        data = data[:1]
    for d in data[1:]:
        if not math.isclose(d.frequency, data[0].frequency, rel_tol=1e-12):
            raise InputError("datasets were measured at different frequencies")
    return data


def _ground(args, cfg) -> bool:
    return args.ground if args.ground is not None else bool(cfg.get("ground", False))


def _write_fitted(out: Path, fitted: list[FieldDataset]) -> None:
    for ds in fitted:
        write_dataset(ds, out / f"fitted_{ds.label}.csv")


def _fitted(dipoles, datasets, env) -> list[FieldDataset]:
    out = []
    for ds in datasets:
        f = forward_fields(dipoles, ds.surface, env)
        out.append(FieldDataset(ds.surface, f.frequency, f.mag_u, f.mag_v, f.phase_u, f.phase_v))
    return out


def cmd_synth(args) -> int:
    cfg, base = _config(args)
    if args.scene:
        scene = read_scene(args.scene)
    elif "scene" in cfg:
        sc = cfg["scene"]
        scene = read_scene(_resolve(base, sc)) if isinstance(sc, str) else scene_from_dict(sc)
    else:
        raise InputError("synth needs --scene or a 'scene' entry in --config")
    specs = [_load_json(p) for p in args.surface] or cfg.get("surfaces", [])
    if not specs:
        raise InputError("synth needs at least one --surface or a 'surfaces' list in --config")
    seed = args.seed if args.seed is not None else cfg.get("seed", scene.seed)
    if "noise_db" in cfg and scene.noise_db is None:
        scene.noise_db = float(cfg["noise_db"])
    out = _out_dir(args)
    for i, spec in enumerate(specs):
        label = spec.get("label", f"surface{i + 1}")
        surface = surface_from_spec(spec, label)
        # each surface gets its own noise stream
        sub = None if seed is None else int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        ds = scene.synthesize(surface, seed=sub)
        write_dataset(ds, out / f"{label}.csv")
        log.info("wrote %s (%d points)", out / f"{label}.csv", len(surface))
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg, base = _config(args)
    data = _datasets(args, cfg, base)
    problem = problem_from_datasets(data, _ground(args, cfg))
    ga_cfg = dict(cfg.get("ga", {}))
    if args.seed is not None:
        ga_cfg["seed"] = args.seed
    ga = GAConfig.from_dict(ga_cfg)
    bounds = SearchBounds.from_dict(cfg.get("bounds", {}))
    solver = SolverConfig.from_dict(cfg.get("solver"))
    max_dipoles = args.max_dipoles if args.max_dipoles is not None else int(cfg.get("max_dipoles", 10))
    res = extract_auto(bounds, ga, solver, problem, mu=float(cfg.get("mu", 0.01)), max_dipoles=max_dipoles)

    out = _out_dir(args)
    _dump_json({"frequency_hz": problem.env.frequency, "ground": problem.env.ground,
                "dipoles": [d.to_record() for d in res.dipoles]}, out / "dipoles.json")
    report = res.report()
    report.update({"frequency_hz": problem.env.frequency, "ground": problem.env.ground,
                   "single_surface": problem.single_surface, "bounds": bounds.to_dict()})
    _dump_json(report, out / "report.json")
    _write_fitted(out, _fitted(res.dipoles, data, problem.env))
    write_trace_csv(res.fit.trace, out / "trace.csv")
    print(f"N={res.n_dipoles} RE={res.re:.6g}")
    for w in res.warnings:
        log.warning(w)
    return EXIT_CAP if res.capped else EXIT_OK


def cmd_solve(args) -> int:
    cfg, base = _config(args)
    if not args.layout:
        raise InputError("solve needs --layout <dipoles.json>")
    layout = _load_json(args.layout)
    dipoles = read_dipoles(args.layout)
    if not dipoles:
        raise InputError(f"{args.layout}: empty layout")
    data = _datasets(args, cfg, base)
    ground = args.ground if args.ground is not None else bool(
        cfg.get("ground", layout.get("ground", False) if isinstance(layout, dict) else False))
    env = Environment(data[0].frequency, ground)
    solver = SolverConfig.from_dict(cfg.get("solver", cfg if "epsilon" in cfg else None))
    kinds = np.array([int(d.kind) for d in dipoles], dtype=np.int64)
    pos = np.array([d.position for d in dipoles], dtype=float)
    Ts = [transfer_entries(kinds, pos, ds.surface, env) for ds in data]
    fit = fit_datasets(Ts, data, solver)

    out = _out_dir(args)
    fitted = [Dipole(d.kind, d.position, m) for d, m in zip(dipoles, fit.moments)]
    write_fit_json(fit, out / "fit.json", {"dipoles": [d.to_record() for d in fitted],
                                            "frequency_hz": env.frequency, "ground": env.ground})
    write_trace_csv(fit.trace, out / "trace.csv")
    _write_fitted(out, _fitted(fitted, data, env))
    print(f"RE={fit.re:.6g} iterations={len(fit.trace)} converged={fit.converged}")
    return EXIT_OK


def _phase_surface(args, cfg, base):
    if args.grid:
        return _read(args.grid, args.db_uv_m).surface
    if args.surface:
        return surface_from_spec(_load_json(args.surface[0]))
    if "surface" in cfg:
        return surface_from_spec(cfg["surface"])
    if args.truth:
        return _read(args.truth, args.db_uv_m).surface
    raise InputError("phase needs --surface, --grid or --truth to define the points")


def cmd_phase(args) -> int:
    cfg, base = _config(args)
    if not args.dipoles:
        raise InputError("phase needs --dipoles <dipoles.json>")
    meta = _load_json(args.dipoles)
    meta = meta if isinstance(meta, dict) else {}
    dipoles = read_dipoles(args.dipoles)
    truth = _read(args.truth, args.db_uv_m) if args.truth else None
    freq = args.frequency or meta.get("frequency_hz") or (truth.frequency if truth else None)
    if freq is None:
        raise InputError("frequency unknown: pass --frequency or include frequency_hz in the dipole file")
    ground = args.ground if args.ground is not None else bool(meta.get("ground", cfg.get("ground", False)))
    surface = _phase_surface(args, cfg, base)
    model = retrieve_phase(dipoles, surface, Environment(float(freq), ground))

    out = _out_dir(args)
    header = ["x", "y", "z", "phase_u_deg", "phase_v_deg"]
    cols = [surface.positions[:, 0], surface.positions[:, 1], surface.positions[:, 2],
            np.degrees(model.phase_u), np.degrees(model.phase_v)]
    if truth is not None:
        bad = surface.same_grid(truth.surface)
        if bad is not None:
            p = truth.surface.positions[bad] if bad < len(truth.surface) else None
            raise InputError(f"truth grid differs from model grid at point {bad}"
                             + (f" ({p[0]:.6g}, {p[1]:.6g}, {p[2]:.6g})" if p is not None else ""))
        if not truth.has_phase:
            raise InputError(f"{args.truth}: truth dataset has no phase columns")
        comps = {"u": [0], "v": [1], "both": [0, 1]}[args.component]
        a = np.concatenate([(model.phase_u, model.phase_v)[c] for c in comps])
        b = np.concatenate([(truth.phase_u, truth.phase_v)[c] for c in comps])
        w = np.concatenate([(truth.mag_u, truth.mag_v)[c] for c in comps])
        alpha, rms = align_global_phase(a, b, w)
        _dump_json({"alpha_deg": math.degrees(alpha), "rms_deg": math.degrees(rms),
                    "component": args.component, "weights": "truth magnitude"}, out / "phase_report.json")
        header += ["truth_phase_u_deg", "truth_phase_v_deg"]
        cols += [np.degrees(truth.phase_u), np.degrees(truth.phase_v)]
        print(f"alpha={math.degrees(alpha):.6g} deg rms={math.degrees(rms):.6g} deg")
    with open(out / "phase.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])
    return EXIT_OK


def cmd_compare(args) -> int:
    paths = args.datasets
    if len(paths) not in (2, 4):
        raise InputError("compare takes A B (one surface) or A1 B1 A2 B2 (two surfaces)")
    out = _out_dir(args)
    res = {}
    for j in range(len(paths) // 2):
        a, b = _read(paths[2 * j], args.db_uv_m), _read(paths[2 * j + 1], args.db_uv_m)
        bad = a.surface.same_grid(b.surface)
        if bad is not None:
            raise InputError(f"{paths[2 * j]} and {paths[2 * j + 1]} differ at point {bad}")
        res[f"re{j + 1}"] = relative_error(a, b)
        with open(out / f"compare{j + 1}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "abs_du", "abs_dv"])
            du, dv = np.abs(a.mag_u - b.mag_u), np.abs(a.mag_v - b.mag_v)
            for p, x, y in zip(a.surface.positions, du, dv):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(x)), repr(float(y))])
    res["re"] = sum(res.values()) / len(res)
    _dump_json(res, out / "compare.json")
    print(" ".join(f"{k.upper()}={v:.12g}" for k, v in res.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--db-uv-m", action="store_true", help="dataset magnitudes are in dB(uV/m)")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("--log-level", default="WARNING")
    g = common.add_mutually_exclusive_group()
    g.add_argument("--ground", dest="ground", action="store_true", default=None, help="PEC ground plane at z=0")
    g.add_argument("--no-ground", dest="ground", action="store_false")

    p = argparse.ArgumentParser(prog="dipex", description="Equivalent dipole extraction from magnitude-only near-field scans.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize scan datasets from a scene")
    s.add_argument("--scene", help="scene JSON")
    s.add_argument("--surface", action="append", default=[], help="surface spec JSON (repeatable)")
    s.set_defaults(func=cmd_synth)

    for name, func, hlp in (("extract", cmd_extract, "GA search for dipole count, kinds and positions"),
                            ("solve", cmd_solve, "fit moments for a fixed layout")):
        e = sub.add_parser(name, parents=[common], help=hlp)
        e.add_argument("datasets", nargs="*", help="surface #1 dataset [surface #2 dataset]")
        e.add_argument("--single-surface", action="store_true", help="use only the first dataset")
        e.set_defaults(func=func)
    sub.choices["extract"].add_argument("--max-dipoles", type=int)
    sub.choices["solve"].add_argument("--layout", help="dipole-list JSON")

    ph = sub.add_parser("phase", parents=[common], help="retrieve phase patterns from a dipole model")
    ph.add_argument("--dipoles", help="dipole-list JSON")
    ph.add_argument("--surface", action="append", default=[], help="surface spec JSON")
    ph.add_argument("--grid", help="dataset CSV whose points are used")
    ph.add_argument("--truth", help="dataset CSV with phase columns")
    ph.add_argument("--frequency", type=float)
    ph.add_argument("--component", choices=("u", "v", "both"), default="both")
    ph.set_defaults(func=cmd_phase)

    c = sub.add_parser("compare", parents=[common], help="relative error between datasets")
    c.add_argument("datasets", nargs="+")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    for attr in ("single_surface",):
        if not hasattr(args, attr):
            setattr(args, attr, False)
    try:
        return args.func(args)
    except (DipexError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"dipex {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
