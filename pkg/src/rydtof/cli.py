"""Command-line front end.

Exit codes: 0 success, 2 configuration or geometry error, 3 output conflict,
4 analysis failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    analyze,
    apply_calibration,
    calibrate,
    format_report,
    write_linearity_csv,
    write_peaks_csv,
    write_resolution_csv,
)
from .config import RunConfig, load_config
from .core import FlightCalibration, hop_time, position_from_tof
from .errors import ConfigError, ConvergenceError, DomainError, FitError, GeometryError, InvalidArgument
from .fieldsolver import solve_potential, write_profile_csv
from .pulses import (
    CLASSES,
    StarkBranchModel,
    expected_class_fractions,
    ionization_events,
    prepare_ensemble,
    ratio_from_counts,
)
from .synth import DetectorModel, read_series, synthesize_series, synthesize_spectrum, write_series, write_spectrum_csv

EXIT_OK, EXIT_CONFIG, EXIT_CONFLICT, EXIT_ANALYSIS, EXIT_USAGE = 0, 2, 3, 4, 64

log = logging.getLogger("rydtof")


class UsageError(Exception):
    pass


class OutputConflict(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not force:
        raise OutputConflict(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "offset", None) is not None:
        over["calibration.offset"] = args.offset
    if getattr(args, "out", None) is not None:
        over["output"] = args.out
    return load_config(args.config, args.preset, over)


def _kv(path: Path, pairs: dict) -> None:
    path.write_text("".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                            for k, v in pairs.items()))


def _read_kv(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


# --- commands -----------------------------------------------------------------


def cmd_potential(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg["output"], args.force)
    g = cfg.geometry()
    prof = solve_potential(g, cfg["solver.grid_spacing_m"], cfg["solver.tolerance"], cfg.solver_options())
    write_profile_csv(out / "profile.csv", prof)
    z0 = g.source_position
    window = (prof.z > z0 - 2e-3) & (prof.z < z0 + 2e-3)
    field = float(np.polyfit(prof.z[window], prof.V[window], 1)[0])
    report = {"config_hash": cfg.digest(), "geometry_hash": prof.metadata["geometry_hash"],
              "grid_spacing_m": prof.metadata["grid_spacing"], "iterations": prof.metadata["iterations"],
              "residual": prof.metadata["residual"], "tolerance": prof.metadata["tolerance"],
              "field_at_source_V_per_cm": field / 100.0,
              "potential_span_V": float(np.ptp(prof.V))}
    _kv(out / "potential_report.txt", report)
    print(f"converged in {report['iterations']} iterations, residual {report['residual']:.3g}")
    print(f"axial field at the source: {field / 100.0:.3f} V/cm")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg["output"], args.force)
    seed = cfg["seed"]
    if cfg["ensemble.n_atoms"] == 0:
        log.warning("ensemble.n_atoms = 0: spectra will be empty")
    series = synthesize_series(cfg.lens_positions(), cfg.series_config(), seed)
    manifest = write_series(out, series)
    (out / "config.txt").write_text(cfg.text(include_output=False))

    n_sel = cfg["ensemble.selectivity_atoms"]
    if n_sel > 0:
        _selectivity_run(cfg, out, n_sel, seed)
    print(f"wrote {len(series)} spectra; manifest {manifest}")
    return EXIT_OK


def _selectivity_run(cfg: RunConfig, out: Path, n: int, seed: int) -> None:
    """Both states through the pulse sequence; class counts plus arrival-time traces."""
    w = cfg.waveform()
    model = StarkBranchModel.default(cfg.states())
    s1, s0 = cfg.states()
    pos = np.full(n, cfg.geometry().source_position)
    yield_b = expected_class_fractions(s1, w, model)["b"]
    ens1 = prepare_ensemble(pos, s1, rng_seed=seed)
    ens0 = prepare_ensemble(pos, s0, cfg["ensemble.contamination"], s1, yield_b, rng_seed=seed + 1)
    rows = ["state," + ",".join(CLASSES)]
    trace_cal = FlightCalibration(L=cfg["flight.L_m"], t_offset=cfg["flight.t_offset_s"])
    det = DetectorModel(tau=cfg["detector.tau_s"], transmission=cfg["detector.transmission"],
                        bin_width=cfg["detector.bin_width_s"])
    edges = None
    for label, ens, stream in (("1", ens1, 0), ("0", ens0, 1)):
        ev = ionization_events(ens, w, model, seed + 10 + stream)
        c = ev.counts()
        rows.append(f"{label}," + ",".join(str(c[k]) for k in CLASSES))
        trace = synthesize_spectrum(ev, trace_cal, det, seed, mode="events", edges=edges,
                                    tube_potential=cfg["geometry.V_tube"],
                                    metadata={"state": label, "config_hash": cfg.digest()},
                                    key=(stream,))
        edges = trace.edges
        write_spectrum_csv(out / f"trace_state{label}.csv", trace)
    (out / "selectivity.csv").write_text("\n".join(rows) + "\n")


def _write_calibration(path: Path, res, cfg_hash: str, manifest: Path) -> None:
    c = res.cal
    _kv(path, {"offset_source": res.offset_source, "L_m": c.L, "E_V_per_m": c.E, "E_err_V_per_m": res.E_err,
               "V0_V": c.V0, "V0_err_V": res.V0_err, "t_offset_s": c.t_offset, "t_offset_err_s": res.t_offset_err,
               "center_residual_rms_m": res.residual_rms, "spectra": len(res.peaks),
               "manifest": manifest.name, "config_hash": cfg_hash})


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    manifest = Path(args.manifest)
    series = read_series(manifest)
    out = _out_dir(cfg["output"], args.force)
    res = calibrate(series, step=cfg["ensemble.lens_step_m"], offset_source=cfg["calibration.offset"],
                    t_offset=cfg["calibration.t_offset_s"], L=cfg["flight.L_m"])
    cfg_hash = series[0].metadata.get("config_hash", "")
    _write_calibration(out / "calibration.txt", res, cfg_hash, manifest)
    write_peaks_csv(out / "peaks.csv", res)
    (out / "calibration_report.txt").write_text(format_report(res))
    print(format_report(res), end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    manifest = Path(args.manifest)
    series = read_series(manifest)
    kv = _read_kv(args.calibration)
    try:
        cal = FlightCalibration(L=float(kv["L_m"]), E=float(kv["E_V_per_m"]), V0=float(kv["V0_V"]),
                                t_offset=float(kv["t_offset_s"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{args.calibration}: malformed calibration file ({exc})") from exc
    out = _out_dir(cfg["output"], args.force)
    res = apply_calibration(series, cal, kv.get("offset_source", "fixed"))
    # carry the calibration's own uncertainties into the report
    res = replace(res, **{f: float(kv.get(k, "nan")) for f, k in
                          (("E_err", "E_err_V_per_m"), ("V0_err", "V0_err_V"), ("t_offset_err", "t_offset_err_s"))})
    res = analyze(res, threshold=cfg["calibration.resolution_threshold_m"])
    extra = {}
    sel = manifest.parent / "selectivity.csv"
    if sel.exists():
        counts = {}
        for line in sel.read_text().splitlines()[1:]:
            label, *vals = line.split(",")
            counts[label] = dict(zip(CLASSES, map(int, vals)))
        ratio = ratio_from_counts(counts["1"]["b"], counts["0"]["b"])
        ionized = sum(v for k, v in counts["1"].items() if k != "unionized")
        extra["selectivity_b1_over_b0"] = "inf" if math.isinf(ratio) else f"{ratio:.3f}"
        extra["class_b_fraction_state1"] = f"{counts['1']['b'] / ionized:.4f}" if ionized else "nan"
    write_peaks_csv(out / "peaks.csv", res)
    write_resolution_csv(out / "resolution.csv", res.resolution)
    write_linearity_csv(out / "linearity.csv", res)
    _write_spectra_x(out / "spectra_x.csv", series, cal)
    text = format_report(res, extra)
    (out / "analysis_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _write_spectra_x(path: Path, series, cal: FlightCalibration) -> None:
    """Every spectrum on the position axis (bins with a valid mapping only)."""
    lines = ["x_L_m,t_s,x_m,counts"]
    for s in series:
        t = s.centers
        ok = t > cal.t_offset
        x = position_from_tof(t[ok], cal)
        for ti, xi, ci in zip(t[ok].tolist(), np.atleast_1d(x).tolist(), s.counts[ok].tolist()):
            lines.append(f"{s.x_L!r},{ti!r},{xi!r},{ci!r}")
    path.write_text("\n".join(lines) + "\n")


def cmd_hoptime(args) -> int:
    t = hop_time(args.n, args.d)
    print(f"hop_time = {t!r} s ({t * 1e6:.4g} us)")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value configuration file")
    common.add_argument("--preset", choices=["paper"], help="start from a shipped preset")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = _Parser(prog="rydtof", description="Rydberg field-ionization time-of-flight toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("potential", parents=[common], help="solve the electrode potential")
    s.set_defaults(func=cmd_potential)
    s = sub.add_parser("simulate", parents=[common], help="synthesize a lens-position series")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("calibrate", parents=[common], help="fit the flight-time model to a series")
    s.add_argument("manifest")
    s.add_argument("--offset", choices=["fixed", "fitted"], help="flight-time offset handling")
    s.set_defaults(func=cmd_calibrate)
    s = sub.add_parser("analyze", parents=[common], help="resolution, linearity and selectivity report")
    s.add_argument("manifest")
    s.add_argument("calibration")
    s.set_defaults(func=cmd_analyze)
    s = sub.add_parser("hoptime", help="dipole-dipole hopping time")
    s.add_argument("n", type=int, help="principal quantum number")
    s.add_argument("d", type=float, help="interatomic distance [m]")
    s.set_defaults(func=cmd_hoptime)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except OutputConflict as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except (ConfigError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, ConvergenceError, DomainError) as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (InvalidArgument, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
