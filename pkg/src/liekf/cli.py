"""Config-driven command line front end for the Monte Carlo study.

Subcommands
-----------
run <config>
    Full study: writes ``loglik_trace``, ``qr_estimates``, ``rmse_table``
    and ``manifest.json`` into the output directory.
single-run <config> --run-index <k>
    Replays one run of the study and writes its per-step attitude trace.

Omitting the config path uses the bundled desk-scale default.

Exit codes: 0 success, 1 config error, 2 numerical failure.

Config files are flat ``key = value`` text with ``#`` comments; every key
has a default, so an empty file describes the default study.  All
randomness derives from the single ``seed`` key.  Numeric output uses 17
significant digits and LF line endings, so reruns of the same config are
byte-identical (timestamps appear only in the manifest).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attitude import ReferenceFields
from .exceptions import ConfigError, NumericalError
from .simulation import (EmOptions, McConfig, NoiseConfig, RateProfile,
                         TrajectoryConfig, replay_run, run_monte_carlo)

DEFAULT_CONFIG = Path(__file__).resolve().parent / "configs" / "default.cfg"

_TWO_PI = 2.0 * np.pi


def _parse_entries(text: str, path: str) -> dict:
    """key -> (value string, line number), rejecting malformed lines."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: missing key before '='")
        if key in entries:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = (value, lineno)
    return entries


class _Reader:
    """Typed access to parsed entries with line-and-field diagnostics."""

    def __init__(self, entries: dict, path: str):
        self._entries = entries
        self._path = path
        self._seen = set()

    def _fail(self, key: str, message: str):
        if key in self._entries:
            line = self._entries[key][1]
            raise ConfigError(f"{self._path}:{line}: {key}: {message}")
        raise ConfigError(f"{self._path}: {key}: {message}")

    def _raw(self, key: str):
        self._seen.add(key)
        if key in self._entries:
            return self._entries[key][0]
        return None

    def float_(self, key, default, minimum=None, exclusive=False) -> float:
        raw = self._raw(key)
        if raw is None:
            return float(default)
        try:
            value = float(raw)
        except ValueError:
            self._fail(key, f"could not parse {raw!r} as a number")
        if not np.isfinite(value):
            self._fail(key, "must be finite")
        if minimum is not None:
            if exclusive and not value > minimum:
                self._fail(key, f"must be > {minimum}")
            if not exclusive and not value >= minimum:
                self._fail(key, f"must be >= {minimum}")
        return value

    def int_(self, key, default, minimum=None) -> int:
        raw = self._raw(key)
        if raw is None:
            return int(default)
        try:
            value = int(raw, 0)
        except ValueError:
            self._fail(key, f"could not parse {raw!r} as an integer")
        if minimum is not None and value < minimum:
            self._fail(key, f"must be >= {minimum}")
        return value

    def bool_(self, key, default) -> bool:
        raw = self._raw(key)
        if raw is None:
            return bool(default)
        lowered = raw.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        self._fail(key, f"could not parse {raw!r} as a boolean")

    def choice(self, key, default, choices) -> str:
        raw = self._raw(key)
        if raw is None:
            return default
        if raw not in choices:
            self._fail(key, f"must be one of {', '.join(choices)}")
        return raw

    def string(self, key, default) -> str:
        raw = self._raw(key)
        return default if raw is None else raw

    def floats(self, key, count, default, minimum=None) -> tuple:
        raw = self._raw(key)
        if raw is None:
            return tuple(float(v) for v in default)
        tokens = [t for t in raw.replace(",", " ").split() if t]
        if len(tokens) != count:
            self._fail(key, f"expected {count} numbers, got {len(tokens)}")
        try:
            values = tuple(float(t) for t in tokens)
        except ValueError:
            self._fail(key, f"could not parse {raw!r} as numbers")
        if not all(np.isfinite(values)):
            self._fail(key, "all entries must be finite")
        if minimum is not None and any(v < minimum for v in values):
            self._fail(key, f"all entries must be >= {minimum}")
        return values

    def ints(self, key, default, minimum=None) -> tuple:
        raw = self._raw(key)
        if raw is None:
            return tuple(int(v) for v in default)
        tokens = [t for t in raw.replace(",", " ").split() if t]
        if not tokens:
            self._fail(key, "expected at least one integer")
        try:
            values = tuple(int(t) for t in tokens)
        except ValueError:
            self._fail(key, f"could not parse {raw!r} as integers")
        if minimum is not None and any(v < minimum for v in values):
            self._fail(key, f"all entries must be >= {minimum}")
        return values

    def pairs(self, key, default, minimum=None) -> tuple:
        """Comma-separated 'a:b' multiplier pairs."""
        raw = self._raw(key)
        if raw is None:
            return tuple((float(a), float(b)) for a, b in default)
        out = []
        for item in raw.split(","):
            item = item.strip()
            if not item:
                continue
            left, sep, right = item.partition(":")
            if not sep:
                self._fail(key, f"expected 'q_mult:r_mult' pairs, "
                                f"got {item!r}")
            try:
                pair = (float(left), float(right))
            except ValueError:
                self._fail(key, f"could not parse pair {item!r}")
            if minimum is not None and (pair[0] < minimum
                                        or pair[1] < minimum):
                self._fail(key, f"multipliers must be >= {minimum}")
            out.append(pair)
        if not out:
            self._fail(key, "expected at least one pair")
        return tuple(out)

    def segments(self, key) -> tuple:
        """Semicolon-separated 't_end: wx wy wz' constant-rate segments."""
        raw = self._raw(key)
        if not raw:
            return ()
        out = []
        for item in raw.split(";"):
            item = item.strip()
            if not item:
                continue
            left, sep, right = item.partition(":")
            tokens = right.split()
            if not sep or len(tokens) != 3:
                self._fail(key, f"expected 't_end: wx wy wz', got {item!r}")
            try:
                out.append((float(left), tuple(float(t) for t in tokens)))
            except ValueError:
                self._fail(key, f"could not parse segment {item!r}")
        return tuple(out)

    def finish(self):
        unknown = [k for k in self._entries if k not in self._seen]
        if unknown:
            key = unknown[0]
            line = self._entries[key][1]
            raise ConfigError(f"{self._path}:{line}: unknown key {key!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description."""

    traj: TrajectoryConfig
    noise: NoiseConfig
    mc: McConfig
    refs: ReferenceFields
    output_dir: str
    output_format: str
    resolved: dict  # canonical key -> value string, in schema order


def _canon(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (tuple, list)):
        return ", ".join(_canon(v) for v in value)
    return str(value)


def _canon_pairs(pairs) -> str:
    return ", ".join(f"{_canon(a)}:{_canon(b)}" for a, b in pairs)


def _canon_segments(segments) -> str:
    return "; ".join(f"{_canon(t)}: {' '.join(_canon(w) for w in omega)}"
                     for t, omega in segments)


def load_config(path, output_dir=None, output_format=None) -> ExperimentConfig:
    """Parse and validate a config file, applying CLI overrides."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err}") from err
    reader = _Reader(_parse_entries(text, str(path)), str(path))

    duration = reader.float_("duration_seconds", 20.0, 0.0, exclusive=True)
    dt = reader.float_("dt_seconds", 0.01, 0.0, exclusive=True)
    q0 = reader.floats("initial_attitude_wxyz", 4, (1.0, 0.0, 0.0, 0.0))
    kind = reader.choice("rate_profile", "sinusoidal",
                         ("constant", "sinusoidal", "piecewise"))
    amplitude = reader.floats("rate_amplitude_rad_per_s", 3,
                              (0.3, 0.2, 0.25))
    frequency = reader.floats("rate_frequency_hz", 3,
                              (0.5 / _TWO_PI, 0.3 / _TWO_PI, 0.4 / _TWO_PI))
    offset = reader.floats("rate_offset_rad_per_s", 3, (0.0, 0.1, 0.0))
    phase = reader.floats("rate_phase_rad", 3, (0.0, 0.0, np.pi / 2.0))
    segments = reader.segments("rate_segments")
    if kind == "piecewise" and not segments:
        reader._fail("rate_segments",
                     "required when rate_profile = piecewise")
    if kind != "piecewise" and segments:
        reader._fail("rate_segments",
                     "only valid when rate_profile = piecewise")

    eta = reader.floats("gyro_noise_var_rad2_per_s2", 3,
                        (0.075, 0.15, 0.1), minimum=0.0)
    nu = reader.floats("vector_noise_var", 6,
                       (1e-5, 2e-5, 3e-5, 3e-5, 3.5e-5, 6e-5), minimum=0.0)
    seed = reader.int_("seed", 0, minimum=0)
    gravity = reader.floats("gravity_ref_unit", 3, (0.0, 0.0, 1.0))
    magnetic = reader.floats("magnetic_ref_unit", 3,
                             (0.5, 0.0, -np.sqrt(3.0) / 2.0))

    runs = reader.int_("runs", 10, minimum=1)
    window_lengths = reader.ints("window_lengths", (20, 40, 60, 80, 100),
                                 minimum=2)
    multipliers = reader.pairs("theta0_multipliers",
                               ((400.0, 200.0), (400.0, 0.2)), minimum=0.0)
    include_baselines = reader.bool_("include_baselines", True)
    init_sigma = reader.float_("init_sigma_rad", 0.05, minimum=0.0)
    adaptation_mode = reader.choice("adaptation_mode", "single_window",
                                    ("single_window", "per_window"))
    em_iters = reader.int_("em_max_iterations", 50, minimum=1)
    em_tol = reader.float_("em_rel_tolerance", 1e-3, 0.0, exclusive=True)
    em_q_floor = reader.float_("em_q_floor", 1e-12, minimum=0.0)
    em_r_floor = reader.float_("em_r_floor", 1e-12, minimum=0.0)

    out_dir = reader.string("output_dir", "results")
    out_fmt = reader.choice("output_format", "csv", ("csv", "json"))
    reader.finish()

    if output_dir is not None:
        out_dir = str(output_dir)
    if output_format is not None:
        out_fmt = output_format

    try:
        profile = RateProfile(kind=kind, amplitude=amplitude,
                              frequency_hz=frequency, offset=offset,
                              phase=phase, segments=segments)
        traj = TrajectoryConfig(duration_s=duration, dt_s=dt,
                                profile=profile, initial_attitude=q0)
        noise = NoiseConfig(sigma_eta_diag=eta, sigma_nu_diag=nu, seed=seed)
        refs = ReferenceFields(gravity=gravity, magnetic=magnetic)
        mc = McConfig(runs=runs, window_lengths=window_lengths,
                      theta0_multipliers=multipliers,
                      include_baselines=include_baselines,
                      init_sigma_rad=init_sigma,
                      adaptation_mode=adaptation_mode,
                      em=EmOptions(max_iterations=em_iters,
                                   rel_tolerance=em_tol,
                                   q_floor=em_q_floor, r_floor=em_r_floor))
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from err

    if max(mc.window_lengths) > traj.steps:
        raise ConfigError(
            f"{path}: window_lengths: longest window "
            f"({max(mc.window_lengths)}) exceeds trajectory length "
            f"({traj.steps} steps)")

    resolved = {
        "duration_seconds": _canon(traj.duration_s),
        "dt_seconds": _canon(traj.dt_s),
        "initial_attitude_wxyz": _canon(traj.initial_attitude),
        "rate_profile": profile.kind,
        "rate_amplitude_rad_per_s": _canon(profile.amplitude),
        "rate_frequency_hz": _canon(profile.frequency_hz),
        "rate_offset_rad_per_s": _canon(profile.offset),
        "rate_phase_rad": _canon(profile.phase),
        "rate_segments": _canon_segments(profile.segments),
        "gyro_noise_var_rad2_per_s2": _canon(noise.sigma_eta_diag),
        "vector_noise_var": _canon(noise.sigma_nu_diag),
        "seed": _canon(noise.seed),
        "gravity_ref_unit": _canon(tuple(refs.gravity)),
        "magnetic_ref_unit": _canon(tuple(refs.magnetic)),
        "runs": _canon(mc.runs),
        "window_lengths": _canon(mc.window_lengths),
        "theta0_multipliers": _canon_pairs(mc.theta0_multipliers),
        "include_baselines": _canon(mc.include_baselines),
        "init_sigma_rad": _canon(mc.init_sigma_rad),
        "adaptation_mode": mc.adaptation_mode,
        "em_max_iterations": _canon(mc.em.max_iterations),
        "em_rel_tolerance": _canon(mc.em.rel_tolerance),
        "em_q_floor": _canon(mc.em.q_floor),
        "em_r_floor": _canon(mc.em.r_floor),
        "output_dir": out_dir,
        "output_format": out_fmt,
    }
    return ExperimentConfig(traj=traj, noise=noise, mc=mc, refs=refs,
                            output_dir=out_dir, output_format=out_fmt,
                            resolved=resolved)


def _g17(value: float) -> str:
    return f"{float(value):.17g}"


def _finite(value: float, context: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite value in {context}")
    return float(value)


def _write_rows(directory: Path, stem: str, fmt: str, header: list,
                rows: list):
    """One table, as CSV (17 significant digits, LF) or JSON records."""
    if fmt == "csv":
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(
                cell if isinstance(cell, str) else
                (str(cell) if isinstance(cell, (int, np.integer))
                 else _g17(cell)) for cell in row))
        path = directory / f"{stem}.csv"
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        return
    records = []
    for row in rows:
        record = {}
        for name, cell in zip(header, row):
            if isinstance(cell, str):
                record[name] = None if cell == "" else cell
            elif isinstance(cell, (int, np.integer)):
                record[name] = int(cell)
            else:
                record[name] = float(cell)
        records.append(record)
    path = directory / f"{stem}.json"
    with open(path, "w", newline="\n") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")


def _loglik_rows(summary, mc: McConfig) -> list:
    """Convergence trace of run 0 for the first initial-guess variant."""
    rows = []
    for wl in mc.window_lengths:
        trace = summary.by_label(f"adaptive_0_wl{wl}").loglik_traces[0]
        if trace is None:
            continue  # run 0 failed here; recorded in summary.failures
        for iteration, value in enumerate(trace, start=1):
            rows.append((wl, iteration,
                         _finite(value, "loglik_trace")))
    return rows


def _qr_rows(summary, mc: McConfig) -> list:
    """Per-run final estimates for the first initial-guess variant."""
    rows = []
    for run in range(mc.runs):
        for wl in mc.window_lengths:
            res = summary.by_label(f"adaptive_0_wl{wl}")
            fq, fr = res.frob_Q[run], res.frob_R[run]
            if not (np.isfinite(fq) and np.isfinite(fr)):
                continue  # failed run; recorded in summary.failures
            rows.append((run, wl, float(fq), float(fr),
                         _finite(summary.frob_Q_true, "qr_estimates"),
                         _finite(summary.frob_R_true, "qr_estimates")))
    return rows


def _median_cell(summary, label: str) -> object:
    median = summary.by_label(label).median_rmse
    if np.isfinite(median):
        return float(median)
    if any(lbl == label for _, lbl, _ in summary.failures):
        return ""  # every run failed: leave the cell empty
    raise NumericalError(f"non-finite median for {label}")


def _rmse_table(summary, mc: McConfig):
    header = ["theta0_q_mult", "theta0_r_mult"]
    header += [f"adaptive_wl{wl}" for wl in mc.window_lengths]
    if mc.include_baselines:
        header += ["fixed_true", "fixed_initial"]
    rows = []
    for vi, (aq, ar) in enumerate(mc.theta0_multipliers):
        row = [float(aq), float(ar)]
        row += [_median_cell(summary, f"adaptive_{vi}_wl{wl}")
                for wl in mc.window_lengths]
        if mc.include_baselines:
            row.append(_median_cell(summary, "fixed_true"))
            row.append(_median_cell(summary, f"fixed_initial_{vi}"))
        rows.append(row)
    return header, rows


def _write_manifest(directory: Path, cfg: ExperimentConfig, threads: int,
                    failures: list, error: str | None):
    manifest = {
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(
            timespec="seconds"),
        "status": "FAILED" if (failures or error) else "ok",
        "error": error,
        "failures": [{"run": run, "configuration": label, "message": msg}
                     for run, label, msg in failures],
        "seed": cfg.noise.seed,
        "run_seeds": [cfg.noise.seed + r for r in range(cfg.mc.runs)],
        "threads": threads,
        "config": cfg.resolved,
    }
    with open(directory / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, threads: int) -> int:
    """Execute the study and persist results; returns the exit code."""
    summary = run_monte_carlo(cfg.mc, cfg.traj, cfg.noise, cfg.refs,
                              workers=threads)
    directory = Path(cfg.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    error = None
    try:
        _write_rows(directory, "loglik_trace", cfg.output_format,
                    ["window_length", "em_iteration", "G_over_n"],
                    _loglik_rows(summary, cfg.mc))
        _write_rows(directory, "qr_estimates", cfg.output_format,
                    ["run", "window_length", "frob_Q_est", "frob_R_est",
                     "frob_Q_true", "frob_R_true"],
                    _qr_rows(summary, cfg.mc))
        header, rows = _rmse_table(summary, cfg.mc)
        _write_rows(directory, "rmse_table", cfg.output_format, header, rows)
    except NumericalError as err:
        error = str(err)
    _write_manifest(directory, cfg, threads, summary.failures, error)
    if error is not None:
        print(f"numerical failure: {error}", file=sys.stderr)
        return 2
    if summary.failures:
        print(f"numerical failure: {len(summary.failures)} run(s) failed; "
              f"see manifest.json", file=sys.stderr)
        return 2
    print(f"wrote results to {directory}")
    return 0


def run_single(cfg: ExperimentConfig, run_index: int) -> int:
    """Replay one run and persist its per-step trace."""
    trace = replay_run(cfg.mc, cfg.traj, cfg.noise, cfg.refs, run_index)
    directory = Path(cfg.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    header = ["step", "time_s",
              "truth_w", "truth_x", "truth_y", "truth_z",
              "est_w", "est_x", "est_y", "est_z",
              "err_x", "err_y", "err_z", "trace_P"]
    rows = []
    for i in range(len(trace.times)):
        row = [i + 1, trace.times[i], *trace.truth[i], *trace.estimate[i],
               *trace.error[i], trace.trace_P[i]]
        rows.append([row[0]] + [_finite(v, "run_trace") for v in row[1:]])
    _write_rows(directory, "run_trace", cfg.output_format, header, rows)
    print(f"wrote run {run_index} trace to {directory}")
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as config errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liekf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("config", nargs="?", default=None,
                       help="experiment config file "
                            "(default: bundled desk-scale config)")
        p.add_argument("--validate-only", action="store_true",
                       help="parse and validate the config, then exit")
        p.add_argument("--threads", type=int, default=None,
                       help="concurrent Monte Carlo runs "
                            "(default: available cores)")
        p.add_argument("--output-dir", default=None,
                       help="override the config's output directory")
        p.add_argument("--format", choices=("csv", "json"), default=None,
                       help="override the config's output format")

    add_common(sub.add_parser("run", help="run the full Monte Carlo study"))
    single = sub.add_parser("single-run",
                            help="replay one run with per-step output")
    add_common(single)
    single.add_argument("--run-index", type=int, required=True,
                        help="which Monte Carlo run to replay")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        threads = args.threads
        if threads is None:
            threads = os.cpu_count() or 1
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config or DEFAULT_CONFIG,
                          output_dir=args.output_dir,
                          output_format=args.format)
        if args.command == "single-run":
            if not 0 <= args.run_index < cfg.mc.runs:
                raise ConfigError(
                    f"--run-index {args.run_index} out of range "
                    f"(runs = {cfg.mc.runs})")
        if args.validate_only:
            return 0
        if args.command == "single-run":
            return run_single(cfg, args.run_index)
        return run_experiment(cfg, threads)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
