"""Command-line driver for single key-rate runs and parameter sweeps.

Config files are INI-style with optional [run], [scenario] and [sweep]
sections; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .channel import SCENARIOS, Scenario, scenario_noise, transmittance
from .keyrate import KeyRateConfig, KeyRateError, key_rate

log = logging.getLogger("qpsk_keyrate")

EXIT_OK, EXIT_ERROR, EXIT_NO_KEY = 0, 1, 2
FALLBACK_ALPHA = 0.66

COLUMNS = (
    "distance_km", "alpha", "xi", "delta", "beta", "n_cutoff", "max_iter", "scenario",
    "eta", "xi_eff", "rate", "primal", "dual", "gap", "eps_prime",
    "p_pass_q", "p_pass_p", "delta_ec_q", "delta_ec_p", "iterations", "seconds", "flag",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    alpha: float = FALLBACK_ALPHA
    distance_km: float = 0.0
    xi: float = 0.0
    scenario: str = "ideal"
    xi_hom: float = 0.002
    insertion_loss_db: float = 0.7
    eta_d: float = 1.0
    beta: float = 0.95
    delta: float = 0.0
    n_cutoff: int = 12
    max_iter: int = 100
    stop_tol: float = 1e-7
    epsilon: float = 1e-12
    attenuation_db_per_km: float = 0.2
    distances: tuple = ()
    alpha_min: float = 0.6
    alpha_max: float = 1.1
    alpha_step: float = 0.01
    delta_max: float = 2.0
    delta_step: float = 0.01
    noise_max: float = 0.2
    noise_width: float = 1e-4
    optimize_alpha: bool = False
    jobs: int = 1
    timing: bool = False

    def validate(self) -> None:
        positive = ("alpha", "beta", "stop_tol", "epsilon", "alpha_step", "delta_step",
                    "noise_max", "noise_width", "n_cutoff", "max_iter", "jobs")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)!r}")
        for name in ("distance_km", "xi", "delta", "delta_max", "xi_hom", "attenuation_db_per_km"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if self.beta > 1:
            raise ConfigError(f"beta must be <= 1, got {self.beta!r}")
        if self.alpha_min > self.alpha_max or self.alpha_min <= 0:
            raise ConfigError(f"amplitude range [{self.alpha_min}, {self.alpha_max}] is empty or non-positive")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}, got {self.scenario!r}")
        if self.scenario == "untrusted-heterodyne-remap":
            raise ConfigError("scenario untrusted-heterodyne-remap gives a comparison noise figure only; "
                              "it cannot drive a homodyne key-rate run")
        if any(d < 0 for d in self.distances):
            raise ConfigError("distances must all be >= 0")

    def scenario_model(self) -> Scenario:
        return Scenario(self.scenario, xi_oth=self.xi, xi_hom=self.xi_hom,
                        insertion_loss_db=self.insertion_loss_db, eta_d=self.eta_d)

    def effective_xi(self) -> float:
        return scenario_noise(self.scenario_model(), self.distance_km, self.attenuation_db_per_km)

    def keyrate_config(self) -> KeyRateConfig:
        return KeyRateConfig(
            alpha=self.alpha, distance_km=self.distance_km, xi=self.effective_xi(), delta=self.delta,
            beta=self.beta, n_cutoff=self.n_cutoff, max_iter=self.max_iter, stop_tol=self.stop_tol,
            epsilon=self.epsilon, attenuation_db_per_km=self.attenuation_db_per_km,
        )


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


# field name -> (config section, parser)
FIELDS = {
    "alpha": ("run", float), "distance_km": ("run", float), "xi": ("run", float),
    "beta": ("run", float), "delta": ("run", float), "n_cutoff": ("run", int),
    "max_iter": ("run", int), "stop_tol": ("run", float), "epsilon": ("run", float),
    "attenuation_db_per_km": ("run", float), "jobs": ("run", int), "timing": ("run", _parse_bool),
    "scenario": ("scenario", str), "xi_hom": ("scenario", float),
    "insertion_loss_db": ("scenario", float), "eta_d": ("scenario", float),
    "distances": ("sweep", _parse_list), "alpha_min": ("sweep", float), "alpha_max": ("sweep", float),
    "alpha_step": ("sweep", float), "delta_max": ("sweep", float), "delta_step": ("sweep", float),
    "noise_max": ("sweep", float), "noise_width": ("sweep", float),
    "optimize_alpha": ("sweep", _parse_bool),
}
ALIASES = {"kind": "scenario", "distance": "distance_km", "nc": "n_cutoff", "ni": "max_iter"}


def _key_line(lines: list, section: str, key: str) -> int | None:
    current = None
    for no, line in enumerate(lines, 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
        elif current == section and stripped.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return no
    return None


def load_config(path) -> dict:
    """Read an INI config into a dict of RunConfig field values."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        parser.read_string(text, source=str(path))
    except configparser.ParsingError as exc:
        where = "; ".join(f"line {no}: {line.strip()!r}" for no, line in exc.errors)
        raise ConfigError(f"{path}: cannot parse {where}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    lines = text.splitlines()
    values = {}
    for section in parser.sections():
        if section not in ("run", "scenario", "sweep"):
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            name = ALIASES.get(key, key)
            where = f"{path}, line {_key_line(lines, section, key)}"
            if name not in FIELDS or FIELDS[name][0] != section:
                raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
            try:
                values[name] = FIELDS[name][1](raw)
            except ValueError:
                raise ConfigError(f"{where}: [{section}] {key} = {raw!r} is not a valid value") from None
    return values


def fmt_number(v) -> str:
    """12 significant digits; scientific notation below 1e-3 in magnitude."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if v == 0:
        return "0"
    if abs(v) < 1e-3:
        return f"{v:.11e}"
    return f"{v:.12g}"


def _json_value(v):
    if isinstance(v, str) or v is None:
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return int(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return float(fmt_number(v))


def evaluate_point(run: RunConfig) -> dict:
    """One full key-rate evaluation as a flat output record."""
    rec = {
        "distance_km": run.distance_km, "alpha": run.alpha, "xi": run.xi, "delta": run.delta,
        "beta": run.beta, "n_cutoff": run.n_cutoff, "max_iter": run.max_iter,
        "scenario": run.scenario,
        "eta": transmittance(run.distance_km, run.attenuation_db_per_km),
    }
    try:
        rec["xi_eff"] = run.effective_xi()
        res = key_rate(run.keyrate_config())
    except (KeyRateError, ValueError) as exc:
        log.error("point L=%s alpha=%s xi=%s failed: %s", run.distance_km, run.alpha, run.xi, exc)
        rec.setdefault("xi_eff", float("nan"))
        for col in COLUMNS[10:-1]:
            rec[col] = float("nan")
        rec["seconds"] = ""
        rec["flag"] = f"error:{getattr(exc, 'stage', 'config')}"
        return rec
    rec.update({
        "rate": res.rate, "primal": res.primal_value, "dual": res.dual_value, "gap": res.gap,
        "eps_prime": res.eps_prime, "p_pass_q": res.p_pass["q"], "p_pass_p": res.p_pass["p"],
        "delta_ec_q": res.delta_ec["q"], "delta_ec_p": res.delta_ec["p"],
        "iterations": res.iterations_used,
        # wall-clock time breaks byte-identical reruns, so it is opt-in
        "seconds": res.seconds if run.timing else "",
        "flag": res.flag,
    })
    return rec


def evaluate_many(runs: list, jobs: int = 1) -> list:
    """Evaluate points in a worker pool; output order follows ``runs``."""
    if jobs <= 1 or len(runs) <= 1:
        return [evaluate_point(r) for r in runs]
    with ProcessPoolExecutor(max_workers=min(jobs, len(runs))) as pool:
        return list(pool.map(evaluate_point, runs))


def grid(start: float, stop: float, step: float) -> list:
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 10) for k in range(count)]


def best_record(records: list, key: str):
    """Record with the largest finite rate; ties go to the smaller ``key``."""
    ok = [r for r in records if not r["flag"].startswith("error") and math.isfinite(r["rate"])]
    if not ok:
        return None
    return max(ok, key=lambda r: (r["rate"], -r[key]))


def optimize_amplitude(run: RunConfig) -> tuple[dict | None, list]:
    alphas = grid(run.alpha_min, run.alpha_max, run.alpha_step)
    records = evaluate_many([replace(run, alpha=a) for a in alphas], run.jobs)
    return best_record(records, "alpha"), records


def optimize_delta(run: RunConfig) -> tuple[dict | None, list, float]:
    alpha = run.alpha
    if run.optimize_alpha:
        best, _ = optimize_amplitude(replace(run, delta=0.0))
        alpha = best["alpha"] if best is not None and best["rate"] > 0 else FALLBACK_ALPHA
    deltas = grid(0.0, run.delta_max, run.delta_step)
    records = evaluate_many([replace(run, alpha=alpha, delta=d) for d in deltas], run.jobs)
    return best_record(records, "delta"), records, alpha


def noise_tolerance(run: RunConfig) -> tuple[float, list]:
    """Largest probed xi with a positive certified rate, by bisection."""
    probes = []

    def positive(xi):
        rec = evaluate_point(replace(run, xi=xi))
        probes.append(rec)
        return rec["flag"] == "ok" and rec["rate"] > 0

    if not positive(0.0):
        return 0.0, probes
    lo, hi = 0.0, run.noise_max
    if positive(hi):
        return hi, probes
    while hi - lo > run.noise_width:
        mid = round(0.5 * (lo + hi), 12)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return lo, probes


def sweep_distance(run: RunConfig) -> list:
    distances = sorted(run.distances) if run.distances else [run.distance_km]
    if not run.optimize_alpha:
        return evaluate_many([replace(run, distance_km=d) for d in distances], run.jobs)
    rows = []
    for d in distances:
        best, records = optimize_amplitude(replace(run, distance_km=d))
        rows.append(best if best is not None else records[0])
    return rows


# ---------------------------------------------------------------------------
# output


def render_csv(records: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow([v if isinstance(v, str) else fmt_number(v) for v in (rec[c] for c in COLUMNS)])
    return buf.getvalue()


def render_json(payload) -> str:
    def conv(obj):
        if isinstance(obj, dict):
            return {k: conv(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [conv(v) for v in obj]
        return _json_value(obj)

    return json.dumps(conv(payload), indent=2) + "\n"


def ordered(rec: dict) -> dict:
    return {c: rec[c] for c in COLUMNS}


def write_output(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    Path(out).write_text(text, encoding="utf-8")


def emit_plot(source: str, x: str, y: str, group: str | None, out: str) -> list:
    """Split a sweep CSV into two-column gnuplot data files, one per curve."""
    with open(source, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{source} has no data rows")
    for col in (x, y) + ((group,) if group else ()):
        if col not in rows[0]:
            raise ConfigError(f"column {col!r} not in {source}")
    curves: dict[str, list] = {}
    for row in rows:
        curves.setdefault(row[group] if group else "", []).append((row[x], row[y]))
    written = []
    base = Path(out)
    for name, points in curves.items():
        path = base if not group else base.with_name(f"{base.stem}_{group}={name}{base.suffix or '.dat'}")
        lines = [f"# {x} {y}" + (f"  ({group}={name})" if group else "")]
        lines += [f"{px} {py}" for px, py in points]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(str(path))
    return written


# ---------------------------------------------------------------------------
# argument handling


OVERRIDES = {
    "xi": float, "beta": float, "nc": int, "ni": int, "delta": float,
    "alpha": float, "distance": float, "scenario": str,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run], [scenario], [sweep] sections")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--jobs", type=int, help="worker processes for grid evaluations")
    common.add_argument("--timing", action="store_true", help="fill the seconds column")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, typ in OVERRIDES.items():
        common.add_argument(f"--{name}", type=typ)
    common.add_argument("--distances", help="comma-separated distance grid in km")
    common.add_argument("--alpha-range", help="amplitude grid as MIN:MAX:STEP")
    common.add_argument("--delta-max", type=float)
    common.add_argument("--delta-step", type=float)
    common.add_argument("--optimize-alpha", action="store_true",
                        help="optimize the amplitude per point (sweeps) or at delta=0 (optimize-delta)")

    parser = argparse.ArgumentParser(prog="qpsk-keyrate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("keyrate", parents=[common], help="one certified key-rate evaluation")
    sub.add_parser("sweep-distance", parents=[common], help="key rate over a distance grid")
    sub.add_parser("optimize-amplitude", parents=[common], help="best amplitude on a grid")
    sub.add_parser("optimize-delta", parents=[common], help="best post-selection threshold on a grid")
    sub.add_parser("noise-tolerance", parents=[common], help="largest excess noise with positive rate")
    plot = sub.add_parser("emit-plot", help="two-column data files from a sweep CSV")
    plot.add_argument("input")
    plot.add_argument("--x", default="distance_km")
    plot.add_argument("--y", default="rate")
    plot.add_argument("--group")
    plot.add_argument("--out", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    names = {"nc": "n_cutoff", "ni": "max_iter", "distance": "distance_km"}
    for flag in OVERRIDES:
        v = getattr(args, flag)
        if v is not None:
            values[names.get(flag, flag)] = v
    if args.jobs is not None:
        values["jobs"] = args.jobs
    if args.timing:
        values["timing"] = True
    if args.optimize_alpha:
        values["optimize_alpha"] = True
    if args.distances:
        try:
            values["distances"] = _parse_list(args.distances)
        except ValueError:
            raise ConfigError(f"--distances: cannot parse {args.distances!r}") from None
    if args.alpha_range:
        try:
            lo, hi, step = (float(t) for t in args.alpha_range.split(":"))
        except ValueError:
            raise ConfigError(f"--alpha-range must be MIN:MAX:STEP, got {args.alpha_range!r}") from None
        values.update(alpha_min=lo, alpha_max=hi, alpha_step=step)
    if args.delta_max is not None:
        values["delta_max"] = args.delta_max
    if args.delta_step is not None:
        values["delta_step"] = args.delta_step
    run = RunConfig(**values)
    run.validate()
    return run


def _summary(**items) -> None:
    for k, v in items.items():
        print(f"{k}: {v if isinstance(v, str) else fmt_number(v)}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "emit-plot":
            for path in emit_plot(args.input, args.x, args.y, args.group, args.out):
                print(path)
            return EXIT_OK
        run = resolve_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    fmt = args.format or ("json" if args.command == "keyrate" else "csv")

    if args.command == "keyrate":
        rec = evaluate_point(run)
        text = render_json(ordered(rec)) if fmt == "json" else render_csv([rec])
        write_output(text, args.out)
        if rec["flag"].startswith("error"):
            return EXIT_ERROR
        return EXIT_OK if rec["flag"] == "ok" else EXIT_NO_KEY

    if args.command == "sweep-distance":
        rows = sweep_distance(run)
        text = render_json([ordered(r) for r in rows]) if fmt == "json" else render_csv(rows)
        write_output(text, args.out)
        return EXIT_OK

    if args.command == "optimize-amplitude":
        best, rows = optimize_amplitude(run)
        has_key = best is not None and best["rate"] > 0
        if fmt == "json":
            text = render_json({"best_alpha": best["alpha"] if has_key else None,
                                "grid": [ordered(r) for r in rows]})
        else:
            text = render_csv(rows)
        write_output(text, args.out)
        _summary(best_alpha=best["alpha"] if has_key else "none (no key on grid)",
                 best_rate=best["rate"] if best else float("nan"))
        return EXIT_OK if has_key else EXIT_NO_KEY

    if args.command == "optimize-delta":
        best, rows, alpha = optimize_delta(run)
        has_key = best is not None and best["rate"] > 0
        if fmt == "json":
            text = render_json({"alpha": alpha, "best_delta": best["delta"] if has_key else None,
                                "grid": [ordered(r) for r in rows]})
        else:
            text = render_csv(rows)
        write_output(text, args.out)
        _summary(alpha=alpha, best_delta=best["delta"] if has_key else "none (no key on grid)",
                 best_rate=best["rate"] if best else float("nan"))
        return EXIT_OK if has_key else EXIT_NO_KEY

    if args.command == "noise-tolerance":
        tol, probes = noise_tolerance(run)
        if fmt == "json":
            text = render_json({"distance_km": run.distance_km, "tolerance": tol,
                                "probes": [ordered(r) for r in probes]})
        else:
            text = render_csv(probes)
        write_output(text, args.out)
        _summary(distance_km=run.distance_km, tolerance=tol)
        return EXIT_OK if tol > 0 else EXIT_NO_KEY

    parser.error(f"unknown command {args.command}")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
