"""Command-line experiment runner.

Every subcommand reads a flat ``key = value`` config file (optional) and
command-line flags (which win), writes a JSON summary to stdout and, with
``--out``, the same summary plus CSV tables to a directory.  Exit codes:
0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from . import __version__
from .corrfn import CorrelationError, CorrelationFunction, classify_noise
from .rng import seed_stream
from .sde import DEFAULT_DT, DEFAULT_DT_W, ClockStall, RegimeSchedule

__all__ = ["ExperimentConfig", "ResultRecord", "main", "run", "seed_stream"]

SUBCOMMANDS = (
    "classify",
    "simulate-flow",
    "duality-check",
    "resolvent-exponent",
    "spectral-avoid",
    "nonempty-prob",
    "genfun",
    "dimension",
)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    subcommand: str = "classify"
    b: str = "exp_power"
    c: float = 1.0
    alpha: float = 0.5
    table_path: str = ""
    F: str = "0,1"
    n: int = 10000
    seed: int = 20240601
    dt: float = DEFAULT_DT
    dt_w: float = DEFAULT_DT_W
    rho: str = "0,0.25,0.5,0.75,0.9,0.95"
    max_order: int = 3
    lambda_window: str = "1e2,1e6"
    n_lambda: int = 13
    t: str = "0.5"
    x: str = "0.3"
    y: str = "0.7"
    times: str = ""
    points: str = "0,0.25,0.5"
    T: float = 1.0
    flow_dt: float = 1e-3
    h_min: float = 1e-6
    ratio: float = 1.1
    h_max: float = 0.01
    x_max: float = 16.0
    step: float = 1e-4
    box_dt: float = 2.0**-16
    box_dt_w: float = 2.0**-21
    eps_window: str = "1.52587890625e-05,0.015625"
    min_nonempty: int = 500
    out: str = ""

    # -- validation --------------------------------------------------------------------

    def validate(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        if self.b not in ("exp_power", "indicator", "tabulated"):
            raise ConfigError(f"b must be exp_power, indicator or tabulated, got {self.b!r}")
        if self.b == "tabulated" and not self.table_path:
            raise ConfigError("b = tabulated needs table_path")
        for name in ("c", "dt", "dt_w", "T", "flow_dt", "h_min", "h_max", "x_max", "step", "box_dt", "box_dt_w"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be positive, got {v}")
        for name in ("n", "max_order", "n_lambda", "min_nonempty"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")
        self.schedule()
        self.rho_list()
        lo, hi = self.lambdas()
        if not (0 < lo < hi):
            raise ConfigError("lambda_window must be 'lo,hi' with 0 < lo < hi")
        return self

    def schedule(self):
        text = self.F
        if "[" in text:
            # bracket form "[a,b],[c,d]" as well as "a,b;c,d"
            text = ";".join(re.findall(r"\[([^\]]*)\]", text))
        try:
            return RegimeSchedule.parse(text)
        except ValueError as e:
            raise ConfigError(f"F: {e}") from None

    def rho_list(self):
        vals = _floats(self.rho, "rho")
        for r in vals:
            if not (0.0 <= r < 1.0):
                raise ConfigError(f"rho values must lie in [0, 1), got {r}")
        return vals

    def lambdas(self):
        v = _floats(self.lambda_window, "lambda_window")
        if len(v) != 2:
            raise ConfigError("lambda_window must be 'lo,hi'")
        return v[0], v[1]

    def eps_bounds(self):
        v = _floats(self.eps_window, "eps_window")
        if len(v) != 2 or not (0 < v[0] < v[1]):
            raise ConfigError("eps_window must be 'lo,hi' with 0 < lo < hi")
        return v[0], v[1]

    def corr(self):
        try:
            if self.b == "exp_power":
                return CorrelationFunction.exp_power(self.c, self.alpha)
            if self.b == "indicator":
                return CorrelationFunction.indicator()
            return CorrelationFunction.from_csv(self.table_path)
        except (OSError, ValueError) as e:
            raise ConfigError(f"b: {e}") from None

    def grid(self):
        from .semigroup import Grid1D

        try:
            return Grid1D.build(self.h_min, self.ratio, self.h_max, self.x_max)
        except ValueError as e:
            raise ConfigError(f"grid: {e}") from None

    def digest(self):
        d = dataclasses.asdict(self)
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def lines(self):
        return [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]


def _floats(text, name):
    try:
        return [float(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_ALIASES = {"b.kind": "b", "b.c": "c", "b.alpha": "alpha", "b.table_path": "table_path", "n_replicas": "n",
            "master_seed": "seed", "rho_list": "rho"}


def _key(raw):
    k = raw.strip().replace("-", "_")
    k = _ALIASES.get(raw.strip(), _ALIASES.get(k, k))
    return k


def _coerce(name, value):
    typ = _FIELDS[name].type
    try:
        if typ in ("int", int):
            v = float(value)
            if v != int(v):
                raise ValueError
            return int(v)
        if typ in ("float", float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None
    return str(value)


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = FsPath(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        k, v = s.split("=", 1)
        name = _key(k)
        if name not in _FIELDS or name == "subcommand":
            raise ConfigError(f"{path}:{lineno}: unknown key {k.strip()!r}")
        try:
            values[name] = _coerce(name, v.strip())
        except ConfigError as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from None
    return values


# -- argument parsing ---------------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="harrisflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"harrisflow {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file; flags override it")
        s.add_argument("--show-config", action="store_true", help="print the resolved configuration and exit")
        s.add_argument("--b", choices=["exp_power", "indicator", "tabulated"])
        s.add_argument("--c", type=float)
        s.add_argument("--alpha", type=float)
        s.add_argument("--table-path")
        s.add_argument("--F", help='elementary set "a,b;c,d"')
        s.add_argument("--n", type=int, help="replicas (samples for dimension)")
        s.add_argument("--seed", type=int)
        s.add_argument("--dt", type=float, help="flow-time grid step")
        s.add_argument("--dt-w", type=float, help="Wiener-clock step")
        s.add_argument("--rho", help='comma list, e.g. "0,0.5,0.9"')
        s.add_argument("--max-order", type=int)
        s.add_argument("--lambda-window", help='"lo,hi"')
        s.add_argument("--n-lambda", type=int)
        s.add_argument("--t", help="comma list of times (duality-check)")
        s.add_argument("--x", help="comma list")
        s.add_argument("--y", help="comma list")
        s.add_argument("--times", help="increasing times for the alternating check")
        s.add_argument("--points", help="starting points for simulate-flow")
        s.add_argument("--T", type=float, help="horizon for simulate-flow")
        s.add_argument("--flow-dt", type=float)
        s.add_argument("--h-min", type=float)
        s.add_argument("--ratio", type=float)
        s.add_argument("--h-max", type=float)
        s.add_argument("--x-max", type=float)
        s.add_argument("--step", type=float, help="semigroup time step")
        s.add_argument("--box-dt", type=float)
        s.add_argument("--box-dt-w", type=float)
        s.add_argument("--eps-window")
        s.add_argument("--min-nonempty", type=int)
        s.add_argument("--out", help="output directory for JSON and CSV files")
    return p


def build_config(argv):
    args = _parser().parse_args(argv)
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None and name != "subcommand":
            values[name] = v
    cfg = ExperimentConfig(subcommand=args.subcommand, **values)
    return cfg.validate(), args.show_config


# -- outputs ------------------------------------------------------------------------------


@dataclass
class ResultRecord:
    experiment: str
    config_hash: str
    estimates: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    version: str = __version__

    def as_dict(self):
        d = {"experiment": self.experiment, "config_hash": self.config_hash, "version": self.version,
             "estimates": [e.as_dict() for e in self.estimates], "wall_clock": self.wall_clock}
        d.update(self.extra)
        return d


def _write_csv(out, name, header, rows):
    if not out:
        return
    path = FsPath(out) / name
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# version", __version__])
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _jsonable(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# -- subcommands --------------------------------------------------------------------------


def _classify(cfg, rec):
    f = cfg.corr()
    rec.extra["classification"] = classify_noise(f).value
    rec.extra["b"] = f.describe()


def _simulate_flow(cfg, rec):
    from .flows import simulate_npoint

    pts = _floats(cfg.points, "points")
    s = simulate_npoint(cfg.corr(), pts, cfg.T, cfg.flow_dt, cfg.seed)
    t = s.times
    _write_csv(cfg.out, "trajectories.csv", ["t"] + [f"x{i + 1}" for i in range(len(pts))],
               [[t[k], *s.trajectories[k]] for k in range(t.size)])
    _write_csv(cfg.out, "merges.csv", ["time", "i", "j"], [list(m) for m in s.merges])
    rec.extra.update({"n_points": len(pts), "final": s.trajectories[-1].tolist(), "merges": s.merges,
                      "blocks": [list(map(int, b)) for b in s.partition_at(-1)]})


def _duality(cfg, rec):
    from .semigroup import SemigroupSolver, alternating_values, duality_single

    solver = SemigroupSolver(cfg.corr(), cfg.grid(), cfg.step)
    rows = []
    xs, ys = _floats(cfg.x, "x"), _floats(cfg.y, "y")
    if cfg.times:
        times = _floats(cfg.times, "times")
        for x in xs:
            for y in ys:
                lhs, rhs = alternating_values(solver, times, x, y)
                rows.append([x, y, lhs, rhs, abs(lhs - rhs)])
        _write_csv(cfg.out, "duality_alternating.csv", ["x", "y", "lhs", "rhs", "residual"], rows)
        rec.extra["times"] = times
        rec.extra["max_residual"] = max(r[-1] for r in rows)
    else:
        for t in _floats(cfg.t, "t"):
            for x in xs:
                for y in ys:
                    r = duality_single(solver, t, x, y)
                    rows.append([t, x, y, r.plus_hatzero, r.minus_hatplus])
        _write_csv(cfg.out, "duality.csv", ["t", "x", "y", "residual_plus0", "residual_minus_hatplus"], rows)
        rec.extra["max_residual"] = max(max(r[3], r[4]) for r in rows)
    rec.extra["rows"] = rows


def _resolvent(cfg, rec):
    from .dimension import exponent_via_resolvent
    from .sde import chart_for

    curve = exponent_via_resolvent(chart_for(cfg.corr()), cfg.lambdas(), cfg.n_lambda)
    _write_csv(cfg.out, "resolvent.csv", ["lambda", "g", "psi"], curve.rows())
    rec.extra.update({"exponent": curve.exponent, "exponent_stderr": curve.stderr, "lambda_window": curve.window})


def _avoid(cfg, rec):
    from .spectra import prob_avoid

    res = prob_avoid(cfg.corr(), cfg.schedule(), cfg.n, cfg.seed, cfg.dt_w, cfg.dt, grid=cfg.grid())
    rec.estimates += res.estimates()
    rec.extra["F"] = str(cfg.schedule())


def _nonempty(cfg, rec):
    from .spectra import Estimate, prob_nonempty_three_ways

    res = prob_nonempty_three_ways(cfg.corr(), cfg.n, cfg.seed, cfg.dt_w, cfg.dt, with_pde=True, grid=cfg.grid())
    rec.estimates += res.estimates() + [Estimate.exact(res.deterministic, "semigroup")]


def _genfun(cfg, rec):
    from .spectra import generating_function, spectral_mass_fit

    rhos = cfg.rho_list()
    G = generating_function(cfg.corr(), cfg.schedule(), rhos, cfg.n, cfg.seed, cfg.dt_w)
    rec.estimates += G
    _write_csv(cfg.out, "genfun.csv", ["rho", "G", "stderr"], [[r, g.value, g.stderr] for r, g in zip(rhos, G)])
    if len(set(rhos)) >= cfg.max_order + 2:
        fit = spectral_mass_fit(rhos, [g.value for g in G], cfg.max_order, [max(g.stderr, 1e-9) for g in G])
        rec.extra["fit"] = {"masses": fit.masses.tolist(), "tail": fit.tail, "condition": fit.condition,
                            "residual": fit.residual}
        if fit.extrapolated is not None:
            rec.extra["fit"]["G_one_minus"] = {"value": fit.extrapolated.value, "stderr": fit.extrapolated.stderr,
                                               "form": fit.extrapolated.form}


def _dimension(cfg, rec):
    from .corrfn import Kind
    from .dimension import box_dimension, exponent_via_resolvent, predicted_dimension
    from .sde import chart_for
    from .spectra import sample_spectral_sets

    f = cfg.corr()
    samples = []
    offset = 0
    while True:
        samples += sample_spectral_sets(f, cfg.n, cfg.seed, cfg.box_dt, cfg.box_dt_w, tau=1.0, offset=offset)
        offset += cfg.n
        if sum(not s.empty for s in samples) >= cfg.min_nonempty or offset >= 50 * cfg.n:
            break
    box = box_dimension(samples, cfg.eps_bounds())
    curve = exponent_via_resolvent(chart_for(f), cfg.lambdas(), cfg.n_lambda)
    _write_csv(cfg.out, "box_counts.csv", ["eps", "count"], box.rows())
    _write_csv(cfg.out, "resolvent.csv", ["lambda", "g", "psi"], curve.rows())
    alpha = 0.0 if f.kind is Kind.INDICATOR else f.alpha
    rec.extra.update({
        "box_dimension": box.slope, "box_stderr": box.stderr, "eps_window": box.window,
        "n_samples": len(samples), "n_nonempty": box.n_samples,
        "resolvent_exponent": curve.exponent, "lambda_window": curve.window,
        "predicted": predicted_dimension(alpha) if alpha < 1 else None,
    })


_DISPATCH = {
    "classify": _classify,
    "simulate-flow": _simulate_flow,
    "duality-check": _duality,
    "resolvent-exponent": _resolvent,
    "spectral-avoid": _avoid,
    "nonempty-prob": _nonempty,
    "genfun": _genfun,
    "dimension": _dimension,
}


def run(cfg: ExperimentConfig) -> ResultRecord:
    """Execute one experiment; files go to ``cfg.out`` if set."""
    if cfg.out:
        FsPath(cfg.out).mkdir(parents=True, exist_ok=True)
    rec = ResultRecord(cfg.subcommand, cfg.digest())
    t0 = time.perf_counter()
    _DISPATCH[cfg.subcommand](cfg, rec)
    rec.wall_clock = time.perf_counter() - t0
    if cfg.out:
        (FsPath(cfg.out) / "summary.json").write_text(json.dumps(rec.as_dict(), indent=2, default=_jsonable) + "\n")
    return rec


def main(argv=None):
    from .corrfn import ResolutionError
    from .dimension import DimensionError
    from .flows import CholeskyError
    from .semigroup import GridError, ResolventError
    from .spectra import FitError

    try:
        cfg, show = build_config(sys.argv[1:] if argv is None else argv)
        if show:
            print("\n".join(cfg.lines()))
            return 0
        rec = run(cfg)
    except (ConfigError, CorrelationError) as e:
        kind = "insufficient resolution" if isinstance(e, ResolutionError) else "config error"
        print(f"harrisflow: {kind}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ClockStall, CholeskyError, FitError, ResolventError, GridError, DimensionError) as e:
        print(f"harrisflow: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(rec.as_dict(), indent=2, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
