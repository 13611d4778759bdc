"""Batch driver: seeded simulation runs, verification suites, plot data.

Runs are described by a JSON config file with a versioned schema id.  All
artifacts are deterministic functions of (config, seed): no timestamps, keys
sorted, floats written with full round-trip precision.  Exit codes: 0 all
good, 1 a verification suite failed, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, rng
from .birth_death import (
    Trajectory,
    kernel_from_descriptor,
    read_event_log,
    simulate,
    verify_counting_identity,
    verify_domination,
    write_event_log,
)
from .geometry import Box, Configuration, Window
from .marked_process import (
    Observable,
    cadlag_check,
    combine,
    counting_observable,
    mark_sum_observable,
    write_marked_snapshots,
    write_observable_series,
)
from .scales import (
    ScaleParams,
    check_gronwall_inequality,
    check_moment_growth,
    conservative_moment_constants,
)
from .spin_sde import (
    COEFFICIENT_LIBRARY,
    CoefficientSet,
    InitialMarkPolicy,
    IntegratorConfig,
    check_drift_diffusion_bounds,
    cutoff_convergence_study,
    integrate_marks,
    read_mark_path_csv,
    run_manifest,
)

SCHEMA_ID = "bdspin-run/1"
SUITES = ("domination", "gronwall", "cutoff", "moments", "cadlag", "bounds")


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending field."""


def _get(obj: dict, field: str, path: str, typ=None, default=...):
    if field not in obj:
        if default is not ...:
            return default
        raise ConfigError(f"{path}{field}: missing required field")
    value = obj[field]
    if typ is not None and not isinstance(value, typ):
        raise ConfigError(f"{path}{field}: expected {typ}, got {type(value).__name__}")
    return value


def _positive(value, name):
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
        raise ConfigError(f"{name}: must be a positive finite number")
    return float(value)


def _nonnegative(value, name):
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
        raise ConfigError(f"{name}: must be a nonnegative finite number")
    return float(value)


@dataclass
class RunConfig:
    """Fully validated and resolved run description."""

    window: Window
    kernel: object
    death_rate: float
    horizon: float
    init_config_spec: dict
    init_marks: InitialMarkPolicy
    coeffs: CoefficientSet
    icfg: IntegratorConfig
    scale: ScaleParams
    seed: int
    replicas: int
    mark_stride: int
    snapshot_stride: int
    persist_driving: bool
    raw: dict

    def build_gamma0(self, seed: int) -> Configuration:
        spec = self.init_config_spec
        cell = max(self.kernel.interaction_range, self.coeffs.radius)
        if spec["kind"] == "poisson":
            from .geometry import poisson_configuration

            return poisson_configuration(self.window, spec["intensity"], seed,
                                         cell_size=cell)
        return Configuration(self.window,
                             [(rec["id"], rec["position"]) for rec in spec["points"]],
                             cell_size=cell)


def _build_init_marks(spec: dict, window: Window) -> InitialMarkPolicy:
    kind = _get(spec, "kind", "initial_marks.", str)
    if kind == "constant":
        value = _get(spec, "value", "initial_marks.", (int, float))
        return InitialMarkPolicy.constant(float(value))
    if kind == "radial_gaussian":
        amp = float(_get(spec, "amplitude", "initial_marks.", (int, float)))
        width = _positive(_get(spec, "width", "initial_marks.", (int, float)),
                          "initial_marks.width")
        center = np.asarray(window.box.hi) / 2.0

        def field(pos: np.ndarray) -> float:
            return amp * math.exp(-(window.distance(pos, center) / width) ** 2)

        return InitialMarkPolicy.from_field(field, name=f"radial_gaussian({amp},{width})")
    raise ConfigError(f"initial_marks.kind: unknown kind {kind!r}")


def _build_coeffs(spec: dict) -> CoefficientSet:
    def piece(group: str, sub: dict):
        kind = _get(sub, "kind", f"coefficients.{group}.", str)
        params = _get(sub, "params", f"coefficients.{group}.", list, default=[])
        try:
            factory = COEFFICIENT_LIBRARY[group][kind]
        except KeyError:
            raise ConfigError(f"coefficients.{group}.kind: unknown kind {kind!r}") from None
        try:
            return factory(*params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"coefficients.{group}.params: {exc}") from None

    radius = _positive(_get(spec, "radius", "coefficients.", (int, float)),
                       "coefficients.radius")
    return CoefficientSet(
        piece("single", _get(spec, "single", "coefficients.", dict)),
        piece("pair", _get(spec, "pair", "coefficients.", dict)),
        piece("diffusion", _get(spec, "diffusion", "coefficients.", dict)),
        radius,
    )


def load_config(path, *, seed_override: int | None = None,
                replicas_override: int | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from None

    schema = _get(raw, "schema", "", str)
    if schema != SCHEMA_ID:
        raise ConfigError(f"schema: expected {SCHEMA_ID!r}, got {schema!r}")

    wspec = _get(raw, "window", "", dict)
    window = Window(
        _positive(_get(wspec, "side", "window.", (int, float)), "window.side"),
        int(_get(wspec, "dim", "window.", int)),
        _get(wspec, "boundary", "window.", str, default="periodic"),
    )

    kspec = _get(raw, "kernel", "", dict)
    try:
        kernel = kernel_from_descriptor(kspec)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"kernel: {exc}") from None

    death_rate = _nonnegative(_get(raw, "death_rate", "", (int, float)), "death_rate")
    horizon = _positive(_get(raw, "horizon", "", (int, float)), "horizon")

    ispec = _get(raw, "initial_configuration", "", dict)
    ikind = _get(ispec, "kind", "initial_configuration.", str)
    if ikind == "poisson":
        _nonnegative(_get(ispec, "intensity", "initial_configuration.", (int, float)),
                     "initial_configuration.intensity")
    elif ikind == "explicit":
        pts = _get(ispec, "points", "initial_configuration.", list)
        for i, rec in enumerate(pts):
            if "id" not in rec or "position" not in rec:
                raise ConfigError(
                    f"initial_configuration.points[{i}]: needs id and position")
    else:
        raise ConfigError(f"initial_configuration.kind: unknown kind {ikind!r}")

    init_marks = _build_init_marks(_get(raw, "initial_marks", "", dict), window)
    coeffs = _build_coeffs(_get(raw, "coefficients", "", dict))

    ispec2 = _get(raw, "integrator", "", dict)
    try:
        icfg = IntegratorConfig(
            _positive(_get(ispec2, "dt", "integrator.", (int, float)), "integrator.dt"),
            _get(ispec2, "scheme", "integrator.", str, default="euler"),
        )
    except ValueError as exc:
        raise ConfigError(f"integrator: {exc}") from None

    sspec = _get(raw, "scale_params", "", dict)
    try:
        scale = ScaleParams(
            float(_get(sspec, "alpha_star", "scale_params.", (int, float), default=0.0)),
            float(_get(sspec, "alpha_sup", "scale_params.", (int, float))),
            float(_get(sspec, "alpha", "scale_params.", (int, float))),
            float(_get(sspec, "beta", "scale_params.", (int, float))),
            float(_get(sspec, "p", "scale_params.", (int, float))),
            float(_get(sspec, "q", "scale_params.", (int, float))),
        )
    except ValueError as exc:
        raise ConfigError(f"scale_params: {exc}") from None
    if scale.p < coeffs.single.growth_power:
        raise ConfigError("scale_params.p: must be >= the drift growth power "
                          f"{coeffs.single.growth_power}")

    seed = int(_get(raw, "seed", "", int, default=0))
    if seed_override is not None:
        seed = seed_override
    replicas = int(_get(raw, "replicas", "", int, default=1))
    if replicas_override is not None:
        replicas = replicas_override
    if replicas < 1:
        raise ConfigError("replicas: must be >= 1")

    ospec = _get(raw, "output", "", dict, default={})
    mark_stride = int(_get(ospec, "mark_stride", "output.", int, default=1))
    snapshot_stride = int(_get(ospec, "snapshot_stride", "output.", int, default=1))
    if mark_stride < 1 or snapshot_stride < 1:
        raise ConfigError("output: strides must be >= 1")
    persist_driving = bool(_get(ospec, "persist_driving", "output.", bool, default=False))

    resolved = dict(raw)
    resolved["seed"] = seed
    resolved["replicas"] = replicas
    return RunConfig(window, kernel, death_rate, horizon, ispec, init_marks, coeffs,
                     icfg, scale, seed, replicas, mark_stride, snapshot_stride,
                     persist_driving, resolved)


# -- simulate -------------------------------------------------------------------


def _run_one_replica(config_path: str, out_dir: str, replica: int,
                     seed_override: int | None, replicas_override: int | None) -> str:
    cfg = load_config(config_path, seed_override=seed_override,
                      replicas_override=replicas_override)
    replica_seed = cfg.seed if cfg.replicas == 1 else rng.replica_seed(cfg.seed, replica)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    gamma0 = cfg.build_gamma0(replica_seed)
    traj = simulate(gamma0, cfg.kernel, cfg.death_rate, cfg.horizon, replica_seed)
    path = integrate_marks(traj, cfg.coeffs, cfg.init_marks, cfg.icfg, replica_seed)
    marked = combine(traj, path)

    write_event_log(traj, out / "events.jsonl", include_driving=cfg.persist_driving)
    path.to_csv(out / "marks.csv", stride=cfg.mark_stride)
    write_marked_snapshots(out / "snapshots.jsonl", marked, stride=cfg.snapshot_stride)

    manifest = {
        "schema": SCHEMA_ID,
        "package_version": __version__,
        "config": cfg.raw,
        "replica": {"index": replica, "seed": replica_seed},
        "derived": {
            "b_max": cfg.kernel.b_max,
            "window_volume": cfg.window.volume(),
            "initial_points": len(gamma0),
            "events": len(traj.events),
            "phantom_size": len(traj.phantom_ids()),
            "grid_points": len(path.grid),
            **run_manifest(traj, cfg.coeffs, cfg.init_marks, cfg.icfg, replica_seed),
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return out_dir


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed,
                      replicas_override=args.replicas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.replicas == 1:
        _run_one_replica(args.config, str(out), 0, args.seed, args.replicas)
        print(f"wrote artifacts to {out}")
        return 0
    jobs = args.jobs or os.cpu_count() or 1
    env_jobs = os.environ.get("SIM_THREADS")
    if env_jobs:
        jobs = max(1, int(env_jobs))
    dirs = [(r, str(out / f"replica_{r:04d}")) for r in range(cfg.replicas)]
    if jobs == 1:
        for r, d in dirs:
            _run_one_replica(args.config, d, r, args.seed, args.replicas)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_one_replica, args.config, d, r, args.seed, args.replicas)
                for r, d in dirs
            ]
            for fut in futures:
                fut.result()
    print(f"wrote {cfg.replicas} replicas to {out}")
    return 0


# -- verify ---------------------------------------------------------------------


def _nested_boxes(window: Window, n: int = 4) -> list[Box]:
    fractions = np.linspace(0.3, 1.0, n)
    return [window.box.scaled(float(f)) for f in fractions]


def _random_observables(window: Window, count: int, seed: int) -> list[Observable]:
    gen = rng.keyed_generator(seed, rng.SAMPLING)
    out = []
    for i in range(count):
        lo = window.side * gen.random(window.dim) * 0.6
        hi = np.minimum(lo + window.side * (0.2 + 0.6 * gen.random(window.dim)),
                        window.side)
        box = Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi))
        if i % 2 == 0:
            out.append(counting_observable(box, name=f"count_{i}"))
        else:
            out.append(mark_sum_observable(box, name=f"marks_{i}"))
    return out


def run_suite(cfg: RunConfig, suite: str) -> dict:
    """Run one verification suite; returns a JSON-ready report with 'passed'."""
    seed = cfg.seed
    if suite == "bounds":
        report = check_drift_diffusion_bounds(cfg.coeffs, sample_size=10_000, seed=seed)
        return {"suite": suite, **report.to_json_obj()}

    gamma0 = cfg.build_gamma0(seed)
    traj = simulate(gamma0, cfg.kernel, cfg.death_rate, cfg.horizon, seed)

    if suite == "domination":
        report = verify_domination(traj)
        ok_identity = verify_counting_identity(traj)
        obj = report.to_json_obj()
        obj["counting_identity"] = ok_identity
        obj["passed"] = obj["passed"] and ok_identity
        return {"suite": suite, **obj}

    if suite == "gronwall":
        gen = rng.keyed_generator(seed, rng.SAMPLING)
        config = traj.phantom()
        b_vec = np.abs(gen.standard_normal(len(config)))
        report = check_gronwall_inequality(
            config, coupling_b=0.2, growth_k=1.0, b_vec=b_vec,
            horizon=min(cfg.horizon, 0.5), alpha=cfg.scale.alpha, beta=cfg.scale.beta,
            q=cfg.scale.q, radius=cfg.coeffs.radius,
            alpha_star=cfg.scale.alpha_star, alpha_sup=cfg.scale.alpha_sup,
        )
        return {"suite": suite, **report.to_json_obj()}

    if suite == "cutoff":
        report = cutoff_convergence_study(
            traj, cfg.coeffs, cfg.init_marks, cfg.icfg, _nested_boxes(cfg.window),
            cfg.scale.alpha, cfg.scale.beta, cfg.scale.p,
            seeds=[rng.replica_seed(seed, r) for r in range(max(cfg.replicas, 5))],
        )
        obj = report.to_json_obj()
        obj["passed"] = report.nonincreasing or report.spearman_rho < -0.8
        return {"suite": suite, **obj}

    if suite == "moments":
        paths = [
            integrate_marks(traj, cfg.coeffs, cfg.init_marks, cfg.icfg,
                            rng.replica_seed(seed, r))
            for r in range(max(cfg.replicas, 8))
        ]
        c1, c2 = conservative_moment_constants(cfg.coeffs, cfg.scale.p, cfg.horizon)
        report = check_moment_growth(paths, traj, cfg.coeffs, cfg.scale, c1, c2)
        return {"suite": suite, **report.to_json_obj()}

    if suite == "cadlag":
        path = integrate_marks(traj, cfg.coeffs, cfg.init_marks, cfg.icfg, seed)
        marked = combine(traj, path)
        reports = []
        passed = True
        for g in _random_observables(cfg.window, 8, seed):
            rep = cadlag_check(marked, g, eps_t=cfg.icfg.dt)
            passed = passed and rep.passed
            reports.append({"observable": g.name, **rep.to_json_obj()})
        return {"suite": suite, "passed": passed, "observables": reports}

    raise ConfigError(f"suite: unknown suite {suite!r}")


def cmd_verify(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed,
                      replicas_override=args.replicas)
    suites = [s.strip() for s in args.suite.split(",") if s.strip()]
    for s in suites:
        if s not in SUITES:
            raise ConfigError(f"suite: unknown suite {s!r} (valid: {', '.join(SUITES)})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_passed = True
    for s in suites:
        report = run_suite(cfg, s)
        with open(out / f"{s}_report.json", "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")
        status = "pass" if report["passed"] else "FAIL"
        print(f"{s}: {status}")
        if not report["passed"]:
            all_passed = False
            witness = {k: v for k, v in report.items() if k not in ("suite", "passed")}
            print(f"  witness: {json.dumps(witness, default=str)[:500]}", file=sys.stderr)
    return 0 if all_passed else 1


# -- emit-plotdata -----------------------------------------------------------------


def _load_run_dir(run_dir: Path):
    events_path = run_dir / "events.jsonl"
    marks_path = run_dir / "marks.csv"
    if not events_path.exists() or not marks_path.exists():
        raise FileNotFoundError(f"missing artifacts in {run_dir}")
    header, events = read_event_log(events_path)
    window = Window.from_descriptor(header["window"])
    gamma0 = Configuration.from_json_obj(window, header["gamma0"])
    kernel = kernel_from_descriptor(header["kernel"])
    presence: dict[int, tuple[float, float | None]] = {
        pid: (0.0, None) for pid in gamma0.ids()
    }
    positions = {pid: tuple(float(c) for c in pos) for pid, pos in gamma0.items()}
    for ev in events:
        if ev.kind == "birth":
            presence[ev.id] = (ev.time, None)
            positions[ev.id] = ev.position
        else:
            birth, _ = presence[ev.id]
            presence[ev.id] = (birth, ev.time)
    traj = Trajectory(
        window=window, gamma0=gamma0, kernel=kernel, death_rate=header["m"],
        horizon=header["T"], seed=header["seed"], events=events, presence=presence,
        phantom_positions=positions, initial_lifetimes={}, driving=None,
    )
    marks = read_mark_path_csv(marks_path)
    return combine(traj, marks)


def _observable_from_spec(spec: dict, i: int) -> Observable:
    name = _get(spec, "name", f"observables[{i}].", str)
    kind = _get(spec, "kind", f"observables[{i}].", str)
    bspec = _get(spec, "box", f"observables[{i}].", dict)
    box = Box(tuple(bspec["lo"]), tuple(bspec["hi"]))
    if kind == "count":
        return counting_observable(box, name=name)
    if kind == "mark_sum":
        return mark_sum_observable(box, name=name)
    raise ConfigError(f"observables[{i}].kind: unknown kind {kind!r}")


def cmd_emit_plotdata(args) -> int:
    artifacts = Path(args.artifacts)
    if not artifacts.exists():
        print(f"artifacts directory {artifacts} does not exist", file=sys.stderr)
        return 2
    with open(args.observables) as fh:
        specs = json.load(fh)
    observables = [_observable_from_spec(s, i) for i, s in enumerate(specs)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not observables:
        print("empty observables spec: nothing to emit")
        return 0

    replica_dirs = sorted(d for d in artifacts.iterdir()
                          if d.is_dir() and d.name.startswith("replica_"))
    if not replica_dirs:
        replica_dirs = [artifacts]
    try:
        runs = [_load_run_dir(d) for d in replica_dirs]
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 2

    # each replica's grid refines the shared dt lattice with its own event
    # times; aggregation happens on the lattice common to all replicas
    shared = set(float(t) for t in runs[0].grid)
    for mt in runs[1:]:
        shared &= set(float(t) for t in mt.grid)
    shared_grid = np.array(sorted(shared))
    for g in observables:
        rows = [mt.observable_series(g) for mt in runs]
        with open(out / f"{g.name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replica", "t", "observable_name", "value"])
            for r, (mt, row) in enumerate(zip(runs, rows)):
                for t, v in zip(mt.grid, row):
                    writer.writerow([r, repr(float(t)), g.name, repr(float(v))])
        shared_vals = np.stack([
            row[[mt.marks.index_of(float(t)) for t in shared_grid]]
            for mt, row in zip(runs, rows)
        ])
        mean = shared_vals.mean(axis=0)
        stderr = (shared_vals.std(axis=0, ddof=1) / math.sqrt(len(runs))
                  if len(runs) > 1 else np.zeros_like(mean))
        with open(out / f"{g.name}_aggregate.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "observable_name", "mean", "stderr"])
            for t, m, s in zip(shared_grid, mean, stderr):
                writer.writerow([repr(float(t)), g.name, repr(float(m)), repr(float(s))])
    print(f"wrote plot data for {len(observables)} observables to {out}")
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdspin",
        description="Spatial birth-and-death dynamics with coupled spin diffusions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a seeded simulation")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--replicas", type=int, default=None)
    sim.add_argument("--out", required=True)
    sim.add_argument("--jobs", type=int, default=None,
                     help="replica parallelism (default: cores; SIM_THREADS overrides)")
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="run verification suites")
    ver.add_argument("--config", required=True)
    ver.add_argument("--seed", type=int, default=None)
    ver.add_argument("--replicas", type=int, default=None)
    ver.add_argument("--out", required=True)
    ver.add_argument("--suite", required=True,
                     help=f"comma-separated from: {', '.join(SUITES)}")
    ver.set_defaults(func=cmd_verify)

    emit = sub.add_parser("emit-plotdata", help="extract observable time series")
    emit.add_argument("--artifacts", required=True)
    emit.add_argument("--observables", required=True)
    emit.add_argument("--out", required=True)
    emit.set_defaults(func=cmd_emit_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
