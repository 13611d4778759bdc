"""Spin diffusions along a frozen birth-and-death path.

Every particle that ever lives on [0, T] carries a real mark.  While present,
a mark follows

    d xi_x = [ f(xi_x) + sum_{y ~ x} g(xi_x, xi_y) ] dt
             + [ sum_{y ~ x} h(xi_x, xi_y) ] dW_x,

where y ~ x ranges over the current neighbors within the interaction radius;
while absent, drift and diffusion are identically zero, so the mark is frozen
bit-exactly.  The integrator is Euler-Maruyama (optionally drift-tamed) on a
grid refined to contain every jump time, so coefficients are constant within
each step.  Wiener increments for particle k at step j are a pure function of
(seed, k, j), which makes solves pathwise comparable across volume cutoffs,
horizons and replicas.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import rng
from .birth_death import Trajectory
from .geometry import Box, Configuration, Window, poisson_configuration


class IntegrationBlowUpError(RuntimeError):
    """A mark became non-finite during integration."""


# -- coefficient data model ---------------------------------------------------


@dataclass(frozen=True)
class SingleDrift:
    """Single-site drift with declared growth and one-sided dissipativity.

    |func(s)| <= growth_c * (1 + |s|^growth_power) and
    (s1-s2)(func(s1)-func(s2)) <= dissipativity * (s1-s2)^2.
    """

    func: Callable[[np.ndarray], np.ndarray]
    growth_c: float
    growth_power: float
    dissipativity: float
    name: str = "custom"
    params: tuple[float, ...] = ()

    def descriptor(self) -> dict:
        return {"name": self.name, "params": list(self.params),
                "growth_c": self.growth_c, "growth_power": self.growth_power,
                "dissipativity": self.dissipativity}


@dataclass(frozen=True)
class PairDrift:
    """Pair drift g(sigma, s, dist), uniformly Lipschitz with linear growth.

    |g(a1,b1,.) - g(a2,b2,.)| <= lipschitz * (|a1-a2| + |b1-b2|) and
    |g(a,b,.)| <= lipschitz * (1 + |a| + |b|).
    """

    func: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float
    name: str = "custom"
    params: tuple[float, ...] = ()

    def descriptor(self) -> dict:
        return {"name": self.name, "params": list(self.params),
                "lipschitz": self.lipschitz}


@dataclass(frozen=True)
class PairDiffusion:
    """Pair diffusion h(sigma, s, dist), Lipschitz with |h(0,0,.)| <= lipschitz."""

    func: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float
    name: str = "custom"
    params: tuple[float, ...] = ()

    def descriptor(self) -> dict:
        return {"name": self.name, "params": list(self.params),
                "lipschitz": self.lipschitz}


@dataclass(frozen=True)
class CoefficientSet:
    """Drift/diffusion pieces plus the interaction radius."""

    single: SingleDrift
    pair: PairDrift
    diffusion: PairDiffusion
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("interaction radius must be positive")

    def descriptor(self) -> dict:
        return {
            "single_drift": self.single.descriptor(),
            "pair_drift": self.pair.descriptor(),
            "pair_diffusion": self.diffusion.descriptor(),
            "radius": self.radius,
        }


def cubic_drift(theta: float) -> SingleDrift:
    """-s^3 + theta*s: cubic pinning, dissipativity constant theta."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    return SingleDrift(lambda s: -s**3 + theta * s, growth_c=1.0 + theta,
                       growth_power=3.0, dissipativity=theta,
                       name="cubic", params=(theta,))


def linear_drift(rate: float) -> SingleDrift:
    """rate*s; dissipativity max(rate, 0)."""
    return SingleDrift(lambda s: rate * s, growth_c=abs(rate), growth_power=2.0,
                       dissipativity=max(rate, 0.0), name="linear", params=(rate,))


def zero_drift() -> SingleDrift:
    return SingleDrift(lambda s: np.zeros_like(s), growth_c=0.0, growth_power=2.0,
                       dissipativity=0.0, name="zero")


def linear_coupling(strength: float) -> PairDrift:
    """g(sigma, s) = strength * s."""
    return PairDrift(lambda a, b, d: strength * b, lipschitz=abs(strength),
                     name="linear", params=(strength,))


def exchange_coupling(strength: float) -> PairDrift:
    """g(sigma, s) = strength * (s - sigma): conserves the pairwise sum."""
    return PairDrift(lambda a, b, d: strength * (b - a), lipschitz=abs(strength),
                     name="exchange", params=(strength,))


def zero_pair() -> PairDrift:
    return PairDrift(lambda a, b, d: np.zeros_like(a), lipschitz=0.0, name="zero")


def constant_diffusion(kappa: float) -> PairDiffusion:
    """h = kappa per neighbor."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return PairDiffusion(lambda a, b, d: np.full_like(a, kappa), lipschitz=kappa,
                         name="constant", params=(kappa,))


def tanh_diffusion(kappa: float) -> PairDiffusion:
    """h(sigma, s) = kappa * tanh(s): bounded, Lipschitz constant kappa."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return PairDiffusion(lambda a, b, d: kappa * np.tanh(b), lipschitz=kappa,
                         name="tanh", params=(kappa,))


def linear_self_diffusion(kappa: float) -> PairDiffusion:
    """h(sigma, s) = kappa * sigma: multiplicative noise per neighbor."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return PairDiffusion(lambda a, b, d: kappa * a, lipschitz=kappa,
                         name="linear_self", params=(kappa,))


def zero_diffusion() -> PairDiffusion:
    return PairDiffusion(lambda a, b, d: np.zeros_like(a), lipschitz=0.0, name="zero")


COEFFICIENT_LIBRARY = {
    "single": {"cubic": cubic_drift, "linear": linear_drift, "zero": zero_drift},
    "pair": {"linear": linear_coupling, "exchange": exchange_coupling, "zero": zero_pair},
    "diffusion": {"constant": constant_diffusion, "tanh": tanh_diffusion,
                  "linear_self": linear_self_diffusion, "zero": zero_diffusion},
}


@dataclass(frozen=True)
class InitialMarkPolicy:
    """Marks of points that are not initially present: a deterministic field."""

    kind: str
    value: float = 0.0
    field_func: Callable[[np.ndarray], float] | None = None
    name: str = ""

    @classmethod
    def constant(cls, value: float) -> "InitialMarkPolicy":
        return cls("constant", value=float(value))

    @classmethod
    def from_field(cls, func: Callable[[np.ndarray], float], name: str = "field") -> "InitialMarkPolicy":
        return cls("field", field_func=func, name=name)

    def evaluate(self, position: np.ndarray) -> float:
        if self.kind == "constant":
            return self.value
        return float(self.field_func(np.asarray(position, dtype=float)))

    def descriptor(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        return {"kind": "field", "name": self.name}


@dataclass(frozen=True)
class IntegratorConfig:
    """Euler-Maruyama step control.

    ``dt`` is the maximum step; the actual grid additionally contains every
    jump time of the trajectory.  ``scheme`` is "euler" or "tamed" (the tamed
    variant divides the drift increment by 1 + dt*|drift| to stop discrete
    blow-up of the cubic drift).  ``noise_mode`` "keyed" is the contract; the
    "shared" mode deliberately breaks per-particle keying and exists only as
    a negative control for the pathwise-comparison tests.
    """

    dt: float
    scheme: str = "euler"
    noise_mode: str = "keyed"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.scheme not in ("euler", "tamed"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.noise_mode not in ("keyed", "shared"):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")

    def descriptor(self) -> dict:
        return {"dt": self.dt, "scheme": self.scheme, "noise_mode": self.noise_mode}


# -- mark paths ----------------------------------------------------------------


@dataclass
class MarkState:
    time: float
    values: dict[int, float]


@dataclass
class MarkPath:
    """Marks of every phantom id on the integration grid.

    ``values[j, k]`` is the mark of ``ids[k]`` at ``grid[j]`` (an extra
    trailing replica axis is present for ensemble solves).
    """

    grid: np.ndarray
    ids: list[int]
    values: np.ndarray

    @property
    def n_replicas(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    def index_of(self, t: float) -> int:
        j = int(np.searchsorted(self.grid, t))
        if j >= len(self.grid) or self.grid[j] != t:
            raise ValueError(f"time {t} is not on the integration grid")
        return j

    def state_at(self, t: float, replica: int = 0) -> MarkState:
        j = self.index_of(t)
        row = self.values[j] if self.values.ndim == 2 else self.values[j, :, replica]
        return MarkState(float(t), {pid: float(v) for pid, v in zip(self.ids, row)})

    def series(self, pid: int, replica: int = 0) -> np.ndarray:
        k = self.ids.index(pid)
        return self.values[:, k] if self.values.ndim == 2 else self.values[:, k, replica]

    def to_csv(self, path, stride: int = 1) -> None:
        """CSV columns (t, id, value); rows grouped by time, id-ascending."""
        if self.values.ndim != 2:
            raise ValueError("CSV export is for single-replica paths")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "id", "value"])
            for j in range(0, len(self.grid), stride):
                for k, pid in enumerate(self.ids):
                    writer.writerow([repr(float(self.grid[j])), pid,
                                     repr(float(self.values[j, k]))])


def read_mark_path_csv(path) -> MarkPath:
    times: list[float] = []
    ids: list[int] = []
    rows: dict[float, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for t_s, pid_s, v_s in reader:
            t, pid, v = float(t_s), int(pid_s), float(v_s)
            rows.setdefault(t, {})[pid] = v
    times = sorted(rows)
    ids = sorted(rows[times[0]]) if times else []
    values = np.array([[rows[t][pid] for pid in ids] for t in times])
    return MarkPath(np.array(times), ids, values)


# -- grid and segment machinery -------------------------------------------------


def build_time_grid(horizon: float, dt: float, event_times: Iterable[float]) -> np.ndarray:
    """Uniform dt-lattice refined with every event time; starts 0, ends T.

    Restricting to a shorter horizon T1 that lies on the grid yields exactly
    the prefix of this grid, which is what makes horizon projections exact.
    """
    n = int(math.floor(horizon / dt + 1e-9))
    base = dt * np.arange(n + 1)
    if base[-1] > horizon:
        base = base[:-1]
    pieces = [base, np.asarray([0.0, horizon])]
    ev = np.asarray([t for t in event_times if 0.0 < t <= horizon])
    if ev.size:
        pieces.append(ev)
    return np.unique(np.concatenate(pieces))


@dataclass
class _Segment:
    start: float
    present_idx: np.ndarray  # indices into phantom id order
    src: np.ndarray          # edge sources (phantom indices), both ends present
    dst: np.ndarray
    dist: np.ndarray


def _phantom_edges(traj: Trajectory, radius: float):
    """Directed neighbor pairs within ``radius`` over the phantom configuration."""
    ids = traj.phantom_ids()
    index_of = {pid: k for k, pid in enumerate(ids)}
    phantom = traj.phantom(cell_size=radius)
    src, dst, dist = [], [], []
    for pid in ids:
        for qid, d in phantom.neighbors_within(pid, radius):
            src.append(index_of[pid])
            dst.append(index_of[qid])
            dist.append(d)
    return (ids, np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp),
            np.asarray(dist, dtype=float))


def _segments(traj: Trajectory, radius: float) -> tuple[list[int], list[_Segment], np.ndarray]:
    ids, src, dst, dist = _phantom_edges(traj, radius)
    index_of = {pid: k for k, pid in enumerate(ids)}
    boundaries = sorted({ev.time for ev in traj.events if ev.time < traj.horizon})
    starts = [0.0] + boundaries
    segments = []
    for t0 in starts:
        present = traj.present_ids(t0, "right")
        mask = np.zeros(len(ids), dtype=bool)
        mask[[index_of[pid] for pid in present]] = True
        if src.size:
            keep = mask[src] & mask[dst]
            seg = _Segment(t0, np.flatnonzero(mask), src[keep], dst[keep], dist[keep])
        else:
            seg = _Segment(t0, np.flatnonzero(mask), src, dst, dist)
        segments.append(seg)
    return ids, segments, np.asarray(starts)


def _keyed_normals(seed: int, ids: Sequence[int], n_steps: int) -> np.ndarray:
    out = np.empty((n_steps, len(ids)))
    for k, pid in enumerate(ids):
        gen = rng.keyed_generator(seed, rng.BROWNIAN, pid)
        out[:, k] = gen.standard_normal(n_steps)
    return out


def _initial_vector(traj: Trajectory, ids: Sequence[int], init: InitialMarkPolicy,
                    initial_marks: Mapping[int, float] | None) -> np.ndarray:
    z0 = np.empty(len(ids))
    for k, pid in enumerate(ids):
        if initial_marks is not None and pid in initial_marks:
            z0[k] = float(initial_marks[pid])
        else:
            z0[k] = init.evaluate(np.asarray(traj.phantom_positions[pid]))
    return z0


def _solve(traj: Trajectory, coeffs: CoefficientSet, init: InitialMarkPolicy,
           icfg: IntegratorConfig, seed: int, *,
           initial_marks: Mapping[int, float] | None = None,
           frozen_box: Box | None = None,
           noise: np.ndarray | None = None,
           n_replicas: int | None = None) -> MarkPath:
    ids, segments, seg_starts = _segments(traj, coeffs.radius)
    grid = build_time_grid(traj.horizon, icfg.dt, [ev.time for ev in traj.events])
    n_steps = len(grid) - 1
    n_ids = len(ids)

    ensemble = n_replicas is not None
    if noise is not None:
        want = (n_steps, n_ids) if not ensemble else (n_steps, n_ids, n_replicas)
        if noise.shape != want:
            raise ValueError(f"noise has shape {noise.shape}, expected {want}")
    elif ensemble:
        noise = np.empty((n_steps, n_ids, n_replicas))
        for r in range(n_replicas):
            noise[:, :, r] = _keyed_normals(rng.replica_seed(seed, r), ids, n_steps)
    elif icfg.noise_mode == "shared":
        gen = rng.keyed_generator(seed, rng.SHARED_BROWNIAN)
        noise = gen.standard_normal((n_steps, n_ids))
    else:
        noise = _keyed_normals(seed, ids, n_steps)

    frozen_mask = np.zeros(n_ids, dtype=bool)
    if frozen_box is not None:
        for k, pid in enumerate(ids):
            if not frozen_box.contains(traj.phantom_positions[pid]):
                frozen_mask[k] = True

    z0 = _initial_vector(traj, ids, init, initial_marks)
    shape = (n_steps + 1, n_ids) if not ensemble else (n_steps + 1, n_ids, n_replicas)
    values = np.empty(shape)
    values[0] = z0 if not ensemble else z0[:, None]

    # per-segment active indices and edges restricted to active sources
    seg_active: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    for seg in segments:
        act_mask = np.zeros(n_ids, dtype=bool)
        act_mask[seg.present_idx] = True
        act_mask &= ~frozen_mask
        keep = act_mask[seg.src] if seg.src.size else np.zeros(0, dtype=bool)
        seg_active.append((np.flatnonzero(act_mask), seg.src[keep], seg.dst[keep],
                           seg.dist[keep]))

    seg_of_step = np.searchsorted(seg_starts, grid[:-1], side="right") - 1
    tamed = icfg.scheme == "tamed"

    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n_steps):
            z = values[j]
            values[j + 1] = z
            act, esrc, edst, edist = seg_active[seg_of_step[j]]
            if act.size == 0:
                continue
            h = float(grid[j + 1] - grid[j])
            drift = np.zeros_like(z)
            diffusion = np.zeros_like(z)
            drift[act] = coeffs.single.func(z[act])
            if esrc.size:
                dd = edist if not ensemble else edist[:, None]
                np.add.at(drift, esrc, coeffs.pair.func(z[esrc], z[edst], dd))
                np.add.at(diffusion, esrc, coeffs.diffusion.func(z[esrc], z[edst], dd))
            incr = h * drift[act]
            if tamed:
                incr = incr / (1.0 + np.abs(incr))
            step = incr + diffusion[act] * (math.sqrt(h) * noise[j][act])
            new = z[act] + step
            if not np.all(np.isfinite(new)):
                bad = np.argwhere(~np.isfinite(new))[0]
                pid = ids[int(act[bad[0]])]
                raise IntegrationBlowUpError(f"blow-up at (id={pid}, t={grid[j + 1]})")
            values[j + 1][act] = new

    return MarkPath(grid, list(ids), values)


# -- public solve operations ----------------------------------------------------


def integrate_marks(traj: Trajectory, coeffs: CoefficientSet, init: InitialMarkPolicy,
                    icfg: IntegratorConfig, seed: int, *,
                    initial_marks: Mapping[int, float] | None = None,
                    noise: np.ndarray | None = None) -> MarkPath:
    """Solve the mark system along the trajectory.

    ``initial_marks`` supplies marks for initially present points (ids missing
    from it fall back to the policy, like every point born later).  Identical
    arguments give bit-identical paths.
    """
    return _solve(traj, coeffs, init, icfg, seed,
                  initial_marks=initial_marks, noise=noise)


def integrate_marks_ensemble(traj: Trajectory, coeffs: CoefficientSet,
                             init: InitialMarkPolicy, icfg: IntegratorConfig,
                             seed: int, n_replicas: int, *,
                             initial_marks: Mapping[int, float] | None = None,
                             noise: np.ndarray | None = None) -> MarkPath:
    """Replica-batched solve; replica r uses the derived seed replica_seed(seed, r).

    Bit-identical to running ``integrate_marks`` once per derived seed.
    """
    return _solve(traj, coeffs, init, icfg, seed, initial_marks=initial_marks,
                  frozen_box=None, noise=noise, n_replicas=n_replicas)


def finite_volume_solve(traj: Trajectory, coeffs: CoefficientSet,
                        init: InitialMarkPolicy, icfg: IntegratorConfig,
                        box: Box, seed: int, *,
                        initial_marks: Mapping[int, float] | None = None) -> MarkPath:
    """Volume-cutoff solve: marks of phantom points outside ``box`` stay frozen
    at their initial values; inside points evolve against the frozen values.

    Uses the same keyed noise streams as the full solve, so the two paths are
    pathwise comparable (and bit-identical when the box covers the window).
    """
    return _solve(traj, coeffs, init, icfg, seed, initial_marks=initial_marks,
                  frozen_box=box)


def assemble_drift(pid: int, t: float, marks: Mapping[int, float],
                   traj: Trajectory, coeffs: CoefficientSet) -> float:
    """Drift of one mark at one time: 0 when the particle is absent, else the
    single-site term plus the pair sum over current in-radius neighbors."""
    if pid not in traj.phantom_positions:
        raise KeyError(f"unknown id {pid}")
    if pid not in traj.present_ids(t, "right"):
        return 0.0
    cfg = traj.config_at(t, cell_size=coeffs.radius)
    z_x = marks[pid]
    total = float(coeffs.single.func(np.float64(z_x)))
    for qid, d in cfg.neighbors_within(pid, coeffs.radius):
        total += float(coeffs.pair.func(np.float64(z_x), np.float64(marks[qid]),
                                        np.float64(d)))
    return total


def assemble_diffusion(pid: int, t: float, marks: Mapping[int, float],
                       traj: Trajectory, coeffs: CoefficientSet) -> float:
    """Diffusion of one mark at one time; 0 when absent, no single-site term."""
    if pid not in traj.phantom_positions:
        raise KeyError(f"unknown id {pid}")
    if pid not in traj.present_ids(t, "right"):
        return 0.0
    cfg = traj.config_at(t, cell_size=coeffs.radius)
    z_x = marks[pid]
    total = 0.0
    for qid, d in cfg.neighbors_within(pid, coeffs.radius):
        total += float(coeffs.diffusion.func(np.float64(z_x), np.float64(marks[qid]),
                                             np.float64(d)))
    return total


def frozen_mark_deviation(path: MarkPath, traj: Trajectory) -> float:
    """Largest change of any mark over a step on which its particle is absent.

    The integrator contract makes this exactly 0.0.
    """
    worst = 0.0
    grid = path.grid
    for k, pid in enumerate(path.ids):
        birth, death = traj.presence[pid]
        absent = (grid[:-1] < birth) & (grid[1:] <= birth)
        if death is not None:
            absent |= grid[:-1] >= death
        if not absent.any():
            continue
        steps = np.abs(np.diff(path.values[:, k], axis=0))
        worst = max(worst, float(steps[absent].max()))
    return worst


# -- verification studies ---------------------------------------------------------


@dataclass
class BoundsCheckReport:
    """Sampled verification of the four drift/diffusion envelope inequalities."""

    passed: bool
    samples: int
    points: int
    violations: int
    worst: dict | None

    def to_json_obj(self) -> dict:
        return {"passed": self.passed, "samples": self.samples, "points": self.points,
                "violations": self.violations, "worst": self.worst}


def check_drift_diffusion_bounds(coeffs: CoefficientSet, sample_size: int = 10_000,
                                 seed: int = 0, config: Configuration | None = None,
                                 rtol: float = 1e-9) -> BoundsCheckReport:
    """Sample random mark states and assert the envelope inequalities implied
    by the declared constants (Lipschitz/growth of the pair terms, growth and
    one-sided dissipativity of the single-site term).

    A misdeclared constant (for example a Lipschitz constant below the true
    one) shows up as a reported violation with a witness.
    """
    if config is None:
        window = Window(6.0, 2, "periodic")
        config = poisson_configuration(window, 1.0, seed=seed + 1,
                                       cell_size=coeffs.radius)
    ids = config.ids()
    n_pts = len(ids)
    if n_pts == 0:
        return BoundsCheckReport(True, sample_size, 0, 0, None)
    index_of = {pid: k for k, pid in enumerate(ids)}
    src, dst, dist = [], [], []
    for pid in ids:
        for qid, d in config.neighbors_within(pid, coeffs.radius):
            src.append(index_of[pid]); dst.append(index_of[qid]); dist.append(d)
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    dist = np.asarray(dist, dtype=float)
    deg = np.zeros(n_pts)
    if src.size:
        np.add.at(deg, src, 1.0)
    n_x = deg + 1.0  # closed neighborhood count includes the point itself

    gen = rng.keyed_generator(seed, rng.SAMPLING)
    scales = np.array([0.3, 1.0, 3.0, 10.0])[gen.integers(0, 4, size=sample_size)]
    z1 = gen.standard_normal((n_pts, sample_size)) * scales
    z2 = gen.standard_normal((n_pts, sample_size)) * scales

    def fields(z):
        drift = coeffs.single.func(z)
        diffusion = np.zeros_like(z)
        if src.size:
            dd = dist[:, None]
            np.add.at(drift, src, coeffs.pair.func(z[src], z[dst], dd))
            np.add.at(diffusion, src, coeffs.diffusion.func(z[src], z[dst], dd))
        return drift, diffusion

    phi1, psi1 = fields(z1)
    phi2, psi2 = fields(z2)
    psi0 = np.zeros(n_pts)
    if src.size:
        np.add.at(psi0, src, coeffs.diffusion.func(np.zeros_like(dist),
                                                   np.zeros_like(dist), dist))

    def neighbor_sum(arr):
        out = np.zeros_like(arr)
        if src.size:
            np.add.at(out, src, arr[dst])
        return out

    a_bar = coeffs.pair.lipschitz
    m_diff = coeffs.diffusion.lipschitz
    c_gr = coeffs.single.growth_c
    r_gr = coeffs.single.growth_power
    b_diss = coeffs.single.dissipativity
    delta = z1 - z2
    nx = n_x[:, None]

    lhs_rhs = [
        ("diffusion_lipschitz",
         np.abs(psi1 - psi2),
         m_diff * (nx + 1.0) * np.abs(delta) + m_diff * neighbor_sum(np.abs(delta))),
        ("diffusion_at_zero",
         np.abs(psi0)[:, None] * np.ones((1, 1)),
         (m_diff * n_x)[:, None] * np.ones((1, 1))),
        ("drift_growth",
         np.abs(phi1),
         c_gr * (1.0 + np.abs(z1) ** r_gr) + a_bar * nx * (1.0 + 2.0 * np.abs(z1))
         + a_bar * neighbor_sum(np.abs(z1))),
        ("drift_dissipativity",
         delta * (phi1 - phi2),
         (b_diss + 0.5 + 4.0 * a_bar**2 * nx**2) * delta**2
         + 0.5 * a_bar**2 * nx * neighbor_sum(delta**2)),
    ]

    violations = 0
    worst = None
    worst_excess = 0.0
    for name, lhs, rhs in lhs_rhs:
        bad = lhs > rhs + rtol * (1.0 + np.abs(rhs))
        count = int(bad.sum())
        violations += count
        if count:
            excess = np.where(bad, lhs - rhs, -np.inf)
            i, j = np.unravel_index(int(np.argmax(excess)), excess.shape)
            if float(excess[i, j]) > worst_excess:
                worst_excess = float(excess[i, j])
                worst = {"inequality": name, "point": ids[int(i)], "sample": int(j),
                         "lhs": float(lhs[i, j]), "rhs": float(rhs[i, j])}
    return BoundsCheckReport(violations == 0, sample_size, n_pts, violations, worst)


@dataclass
class CutoffStudyReport:
    """Monte Carlo decay of the cutoff error across nested boxes."""

    boxes: list[Box]
    estimates: list[float]  # sup_t of the seed-mean p-th moment of the cutoff error
    spearman_rho: float
    nonincreasing: bool

    def to_json_obj(self) -> dict:
        return {
            "boxes": [b.descriptor() for b in self.boxes],
            "estimates": self.estimates,
            "spearman_rho": self.spearman_rho,
            "nonincreasing": self.nonincreasing,
        }


def cutoff_convergence_study(traj: Trajectory, coeffs: CoefficientSet,
                             init: InitialMarkPolicy, icfg: IntegratorConfig,
                             boxes: Sequence[Box], alpha: float, beta: float,
                             p: float, seeds: Sequence[int], *,
                             initial_marks: Mapping[int, float] | None = None) -> CutoffStudyReport:
    """Estimate sup_t E || cutoff minus full solve ||^p in the beta-weighted
    norm for each nested box, and report the monotone decay trend."""
    if beta <= alpha:
        raise ValueError("scale order violated: beta must exceed alpha")
    if p < coeffs.single.growth_power:
        raise ValueError(f"moment order p={p} below drift growth power "
                         f"{coeffs.single.growth_power}")
    radii = traj.phantom().radial_norms()  # ascending id order, matches MarkPath ids
    weights = np.exp(-beta * radii)
    per_box_means: list[np.ndarray] = [None] * len(boxes)
    for seed in seeds:
        full = integrate_marks(traj, coeffs, init, icfg, seed, initial_marks=initial_marks)
        for i, box in enumerate(boxes):
            part = finite_volume_solve(traj, coeffs, init, icfg, box, seed,
                                       initial_marks=initial_marks)
            diff = np.abs(part.values - full.values) ** p
            norms = diff @ weights  # per grid time: sum_x e^{-beta|x|} |diff|^p
            per_box_means[i] = norms if per_box_means[i] is None else per_box_means[i] + norms
    estimates = [float(np.max(acc / len(seeds))) for acc in per_box_means]
    if len(set(estimates)) > 1:
        rho = float(stats.spearmanr(np.arange(len(boxes)), estimates).statistic)
    else:
        rho = 0.0
    nonincr = all(a >= b - 1e-15 for a, b in zip(estimates, estimates[1:]))
    return CutoffStudyReport(list(boxes), estimates, rho, nonincr)


def projection_consistency(traj: Trajectory, coeffs: CoefficientSet,
                           init: InitialMarkPolicy, icfg: IntegratorConfig,
                           horizon: float, seed: int, *,
                           initial_marks: Mapping[int, float] | None = None) -> bool:
    """Re-solve on the restricted horizon and compare against the restriction
    of the full-horizon solve: exact (bitwise) equality on the shared grid for
    all shared ids.  Requires ``horizon`` to lie on the full solve's grid."""
    full = integrate_marks(traj, coeffs, init, icfg, seed, initial_marks=initial_marks)
    short = integrate_marks(traj.restrict(horizon), coeffs, init, icfg, seed,
                            initial_marks=initial_marks)
    return _projection_mismatch(full, short) is None


def _projection_mismatch(full: MarkPath, short: MarkPath) -> tuple[int, float] | None:
    """First (id, t) where a shared mark differs, or None if exactly equal."""
    n = len(short.grid)
    if n > len(full.grid) or not np.array_equal(short.grid, full.grid[:n]):
        raise ValueError("restricted grid is not a prefix of the full grid; "
                         "choose a horizon on the dt lattice")
    col_full = {pid: k for k, pid in enumerate(full.ids)}
    for k, pid in enumerate(short.ids):
        a = short.values[:, k]
        b = full.values[:n, col_full[pid]]
        neq = a != b
        if neq.any():
            j = int(np.argmax(neq))
            return pid, float(short.grid[j])
    return None


@dataclass
class StrongOrderReport:
    dts: list[float]
    errors: list[float]
    slope: float
    monotone: bool

    def to_json_obj(self) -> dict:
        return {"dts": self.dts, "errors": self.errors, "slope": self.slope,
                "monotone": self.monotone}


def strong_order_study(seed: int, *, n_paths: int = 400,
                       levels: Sequence[int] = tuple(range(4, 11)),
                       drift_rate: float = -1.0, noise_scale: float = 0.5,
                       horizon: float = 1.0, initial_value: float = 1.0) -> StrongOrderReport:
    """Strong convergence of the integrator on an exactly solvable system.

    Two static mutual neighbors with linear drift a*s and multiplicative
    per-neighbor diffusion kappa*sigma make each mark a geometric diffusion
    with the exact solution x0*exp((a - kappa^2/2)t + kappa*W_t).  Brownian
    paths are fixed on the finest lattice and aggregated to the coarser ones,
    so the levels see the same driving noise.
    """
    from .birth_death import ConstantBirthKernel, simulate

    window = Window(2.0, 2, "open")
    gamma0 = Configuration(window, [(0, [0.5, 1.0]), (1, [1.3, 1.0])])
    traj = simulate(gamma0, ConstantBirthKernel(0.0), 0.0, horizon, seed=seed)
    coeffs = CoefficientSet(linear_drift(drift_rate), zero_pair(),
                            linear_self_diffusion(noise_scale), radius=1.0)
    init = InitialMarkPolicy.constant(initial_value)

    levels = sorted(levels)
    finest = levels[-1]
    n_fine = 2**finest
    dt_fine = horizon / n_fine
    z_fine = np.empty((n_fine, 2, n_paths))
    for r in range(n_paths):
        z_fine[:, :, r] = _keyed_normals(rng.replica_seed(seed, r), traj.phantom_ids(), n_fine)
    dw_fine = math.sqrt(dt_fine) * z_fine
    w_final = dw_fine.sum(axis=0)
    exact = initial_value * np.exp(
        (drift_rate - 0.5 * noise_scale**2) * horizon + noise_scale * w_final
    )

    dts, errors = [], []
    for lev in levels:
        n_steps = 2**lev
        block = n_fine // n_steps
        dt = horizon / n_steps
        dw = dw_fine.reshape(n_steps, block, 2, n_paths).sum(axis=1)
        noise = dw / math.sqrt(dt)
        icfg = IntegratorConfig(dt=dt)
        path = integrate_marks_ensemble(traj, coeffs, init, icfg, seed, n_paths,
                                        noise=noise)
        em_final = path.values[-1]
        err = math.sqrt(float(np.mean((em_final - exact) ** 2)))
        dts.append(dt)
        errors.append(err)
    slope = float(np.polyfit(np.log2(dts), np.log2(errors), 1)[0])
    monotone = all(a > b for a, b in zip(errors, errors[1:]))  # errors listed coarse->fine
    return StrongOrderReport(dts, errors, slope, monotone)


def run_manifest(traj: Trajectory, coeffs: CoefficientSet, init: InitialMarkPolicy,
                 icfg: IntegratorConfig, seed: int) -> dict:
    """Every constant entering a mark solve, for the run manifest."""
    return {
        "window": traj.window.descriptor(),
        "kernel": traj.kernel.descriptor(),
        "death_rate": traj.death_rate,
        "horizon": traj.horizon,
        "trajectory_seed": traj.seed,
        "coefficients": coeffs.descriptor(),
        "initial_marks": init.descriptor(),
        "integrator": icfg.descriptor(),
        "mark_seed": seed,
    }
