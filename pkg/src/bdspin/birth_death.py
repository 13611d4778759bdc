"""Exact simulation of the spatial birth-and-death process.

Births are realized by thinning a dominating Poisson driving process: each
candidate carries a time, a position, a uniform thinning mark and a unit
exponential survival mark.  A candidate (s, x, u, r) becomes a birth iff
u <= b(x, gamma_{s-}); an accepted point dies at s + r/m (never, if m = 0).
Initial points carry their own independent unit exponential lifetimes.  The
sweep is event-driven and deterministic given the seed, so whole runs can be
replayed and verified pathwise.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rng
from .geometry import Box, Configuration, Window


class BoundViolationError(RuntimeError):
    """A birth kernel produced a value above its declared uniform bound."""


@dataclass(frozen=True)
class DrivingPoint:
    """One candidate of the driving process."""

    s: float              # candidate time in (0, T]
    x: tuple[float, ...]  # candidate position
    u: float              # thinning mark in [0, b_max]
    r: float              # unit exponential survival mark
    index: int            # rank in time order; breaks float ties


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # "birth" | "death"
    id: int
    position: tuple[float, ...]


@dataclass(frozen=True)
class RadialPotential:
    """Nonnegative radial kernel, zero beyond ``range``.

    ``func`` must accept a numpy array of distances and return values
    elementwise; values are clamped to zero outside the range by the callers
    (only neighbors within ``range`` are ever summed).
    """

    func: Callable[[np.ndarray], np.ndarray]
    range: float
    name: str = "custom"
    params: tuple[float, ...] = ()

    def __call__(self, dist: np.ndarray) -> np.ndarray:
        return np.asarray(self.func(dist), dtype=float)

    def descriptor(self) -> dict:
        return {"name": self.name, "range": self.range, "params": list(self.params)}


def step_potential(height: float, radius: float) -> RadialPotential:
    """height * indicator(dist <= radius)."""
    if height < 0:
        raise ValueError("potential height must be nonnegative")
    return RadialPotential(
        lambda d: np.where(d <= radius, height, 0.0), radius, "step", (height, radius)
    )


def gaussian_potential(height: float, width: float, cutoff: float) -> RadialPotential:
    """height * exp(-(dist/width)^2), truncated at ``cutoff``."""
    if height < 0 or width <= 0:
        raise ValueError("potential needs height >= 0 and width > 0")
    return RadialPotential(
        lambda d: np.where(d <= cutoff, height * np.exp(-((d / width) ** 2)), 0.0),
        cutoff,
        "gaussian",
        (height, width, cutoff),
    )


class BirthKernel:
    """Birth rate b(x, gamma) with a declared uniform bound b_max.

    The bound is a contract: `evaluate` raises BoundViolationError if the
    kernel ever exceeds it, which means the kernel was misdeclared.
    """

    b_max: float
    interaction_range: float = 0.0

    def rate(self, x: np.ndarray, config: Configuration) -> float:
        raise NotImplementedError

    def evaluate(self, x, config: Configuration) -> float:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite position in birth rate evaluation")
        value = float(self.rate(x, config))
        if not math.isfinite(value) or value < 0:
            raise BoundViolationError(f"kernel returned invalid rate {value!r}")
        if value > self.b_max * (1.0 + 1e-12) + 1e-300:
            raise BoundViolationError(
                f"bound violation: b(x, gamma) = {value} exceeds declared b_max = {self.b_max}"
            )
        return value

    def descriptor(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantBirthKernel(BirthKernel):
    """b(x, gamma) = z, the dominating (free birth) kernel."""

    z: float

    def __post_init__(self):
        if self.z < 0:
            raise ValueError("constant rate must be nonnegative")

    @property
    def b_max(self) -> float:
        return self.z

    def rate(self, x, config):
        return self.z

    def descriptor(self) -> dict:
        return {"variant": "constant", "z": self.z}


@dataclass(frozen=True)
class GlauberBirthKernel(BirthKernel):
    """b(x, gamma) = z * exp(-sum_{y in gamma, y != x} phi(|x-y|))."""

    z: float
    phi: RadialPotential

    @property
    def b_max(self) -> float:
        return self.z

    @property
    def interaction_range(self) -> float:
        return self.phi.range

    def rate(self, x, config):
        hits = config.ids_within(x, self.phi.range)
        if not hits:
            return self.z
        dist = np.array([d for _, d in hits])
        # a point of gamma exactly at x is excluded (positions are distinct)
        total = float(np.sum(self.phi(dist[dist > 0.0])))
        return self.z * math.exp(-total)

    def descriptor(self) -> dict:
        return {"variant": "glauber", "z": self.z, "phi": self.phi.descriptor()}


@dataclass(frozen=True)
class FecundityBirthKernel(BirthKernel):
    """Density dependent fecundity rate.

    b(x, gamma) = sum_y a(x-y) (1 + sum_{z != y} c(z-y)) exp(-sum_{z != y} phi(z-y)),
    sums over gamma.  The uniform bound cannot be derived from the kernels
    alone and must be declared; it is enforced at every evaluation.
    """

    a: RadialPotential
    c: RadialPotential
    phi: RadialPotential
    bound: float

    @property
    def b_max(self) -> float:
        return self.bound

    @property
    def interaction_range(self) -> float:
        return max(self.a.range, self.c.range, self.phi.range)

    def rate(self, x, config):
        total = 0.0
        for y_id, d_xy in config.ids_within(x, self.a.range):
            a_val = float(self.a(np.array([d_xy]))[0])
            if a_val == 0.0:
                continue
            y = config.position_of(y_id)
            inner = config.ids_within(y, max(self.c.range, self.phi.range))
            dists = np.array([d for zid, d in inner if zid != y_id])
            c_sum = float(np.sum(self.c(dists[dists <= self.c.range]))) if dists.size else 0.0
            phi_sum = float(np.sum(self.phi(dists[dists <= self.phi.range]))) if dists.size else 0.0
            total += a_val * (1.0 + c_sum) * math.exp(-phi_sum)
        return total

    def descriptor(self) -> dict:
        return {
            "variant": "fecundity",
            "a": self.a.descriptor(),
            "c": self.c.descriptor(),
            "phi": self.phi.descriptor(),
            "b_max": self.bound,
        }


@dataclass(frozen=True)
class EstablishmentBirthKernel(BirthKernel):
    """Density dependent establishment rate.

    b(x, gamma) = (sum_y a(x-y)) (1 + sum_z c(x-z)) exp(-sum_z phi(x-z)),
    all sums over gamma, centered at the candidate position.
    """

    a: RadialPotential
    c: RadialPotential
    phi: RadialPotential
    bound: float

    @property
    def b_max(self) -> float:
        return self.bound

    @property
    def interaction_range(self) -> float:
        return max(self.a.range, self.c.range, self.phi.range)

    def rate(self, x, config):
        hits = config.ids_within(x, self.interaction_range)
        if not hits:
            return 0.0
        dist = np.array([d for _, d in hits])
        a_sum = float(np.sum(self.a(dist[dist <= self.a.range])))
        if a_sum == 0.0:
            return 0.0
        c_sum = float(np.sum(self.c(dist[dist <= self.c.range])))
        phi_sum = float(np.sum(self.phi(dist[dist <= self.phi.range])))
        return a_sum * (1.0 + c_sum) * math.exp(-phi_sum)

    def descriptor(self) -> dict:
        return {
            "variant": "establishment",
            "a": self.a.descriptor(),
            "c": self.c.descriptor(),
            "phi": self.phi.descriptor(),
            "b_max": self.bound,
        }


def kernel_from_descriptor(desc: dict) -> BirthKernel:
    def pot(d: dict) -> RadialPotential:
        if d["name"] == "step":
            return step_potential(*d["params"])
        if d["name"] == "gaussian":
            return gaussian_potential(*d["params"])
        raise ValueError(f"cannot rebuild potential {d['name']!r} from a descriptor")

    variant = desc["variant"]
    if variant == "constant":
        return ConstantBirthKernel(desc["z"])
    if variant == "glauber":
        return GlauberBirthKernel(desc["z"], pot(desc["phi"]))
    if variant == "fecundity":
        return FecundityBirthKernel(pot(desc["a"]), pot(desc["c"]), pot(desc["phi"]), desc["b_max"])
    if variant == "establishment":
        return EstablishmentBirthKernel(pot(desc["a"]), pot(desc["c"]), pot(desc["phi"]), desc["b_max"])
    raise ValueError(f"unknown kernel variant {variant!r}")


def evaluate_birth_rate(kernel: BirthKernel, x, config: Configuration) -> float:
    """Birth rate at x given gamma, checked against the declared bound."""
    return kernel.evaluate(x, config)


def sample_driving_process(window: Window, horizon: float, b_max: float,
                           seed: int) -> list[DrivingPoint]:
    """Poisson driving candidates on (0, T] x window x [0, b_max] x R_+.

    Candidate count is Poisson(b_max * T * volume); times, positions and
    thinning marks are uniform, survival marks unit exponential.  The list is
    time-sorted and deterministic given the seed.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if b_max < 0:
        raise ValueError("b_max must be nonnegative")
    if b_max == 0:
        return []
    gen = rng.keyed_generator(seed, rng.DRIVING)
    n = int(gen.poisson(b_max * horizon * window.volume()))
    times = horizon * (1.0 - gen.random(n))  # uniform on (0, T]
    pos = window.side * gen.random((n, window.dim))
    u = b_max * gen.random(n)
    r = gen.standard_exponential(n)
    order = np.argsort(times, kind="stable")
    return [
        DrivingPoint(float(times[i]), tuple(float(c) for c in pos[i]),
                     float(u[i]), float(r[i]), rank)
        for rank, i in enumerate(order)
    ]


@dataclass
class Trajectory:
    """A realized birth-and-death path on [0, T] with its driving randomness.

    ``presence`` maps each id to (birth_time, death_time); death_time is None
    for points alive at the horizon.  A point is present on [birth, death):
    the path is right-continuous, deaths and births take effect at their own
    time.  ``phantom`` is the union of everything that ever lived.
    """

    window: Window
    gamma0: Configuration
    kernel: BirthKernel
    death_rate: float
    horizon: float
    seed: int
    events: list[Event]
    presence: dict[int, tuple[float, float | None]]
    phantom_positions: dict[int, tuple[float, ...]]
    initial_lifetimes: dict[int, float]
    driving: list[DrivingPoint] | None = None
    _phantom_cache: Configuration | None = field(default=None, repr=False)

    @property
    def b_max(self) -> float:
        return self.kernel.b_max

    def phantom(self, cell_size: float | None = None) -> Configuration:
        if cell_size is not None:
            return Configuration(self.window, dict(self.phantom_positions), cell_size=cell_size)
        if self._phantom_cache is None:
            self._phantom_cache = Configuration(self.window, dict(self.phantom_positions))
        return self._phantom_cache

    def phantom_ids(self) -> list[int]:
        return sorted(self.phantom_positions)

    def _check_time(self, t: float) -> None:
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")

    def present_ids(self, t: float, side: str = "right") -> list[int]:
        """Ids of gamma_t (side='right') or gamma_{t-} (side='left')."""
        self._check_time(t)
        if side not in ("right", "left"):
            raise ValueError(f"side must be 'right' or 'left', got {side!r}")
        out = []
        for pid, (birth, death) in self.presence.items():
            if side == "right" or t == 0.0:
                alive = birth <= t and (death is None or t < death)
            else:
                alive = birth < t and (death is None or t <= death)
            if alive:
                out.append(pid)
        return sorted(out)

    def config_at(self, t: float, side: str = "right",
                  cell_size: float | None = None) -> Configuration:
        ids = self.present_ids(t, side)
        return Configuration(
            self.window, [(pid, self.phantom_positions[pid]) for pid in ids],
            cell_size=cell_size,
        )

    def event_count_in(self, box: Box, t0: float, t1: float) -> int:
        """Events with position in ``box`` and time in the closed [t0, t1]."""
        if t1 < t0:
            return 0
        return sum(
            1 for ev in self.events
            if t0 <= ev.time <= t1 and box.contains(ev.position)
        )

    def birth_events(self) -> list[Event]:
        return [ev for ev in self.events if ev.kind == "birth"]

    def death_events(self) -> list[Event]:
        return [ev for ev in self.events if ev.kind == "death"]

    def restrict(self, horizon: float) -> "Trajectory":
        """The same path observed only on [0, horizon]; ids are unchanged."""
        if not 0.0 < horizon <= self.horizon:
            raise ValueError("restriction horizon must lie in (0, T]")
        events = [ev for ev in self.events if ev.time <= horizon]
        born = {ev.id for ev in events if ev.kind == "birth"}
        keep = set(self.gamma0.ids()) | born
        presence = {}
        for pid in keep:
            birth, death = self.presence[pid]
            presence[pid] = (birth, death if (death is not None and death <= horizon) else None)
        driving = None
        if self.driving is not None:
            driving = [dp for dp in self.driving if dp.s <= horizon]
        return Trajectory(
            window=self.window,
            gamma0=self.gamma0,
            kernel=self.kernel,
            death_rate=self.death_rate,
            horizon=horizon,
            seed=self.seed,
            events=events,
            presence=presence,
            phantom_positions={pid: self.phantom_positions[pid] for pid in keep},
            initial_lifetimes=self.initial_lifetimes,
            driving=driving,
        )


def simulate(gamma0: Configuration, kernel: BirthKernel, death_rate: float,
             horizon: float, seed: int, *, keep_driving: bool = True) -> Trajectory:
    """Run the thinning sweep and return the full trajectory.

    Identical arguments give a bit-identical event log.  Float-equal event
    times are ordered by scheduling sequence; candidates see the strict left
    limit gamma_{s-}.
    """
    if death_rate < 0:
        raise ValueError("death rate must be nonnegative")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    window = gamma0.window
    for pid, pos in gamma0.items():
        if not window.contains(pos):
            raise ValueError(f"initial point {pid} outside the window")

    driving = sample_driving_process(window, horizon, kernel.b_max, seed)
    init_ids = gamma0.ids()
    gen = rng.keyed_generator(seed, rng.INITIAL_LIFETIMES)
    init_marks = gen.standard_exponential(len(init_ids))
    initial_lifetimes = {pid: float(mark) for pid, mark in zip(init_ids, init_marks)}

    cell = max(kernel.interaction_range, window.side / 8.0)
    state = gamma0.copy(cell_size=cell)
    presence: dict[int, tuple[float, float | None]] = {pid: (0.0, None) for pid in init_ids}
    phantom_positions: dict[int, tuple[float, ...]] = {
        pid: tuple(pos) for pid, pos in gamma0.items()
    }
    events: list[Event] = []

    heap: list[tuple[float, int, str, object]] = []
    for dp in driving:
        heap.append((dp.s, dp.index, "candidate", dp))
    seq = len(driving)
    if death_rate > 0:
        for pid in init_ids:
            death_time = initial_lifetimes[pid] / death_rate
            if death_time <= horizon:
                heap.append((death_time, seq, "death", pid))
                seq += 1
    heapq.heapify(heap)

    next_id = max(init_ids) + 1 if init_ids else 0
    while heap:
        t, _, kind, payload = heapq.heappop(heap)
        if kind == "candidate":
            dp = payload
            b = kernel.evaluate(np.asarray(dp.x), state)
            if dp.u <= b:
                pid = next_id
                next_id += 1
                state.insert(pid, dp.x)
                pos = tuple(float(c) for c in state.position_of(pid))
                presence[pid] = (t, None)
                phantom_positions[pid] = pos
                events.append(Event(t, "birth", pid, pos))
                if death_rate > 0:
                    death_time = t + dp.r / death_rate
                    if death_time <= horizon:
                        heapq.heappush(heap, (death_time, seq, "death", pid))
                        seq += 1
        else:
            pid = payload
            pos = tuple(float(c) for c in state.position_of(pid))
            state.remove(pid)
            birth, _ = presence[pid]
            presence[pid] = (birth, t)
            events.append(Event(t, "death", pid, pos))

    return Trajectory(
        window=window,
        gamma0=gamma0,
        kernel=kernel,
        death_rate=death_rate,
        horizon=horizon,
        seed=seed,
        events=events,
        presence=presence,
        phantom_positions=phantom_positions,
        initial_lifetimes=initial_lifetimes,
        driving=driving if keep_driving else None,
    )


def replay_events(traj: Trajectory) -> list[Event]:
    """Re-run the acceptance sweep from the stored driving randomness.

    Independent pass over the same driving process and initial lifetimes;
    must reproduce ``traj.events`` exactly.
    """
    if traj.driving is None:
        raise ValueError("trajectory did not retain its driving process")
    fresh = simulate(traj.gamma0, traj.kernel, traj.death_rate, traj.horizon,
                     traj.seed, keep_driving=False)
    return fresh.events


@dataclass
class DominationReport:
    """Pathwise verification of the dominating-process inequalities."""

    passed: bool
    checks: int
    violations: list[dict]
    replay_consistent: bool

    def to_json_obj(self) -> dict:
        return {
            "passed": self.passed,
            "checks": self.checks,
            "violations": self.violations,
            "replay_consistent": self.replay_consistent,
        }


def verify_domination(traj: Trajectory, n_times: int = 8, n_boxes: int = 8,
                      seed: int = 0) -> DominationReport:
    """Check the path against its dominating free-birth process.

    For a grid of times t and random sub-boxes L: the phantom up to t
    restricted to L never exceeds (driving candidates with s <= t in L) plus
    the initial points in L; every born point's (s, x) must appear among the
    candidates; and the event log must be reproducible by replay.
    """
    if traj.driving is None:
        raise ValueError("trajectory did not retain its driving process")
    violations: list[dict] = []

    replayed = replay_events(traj)
    replay_consistent = replayed == traj.events

    born = {ev.id: ev for ev in traj.events if ev.kind == "birth"}
    candidate_keys = {(dp.s, dp.x): dp for dp in traj.driving}
    for pid, ev in born.items():
        if (ev.time, ev.position) not in candidate_keys:
            violations.append({"kind": "missing_candidate", "id": pid, "t": ev.time})

    gen = rng.keyed_generator(seed, rng.SAMPLING)
    times = np.linspace(0.0, traj.horizon, n_times + 1)[1:]
    side = traj.window.side
    dim = traj.window.dim
    boxes = [traj.window.box]
    for _ in range(n_boxes - 1):
        lo = side * gen.random(dim) * 0.5
        hi = np.minimum(lo + side * (0.25 + 0.75 * gen.random(dim)) * 0.5, side)
        boxes.append(Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi)))

    cand_s = np.array([dp.s for dp in traj.driving])
    cand_x = np.array([dp.x for dp in traj.driving]) if traj.driving else np.zeros((0, dim))
    if traj.window.periodic and len(cand_x):
        cand_x = np.mod(cand_x, side)
    init_pts = traj.gamma0.positions_array()

    checks = 0
    for t in times:
        # phantom up to t = gamma_0 plus all births accepted by time t
        phantom_pts = [pos for pid, pos in traj.gamma0.items()]
        phantom_pts += [np.asarray(ev.position) for ev in born.values() if ev.time <= t]
        phantom_arr = np.array(phantom_pts) if phantom_pts else np.zeros((0, dim))
        for box in boxes:
            checks += 1
            lhs = int(np.sum(box.contains_many(phantom_arr))) if len(phantom_arr) else 0
            n_cand = (
                int(np.sum((cand_s <= t) & box.contains_many(cand_x)))
                if len(cand_x) else 0
            )
            n_init = int(np.sum(box.contains_many(init_pts))) if len(init_pts) else 0
            if lhs > n_cand + n_init:
                violations.append({
                    "kind": "domination", "t": float(t),
                    "box": box.descriptor(), "phantom": lhs,
                    "candidates": n_cand, "initial": n_init,
                })

    passed = not violations and replay_consistent
    return DominationReport(passed, checks, violations, replay_consistent)


def verify_counting_identity(traj: Trajectory, n_times: int = 6, n_boxes: int = 6,
                             seed: int = 1) -> bool:
    """Replay the counting identity behind the path construction.

    gamma_t(L) computed from presence intervals must equal the direct count
    over driving candidates (accepted, survival mark beyond m(t-s)) plus
    surviving initial points.  The acceptance decisions are recomputed by a
    fresh replay sweep, not read from the event log.
    """
    if traj.driving is None:
        raise ValueError("trajectory did not retain its driving process")
    fresh = simulate(traj.gamma0, traj.kernel, traj.death_rate, traj.horizon,
                     traj.seed, keep_driving=False)
    accepted = {}
    for ev in fresh.events:
        if ev.kind == "birth":
            accepted[(ev.time, ev.position)] = ev
    m = traj.death_rate

    gen = rng.keyed_generator(seed, rng.SAMPLING)
    times = np.linspace(0.0, traj.horizon, n_times + 1)[1:]
    side = traj.window.side
    dim = traj.window.dim
    boxes = [traj.window.box]
    for _ in range(n_boxes - 1):
        lo = side * gen.random(dim) * 0.5
        hi = np.minimum(lo + side * 0.5 * gen.random(dim), side)
        boxes.append(Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi)))

    for t in times:
        cfg = traj.config_at(t)
        for box in boxes:
            direct = 0
            for dp in traj.driving:
                if (dp.s, dp.x) not in accepted:
                    continue
                if dp.s <= t and box.contains(dp.x) and dp.r > m * (t - dp.s):
                    direct += 1
            for pid, pos in traj.gamma0.items():
                if box.contains(pos) and traj.initial_lifetimes[pid] > m * t:
                    direct += 1
            if direct != cfg.count_in(box):
                return False
    return True


# -- event log I/O -----------------------------------------------------------


def write_event_log(traj: Trajectory, path, *, include_driving: bool = False) -> None:
    """JSON Lines: one header record, then one record per event."""
    header = {
        "record": "header",
        "seed": traj.seed,
        "T": traj.horizon,
        "m": traj.death_rate,
        "kernel": traj.kernel.descriptor(),
        "window": traj.window.descriptor(),
        "gamma0": traj.gamma0.to_json_obj(),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for ev in traj.events:
            fh.write(json.dumps({
                "t": ev.time, "kind": ev.kind, "id": ev.id,
                "position": list(ev.position),
            }) + "\n")
    if include_driving:
        drv = str(path) + ".driving"
        with open(drv, "w") as fh:
            for dp in traj.driving or []:
                fh.write(json.dumps({
                    "s": dp.s, "x": list(dp.x), "u": dp.u, "r": dp.r, "index": dp.index,
                }) + "\n")


def read_event_log(path) -> tuple[dict, list[Event]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("record") != "header":
            raise ValueError("event log does not start with a header record")
        events = []
        for line in fh:
            rec = json.loads(line)
            events.append(Event(rec["t"], rec["kind"], rec["id"], tuple(rec["position"])))
    return header, events


def check_rate_perturbation_bound(kernel: GlauberBirthKernel, window: Window,
                                  bound_B: float, weight, n_samples: int,
                                  seed: int) -> dict:
    """Sample |b(x, gamma + y) - b(x, gamma)| <= z * B * G(x - y) for Glauber.

    Valid whenever phi <= B * G pointwise; uses z(1 - e^{-phi}) <= z phi.
    Returns a report dict with the worst observed slack.
    """
    gen = rng.keyed_generator(seed, rng.SAMPLING)
    worst = -math.inf
    violations = 0
    for _ in range(n_samples):
        n = int(gen.integers(0, 30))
        pts = window.side * gen.random((n, window.dim))
        config = Configuration.from_positions(window, pts,
                                              cell_size=max(kernel.phi.range, 0.5))
        x = window.side * gen.random(window.dim)
        y = window.side * gen.random(window.dim)
        base = kernel.evaluate(x, config)
        config.insert(10_000, y)
        perturbed = kernel.evaluate(x, config)
        lhs = abs(perturbed - base)
        rhs = kernel.z * bound_B * weight.pair(window, x, y)
        worst = max(worst, lhs - rhs)
        if lhs > rhs * (1 + 1e-9) + 1e-12:
            violations += 1
    return {"passed": violations == 0, "violations": violations, "worst_excess": worst}
