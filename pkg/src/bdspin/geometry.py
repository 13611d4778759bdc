"""Finite point configurations on a bounded window of R^d.

Provides the simulation window (periodic torus or open box), a uniform-grid
spatial index for radius-limited neighbor queries, and the counting and
weighting functionals the verification suite is built on (log-regularity
constant, tempered pairings, weighted tail sums).

Configurations are mutable while a simulation sweep builds them, but queries
never mutate; concurrent read-only use is safe once building is done.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np


@dataclass(frozen=True)
class Point:
    """A particle with a stable integer identity (never reused in a run)."""

    id: int
    position: tuple[float, ...]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, closed on both sides."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have equal dimension")
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError("box has lo > hi")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def volume(self) -> float:
        v = 1.0
        for l, h in zip(self.lo, self.hi):
            v *= h - l
        return v

    def contains(self, x) -> bool:
        return all(l <= xi <= h for xi, l, h in zip(x, self.lo, self.hi))

    def contains_many(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def scaled(self, factor: float, center: tuple[float, ...] | None = None) -> "Box":
        """Box shrunk/grown about ``center`` (default: its own center)."""
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        c = 0.5 * (lo + hi) if center is None else np.asarray(center, dtype=float)
        return Box(tuple(c + factor * (lo - c)), tuple(c + factor * (hi - c)))

    def descriptor(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


class Window:
    """Simulation window [0, side]^dim with periodic or open boundary.

    Under periodic boundary all distances are torus distances.  The radial
    norm |x| entering log bounds and exponential weights is measured from the
    window center in periodic mode (a torus has no privileged origin) and
    from the corner origin in open mode; ``norm_origin`` overrides the anchor.
    """

    def __init__(
        self,
        side: float,
        dim: int,
        boundary: str = "periodic",
        norm_origin: tuple[float, ...] | None = None,
    ):
        if side <= 0:
            raise ValueError("window side must be positive")
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        if boundary not in ("periodic", "open"):
            raise ValueError(f"unknown boundary mode {boundary!r}")
        self.side = float(side)
        self.dim = int(dim)
        self.boundary = boundary
        if norm_origin is None:
            if boundary == "periodic":
                norm_origin = (self.side / 2.0,) * dim
            else:
                norm_origin = (0.0,) * dim
        self._anchor = np.asarray(norm_origin, dtype=float)

    @property
    def box(self) -> Box:
        return Box((0.0,) * self.dim, (self.side,) * self.dim)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def volume(self) -> float:
        return self.side**self.dim

    def contains(self, x) -> bool:
        return all(0.0 <= xi <= self.side for xi in x)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        if not self.periodic:
            return np.asarray(x, dtype=float)
        return np.mod(np.asarray(x, dtype=float), self.side)

    def distance(self, a, b) -> float:
        d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
        if self.periodic:
            d = np.minimum(d, self.side - d)
        return float(np.sqrt(np.sum(d * d)))

    def distances(self, x, pts: np.ndarray) -> np.ndarray:
        """Distances from ``x`` to each row of ``pts``."""
        if len(pts) == 0:
            return np.zeros(0)
        d = np.abs(pts - np.asarray(x, dtype=float))
        if self.periodic:
            d = np.minimum(d, self.side - d)
        return np.sqrt(np.sum(d * d, axis=1))

    def radial_norm(self, x) -> float:
        return self.distance(x, self._anchor)

    def radial_norms(self, pts: np.ndarray) -> np.ndarray:
        return self.distances(self._anchor, pts)

    def descriptor(self) -> dict:
        return {
            "side": self.side,
            "dim": self.dim,
            "boundary": self.boundary,
            "norm_origin": list(self._anchor),
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "Window":
        return cls(d["side"], d["dim"], d["boundary"], tuple(d["norm_origin"]))


@dataclass(frozen=True)
class TemperedWeight:
    """Integrable weight (1+r)^(-dim-epsilon), equal to 1 at r=0."""

    epsilon: float
    dim: int

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def value(self, r) -> float | np.ndarray:
        return (1.0 + r) ** (-(self.dim + self.epsilon))

    def at(self, window: Window, x) -> float:
        return float(self.value(window.radial_norm(x)))

    def pair(self, window: Window, x, y) -> float:
        return float(self.value(window.distance(x, y)))


class Configuration:
    """Finite set of identified points with a uniform-grid spatial index.

    ``cell_size`` should be at least the dominant query radius so a radius-R
    query touches O(1) cells; any positive value is correct, only speed
    changes.  Index query results always equal a brute-force distance scan.
    """

    def __init__(
        self,
        window: Window,
        points: Mapping[int, Iterable[float]] | Iterable[tuple[int, Iterable[float]]] = (),
        cell_size: float | None = None,
    ):
        self.window = window
        if cell_size is None or cell_size <= 0:
            cell_size = window.side / 8.0
        # Integer cell count per axis keeps the periodic wrap exact.
        self._ncells = max(1, int(window.side / cell_size))
        self._cell = window.side / self._ncells
        self._pos: dict[int, np.ndarray] = {}
        self._cells: dict[tuple[int, ...], list[int]] = {}
        items = points.items() if isinstance(points, Mapping) else points
        for pid, pos in items:
            self.insert(pid, pos)

    # -- construction / mutation ------------------------------------------

    @classmethod
    def from_positions(cls, window: Window, positions: Iterable[Iterable[float]],
                       cell_size: float | None = None) -> "Configuration":
        """Build with ids 0..n-1 assigned in iteration order."""
        return cls(window, list(enumerate(positions)), cell_size=cell_size)

    def copy(self, cell_size: float | None = None) -> "Configuration":
        return Configuration(self.window, dict(self._pos),
                             cell_size=cell_size if cell_size is not None else self._cell)

    def insert(self, pid: int, position: Iterable[float]) -> None:
        pid = int(pid)
        if pid in self._pos:
            raise ValueError(f"duplicate point id {pid}")
        x = np.asarray(position, dtype=float)
        if x.shape != (self.window.dim,):
            raise ValueError(f"position has dimension {x.shape}, window is {self.window.dim}-d")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite position for point {pid}")
        if self.window.periodic:
            x = self.window.wrap(x)
        elif not self.window.contains(x):
            raise ValueError(f"point {pid} lies outside the window")
        key = self._cell_key(x)
        bucket = self._cells.setdefault(key, [])
        for other in bucket:
            if np.array_equal(self._pos[other], x):
                raise ValueError(f"points {other} and {pid} have identical positions")
        bucket.append(pid)
        self._pos[pid] = x

    def remove(self, pid: int) -> None:
        if pid not in self._pos:
            raise KeyError(f"unknown point {pid}")
        key = self._cell_key(self._pos[pid])
        self._cells[key].remove(pid)
        if not self._cells[key]:
            del self._cells[key]
        del self._pos[pid]

    # -- basic access ------------------------------------------------------

    def __len__(self) -> int:
        return len(self._pos)

    def __contains__(self, pid: int) -> bool:
        return pid in self._pos

    def ids(self) -> list[int]:
        return sorted(self._pos)

    def position_of(self, pid: int) -> np.ndarray:
        try:
            return self._pos[pid]
        except KeyError:
            raise KeyError(f"unknown point {pid}") from None

    def items(self) -> Iterator[tuple[int, np.ndarray]]:
        for pid in self.ids():
            yield pid, self._pos[pid]

    def points(self) -> list[Point]:
        return [Point(pid, tuple(pos)) for pid, pos in self.items()]

    def positions_array(self) -> np.ndarray:
        """Positions stacked in ascending id order, shape (n, dim)."""
        if not self._pos:
            return np.zeros((0, self.window.dim))
        return np.stack([self._pos[pid] for pid in self.ids()])

    def radial_norms(self) -> np.ndarray:
        """|x| of every point (ascending id order), relative to the window anchor."""
        return self.window.radial_norms(self.positions_array())

    def count_in(self, box: Box) -> int:
        pts = self.positions_array()
        if len(pts) == 0:
            return 0
        return int(np.sum(box.contains_many(pts)))

    # -- grid index --------------------------------------------------------

    def _cell_key(self, x: np.ndarray) -> tuple[int, ...]:
        idx = (x / self._cell).astype(int)
        if self.window.periodic:
            idx = np.mod(idx, self._ncells)
        else:
            idx = np.minimum(idx, self._ncells - 1)
        return tuple(int(i) for i in idx)

    def _candidate_ids(self, x: np.ndarray, radius: float) -> list[int]:
        """Ids in all cells possibly intersecting the closed ball B(x, radius)."""
        reach = int(radius / self._cell) + 1
        base = (np.asarray(x, dtype=float) / self._cell).astype(int)
        if 2 * reach + 1 >= self._ncells:
            axis_ranges = [range(self._ncells)] * self.window.dim
        elif self.window.periodic:
            axis_ranges = [
                [(b + off) % self._ncells for off in range(-reach, reach + 1)]
                for b in base
            ]
        else:
            axis_ranges = [range(b - reach, b + reach + 1) for b in base]
        out: list[int] = []
        keys = [()]
        for rng_axis in axis_ranges:
            keys = [k + (i,) for k in keys for i in rng_axis]
        for key in keys:
            bucket = self._cells.get(key)
            if bucket:
                out.extend(bucket)
        return out

    def ids_within(self, x, radius: float) -> list[tuple[int, float]]:
        """(id, distance) pairs with |x - y| <= radius (closed ball), id-sorted."""
        x = np.asarray(x, dtype=float)
        cand = self._candidate_ids(x, radius)
        if not cand:
            return []
        pts = np.stack([self._pos[pid] for pid in cand])
        dist = self.window.distances(x, pts)
        hits = [(pid, float(d)) for pid, d in zip(cand, dist) if d <= radius]
        hits.sort()
        return hits

    # -- spec operations ----------------------------------------------------

    def neighbor_count(self, x, radius: float) -> int:
        """Number of points within closed distance ``radius`` of ``x``.

        ``x`` itself is counted when it is a point of the configuration.
        """
        if radius <= 0:
            raise ValueError("radius must be positive")
        return len(self.ids_within(x, radius))

    def neighbors_within(self, pid: int, radius: float) -> list[tuple[int, float]]:
        """(id, distance) of all other points within ``radius`` of point ``pid``."""
        if pid not in self._pos:
            raise KeyError(f"unknown point {pid}")
        return [(q, d) for q, d in self.ids_within(self._pos[pid], radius) if q != pid]

    # -- serialization -------------------------------------------------------

    def to_json_obj(self) -> list[dict]:
        return [{"id": pid, "position": [float(c) for c in pos]} for pid, pos in self.items()]

    def dumps(self) -> str:
        return json.dumps(self.to_json_obj())

    @classmethod
    def from_json_obj(cls, window: Window, obj: list[dict],
                      cell_size: float | None = None) -> "Configuration":
        return cls(window, [(rec["id"], rec["position"]) for rec in obj], cell_size=cell_size)

    @classmethod
    def loads(cls, window: Window, s: str, cell_size: float | None = None) -> "Configuration":
        return cls.from_json_obj(window, json.loads(s), cell_size=cell_size)


def log_bound_constant(config: Configuration, radius: float) -> float:
    """Smallest a with n_{x,R}(gamma) <= a * (1 + log(1 + |x|)) over the points.

    |x| is the radial norm from the window anchor.  Raises on an empty
    configuration (the bound is vacuous there).
    """
    if len(config) == 0:
        raise ValueError("empty configuration")
    best = 0.0
    norms = config.radial_norms()
    for (pid, pos), r in zip(config.items(), norms):
        n = config.neighbor_count(pos, radius)
        best = max(best, n / (1.0 + math.log1p(r)))
    return best


def tempered_pairing(config: Configuration, f: Callable[[np.ndarray], float]) -> float:
    """Sum of f over the point positions (id order, deterministic)."""
    return float(sum(f(pos) for _, pos in config.items()))


def weighted_tail_sum(config: Configuration, alpha: float, k: int, radius: float) -> float:
    """Sum over points of exp(-alpha |x|) * n_{x,R}(gamma)^k."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    total = 0.0
    norms = config.radial_norms()
    for (pid, pos), r in zip(config.items(), norms):
        n = config.neighbor_count(pos, radius)
        total += math.exp(-alpha * r) * n**k
    return total


def poisson_configuration(window: Window, intensity: float, seed: int,
                          namespace: tuple[int, ...] = (),
                          cell_size: float | None = None) -> Configuration:
    """Homogeneous Poisson sample on the window, ids 0..n-1 in draw order."""
    from . import rng

    gen = rng.keyed_generator(seed, rng.INITIAL_CONFIG, *namespace)
    n = gen.poisson(intensity * window.volume())
    pts = window.side * gen.random((n, window.dim))
    return Configuration.from_positions(window, pts, cell_size=cell_size)
