"""Marked trajectory assembly, observables, cadlag grid checks."""

import json
import math

import numpy as np
import pytest

from bdspin import rng
from bdspin.birth_death import ConstantBirthKernel, GlauberBirthKernel, simulate, step_potential
from bdspin.geometry import Box, Configuration, Window, poisson_configuration
from bdspin.marked_process import (
    MarkedConfiguration,
    Observable,
    cadlag_check,
    combine,
    counting_observable,
    mark_sum_observable,
    observable_value,
    write_marked_snapshots,
    write_observable_series,
)
from bdspin.spin_sde import (
    CoefficientSet,
    InitialMarkPolicy,
    IntegratorConfig,
    cubic_drift,
    exchange_coupling,
    integrate_marks,
    tanh_diffusion,
)


def glauber_marked(seed=0, side=5.0, T=1.0, m=1.0, z=2.0, dt=1 / 64):
    window = Window(side, 2, "periodic")
    gamma0 = poisson_configuration(window, 0.8, seed=seed)
    kernel = GlauberBirthKernel(z, step_potential(0.5, 1.0))
    traj = simulate(gamma0, kernel, m, T, seed)
    coeffs = CoefficientSet(cubic_drift(0.4), exchange_coupling(0.3),
                            tanh_diffusion(0.25), radius=1.0)
    path = integrate_marks(traj, coeffs, InitialMarkPolicy.constant(0.5),
                           IntegratorConfig(dt=dt), seed=seed)
    return traj, path, combine(traj, path)


class TestMarkedConfiguration:
    def test_requires_mark_per_point(self):
        window = Window(4.0, 2, "open")
        config = Configuration(window, [(0, [1.0, 1.0]), (1, [2.0, 2.0])])
        with pytest.raises(ValueError, match="missing mark"):
            MarkedConfiguration(config, {0: 1.0})

    def test_observable_zero_function(self):
        window = Window(4.0, 2, "open")
        config = Configuration(window, [(0, [1.0, 1.0])])
        mc = MarkedConfiguration(config, {0: 2.0})
        g = Observable(lambda pos, mark: 0.0, window.box, "zero")
        assert observable_value(mc, g) == 0.0

    def test_mark_sum_in_box(self):
        window = Window(4.0, 2, "open")
        config = Configuration(window, [(0, [1.0, 1.0]), (1, [3.5, 3.5])])
        mc = MarkedConfiguration(config, {0: 2.0, 1: 5.0})
        g = mark_sum_observable(Box((0.0, 0.0), (2.0, 2.0)))
        assert observable_value(mc, g) == pytest.approx(2.0)

    def test_random_observable_matches_brute_force(self):
        window = Window(6.0, 2, "open")
        config = poisson_configuration(window, 1.0, seed=3)
        gen = rng.keyed_generator(3, rng.SAMPLING)
        marks = {pid: float(v) for pid, v in zip(config.ids(),
                                                 gen.standard_normal(len(config)))}
        mc = MarkedConfiguration(config, marks)
        box = Box((1.0, 1.0), (4.0, 5.0))
        g = Observable(lambda pos, mark: mark**2 + pos[0], box, "mix")
        want = sum(
            marks[pid] ** 2 + pos[0]
            for pid, pos in config.items() if box.contains(pos)
        )
        assert observable_value(mc, g) == pytest.approx(want, rel=1e-12)


class TestCombine:
    def test_empty_trajectory(self):
        window = Window(3.0, 2, "open")
        traj = simulate(Configuration(window), ConstantBirthKernel(0.0), 0.0, 1.0, seed=0)
        coeffs = CoefficientSet(cubic_drift(0.1), exchange_coupling(0.1),
                                tanh_diffusion(0.1), radius=1.0)
        path = integrate_marks(traj, coeffs, InitialMarkPolicy.constant(0.0),
                               IntegratorConfig(dt=0.25), seed=0)
        mt = combine(traj, path)
        for t in path.grid:
            assert len(mt.at(float(t)).config) == 0

    def test_static_configuration_marks_evolve(self):
        window = Window(4.0, 2, "open")
        gamma0 = Configuration(window, [(0, [1.0, 1.0]), (1, [1.5, 1.0])])
        traj = simulate(gamma0, ConstantBirthKernel(0.0), 0.0, 1.0, seed=0)
        coeffs = CoefficientSet(cubic_drift(0.2), exchange_coupling(0.2),
                                tanh_diffusion(0.3), radius=1.0)
        path = integrate_marks(traj, coeffs, InitialMarkPolicy.constant(1.0),
                               IntegratorConfig(dt=1 / 32), seed=1)
        mt = combine(traj, path)
        for t in (0.0, 0.5, 1.0):
            mc = mt.at(t)
            assert mc.config.ids() == [0, 1]
        assert mt.at(1.0).marks != mt.at(0.0).marks

    @pytest.mark.parametrize("seed", range(3))
    def test_fibre_conditions(self, seed):
        # position projection equals the jump state; marks restrict the path
        traj, path, mt = glauber_marked(seed=seed)
        col = {pid: k for k, pid in enumerate(path.ids)}
        gen = rng.keyed_generator(seed, rng.SAMPLING)
        for t in gen.choice(path.grid, size=25):
            t = float(t)
            mc = mt.at(t)
            assert mc.config.ids() == traj.config_at(t).ids()
            j = path.index_of(t)
            for pid in mc.config.ids():
                assert mc.marks[pid] == float(path.values[j, col[pid]])

    def test_presence_interval_oracle(self):
        traj, path, mt = glauber_marked(seed=5)
        for t in path.grid[:: max(1, len(path.grid) // 40)]:
            t = float(t)
            want = sorted(
                pid for pid, (birth, death) in traj.presence.items()
                if birth <= t and (death is None or t < death)
            )
            assert mt.at(t).config.ids() == want

    def test_missing_marks_rejected(self):
        traj, path, _ = glauber_marked(seed=1)
        short = type(path)(path.grid, path.ids[:-1], path.values[:, :-1])
        if traj.phantom_ids()[-1] in traj.present_ids(traj.horizon):
            with pytest.raises(ValueError, match="missing mark"):
                combine(traj, short)


class TestCountingJumps:
    def test_counting_observable_tracks_events(self):
        traj, path, mt = glauber_marked(seed=7, m=1.5, z=3.0)
        box = Box((0.5, 0.5), (4.0, 4.0))
        g = counting_observable(box)
        series = mt.observable_series(g)
        # jumps of the counting series happen exactly at in-box event times
        jumps = {}
        for j in range(1, len(path.grid)):
            d = series[j] - series[j - 1]
            if d != 0:
                jumps[float(path.grid[j])] = d
        for t, d in jumps.items():
            births = sum(1 for ev in traj.events
                         if ev.time == t and ev.kind == "birth" and box.contains(ev.position))
            deaths = sum(1 for ev in traj.events
                         if ev.time == t and ev.kind == "death" and box.contains(ev.position))
            assert d == births - deaths
        n_in_box_events = sum(1 for ev in traj.events if box.contains(ev.position))
        assert len(jumps) <= n_in_box_events
        assert series[0] == traj.gamma0.count_in(box)


class TestCadlag:
    def test_no_events_in_support_passes(self):
        traj, path, mt = glauber_marked(seed=9, m=1.0, z=2.0)
        # empty corner box: no events inside
        tiny = Box((0.0, 0.0), (1e-9, 1e-9))
        if any(tiny.contains(ev.position) for ev in traj.events):
            pytest.skip("degenerate corner box hit an event")
        report = cadlag_check(mt, counting_observable(tiny), eps_t=1 / 64)
        assert report.passed and report.events_checked == 0

    def test_single_birth_jump_counting(self):
        # one candidate accepted, counting observable jumps by exactly +1
        window = Window(2.0, 2, "periodic")
        traj = simulate(Configuration(window), ConstantBirthKernel(1.5), 0.0, 1.0, seed=3)
        assert traj.birth_events()
        coeffs = CoefficientSet(cubic_drift(0.1), exchange_coupling(0.1),
                                tanh_diffusion(0.2), radius=0.5)
        path = integrate_marks(traj, coeffs, InitialMarkPolicy.constant(0.0),
                               IntegratorConfig(dt=1 / 64), seed=3)
        mt = combine(traj, path)
        g = counting_observable(window.box)
        report = cadlag_check(mt, g, eps_t=1 / 64)
        assert report.passed, report.violations
        ev = traj.birth_events()[0]
        j = path.index_of(ev.time)
        series = mt.observable_series(g)
        left = observable_value(mt.at(ev.time, "left"), g)
        assert series[j] - left == 1.0

    @pytest.mark.parametrize("seed", range(4))
    def test_glauber_runs_pass(self, seed):
        traj, path, mt = glauber_marked(seed=seed, m=1.5, z=3.0)
        gen = rng.keyed_generator(100 + seed, rng.SAMPLING)
        for _ in range(5):
            lo = 5.0 * gen.random(2) * 0.6
            hi = np.minimum(lo + 5.0 * (0.2 + 0.6 * gen.random(2)), 5.0)
            box = Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi))
            g = mark_sum_observable(box)
            report = cadlag_check(mt, g, eps_t=1 / 64)
            assert report.passed, report.violations


class TestWriters:
    def test_observable_series_csv(self, tmp_path):
        traj, path, mt = glauber_marked(seed=11)
        g1 = counting_observable(traj.window.box, "count_all")
        g2 = mark_sum_observable(Box((1.0, 1.0), (4.0, 4.0)), "marks_mid")
        f = tmp_path / "series.csv"
        write_observable_series(f, mt, [g1, g2])
        lines = f.read_text().strip().splitlines()
        assert lines[0] == "t,observable_name,value"
        assert len(lines) == 1 + 2 * len(path.grid)

    def test_snapshots_jsonl(self, tmp_path):
        traj, path, mt = glauber_marked(seed=12)
        f = tmp_path / "snaps.jsonl"
        write_marked_snapshots(f, mt, stride=8)
        records = [json.loads(line) for line in f.read_text().splitlines()]
        assert records[0]["t"] == 0.0
        first = records[0]["points"]
        assert sorted(p["id"] for p in first) == traj.gamma0.ids()
        for p in first:
            assert p["mark"] == 0.5
