"""Birth-death process: thinning exactness, replay oracles, domination."""

import math

import numpy as np
import pytest
from scipy import stats

from bdspin import rng
from bdspin.birth_death import (
    BoundViolationError,
    ConstantBirthKernel,
    EstablishmentBirthKernel,
    FecundityBirthKernel,
    GlauberBirthKernel,
    check_rate_perturbation_bound,
    evaluate_birth_rate,
    read_event_log,
    replay_events,
    sample_driving_process,
    simulate,
    step_potential,
    verify_counting_identity,
    verify_domination,
    write_event_log,
)
from bdspin.geometry import Box, Configuration, TemperedWeight, Window, poisson_configuration


def glauber_run(seed, z=1.5, side=5.0, T=1.0, m=0.5, init_intensity=0.5, c=0.8, rho=1.0):
    window = Window(side, 2, "periodic")
    gamma0 = poisson_configuration(window, init_intensity, seed=seed)
    kernel = GlauberBirthKernel(z, step_potential(c, rho))
    return simulate(gamma0, kernel, m, T, seed)


class TestDrivingProcess:
    def test_zero_intensity_is_empty(self):
        window = Window(3.0, 2, "open")
        assert sample_driving_process(window, 1.0, 0.0, seed=0) == []

    def test_determinism(self):
        window = Window(2.0, 2, "periodic")
        a = sample_driving_process(window, 1.5, 2.0, seed=123)
        b = sample_driving_process(window, 1.5, 2.0, seed=123)
        assert a == b
        c = sample_driving_process(window, 1.5, 2.0, seed=124)
        assert a != c

    def test_marks_in_range_and_sorted(self):
        window = Window(4.0, 2, "open")
        pts = sample_driving_process(window, 2.0, 1.5, seed=7)
        times = [dp.s for dp in pts]
        assert times == sorted(times)
        for dp in pts:
            assert 0.0 < dp.s <= 2.0
            assert window.contains(dp.x)
            assert 0.0 <= dp.u <= 1.5
            assert dp.r > 0.0

    def test_count_matches_poisson_moments(self):
        # mean candidate count b_max * T * vol = 2.0, averaged over many seeds
        window = Window(1.0, 2, "open")
        counts = np.array([
            len(sample_driving_process(window, 1.0, 2.0, seed=s)) for s in range(10_000)
        ])
        mean = 2.0
        sigma_mean = math.sqrt(mean / len(counts))
        assert abs(counts.mean() - mean) < 3.0 * sigma_mean
        # variance of a Poisson equals its mean
        assert abs(counts.var() - mean) < 4.0 * mean / math.sqrt(len(counts)) * 3.0


class TestBirthRates:
    def test_glauber_flat_potential_is_constant(self):
        window = Window(5.0, 2, "open")
        config = poisson_configuration(window, 1.0, seed=2)
        kernel = GlauberBirthKernel(3.0, step_potential(0.0, 1.0))
        assert evaluate_birth_rate(kernel, [2.0, 2.0], config) == pytest.approx(3.0)

    def test_fecundity_empty_configuration(self):
        window = Window(5.0, 2, "open")
        config = Configuration(window)
        pot = step_potential(0.5, 1.0)
        kernel = FecundityBirthKernel(pot, pot, pot, bound=10.0)
        assert evaluate_birth_rate(kernel, [1.0, 1.0], config) == 0.0

    def test_glauber_neighbor_count_oracle(self):
        window = Window(10.0, 2, "open")
        c, radius = 0.7, 1.0
        kernel = GlauberBirthKernel(1.0, step_potential(c, radius))
        x = np.array([5.0, 5.0])
        gen = rng.keyed_generator(3, rng.SAMPLING)
        # k points inside the ball, a few well outside
        for k in range(5):
            pts = []
            for _ in range(k):
                ang, rad = 2 * math.pi * gen.random(), radius * math.sqrt(gen.random())
                pts.append(x + rad * np.array([math.cos(ang), math.sin(ang)]))
            pts += [x + np.array([3.0 + i, 0.0]) for i in range(3)]
            config = Configuration.from_positions(window, pts)
            got = evaluate_birth_rate(kernel, x, config)
            assert got == pytest.approx(math.exp(-k * c), rel=1e-12)

    def test_establishment_matches_direct_formula(self):
        window = Window(6.0, 2, "open")
        a = step_potential(0.4, 1.2)
        c = step_potential(0.3, 0.9)
        phi = step_potential(0.6, 1.5)
        kernel = EstablishmentBirthKernel(a, c, phi, bound=50.0)
        config = poisson_configuration(window, 1.0, seed=5)
        x = np.array([3.0, 3.0])
        a_sum = c_sum = phi_sum = 0.0
        for _, pos in config.items():
            d = window.distance(x, pos)
            a_sum += 0.4 if d <= 1.2 else 0.0
            c_sum += 0.3 if d <= 0.9 else 0.0
            phi_sum += 0.6 if d <= 1.5 else 0.0
        want = a_sum * (1.0 + c_sum) * math.exp(-phi_sum)
        assert evaluate_birth_rate(kernel, x, config) == pytest.approx(want, rel=1e-12)

    def test_fecundity_matches_direct_formula(self):
        window = Window(6.0, 2, "open")
        a = step_potential(0.4, 1.5)
        c = step_potential(0.2, 1.0)
        phi = step_potential(0.5, 1.0)
        kernel = FecundityBirthKernel(a, c, phi, bound=100.0)
        config = poisson_configuration(window, 0.8, seed=9)
        x = np.array([3.0, 2.5])
        want = 0.0
        for y_id, y in config.items():
            d_xy = window.distance(x, y)
            if d_xy > 1.5:
                continue
            c_sum = phi_sum = 0.0
            for z_id, z in config.items():
                if z_id == y_id:
                    continue
                d = window.distance(z, y)
                c_sum += 0.2 if d <= 1.0 else 0.0
                phi_sum += 0.5 if d <= 1.0 else 0.0
            want += 0.4 * (1.0 + c_sum) * math.exp(-phi_sum)
        assert evaluate_birth_rate(kernel, x, config) == pytest.approx(want, rel=1e-12)

    def test_misdeclared_bound_raises(self):
        window = Window(5.0, 2, "open")
        config = poisson_configuration(window, 2.0, seed=1)
        a = step_potential(1.0, 2.0)
        zero = step_potential(0.0, 0.1)
        kernel = FecundityBirthKernel(a, zero, zero, bound=0.01)
        with pytest.raises(BoundViolationError, match="bound violation"):
            evaluate_birth_rate(kernel, [2.5, 2.5], config)

    def test_glauber_configuration_lipschitz_bound(self):
        # phi = c * 1{d <= rho} <= B * G with B = c / G(rho)
        window = Window(5.0, 2, "periodic")
        c, radius = 0.8, 1.0
        kernel = GlauberBirthKernel(2.0, step_potential(c, radius))
        weight = TemperedWeight(epsilon=0.5, dim=2)
        bound_B = c / float(weight.value(radius))
        report = check_rate_perturbation_bound(kernel, window, bound_B, weight,
                                               n_samples=300, seed=17)
        assert report["passed"], report


class TestSimulate:
    def test_pure_birth_counts_are_poisson(self):
        window = Window(2.0, 2, "periodic")
        kernel = ConstantBirthKernel(1.5)
        lam = 1.5 * 1.0 * window.volume()
        counts = []
        for s in range(1000):
            traj = simulate(Configuration(window), kernel, 0.0, 1.0, seed=s)
            counts.append(len(traj.config_at(1.0)))
            assert not traj.death_events()
        counts = np.array(counts)
        sigma = math.sqrt(lam / len(counts))
        assert abs(counts.mean() - lam) < 3 * sigma
        var_sigma = lam * math.sqrt(2.0 / len(counts))  # approx sd of sample variance
        assert abs(counts.var() - lam) < 3 * var_sigma

    def test_pure_death_survivors_are_binomial(self):
        window = Window(5.0, 2, "open")
        gen = rng.keyed_generator(0, rng.SAMPLING)
        gamma0 = Configuration.from_positions(window, 5.0 * gen.random((200, 2)))
        m, t = 1.0, 0.7
        p = math.exp(-m * t)
        survivors = []
        for s in range(800):
            traj = simulate(gamma0, ConstantBirthKernel(0.0), m, 0.7, seed=s)
            survivors.append(len(traj.config_at(t)))
        survivors = np.array(survivors)
        mean = 200 * p
        sigma = math.sqrt(200 * p * (1 - p) / len(survivors))
        assert abs(survivors.mean() - mean) < 3 * sigma

    def test_no_death_means_phantom_equals_final(self):
        traj = glauber_run(seed=11, m=0.0)
        assert not traj.death_events()
        final = traj.config_at(traj.horizon)
        assert final.ids() == traj.phantom_ids()

    def test_determinism_bit_identical(self):
        a = glauber_run(seed=21)
        b = glauber_run(seed=21)
        assert a.events == b.events
        assert a.presence == b.presence

    def test_lifetimes_are_exponential(self):
        # born points: m * (death - birth) is a unit exponential.  Censoring
        # at the horizon depends on the birth time, so condition on points
        # whose censoring window covers a fixed cut and truncate there.
        m, T, cut = 2.0, 2.0, 1.0
        lifetimes = []
        for s in range(60):
            traj = glauber_run(seed=s, m=m, T=T, z=2.0)
            deaths = {ev.id: ev.time for ev in traj.death_events()}
            for ev in traj.birth_events():
                if ev.time <= T - cut / m and ev.id in deaths:
                    lifetimes.append(m * (deaths[ev.id] - ev.time))
        sample = np.array([lt for lt in lifetimes if lt <= cut])
        assert len(sample) > 200
        truncated_cdf = lambda x: (1 - np.exp(-x)) / (1 - math.exp(-cut))
        res = stats.kstest(sample, truncated_cdf)
        assert res.pvalue > 0.01

    def test_phantom_equals_union_of_configs(self):
        traj = glauber_run(seed=12, m=1.5, z=3.0, T=1.5)
        times = sorted({ev.time for ev in traj.events} | {0.0, traj.horizon})
        union = set()
        for t in times:
            union |= set(traj.config_at(t).ids())
            union |= set(traj.config_at(t, side="left").ids())
        assert sorted(union) == traj.phantom_ids()

    def test_id_presence_single_interval_no_resurrection(self):
        traj = glauber_run(seed=3, m=1.0, T=2.0, z=2.0)
        seen: dict[int, list[str]] = {}
        for ev in traj.events:
            seen.setdefault(ev.id, []).append(ev.kind)
        for pid, kinds in seen.items():
            assert kinds in (["birth"], ["death"], ["birth", "death"])
        for pid, (birth, death) in traj.presence.items():
            if death is not None:
                assert birth < death <= traj.horizon


class TestConfigAt:
    def test_time_zero_is_initial(self):
        traj = glauber_run(seed=5)
        assert traj.config_at(0.0).ids() == traj.gamma0.ids()
        assert traj.config_at(0.0, side="left").ids() == traj.gamma0.ids()

    def test_cadlag_convention_at_birth(self):
        traj = glauber_run(seed=6, m=0.0, z=3.0)
        ev = traj.birth_events()[0]
        assert ev.id in traj.config_at(ev.time, "right")
        assert ev.id not in traj.config_at(ev.time, "left")

    def test_death_removes_point_from_right_limit(self):
        traj = glauber_run(seed=8, m=3.0, T=2.0, z=3.0)
        deaths = traj.death_events()
        assert deaths
        ev = deaths[0]
        assert ev.id not in traj.config_at(ev.time, "right")
        assert ev.id in traj.config_at(ev.time, "left")

    def test_out_of_range_time(self):
        traj = glauber_run(seed=5)
        with pytest.raises(ValueError, match="outside"):
            traj.config_at(-0.1)
        with pytest.raises(ValueError, match="outside"):
            traj.config_at(traj.horizon + 0.1)

    def test_matches_incremental_replay(self):
        traj = glauber_run(seed=9, m=1.0, T=1.5, z=2.0)
        gen = rng.keyed_generator(1, rng.SAMPLING)
        # oracle: walk the event log, maintaining the live id set
        times = np.sort(traj.horizon * gen.random(100))
        live = set(traj.gamma0.ids())
        idx = 0
        events = traj.events
        for t in times:
            while idx < len(events) and events[idx].time <= t:
                ev = events[idx]
                live.add(ev.id) if ev.kind == "birth" else live.remove(ev.id)
                idx += 1
            assert sorted(live) == traj.config_at(float(t)).ids()


class TestVerification:
    def test_domination_pure_death(self):
        window = Window(4.0, 2, "open")
        gen = rng.keyed_generator(2, rng.SAMPLING)
        gamma0 = Configuration.from_positions(window, 4.0 * gen.random((30, 2)))
        traj = simulate(gamma0, ConstantBirthKernel(0.0), 1.0, 1.0, seed=4)
        report = verify_domination(traj)
        assert report.passed and report.replay_consistent

    def test_domination_constant_kernel_accepts_all(self):
        window = Window(3.0, 2, "periodic")
        traj = simulate(Configuration(window), ConstantBirthKernel(2.0), 0.0, 1.0, seed=10)
        assert len(traj.birth_events()) == len(traj.driving)
        assert verify_domination(traj).passed

    @pytest.mark.parametrize("seed", range(12))
    def test_domination_glauber_runs(self, seed):
        traj = glauber_run(seed=seed, m=1.0, z=2.0)
        report = verify_domination(traj)
        assert report.passed, report.violations

    @pytest.mark.parametrize("seed", range(6))
    def test_counting_identity_replay(self, seed):
        traj = glauber_run(seed=seed, m=1.0, z=2.0, T=1.5)
        assert verify_counting_identity(traj)

    def test_replay_reproduces_event_log(self):
        traj = glauber_run(seed=14, m=0.7, z=2.5)
        assert replay_events(traj) == traj.events

    def test_event_count_matches_brute_filter(self):
        traj = glauber_run(seed=15, m=1.0, z=3.0, T=2.0)
        gen = rng.keyed_generator(5, rng.SAMPLING)
        for _ in range(20):
            lo = 5.0 * gen.random(2) * 0.6
            hi = np.minimum(lo + 5.0 * gen.random(2) * 0.6, 5.0)
            box = Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi))
            t0 = float(2.0 * gen.random()) * 0.5
            t1 = t0 + float(2.0 * gen.random()) * 0.5
            want = sum(
                1 for ev in traj.events
                if t0 <= ev.time <= t1 and box.contains(ev.position)
            )
            assert traj.event_count_in(box, t0, t1) == want
        assert traj.event_count_in(traj.window.box, 0.0, traj.horizon) == len(traj.events)

    def test_zero_length_interval(self):
        traj = glauber_run(seed=16)
        assert traj.event_count_in(traj.window.box, 0.3, 0.3) == 0

    def test_thinning_chi_square_over_disjoint_boxes(self):
        # constant kernel: accepted births are Poisson; cell counts over a
        # partition of the window are iid Poisson across replicas
        window = Window(2.0, 2, "periodic")
        kernel = ConstantBirthKernel(2.5)
        cells = [
            Box((i * 1.0, j * 1.0), ((i + 1) * 1.0, (j + 1) * 1.0))
            for i in range(2) for j in range(2)
        ]
        counts = []
        for s in range(1000):
            traj = simulate(Configuration(window), kernel, 0.0, 1.0, seed=s)
            final = traj.config_at(1.0)
            counts.extend(final.count_in(c) for c in cells)
        counts = np.array(counts)
        lam = 2.5  # per unit cell over T=1
        kmax = int(stats.poisson.ppf(0.999, lam)) + 1
        observed = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1)
        probs = stats.poisson.pmf(np.arange(kmax + 1), lam)
        probs[kmax] = 1.0 - probs[:kmax].sum()
        res = stats.chisquare(observed, probs * len(counts))
        assert res.pvalue > 0.01


class TestRestrictAndLog:
    def test_restrict_half_horizon(self):
        traj = glauber_run(seed=31, m=1.0, T=2.0, z=2.0)
        half = traj.restrict(1.0)
        assert all(ev.time <= 1.0 for ev in half.events)
        assert half.events == [ev for ev in traj.events if ev.time <= 1.0]
        for t in (0.0, 0.25, 0.7, 1.0):
            assert half.config_at(t).ids() == traj.config_at(t).ids()
        assert set(half.phantom_ids()) <= set(traj.phantom_ids())

    def test_event_log_round_trip(self, tmp_path):
        traj = glauber_run(seed=18, m=1.0, z=2.0)
        path = tmp_path / "events.jsonl"
        write_event_log(traj, path)
        header, events = read_event_log(path)
        assert header["seed"] == traj.seed
        assert header["T"] == traj.horizon
        assert header["kernel"]["variant"] == "glauber"
        assert events == traj.events

    def test_event_log_bytes_deterministic(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_event_log(glauber_run(seed=19), a)
        write_event_log(glauber_run(seed=19), b)
        assert a.read_bytes() == b.read_bytes()
