"""CLI: config validation, artifact determinism, verify suites, plot data."""

import json

import numpy as np
import pytest

from bdspin.cli import main


def base_config(**overrides):
    cfg = {
        "schema": "bdspin-run/1",
        "window": {"side": 4.0, "dim": 2, "boundary": "periodic"},
        "kernel": {"variant": "glauber", "z": 2.0,
                   "phi": {"name": "step", "params": [0.5, 1.0]}},
        "death_rate": 1.0,
        "horizon": 0.5,
        "initial_configuration": {"kind": "poisson", "intensity": 0.6},
        "initial_marks": {"kind": "constant", "value": 0.5},
        "coefficients": {
            "single": {"kind": "cubic", "params": [0.4]},
            "pair": {"kind": "exchange", "params": [0.3]},
            "diffusion": {"kind": "tanh", "params": [0.25]},
            "radius": 1.0,
        },
        "integrator": {"dt": 0.03125},
        "scale_params": {"alpha_star": 0.0, "alpha_sup": 1.0, "alpha": 0.2,
                         "beta": 0.7, "p": 4.0, "q": 0.5},
        "seed": 7,
        "replicas": 1,
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, name="run.json", **overrides):
    path = tmp_path / name
    path.write_text(json.dumps(base_config(**overrides)))
    return path


class TestSimulate:
    def test_minimal_run_produces_artifacts(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        code = main(["simulate", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        for name in ("events.jsonl", "marks.csv", "snapshots.jsonl", "manifest.json"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["schema"] == "bdspin-run/1"
        assert manifest["derived"]["b_max"] == 2.0
        assert manifest["config"]["seed"] == 7

    def test_empty_initial_constant_kernel_births(self, tmp_path):
        cfg = write_config(
            tmp_path,
            kernel={"variant": "constant", "z": 2.0},
            initial_configuration={"kind": "explicit", "points": []},
            death_rate=0.0,
            horizon=1.0,
        )
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "events.jsonl").read_text().strip().splitlines()
        header = json.loads(lines[0])
        assert header["record"] == "header"
        events = [json.loads(l) for l in lines[1:]]
        assert events and all(ev["kind"] == "birth" for ev in events)

    def test_invalid_config_exit_2_names_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, death_rate=-1.0)
        code = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "death_rate" in capsys.readouterr().err

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "one", tmp_path / "two"
        assert main(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
        for name in ("events.jsonl", "marks.csv", "snapshots.jsonl", "manifest.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_replicas_have_independent_seeds(self, tmp_path):
        cfg = write_config(tmp_path, replicas=3)
        out = tmp_path / "ens"
        assert main(["simulate", "--config", str(cfg), "--out", str(out),
                     "--jobs", "1"]) == 0
        dirs = sorted(out.glob("replica_*"))
        assert len(dirs) == 3
        logs = [(d / "events.jsonl").read_bytes() for d in dirs]
        assert logs[0] != logs[1] and logs[1] != logs[2]

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(cfg), "--out", str(out1),
                     "--seed", "99"]) == 0
        assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
        assert ((out1 / "events.jsonl").read_bytes()
                != (out2 / "events.jsonl").read_bytes())


class TestVerify:
    def test_domination_and_bounds_pass(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "rep"
        code = main(["verify", "--config", str(cfg), "--out", str(out),
                     "--suite", "domination,bounds"])
        assert code == 0
        dom = json.loads((out / "domination_report.json").read_text())
        assert dom["passed"] and dom["counting_identity"]
        bounds = json.loads((out / "bounds_report.json").read_text())
        assert bounds["passed"]

    def test_gronwall_suite(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "rep"
        assert main(["verify", "--config", str(cfg), "--out", str(out),
                     "--suite", "gronwall"]) == 0
        rep = json.loads((out / "gronwall_report.json").read_text())
        assert rep["passed"]
        assert rep["bound_value"] >= rep["measured_value"]

    def test_cadlag_suite(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "rep"
        assert main(["verify", "--config", str(cfg), "--out", str(out),
                     "--suite", "cadlag"]) == 0

    def test_unknown_suite_exit_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        code = main(["verify", "--config", str(cfg), "--out", str(tmp_path / "r"),
                     "--suite", "nonsense"])
        assert code == 2
        assert "unknown suite" in capsys.readouterr().err

    def test_failing_suite_exit_1(self, tmp_path, capsys):
        # misdeclared diffusion Lipschitz constant: bounds suite must fail
        cfg = write_config(
            tmp_path,
            coefficients={
                "single": {"kind": "zero", "params": []},
                "pair": {"kind": "zero", "params": []},
                "diffusion": {"kind": "constant", "params": [1.0]},
                "radius": 1.0,
            },
        )
        data = json.loads(cfg.read_text())
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(data))
        import bdspin.cli as cli_mod
        from bdspin.spin_sde import PairDiffusion
        import dataclasses

        orig = cli_mod.check_drift_diffusion_bounds

        def misdeclared(coeffs, **kwargs):
            bad = dataclasses.replace(
                coeffs, diffusion=dataclasses.replace(coeffs.diffusion, lipschitz=0.01))
            return orig(bad, **kwargs)

        cli_mod.check_drift_diffusion_bounds = misdeclared
        try:
            code = main(["verify", "--config", str(path), "--out",
                         str(tmp_path / "r"), "--suite", "bounds"])
        finally:
            cli_mod.check_drift_diffusion_bounds = orig
        assert code == 1
        assert "witness" in capsys.readouterr().err


class TestEmitPlotdata:
    def make_observables(self, tmp_path, specs):
        path = tmp_path / "obs.json"
        path.write_text(json.dumps(specs))
        return path

    def test_count_series_on_pure_death(self, tmp_path):
        cfg = write_config(
            tmp_path,
            kernel={"variant": "constant", "z": 0.0},
            initial_configuration={"kind": "poisson", "intensity": 2.0},
            death_rate=2.0,
            horizon=1.0,
        )
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        obs = self.make_observables(tmp_path, [
            {"name": "population", "kind": "count",
             "box": {"lo": [0.0, 0.0], "hi": [4.0, 4.0]}},
        ])
        plots = tmp_path / "plots"
        assert main(["emit-plotdata", "--artifacts", str(out),
                     "--observables", str(obs), "--out", str(plots)]) == 0
        rows = (plots / "population.csv").read_text().strip().splitlines()[1:]
        values = [float(r.split(",")[3]) for r in rows]
        # pure death: the population series is nonincreasing
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[0] > values[-1]

    def test_empty_spec_exit_0(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        obs = self.make_observables(tmp_path, [])
        assert main(["emit-plotdata", "--artifacts", str(out),
                     "--observables", str(obs), "--out", str(tmp_path / "p")]) == 0

    def test_missing_artifacts_exit_2(self, tmp_path):
        obs = self.make_observables(tmp_path, [
            {"name": "x", "kind": "count", "box": {"lo": [0, 0], "hi": [1, 1]}},
        ])
        code = main(["emit-plotdata", "--artifacts", str(tmp_path / "nope"),
                     "--observables", str(obs), "--out", str(tmp_path / "p")])
        assert code == 2

    def test_ensemble_aggregate_rows_match_grid(self, tmp_path):
        cfg = write_config(tmp_path, replicas=3, horizon=0.25)
        out = tmp_path / "ens"
        assert main(["simulate", "--config", str(cfg), "--out", str(out),
                     "--jobs", "1"]) == 0
        obs = self.make_observables(tmp_path, [
            {"name": "pop", "kind": "count",
             "box": {"lo": [0.0, 0.0], "hi": [4.0, 4.0]}},
        ])
        plots = tmp_path / "plots"
        assert main(["emit-plotdata", "--artifacts", str(out),
                     "--observables", str(obs), "--out", str(plots)]) == 0
        agg = (plots / "pop_aggregate.csv").read_text().strip().splitlines()
        # aggregate rows cover the shared dt lattice: horizon/dt + 1 points
        assert len(agg) - 1 == int(0.25 / 0.03125) + 1
