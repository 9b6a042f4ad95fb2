import json
import math
import time

import numpy as np
import pytest

from stein_sampler import harness, samplers
from stein_sampler.errors import ConfigError, ParseError, SteinSamplerError
from stein_sampler.harness import RunRecord, SearchSpace, SweepConfig

QUICK = {
    "stein_mpmc": {"epochs": 30, "hidden": 8, "layers": 1},
    "svgd": {"iterations": 50},
    "stein_points": {"inner_iterations": 20, "restarts": 3},
}


def quick_config(**kw):
    kw.setdefault("method_configs", QUICK)
    return SweepConfig(**kw)


class TestSweepConfig:
    def test_default_n_values(self):
        assert SweepConfig().n_values == (20, 60, 100, 140, 180, 220, 260, 300, 340, 380, 420, 460, 500)

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            SweepConfig.from_dict({"target": "beta_product_2d", "epochs": 5})
        assert info.value.key == "epochs"

    def test_unknown_method_option(self):
        with pytest.raises(ConfigError) as info:
            SweepConfig.from_dict({"svgd": {"step": 0.1}})
        assert info.value.key == "svgd.step"

    @pytest.mark.parametrize("ns", [[], [1, 5], [20, 20], [60, 20]])
    def test_n_values_strictly_increasing(self, ns):
        with pytest.raises(ConfigError):
            SweepConfig(n_values=ns)

    def test_methods(self):
        with pytest.raises(ConfigError):
            SweepConfig(methods=[])
        with pytest.raises(ConfigError):
            SweepConfig(methods=["mcmc"])

    def test_json_round_trip(self, tmp_path):
        cfg = quick_config(target={"target": "beta_product", "alphas": [2, 2], "betas": [4, 4]}, n_values=[5, 9])
        path = tmp_path / "c.json"
        path.write_text(cfg.to_json())
        again = SweepConfig.load(path)
        assert again == cfg and again.to_json() == cfg.to_json()
        assert json.loads(cfg.to_json()) == cfg.to_dict()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            SweepConfig.load(tmp_path / "nope.json")


class TestRNG:
    def test_cell_streams_differ_and_repeat(self):
        a = harness.cell_rng(0, "iid", 20, 0).random(4)
        assert np.array_equal(a, harness.cell_rng(0, "iid", 20, 0).random(4))
        for other in [(1, "iid", 20, 0), (0, "svgd", 20, 0), (0, "iid", 60, 0), (0, "iid", 20, 1)]:
            assert not np.array_equal(a, harness.cell_rng(*other).random(4))


class TestRunSweep:
    def test_cell_count(self):
        records = harness.run_sweep(SweepConfig(methods=["iid"], n_values=[20, 60], seeds=2))
        assert len(records) == 4
        assert {r.key for r in records} == {("iid", n, s) for n in (20, 60) for s in (0, 1)}
        assert all(r.ksd >= 0 and r.status == "ok" for r in records)

    def test_reproducible(self, tmp_path):
        cfg = quick_config(n_values=[5, 8], seeds=2)
        a = harness.run_sweep(cfg, tmp_path / "a.csv", record_timings=False)
        b = harness.run_sweep(cfg, tmp_path / "b.csv", record_timings=False)
        assert [(r.key, r.ksd, r.bandwidth) for r in a] == [(r.key, r.ksd, r.bandwidth) for r in b]
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_streams_independent_of_other_methods(self):
        alone = harness.run_sweep(quick_config(methods=["svgd"], n_values=[6, 9]))
        mixed = harness.run_sweep(quick_config(methods=["iid", "svgd", "stein_mpmc"], n_values=[6, 9]))
        ours = [r for r in mixed if r.method == "svgd"]
        assert [(r.key, r.ksd) for r in alone] == [(r.key, r.ksd) for r in ours]

    def test_stein_points_single_sequential_run(self):
        cfg = quick_config(methods=["stein_points"], n_values=[3, 7], seeds=1, master_seed=4)
        records = harness.run_sweep(cfg)
        direct = samplers.stein_points(
            cfg.density(), 7, cfg.method_config("stein_points"),
            harness.cell_rng(4, "stein_points", "sequential", 0), checkpoints=[3, 7],
        )
        assert [r.ksd for r in records] == [direct.trace[3], direct.trace[7]]

    def test_failed_cell_is_recorded(self):
        cfg = SweepConfig(methods=["svgd", "iid"], n_values=[4], seeds=1, method_configs={"svgd": {"step_size": 1e300, "iterations": 3}})
        with np.errstate(all="ignore"):
            records = harness.run_sweep(cfg)
        bad = [r for r in records if r.method == "svgd"]
        assert bad[0].status.startswith("error: ") and math.isnan(bad[0].ksd)
        assert [r.status for r in records if r.method == "iid"] == ["ok"]

    def test_wall_times(self):
        cfg = SweepConfig(methods=["svgd", "stein_points"], n_values=[10, 20], seeds=1,
                          method_configs={"svgd": {"iterations": 600}, "stein_points": {"inner_iterations": 100}})
        start = time.perf_counter()
        records = harness.run_sweep(cfg)
        total = time.perf_counter() - start
        cells = sum(r.walltime_s for r in records)
        assert all(r.walltime_s > 0 for r in records)
        assert cells <= total
        # everything outside the timed sampler calls is a handful of small KSD evaluations
        assert total <= 1.05 * cells + 0.25

    def test_incremental_append_and_canonical_rewrite(self, tmp_path):
        cfg = quick_config(methods=["iid", "svgd"], n_values=[5, 6], seeds=1)
        path = tmp_path / "r.csv"
        seen = []

        def watch(r):
            seen.append(len(harness.read_results(path)))

        harness.run_sweep(cfg, path, on_record=watch)
        assert seen == list(range(1, 5))
        assert [r.key for r in harness.read_results(path)] == [("iid", 5, 0), ("iid", 6, 0), ("svgd", 5, 0), ("svgd", 6, 0)]

    def test_resume_skips_finished_cells(self, tmp_path):
        cfg = quick_config(methods=["iid", "svgd"], n_values=[5, 6], seeds=1)
        path = tmp_path / "r.csv"
        full = harness.run_sweep(cfg, path, record_timings=False)
        ran = []
        again = harness.run_sweep(cfg, path, record_timings=False, resume=True, on_record=ran.append)
        assert ran == [] and [r.ksd for r in again] == [r.ksd for r in full]

    def test_workers_do_not_change_results(self, tmp_path):
        cfg = quick_config(methods=["iid", "svgd", "stein_points"], n_values=[5, 7], seeds=2)
        harness.run_sweep(cfg, tmp_path / "1.csv", workers=1, record_timings=False)
        harness.run_sweep(cfg, tmp_path / "2.csv", workers=2, record_timings=False)
        assert (tmp_path / "1.csv").read_bytes() == (tmp_path / "2.csv").read_bytes()


def random_record(rng, i):
    return RunRecord(
        method=str(rng.choice(harness.METHODS)), target="gaussian_mixture_2d", N=int(rng.integers(2, 500)),
        seed=i, ksd=float(rng.exponential() * 10.0 ** rng.integers(-8, 3)), bandwidth=float(rng.uniform(1e-3, 5)),
        walltime_s=float(rng.exponential()), hparams_json=json.dumps({"lr": float(rng.uniform())}),
        config_hash="%040x" % int(rng.integers(2**62)), status="ok" if i % 7 else 'error: X: "quoted", comma',
    )


class TestResultFiles:
    def test_empty_is_header_only(self, tmp_path):
        harness.write_results([], tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text() == ",".join(harness.RESULT_COLUMNS) + "\n"
        assert harness.read_results(tmp_path / "r.csv") == []

    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        records = [random_record(rng, i) for i in range(100)]
        harness.write_results(records, tmp_path / "r.csv")
        assert harness.read_results(tmp_path / "r.csv") == records

    def test_unknown_column(self, tmp_path):
        (tmp_path / "r.csv").write_text(",".join(harness.RESULT_COLUMNS) + ",extra\n")
        with pytest.raises(ParseError, match="extra"):
            harness.read_results(tmp_path / "r.csv")

    def test_malformed_row_reports_line(self, tmp_path):
        rng = np.random.default_rng(1)
        harness.write_results([random_record(rng, i) for i in range(1, 4)], tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        lines[2] = lines[2].replace(",ok", ",ok,surplus")
        (tmp_path / "r.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as info:
            harness.read_results(tmp_path / "r.csv")
        assert info.value.line == 3

    def test_bad_number_reports_line(self, tmp_path):
        harness.write_results([random_record(np.random.default_rng(2), 1)], tmp_path / "r.csv")
        text = (tmp_path / "r.csv").read_text().splitlines()
        fields = text[1].split(",")
        fields[4] = "abc"
        (tmp_path / "r.csv").write_text(text[0] + "\n" + ",".join(fields) + "\n")
        with pytest.raises(ParseError, match="ksd") as info:
            harness.read_results(tmp_path / "r.csv")
        assert info.value.line == 2

    def test_points_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(13, 3)) * 10.0 ** rng.integers(-5, 5, size=(13, 3))
        harness.write_points(x, tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_text().splitlines()[0] == "x1,x2,x3"
        assert harness.read_points(tmp_path / "p.csv").tobytes() == x.tobytes()

    @pytest.mark.parametrize("text", ["", "x1,x2\n", "a,b\n1,2\n", "x1,x2\n1\n", "x1,x2\n1,nan\n"])
    def test_bad_point_files(self, tmp_path, text):
        (tmp_path / "p.csv").write_text(text)
        with pytest.raises(ParseError):
            harness.read_points(tmp_path / "p.csv")


class TestRandomSearch:
    def test_log_uniform_lr(self, rng):
        draws = np.array([SearchSpace().sample(rng)["lr"] for _ in range(10_000)])
        assert abs(np.mean((draws >= 1e-4) & (draws <= 1e-3)) - 0.5) < 0.02
        assert draws.min() >= 1e-4 and draws.max() <= 1e-2

    def test_discrete_draws(self, rng):
        draws = [SearchSpace().sample(rng) for _ in range(2000)]
        assert {d["hidden"] for d in draws} == {32, 64, 128, 256}
        assert {d["layers"] for d in draws} == {1, 2, 3, 4, 5}
        wd = np.array([d["weight_decay"] for d in draws])
        assert wd.min() >= 1e-6 and wd.max() <= 1e-2

    def test_single_trial(self):
        space = SearchSpace(trials=1, epochs=5, hidden=(8,), layers=(1, 1))
        best, trials = harness.random_search(space, "gaussian_mixture_2d", 10, np.random.default_rng(0))
        assert len(trials) == 1 and best == trials[0].hparams

    def test_winner_is_argmin(self):
        space = SearchSpace(trials=4, epochs=10, hidden=(8, 16), layers=(1, 2))
        best, trials = harness.random_search(space, "gaussian_mixture_2d", 10, np.random.default_rng(1))
        ok = [t for t in trials if t.status == "ok"]
        assert best == min(ok, key=lambda t: t.ksd).hparams

    def test_all_diverged(self, monkeypatch):
        def boom(*a, **k):
            raise samplers.DivergenceError("boom", step=0)

        monkeypatch.setattr(harness, "stein_mpmc", boom)
        with pytest.raises(SteinSamplerError):
            harness.random_search(SearchSpace(trials=2, epochs=1), "gaussian_mixture_2d", 10, np.random.default_rng(0))

    def test_space_validation(self):
        with pytest.raises(ConfigError):
            SearchSpace(trials=0)
        with pytest.raises(ConfigError):
            SearchSpace(lr=(0.0, 1e-2))
