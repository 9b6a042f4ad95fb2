import json

import numpy as np
import pytest

from stein_sampler import checkpoint, cli, harness

SUBCOMMANDS = ["sweep", "train", "ksd", "plot", "search"]


@pytest.fixture
def two_points(tmp_path):
    p = tmp_path / "two.csv"
    p.write_text("x1,x2\n0,0\n1,0\n")
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestKsd:
    def test_fixed_bandwidth(self, capsys, two_points):
        code, out, _ = run(capsys, "ksd", two_points, "--target", "standard_normal", "--bandwidth", "1.0")
        assert code == 0
        assert out.splitlines()[0] == "ksd 1.11803398875"

    def test_median_bandwidth(self, capsys, two_points):
        code, out, _ = run(capsys, "ksd", two_points, "--target", "standard_normal", "--bandwidth", "median")
        assert code == 0 and out.splitlines()[1] == "bandwidth 0.674625535622"

    def test_inline_target(self, capsys, two_points):
        spec = json.dumps({"target": "gaussian_mixture", "weights": [1.0], "means": [[0, 0]], "covs": [[[1, 0], [0, 1]]]})
        code, out, _ = run(capsys, "ksd", two_points, "--target", spec, "--bandwidth", "1")
        assert code == 0 and "1.11803398875" in out

    def test_empty_csv(self, capsys, tmp_path):
        (tmp_path / "e.csv").write_text("")
        assert run(capsys, "ksd", tmp_path / "e.csv", "--target", "standard_normal")[0] == 2

    def test_dimension_mismatch(self, capsys, tmp_path):
        (tmp_path / "p.csv").write_text("x1,x2,x3\n0,0,0\n1,0,0\n")
        assert run(capsys, "ksd", tmp_path / "p.csv", "--target", "standard_normal")[0] == 2

    def test_outside_support(self, capsys, two_points):
        code, _, err = run(capsys, "ksd", two_points, "--target", "beta_product_2d")
        assert code == 2 and "coordinate" in err

    def test_bad_target(self, capsys, two_points):
        assert run(capsys, "ksd", two_points, "--target", "banana")[0] == 2


class TestSweep:
    def test_happy_path_and_override(self, capsys, tmp_path):
        code, _, _ = run(capsys, "sweep", "--methods", "iid", "--n", "20", "--seeds", "1", "--out", tmp_path / "res")
        assert code == 0
        records = harness.read_results(tmp_path / "res" / "results.csv")
        assert len(records) == 1 and records[0].key == ("iid", 20, 0)
        assert (tmp_path / "res" / "sweep.log").exists()

    def test_config_file(self, capsys, tmp_path):
        cfg = {"target": "beta_product_2d", "methods": ["iid", "svgd"], "n_values": [5, 10], "seeds": 2,
               "svgd": {"iterations": 20}, "output_dir": str(tmp_path / "o")}
        (tmp_path / "gm.json").write_text(json.dumps(cfg))
        assert run(capsys, "sweep", "--config", tmp_path / "gm.json")[0] == 0
        assert len(harness.read_results(tmp_path / "o" / "results.csv")) == 8

    def test_missing_config(self, capsys, tmp_path):
        code, _, err = run(capsys, "sweep", "--config", tmp_path / "nope.json")
        assert code == 2 and "nope.json" in err

    def test_bad_key(self, capsys, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"methods": ["iid"], "n_value": [5]}))
        code, _, err = run(capsys, "sweep", "--config", tmp_path / "c.json")
        assert code == 2 and "n_value" in err

    def test_failed_cells_exit_nonzero(self, capsys, tmp_path):
        cfg = {"methods": ["svgd"], "n_values": [4], "seeds": 1, "svgd": {"step_size": 1e300, "iterations": 3}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        with np.errstate(all="ignore"):
            code, _, err = run(capsys, "sweep", "--config", tmp_path / "c.json", "--out", tmp_path / "o")
        assert code == 1 and "svgd N=4 seed=0" in err

    def test_seed_controls_results(self, capsys, tmp_path):
        for name, seed in (("a", 1), ("b", 1), ("c", 2)):
            run(capsys, "sweep", "--methods", "iid", "--n", "10", "--seeds", "2", "--seed", seed, "--out", tmp_path / name)
        read = lambda n: (tmp_path / n / "results.csv").read_bytes()
        assert read("a") == read("b") != read("c")

    def test_timings_flag(self, capsys, tmp_path):
        run(capsys, "sweep", "--methods", "iid", "--n", "10", "--seeds", "1", "--out", tmp_path / "t", "--timings-in-results")
        (rec,) = harness.read_results(tmp_path / "t" / "results.csv")
        assert rec.walltime_s is not None and rec.walltime_s > 0


def write_results(path, methods=("iid",), ns=(20, 60)):
    recs = [
        harness.RunRecord(m, "gm", n, s, 0.5 / (n ** 0.5) * (1 + i + 0.1 * s), 1.0, 0.1, "{}", "h")
        for i, m in enumerate(methods) for n in ns for s in range(3)
    ]
    harness.write_results(recs, path)


class TestPlot:
    def test_one_polyline_per_method(self, capsys, tmp_path):
        write_results(tmp_path / "r.csv", methods=("iid", "svgd"))
        assert run(capsys, "plot", tmp_path / "r.csv", "--out", tmp_path / "p.svg")[0] == 0
        svg = (tmp_path / "p.svg").read_text()
        assert svg.count("<polyline") == 2 and svg.count("<circle") == 12
        assert 'data-method="iid"' in svg and 'data-method="svgd"' in svg

    def test_deterministic_and_ticks(self, capsys, tmp_path):
        write_results(tmp_path / "r.csv")
        run(capsys, "plot", tmp_path / "r.csv", "--out", tmp_path / "a.svg")
        run(capsys, "plot", tmp_path / "r.csv", "--out", tmp_path / "b.svg")
        a = (tmp_path / "a.svg").read_bytes()
        assert a == (tmp_path / "b.svg").read_bytes()
        assert b'class="xtick"' in a and b">20</text>" in a and b">60</text>" in a
        assert b"log scale" in a

    def test_no_successes(self, capsys, tmp_path):
        harness.write_results([], tmp_path / "r.csv")
        assert run(capsys, "plot", tmp_path / "r.csv", "--out", tmp_path / "p.svg")[0] == 2

    def test_missing_file(self, capsys, tmp_path):
        assert run(capsys, "plot", tmp_path / "none.csv")[0] == 2


class TestSearch:
    def test_single_trial(self, capsys, tmp_path):
        code, out, _ = run(capsys, "search", "--trials", "1", "--epochs", "3", "--n", "10", "--out", tmp_path / "t.csv")
        assert code == 0
        best = json.loads(out)
        rows = (tmp_path / "t.csv").read_text().splitlines()
        assert len(rows) == 2
        assert set(best) == {"lr", "hidden", "layers", "weight_decay"}
        assert int(rows[1].split(",")[3]) == best["hidden"]

    def test_winner_and_rows(self, capsys, tmp_path):
        code, out, _ = run(capsys, "search", "--trials", "3", "--epochs", "3", "--n", "10", "--out", tmp_path / "t.csv", "--seed", "5")
        best = json.loads(out)
        rows = [r.split(",") for r in (tmp_path / "t.csv").read_text().splitlines()[1:]]
        assert len(rows) == 3
        ok = [r for r in rows if r[-1] == "ok"]
        winner = [r for r in ok if int(r[3]) == best["hidden"] and int(r[4]) == best["layers"] and float(r[2]) == best["lr"]]
        assert winner and all(float(winner[0][6]) <= float(r[6]) for r in ok)

    def test_per_cell_tuning(self, capsys, tmp_path):
        code, out, _ = run(capsys, "search", "--trials", "2", "--epochs", "3", "--n", "8,12", "--out", tmp_path / "t.csv")
        assert code == 0
        winners = json.loads(out)
        assert set(winners) == {"8", "12"}
        rows = [r.split(",") for r in (tmp_path / "t.csv").read_text().splitlines()[1:]]
        assert [r[1] for r in rows] == ["8", "8", "12", "12"]
        # the N=12 search is the same as running it alone
        code, alone, _ = run(capsys, "search", "--trials", "2", "--epochs", "3", "--n", "12")
        assert json.loads(alone) == winners["12"]

    def test_retrain_winner(self, capsys, tmp_path):
        code, out, err = run(
            capsys, "search", "--trials", "1", "--epochs", "3", "--n", "10",
            "--retrain-epochs", "5", "--retrain-dir", tmp_path / "pts",
        )
        assert code == 0
        assert "retrained N=10 epochs=5: ksd" in err
        assert len((tmp_path / "pts" / "points_N10.csv").read_text().splitlines()) == 11


class TestTrain:
    def test_writes_points_and_checkpoint(self, capsys, tmp_path):
        code, out, _ = run(
            capsys, "train", "--target", "beta_product_2d", "--n", "12", "--epochs", "20", "--hidden", "8",
            "--layers", "1", "--out", tmp_path / "p.csv", "--checkpoint", tmp_path / "m.ckpt", "--seed", "3",
        )
        assert code == 0 and out.startswith("ksd ")
        pts = harness.read_points(tmp_path / "p.csv")
        assert pts.shape == (12, 2) and ((pts > 0) & (pts < 1)).all()
        params, cfg = checkpoint.load(tmp_path / "m.ckpt")
        assert cfg.hidden == 8 and cfg.squash == "logistic"


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help(capsys, sub):
    with pytest.raises(SystemExit) as info:
        cli.main([sub, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--seed", "--workers", "--verbose"):
        assert flag in text
    parser = cli.build_parser()
    sub_parser = parser._subparsers._group_actions[0].choices[sub]
    for action in sub_parser._actions:
        for opt in action.option_strings:
            assert opt in text


def test_global_flags_before_subcommand(capsys, two_points):
    code, out, _ = run(capsys, "--seed", "4", "--workers", "1", "ksd", two_points, "--target", "standard_normal", "--bandwidth", "1")
    assert code == 0 and "1.11803398875" in out


def test_log_level_from_environment(capsys, monkeypatch, two_points):
    monkeypatch.setenv(cli.LOG_ENV, "DEBUG")
    run(capsys, "ksd", two_points, "--target", "standard_normal")
    assert cli.log.handlers[0].level == 10
