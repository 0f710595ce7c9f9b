import json

import pytest

from isacmarket.cli import main
from isacmarket.harness import RESULT_COLUMNS, load_scenario, read_results


def run_cli(*argv):
    return main(list(argv))


def gen_scenario(tmp_path, name="sc.json", *extra):
    path = tmp_path / name
    assert run_cli("gen", "--n-mus", "6", "--seed", "3",
                   "--out", str(path), *extra) == 0
    return path


class TestGen:
    def test_writes_requested_station_count(self, tmp_path):
        path = tmp_path / "sc.json"
        assert run_cli("gen", "--n-mus", "50", "--n-bss", "5",
                       "--out", str(path)) == 0
        sc = load_scenario(str(path))
        assert sc.n_bss == 5 and sc.n_mus == 50

    def test_invalid_range_exits_with_message(self, tmp_path, capsys):
        code = run_cli("gen", "--n-mus", "0", "--out",
                       str(tmp_path / "x.json"))
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_same_seed_gives_identical_file_bytes(self, tmp_path):
        a = gen_scenario(tmp_path, "a.json")
        b = gen_scenario(tmp_path, "b.json")
        assert a.read_bytes() == b.read_bytes()

    def test_seed_falls_back_to_environment(self, tmp_path, monkeypatch):
        explicit = tmp_path / "explicit.json"
        assert run_cli("gen", "--n-mus", "6", "--seed", "11",
                       "--out", str(explicit)) == 0
        monkeypatch.setenv("ISACMARKET_SEED", "11")
        from_env = tmp_path / "env.json"
        assert run_cli("gen", "--n-mus", "6", "--out", str(from_env)) == 0
        assert explicit.read_bytes() == from_env.read_bytes()

    def test_config_file_overridden_by_flags(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_mus": 5, "seed": 2, "n_targets": 3}),
                       encoding="utf-8")
        path = tmp_path / "sc.json"
        assert run_cli("gen", "--config", str(cfg), "--n-mus", "7",
                       "--out", str(path)) == 0
        sc = load_scenario(str(path))
        assert sc.n_mus == 7 and sc.seed == 2
        assert len(sc.targets) == 3


class TestRun:
    def test_row_count_and_artifacts(self, tmp_path):
        sc = gen_scenario(tmp_path)
        out = tmp_path / "run"
        assert run_cli("run", "--scenario", str(sc),
                       "--strategies", "frbank,greedy", "--trials", "3",
                       "--out-dir", str(out)) == 0
        rows = read_results(str(out / "results.csv"))
        assert len(rows) == 6
        header = (out / "results.csv").read_text(
            encoding="utf-8").splitlines()[0]
        assert header == ",".join(RESULT_COLUMNS)
        assert (out / "traces" / "frbank.jsonl").exists()
        assert (out / "traces" / "greedy.jsonl").exists()
        assert (out / "contracts" / "frbank.json").exists()
        meta = json.loads((out / "run_meta.json").read_text(encoding="utf-8"))
        assert meta["master_seed"] == 3
        assert "watt_seconds" in meta["ecibc_unit"]
        trace = [json.loads(line) for line in
                 (out / "traces" / "frbank.jsonl").read_text(
                     encoding="utf-8").splitlines()]
        assert [t["trial"] for t in trace] == [0, 1, 2]

    def test_rerun_identical_except_runtime(self, tmp_path):
        sc = gen_scenario(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            assert run_cli("run", "--scenario", str(sc),
                           "--strategies", "con_online,greedy",
                           "--trials", "3", "--out-dir", str(out)) == 0
        rows1 = read_results(str(out1 / "results.csv"))
        rows2 = read_results(str(out2 / "results.csv"))
        for a, b in zip(rows1, rows2):
            for col in RESULT_COLUMNS:
                if col != "rt_ms":
                    assert a[col] == b[col]

    def test_missing_positions_file_exits_two(self, tmp_path, capsys):
        code = run_cli("run", "--eua-bs", str(tmp_path / "nope.csv"),
                       "--eua-users", str(tmp_path / "nope2.csv"),
                       "--n-mus", "4", "--strategies", "greedy",
                       "--trials", "1", "--out-dir", str(tmp_path / "o"))
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_strategy_exits_two(self, tmp_path, capsys):
        sc = gen_scenario(tmp_path)
        code = run_cli("run", "--scenario", str(sc), "--strategies", "nope",
                       "--trials", "1", "--out-dir", str(tmp_path / "o"))
        assert code == 2
        assert "unknown strategy" in capsys.readouterr().err

    def test_zero_trials_exits_two(self, tmp_path):
        sc = gen_scenario(tmp_path)
        assert run_cli("run", "--scenario", str(sc), "--strategies",
                       "greedy", "--trials", "0",
                       "--out-dir", str(tmp_path / "o")) == 2


class TestSweep:
    def test_mu_axis_produces_one_block_per_value(self, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("sweep", "--axis", "n_mus", "--values", "4,6,8",
                       "--strategies", "greedy,con_online", "--trials", "2",
                       "--seed", "1", "--out-dir", str(out)) == 0
        rows = read_results(str(out / "results.csv"))
        assert len(rows) == 3 * 2 * 2
        assert sorted({r["n_mus"] for r in rows}) == [4.0, 6.0, 8.0]
        for v in (4.0, 6.0, 8.0):
            block = [r for r in rows if r["n_mus"] == v]
            assert len(block) == 4

    def test_overbook_axis_tags_rows(self, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("sweep", "--axis", "overbook", "--values", "0,0.2",
                       "--n-mus", "6", "--strategies", "hybrid_o",
                       "--trials", "2", "--seed", "1",
                       "--out-dir", str(out)) == 0
        rows = read_results(str(out / "results.csv"))
        assert sorted({r["overbook"] for r in rows}) == [0.0, 0.2]

    def test_empty_axis_is_a_config_error(self, tmp_path, capsys):
        code = run_cli("sweep", "--axis", "n_mus", "--values", "",
                       "--strategies", "greedy", "--trials", "1",
                       "--out-dir", str(tmp_path / "o"))
        assert code == 2
        assert "empty" in capsys.readouterr().err


class TestVerify:
    def test_desk_scale_run_passes_all_properties(self, tmp_path, capsys):
        sc = gen_scenario(tmp_path)
        assert run_cli("verify", "--scenario", str(sc),
                       "--strategy", "frbank") == 0
        out = capsys.readouterr().out
        for prop in ("individual-rationality", "blocking-pairs",
                     "coalition-stability", "local-pareto"):
            assert f"PASS {prop}" in out
        assert "FAIL" not in out

    def test_empty_book_passes_vacuously(self, tmp_path, capsys):
        path = tmp_path / "sparse.json"
        # participation so low every candidate fails the dispersion gate
        assert run_cli("gen", "--n-mus", "4", "--seed", "1",
                       "--part-range", "0.01", "0.02",
                       "--out", str(path)) == 0
        assert run_cli("verify", "--scenario", str(path),
                       "--strategy", "con_offline") == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_corrupted_contract_file_names_the_constraint(
            self, tmp_path, capsys):
        sc = gen_scenario(tmp_path)
        out = tmp_path / "run"
        assert run_cli("run", "--scenario", str(sc),
                       "--strategies", "frbank", "--trials", "1",
                       "--out-dir", str(out)) == 0
        cpath = out / "contracts" / "frbank.json"
        doc = json.loads(cpath.read_text(encoding="utf-8"))
        assert doc["comm"] or doc["sensing"]
        book = doc["comm"] if doc["comm"] else doc["sensing"]
        book[0]["pay"] = book[0].get("value",
                                     book[0].get("value_max", 1.0)) * 10 + 1e6
        cpath.write_text(json.dumps(doc), encoding="utf-8")
        code = run_cli("verify", "--scenario", str(sc),
                       "--contracts", str(cpath))
        assert code == 1
        found = capsys.readouterr().out
        assert "FAIL contract-audit" in found
        assert "price-cap" in found

    def test_online_only_strategy_rejected(self, tmp_path, capsys):
        sc = gen_scenario(tmp_path)
        assert run_cli("verify", "--scenario", str(sc),
                       "--strategy", "greedy") == 2
        assert "no long-term" in capsys.readouterr().err


class TestReport:
    @pytest.fixture
    def results(self, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("sweep", "--axis", "n_mus", "--values", "4,6",
                       "--strategies", "greedy,con_online", "--trials", "2",
                       "--seed", "1", "--out-dir", str(out)) == 0
        return out / "results.csv"

    def test_renders_summary_and_figures(self, tmp_path, results):
        rep = tmp_path / "rep"
        assert run_cli("report", "--results", str(results),
                       "--out-dir", str(rep)) == 0
        assert (rep / "summary.csv").exists()
        for fname in ("social_welfare", "interactions", "runtime",
                      "demand_supply_ratio", "default_rate"):
            svg = rep / f"{fname}.svg"
            assert svg.exists() and svg.stat().st_size > 0
        header = (rep / "summary.csv").read_text(
            encoding="utf-8").splitlines()[0]
        assert header.startswith("strategy,n_mus,n_trials,")
        assert "social_welfare_mean" in header

    def test_rerender_is_idempotent(self, tmp_path, results):
        rep = tmp_path / "rep"
        before_rows = results.read_bytes()
        assert run_cli("report", "--results", str(results),
                       "--out-dir", str(rep)) == 0
        first = {p.name: p.read_bytes() for p in rep.iterdir()}
        assert run_cli("report", "--results", str(results),
                       "--out-dir", str(rep)) == 0
        second = {p.name: p.read_bytes() for p in rep.iterdir()}
        assert first == second
        assert results.read_bytes() == before_rows

    def test_png_format(self, tmp_path, results):
        rep = tmp_path / "rep"
        assert run_cli("report", "--results", str(results),
                       "--out-dir", str(rep), "--format", "png") == 0
        assert (rep / "social_welfare.png").exists()

    def test_empty_results_rejected(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text(",".join(RESULT_COLUMNS) + "\n", encoding="utf-8")
        assert run_cli("report", "--results", str(empty),
                       "--out-dir", str(tmp_path / "rep")) == 2
        assert "empty" in capsys.readouterr().err
