import csv
import json

import numpy as np
import pytest

from latmg.cli import BENCH_COLUMNS, HISTORY_COLUMNS, main, worker_count
from latmg.hierarchy import build_hierarchy
from latmg.voxgeom import load_grid


@pytest.fixture
def cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run_json(capsys, argv):
    code = main(argv)
    return code, json.loads(capsys.readouterr().out)


def test_gen_then_homogenize_thermal(cwd, capsys):
    code, info = run_json(capsys, ["gen", "gyroid", "16", "--vf", "0.3"])
    assert code == 0 and (cwd / "gyroid16.json").exists() and (cwd / "gyroid16.raw").exists()
    assert abs(info["volume_fraction"] - 0.3) < 0.01
    code, out = run_json(capsys, ["homogenize", "gyroid16", "--physics", "thermal", "--tol", "1e-6"])
    assert code == 0 and out["solve"]["converged"]
    d = np.diag(out["tensor"])
    assert np.all(d > 0) and np.all(d <= 0.3)


def test_homogenize_solid_elastic(cwd, capsys):
    main(["gen", "solid", "8"])
    capsys.readouterr()
    code, out = run_json(capsys, ["homogenize", "solid8", "--tol", "1e-8"])
    C = np.array(out["tensor"])
    nu = 0.3
    c11 = (1 - nu) / ((1 + nu) * (1 - 2 * nu))
    assert code == 0
    assert C[0, 0] == pytest.approx(c11, abs=1e-6)
    assert C[3, 3] == pytest.approx(1 / (2 * (1 + nu)), abs=1e-6)
    assert out["moduli"]["E"] == pytest.approx(1.0, abs=1e-6)


def test_output_file_and_warm_start_roundtrip(cwd, capsys):
    main(["gen", "random", "8", "--vf", "0.6", "--seed", "3"])
    capsys.readouterr()
    assert main(["homogenize", "random8", "--physics", "thermal", "--levels", "2", "--tol", "1e-8",
                 "--save-field", "u.bin", "-o", "res.json"]) == 0
    first = json.loads((cwd / "res.json").read_text())
    nodes = build_hierarchy(load_grid(cwd / "random8"), 2)[1].num_nodes
    assert first["solve"]["converged"]
    assert (cwd / "u.bin").stat().st_size == 16 + 4 * nodes * 1 * 3
    with pytest.warns(UserWarning):
        code = main(["homogenize", "random8", "--physics", "thermal", "--levels", "2", "--tol", "1e-6",
                     "--warm-start", "u.bin", "-o", "warm.json"])
    warm = json.loads((cwd / "warm.json").read_text())
    assert code == 0 and warm["config"]["init"] == "file"
    assert warm["solve"]["history"][0] < 1e-5
    assert warm["solve"]["cycles"] <= 1


def test_fmg_init_and_per_level_iters(cwd, capsys):
    main(["gen", "gyroid", "16"])
    capsys.readouterr()
    code, out = run_json(capsys, ["homogenize", "gyroid16", "--init", "fmg", "--iters", "2,2,2",
                                  "--levels", "3"])
    assert code == 0 and out["config"]["init"] == "fmg"
    assert main(["homogenize", "gyroid16", "--iters", "2,2", "--levels", "3"]) == 2


def test_exit_codes(cwd, capsys):
    assert main(["homogenize", "missing"]) == 2
    main(["gen", "gyroid", "16"])
    capsys.readouterr()
    assert main(["homogenize", "gyroid16", "--max-cycles", "1", "--tol", "1e-12"]) == 3
    assert main(["homogenize", "gyroid16", "--omega", "2.5"]) == 2
    (cwd / "bad.json").write_text("{not json")
    assert main(["homogenize", "bad"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["homogenize", "gyroid16", "--schedule", "zigzag"])
    assert exc.value.code == 2


def test_bench_csv(cwd, capsys):
    code = main(["bench", "--n", "8", "--count", "2", "--physics", "thermal", "--cycles", "1",
                 "--schedules", "v,w,half_v", "-o", "bench.csv"])
    assert code == 0
    with open(cwd / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == BENCH_COLUMNS
    assert len(rows) == 6
    assert {r["schedule"] for r in rows} == {"v", "w", "half_v"}
    for r in rows:
        assert float(r["r_final"]) < float(r["r_initial"])


def test_bench_suite_directory(cwd, capsys):
    (cwd / "suite").mkdir()
    main(["gen", "gyroid", "8", "-o", "suite/a"])
    main(["gen", "octet", "8", "--radius", "0.12", "-o", "suite/b"])
    capsys.readouterr()
    assert main(["bench", "--suite", "suite", "--cycles", "1", "--schedules", "v", "-o", "b.csv"]) == 0
    with open(cwd / "b.csv") as fh:
        assert [r["geometry"] for r in csv.DictReader(fh)] == ["a", "b"]
    assert main(["bench", "--suite", "nowhere"]) == 2


def test_oracle_dense_and_pcg(cwd, capsys):
    main(["gen", "random", "4", "--vf", "0.6"])
    capsys.readouterr()
    code, dense = run_json(capsys, ["oracle", "random4", "--physics", "thermal"])
    assert code == 0 and dense["residual"] <= 1e-10
    code, pcg = run_json(capsys, ["oracle", "random4", "--physics", "thermal", "--method", "pcg"])
    assert code == 0
    assert np.allclose(pcg["tensor"], dense["tensor"], rtol=1e-8, atol=1e-12)
    assert main(["oracle", "random4", "--cap", "10"]) == 2


def test_hierarchy_dump(cwd, capsys):
    main(["gen", "solid", "16"])
    capsys.readouterr()
    code, out = run_json(capsys, ["hierarchy", "solid16", "--levels", "3", "--full"])
    assert code == 0 and out["resolutions"] == [16, 8, 4]
    assert out["levels"][2]["elements"] == 64 and len(out["topology"]) == 3


def test_optimize_small(cwd, capsys):
    code, summary = run_json(capsys, ["optimize", "--random", "--n", "8", "--max-iter", "3", "--levels", "2",
                                      "--stop-tol", "0", "-o", "opt"])
    assert code == 0 and summary["iterations"] == 3
    with open(cwd / "opt" / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == HISTORY_COLUMNS and len(rows) == 3
    assert all(abs(float(r["vf"]) - 0.3) <= 1e-3 for r in rows)
    design = load_grid(cwd / "opt" / "design")
    assert design.kind == "density" and design.resolution == 8
    assert json.loads((cwd / "opt" / "summary.json").read_text()) == summary


def test_common_flags_after_subcommand(cwd, capsys):
    main(["gen", "random", "4", "--seed", "5", "-o", "r5"])
    main(["gen", "random", "4", "--seed", "5", "-o", "r5b"])
    assert np.array_equal(load_grid(cwd / "r5").values, load_grid(cwd / "r5b").values)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("LATMG_THREADS", "1")
    assert worker_count(8) == 1
    monkeypatch.delenv("LATMG_THREADS")
    assert 1 <= worker_count(None) <= 8
