import json
import math
import subprocess
import sys

import numpy as np
import pytest

from translator_lab import immersion as imm
from translator_lab.cli import main


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(scope="module")
def grim_problem(tmp_path_factory):
    root = tmp_path_factory.mktemp("grim")
    return write_json(root / "grim_reaper.json",
                      {"domain": [[-1.2, 1.2]], "grid": 801, "V": [0, 1], "boundary": "exact:grim_reaper"})


@pytest.fixture(scope="module")
def grim_patch_file(grim_problem):
    out = grim_problem.parent / "solved"
    assert main(["solve", "--problem", str(grim_problem), "--out", str(out)]) == 0
    return out / "patch.json"


# -- solve ---------------------------------------------------------------------

def test_solve_writes_patch_and_log(grim_patch_file):
    out = grim_patch_file.parent
    log = json.loads((out / "solver_log.json").read_text())
    assert log["converged"] and log["residual"] <= 1e-10
    patch = imm.read_patch(grim_patch_file)
    assert patch.shape == (801,)
    assert json.loads((out / "config.json").read_text())["grid"] == 801


def test_solve_missing_problem(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["solve", "--problem", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_solve_grid_override(grim_problem, tmp_path):
    assert main(["solve", "--problem", str(grim_problem), "--grid", "51", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["grid"] == 51
    assert imm.read_patch(tmp_path / "patch.json").shape == (51,)


def test_solve_non_convergence_exit_code(grim_problem, tmp_path):
    problem = json.loads(grim_problem.read_text())
    problem["solver"] = {"max_iter": 1}
    path = write_json(tmp_path / "p.json", problem)
    assert main(["solve", "--problem", str(path), "--out", str(tmp_path / "o")]) == 1
    assert not json.loads((tmp_path / "o" / "solver_log.json").read_text())["converged"]


def test_solve_rerun_from_resolved_config(grim_problem, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--problem", str(grim_problem), "--grid", "101", "--out", str(first)]) == 0
    assert main(["solve", "--problem", str(first / "config.json"), "--out", str(second)]) == 0
    assert (first / "patch.csv").read_bytes() == (second / "patch.csv").read_bytes()


def test_solve_affine_and_inline_boundaries(tmp_path):
    affine = {"domain": [[0, 1], [-1, 1]], "grid": [11, 21], "V": [0.6, 0, 0.8],
              "boundary": {"affine": {"constant": 0.3, "linear": [[4 / 3, 0.5]]}}}
    assert main(["solve", "--problem", str(write_json(tmp_path / "a.json", affine)),
                 "--out", str(tmp_path / "a")]) == 0
    p = imm.read_patch(tmp_path / "a" / "patch.json")
    X, Y = np.meshgrid(*p.axes, indexing="ij")
    assert np.abs(p.u[..., 0] - (0.3 + 4 / 3 * X + 0.5 * Y)).max() <= 1e-12

    x = np.linspace(-1, 1, 41)
    inline = {"domain": [[-1, 1]], "grid": 41, "V": [0, 1], "boundary": (-np.log(np.cos(x))).tolist()}
    assert main(["solve", "--problem", str(write_json(tmp_path / "i.json", inline)),
                 "--out", str(tmp_path / "i")]) == 0


# -- diagnose ------------------------------------------------------------------

def test_diagnose_grim_reaper(grim_patch_file, tmp_path):
    assert main(["diagnose", "--patch", str(grim_patch_file), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["pass"]
    assert (tmp_path / "report.csv").read_text().startswith("name,anchor")
    assert (tmp_path / "config.json").is_file()


def test_diagnose_variational_checks(grim_patch_file, tmp_path):
    checks = "second_variation,first_variation,stability,minimality"
    assert main(["diagnose", "--patch", str(grim_patch_file), "--checks", checks, "--out", str(tmp_path)]) == 0
    names = [c["name"] for c in json.loads((tmp_path / "report.json").read_text())["checks"]]
    assert names == checks.split(",")


def test_diagnose_check_filter(grim_patch_file, tmp_path):
    assert main(["diagnose", "--patch", str(grim_patch_file), "--checks", "simons,w_identity",
                 "--out", str(tmp_path)]) == 0
    names = {c["name"] for c in json.loads((tmp_path / "report.json").read_text())["checks"]}
    assert names == {"simons", "w_identity"}


def test_diagnose_paraboloid_negative_control(tmp_path):
    axes = (np.linspace(-1, 1, 101),) * 2
    patch = imm.GraphPatch.from_function(lambda x, y: 0.5 * (x * x + y * y), axes, (0, 0, 1.0))
    imm.write_patch(patch, tmp_path / "para.json")
    code = main(["diagnose", "--patch", str(tmp_path / "para.json"), "--assume-translator",
                 "--out", str(tmp_path / "d")])
    assert code == 1
    checks = {c["name"]: c for c in json.loads((tmp_path / "d" / "report.json").read_text())["checks"]}
    assert not checks["DH"]["pass"] and not checks["w_identity"]["pass"]


def test_diagnose_missing_patch(tmp_path):
    assert main(["diagnose", "--patch", str(tmp_path / "none.json")]) == 2


def test_diagnose_reproducible(grim_patch_file, tmp_path):
    for d in ("a", "b"):
        assert main(["diagnose", "--patch", str(grim_patch_file), "--checks", "DH,simons,stability",
                     "--seed", "7", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_config_file_overridden_by_flags(grim_patch_file, tmp_path):
    cfg = write_json(tmp_path / "cfg.json", {"patch": str(grim_patch_file), "checks": "DH", "seed": 3})
    assert main(["diagnose", "--config", str(cfg), "--checks", "dr", "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert resolved["checks"] == ["dr"] and resolved["seed"] == 3


# -- grassmann -----------------------------------------------------------------

def test_grassmann_z(capsys):
    assert main(["grassmann", "--z", "[[1]]"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["theta"][0] == pytest.approx(math.pi / 4, abs=1e-15)
    assert data["v"] == pytest.approx(math.sqrt(2), abs=1e-15)
    assert data["h"] == pytest.approx((math.sqrt(2) / (2 - math.sqrt(2))) ** 1.5, rel=1e-14)


def test_grassmann_thresholds(capsys):
    assert main(["grassmann", "--thresholds"]) == 0
    data = json.loads(capsys.readouterr().out)["thresholds"]
    assert data["v0_digits"].startswith("1.35066702")
    assert data["h_at_v0"] == pytest.approx(3.0, abs=1e-12)


def test_grassmann_identical_frames(capsys):
    frame = "[[1, 0, 0], [0, 1, 0]]"
    assert main(["grassmann", "--frames", frame, frame]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["theta"] == [0.0] and data["w"] == 1.0  # p = min(n, m) = 1


@pytest.mark.parametrize("bad", ["[[1, 2", "[[1, 0], [0]]", "\"text\"", "[[NaN]]"])
def test_grassmann_malformed(bad):
    assert main(["grassmann", "--z", bad]) == 2


# -- growth ---------------------------------------------------------------------

def test_growth_grim_reaper(grim_patch_file, tmp_path):
    assert main(["growth", "--patch", str(grim_patch_file), "--origin", "0,0", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "profile.csv").read_text().splitlines()
    assert rows[0] == "rho,vol,vol_over_rho_n" and len(rows) == 21
    verdict = json.loads((tmp_path / "growth.json").read_text())
    assert verdict["monotone"] and not verdict["truncated"]


def test_growth_truncation_warning(grim_patch_file, tmp_path, capsys):
    main(["growth", "--patch", str(grim_patch_file), "--rho-max", "100", "--out", str(tmp_path)])
    assert "truncated" in capsys.readouterr().err
    assert json.loads((tmp_path / "growth.json").read_text())["truncated"]


def test_growth_flat_line(tmp_path):
    x = np.linspace(-1, 1, 401)
    imm.write_patch(imm.GraphPatch((x,), np.zeros(401), (1.0, 0.0)), tmp_path / "line.json")
    assert main(["growth", "--patch", str(tmp_path / "line.json"), "--origin", "0,0",
                 "--out", str(tmp_path / "g")]) == 0
    ratios = [float(r.split(",")[2]) for r in (tmp_path / "g" / "profile.csv").read_text().splitlines()[1:]]
    assert np.allclose(ratios, 2.0, rtol=0.02)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "translator_lab.cli", "grassmann", "--z", "[[0]]"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["v"] == 1.0
