import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from moco.cli import main
from moco.grid import load_deformation, load_image, read_moco

SMALL = [
    "phantom.size=16",
    "phantom.intensity=1e5",
    "recon.beta=3e6",
    "emtv.outer_iters=5",
    "emtv.bregman_iters=2",
    "bfgs.max_iters=10",
    "multilevel.levels=2",
    "recon.outer_alternations=1",
    "baseline.em_iters=10",
]


def run(*argv):
    return main([str(a) for a in argv])


def test_phantom_cardiac_four_gates(tmp_path, capsys):
    assert run("phantom", "--gates", 4, "--kind", "cardiac", "--out", tmp_path, "phantom.size=32") == 0
    assert len(list(tmp_path.glob("truth_gate*.moco"))) == 4
    assert len(list(tmp_path.glob("truth_def*.moco"))) == 4
    assert (tmp_path / "roi.moco").exists()
    pgm = (tmp_path / "truth_gate0.pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 32\n255\n") and len(pgm) == len(b"P5\n32 32\n255\n") + 32 * 32
    assert (tmp_path / "truth_gate0.pgm.txt").read_text().startswith("min = ")
    assert "4 gates" in capsys.readouterr().out


def test_simulate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("simulate", "--seed", 7, "--out", d, "phantom.size=16") == 0
    for f in sorted(a.glob("data_gate*.moco")):
        assert f.read_bytes() == (b / f.name).read_bytes()
    assert run("simulate", "--seed", 8, "--out", tmp_path / "c", "phantom.size=16") == 0
    assert (a / "data_gate1.moco").read_bytes() != (tmp_path / "c" / "data_gate1.moco").read_bytes()


def test_projector_data_round_trip(tmp_path):
    over = ["phantom.size=16", "operator.kind=projector", "operator.n_angles=12", "operator.n_bins=20"]
    assert run("simulate", "--out", tmp_path, *over) == 0
    grid, arr = read_moco(tmp_path / "data_gate0.moco")
    assert arr.shape == (12, 20)
    assert run("reconstruct", "--method", "em", "--out", tmp_path, *over, "baseline.em_iters=5") == 0


@pytest.mark.parametrize("method", ["em", "emtv", "bregman"])
def test_reconstruct(tmp_path, method):
    assert run("simulate", "--out", tmp_path, *SMALL) == 0
    assert run("reconstruct", "--method", method, "--gate", 1, "--out", tmp_path, *SMALL) == 0
    img = load_image(tmp_path / f"recon_{method}_gate1.moco")
    assert img.values.shape == (16, 16) and img.values.min() >= 0
    rows = list(csv.DictReader(open(tmp_path / f"recon_{method}_gate1_log.csv")))
    assert len(rows) >= 5


def test_register(tmp_path):
    assert run("phantom", "--out", tmp_path, *SMALL) == 0
    assert run("simulate", "--out", tmp_path, *SMALL) == 0
    assert run("register", "--gate", 2, "--out", tmp_path, *SMALL) == 0
    y = load_deformation(tmp_path / "def_gate2.moco")
    assert y.nodal_values.shape == (2, 17, 17)
    assert (tmp_path / "register_gate2_log.csv").read_text().startswith("level,")


def test_mcr_and_metrics(tmp_path, capsys):
    assert run("mcr", "--out", tmp_path, *SMALL) == 0
    out = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["method"] for r in rows] == ["em", "emtv", "affine", "proposed"]
    on_disk = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert float(on_disk[3]["recon_error"]) == pytest.approx(float(rows[3]["recon_error"]), rel=1e-5)
    for name in ("reconstructions.png", "metrics.png", "objective.png", "deformation_last_gate.png",
                 "objective_log.csv", "config_used.cfg", "recon_proposed.pgm", "def_gate2.moco"):
        assert (tmp_path / name).exists(), name
    assert "phantom.size = 16" in (tmp_path / "config_used.cfg").read_text()
    # recompute the proposed row from the stored files
    assert run("phantom", "--out", tmp_path, *SMALL) == 0
    capsys.readouterr()
    defs = [tmp_path / f"def_gate{i}.moco" for i in range(3)]
    assert run("metrics", "--recon", tmp_path / "recon_proposed.moco", "--deformations", *defs,
               "--label", "proposed", "--out", tmp_path) == 0
    again = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))[0]
    assert again["recon_error"] == rows[3]["recon_error"]
    assert again["pme"] == rows[3]["pme"]


def test_mcr_no_figures(tmp_path):
    assert run("mcr", "--no-figures", "--out", tmp_path, *SMALL) == 0
    assert not (tmp_path / "metrics.png").exists()
    assert (tmp_path / "metrics.csv").exists()


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("reconstruct", "--method", "art")
    assert exc.value.code == 1
    assert run("reconstruct", "--out", tmp_path) == 1  # no data files
    assert run("phantom", "--out", tmp_path, "recon.nope=1") == 1
    assert run("phantom", "--config", tmp_path / "missing.cfg", "--out", tmp_path) == 1
    assert run("metrics", "--recon", tmp_path / "missing.moco", "--out", tmp_path) == 1
    assert "moco:" in capsys.readouterr().err


def test_gate_out_of_range_and_shape_mismatch(tmp_path):
    assert run("simulate", "--out", tmp_path, "phantom.size=16") == 0
    assert run("reconstruct", "--gate", 9, "--out", tmp_path, "phantom.size=16") == 1
    assert run("reconstruct", "--out", tmp_path, "phantom.size=32") == 1


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "moco.cli", "phantom", "--out", str(tmp_path), "phantom.size=8"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert np.isfinite(load_image(tmp_path / "truth_gate1.moco").values).all()
