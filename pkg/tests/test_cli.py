import json
import shutil
import subprocess
import sys

import pytest

from cellcount.cli import main
from cellcount.synth import Provenance, read_manifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text("train.epochs = 200\n")
    ds = root / "ds"
    assert main(["--dataset", str(ds), "--config", str(cfg), "synth", "--per-count", "3"]) == 0
    return root, ds, cfg


def run(ws, *argv):
    root, ds, cfg = ws
    return main(["--dataset", str(ds), "--config", str(cfg), *argv])


def test_train_predict_evaluate(workspace, capsys):
    root, ds, _ = workspace
    assert run(workspace, "train", "--kind", "ce") == 0
    assert run(workspace, "train", "--kind", "mse") == 0
    assert run(workspace, "fit-ensemble") == 0
    assert len(list((ds / "models").glob("ce_*.txt"))) == 6
    assert (ds / "models" / "belief.txt").exists()

    rec = next(r for r in read_manifest(ds).test() if r.stain.value == "body" and r.blur == 23)
    capsys.readouterr()
    assert run(workspace, "predict", str(ds / rec.image_path), "--stain", "body", "--blur", "23") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["source"] in ("classifier", "regressor")
    assert isinstance(out["count"], int)

    for arm in ("ce", "mse", "ensemble"):
        assert run(workspace, "evaluate", "--arm", arm) == 0
        doc = json.loads((ds / "reports" / f"evaluate_{arm}.json").read_text())
        assert doc["metrics"]["n"] == 24 * 6


def test_experiment_writes_report(workspace):
    _, ds, _ = workspace
    root, _, cfg = workspace
    assert main(["--dataset", str(ds), "--config", str(cfg), "--seed", "3", "experiment", "--scenario", "exp1"]) == 0
    assert json.loads((ds / "reports" / "exp1_s3.json").read_text())["config"]["rng_seed"] == 3
    assert run(workspace, "experiment", "--scenario", "exp4", "--rounds", "1") == 0
    doc = json.loads((ds / "reports" / "exp4_s0.json").read_text())
    assert set(doc["summary"]) == {"mse", "ce", "ensemble"}


def test_augment_with_formula_file(workspace, tmp_path):
    root, ds, cfg = workspace
    copy = tmp_path / "ds"
    shutil.copytree(ds, copy)
    formulae = tmp_path / "f.txt"
    # two train images per cell, so the second formula can never be realised
    formulae.write_text("# round=1 experiment=2\n23 = 18x(1) + 5x(1)\n23 = 10x(2) + 1x(3)\n")
    assert main(["--dataset", str(copy), "--config", str(cfg), "augment", "--formulae", str(formulae),
                 "--delete", "23", "--per-count", "2"]) == 0
    m = read_manifest(copy, "manifest_da.csv")
    da = [r for r in m.records if r.provenance is Provenance.SYNTH_DA]
    assert len(da) == 12 and 23 in m.train_labels()
    assert all(len(r.donors) == 0 for r in da)  # donors live in the augment log, not the CSV
    log = (copy / "augmented" / "augment_log.csv").read_text().splitlines()
    assert len(log) == 13 and all("23 = 18x(1) + 5x(1)" in ln for ln in log[1:])


def test_exit_codes(workspace, tmp_path, capsys):
    root, ds, cfg = workspace
    # validation failures exit 1
    assert main(["synth"]) == 1
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("nonsense\n")
    assert main(["--dataset", str(ds), "--config", str(bad_cfg), "train", "--kind", "ce"]) == 1
    assert main(["--dataset", str(tmp_path / "nowhere"), "train", "--kind", "ce"]) == 1
    # runtime errors exit 2
    assert run(workspace, "predict", str(tmp_path / "missing.pgm"), "--stain", "nuclei", "--blur", "1") == 2
    assert run(workspace, "augment", "--formulae", "exp2", "--delete", "14,35,57,66,83",
               "--output", "m2.csv") == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cellcount", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "0.1.0" in out.stdout
