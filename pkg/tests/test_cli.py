import json
import subprocess
import sys

import pytest
import yaml

from vmanifold.cli import main
from vmanifold.config import shipped_config

SMOKE = str(shipped_config("smoke"))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = [main([c, "--config", SMOKE, "--output", str(out)])
             for c in ("simulate", "train", "reconstruct", "evaluate", "export-frames", "report")]
    return out, codes


def test_full_pipeline_exits_zero(smoke_run):
    out, codes = smoke_run
    assert codes == [0] * 6
    assert (out / "train" / "V-SToRM_MS" / "checkpoint" / "manifest.json").exists()
    rep = json.loads((out / "evaluate" / "V-SToRM_MS" / "report.json").read_text())
    assert rep["mode"] == "V-SToRM:MS"
    assert (out / "report" / "summary.md").exists()
    assert list((out / "frames" / "V-SToRM_MS").glob("*.png"))


def test_run_records(smoke_run):
    out, _ = smoke_run
    rec = json.loads((out / "train" / "V-SToRM_MS" / "run.json").read_text())
    assert rec["seed"] == 0 and rec["stage"] == "train"
    assert rec["config"]["phantom"]["grid"] == [16, 16, 2]


def test_rerun_is_byte_identical(smoke_run, tmp_path):
    out, _ = smoke_run
    assert main(["simulate", "--config", SMOKE, "--output", str(tmp_path)]) == 0
    assert main(["train", "--config", SMOKE, "--output", str(tmp_path)]) == 0
    for sub in ("simulate/kt", "train/V-SToRM_MS/checkpoint"):
        a, b = out / sub, tmp_path / sub
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), f"{sub}/{n}"


def test_train_without_simulate_exits_3(tmp_path, capsys):
    assert main(["train", "--config", SMOKE, "--output", str(tmp_path)]) == 3
    assert "simulate" in capsys.readouterr().err


def test_evaluate_without_train_exits_3(tmp_path):
    assert main(["simulate", "--config", SMOKE, "--output", str(tmp_path)]) == 0
    assert main(["evaluate", "--config", SMOKE, "--output", str(tmp_path), "--mode", "G-SToRM:MS"]) == 3


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"phantom": {"grid": [16, 16, 4]}, "encoding": {"coil_map_slices": 3}}))
    assert main(["simulate", "--config", str(p), "--output", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "coil_map_slices" in err and "phantom.grid" in err
    assert not (tmp_path / "o").exists()


def test_missing_config_exits_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.yaml")]) == 2


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vmanifold.cli", "train", "--config", SMOKE,
                        "--output", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 3
