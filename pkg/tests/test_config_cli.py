import hashlib
import os
import subprocess
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import pytest

from eitqmc.bayes import read_measurements
from eitqmc.cli import main
from eitqmc.config import ConfigError, RunConfig, parse_config, parse_levels, parse_text, validate, with_seed, write_config


def shipped(name):
    return Path(resources.files("eitqmc") / "data" / name)


def test_shipped_configs_parse():
    c1 = parse_config(shipped("exp1.cfg"))
    c2 = parse_config(shipped("exp2.cfg"))
    assert c1.truth == "parametric" and c1.theta == 2.0 and c1.dimension == 20
    assert c2.truth == "inclusion" and c2.theta == 1.3
    assert c1.impedances == (0.005,) * 16


def test_empty_config_gives_defaults():
    assert parse_text("") == RunConfig()
    validate(RunConfig())
    with pytest.raises(ConfigError, match="measurements"):
        validate(RunConfig(), require=("measurements",))


def test_zero_impedance_rejected():
    with pytest.raises(ConfigError, match="sigma_minus"):
        validate(parse_text("contact_impedance = 0"))


def test_problems_carry_line_numbers():
    with pytest.raises(ConfigError) as info:
        parse_text("# c\ntheta = 2\nbogus = 1\nshifts = many\nradius\n", "run.cfg")
    probs = info.value.problems
    assert probs == [
        "run.cfg:3: unknown key 'bogus'",
        "run.cfg:4: cannot parse shifts = 'many'",
        "run.cfg:5: expected 'key = value', got 'radius'",
    ]


def test_all_validation_failures_reported_together():
    with pytest.raises(ConfigError) as info:
        validate(RunConfig(theta=0.5, shifts=0, cbc_p=2.0))
    assert len(info.value.problems) == 3


def test_round_trip():
    cfg = RunConfig(theta=1.3, contact_impedance=(0.01,) * 16, inclusion_center=(1.5, -2.25), levels="10,12")
    assert parse_text(write_config(cfg)) == cfg


def test_levels():
    assert parse_levels("10:14") == (10, 11, 12, 13, 14)
    assert parse_levels("8,12") == (8, 12)


def test_seed_override():
    c = with_seed(RunConfig(), 9)
    assert (c.truth_seed, c.noise_seed, c.shift_seed) == (9, 9, 9)


def test_relative_measurements_path(tmp_path):
    (tmp_path / "m.csv").write_text("x")
    (tmp_path / "run.cfg").write_text("measurements = m.csv\n")
    assert parse_config(tmp_path / "run.cfg").measurements == str(tmp_path / "m.csv")


# -- command line ---------------------------------------------------------------


def check_manifest(root: Path):
    lines = (root / "manifest.txt").read_text().splitlines()
    assert lines
    for line in lines:
        digest, name = line.split("  ")
        assert hashlib.sha256((root / name).read_bytes()).hexdigest() == digest


def test_usage_errors(capsys):
    assert main(["bogus"]) == 2
    assert main(["mesh", "--out", "x"]) == 2


def test_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("contact_impedance = 0\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert err.startswith("eit: error[config]:") and "sigma_minus" in err
    assert main(["invert", "--out", str(tmp_path / "o")]) == 3


def test_mesh_command(tmp_path):
    out = tmp_path / "mesh.txt"
    assert main(["mesh", "--h", "2.5", "--out", str(out)]) == 0
    assert out.stat().st_size > 0
    assert main(["mesh", "--h", "2.5", "--electrodes", "40", "--width", "3", "--out", str(out)]) == 3


def test_cbc_command(tmp_path):
    out = tmp_path / "z.txt"
    assert main(["cbc", "--n", "64", "--s", "5", "--out", str(out)]) == 0
    z = [int(v) for v in out.read_text().split("\n") if v and not v.startswith("#")]
    assert len(z) == 5 and z[0] == 1


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = root / "run.cfg"
    cfg.write_text("dimension = 4\nfine_h = 0.9\ngrid = 16\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "sim"), "--seed", "4"]) == 0
    return root / "sim"


def test_simulate_outputs(simulated):
    for name in ("measurements.csv", "truth.pgm", "config.cfg", "metadata.txt"):
        assert (simulated / name).exists()
    check_manifest(simulated)
    data = read_measurements(simulated / "measurements.csv")
    assert data.delta.shape == (16, 15)
    assert data.metadata["truth_seed"] == "4" and data.metadata["noise_seed"] == "4"
    assert "inverse_crime_warning" not in data.metadata


def test_simulate_flags_inverse_crime(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dimension = 2\nfine_h = 1.496\ngrid = 8\n")
    with pytest.warns(UserWarning, match="within a factor"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert "inverse_crime_warning" in read_measurements(tmp_path / "s" / "measurements.csv").metadata


def test_invert_outputs(simulated, tmp_path):
    out = tmp_path / "inv"
    args = ["invert", "--config", str(simulated / "config.cfg"), "--out", str(out), "--n", "6", "--shifts", "2"]
    assert main(args) == 0
    check_manifest(out)
    rows = (out / "posterior.csv").read_text().splitlines()
    assert rows[0] == "x,y,mean,variance,margin" and "np." not in rows[1]
    assert (out / "mean.pgm").read_text().startswith("P2")
    assert "variance_clamped" in (out / "diagnostics.txt").read_text()


def test_converge_outputs(simulated, tmp_path):
    out = tmp_path / "conv"
    args = ["converge", "--config", str(simulated / "config.cfg"), "--out", str(out),
            "--levels", "5:6", "--shifts", "3", "--method", "both", "--quiet"]
    assert main(args) == 0
    check_manifest(out)
    for sub in ("qmc", "mc"):
        assert (out / sub / "rms.csv").read_text().startswith("n,rms\n32,")
    assert "'qmc/rms.csv'" in (out / "figure3.gp").read_text()
    args[args.index("--shifts") + 1] = "1"
    assert main(args) == 3


def test_console_script_installed():
    r = subprocess.run([sys.executable, "-m", "eitqmc.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("eit ")
